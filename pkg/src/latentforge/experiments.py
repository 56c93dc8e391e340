"""
Seeded benchmark and property suites behind the `bench` command. Every suite
returns per-seed rows for its CSV and a list of pass/fail property results.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np
import torch

from latentforge.attack import attack_gain_report, random_image
from latentforge.augment import AugSpec, augclip_estimate
from latentforge.compose import CompositionParams, ComposeSettings, PerceptualSettings, compose_optimize, fuse
from latentforge.dbgd import BarrierSettings, BiObjectiveValue, DbgdVariant, dbgd_direction, dbgd_optimize
from latentforge.models import DTYPE, YMode
from latentforge.module_overrides import tqdm
from latentforge.networks import Generator, PlantedScorer, Scorer, SeparableBlobGenerator, TwoBasinScorer
from latentforge.optim import InitSettings, OptimSettings, draw_code, init_search, optimize_single
from latentforge.utils import RngStream

# Planted runs count as successful above this fraction of the maximal score
SUCCESS_FRACTION = 0.99


class PropertyResult(NamedTuple):
    suite: str
    name: str
    value: float
    threshold: float
    passed: bool


def quadratic_oracle(x: torch.Tensor, t: int = 0) -> BiObjectiveValue:
    """
    s(x) = -x1^2 and l(x) = (x1 - 1)^2 + (x2 - 1)^2. The bi-level solution
    is (0, 1), the minimizer of l alone is (1, 1).
    """
    x1, x2 = float(x[0]), float(x[1])
    grad_s = torch.tensor([-2 * x1, 0.0], dtype=DTYPE)
    grad_l = torch.tensor([2 * (x1 - 1), 2 * (x2 - 1)], dtype=DTYPE)
    return BiObjectiveValue(-x1 ** 2, grad_s, (x1 - 1) ** 2 + (x2 - 1) ** 2, grad_l)


def barrier_identity_check(n_pairs: int = 1000, dim: int = 10, settings: BarrierSettings = BarrierSettings(),
                           stream: RngStream = RngStream(0)) -> PropertyResult:
    """ Smallest <-v, grad_s> - beta * |grad_s|^2 over random gradient pairs """
    rng = stream.generator()
    slack = float("inf")
    for _ in range(n_pairs):
        grad_l = torch.from_numpy(rng.standard_normal(dim)).to(DTYPE)
        grad_s = torch.from_numpy(rng.standard_normal(dim)).to(DTYPE)
        v, _ = dbgd_direction(grad_l, grad_s, settings)
        slack = min(slack, float(-v.dot(grad_s)) - settings.beta * float(grad_s.dot(grad_s)))
    return PropertyResult("dbgd_oracle", "barrier_identity", slack, -1e-12, slack >= -1e-12)


def dbgd_oracle_suite(iterations: int = 2000, lr: float = 5e-3, seed: int = 0,
                      step_size: float = 2e-3) -> List[PropertyResult]:
    """
    Checks on `quadratic_oracle` from (0.5, 0). Convergence is judged on plain
    steps of `step_size`: there x1 shrinks by (1 - 2 * step_size) every step,
    which keeps it positive. Adam at a constant lr keeps circling (0, 1) at
    a distance of a few lr, so the Adam runs are only compared by score.
    """
    x0 = torch.tensor([0.5, 0.0], dtype=DTYPE)
    opt = OptimSettings(lr=lr, iterations=iterations)
    results = [barrier_identity_check(stream=RngStream(seed).fork("barrier_identity"))]

    x, trace = dbgd_optimize(quadratic_oracle, x0, BarrierSettings(), opt, step_size=step_size)
    dist = float((x - torch.tensor([0.0, 1.0], dtype=DTYPE)).norm())
    results.append(PropertyResult("dbgd_oracle", "reaches_bilevel_solution", dist, 1e-2, dist < 1e-2))

    lam_min = min(trace.column("lam"))
    results.append(PropertyResult("dbgd_oracle", "lambda_non_negative", lam_min, 0.0, lam_min >= 0))

    _, adam_trace = dbgd_optimize(quadratic_oracle, x0, BarrierSettings(), opt)
    _, inverse_trace = dbgd_optimize(quadratic_oracle, x0, BarrierSettings(variant=DbgdVariant.INVERSE), opt)
    gap = adam_trace.last.score - inverse_trace.last.score
    results.append(PropertyResult("dbgd_oracle", "inverse_variant_loses_score", gap, 0.5, gap >= 0.5))

    scores = trace.column("score")
    worst_drop = max(a - b for a, b in zip(scores[:-1], scores[1:]))
    results.append(PropertyResult("dbgd_oracle", "plain_steps_ascend_s", worst_drop, 1e-5, worst_drop <= 1e-5))
    return results


def stagnation_benchmark(gen: Generator, seeds: int, opt: OptimSettings, aug: AugSpec, init: InitSettings,
                         stream: RngStream, sharpness: float = 2e-3, spurious_weight: float = 0.5,
                         threads: int = 1, progress: bool = False
                         ) -> Tuple[Dict[str, list], PropertyResult]:
    """
    Starts plain-score and smoothed-score optimization at the spurious
    optimum of a two-basin scorer and counts how often each one ends in the
    semantic basin.
    """
    def run(seed: int):
        seed_stream = stream.fork(seed)
        spurious = draw_code(gen, init, seed_stream.fork("spurious"))
        semantic = draw_code(gen, init, seed_stream.fork("semantic"))
        with torch.no_grad():
            scorer = TwoBasinScorer(gen.image(spurious), gen.image(semantic), sharpness, spurious_weight)
        embedding = scorer.embed_text("")
        rows = []
        for objective, spec in (("plain", aug.with_enabled(())), ("augclip", aug)):
            _, _, image = optimize_single(gen, scorer, "", [spurious], opt, spec.fork(seed))
            basin = "semantic" if scorer.in_semantic_basin(image) else "spurious"
            rows.append((seed, objective, scorer.score(embedding, image), basin))
        return rows

    columns = {"seed": [], "objective": [], "final_score": [], "basin": []}
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        for rows in tqdm(pool.map(run, range(seeds)), total=seeds, desc="stagnation", disable=not progress):
            for seed, objective, score, basin in rows:
                columns["seed"].append(seed)
                columns["objective"].append(objective)
                columns["final_score"].append(score)
                columns["basin"].append(basin)

    escapes = {"plain": 0, "augclip": 0}
    for objective, basin in zip(columns["objective"], columns["basin"]):
        if basin == "semantic": escapes[objective] += 1
    passed = escapes["augclip"] >= 2 * escapes["plain"] and escapes["augclip"] > 0
    return columns, PropertyResult("stagnation", "augclip_escapes_twice_as_often",
                                   escapes["augclip"], 2 * escapes["plain"], passed)


def k_ablation_suite(gen: Generator, seeds: int, M: int, ks: Sequence[int], opt: OptimSettings, init: InitSettings,
                     aug: AugSpec, stream: RngStream, threads: int = 1, progress: bool = False
                     ) -> Tuple[Dict[str, list], List[PropertyResult]]:
    """
    Planted-optimum runs for a single random start (M = k = 1) and for the
    top-k of M candidates with every k in `ks`. Augmentations are off, the
    planted score is maximal at its target only without them.
    """
    plain = aug.with_enabled(())
    setups = [(1, 1)] + [(M, k) for k in ks]

    def run(seed: int):
        seed_stream = stream.fork(seed)
        target = draw_code(gen, init, seed_stream.fork("planted_target"))
        scorer = PlantedScorer.from_code(gen, target)
        rows = []
        for m, k in setups:
            candidates = init_search(gen, scorer, "", replace(init, M=m, k=k), plain, seed_stream.fork("init"))
            _, trace, _ = optimize_single(gen, scorer, "", [c.code for c in candidates], opt, plain)
            rows.append((seed, m, k, trace.last.score, trace.last.score >= SUCCESS_FRACTION))
        return rows

    columns = {"seed": [], "M": [], "k": [], "final_score": [], "success": []}
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        for rows in tqdm(pool.map(run, range(seeds)), total=seeds, desc="k ablation", disable=not progress):
            for row in rows:
                for key, value in zip(columns, row): columns[key].append(value)

    def select(m: int, k: int) -> Tuple[float, float]:
        """ Success rate and mean final score of one setup """
        picked = [i for i in range(len(columns["seed"])) if columns["M"][i] == m and columns["k"][i] == k]
        return (float(np.mean([columns["success"][i] for i in picked])),
                float(np.mean([columns["final_score"][i] for i in picked])))

    single_rate, _ = select(1, 1)
    k_compare = 5 if 5 in ks else max(ks)
    multi_rate, _ = select(M, k_compare)
    results = [PropertyResult("k_ablation", f"success_k{k_compare}_at_least_single_start",
                              multi_rate, single_rate, multi_rate >= single_rate)]
    means = [select(M, k)[1] for k in sorted(ks)]
    worst_step = min([b - a for a, b in zip(means[:-1], means[1:])], default=0.0)
    results.append(PropertyResult("k_ablation", "mean_score_non_decreasing_in_k", worst_step, 0.0, worst_step >= 0))
    return columns, results


def fuse_tradeoff_suite(seeds: int, opt: OptimSettings, per: PerceptualSettings, stream: RngStream,
                        height: int = 64, width: int = 64, n_blobs: int = 4, alpha: float = 0.5,
                        threads: int = 1, progress: bool = False) -> Tuple[Dict[str, list], List[PropertyResult]]:
    """
    Planted composition problem: the score is maximal wherever the fused
    image equals a planted fused target, which leaves the background under
    the paste region free. Compares the barrier direction with plain ascent
    on s.
    """
    gen = SeparableBlobGenerator(height, width, n_blobs)
    params = CompositionParams(alpha)
    draws = InitSettings(M=1, k=1, y_mode=YMode.GAUSSIAN)
    plain = AugSpec(enabled=frozenset(), n_draws=1, stream=stream.fork("aug"))
    methods = {
        "dbgd": ComposeSettings(opt, BarrierSettings(), per),
        "s_only": ComposeSettings(opt, BarrierSettings(variant=DbgdVariant.LINEAR, lambda_fixed=1.0), per),
    }

    def run(seed: int):
        seed_stream = stream.fork(seed)
        with torch.no_grad():
            target = fuse(gen.image(draw_code(gen, draws, seed_stream.fork("target_fg"))),
                          gen.image(draw_code(gen, draws, seed_stream.fork("target_bg"))), params)
        scorer = PlantedScorer(target)
        init_fg = draw_code(gen, draws, seed_stream.fork("init_fg"))
        init_bg = draw_code(gen, draws, seed_stream.fork("init_bg"))
        rows = []
        for method, settings in methods.items():
            _, trace, _ = compose_optimize(gen, scorer, "", [init_fg], [init_bg], params, settings, plain)
            rows.append((seed, method, trace.last.score, trace.last.loss))
        return rows

    columns = {"seed": [], "method": [], "s": [], "l": []}
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        for rows in tqdm(pool.map(run, range(seeds)), total=seeds, desc="fuse trade-off", disable=not progress):
            for row in rows:
                for key, value in zip(columns, row): columns[key].append(value)

    def mean(method: str, key: str) -> float:
        return float(np.mean([v for m, v in zip(columns["method"], columns[key]) if m == method]))

    reduction = 1 - mean("dbgd", "l") / max(mean("s_only", "l"), 1e-300)
    s_gap = abs(mean("dbgd", "s") - mean("s_only", "s")) / max(abs(mean("s_only", "s")), 1e-300)
    return columns, [
        PropertyResult("fuse_tradeoff", "loss_reduction", reduction, 0.3, reduction >= 0.3),
        PropertyResult("fuse_tradeoff", "score_gap", s_gap, 0.02, s_gap <= 0.02),
    ]


def fgsm_robustness_suite(gen: Generator, scorer: Scorer, query: str, seeds: int, epsilon: float, aug: AugSpec,
                          stream: RngStream, threads: int = 1, progress: bool = False
                          ) -> Tuple[Dict[str, list], List[PropertyResult]]:
    """ FGSM gains on the plain and on the smoothed score over random images """
    def run(seed: int):
        image = random_image(gen, stream.fork("image").fork(seed))
        report = attack_gain_report(scorer, aug.fork(seed), query, image, epsilon)
        return seed, report.gain_plain, report.gain_aug

    columns = {"seed": [], "gain_plain": [], "gain_aug": []}
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        for row in tqdm(pool.map(run, range(seeds)), total=seeds, desc="fgsm", disable=not progress):
            for key, value in zip(columns, row): columns[key].append(value)

    wins = float(np.mean([p > a for p, a in zip(columns["gain_plain"], columns["gain_aug"])]))
    median_gap = float(np.median(columns["gain_plain"]) - np.median(columns["gain_aug"]))
    return columns, [
        PropertyResult("fgsm", "plain_gain_exceeds_smoothed_gain", wins, 0.8, wins >= 0.8),
        PropertyResult("fgsm", "median_gain_gap", median_gap, 0.0, median_gap > 0),
    ]


def variance_suite(scorer: Scorer, query: str, image: torch.Tensor, aug: AugSpec, repeats: int = 200,
                   n_draws: int = 16) -> PropertyResult:
    """ Doubling the number of draws should halve the variance of the smoothed score """
    def variance(n: int) -> float:
        estimates = [augclip_estimate(scorer, query, image, replace(aug, n_draws=n, stream=aug.stream.fork(n).fork(r)))[0]
                     for r in range(repeats)]
        return float(np.var(estimates, ddof=1))

    ratio = variance(n_draws) / max(variance(2 * n_draws), 1e-300)
    return PropertyResult("variance", f"variance_ratio_{n_draws}_to_{2 * n_draws}", ratio, 2.0, 1.6 <= ratio <= 2.5)
