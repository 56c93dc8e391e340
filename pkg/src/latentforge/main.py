import os
from typing import Dict, List, Optional

os.environ["OMP_NUM_THREADS"] = "1"

import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import torch
from tap import Tap

from latentforge.attack import AttackTarget, attack_gain_report, attack_image, random_image
from latentforge.compose import grid_search_compose, poisson_blend, resize_to
from latentforge.config import RunConfig
from latentforge.experiments import (
    PropertyResult, dbgd_oracle_suite, fgsm_robustness_suite, fuse_tradeoff_suite, k_ablation_suite,
    stagnation_benchmark, variance_suite
)
from latentforge.models import ConfigError, LatentCode, effective_code
from latentforge.module_overrides import TraceWriter
from latentforge.networks import generate
from latentforge.optim import init_search, optimize_single
from latentforge.utils import RngStream, grid_image, seed_everything, write_ppm, write_rows_csv, write_trace_csv

COMMANDS = ("optimize", "compose", "attack", "interpolate", "bench")


class ArgParser(Tap):
    command: str # One of optimize, compose, attack, interpolate, bench
    config: str # Path of the json run config
    out: str = "output" # Directory all artifacts are written to
    seed: Optional[int] = None # Overrides the seed of the config
    threads: Optional[int] = None # Size of the worker pool. Falls back to $LATENTFORGE_THREADS, then 1
    disable_tensorboard: bool = False # Whether to disable tensorboard
    no_progress: bool = False # Whether to hide progress bars

    def configure(self):
        self.add_argument("command", choices=COMMANDS)


def resolve_threads(args: ArgParser) -> int:
    if args.threads is not None:
        return max(args.threads, 1)
    env_threads = os.environ.get("LATENTFORGE_THREADS")
    if env_threads:
        try:
            return max(int(env_threads), 1)
        except ValueError:
            raise ConfigError(f"LATENTFORGE_THREADS needs to be an integer, got '{env_threads}'")
    return 1


def read_code(path: Optional[str], name: str) -> LatentCode:
    """ Reads a latent code json like the `final_code.json` of an optimize run """
    if path is None:
        raise ConfigError(f"interpolate.{name} needs to be set")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return LatentCode.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Could not read latent code {path}: {e}") from e


def load_config(args: ArgParser) -> RunConfig:
    """ Loads and checks everything a command needs before anything is written """
    config = RunConfig.from_file(args.config)
    if args.seed is not None:
        config = RunConfig.from_dict({**config.to_dict(), "seed": args.seed})
    if args.command == "interpolate":
        gen = config.build_generator()
        for name in ("code_a", "code_b"):
            try:
                gen.check_code(read_code(getattr(config.interpolate, name), name))
            except ValueError as e:
                raise ConfigError(str(e)) from e
    return config


class Experiment:
    """
    Run context of one command: owns the output directory, the text log and
    the tensorboard writer.
    """
    def __init__(self, args: ArgParser, config: RunConfig, threads: int = 1):
        self.config = config
        self.out = Path(args.out)
        self.threads = threads
        self.progress = not args.no_progress
        self.disable_tensorboard = args.disable_tensorboard
        self.writer: Optional[TraceWriter] = None

    def __enter__(self):
        os.makedirs(self.out / "logs", exist_ok=True)
        self.log_file = self.out / "logs" / "run.txt"
        self.start_time = time.time()
        if not self.disable_tensorboard:
            self.writer = TraceWriter(str(self.out / "tensorboard"))
            self.writer.add_config(self.config.to_dict())
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        if self.writer: self.writer.close()
        return False

    def _log(self, s: str):
        with open(self.log_file, "a") as f:
            f.write(f"\n[T: {time.time() - self.start_time:.2f}] {s}")

    def path(self, *parts: str) -> Path:
        path = self.out.joinpath(*parts)
        os.makedirs(path.parent, exist_ok=True)
        return path

    def write_resolved_config(self):
        with open(self.path("resolved_config.json"), "w", encoding="utf-8") as f:
            f.write(self.config.to_json())


def cmd_optimize(exp: Experiment) -> int:
    config = exp.config
    gen, root = config.build_generator(), RngStream(config.seed)
    scorer = config.build_scorer(gen)
    aug = config.aug_spec(root.fork("aug"))

    candidates = init_search(gen, scorer, config.query, config.init_settings(), aug.fork("init"),
                             root.fork("init"), exp.threads, exp.progress, config.z_bound)
    exp._log(f"Init search kept candidates {[c.index for c in candidates]} "
             f"with scores {[round(c.score, 4) for c in candidates]}")
    write_rows_csv(exp.path("init_topk.csv"), {
        "rank": list(range(len(candidates))),
        "index": [c.index for c in candidates],
        "score": [c.score for c in candidates],
    })

    ensemble, trace, image = optimize_single(
        gen, scorer, config.query, [c.code for c in candidates], config.optim_settings(),
        aug.fork("optimize"), exp.writer, exp.progress, config.z_bound
    )
    exp._log(f"Optimization finished with score {trace.last.score:.6f}")
    write_ppm(image, exp.path("final.ppm"))
    write_trace_csv(trace, exp.path("trace.csv"))
    with open(exp.path("final_code.json"), "w", encoding="utf-8") as f:
        json.dump(effective_code(ensemble, config.z_bound).to_dict(), f, indent=2)
    exp.write_resolved_config()
    return 0


def cmd_compose(exp: Experiment) -> int:
    config = exp.config
    gen, root = config.build_generator(), RngStream(config.seed)
    scorer = config.build_scorer(gen)
    aug = config.aug_spec(root.fork("aug"))
    init = config.init_settings()

    init_fg = init_search(gen, scorer, config.query, init, aug.fork("init_fg"), root.fork("init_fg"),
                          exp.threads, exp.progress, config.z_bound)
    init_bg = init_search(gen, scorer, config.query, init, aug.fork("init_bg"), root.fork("init_bg"),
                          exp.threads, exp.progress, config.z_bound)

    best, results = grid_search_compose(
        gen, scorer, config.query, [c.code for c in init_fg], [c.code for c in init_bg], config.grid(),
        config.compose_settings(), aug.fork("compose"), aug.fork("compose_eval"), exp.threads,
        exp.writer, exp.progress, config.z_bound
    )
    exp._log(f"Best composition: candidate {best.index} ({best.params.alpha}, {best.params.position}) "
             f"with s={best.score:.6f}, l={best.loss:.6f}")

    for result in results:
        write_trace_csv(result.trace, exp.path(f"cand_{result.index}", "trace.csv"))
    write_rows_csv(exp.path("grid_results.csv"), {
        "candidate": [r.index for r in results],
        "alpha": [r.params.alpha for r in results],
        "position": [r.params.position for r in results],
        "s": [r.score for r in results],
        "l": [r.loss for r in results],
    })

    # Poisson blending of the winner
    _, _, h, w = best.params.region(gen.height, gen.width)
    fg = resize_to(generate(gen, effective_code(best.state.fg, config.z_bound)), h, w)
    bg = generate(gen, effective_code(best.state.bg, config.z_bound))
    poisson = config.compose.poisson
    blend = poisson_blend(fg, bg, best.params, poisson.tol, poisson.max_iters)
    if not blend.converged:
        exp._log(f"WARNING: Poisson blending did not converge, residual {blend.residual:.3e}")

    write_ppm(best.fused, exp.path("fused.ppm"))
    write_ppm(blend.image, exp.path("blended.ppm"))
    exp.write_resolved_config()
    return 0


def cmd_attack(exp: Experiment) -> int:
    config = exp.config
    gen, root = config.build_generator(), RngStream(config.seed)
    scorer = config.build_scorer(gen)
    aug = config.aug_spec(root.fork("aug"))
    settings = config.attack_settings()

    def run(i: int):
        image = random_image(gen, root.fork("attack_image").fork(i), config.z_bound)
        report = attack_gain_report(scorer, aug.fork(i), config.query, image, settings.epsilon)
        if i < config.attack.n_images:
            write_ppm(image, exp.path(f"attack_{i}_clean.ppm"))
            for target in AttackTarget:
                attacked = attack_image(scorer, aug.fork(i), config.query, image, replace(settings, target=target))
                write_ppm(attacked, exp.path(f"attack_{i}_{target}.ppm"))
        return i, report

    # map keeps rows in seed order for any pool size
    with ThreadPoolExecutor(max_workers=max(exp.threads, 1)) as pool:
        results = list(pool.map(run, range(config.attack.seeds)))

    columns: Dict[str, List] = {
        "seed": [i for i, _ in results],
        "gain_plain": [report.gain_plain for _, report in results],
        "gain_aug": [report.gain_aug for _, report in results],
    }
    write_rows_csv(exp.path("attack.csv"), columns)
    wins = sum(p > a for p, a in zip(columns["gain_plain"], columns["gain_aug"]))
    exp._log(f"Plain gain exceeded smoothed gain on {wins} of {config.attack.seeds} seeds")
    exp.write_resolved_config()
    return 0


def cmd_interpolate(exp: Experiment) -> int:
    config = exp.config
    gen = config.build_generator()
    code_a = read_code(config.interpolate.code_a, "code_a")
    code_b = read_code(config.interpolate.code_b, "code_b")
    n = config.interpolate.steps

    images = []
    for i in range(n + 1):
        alpha = i / n
        code = LatentCode(alpha * code_a.z + (1 - alpha) * code_b.z, alpha * code_a.y + (1 - alpha) * code_b.y)
        image = generate(gen, code)
        write_ppm(image, exp.path(f"interp_{i:03d}.ppm"))
        images.append(image)

    write_ppm(grid_image(torch.stack(images)[None]), exp.path("interp_strip.ppm"))
    exp.write_resolved_config()
    return 0


def cmd_bench(exp: Experiment) -> int:
    config = exp.config
    bench = config.bench
    gen, root = config.build_generator(), RngStream(config.seed)
    aug = config.aug_spec(root.fork("aug"))
    opt = replace(config.optim_settings(), iterations=bench.iters)
    init = config.init_settings()
    properties: List[PropertyResult] = []

    for suite in bench.suites:
        exp._log(f"Running bench suite {suite}")
        match suite:
            case "stagnation":
                columns, result = stagnation_benchmark(
                    gen, bench.seeds, opt, aug.fork("stagnation"), init, root.fork("stagnation"),
                    config.scorer.sharpness, config.scorer.spurious_weight, exp.threads, exp.progress
                )
                write_rows_csv(exp.path("stagnation.csv"), columns)
                properties.append(result)
            case "dbgd_oracle":
                properties.extend(dbgd_oracle_suite(bench.oracle_iters, config.opt.lr, config.seed))
            case "k_ablation":
                columns, results = k_ablation_suite(
                    gen, bench.seeds, bench.ablation_M, bench.ablation_ks, opt, init, aug.fork("k_ablation"),
                    root.fork("k_ablation"), exp.threads, exp.progress
                )
                write_rows_csv(exp.path("k_ablation.csv"), columns)
                properties.extend(results)
            case "fuse_tradeoff":
                per = config.compose_settings().per
                columns, results = fuse_tradeoff_suite(
                    bench.seeds, opt, per, root.fork("fuse_tradeoff"),
                    config.generator.height, config.generator.width, threads=exp.threads, progress=exp.progress
                )
                write_rows_csv(exp.path("fuse_tradeoff.csv"), columns)
                properties.extend(results)
            case "fgsm":
                columns, results = fgsm_robustness_suite(
                    gen, config.build_scorer(gen), config.query, config.attack.seeds, config.attack.epsilon,
                    aug.fork("fgsm"), root.fork("fgsm"), exp.threads, exp.progress
                )
                write_rows_csv(exp.path("fgsm.csv"), columns)
                properties.extend(results)
            case "variance":
                image = random_image(gen, root.fork("variance_image"), config.z_bound)
                properties.append(variance_suite(config.build_scorer(gen), config.query, image,
                                                 aug.fork("variance"), bench.variance_repeats, aug.n_draws))

    write_rows_csv(exp.path("properties.csv"), {
        "suite": [p.suite for p in properties],
        "name": [p.name for p in properties],
        "value": [p.value for p in properties],
        "threshold": [p.threshold for p in properties],
        "passed": [p.passed for p in properties],
    })
    failed = [f"{p.suite}/{p.name}" for p in properties if not p.passed]
    if failed: exp._log(f"WARNING: Failed properties: {', '.join(failed)}")
    exp.write_resolved_config()
    return 1 if failed else 0


def main(args: ArgParser) -> int:
    try:
        config = load_config(args)
        threads = resolve_threads(args)
    except ConfigError as e:
        print(f"Config error: {e}", file=sys.stderr)
        return 2

    seed_everything(config.seed)
    command = {
        "optimize": cmd_optimize,
        "compose": cmd_compose,
        "attack": cmd_attack,
        "interpolate": cmd_interpolate,
        "bench": cmd_bench,
    }[args.command]

    with Experiment(args, config, threads) as exp:
        exp._log(f"---\nStarting {args.command} for query '{config.query}' with seed {config.seed}")
        try:
            status = command(exp)
        except Exception as e:
            exp._log(f"ERROR: {type(e).__name__}: {e}")
            print(f"{args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
            return 1
        exp._log(f"Finished {args.command} with exit status {status}")
    return status


def cli():
    torch.set_num_threads(1)
    sys.exit(main(ArgParser().parse_args()))


if __name__ == "__main__":
    cli()
