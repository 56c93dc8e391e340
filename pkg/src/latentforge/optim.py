import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import torch

from latentforge.augment import AugSpec, augclip_score
from latentforge.models import (
    DTYPE, Z_BOUND, BasisEnsemble, ImageGrid, LatentCode, NonFiniteError, ScoreTrace, TraceRow, YMode,
    effective_code
)
from latentforge.module_overrides import TraceWriter, tqdm
from latentforge.networks import Generator, Scorer, generate
from latentforge.utils import RngStream


@dataclass(frozen=True)
class AdamState:
    """
    Moments and step counter of Adam for one flat parameter vector.

    :param Tensor m: First moment
    :param Tensor v: Second moment
    :param int step: Number of updates taken
    """
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @staticmethod
    def zeros(n: int, **hyperparams):
        return AdamState(torch.zeros(n, dtype=DTYPE), torch.zeros(n, dtype=DTYPE), **hyperparams)


def adam_step(state: AdamState, grad: torch.Tensor, params: torch.Tensor) -> Tuple[AdamState, torch.Tensor]:
    """
    One bias-corrected Adam descent step. Callers ascend by passing the
    negated gradient.
    """
    assert grad.shape == params.shape == state.m.shape, "Gradient, parameters and moments need the same shape"
    if not bool(torch.isfinite(grad).all()):
        raise NonFiniteError(f"Non-finite gradient in Adam step {state.step}")
    grad = grad.detach()
    params = params.detach()
    if state.weight_decay:
        grad = grad + state.weight_decay * params

    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** step)
    v_hat = v / (1 - state.beta2 ** step)
    params = params - state.lr * m_hat / (v_hat.sqrt() + state.eps)
    return replace(state, m=m, v=v, step=step), params


@dataclass(frozen=True)
class InitSettings:
    """
    :param int M: Number of sampled candidates
    :param int k: Number of kept candidates
    :param int batch: Number of candidates handed to a worker at once
    :param YMode y_mode: How the class part of a candidate is drawn
    :param int n_classes: Rows of the class embedding table
    :param int table_seed: Seed of the class embedding table
    """
    M: int = 10000
    k: int = 5
    batch: int = 10
    y_mode: YMode = YMode.CLASS_TABLE
    n_classes: int = 1000
    table_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.k <= self.M:
            raise ValueError(f"Need 1 <= k <= M, got k={self.k}, M={self.M}")
        if self.batch < 1: raise ValueError("batch needs to be at least 1")
        if self.n_classes < 1: raise ValueError("n_classes needs to be at least 1")


@dataclass(frozen=True)
class OptimSettings:
    lr: float = 5e-3
    iterations: int = 1000
    weight_decay: float = 0.0
    learn_weights: bool = True # Whether the combination weights are optimized along with the basis
    split_weights: bool = False # Whether z and y get separate combination weights

    def __post_init__(self):
        if self.lr <= 0: raise ValueError(f"lr must be positive, got {self.lr}")
        if self.iterations < 0: raise ValueError(f"iterations must be non-negative, got {self.iterations}")
        if self.weight_decay < 0: raise ValueError("weight_decay must be non-negative")

    def adam(self, n: int) -> AdamState:
        return AdamState.zeros(n, lr=self.lr, weight_decay=self.weight_decay)


class Candidate(NamedTuple):
    index: int
    score: float
    code: LatentCode


def class_table(settings: InitSettings, y_dim: int) -> torch.Tensor:
    """ Fixed class embeddings [n_classes, Y] """
    return RngStream(settings.table_seed).fork("class_table").normal(settings.n_classes, y_dim)


def sample_candidate(gen: Generator, settings: InitSettings, table: Optional[torch.Tensor],
                     stream: RngStream, z_bound: float = Z_BOUND) -> LatentCode:
    """ z from a truncated standard normal, y from the class table or a standard normal """
    rng = stream.generator()
    z = torch.from_numpy(rng.standard_normal(gen.z_dim)).to(DTYPE).clamp(-z_bound, z_bound)
    match settings.y_mode:
        case YMode.CLASS_TABLE:
            y = table[int(rng.integers(0, settings.n_classes))].clone()
        case YMode.GAUSSIAN:
            y = torch.from_numpy(rng.standard_normal(gen.y_dim)).to(DTYPE)
    return LatentCode(z, y)


def draw_code(gen: Generator, settings: InitSettings, stream: RngStream, z_bound: float = Z_BOUND) -> LatentCode:
    """ One code drawn the way `init_search` draws its candidates """
    table = class_table(settings, gen.y_dim) if settings.y_mode == YMode.CLASS_TABLE else None
    return sample_candidate(gen, settings, table, stream, z_bound)


def init_search(gen: Generator, scorer: Scorer, query: str, settings: InitSettings, aug: AugSpec,
                stream: RngStream, threads: int = 1, progress: bool = False,
                z_bound: float = Z_BOUND) -> List[Candidate]:
    """
    Samples M candidates, scores each with the smoothed score and returns
    the k best in descending order. Candidate i draws from `stream.fork(i)`
    and `aug.fork(i)`, so the result does not depend on batching or threads.
    """
    embedding = scorer.embed_text(query)
    table = class_table(settings, gen.y_dim) if settings.y_mode == YMode.CLASS_TABLE else None

    def evaluate(i: int) -> Candidate:
        code = sample_candidate(gen, settings, table, stream.fork(i), z_bound)
        with torch.no_grad():
            score = float(augclip_score(scorer, embedding, gen.image(code), aug.fork(i)))
        return Candidate(i, score, code)

    def evaluate_batch(indices: range) -> List[Candidate]:
        return [evaluate(i) for i in indices]

    batches = [range(i, min(i + settings.batch, settings.M)) for i in range(0, settings.M, settings.batch)]
    candidates: List[Candidate] = []
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool, \
            tqdm(total=settings.M, desc="init search", disable=not progress) as pbar:
        for result in pool.map(evaluate_batch, batches):
            candidates.extend(result)
            pbar.update(len(result))

    candidates.sort(key=lambda c: (-c.score, c.index))
    return candidates[:settings.k]


def _check_finite(value: float, grad: torch.Tensor, t: int, trace: ScoreTrace):
    if not (math.isfinite(value) and bool(torch.isfinite(grad).all())):
        raise NonFiniteError(f"Non-finite objective or gradient at iteration {t}", trace)


def optimize_single(gen: Generator, scorer: Scorer, query: str, basis: Sequence[LatentCode],
                    opt: OptimSettings, aug: AugSpec, writer: Optional[TraceWriter] = None,
                    progress: bool = False, z_bound: Optional[float] = Z_BOUND
                    ) -> Tuple[BasisEnsemble, ScoreTrace, ImageGrid]:
    """
    Adam ascent on the smoothed score of g(sum_i w_i * xi_i), jointly over
    all basis codes and weights. Weights start at 1/k. Step t draws its
    augmentations from `aug.fork(t)`.

    :return: The final ensemble, the trace with `iterations + 1` rows and the final image
    """
    embedding = scorer.embed_text(query)
    ensemble = BasisEnsemble.from_codes(basis, split_weights=opt.split_weights)
    for code in ensemble.basis: gen.check_code(code)
    x = ensemble.to_vector(opt.learn_weights)
    state = opt.adam(x.numel())
    trace = ScoreTrace()

    for t in tqdm(range(opt.iterations + 1), desc="optimize", disable=not progress):
        x_leaf = x.detach().requires_grad_(True)
        with torch.enable_grad():
            code = effective_code(ensemble.with_vector(x_leaf, opt.learn_weights), z_bound)
            s = augclip_score(scorer, embedding, gen(code.z, code.y), aug.fork(t))
            (grad,) = torch.autograd.grad(s, x_leaf)
        score = s.detach().item()
        _check_finite(score, grad, t, trace)

        row = TraceRow(t, score, gnorm_s=float(grad.norm()))
        trace.append(row)
        if writer: writer.add_trace_row("optimize", row)

        if t < opt.iterations:
            state, x = adam_step(state, -grad, x)

    final = ensemble.with_vector(x, opt.learn_weights).detach()
    return final, trace, generate(gen, effective_code(final, z_bound))


def optimize_naive(gen: Generator, scorer: Scorer, query: str, code: LatentCode, opt: OptimSettings,
                   aug: AugSpec, z_bound: Optional[float] = Z_BOUND) -> Tuple[LatentCode, ScoreTrace, ImageGrid]:
    """ Adam ascent directly on one latent code, without a basis """
    gen.check_code(code)
    embedding = scorer.embed_text(query)
    z_dim = code.z_dim
    x = torch.cat([code.z, code.y]).detach()
    state = opt.adam(x.numel())
    trace = ScoreTrace()

    def unpack(vector: torch.Tensor) -> LatentCode:
        z = vector[:z_dim]
        if z_bound is not None: z = z.clamp(-z_bound, z_bound)
        return LatentCode(z, vector[z_dim:])

    for t in range(opt.iterations + 1):
        x_leaf = x.detach().requires_grad_(True)
        with torch.enable_grad():
            current = unpack(x_leaf)
            s = augclip_score(scorer, embedding, gen(current.z, current.y), aug.fork(t))
            (grad,) = torch.autograd.grad(s, x_leaf)
        score = s.detach().item()
        _check_finite(score, grad, t, trace)
        trace.append(TraceRow(t, score, gnorm_s=float(grad.norm())))

        if t < opt.iterations:
            state, x = adam_step(state, -grad, x)

    final = unpack(x).detach()
    return final, trace, generate(gen, final)
