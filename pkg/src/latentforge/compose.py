import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import sparse
from scipy.sparse import linalg
from torch.nn import functional as F

from latentforge.augment import AugSpec, augclip_score
from latentforge.dbgd import BarrierSettings, BiObjectiveValue, dbgd_optimize
from latentforge.models import (
    DTYPE, Z_BOUND, BasisEnsemble, DimensionError, ImageGrid, LatentCode, ScoreTrace, effective_code
)
from latentforge.module_overrides import TraceWriter, tqdm
from latentforge.networks import Generator, Scorer, generate
from latentforge.optim import OptimSettings


class Anchor(Enum):
    START = 1
    CENTER = 2
    END = 3

    @staticmethod
    def from_string(s: str):
        match(s.lower()):
            case "left" | "top":
                return Anchor.START
            case "center":
                return Anchor.CENTER
            case "right" | "bottom":
                return Anchor.END
            case _:
                raise ValueError(f"Invalid anchor '{s}'")

    def offset(self, size: int, patch: int) -> int:
        match(self):
            case Anchor.START:
                return 0
            case Anchor.CENTER:
                return (size - patch) // 2
            case Anchor.END:
                return size - patch


HORIZONTAL_NAMES = {Anchor.START: "left", Anchor.CENTER: "center", Anchor.END: "right"}
VERTICAL_NAMES = {Anchor.START: "top", Anchor.CENTER: "center", Anchor.END: "bottom"}


@dataclass(frozen=True)
class CompositionParams:
    """
    Scale factor and paste position of the foreground.

    :param float alpha: Scale factor in (0, 1]
    :param Anchor horizontal: left, center or right
    :param Anchor vertical: top, center or bottom
    """
    alpha: float
    horizontal: Anchor = Anchor.CENTER
    vertical: Anchor = Anchor.CENTER

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    @staticmethod
    def from_position(alpha: float, position: str):
        """ `position` reads "<horizontal>-<vertical>", e.g. "left-top" """
        horizontal, _, vertical = position.partition("-")
        if horizontal not in ("left", "center", "right") or vertical not in ("top", "center", "bottom"):
            raise ValueError(f"Invalid position '{position}'")
        return CompositionParams(alpha, Anchor.from_string(horizontal), Anchor.from_string(vertical))

    @property
    def position(self) -> str:
        return f"{HORIZONTAL_NAMES[self.horizontal]}-{VERTICAL_NAMES[self.vertical]}"

    def region(self, height: int, width: int) -> Tuple[int, int, int, int]:
        """ (top, left, h, w) of the paste region """
        h, w = math.floor(self.alpha * height), math.floor(self.alpha * width)
        if h < 1 or w < 1:
            raise ValueError(f"alpha={self.alpha} scales a {height}x{width} image below one pixel")
        return self.vertical.offset(height, h), self.horizontal.offset(width, w), h, w


POSITIONS = [
    f"{HORIZONTAL_NAMES[h]}-{VERTICAL_NAMES[v]}"
    for v in (Anchor.START, Anchor.CENTER, Anchor.END)
    for h in (Anchor.START, Anchor.CENTER, Anchor.END)
]


def default_grid(alphas: Sequence[float] = (0.65, 0.5), positions: Sequence[str] = POSITIONS) -> List[CompositionParams]:
    return [CompositionParams.from_position(alpha, pos) for alpha in alphas for pos in positions]


def resize_to(image: ImageGrid, height: int, width: int) -> ImageGrid:
    """ Bilinear resampling; images that already have the size are returned as they are """
    if image.shape[-3] == height and image.shape[-2] == width:
        return image
    x = image.permute(2, 0, 1).unsqueeze(0)
    x = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)
    return x[0].permute(1, 2, 0)


def crop(bg: ImageGrid, params: CompositionParams) -> ImageGrid:
    top, left, h, w = params.region(bg.shape[0], bg.shape[1])
    return bg[top:top + h, left:left + w]


def paste(patch: ImageGrid, bg: ImageGrid, params: CompositionParams) -> ImageGrid:
    """ Overwrites the paste region of `bg` with a patch of the region's size """
    top, left, h, w = params.region(bg.shape[0], bg.shape[1])
    if patch.shape != (h, w, bg.shape[2]):
        raise DimensionError(f"Patch of shape {tuple(patch.shape)} does not fit region {h}x{w}")
    out = bg.clone()
    out[top:top + h, left:left + w] = patch
    return out


def fuse(fg: ImageGrid, bg: ImageGrid, params: CompositionParams) -> ImageGrid:
    """ Scales the foreground by alpha and pastes it onto the background """
    _, _, h, w = params.region(bg.shape[0], bg.shape[1])
    return paste(resize_to(fg, h, w), bg, params)


@dataclass(frozen=True)
class PerceptualSettings:
    """
    :param int levels: Number of gaussian pyramid levels
    :param int window: Side of the non-overlapping windows of the local statistics
    :param Optional[List[float]] weights: Per-level weights, uniform by default
    """
    levels: int = 3
    window: int = 4
    weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.levels < 1: raise ValueError("A pyramid needs at least one level")
        if self.window < 1: raise ValueError("The statistics window needs at least one pixel")
        if self.weights is not None:
            if len(self.weights) != self.levels:
                raise ValueError(f"Got {len(self.weights)} weights for {self.levels} levels")
            if any(w < 0 for w in self.weights): raise ValueError("Level weights must be non-negative")
            object.__setattr__(self, "weights", tuple(self.weights))


_BINOMIAL = torch.tensor([1., 4., 6., 4., 1.], dtype=DTYPE) / 16


def pyramid(image: ImageGrid, levels: int) -> List[torch.Tensor]:
    """
    Gaussian pyramid of an [H, W, 3] image as [1, 3, H_l, W_l] tensors. Stops
    early once a level is a single pixel.
    """
    x = image.permute(2, 0, 1).unsqueeze(0)
    out = [x]
    kernel_rows = _BINOMIAL.view(1, 1, 5, 1).repeat(3, 1, 1, 1)
    kernel_cols = _BINOMIAL.view(1, 1, 1, 5).repeat(3, 1, 1, 1)
    for _ in range(levels - 1):
        if min(x.shape[-2:]) < 2: break
        x = F.pad(x, (2, 2, 2, 2), mode="replicate")
        x = F.conv2d(x, kernel_rows, stride=(2, 1), groups=3)
        x = F.conv2d(x, kernel_cols, stride=(1, 2), groups=3)
        out.append(x)
    return out


def _local_stats(x: torch.Tensor, window: int) -> Tuple[torch.Tensor, torch.Tensor]:
    kernel = (min(window, x.shape[-2]), min(window, x.shape[-1]))
    mean = F.avg_pool2d(x, kernel, stride=kernel, ceil_mode=True)
    mean_sq = F.avg_pool2d(x * x, kernel, stride=kernel, ceil_mode=True)
    std = torch.sqrt((mean_sq - mean * mean).clamp(min=0) + 1e-8)
    return mean, std


def perceptual_loss(a: ImageGrid, b: ImageGrid, settings: PerceptualSettings = PerceptualSettings()) -> torch.Tensor:
    """
    Weighted sum over pyramid levels of the mean over windows of
    (mu_a - mu_b)^2 + (sigma_a - sigma_b)^2. Symmetric and non-negative.
    """
    if a.shape != b.shape:
        raise DimensionError(f"Perceptual loss of images with shapes {tuple(a.shape)} and {tuple(b.shape)}")
    levels_a, levels_b = pyramid(a, settings.levels), pyramid(b, settings.levels)
    weights = settings.weights or (1.0,) * settings.levels
    weights = weights[:len(levels_a)]
    total = sum(weights)
    loss = torch.zeros((), dtype=DTYPE)
    if total == 0: return loss
    for weight, la, lb in zip(weights, levels_a, levels_b):
        mu_a, sigma_a = _local_stats(la, settings.window)
        mu_b, sigma_b = _local_stats(lb, settings.window)
        loss = loss + weight / total * ((mu_a - mu_b) ** 2 + (sigma_a - sigma_b) ** 2).mean()
    return loss


@dataclass(frozen=True, eq=False)
class FuseState:
    """ Foreground and background ensembles plus the fixed composition params """
    fg: BasisEnsemble
    bg: BasisEnsemble
    params: CompositionParams

    def __post_init__(self):
        if self.fg.basis_z.shape[1:] != self.bg.basis_z.shape[1:] or self.fg.basis_y.shape[1:] != self.bg.basis_y.shape[1:]:
            raise DimensionError("Foreground and background codes need the same dims")

    def to_vector(self, learn_weights: bool = True) -> torch.Tensor:
        return torch.cat([self.fg.to_vector(learn_weights), self.bg.to_vector(learn_weights)])

    def with_vector(self, vector: torch.Tensor, learn_weights: bool = True):
        n_fg = self.fg.to_vector(learn_weights).numel()
        return FuseState(
            self.fg.with_vector(vector[:n_fg], learn_weights),
            self.bg.with_vector(vector[n_fg:], learn_weights),
            self.params
        )

    def detach(self):
        return FuseState(self.fg.detach(), self.bg.detach(), self.params)


@dataclass(frozen=True)
class ComposeSettings:
    opt: OptimSettings = field(default_factory=OptimSettings)
    barrier: BarrierSettings = field(default_factory=BarrierSettings)
    per: PerceptualSettings = field(default_factory=PerceptualSettings)


def fuse_value(gen: Generator, scorer: Scorer, embedding: torch.Tensor, state: FuseState, x: torch.Tensor,
               aug: AugSpec, settings: ComposeSettings, z_bound: Optional[float] = Z_BOUND) -> BiObjectiveValue:
    """ Smoothed score of the fused image and perceptual loss of the pasted foreground at parameters `x` """
    learn_weights = settings.opt.learn_weights
    x_leaf = x.detach().requires_grad_(True)
    with torch.enable_grad():
        current = state.with_vector(x_leaf, learn_weights)
        fg_code = effective_code(current.fg, z_bound)
        bg_code = effective_code(current.bg, z_bound)
        image_fg = gen(fg_code.z, fg_code.y)
        image_bg = gen(bg_code.z, bg_code.y)
        _, _, h, w = state.params.region(gen.height, gen.width)
        patch = resize_to(image_fg, h, w)

        s = augclip_score(scorer, embedding, paste(patch, image_bg, state.params), aug)
        loss = perceptual_loss(patch, crop(image_bg, state.params), settings.per)
        (grad_s,) = torch.autograd.grad(s, x_leaf, retain_graph=True)
        (grad_l,) = torch.autograd.grad(loss, x_leaf)
    return BiObjectiveValue(s.detach().item(), grad_s, loss.detach().item(), grad_l)


def fuse_objectives(gen: Generator, scorer: Scorer, query: str, state: FuseState, aug: AugSpec,
                    settings: ComposeSettings = ComposeSettings(),
                    z_bound: Optional[float] = Z_BOUND) -> BiObjectiveValue:
    """ (s_fuse, grad s_fuse, l_fuse, grad l_fuse) w.r.t. the concatenated fg and bg parameters """
    x = state.to_vector(settings.opt.learn_weights)
    return fuse_value(gen, scorer, scorer.embed_text(query), state, x, aug, settings, z_bound)


def fused_image(gen: Generator, state: FuseState, z_bound: Optional[float] = Z_BOUND) -> ImageGrid:
    """ The composed image of a state, with hard-clamped generator outputs """
    image_fg = generate(gen, effective_code(state.fg, z_bound))
    image_bg = generate(gen, effective_code(state.bg, z_bound))
    return fuse(image_fg, image_bg, state.params)


def compose_optimize(gen: Generator, scorer: Scorer, query: str, init_fg: Sequence[LatentCode],
                     init_bg: Sequence[LatentCode], params: CompositionParams, settings: ComposeSettings,
                     aug: AugSpec, writer: Optional[TraceWriter] = None, tag: str = "compose",
                     progress: bool = False, z_bound: Optional[float] = Z_BOUND
                     ) -> Tuple[FuseState, ScoreTrace, ImageGrid]:
    """
    Co-optimizes foreground and background: maximizes the smoothed score of
    the fused image and, within its maxima, minimizes the perceptual loss
    between the pasted foreground and the background beneath it. Step t
    draws its augmentations from `aug.fork(t)`.
    """
    split = settings.opt.split_weights
    state = FuseState(
        BasisEnsemble.from_codes(init_fg, split_weights=split),
        BasisEnsemble.from_codes(init_bg, split_weights=split),
        params
    )
    for code in state.fg.basis + state.bg.basis: gen.check_code(code)
    embedding = scorer.embed_text(query)

    def objective(x: torch.Tensor, t: int) -> BiObjectiveValue:
        return fuse_value(gen, scorer, embedding, state, x, aug.fork(t), settings, z_bound)

    x0 = state.to_vector(settings.opt.learn_weights)
    x, trace = dbgd_optimize(objective, x0, settings.barrier, settings.opt, writer=writer, tag=tag, progress=progress)
    final = state.with_vector(x, settings.opt.learn_weights).detach()
    return final, trace, fused_image(gen, final, z_bound)


class GridResult(NamedTuple):
    index: int
    params: CompositionParams
    state: FuseState
    trace: ScoreTrace
    fused: ImageGrid
    score: float # Smoothed score of `fused`, re-evaluated on the shared evaluation stream
    loss: float # Final perceptual loss


def grid_search_compose(gen: Generator, scorer: Scorer, query: str, init_fg: Sequence[LatentCode],
                        init_bg: Sequence[LatentCode], grid: Sequence[CompositionParams],
                        settings: ComposeSettings, aug: AugSpec, eval_aug: AugSpec, threads: int = 1,
                        writer: Optional[TraceWriter] = None, progress: bool = False,
                        z_bound: Optional[float] = Z_BOUND) -> Tuple[GridResult, List[GridResult]]:
    """
    Runs `compose_optimize` for every composition candidate and returns the
    one whose fused image has the highest smoothed score, plus all results
    in candidate order. Candidate i optimizes with `aug.fork(i)`; all
    candidates are re-scored with `eval_aug`. Ties go to the lower index.
    """
    if len(grid) == 0:
        raise ValueError("The composition grid needs at least one candidate")
    embedding = scorer.embed_text(query)

    def run(i: int) -> GridResult:
        state, trace, image = compose_optimize(
            gen, scorer, query, init_fg, init_bg, grid[i], settings, aug.fork(i),
            writer=writer, tag=f"compose/cand_{i}", z_bound=z_bound
        )
        with torch.no_grad():
            score = float(augclip_score(scorer, embedding, image, eval_aug))
        return GridResult(i, grid[i], state, trace, image, score, trace.last.loss)

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        results = list(tqdm(pool.map(run, range(len(grid))), total=len(grid), desc="grid search", disable=not progress))

    best = min(results, key=lambda r: (-r.score, r.index))
    return best, results


class BlendResult(NamedTuple):
    image: ImageGrid
    converged: bool
    residual: float # Max over channels of |A delta - b|_inf
    energies: List[List[float]] # Per channel CG energy 1/2 x^T A x - b^T x after every iteration
    residuals: List[List[float]] # Per channel |A x - b|_inf after every iteration


def poisson_system(height: int, width: int) -> sparse.csr_matrix:
    """ 5-point Laplacian with Dirichlet boundary on a height x width grid of unknowns """
    def second_difference(n):
        return sparse.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
    return (sparse.kron(sparse.identity(height), second_difference(width))
            + sparse.kron(second_difference(height), sparse.identity(width))).tocsr()


def poisson_rhs(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """
    Right-hand side for the correction delta = u - source on the strict
    interior of a region whose 1-pixel ring is fixed to `target`.
    """
    d = target - source
    b = np.zeros((source.shape[0] - 2, source.shape[1] - 2))
    b[0, :] += d[0, 1:-1]
    b[-1, :] += d[-1, 1:-1]
    b[:, 0] += d[1:-1, 0]
    b[:, -1] += d[1:-1, -1]
    return b.reshape(-1)


def poisson_blend(fg_scaled: ImageGrid, bg: ImageGrid, params: CompositionParams, tol: float = 1e-6,
                  max_iters: Optional[int] = None) -> BlendResult:
    """
    Seamless paste of the scaled foreground. Only pixels strictly inside the
    paste region are solved for; they get the Laplacian of the foreground.
    The 1-pixel ring just inside the region keeps the background values and
    serves as the Dirichlet boundary, and everything outside the region is
    the background too. Each channel is solved by conjugate gradients until
    |A x - b|_2 <= tol.
    """
    top, left, h, w = params.region(bg.shape[0], bg.shape[1])
    if tuple(fg_scaled.shape) != (h, w, bg.shape[2]):
        raise DimensionError(f"Foreground of shape {tuple(fg_scaled.shape)} does not fit region {h}x{w}")
    out = bg.detach().to(DTYPE).numpy().copy()
    source = fg_scaled.detach().to(DTYPE).numpy()
    if h < 3 or w < 3:
        # No interior pixels, the region is all border
        return BlendResult(torch.from_numpy(out).clamp(0, 1), True, 0.0, [], [])

    A = poisson_system(h - 2, w - 2)
    maxiter = max_iters or 10 * A.shape[0]
    converged, residual, energies, residuals = True, 0.0, [], []
    for c in range(out.shape[2]):
        target = out[top:top + h, left:left + w, c]
        b = poisson_rhs(source[..., c], target)
        channel_energies, channel_residuals = [], []

        def record(xk):
            Ax = A @ xk
            channel_energies.append(float(0.5 * xk @ Ax - b @ xk))
            channel_residuals.append(float(np.abs(Ax - b).max()))

        delta, info = linalg.cg(A, b, x0=np.zeros_like(b), rtol=0.0, atol=tol, maxiter=maxiter, callback=record)
        channel_residual = float(np.abs(A @ delta - b).max()) if b.size else 0.0
        if info != 0:
            converged = False
            warnings.warn(f"Poisson solve of channel {c} did not converge: residual {channel_residual:.3e}")
        residual = max(residual, channel_residual)
        energies.append(channel_energies)
        residuals.append(channel_residuals)

        interior = source[1:-1, 1:-1, c] + delta.reshape(h - 2, w - 2)
        out[top + 1:top + h - 1, left + 1:left + w - 1, c] = interior

    return BlendResult(torch.from_numpy(out).clamp(0, 1), converged, residual, energies, residuals)
