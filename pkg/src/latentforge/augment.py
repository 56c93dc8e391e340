import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import FrozenSet, Iterable, List, Optional, Tuple

import torch
from torch.nn import functional as F

from latentforge.models import DTYPE, ImageGrid
from latentforge.networks import Scorer
from latentforge.utils import RngStream


class Augmentation(Enum):
    COLOR = 1
    TRANSLATE = 2
    RESIZE = 3
    CUTOUT = 4

    @staticmethod
    def from_string(s: str):
        match(s.lower()):
            case "color":
                return Augmentation.COLOR
            case "translate":
                return Augmentation.TRANSLATE
            case "resize":
                return Augmentation.RESIZE
            case "cutout":
                return Augmentation.CUTOUT
            case _:
                raise ValueError(f"Invalid augmentation '{s}'")

    def __str__(self):
        return self.name.lower()


ALL_AUGMENTATIONS = frozenset(Augmentation)


@dataclass(frozen=True)
class AugmentationRanges:
    """
    Sampling ranges of the random augmentations.

    :param float brightness: Per-channel offsets are drawn from [-brightness, brightness]
    :param (float, float) contrast: Range of the contrast scale
    :param float translate_frac: Maximum shift as a fraction of the image size
    :param (float, float) resize: Range of the zoom factor
    :param float cutout_frac: Side of the cutout box as a fraction of min(H, W)
    """
    brightness: float = 0.2
    contrast: Tuple[float, float] = (0.5, 1.5)
    translate_frac: float = 0.125
    resize: Tuple[float, float] = (0.75, 1.25)
    cutout_frac: float = 0.25

    def __post_init__(self):
        if self.brightness < 0: raise ValueError("brightness range must be non-negative")
        if not 0 < self.contrast[0] <= self.contrast[1]:
            raise ValueError(f"Invalid contrast range {self.contrast}")
        if not 0 <= self.translate_frac < 1: raise ValueError("translate_frac must lie in [0, 1)")
        if not 0 < self.resize[0] <= self.resize[1]:
            raise ValueError(f"Invalid resize range {self.resize}")
        if not 0 <= self.cutout_frac <= 1: raise ValueError("cutout_frac must lie in [0, 1]")


@dataclass(frozen=True)
class AugmentationParams:
    """
    One draw of augmentation parameters. The defaults are the identity.

    :param (float, float, float) brightness: Per-channel offset b
    :param float contrast: Scale c around the image mean
    :param (int, int) translate: Pixel shift (dy, dx)
    :param float scale: Zoom factor r around the image center
    :param Optional[(int, int, int, int)] cutout: Zeroed box (top, left, height, width)
    """
    brightness: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    contrast: float = 1.0
    translate: Tuple[int, int] = (0, 0)
    scale: float = 1.0
    cutout: Optional[Tuple[int, int, int, int]] = None

    @property
    def resamples(self) -> bool:
        return self.translate != (0, 0) or self.scale != 1.0


@dataclass(frozen=True)
class AugSpec:
    """
    Which augmentations to apply and how many draws to average.

    :param FrozenSet[Augmentation] enabled:
    :param int n_draws: Monte Carlo sample size
    :param RngStream stream: Source of the augmentation draws
    :param AugmentationRanges ranges:
    """
    enabled: FrozenSet[Augmentation] = ALL_AUGMENTATIONS
    n_draws: int = 16
    stream: RngStream = field(default_factory=lambda: RngStream(0))
    ranges: AugmentationRanges = field(default_factory=AugmentationRanges)

    def __post_init__(self):
        if self.n_draws < 1:
            raise ValueError(f"n_draws needs to be at least 1, got {self.n_draws}")
        object.__setattr__(self, "enabled", frozenset(self.enabled))

    def fork(self, child):
        return replace(self, stream=self.stream.fork(child))

    def with_enabled(self, enabled: Iterable[Augmentation]):
        return replace(self, enabled=frozenset(enabled))


def draw_params(spec: AugSpec, height: int, width: int) -> List[AugmentationParams]:
    """
    Draws `n_draws` parameter records from the stream of `spec`. Every field is
    drawn in a fixed order even when disabled, so toggling one augmentation
    leaves the draws of the others unchanged.
    """
    r = spec.ranges
    gen = spec.stream.generator()
    max_dy = math.floor(r.translate_frac * height)
    max_dx = math.floor(r.translate_frac * width)
    side = math.floor(r.cutout_frac * min(height, width))

    params = []
    for _ in range(spec.n_draws):
        brightness = tuple(float(b) for b in gen.uniform(-r.brightness, r.brightness, 3))
        contrast = float(gen.uniform(*r.contrast))
        translate = (int(gen.integers(-max_dy, max_dy, endpoint=True)),
                     int(gen.integers(-max_dx, max_dx, endpoint=True)))
        scale = float(gen.uniform(*r.resize))
        top = int(gen.integers(0, height - side, endpoint=True))
        left = int(gen.integers(0, width - side, endpoint=True))

        p = AugmentationParams()
        if Augmentation.COLOR in spec.enabled:
            p = replace(p, brightness=brightness, contrast=contrast)
        if Augmentation.TRANSLATE in spec.enabled:
            p = replace(p, translate=translate)
        if Augmentation.RESIZE in spec.enabled:
            p = replace(p, scale=scale)
        if Augmentation.CUTOUT in spec.enabled and side > 0:
            p = replace(p, cutout=(top, left, side, side))
        params.append(p)
    return params


def _sampling_grid(p: AugmentationParams, height: int, width: int) -> torch.Tensor:
    """
    grid_sample grid of a shift followed by a zoom about the image center:
    out[q] = in[c + (q - c) / r - d]
    """
    rows = torch.arange(height, dtype=DTYPE)
    cols = torch.arange(width, dtype=DTYPE)
    c_row, c_col = (height - 1) / 2, (width - 1) / 2
    src_rows = c_row + (rows - c_row) / p.scale - p.translate[0]
    src_cols = c_col + (cols - c_col) / p.scale - p.translate[1]
    # Pixel index -> normalized coordinate for align_corners=False
    norm_rows = (2 * src_rows + 1) / height - 1
    norm_cols = (2 * src_cols + 1) / width - 1
    grid_rows, grid_cols = torch.meshgrid(norm_rows, norm_cols, indexing="ij")
    return torch.stack([grid_cols, grid_rows], dim=-1)


def apply_batch(params: List[AugmentationParams], image: ImageGrid) -> torch.Tensor:
    """
    Applies every params record to the image in the order
    color -> translate -> resize -> cutout.

    :param Tensor[H, W, 3] image:
    :return Tensor[n, H, W, 3]:
    """
    height, width = image.shape[-3], image.shape[-2]
    n = len(params)

    # Color
    brightness = torch.tensor([p.brightness for p in params], dtype=DTYPE).view(n, 1, 1, 3)
    contrast = torch.tensor([p.contrast for p in params], dtype=DTYPE).view(n, 1, 1, 1)
    mean = image.mean()
    x = contrast * (image - mean) + mean + brightness

    # Translate and resize in one bilinear resampling
    resampled = [i for i, p in enumerate(params) if p.resamples]
    if resampled:
        grids = torch.stack([_sampling_grid(params[i], height, width) for i in resampled])
        moved = F.grid_sample(
            x[resampled].permute(0, 3, 1, 2), grids,
            mode="bilinear", padding_mode="zeros", align_corners=False
        ).permute(0, 2, 3, 1)
        lookup = {i: k for k, i in enumerate(resampled)}
        x = torch.stack([moved[lookup[i]] if i in lookup else x[i] for i in range(n)])

    # Cutout
    if any(p.cutout is not None for p in params):
        mask = torch.ones((n, height, width, 1), dtype=DTYPE)
        for i, p in enumerate(params):
            if p.cutout is None: continue
            top, left, h, w = p.cutout
            mask[i, top:top + h, left:left + w] = 0
        x = x * mask

    return x


def apply(params: AugmentationParams, image: ImageGrid) -> ImageGrid:
    return apply_batch([params], image)[0]


def apply_vjp(params: AugmentationParams, image: ImageGrid, cotangent: ImageGrid) -> ImageGrid:
    image = image.detach().requires_grad_(True)
    with torch.enable_grad():
        out = apply(params, image)
        (grad,) = torch.autograd.grad(out, image, cotangent)
    return grad


def augclip_score(scorer: Scorer, embedding: torch.Tensor, image: ImageGrid, spec: AugSpec) -> torch.Tensor:
    """ Differentiable Monte Carlo estimate of the augmentation-averaged score """
    if not spec.enabled:
        return scorer(embedding, image)
    params = draw_params(spec, image.shape[-3], image.shape[-2])
    scores = scorer(embedding, apply_batch(params, image))
    return scores.sum() / len(params)


def augclip_estimate(scorer: Scorer, query: str, image: ImageGrid, spec: AugSpec) -> Tuple[float, ImageGrid]:
    """ The smoothed score of an image and its gradient w.r.t. the image """
    embedding = scorer.embed_text(query)
    image = image.detach().requires_grad_(True)
    with torch.enable_grad():
        s = augclip_score(scorer, embedding, image, spec)
        (grad,) = torch.autograd.grad(s, image)
    return s.detach().item(), grad
