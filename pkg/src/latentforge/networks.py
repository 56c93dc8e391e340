import math
from typing import Tuple

import torch
from torch import nn
from torch.nn import functional as F

from latentforge.models import DTYPE, DegenerateFeatureError, DimensionError, ImageGrid, LatentCode
from latentforge.utils import RngStream

# Width of the smooth clamp inside the differentiable generator path
SOFTCLIP_WIDTH = 0.01


def softclip(x: torch.Tensor, width: float = SOFTCLIP_WIDTH) -> torch.Tensor:
    """
    Smooth version of clamp(x, 0, 1), renormalised so that softclip(0) == 0
    exactly. Saturated pixels keep a small nonzero gradient.
    """
    def raw(t: torch.Tensor):
        return width * (F.softplus(t / width) - F.softplus((t - 1) / width))
    f0 = raw(torch.zeros((), dtype=x.dtype))
    return (raw(x) - f0) / (1 - f0)


def cosine_score(embedding: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
    """
    <e, f> / (|e| |f|) over the last dimension. `feature` may carry leading
    batch dimensions.
    """
    e_norm = embedding.norm(dim=-1)
    f_norm = feature.norm(dim=-1)
    if bool((e_norm == 0).any()) or bool((f_norm == 0).any()):
        raise DegenerateFeatureError("Cosine score of a zero-norm vector")
    return (embedding * feature).sum(dim=-1) / (e_norm * f_norm)


class Generator(nn.Module):
    """
    Differentiable map from a latent code (z, y) to an image of shape [H, W, 3].
    `forward` takes batched z [..., Z] and y [..., Y] and may leave [0, 1]
    slightly; `generate` applies the hard clamp.
    """
    def __init__(self, z_dim: int, y_dim: int, height: int, width: int):
        super().__init__()
        if z_dim < 1 or y_dim < 0:
            raise ValueError(f"Invalid latent dims Z={z_dim}, Y={y_dim}")
        if height < 1 or width < 1:
            raise ValueError(f"Invalid image size {height}x{width}")
        self.z_dim = z_dim
        self.y_dim = y_dim
        self.height = height
        self.width = width

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return self.z_dim, self.y_dim, self.height, self.width

    def check_code(self, code: LatentCode):
        if code.z_dim != self.z_dim or code.y_dim != self.y_dim:
            raise DimensionError(
                f"Latent code with Z={code.z_dim}, Y={code.y_dim} does not match "
                f"generator with Z={self.z_dim}, Y={self.y_dim}")

    def image(self, code: LatentCode) -> ImageGrid:
        """ Differentiable image of one code """
        self.check_code(code)
        return self(code.z, code.y)

    def vjp(self, code: LatentCode, cotangent: ImageGrid) -> LatentCode:
        """ Pulls an image cotangent back to the latent code """
        self.check_code(code)
        z = code.z.detach().requires_grad_(True)
        y = code.y.detach().requires_grad_(True)
        with torch.enable_grad():
            image = self(z, y)
            grad_z, grad_y = torch.autograd.grad(image, (z, y), cotangent, allow_unused=True)
        if grad_y is None: grad_y = torch.zeros_like(y)
        if grad_z is None: grad_z = torch.zeros_like(z)
        return LatentCode(grad_z, grad_y)


def generate(gen: Generator, code: LatentCode) -> ImageGrid:
    """ Deterministic image in [0, 1] """
    gen.check_code(code)
    with torch.no_grad():
        return gen(code.z, code.y).clamp(0, 1)


class BlobGenerator(Generator):
    """
    Renders B gaussian blobs. Blob centers and radii are driven by z through
    fixed seeded matrices, blob colors by y through a linear map.
    """
    def __init__(self, z_dim: int, y_dim: int, height: int, width: int, n_blobs: int = 6, seed: int = 0):
        super().__init__(z_dim, y_dim, height, width)
        assert n_blobs >= 1, "A blob generator needs at least one blob"
        self.n_blobs = n_blobs
        self.seed = seed

        stream = RngStream(seed).fork("blob_generator")
        self.register_buffer("center_map", stream.fork("centers").normal(n_blobs, 2, z_dim))
        self.register_buffer("radius_map", stream.fork("radii").normal(n_blobs, z_dim))
        # Unconditional generators take their colors from z
        color_dim = y_dim if y_dim > 0 else z_dim
        self.register_buffer("color_map", stream.fork("colors").normal(n_blobs, 3, color_dim))
        self.register_buffer("rows", torch.arange(height, dtype=DTYPE))
        self.register_buffer("cols", torch.arange(width, dtype=DTYPE))

        self.r_min = 0.08 * min(height, width)
        self.r_span = 0.25 * min(height, width)

    def blob_params(self, z: torch.Tensor, y: torch.Tensor):
        """ Centers [..., B, 2], radii [..., B] and colors [..., B, 3] """
        z_scaled = z.unsqueeze(-2).unsqueeze(-2) / math.sqrt(self.z_dim)
        centers = torch.tanh((self.center_map * z_scaled).sum(-1)) * 0.5 + 0.5
        centers = centers * torch.tensor([self.height - 1, self.width - 1], dtype=DTYPE)

        radii = self.r_min + self.r_span * torch.sigmoid(
            (self.radius_map * z.unsqueeze(-2)).sum(-1) / math.sqrt(self.z_dim))

        if self.y_dim > 0:
            colors = (self.color_map * y.unsqueeze(-2).unsqueeze(-2)).sum(-1) / math.sqrt(self.y_dim)
        else:
            colors = torch.sigmoid((self.color_map * z_scaled).sum(-1))
        return centers, radii, colors

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> ImageGrid:
        centers, radii, colors = self.blob_params(z, y)
        # Squared distances [..., B, H, W]
        d_rows = (self.rows - centers[..., 0:1]) ** 2
        d_cols = (self.cols - centers[..., 1:2]) ** 2
        dist2 = d_rows.unsqueeze(-1) + d_cols.unsqueeze(-2)
        weights = torch.exp(-dist2 / radii.unsqueeze(-1).unsqueeze(-1) ** 2)
        image = torch.einsum("...bhw,...bc->...hwc", weights, colors)
        return softclip(image)


class SeparableBlobGenerator(BlobGenerator):
    """
    Blob generator whose blobs each own three entries of z (row, column,
    radius) and three entries of y (color), so Z = Y = 3 * B.
    """
    def __init__(self, height: int, width: int, n_blobs: int = 4, seed: int = 0):
        super().__init__(3 * n_blobs, 3 * n_blobs, height, width, n_blobs, seed)

    def blob_params(self, z: torch.Tensor, y: torch.Tensor):
        z_blobs = z.unflatten(-1, (self.n_blobs, 3))
        centers = torch.tanh(z_blobs[..., :2]) * 0.5 + 0.5
        centers = centers * torch.tensor([self.height - 1, self.width - 1], dtype=DTYPE)
        radii = self.r_min + self.r_span * torch.sigmoid(z_blobs[..., 2])
        colors = y.unflatten(-1, (self.n_blobs, 3))
        return centers, radii, colors


class Scorer(nn.Module):
    """
    Text-image relevance score in [-1, 1]. `forward(embedding, image)` accepts
    images with leading batch dimensions and returns one score per image.
    """
    def embed_text(self, query: str) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, embedding: torch.Tensor, image: ImageGrid) -> torch.Tensor:
        raise NotImplementedError

    def score(self, embedding: torch.Tensor, image: ImageGrid) -> float:
        with torch.no_grad():
            return float(self(embedding, image))

    def image_vjp(self, embedding: torch.Tensor, image: ImageGrid, cotangent: float = 1.0) -> ImageGrid:
        """ Gradient of `cotangent * score` w.r.t. the image """
        image = image.detach().requires_grad_(True)
        with torch.enable_grad():
            s = self(embedding, image)
            (grad,) = torch.autograd.grad(s, image, torch.full_like(s, cotangent))
        return grad


class PlantedScorer(Scorer):
    """
    Oracle scorer with a known optimum: score(I) = 1 - 2 * mse(I, target),
    maximal (1.0) exactly at the target image. Ignores the text.
    """
    def __init__(self, target: ImageGrid):
        super().__init__()
        self.register_buffer("target", target.detach().to(DTYPE))

    @staticmethod
    def from_code(gen: Generator, code: LatentCode):
        """ Plants the optimum at the generator's differentiable image of `code` """
        gen.check_code(code)
        with torch.no_grad():
            return PlantedScorer(gen(code.z, code.y))

    def embed_text(self, query: str) -> torch.Tensor:
        return torch.ones(1, dtype=DTYPE)

    def forward(self, embedding: torch.Tensor, image: ImageGrid) -> torch.Tensor:
        if image.shape[-3:] != self.target.shape:
            raise DimensionError(f"Image of shape {tuple(image.shape[-3:])} does not match target {tuple(self.target.shape)}")
        mse = ((image - self.target) ** 2).mean(dim=(-3, -2, -1))
        return 1 - 2 * mse


class HashEmbedScorer(Scorer):
    """
    Synthetic text/image encoder pair. Images are average pooled to 8x8,
    flattened to 192 values and projected by a fixed random matrix; texts are
    mapped to a random vector seeded by a stable hash of the text.
    """
    POOL = 8

    def __init__(self, embed_dim: int = 64, seed: int = 0):
        super().__init__()
        self.embed_dim = embed_dim
        self.stream = RngStream(seed).fork("hash_embed")
        self.register_buffer("projection", self.stream.fork("projection").normal(embed_dim, 3 * self.POOL ** 2))

    def embed_text(self, query: str) -> torch.Tensor:
        e = self.stream.fork(f"text/{query}").normal(self.embed_dim)
        return e / e.norm()

    def features(self, image: ImageGrid) -> torch.Tensor:
        batch_shape = image.shape[:-3]
        x = image.reshape(-1, *image.shape[-3:]).permute(0, 3, 1, 2)
        pooled = F.adaptive_avg_pool2d(x, self.POOL).reshape(x.shape[0], -1)
        f = pooled @ self.projection.T
        return f.reshape(*batch_shape, self.embed_dim)

    def forward(self, embedding: torch.Tensor, image: ImageGrid) -> torch.Tensor:
        return cosine_score(embedding, self.features(image))


class TwoBasinScorer(Scorer):
    """
    Score with a narrow spurious basin around `spurious` (pixel-exact match)
    and a broad semantic basin around `semantic` (correlation of 4x4 pooled
    features). The spurious image scores high without matching the semantic
    target, the way an adversarial image fools a plain score.
    """
    POOL = 4

    def __init__(self, spurious: ImageGrid, semantic: ImageGrid, sharpness: float = 2e-3,
                 spurious_weight: float = 0.5):
        super().__init__()
        assert spurious.shape == semantic.shape, "Both basins need images of the same shape"
        assert 0 <= spurious_weight <= 1
        self.register_buffer("spurious", spurious.detach().to(DTYPE))
        self.register_buffer("semantic", semantic.detach().to(DTYPE))
        self.sharpness = sharpness
        self.spurious_weight = spurious_weight

    def embed_text(self, query: str) -> torch.Tensor:
        return torch.ones(1, dtype=DTYPE)

    def features(self, image: ImageGrid) -> torch.Tensor:
        """ Pooled features, centered per image """
        batch_shape = image.shape[:-3]
        x = image.reshape(-1, *image.shape[-3:]).permute(0, 3, 1, 2)
        pooled = F.adaptive_avg_pool2d(x, self.POOL).reshape(x.shape[0], -1)
        pooled = pooled - pooled.mean(dim=-1, keepdim=True)
        return pooled.reshape(*batch_shape, -1)

    def semantic_similarity(self, image: ImageGrid) -> torch.Tensor:
        return cosine_score(self.features(self.semantic), self.features(image))

    def spurious_similarity(self, image: ImageGrid) -> torch.Tensor:
        return cosine_score(self.features(self.spurious), self.features(image))

    def forward(self, embedding: torch.Tensor, image: ImageGrid) -> torch.Tensor:
        if image.shape[-3:] != self.spurious.shape:
            raise DimensionError(f"Image of shape {tuple(image.shape[-3:])} does not match {tuple(self.spurious.shape)}")
        mse = ((image - self.spurious) ** 2).mean(dim=(-3, -2, -1))
        narrow = torch.exp(-mse / self.sharpness)
        return self.spurious_weight * narrow + (1 - self.spurious_weight) * self.semantic_similarity(image)

    def in_semantic_basin(self, image: ImageGrid) -> bool:
        """ Whether the image's features are closer to the semantic than to the spurious target """
        with torch.no_grad():
            return bool(self.semantic_similarity(image) > self.spurious_similarity(image))


class ScaledScorer(Scorer):
    """ c times another scorer, c > 0 """
    def __init__(self, scorer: Scorer, scale: float):
        super().__init__()
        assert scale > 0, "Scores can only be scaled by positive factors"
        self.scorer = scorer
        self.scale = scale

    def embed_text(self, query: str) -> torch.Tensor:
        return self.scorer.embed_text(query)

    def forward(self, embedding: torch.Tensor, image: ImageGrid) -> torch.Tensor:
        return self.scale * self.scorer(embedding, image)


def score_gradient_wrt_latent(gen: Generator, scorer: Scorer, query: str,
                              code: LatentCode) -> Tuple[float, LatentCode]:
    """ The score of g(code) and its gradient w.r.t. the code """
    embedding = scorer.embed_text(query)
    with torch.no_grad():
        image = gen.image(code)
    score = scorer.score(embedding, image)
    grad = gen.vjp(code, scorer.image_vjp(embedding, image, 1.0))
    return score, grad
