from dataclasses import dataclass, field
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence

import torch

# Every tensor in the package is double precision so that finite-difference
# checks of the autograd vjps stay meaningful
DTYPE = torch.float64

# BigGAN practice: the noise part of a latent code lives in [-2, 2]
Z_BOUND = 2.0

ImageGrid = torch.Tensor
""" Image tensor of shape [H, W, 3] with channel intensities in [0, 1] """


class NonFiniteError(FloatingPointError):
    """
    Raised when an objective, gradient or update becomes NaN or infinite.

    :param ScoreTrace trace: The trace recorded up to the failing iteration
    """
    def __init__(self, message: str, trace: Optional["ScoreTrace"] = None):
        super().__init__(message)
        self.trace = trace


class DegenerateFeatureError(ValueError):
    """ A text embedding or image feature with zero norm """


class DimensionError(ValueError):
    """ Latent code or image dimensions that do not match a generator or scorer """


class ConfigError(ValueError):
    """ Unknown, ill-typed or missing run configuration keys """


class MalformedImageError(ValueError):
    """ A file that is not a binary PPM image """


class YMode(Enum):
    CLASS_TABLE = 1
    GAUSSIAN = 2

    @staticmethod
    def from_string(s: str):
        match(s.lower()):
            case "class_table":
                return YMode.CLASS_TABLE
            case "gaussian":
                return YMode.GAUSSIAN
            case _:
                raise ValueError(f"Invalid y init mode '{s}'")

    def __str__(self):
        match(self):
            case YMode.CLASS_TABLE:
                return "class_table"
            case YMode.GAUSSIAN:
                return "gaussian"


@dataclass(frozen=True, eq=False)
class LatentCode:
    """
    Generator input xi = (z, y).

    :param Tensor[Z] z: Noise part
    :param Tensor[Y] y: Class embedding part; empty for unconditional generators
    """
    z: torch.Tensor
    y: torch.Tensor

    def __post_init__(self):
        if self.z.dim() != 1 or self.z.numel() < 1:
            raise DimensionError(f"z needs to be a non-empty vector, got shape {tuple(self.z.shape)}")
        if self.y.dim() != 1:
            raise DimensionError(f"y needs to be a vector, got shape {tuple(self.y.shape)}")

    @staticmethod
    def from_lists(z: Sequence[float], y: Sequence[float] = ()):
        return LatentCode(
            torch.tensor(list(z), dtype=DTYPE),
            torch.tensor(list(y), dtype=DTYPE)
        )

    @property
    def z_dim(self) -> int:
        return self.z.numel()

    @property
    def y_dim(self) -> int:
        return self.y.numel()

    def truncated(self, z_bound: float = Z_BOUND):
        return LatentCode(self.z.clamp(-z_bound, z_bound), self.y)

    def detach(self):
        return LatentCode(self.z.detach(), self.y.detach())

    def to_dict(self):
        return {"z": self.z.tolist(), "y": self.y.tolist()}

    @staticmethod
    def from_dict(d: dict):
        return LatentCode.from_lists(d["z"], d.get("y", []))


@dataclass(frozen=True, eq=False)
class BasisEnsemble:
    """
    Over-parameterized latent code: k basis codes combined with k unconstrained
    weights. With `weights_y` set, the class parts get their own coefficients.

    :param Tensor[k, Z] basis_z:
    :param Tensor[k, Y] basis_y:
    :param Tensor[k] weights:
    :param Optional[Tensor[k]] weights_y:
    """
    basis_z: torch.Tensor
    basis_y: torch.Tensor
    weights: torch.Tensor
    weights_y: Optional[torch.Tensor] = None

    def __post_init__(self):
        k = self.weights.numel()
        if k < 1:
            raise ValueError("A basis ensemble needs at least one basis code")
        if self.basis_z.shape[0] != k or self.basis_y.shape[0] != k:
            raise ValueError(f"Basis of size {self.basis_z.shape[0]} does not match {k} weights")
        if self.weights_y is not None and self.weights_y.numel() != k:
            raise ValueError("weights_y needs one entry per basis code")

    @staticmethod
    def from_codes(codes: Sequence[LatentCode], weights: Optional[torch.Tensor] = None,
                   split_weights: bool = False):
        """ Stacks the codes; weights default to 1/k as in the search initialization """
        if len(codes) == 0:
            raise ValueError("A basis ensemble needs at least one basis code")
        k = len(codes)
        if weights is None:
            weights = torch.full((k,), 1.0 / k, dtype=DTYPE)
        return BasisEnsemble(
            basis_z=torch.stack([c.z for c in codes]),
            basis_y=torch.stack([c.y for c in codes]),
            weights=weights,
            weights_y=weights.clone() if split_weights else None,
        )

    @property
    def k(self) -> int:
        return self.weights.numel()

    @property
    def basis(self) -> List[LatentCode]:
        return [LatentCode(z, y) for z, y in zip(self.basis_z, self.basis_y)]

    def to_vector(self, learn_weights: bool = True) -> torch.Tensor:
        """ Flattens the optimized parameters: basis z, basis y and (optionally) weights """
        parts = [self.basis_z.reshape(-1), self.basis_y.reshape(-1)]
        if learn_weights:
            parts.append(self.weights)
            if self.weights_y is not None: parts.append(self.weights_y)
        return torch.cat(parts)

    def with_vector(self, vector: torch.Tensor, learn_weights: bool = True):
        """
        Inverse of `to_vector`. The returned tensors are views of `vector`,
        so gradients flow back into it.
        """
        k, z_dim, y_dim = self.k, self.basis_z.shape[1], self.basis_y.shape[1]
        expected = self.to_vector(learn_weights).numel()
        if vector.numel() != expected:
            raise DimensionError(f"Parameter vector of size {vector.numel()}, expected {expected}")
        i = 0
        basis_z = vector[i:i + k * z_dim].view(k, z_dim); i += k * z_dim
        basis_y = vector[i:i + k * y_dim].view(k, y_dim); i += k * y_dim
        weights, weights_y = self.weights, self.weights_y
        if learn_weights:
            weights = vector[i:i + k]; i += k
            if weights_y is not None:
                weights_y = vector[i:i + k]; i += k
        return BasisEnsemble(basis_z, basis_y, weights, weights_y)

    def detach(self):
        return BasisEnsemble(
            self.basis_z.detach(), self.basis_y.detach(), self.weights.detach(),
            None if self.weights_y is None else self.weights_y.detach()
        )


def effective_code(ensemble: BasisEnsemble, z_bound: Optional[float] = Z_BOUND) -> LatentCode:
    """
    The weighted sum of the basis codes, computed separately on z and y.
    Only z is truncated, after the sum; `z_bound=None` skips truncation.
    """
    z = (ensemble.weights.unsqueeze(1) * ensemble.basis_z).sum(dim=0)
    weights_y = ensemble.weights if ensemble.weights_y is None else ensemble.weights_y
    y = (weights_y.unsqueeze(1) * ensemble.basis_y).sum(dim=0)
    if z_bound is not None:
        z = z.clamp(-z_bound, z_bound)
    return LatentCode(z, y)


class TraceRow(NamedTuple):
    iteration: int
    score: float
    loss: float = 0.0
    lam: float = 0.0
    gnorm_s: float = 0.0
    gnorm_l: float = 0.0


@dataclass
class ScoreTrace:
    """
    Per-iteration log of an optimization run. Rows are appended by the loops
    and their iterations count up from 0 without gaps.
    """
    rows: List[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow):
        expected = len(self.rows)
        if row.iteration != expected:
            raise ValueError(f"Trace expects iteration {expected}, got {row.iteration}")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    @property
    def last(self) -> TraceRow:
        return self.rows[-1]

    def column(self, name: str) -> List[float]:
        return [getattr(row, name) for row in self.rows]
