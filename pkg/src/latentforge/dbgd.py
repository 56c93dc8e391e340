import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple, Optional, Tuple

import torch

from latentforge.models import NonFiniteError, ScoreTrace, TraceRow
from latentforge.module_overrides import TraceWriter, tqdm
from latentforge.optim import OptimSettings, adam_step


class DbgdVariant(Enum):
    DBGD = 1
    LINEAR = 2
    INVERSE = 3

    @staticmethod
    def from_string(s: str):
        match(s.lower()):
            case "dbgd":
                return DbgdVariant.DBGD
            case "linear":
                return DbgdVariant.LINEAR
            case "inverse":
                return DbgdVariant.INVERSE
            case _:
                raise ValueError(f"Invalid direction rule '{s}'")

    def __str__(self):
        return self.name.lower()


@dataclass(frozen=True)
class BarrierSettings:
    """
    :param float beta: Barrier coefficient, the guaranteed first-order gain of the primary objective
    :param float tau: Floor of the squared gradient norm in the barrier denominator
    :param DbgdVariant variant: Which direction rule the optimizer follows
    :param float lambda_fixed: Mixing coefficient of the linear combination rule
    """
    beta: float = 1.0
    tau: float = 1e-12
    variant: DbgdVariant = DbgdVariant.DBGD
    lambda_fixed: float = 0.5

    def __post_init__(self):
        if self.beta < 0: raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.tau <= 0: raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0 <= self.lambda_fixed <= 1:
            raise ValueError(f"lambda_fixed must lie in [0, 1], got {self.lambda_fixed}")


def _check_directions(grad_l: torch.Tensor, grad_s: torch.Tensor):
    assert grad_l.shape == grad_s.shape, "Both gradients need the same shape"
    if not (bool(torch.isfinite(grad_l).all()) and bool(torch.isfinite(grad_s).all())):
        raise NonFiniteError("Non-finite gradient in direction computation")


def dbgd_direction(grad_l: torch.Tensor, grad_s: torch.Tensor,
                   settings: BarrierSettings = BarrierSettings()) -> Tuple[torch.Tensor, float]:
    """
    Descent direction for minimizing l while keeping s ascending:
    v = grad_l - lam * grad_s with the smallest lam >= 0 such that
    <-v, grad_s> >= beta * |grad_s|^2.
    """
    _check_directions(grad_l, grad_s)
    gs2 = float(grad_s.dot(grad_s))
    lam = max((settings.beta * gs2 + float(grad_l.dot(grad_s))) / max(gs2, settings.tau), 0.0)
    return grad_l - lam * grad_s, lam


def linear_combo_direction(grad_l: torch.Tensor, grad_s: torch.Tensor, lambda_fixed: float) -> torch.Tensor:
    """ v = (1 - lam) * grad_l - lam * grad_s """
    _check_directions(grad_l, grad_s)
    if not 0 <= lambda_fixed <= 1:
        raise ValueError(f"lambda_fixed must lie in [0, 1], got {lambda_fixed}")
    return (1 - lambda_fixed) * grad_l - lambda_fixed * grad_s


def inverse_bilevel_direction(grad_l: torch.Tensor, grad_s: torch.Tensor,
                              settings: BarrierSettings = BarrierSettings()) -> Tuple[torch.Tensor, float]:
    """
    The barrier rule with the roles swapped: l becomes the primary objective
    and s the secondary one. v = -grad_s + lam * grad_l with the smallest
    lam >= 0 such that <v, grad_l> >= beta * |grad_l|^2.
    """
    _check_directions(grad_l, grad_s)
    gl2 = float(grad_l.dot(grad_l))
    lam = max((settings.beta * gl2 + float(grad_s.dot(grad_l))) / max(gl2, settings.tau), 0.0)
    return -grad_s + lam * grad_l, lam


def direction(grad_l: torch.Tensor, grad_s: torch.Tensor, settings: BarrierSettings) -> Tuple[torch.Tensor, float]:
    match settings.variant:
        case DbgdVariant.DBGD:
            return dbgd_direction(grad_l, grad_s, settings)
        case DbgdVariant.LINEAR:
            return linear_combo_direction(grad_l, grad_s, settings.lambda_fixed), settings.lambda_fixed
        case DbgdVariant.INVERSE:
            return inverse_bilevel_direction(grad_l, grad_s, settings)


class BiObjectiveValue(NamedTuple):
    s: float
    grad_s: torch.Tensor
    l: float # noqa: E741
    grad_l: torch.Tensor


BiObjective = Callable[[torch.Tensor, int], BiObjectiveValue]
""" (parameters, iteration) -> primary score, secondary loss and their gradients """


def dbgd_optimize(objective: BiObjective, x0: torch.Tensor, settings: BarrierSettings, opt: OptimSettings,
                  step_size: Optional[float] = None, writer: Optional[TraceWriter] = None,
                  tag: str = "dbgd", progress: bool = False) -> Tuple[torch.Tensor, ScoreTrace]:
    """
    Maximizes s and, among its maximizers, minimizes l. Every iteration
    descends along the direction of `settings.variant`, treated as a
    gradient by Adam. With `step_size` set, plain steps x - step_size * v
    are taken instead.

    :return: The final parameters and a trace with `opt.iterations + 1` rows
    """
    x = x0.detach().clone()
    state = opt.adam(x.numel())
    trace = ScoreTrace()

    for t in tqdm(range(opt.iterations + 1), desc=tag, disable=not progress):
        value = objective(x, t)
        if not (math.isfinite(value.s) and math.isfinite(value.l)):
            raise NonFiniteError(f"Non-finite objective at iteration {t}", trace)
        try:
            v, lam = direction(value.grad_l, value.grad_s, settings)
        except NonFiniteError as e:
            raise NonFiniteError(f"{e} at iteration {t}", trace) from e

        row = TraceRow(t, value.s, value.l, lam, float(value.grad_s.norm()), float(value.grad_l.norm()))
        trace.append(row)
        if writer: writer.add_trace_row(tag, row)

        if t < opt.iterations:
            if step_size is None:
                state, x = adam_step(state, v, x)
            else:
                x = (x - step_size * v).detach()

    return x, trace
