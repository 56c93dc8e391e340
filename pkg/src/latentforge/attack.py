from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple, Tuple

import torch

from latentforge.augment import AugSpec, augclip_estimate
from latentforge.models import DTYPE, Z_BOUND, ImageGrid, LatentCode, NonFiniteError
from latentforge.networks import Generator, Scorer, generate
from latentforge.utils import RngStream

ScoreEval = Callable[[ImageGrid], Tuple[float, ImageGrid]]
""" image -> (score, gradient of the score w.r.t. the image) """


class AttackTarget(Enum):
    PLAIN = 1
    AUGMENTED = 2

    @staticmethod
    def from_string(s: str):
        match(s.lower()):
            case "plain":
                return AttackTarget.PLAIN
            case "augmented":
                return AttackTarget.AUGMENTED
            case _:
                raise ValueError(f"Invalid attack target '{s}'")

    def __str__(self):
        return self.name.lower()


@dataclass(frozen=True)
class AttackSettings:
    epsilon: float = 4 / 255 # Perturbation bound in the infinity norm, in pixel intensity units
    target: AttackTarget = AttackTarget.PLAIN

    def __post_init__(self):
        if self.epsilon < 0: raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")


def fgsm(score_eval: ScoreEval, image: ImageGrid, epsilon: float) -> ImageGrid:
    """ One signed gradient ascent step of size epsilon, clamped to [0, 1] """
    if epsilon < 0: raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    _, grad = score_eval(image)
    if not bool(torch.isfinite(grad).all()):
        raise NonFiniteError("Non-finite image gradient in FGSM")
    return (image.detach() + epsilon * grad.sign()).clamp(0, 1)


def plain_score_eval(scorer: Scorer, query: str) -> ScoreEval:
    embedding = scorer.embed_text(query)

    def score_eval(image: ImageGrid) -> Tuple[float, ImageGrid]:
        return scorer.score(embedding, image), scorer.image_vjp(embedding, image)
    return score_eval


def augmented_score_eval(scorer: Scorer, query: str, aug: AugSpec) -> ScoreEval:
    """ Smoothed score with a fixed augmentation stream """
    def score_eval(image: ImageGrid) -> Tuple[float, ImageGrid]:
        return augclip_estimate(scorer, query, image, aug)
    return score_eval


class AttackReport(NamedTuple):
    gain_plain: float
    gain_aug: float
    attacked_plain: ImageGrid
    attacked_aug: ImageGrid


def attack_gain_report(scorer: Scorer, aug: AugSpec, query: str, image: ImageGrid, epsilon: float) -> AttackReport:
    """
    How much one FGSM step raises the plain score and the smoothed score.
    The smoothed attack uses the gradient on `aug.fork("attack")` and is
    judged on the independent stream `aug.fork("eval")`.
    """
    plain = plain_score_eval(scorer, query)
    attacked_plain = fgsm(plain, image, epsilon)
    gain_plain = plain(attacked_plain)[0] - plain(image)[0]

    judge = augmented_score_eval(scorer, query, aug.fork("eval"))
    attacked_aug = fgsm(augmented_score_eval(scorer, query, aug.fork("attack")), image, epsilon)
    gain_aug = judge(attacked_aug)[0] - judge(image)[0]
    return AttackReport(gain_plain, gain_aug, attacked_plain, attacked_aug)


def random_image(gen: Generator, stream: RngStream, z_bound: float = Z_BOUND) -> ImageGrid:
    """ Image of a code with truncated standard normal z and standard normal y """
    rng = stream.generator()
    z = torch.from_numpy(rng.standard_normal(gen.z_dim)).to(DTYPE).clamp(-z_bound, z_bound)
    y = torch.from_numpy(rng.standard_normal(gen.y_dim)).to(DTYPE)
    return generate(gen, LatentCode(z, y))


def attack_image(scorer: Scorer, aug: AugSpec, query: str, image: ImageGrid, settings: AttackSettings) -> ImageGrid:
    """ FGSM on the score selected by `settings.target` """
    match settings.target:
        case AttackTarget.PLAIN:
            score_eval = plain_score_eval(scorer, query)
        case AttackTarget.AUGMENTED:
            score_eval = augmented_score_eval(scorer, query, aug.fork("attack"))
    return fgsm(score_eval, image, settings.epsilon)
