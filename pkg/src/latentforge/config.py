import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from latentforge.attack import AttackSettings
from latentforge.augment import Augmentation, AugmentationRanges, AugSpec
from latentforge.compose import POSITIONS, ComposeSettings, CompositionParams, PerceptualSettings
from latentforge.dbgd import BarrierSettings, DbgdVariant
from latentforge.models import ConfigError, LatentCode, YMode
from latentforge.networks import (
    BlobGenerator, Generator, HashEmbedScorer, PlantedScorer, Scorer, SeparableBlobGenerator, TwoBasinScorer
)
from latentforge.optim import InitSettings, OptimSettings, draw_code
from latentforge.utils import RngStream

GENERATOR_KINDS = ("blob", "separable_blob")
SCORER_KINDS = ("hash_embed", "planted", "two_basin")
BENCH_SUITES = ("stagnation", "dbgd_oracle", "k_ablation", "fuse_tradeoff", "fgsm", "variance")


class Section(BaseModel):
    """ Unknown keys and loosely typed values (e.g. "1" for an integer) are rejected """
    model_config = ConfigDict(extra="forbid", frozen=True, strict=True)


class GeneratorConfig(Section):
    kind: str = "blob"
    z_dim: int = 16
    y_dim: int = 8
    height: int = 64
    width: int = 64
    n_blobs: int = 6
    seed: int = 0


class ScorerConfig(Section):
    kind: str = "hash_embed"
    seed: int = 0
    embed_dim: int = 64 # hash_embed only
    target: Optional[Dict[str, List[float]]] = None # planted only: {"z": [...], "y": [...]}, drawn from `seed` if unset
    sharpness: float = 2e-3 # two_basin only: width of the spurious basin in mse units
    spurious_weight: float = 0.5 # two_basin only


class InitConfig(Section):
    M: int = 10000
    k: int = 5
    batch: int = 10
    y_mode: str = "class_table"
    n_classes: int = 1000
    table_seed: int = 0


class OptConfig(Section):
    lr: float = 5e-3
    iters: int = 1000
    weight_decay: float = 0.0
    learn_weights: bool = True
    split_weights: bool = False


class ColorConfig(Section):
    brightness: float = 0.2
    contrast: List[float] = Field(default_factory=lambda: [0.5, 1.5])


class TranslateConfig(Section):
    max_frac: float = 0.125


class ResizeConfig(Section):
    range: List[float] = Field(default_factory=lambda: [0.75, 1.25])


class CutoutConfig(Section):
    frac: float = 0.25


class AugConfig(Section):
    enabled: List[str] = Field(default_factory=lambda: ["color", "translate", "resize", "cutout"])
    n_draws: int = 16
    color: ColorConfig = Field(default_factory=ColorConfig)
    translate: TranslateConfig = Field(default_factory=TranslateConfig)
    resize: ResizeConfig = Field(default_factory=ResizeConfig)
    cutout: CutoutConfig = Field(default_factory=CutoutConfig)


class DbgdConfig(Section):
    beta: float = 1.0
    tau: float = 1e-12
    variant: str = "dbgd"
    lambda_fixed: float = 0.5


class PerConfig(Section):
    levels: int = 3
    window: int = 4
    weights: Optional[List[float]] = None


class PoissonConfig(Section):
    tol: float = 1e-6
    max_iters: Optional[int] = None


class ComposeConfig(Section):
    alphas: List[float] = Field(default_factory=lambda: [0.65, 0.5])
    positions: List[str] = Field(default_factory=lambda: list(POSITIONS))
    per: PerConfig = Field(default_factory=PerConfig)
    poisson: PoissonConfig = Field(default_factory=PoissonConfig)


class AttackConfig(Section):
    epsilon: float = 4 / 255
    seeds: int = 50
    n_images: int = 3 # Attacked images are written for this many leading seeds


class InterpolateConfig(Section):
    code_a: Optional[str] = None # Path of a latent code json, e.g. the `final_code.json` of an optimize run
    code_b: Optional[str] = None
    steps: int = 8


class BenchConfig(Section):
    suites: List[str] = Field(default_factory=lambda: ["stagnation", "dbgd_oracle", "k_ablation"])
    seeds: int = 20
    iters: int = 300
    oracle_iters: int = 2000
    ablation_M: int = 1000
    ablation_ks: List[int] = Field(default_factory=lambda: [1, 5, 10])
    variance_repeats: int = 200


class RunConfig(Section):
    """ Complete, validated configuration of one run """
    query: str
    seed: int = 0
    z_bound: float = 2.0
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    scorer: ScorerConfig = Field(default_factory=ScorerConfig)
    init: InitConfig = Field(default_factory=InitConfig)
    opt: OptConfig = Field(default_factory=OptConfig)
    aug: AugConfig = Field(default_factory=AugConfig)
    dbgd: DbgdConfig = Field(default_factory=DbgdConfig)
    compose: ComposeConfig = Field(default_factory=ComposeConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    interpolate: InterpolateConfig = Field(default_factory=InterpolateConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)

    @staticmethod
    def from_json(text: Union[str, bytes]):
        try:
            return RunConfig.model_validate_json(text)
        except ValidationError as e:
            raise ConfigError(f"Invalid config: {e}") from e

    @staticmethod
    def from_dict(d: Dict[str, Any]):
        return RunConfig.from_json(json.dumps(d))

    @staticmethod
    def from_file(path: Union[str, Path]):
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except FileNotFoundError as e:
            raise ConfigError(f"Config file {path} not found") from e
        return RunConfig.from_json(text)

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def replace(self, **changes):
        return self.model_copy(update=changes)

    @model_validator(mode="after")
    def check_values(self):
        """ Builds every settings object once so that bad values fail before a run starts """
        if self.seed < 0 or self.seed >= 2 ** 64: raise ConfigError(f"seed must be an unsigned 64 bit integer, got {self.seed}")
        if self.z_bound <= 0: raise ConfigError("z_bound must be positive")
        if self.generator.kind not in GENERATOR_KINDS:
            raise ConfigError(f"Unknown generator kind '{self.generator.kind}', expected one of {GENERATOR_KINDS}")
        if self.scorer.kind not in SCORER_KINDS:
            raise ConfigError(f"Unknown scorer kind '{self.scorer.kind}', expected one of {SCORER_KINDS}")
        for suite in self.bench.suites:
            if suite not in BENCH_SUITES:
                raise ConfigError(f"Unknown bench suite '{suite}', expected one of {BENCH_SUITES}")
        if self.attack.seeds < 0 or self.attack.n_images < 0: raise ConfigError("attack.seeds and attack.n_images must be non-negative")
        if self.interpolate.steps < 1: raise ConfigError("interpolate.steps needs to be at least 1")
        if self.bench.seeds < 1: raise ConfigError("bench.seeds needs to be at least 1")
        if len(self.compose.alphas) == 0 or len(self.compose.positions) == 0:
            raise ConfigError("The composition grid needs at least one alpha and one position")
        try:
            self.init_settings()
            self.optim_settings()
            self.aug_spec(RngStream(self.seed))
            self.barrier_settings()
            self.compose_settings()
            self.attack_settings()
            gen = self.build_generator()
            for params in self.grid():
                params.region(gen.height, gen.width)
            if self.scorer.target is not None:
                gen.check_code(LatentCode.from_dict(self.scorer.target))
        except KeyError as e:
            raise ConfigError(f"Missing entry {e}") from e
        return self

    def init_settings(self) -> InitSettings:
        c = self.init
        return InitSettings(c.M, c.k, c.batch, YMode.from_string(c.y_mode), c.n_classes, c.table_seed)

    def optim_settings(self) -> OptimSettings:
        c = self.opt
        return OptimSettings(c.lr, c.iters, c.weight_decay, c.learn_weights, c.split_weights)

    def aug_spec(self, stream: RngStream) -> AugSpec:
        c = self.aug
        if len(c.color.contrast) != 2 or len(c.resize.range) != 2:
            raise ValueError("aug.color.contrast and aug.resize.range need exactly two entries")
        ranges = AugmentationRanges(
            brightness=c.color.brightness,
            contrast=tuple(c.color.contrast),
            translate_frac=c.translate.max_frac,
            resize=tuple(c.resize.range),
            cutout_frac=c.cutout.frac,
        )
        enabled = frozenset(Augmentation.from_string(s) for s in c.enabled)
        return AugSpec(enabled, c.n_draws, stream, ranges)

    def barrier_settings(self) -> BarrierSettings:
        c = self.dbgd
        return BarrierSettings(c.beta, c.tau, DbgdVariant.from_string(c.variant), c.lambda_fixed)

    def compose_settings(self) -> ComposeSettings:
        per = self.compose.per
        weights = None if per.weights is None else tuple(per.weights)
        return ComposeSettings(self.optim_settings(), self.barrier_settings(),
                               PerceptualSettings(per.levels, per.window, weights))

    def grid(self) -> List[CompositionParams]:
        return [CompositionParams.from_position(alpha, pos)
                for alpha in self.compose.alphas for pos in self.compose.positions]

    def attack_settings(self) -> AttackSettings:
        return AttackSettings(self.attack.epsilon)

    def build_generator(self) -> Generator:
        c = self.generator
        match c.kind:
            case "blob":
                return BlobGenerator(c.z_dim, c.y_dim, c.height, c.width, c.n_blobs, c.seed)
            case "separable_blob":
                return SeparableBlobGenerator(c.height, c.width, c.n_blobs, c.seed)
        raise ConfigError(f"Unknown generator kind '{c.kind}'")

    def build_scorer(self, gen: Generator) -> Scorer:
        c = self.scorer
        match c.kind:
            case "hash_embed":
                return HashEmbedScorer(c.embed_dim, c.seed)
            case "planted":
                return PlantedScorer.from_code(gen, self.planted_target(gen))
            case "two_basin":
                spurious, semantic = self.two_basin_codes(gen)
                with torch.no_grad():
                    return TwoBasinScorer(gen.image(spurious), gen.image(semantic), c.sharpness, c.spurious_weight)
        raise ConfigError(f"Unknown scorer kind '{c.kind}'")

    def planted_target(self, gen: Generator) -> LatentCode:
        """ The configured target, or one drawn the way init search draws candidates """
        if self.scorer.target is not None:
            return LatentCode.from_dict(self.scorer.target)
        return draw_code(gen, self.init_settings(), RngStream(self.scorer.seed).fork("planted_target"), self.z_bound)

    def two_basin_codes(self, gen: Generator) -> Tuple[LatentCode, LatentCode]:
        stream = RngStream(self.scorer.seed)
        settings = self.init_settings()
        return (draw_code(gen, settings, stream.fork("spurious"), self.z_bound),
                draw_code(gen, settings, stream.fork("semantic"), self.z_bound))
