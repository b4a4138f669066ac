"""Run configuration: one strict JSON document per experiment run."""

from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .analysis import NoveltyConfig
from .errors import InvalidArgument
from .neural import TrainConfig
from .odelik import SolverConfig
from .training import ModelConfig

# probe points of the noise continuum per model kind
DEFAULT_NOISE_LEVELS = {"edm": [0.002, 10.0, 20.0, 50.0, 60.0], "rff": [0.0, 0.1, 0.5, 0.6, 0.7]}
DEFAULT_SEGMENT_LEVELS = {"edm": [0.002, 17.6, 40.0, 60.0], "rff": [0.0, 0.25, 0.5, 0.7]}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Strict):
    n_symbols: int = Field(8, ge=2)
    dim: int = Field(16, ge=2)
    coarse_dim: int = Field(4, ge=1)
    n_styles: int = Field(4, ge=2)
    coarse_scale: float = Field(3.0, gt=0)
    concentration: float = Field(0.5, gt=0)
    frames_per_symbol: int = Field(4, ge=1)
    frame_rate: float = Field(10.0, gt=0)
    a_fine: float = Field(1.0, gt=0)
    fine_rho: float = Field(0.9, ge=0, lt=1)
    fine_spread: float = Field(10.0, ge=1)
    coarse_jitter: float = Field(0.3, ge=0)
    style_separation: float = Field(14.0, ge=0)
    n_timbres: int = Field(4, ge=2)
    length_symbols: int = Field(48, ge=2)
    sections: int = Field(4, ge=2)
    train_melodies: int = Field(400, ge=1)
    train_segmented: int = Field(200, ge=0)
    test_melodies: int = Field(8, ge=1)
    test_segmented: int = Field(12, ge=1)


class ModelSection(_Strict):
    kind: str = "edm"
    width: int = 64
    heads: int = 4
    blocks: int = 2
    max_len: int = 256
    hidden: int = 128
    layers: int = 3
    n_components: int = 8
    frame_skip: bool = True
    context_window: int | None = 64

    def build(self) -> ModelConfig:
        return ModelConfig(**self.model_dump())


class TrainSection(_Strict):
    lr: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 12000
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    crop_len: int = 64

    def build(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class SolverSection(_Strict):
    atol: float = Field(1e-3, gt=0)
    rtol: float = Field(1e-3, gt=0)
    max_steps: int = Field(10_000, ge=1)
    divergence: str = "hutchinson"
    n_r: int = Field(4, ge=1)

    def build(self) -> SolverConfig:
        return SolverConfig(**self.model_dump())


class NoveltySection(_Strict):
    sigma: float = Field(5.0, gt=0)
    window: int = Field(10, ge=1)
    kappa: float = 1.0

    def build(self) -> NoveltyConfig:
        return NoveltyConfig(**self.model_dump())


class ErrorSection(_Strict):
    n_r_list: list[int] = [1, 2, 4, 8, 16]
    tol_list: list[float] = [1.0, 0.1, 0.01, 0.001]
    max_frames: int = Field(500, ge=100)


class ExperimentSection(_Strict):
    noise_levels: dict[str, list[float]] = Field(default_factory=lambda: dict(DEFAULT_NOISE_LEVELS))
    segment_levels: dict[str, list[float]] = Field(default_factory=lambda: dict(DEFAULT_SEGMENT_LEVELS))
    novelty: NoveltySection = NoveltySection()
    trim_fraction: float = Field(0.01, ge=0, lt=0.5)
    window_seconds: float = Field(0.5, gt=0)
    n_permutations: int = Field(10_000, ge=1)
    errors: ErrorSection = ErrorSection()


class RunConfig(_Strict):
    seed: int = Field(0, ge=0)
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    solver: SolverSection = SolverSection()
    experiment: ExperimentSection = ExperimentSection()

    @model_validator(mode="after")
    def _consistent(self):
        if self.data.coarse_dim >= self.data.dim:
            raise ValueError("data.coarse_dim must be smaller than data.dim")
        window = self.model.context_window
        if window is not None and window > self.train.crop_len:
            raise ValueError("model.context_window must not exceed train.crop_len")
        # surface the domain checks at load time
        self.model.build()
        self.train.build()
        self.solver.build()
        return self

    def dump(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.model_dump_json(indent=1) + "\n")


def load_config(path=None, **overrides) -> RunConfig:
    """Parse a config file (or defaults) and apply top-level overrides such as ``seed``."""
    try:
        raw = json.loads(Path(path).read_text()) if path else {}
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.model_validate(raw)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidArgument(f"cannot read config {path}: {exc}") from exc
    except (ValidationError, InvalidArgument) as exc:
        raise InvalidArgument(f"invalid config: {exc}") from exc
