"""
Configuration Schemas
pydantic models for the architecture, augmentation, schedule and a full run
"""
import json
import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

import config
from errors import ConfigError

Variant = Literal["maco", "no-cond"]
VARIANTS: Tuple[str, ...] = ("maco", "no-cond")


# ============================================================================
# ARCHITECTURE
# ============================================================================

class ModelConfig(BaseModel):
    """
    All architecture hyperparameters.

    Defaults: 84x84x3 input, four conv blocks of 32 filters, 800-d
    features, 128-d embeddings, relational/conditioning depth 4 (2 for CUB).
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    image_size: int = Field(84, ge=2)
    channels: int = Field(3, ge=1)
    feature_blocks: int = Field(4, ge=1)
    conv_filters: int = Field(32, ge=1)
    feature_dim: int = Field(800, ge=1)
    embed_dim: int = Field(128, ge=1)
    relational_depth: int = Field(4, ge=2)
    conditioning_depth: int = Field(4, ge=2)
    ways: int = Field(5, ge=5)
    shots: int = Field(5, ge=1)
    conditioning_enabled: bool = True
    bn_momentum: float = Field(0.99, gt=0.0, lt=1.0)
    bn_epsilon: float = Field(1e-3, gt=0.0)

    @model_validator(mode="after")
    def _check_pooling(self) -> "ModelConfig":
        size = self.image_size
        for block in range(self.feature_blocks):
            if size < 2:
                raise ValueError(
                    f"image_size={self.image_size} cannot pass {self.feature_blocks} pooling blocks "
                    f"(extent {size} before block {block + 1})"
                )
            size //= 2
        return self

    @property
    def spatial_sizes(self) -> List[int]:
        """Spatial extent entering each feature block, then after the last pool."""
        sizes = [self.image_size]
        for _ in range(self.feature_blocks):
            sizes.append(sizes[-1] // 2)
        return sizes

    @property
    def flatten_dim(self) -> int:
        """Length of the flattened conv output fed to the feature linear layer."""
        return self.spatial_sizes[-1] ** 2 * self.conv_filters

    @property
    def variant(self) -> str:
        return "maco" if self.conditioning_enabled else "no-cond"

    @property
    def conditioning_input_dim(self) -> int:
        return self.embed_dim + self.feature_dim if self.conditioning_enabled else self.embed_dim


# ============================================================================
# DATA
# ============================================================================

class AugmentPolicy(BaseModel):
    """Random rotation, translation, zoom and horizontal flip for training images."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    rotation_max_degrees: float = Field(20.0, ge=0.0, le=180.0)
    translate_max_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    zoom_range: Tuple[float, float] = (0.9, 1.1)
    hflip_probability: float = Field(0.5, ge=0.0, le=1.0)
    enabled: bool = True

    @field_validator("zoom_range")
    @classmethod
    def _check_zoom(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if low <= 0 or high <= 0:
            raise ValueError(f"zoom range must be positive, got {value}")
        if low > high:
            raise ValueError(f"zoom range low > high: {value}")
        return value


class DatasetSource(BaseModel):
    """Either a directory tree (one subdirectory per class) or a synthetic spec."""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["directory", "synthetic"] = "synthetic"
    path: Optional[Path] = None
    num_classes: int = Field(30, ge=1)
    images_per_class: int = Field(30, ge=2)
    seed: int = 0

    @model_validator(mode="after")
    def _check_path(self) -> "DatasetSource":
        if self.kind == "directory" and self.path is None:
            raise ValueError("dataset.kind='directory' requires dataset.path")
        return self


class SplitConfig(BaseModel):
    """Class split sizes (train, val, test) and the split RNG seed."""
    model_config = ConfigDict(extra="forbid")

    counts: Tuple[int, int, int] = (20, 5, 5)
    seed: int = 0
    manifest: Optional[Path] = None

    @field_validator("counts")
    @classmethod
    def _check_counts(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(c < 0 for c in value):
            raise ValueError(f"split counts must be non-negative, got {value}")
        return value


# ============================================================================
# TRAINING
# ============================================================================

class Schedule(BaseModel):
    """Epoch/episode/batch arithmetic. An epoch is an arbitrary number of trials."""
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(50, ge=1)
    episodes_per_epoch: int = Field(60000, ge=1)
    batch_size: int = Field(32, ge=1)
    val_episodes: int = Field(1000, ge=1)
    eval_batch_size: int = Field(32, ge=1)

    @property
    def steps_per_epoch(self) -> int:
        """Optimizer steps per epoch; the last partial batch counts as a step."""
        return math.ceil(self.episodes_per_epoch / self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.epochs


class OptimizerConfig(BaseModel):
    """Nadam hyperparameters; only the learning rate is fixed by the benchmark protocol."""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(0.001, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(1e-8, gt=0.0)


# ============================================================================
# RUN
# ============================================================================

class RunConfig(BaseModel):
    """
    Everything needed to reproduce a training run.

    A run is reproducible from RunConfig + code version: every RNG stream is
    derived from `seed` (and `splits.seed` / `dataset.seed`).
    """
    model_config = ConfigDict(extra="forbid")

    name: str = "maco"
    dataset: DatasetSource = Field(default_factory=DatasetSource)
    splits: SplitConfig = Field(default_factory=SplitConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    augment: AugmentPolicy = Field(default_factory=AugmentPolicy)
    schedule: Schedule = Field(default_factory=Schedule)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    output_dir: Optional[Path] = None
    seed: int = 0
    eval_seed: int = 12345

    @property
    def resolved_output_dir(self) -> Path:
        """Explicit output_dir, else `<MACO_OUTPUT_DIR>/<name>-<variant>-seed<seed>`."""
        if self.output_dir is not None:
            return self.output_dir
        return config.OUTPUT_DIR / f"{self.name}-{self.model.variant}-seed{self.seed}"

    def with_variant(self, variant: str) -> "RunConfig":
        """Copy with conditioning switched on ('maco') or off ('no-cond')."""
        if variant not in VARIANTS:
            raise ConfigError(f"Invalid variant: '{variant}'\nValid options: {list(VARIANTS)}")
        model = self.model.model_copy(update={"conditioning_enabled": variant == "maco"})
        # re-validate so frozen sub-model stays consistent
        return RunConfig.model_validate({**self.model_dump(), "model": model.model_dump()})

    def with_seed(self, seed: int) -> "RunConfig":
        return self.model_copy(update={"seed": seed})

    @classmethod
    def from_json(cls, text: str, source: str = "<string>") -> "RunConfig":
        try:
            return cls.model_validate_json(text)
        except ValidationError as e:
            raise ConfigError(f"Invalid run config {source}:\n{e}") from e

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        return cls.from_json(path.read_text(encoding="utf-8"), source=str(path))

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def to_file(self, path: Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


# ============================================================================
# PRESETS
# ============================================================================

def _preset_names() -> List[str]:
    return sorted(p.stem for p in config.CONFIGS_DIR.glob("*.json"))


PRESET_NAMES = _preset_names()


def preset(name: str) -> RunConfig:
    """
    Load a named RunConfig from configs/<name>.json.

    cub / mini-imagenet / mini-dogsnet reproduce the benchmark protocol (50 epochs
    x 60000 trials, batch 32); synthetic-quick is the desk-scale smoke run.
    """
    if name not in PRESET_NAMES:
        raise ConfigError(f"Unknown preset: '{name}'\nValid options: {PRESET_NAMES}")
    return RunConfig.from_file(config.CONFIGS_DIR / f"{name}.json")
