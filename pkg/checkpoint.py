"""
Checkpoint - best-model container and its on-disk format

File layout (numpy .npz, no pickled objects):
    meta                 uint8 bytes of a UTF-8 JSON document
    param::<path>        parameter values in their stored dtype
    bn_mean::<path>      batch-norm running mean
    bn_var::<path>       batch-norm running variance
    nadam_m::<path>      Nadam first moment
    nadam_v::<path>      Nadam second moment

Parameter paths are stored with "/" written as ".".
"""
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from loguru import logger

import config
from errors import CheckpointError, CheckpointVersionError
from maco_model import MacoModel, init_params
from nadam import NadamState
from schemas import AugmentPolicy, ModelConfig, RunConfig
from storage import write_atomic
from tensor_core import ParamSnapshot

FORMAT_NAME = "maco-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Parameters, running statistics, optimizer state and provenance of one epoch."""
    model_config: ModelConfig
    params: ParamSnapshot
    augment: AugmentPolicy
    optimizer: NadamState
    epoch: int
    val_accuracy: float
    seeds: Dict[str, int] = field(default_factory=dict)
    run_config: Optional[RunConfig] = None
    code_version: str = config.__version__

    @classmethod
    def capture(
        cls,
        model: MacoModel,
        optimizer: NadamState,
        epoch: int,
        val_accuracy: float,
        run_config: Optional[RunConfig] = None,
    ) -> "Checkpoint":
        """Immutable copy of the model's current state."""
        seeds = {}
        augment = AugmentPolicy()
        if run_config is not None:
            augment = run_config.augment
            seeds = {
                "seed": run_config.seed,
                "eval_seed": run_config.eval_seed,
                "split_seed": run_config.splits.seed,
                "dataset_seed": run_config.dataset.seed,
            }
        return cls(
            model_config=model.config,
            params=model.params.snapshot(),
            augment=augment,
            optimizer=optimizer.copy(),
            epoch=epoch,
            val_accuracy=val_accuracy,
            seeds=seeds,
            run_config=run_config,
        )

    def build_model(self) -> MacoModel:
        params = init_params(self.model_config, seed=0)
        params.load_snapshot(self.params)
        return MacoModel(self.model_config, params=params)

    def metadata(self) -> Dict[str, Any]:
        return {
            "format": FORMAT_NAME,
            "format_version": FORMAT_VERSION,
            "code_version": self.code_version,
            "model_config": self.model_config.model_dump(mode="json"),
            "augment": self.augment.model_dump(mode="json"),
            "nadam": {**self.optimizer.hyperparameters(), "step": self.optimizer.step},
            "epoch": self.epoch,
            "val_accuracy": self.val_accuracy,
            "seeds": self.seeds,
            "run_config": None if self.run_config is None else self.run_config.model_dump(mode="json"),
            "param_paths": list(self.params.params),
            "batchnorm_paths": list(self.params.running),
        }


# ============================================================================
# ENCODING
# ============================================================================

def _key(prefix: str, path: str) -> str:
    return f"{prefix}::{path.replace('/', '.')}"


def _encode(checkpoint: Checkpoint) -> Dict[str, np.ndarray]:
    meta = json.dumps(checkpoint.metadata(), sort_keys=True).encode("utf-8")
    arrays = {"meta": np.frombuffer(meta, dtype=np.uint8)}
    for path, value in checkpoint.params.params.items():
        arrays[_key("param", path)] = value
    for path, (mean, var) in checkpoint.params.running.items():
        arrays[_key("bn_mean", path)] = mean
        arrays[_key("bn_var", path)] = var
    for path in checkpoint.optimizer.m:
        arrays[_key("nadam_m", path)] = checkpoint.optimizer.m[path]
        arrays[_key("nadam_v", path)] = checkpoint.optimizer.v[path]
    return arrays


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    """
    Write a checkpoint atomically.

    Raises:
        CheckpointError: If the file cannot be written after retries
    """
    path = Path(path)
    try:
        arrays = _encode(checkpoint)
        write_atomic(path, lambda fh: np.savez(fh, **arrays))
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e
    logger.success(f"💾 Checkpoint saved: {path} (epoch {checkpoint.epoch}, val_acc={checkpoint.val_accuracy:.4f})")
    return path


def _major(version: str) -> str:
    return str(version).split(".")[0]


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: Missing, unreadable or malformed file
        CheckpointVersionError: Format version or code major version differs
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {key: npz[key] for key in npz.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    if "meta" not in arrays:
        raise CheckpointError(f"Checkpoint {path} has no metadata")
    try:
        meta = json.loads(arrays["meta"].tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Checkpoint {path} metadata is not valid JSON: {e}") from e

    if meta.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path} is not a {FORMAT_NAME} file (format={meta.get('format')!r})")
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError("format_version", meta.get("format_version"), FORMAT_VERSION, str(path))
    if _major(meta.get("code_version", "")) != _major(config.__version__):
        raise CheckpointVersionError("code_version", meta.get("code_version"), config.__version__, str(path))

    def _array(prefix: str, key_path: str) -> np.ndarray:
        key = _key(prefix, key_path)
        if key not in arrays:
            raise CheckpointError(f"Checkpoint {path} is missing '{key}'")
        return arrays[key]

    try:
        params = {p: _array("param", p) for p in meta["param_paths"]}
        running = {p: (_array("bn_mean", p), _array("bn_var", p)) for p in meta["batchnorm_paths"]}
        nadam_meta = meta["nadam"]
        optimizer = NadamState(
            learning_rate=nadam_meta["learning_rate"],
            beta1=nadam_meta["beta1"],
            beta2=nadam_meta["beta2"],
            epsilon=nadam_meta["epsilon"],
            step=nadam_meta["step"],
            m={p: arrays[_key("nadam_m", p)] for p in meta["param_paths"] if _key("nadam_m", p) in arrays},
            v={p: arrays[_key("nadam_v", p)] for p in meta["param_paths"] if _key("nadam_v", p) in arrays},
        )
        checkpoint = Checkpoint(
            model_config=ModelConfig.model_validate(meta["model_config"]),
            params=ParamSnapshot(params=params, running=running),
            augment=AugmentPolicy.model_validate(meta["augment"]),
            optimizer=optimizer,
            epoch=int(meta["epoch"]),
            val_accuracy=float(meta["val_accuracy"]),
            seeds={k: int(v) for k, v in meta.get("seeds", {}).items()},
            run_config=None if meta.get("run_config") is None else RunConfig.model_validate(meta["run_config"]),
            code_version=meta["code_version"],
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"Checkpoint {path} metadata is incomplete: {e}") from e

    logger.info(f"Checkpoint loaded: {path} (epoch {checkpoint.epoch}, {checkpoint.model_config.variant})")
    return checkpoint
