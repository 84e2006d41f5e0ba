"""
Training - episodic minibatch loop, evaluation and best-validation selection
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional

from loguru import logger

from checkpoint import Checkpoint
from episodes import EpisodeSampler
from errors import ConfigError
from maco_model import MacoModel
from nadam import Nadam
from schemas import RunConfig
from tensor_core import backward

MetricsSplit = Literal["train", "val", "test"]
METRICS_SPLITS = ("train", "val", "test")


# ============================================================================
# METRICS
# ============================================================================

@dataclass(frozen=True)
class MetricsRecord:
    """Mean loss and accuracy of one split over one epoch."""
    epoch: int
    split: str
    loss: float
    accuracy: float
    episodes: int
    correct: Optional[int] = None

    def __post_init__(self):
        if self.split not in METRICS_SPLITS:
            raise ConfigError(f"Invalid metrics split: '{self.split}'\nValid options: {list(METRICS_SPLITS)}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ConfigError(f"accuracy must lie in [0, 1], got {self.accuracy}")
        if self.episodes < 0:
            raise ConfigError(f"episodes must be non-negative, got {self.episodes}")

    @classmethod
    def from_counts(cls, epoch: int, split: str, loss_sum: float, correct: int, episodes: int) -> "MetricsRecord":
        if episodes <= 0:
            raise ConfigError(f"{split} metrics need at least one episode")
        return cls(
            epoch=epoch,
            split=split,
            loss=loss_sum / episodes,
            accuracy=correct / episodes,
            episodes=episodes,
            correct=correct,
        )


def steps_per_epoch(episodes_per_epoch: int, batch_size: int) -> int:
    """Optimizer steps per epoch; a trailing partial batch is one more step."""
    if episodes_per_epoch < 1 or batch_size < 1:
        raise ConfigError(f"episodes_per_epoch and batch_size must be >= 1, got {episodes_per_epoch}, {batch_size}")
    return math.ceil(episodes_per_epoch / batch_size)


def _batch_sizes(total: int, batch_size: int) -> List[int]:
    full, rest = divmod(total, batch_size)
    return [batch_size] * full + ([rest] if rest else [])


# ============================================================================
# EPOCHS
# ============================================================================

def train_epoch(
    model: MacoModel,
    sampler: EpisodeSampler,
    episodes_per_epoch: int,
    batch_size: int,
    optimizer: Nadam,
    epoch: int = 1,
    on_batch: Optional[Callable[[int, float], None]] = None,
) -> MetricsRecord:
    """
    One epoch of minibatch updates.

    Each batch loss is the mean of its episode losses; batch-norm runs in
    training mode and one optimizer step follows each batch.

    Args:
        on_batch: Called with (step index, batch loss) after every update
    """
    loss_sum = 0.0
    correct = 0
    seen = 0
    sizes = _batch_sizes(episodes_per_epoch, batch_size)

    for step, size in enumerate(sizes):
        batch = sampler.sample_batch(size)
        result = model.forward(batch, mode="train")
        grads = backward(result.loss, model.params)
        optimizer.step(grads)

        batch_loss = result.loss.item()
        loss_sum += float(result.episode_losses.sum())
        correct += int(result.correct.sum())
        seen += size
        if on_batch is not None:
            on_batch(step, batch_loss)
        if step % 50 == 0:
            logger.debug(f"epoch {epoch} step {step + 1}/{len(sizes)} loss={batch_loss:.4f}")

    return MetricsRecord.from_counts(epoch, "train", loss_sum, correct, seen)


def evaluate(
    model: MacoModel,
    sampler: EpisodeSampler,
    num_episodes: int,
    batch_size: int = 32,
    epoch: int = 0,
    split: str = "val",
) -> MetricsRecord:
    """
    Accuracy of argmax(probs) over `num_episodes` episodes in eval mode.

    The sampler is consumed; pass `sampler.clone()` to evaluate the same
    episodes again.
    """
    loss_sum = 0.0
    correct = 0
    for size in _batch_sizes(num_episodes, batch_size):
        result = model.forward(sampler.sample_batch(size), mode="eval")
        loss_sum += float(result.episode_losses.sum())
        correct += int(result.correct.sum())
    return MetricsRecord.from_counts(epoch, split, loss_sum, correct, num_episodes)


# ============================================================================
# FIT
# ============================================================================

@dataclass
class FitResult:
    best: Checkpoint
    history: List[MetricsRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        return self.best.epoch

    @property
    def val_accuracies(self) -> List[float]:
        return [r.accuracy for r in self.history if r.split == "val"]


EpochCallback = Callable[[MetricsRecord, MetricsRecord, bool], None]


def fit(
    run_config: RunConfig,
    samplers: Dict[str, EpisodeSampler],
    model: Optional[MacoModel] = None,
    optimizer: Optional[Nadam] = None,
    *,
    trainer: Callable[..., MetricsRecord] = train_epoch,
    evaluator: Callable[..., MetricsRecord] = evaluate,
    on_epoch: Optional[EpochCallback] = None,
) -> FitResult:
    """
    Train for `schedule.epochs` epochs, validating after each one.

    The returned checkpoint is the epoch with the highest validation
    accuracy (ties go to the earliest epoch). Validation reuses the same
    episodes every epoch.

    Args:
        run_config: Run configuration (model, schedule, optimizer, seeds)
        samplers: "train" and "val" samplers
        model: Model to train (default: fresh from run_config.seed)
        optimizer: Optimizer bound to model.params
        trainer / evaluator: Replaceable epoch functions
        on_epoch: Called with (train record, val record, improved)
    """
    schedule = run_config.schedule
    model = model if model is not None else MacoModel(run_config.model, seed=run_config.seed)
    optimizer = optimizer if optimizer is not None else Nadam(model.params, run_config.optimizer)
    val_sampler = samplers["val"]

    history: List[MetricsRecord] = []
    best: Optional[Checkpoint] = None

    logger.info(
        f"🚀 Training {model.variant}: {schedule.epochs} epochs x {schedule.episodes_per_epoch} episodes, "
        f"batch {schedule.batch_size} ({steps_per_epoch(schedule.episodes_per_epoch, schedule.batch_size)} steps/epoch)"
    )

    for epoch in range(1, schedule.epochs + 1):
        train_record = trainer(
            model, samplers["train"], schedule.episodes_per_epoch, schedule.batch_size, optimizer, epoch=epoch
        )
        val_record = evaluator(
            model, val_sampler.clone(), schedule.val_episodes, batch_size=schedule.eval_batch_size,
            epoch=epoch, split="val",
        )
        history.extend([train_record, val_record])

        improved = best is None or val_record.accuracy > best.val_accuracy
        if improved:
            best = Checkpoint.capture(model, optimizer.state, epoch, val_record.accuracy, run_config)
        logger.success(
            f"✅ Epoch {epoch}/{schedule.epochs}: train loss={train_record.loss:.4f} acc={train_record.accuracy:.4f} | "
            f"val loss={val_record.loss:.4f} acc={val_record.accuracy:.4f}" + (" ⭐ best" if improved else "")
        )
        if on_epoch is not None:
            on_epoch(train_record, val_record, improved)

    return FitResult(best=best, history=history)
