"""
SQLAlchemy Models for the Experiment Ledger
Enums stored as strings with SQL CHECK constraints (SQLite friendly).
"""
import uuid
from enum import Enum as PyEnum

from sqlalchemy import (
    Column, String, Integer, Float, DateTime, ForeignKey, Text,
    Index, CheckConstraint, func
)
from sqlalchemy.orm import declarative_base, relationship

# ============================================================================
# BASE
# ============================================================================

Base = declarative_base()

# ============================================================================
# ENUMS (Python side)
# ============================================================================

class Variant(str, PyEnum):
    MACO = "maco"
    NO_COND = "no-cond"

class RunStatus(str, PyEnum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"

class MetricSplit(str, PyEnum):
    TRAIN = "train"
    VAL = "val"

class EvalSplit(str, PyEnum):
    VAL = "val"
    TEST = "test"

# ============================================================================
# MODELS
# ============================================================================

class TrainingRun(Base):
    """One `train` invocation and its best-validation outcome"""
    __tablename__ = "training_runs"

    id = Column(String(36), primary_key=True, default=lambda: str(uuid.uuid4()))
    name = Column(String(200), nullable=False, index=True)
    variant = Column(String(20), nullable=False, default=Variant.MACO.value)
    ways = Column(Integer, nullable=False)
    shots = Column(Integer, nullable=False)
    seed = Column(Integer, nullable=False)
    config_json = Column(Text, nullable=False)

    status = Column(String(20), nullable=False, default=RunStatus.RUNNING.value)
    best_epoch = Column(Integer, nullable=True)
    best_val_accuracy = Column(Float, nullable=True)
    checkpoint_path = Column(String(500), nullable=True)
    error = Column(Text, nullable=True)

    started_at = Column(DateTime, default=func.now(), nullable=False)
    finished_at = Column(DateTime, nullable=True)

    # Relationships
    metrics = relationship("EpochMetric", back_populates="run", cascade="all, delete-orphan",
                           order_by="EpochMetric.epoch")

    __table_args__ = (
        CheckConstraint(f"variant IN {tuple(v.value for v in Variant)}", name='valid_run_variant'),
        CheckConstraint(f"status IN {tuple(s.value for s in RunStatus)}", name='valid_run_status'),
    )

    def __repr__(self):
        return f"<TrainingRun {self.name} {self.variant} {self.ways}w{self.shots}s ({self.status})>"


class EpochMetric(Base):
    """One MetricsRecord of a training run"""
    __tablename__ = "epoch_metrics"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String(36), ForeignKey("training_runs.id", ondelete="CASCADE"), nullable=False)
    epoch = Column(Integer, nullable=False)
    split = Column(String(10), nullable=False)
    loss = Column(Float, nullable=False)
    accuracy = Column(Float, nullable=False)
    episodes = Column(Integer, nullable=False)

    run = relationship("TrainingRun", back_populates="metrics")

    __table_args__ = (
        CheckConstraint(f"split IN {tuple(s.value for s in MetricSplit)}", name='valid_metric_split'),
        CheckConstraint("accuracy >= 0 AND accuracy <= 1", name='valid_metric_accuracy'),
        Index('idx_metric_run_epoch', 'run_id', 'epoch'),
    )

    def __repr__(self):
        return f"<EpochMetric epoch={self.epoch} {self.split} acc={self.accuracy:.4f}>"


class EvalResult(Base):
    """Accuracy of one checkpoint at one shot count"""
    __tablename__ = "eval_results"

    id = Column(Integer, primary_key=True, autoincrement=True)
    checkpoint_path = Column(String(500), nullable=False)
    variant = Column(String(20), nullable=False)
    ways = Column(Integer, nullable=False)
    shots = Column(Integer, nullable=False)
    split = Column(String(10), nullable=False, default=EvalSplit.TEST.value)
    accuracy = Column(Float, nullable=False)
    half_width = Column(Float, nullable=False)
    episodes = Column(Integer, nullable=False)
    seed = Column(Integer, nullable=False)

    created_at = Column(DateTime, default=func.now(), nullable=False)

    __table_args__ = (
        CheckConstraint(f"variant IN {tuple(v.value for v in Variant)}", name='valid_eval_variant'),
        CheckConstraint(f"split IN {tuple(s.value for s in EvalSplit)}", name='valid_eval_split'),
        CheckConstraint("accuracy >= 0 AND accuracy <= 1", name='valid_eval_accuracy'),
        Index('idx_eval_variant_shots', 'variant', 'shots'),
    )

    def __repr__(self):
        return f"<EvalResult {self.variant} {self.ways}w{self.shots}s acc={self.accuracy:.4f}>"
