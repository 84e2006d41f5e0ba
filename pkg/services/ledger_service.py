"""
Ledger Service - training runs, epoch metrics and evaluation results
"""
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

from loguru import logger
from sqlalchemy.orm import Session

from models import EpochMetric, EvalResult, RunStatus, TrainingRun, Variant


class LedgerService:
    """
    Record experiments in the ledger database

    The caller owns the session (see database.get_db_session); this service
    only adds and flushes rows.
    """

    def __init__(self, db_session: Session):
        """
        Initialize service with database session

        Args:
            db_session: Active SQLAlchemy session
        """
        self.db = db_session

    # ========================================================================
    # TRAINING RUNS
    # ========================================================================

    def start_run(
        self,
        name: str,
        variant: str,
        ways: int,
        shots: int,
        seed: int,
        config_json: str,
    ) -> TrainingRun:
        if variant not in [v.value for v in Variant]:
            raise ValueError(
                f"Invalid variant: '{variant}'\n"
                f"Valid options: {[v.value for v in Variant]}"
            )
        run = TrainingRun(
            name=name,
            variant=variant,
            ways=ways,
            shots=shots,
            seed=seed,
            config_json=config_json,
            status=RunStatus.RUNNING.value,
        )
        self.db.add(run)
        self.db.flush()
        logger.info(f"Ledger: run {run.id} started ({name}, {variant}, {ways}-way {shots}-shot)")
        return run

    def get_run(self, run_id: str) -> Optional[TrainingRun]:
        return self.db.query(TrainingRun).filter(TrainingRun.id == run_id).first()

    def list_runs(self, status: Optional[str] = None) -> List[TrainingRun]:
        query = self.db.query(TrainingRun)
        if status is not None:
            query = query.filter(TrainingRun.status == status)
        return query.order_by(TrainingRun.started_at).all()

    def record_metrics(self, run_id: str, records: Sequence) -> int:
        """
        Store MetricsRecords for a run; test-split records are not epoch metrics and are skipped

        Returns:
            Number of rows added
        """
        added = 0
        for record in records:
            if record.split not in ("train", "val"):
                continue
            self.db.add(EpochMetric(
                run_id=run_id,
                epoch=record.epoch,
                split=record.split,
                loss=record.loss,
                accuracy=record.accuracy,
                episodes=record.episodes,
            ))
            added += 1
        self.db.flush()
        return added

    def finish_run(
        self,
        run_id: str,
        best_epoch: int,
        best_val_accuracy: float,
        checkpoint_path: str,
    ) -> Optional[TrainingRun]:
        run = self.get_run(run_id)
        if not run:
            logger.warning(f"⚠️ Ledger: run {run_id} not found")
            return None
        run.status = RunStatus.COMPLETED.value
        run.best_epoch = best_epoch
        run.best_val_accuracy = best_val_accuracy
        run.checkpoint_path = checkpoint_path
        run.finished_at = datetime.now()
        logger.success(f"✅ Ledger: run {run_id} completed (best epoch {best_epoch}, val_acc={best_val_accuracy:.4f})")
        return run

    def fail_run(self, run_id: str, error: str) -> Optional[TrainingRun]:
        run = self.get_run(run_id)
        if not run:
            return None
        run.status = RunStatus.FAILED.value
        run.error = error
        run.finished_at = datetime.now()
        return run

    # ========================================================================
    # EVALUATIONS
    # ========================================================================

    def record_eval(
        self,
        checkpoint_path: str,
        variant: str,
        ways: int,
        shots: int,
        accuracy: float,
        half_width: float,
        episodes: int,
        seed: int,
        split: str = "test",
    ) -> EvalResult:
        result = EvalResult(
            checkpoint_path=checkpoint_path,
            variant=variant,
            ways=ways,
            shots=shots,
            split=split,
            accuracy=accuracy,
            half_width=half_width,
            episodes=episodes,
            seed=seed,
        )
        self.db.add(result)
        self.db.flush()
        logger.info(f"Ledger: {variant} {ways}-way {shots}-shot acc={accuracy:.4f} ({episodes} episodes)")
        return result

    def accuracy_rows(self, ways: int = 5, split: str = "test") -> Dict[str, Dict[int, Tuple[float, int]]]:
        """
        Latest evaluation per (variant, shots)

        Returns:
            {variant: {shots: (accuracy, episodes)}}
        """
        results = (
            self.db.query(EvalResult)
            .filter(EvalResult.ways == ways, EvalResult.split == split)
            .order_by(EvalResult.id)
            .all()
        )
        rows: Dict[str, Dict[int, Tuple[float, int]]] = {}
        for r in results:
            rows.setdefault(r.variant, {})[r.shots] = (r.accuracy, r.episodes)
        return rows
