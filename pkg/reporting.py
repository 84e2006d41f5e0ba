"""
Reporting - metrics CSV, accuracy tables and binomial confidence half-widths
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from loguru import logger

from errors import ConfigError, ReportError
from storage import write_text
from training import MetricsRecord

METRICS_HEADER = "epoch,split,loss,accuracy,episodes"
TABLE_HEADER = "variant,one_shot,five_shot,episodes,half_width"
Z_95 = 1.96


def write_report(path: Path, text: str) -> Path:
    """
    Write a text artifact, retrying transient OS errors.

    Raises:
        ReportError: If the path stays unwritable
    """
    path = Path(path)
    try:
        write_text(path, text)
    except OSError as e:
        raise ReportError(f"Cannot write {path}: {e}") from e
    return path


# ============================================================================
# METRICS CSV
# ============================================================================

def format_metrics_csv(history: Sequence[MetricsRecord]) -> str:
    lines = [METRICS_HEADER]
    for r in history:
        lines.append(f"{r.epoch},{r.split},{r.loss:.6f},{r.accuracy:.6f},{r.episodes}")
    return "\n".join(lines) + "\n"


def emit_metrics_csv(history: Sequence[MetricsRecord], path: Path) -> Path:
    """Header `epoch,split,loss,accuracy,episodes`, one row per record, 6 decimals."""
    path = write_report(path, format_metrics_csv(history))
    logger.success(f"📈 Metrics written: {path} ({len(history)} rows)")
    return path


def read_metrics_csv(path: Path) -> List[MetricsRecord]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ReportError(f"{path} is not a metrics CSV (header {lines[:1]})")
    records = []
    for number, line in enumerate(lines[1:], start=2):
        try:
            epoch, split, loss, accuracy, episodes = line.split(",")
            records.append(MetricsRecord(int(epoch), split, float(loss), float(accuracy), int(episodes)))
        except ValueError as e:
            raise ReportError(f"{path}:{number}: malformed metrics row {line!r}: {e}") from e
    return records


# ============================================================================
# ACCURACY TABLE
# ============================================================================

def binomial_half_width(accuracy: float, episodes: int, z: float = Z_95) -> float:
    """Normal-approximation half-width z * sqrt(p (1 - p) / N)."""
    if episodes < 1:
        raise ConfigError(f"half-width needs at least one episode, got {episodes}")
    if not 0.0 <= accuracy <= 1.0:
        raise ConfigError(f"accuracy must lie in [0, 1], got {accuracy}")
    return z * math.sqrt(accuracy * (1.0 - accuracy) / episodes)


@dataclass(frozen=True)
class AccuracyRow:
    """
    One model variant's test accuracy at 1 and 5 shots.

    `half_width` is the widest interval among the reported cells and
    `episodes` the smallest episode count.
    """
    variant: str
    one_shot: Optional[float]
    five_shot: Optional[float]
    episodes: int
    half_width: float

    def __post_init__(self):
        for name, value in (("one_shot", self.one_shot), ("five_shot", self.five_shot)):
            if value is not None and not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} accuracy must lie in [0, 1], got {value}")

    @classmethod
    def from_results(cls, variant: str, results: Mapping[int, Tuple[float, int]]) -> "AccuracyRow":
        """Build a row from {shots: (accuracy, episodes)}; shots other than 1 and 5 are ignored."""
        cells = {shots: results[shots] for shots in (1, 5) if shots in results}
        if not cells:
            raise ConfigError(f"No 1-shot or 5-shot result for variant '{variant}'")
        return cls(
            variant=variant,
            one_shot=cells[1][0] if 1 in cells else None,
            five_shot=cells[5][0] if 5 in cells else None,
            episodes=min(n for _, n in cells.values()),
            half_width=max(binomial_half_width(acc, n) for acc, n in cells.values()),
        )


def _cell(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


@dataclass
class AccuracyTable:
    rows: List[AccuracyRow] = field(default_factory=list)

    def add(self, row: AccuracyRow) -> None:
        self.rows = [r for r in self.rows if r.variant != row.variant] + [row]

    def to_csv(self) -> str:
        lines = [TABLE_HEADER]
        for r in self.rows:
            lines.append(f"{r.variant},{_cell(r.one_shot)},{_cell(r.five_shot)},{r.episodes},{r.half_width:.6f}")
        return "\n".join(lines) + "\n"

    def format(self) -> str:
        """Fixed-width rendering with accuracies in percent."""

        def pct(value: Optional[float]) -> str:
            return "-" if value is None else f"{100 * value:.2f}%"

        lines = [f"{'Model':<10} {'1-shot':>8} {'5-shot':>8} {'episodes':>9} {'±':>7}"]
        for r in self.rows:
            lines.append(
                f"{r.variant:<10} {pct(r.one_shot):>8} {pct(r.five_shot):>8} {r.episodes:>9} "
                f"{100 * r.half_width:>6.2f}%"
            )
        return "\n".join(lines)

    def write(self, path: Path) -> Path:
        path = write_report(path, self.to_csv())
        logger.success(f"📊 Accuracy table written: {path} ({len(self.rows)} rows)")
        return path


def rows_from_results(results: Mapping[str, Dict[int, Tuple[float, int]]]) -> AccuracyTable:
    """Table with `maco` first, then `no-cond`, then any other variants."""
    order = sorted(results, key=lambda v: (v != "maco", v != "no-cond", v))
    table = AccuracyTable()
    for variant in order:
        table.add(AccuracyRow.from_results(variant, results[variant]))
    return table
