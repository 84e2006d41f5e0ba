"""
MACO command line
Subcommands: train, eval, splits, synth, table
"""
import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from loguru import logger

import config
from checkpoint import load_checkpoint, save_checkpoint
from database import get_db_session, init_db
from episodes import EpisodeSampler, build_class_splits, make_samplers, synth_dataset_generate
from errors import CheckpointError, ConfigError, MacoError
from ingest import export_dataset, load_dataset, resolve_splits, write_split_manifest
from maco_model import MacoModel
from reporting import (
    AccuracyRow,
    AccuracyTable,
    binomial_half_width,
    emit_metrics_csv,
    rows_from_results,
    write_report,
)
from schemas import PRESET_NAMES, VARIANTS, RunConfig, preset
from services import LedgerService
from training import MetricsRecord, evaluate, fit, steps_per_epoch

CHECKPOINT_NAME = "best.npz"
METRICS_NAME = "metrics.csv"
CONFIG_NAME = "config.json"
EVAL_HEADER = "variant,ways,shots,split,accuracy,half_width,episodes,seed"


# ============================================================================
# LEDGER
# ============================================================================

def _with_ledger(database_url: Optional[str], action: Callable[[LedgerService], object]):
    with get_db_session(database_url) as db:
        return action(LedgerService(db))


# ============================================================================
# TRAIN
# ============================================================================

def describe_schedule(run_config: RunConfig) -> Dict[str, int]:
    s = run_config.schedule
    per_epoch = steps_per_epoch(s.episodes_per_epoch, s.batch_size)
    return {
        "epochs": s.epochs,
        "episodes_per_epoch": s.episodes_per_epoch,
        "batch_size": s.batch_size,
        "steps_per_epoch": per_epoch,
        "total_steps": per_epoch * s.epochs,
        "val_episodes": s.val_episodes,
    }


def run_train(
    run_config: RunConfig,
    *,
    dry_run: bool = False,
    ledger: bool = True,
    database_url: Optional[str] = None,
) -> int:
    """
    Train one model and write best.npz, metrics.csv and config.json.

    Returns:
        0 on success, 1 on any framework error (logged)
    """
    schedule = describe_schedule(run_config)
    logger.info(
        f"Schedule: {schedule['epochs']} epochs x {schedule['episodes_per_epoch']} episodes, "
        f"batch {schedule['batch_size']} -> {schedule['steps_per_epoch']} steps/epoch, "
        f"{schedule['total_steps']} total"
    )
    if dry_run:
        logger.success(f"✅ Dry run: config '{run_config.name}' ({run_config.model.variant}) is valid")
        return 0

    run_id = None
    try:
        out_dir = run_config.resolved_output_dir
        dataset = load_dataset(run_config.dataset, run_config.model.image_size)
        splits = resolve_splits(run_config, dataset)
        model_config = run_config.model
        samplers = make_samplers(
            dataset, splits, model_config.ways, model_config.shots,
            run_config.augment, run_config.seed, run_config.eval_seed,
        )
        model = MacoModel(model_config, seed=run_config.seed)

        if ledger:
            init_db(database_url)
            run_id = _with_ledger(database_url, lambda svc: svc.start_run(
                run_config.name, model_config.variant, model_config.ways, model_config.shots,
                run_config.seed, run_config.to_json(),
            ).id)

        result = fit(run_config, samplers, model)

        checkpoint_path = save_checkpoint(result.best, out_dir / CHECKPOINT_NAME)
        emit_metrics_csv(result.history, out_dir / METRICS_NAME)
        write_report(out_dir / CONFIG_NAME, run_config.to_json())

        if run_id is not None:
            _with_ledger(database_url, lambda svc: svc.record_metrics(run_id, result.history))
            _with_ledger(database_url, lambda svc: svc.finish_run(
                run_id, result.best_epoch, result.best.val_accuracy, str(checkpoint_path)
            ))
        logger.success(
            f"✅ Training complete: best epoch {result.best_epoch} "
            f"(val_acc={result.best.val_accuracy:.4f}) -> {out_dir}"
        )
        return 0

    except MacoError as e:
        logger.error(f"❌ train failed: {e}")
        if run_id is not None:
            _with_ledger(database_url, lambda svc: svc.fail_run(run_id, str(e)))
        return 1
    except BaseException as e:
        logger.error(f"❌ train aborted: {type(e).__name__}: {e}")
        if run_id is not None:
            _with_ledger(database_url, lambda svc: svc.fail_run(run_id, f"{type(e).__name__}: {e}"))
        raise


# ============================================================================
# EVAL
# ============================================================================

@dataclass
class EvalOutcome:
    variant: str
    ways: int
    split: str
    seed: int
    records: Dict[int, MetricsRecord] = field(default_factory=dict)
    row: Optional[AccuracyRow] = None
    csv_path: Optional[Path] = None

    def to_csv(self) -> str:
        lines = [EVAL_HEADER]
        for shots, r in sorted(self.records.items()):
            half = binomial_half_width(r.accuracy, r.episodes)
            lines.append(
                f"{self.variant},{self.ways},{shots},{self.split},{r.accuracy:.6f},{half:.6f},{r.episodes},{self.seed}"
            )
        return "\n".join(lines) + "\n"


def run_eval(
    checkpoint_path: Path,
    episodes: int,
    seed: Optional[int] = None,
    shots: Optional[Sequence[int]] = None,
    split: str = "test",
    out: Optional[Path] = None,
    ledger: bool = True,
    database_url: Optional[str] = None,
) -> EvalOutcome:
    """
    Evaluate a checkpoint on a split at one or more shot counts.

    Writes `eval_<variant>_<split>.csv` next to the checkpoint unless `out`
    is given, and records each result in the ledger.

    Raises:
        CheckpointError / CheckpointVersionError: Unusable checkpoint
    """
    checkpoint_path = Path(checkpoint_path)
    checkpoint = load_checkpoint(checkpoint_path)
    run_config = checkpoint.run_config
    if run_config is None:
        raise CheckpointError(f"{checkpoint_path} carries no run config; cannot locate the {split} split")
    if episodes < 1:
        raise ConfigError(f"--episodes must be >= 1, got {episodes}")

    model = checkpoint.build_model()
    model_config = model.config
    seed = run_config.eval_seed if seed is None else seed
    shot_list = list(shots) if shots else [model_config.shots]

    dataset = load_dataset(run_config.dataset, model_config.image_size)
    splits = resolve_splits(run_config, dataset)
    class_ids = splits.get(split)

    outcome = EvalOutcome(variant=model_config.variant, ways=model_config.ways, split=split, seed=seed)
    for n in shot_list:
        sampler = EpisodeSampler(dataset, class_ids, model_config.ways, n, seed=seed)
        record = evaluate(
            model.with_shots(n), sampler, episodes,
            batch_size=run_config.schedule.eval_batch_size, epoch=checkpoint.epoch, split=split,
        )
        outcome.records[n] = record
        half = binomial_half_width(record.accuracy, record.episodes)
        logger.success(
            f"✅ {model_config.variant} {model_config.ways}-way {n}-shot {split}: "
            f"{100 * record.accuracy:.2f}% ± {100 * half:.2f}% ({episodes} episodes)"
        )
        if ledger:
            init_db(database_url)
            _with_ledger(database_url, lambda svc: svc.record_eval(
                str(checkpoint_path), model_config.variant, model_config.ways, n,
                record.accuracy, half, record.episodes, seed, split=split,
            ))

    cells = {n: (r.accuracy, r.episodes) for n, r in outcome.records.items() if n in (1, 5)}
    if cells:
        outcome.row = AccuracyRow.from_results(model_config.variant, cells)

    out = Path(out) if out is not None else checkpoint_path.parent / f"eval_{model_config.variant}_{split}.csv"
    outcome.csv_path = write_report(out, outcome.to_csv())
    return outcome


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def _parse_counts(text: str) -> Tuple[int, int, int]:
    try:
        counts = tuple(int(part) for part in text.split(","))
    except ValueError as e:
        raise ConfigError(f"--counts must be three integers 'a,b,c', got '{text}'") from e
    if len(counts) != 3:
        raise ConfigError(f"--counts must be three integers 'a,b,c', got '{text}'")
    return counts


def _parse_shots(text: Optional[str]) -> Optional[List[int]]:
    if not text:
        return None
    try:
        shots = [int(part) for part in text.split(",")]
    except ValueError as e:
        raise ConfigError(f"--shots must be comma-separated integers, got '{text}'") from e
    if any(n < 1 for n in shots):
        raise ConfigError(f"--shots entries must be >= 1, got '{text}'")
    return shots


def load_run_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        run_config = RunConfig.from_file(Path(args.config))
    elif args.preset:
        run_config = preset(args.preset)
    else:
        raise ConfigError("train needs --config <file> or --preset <name>")
    if args.variant:
        run_config = run_config.with_variant(args.variant)
    if args.seed is not None:
        run_config = run_config.with_seed(args.seed)
    if args.output_dir:
        run_config = run_config.model_copy(update={"output_dir": Path(args.output_dir)})
    return run_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maco", description="MACO few-shot classification")
    parser.add_argument("--log-level", default=None, help="Log level (default: MACO_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train a model and keep the best-validation checkpoint")
    source = train.add_mutually_exclusive_group()
    source.add_argument("--config", help="RunConfig JSON file")
    source.add_argument("--preset", choices=PRESET_NAMES, help="Built-in RunConfig")
    train.add_argument("--variant", choices=list(VARIANTS), help="maco or no-cond (ablation)")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--output-dir", default=None)
    train.add_argument("--dry-run", action="store_true", help="Validate config and print schedule arithmetic")
    train.add_argument("--no-ledger", action="store_true")

    ev = sub.add_parser("eval", help="Evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--episodes", type=int, default=1000)
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--shots", default=None, help="Comma-separated shot counts (default: trained n)")
    ev.add_argument("--split", choices=["val", "test"], default="test")
    ev.add_argument("--out", default=None)
    ev.add_argument("--no-ledger", action="store_true")

    sp = sub.add_parser("splits", help="Write a class split manifest")
    sp.add_argument("--classes", required=True, help="Directory with one subdirectory per class")
    sp.add_argument("--counts", required=True, help="train,val,test class counts")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sy = sub.add_parser("synth", help="Render the synthetic dataset to PNG files")
    sy.add_argument("--classes", type=int, required=True)
    sy.add_argument("--per-class", type=int, required=True)
    sy.add_argument("--image-size", type=int, default=84)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)

    tb = sub.add_parser("table", help="Accuracy table from the ledger")
    tb.add_argument("--ways", type=int, default=5)
    tb.add_argument("--split", choices=["val", "test"], default="test")
    tb.add_argument("--out", default=None)

    return parser


# ============================================================================
# COMMANDS
# ============================================================================

def _cmd_train(args: argparse.Namespace) -> int:
    return run_train(load_run_config(args), dry_run=args.dry_run, ledger=not args.no_ledger)


def _cmd_eval(args: argparse.Namespace) -> int:
    outcome = run_eval(
        Path(args.checkpoint), args.episodes, args.seed, _parse_shots(args.shots),
        split=args.split, out=args.out, ledger=not args.no_ledger,
    )
    print(outcome.to_csv(), end="")
    if outcome.row is not None:
        table = AccuracyTable()
        table.add(outcome.row)
        print(table.format())
    return 0


def _cmd_splits(args: argparse.Namespace) -> int:
    root = Path(args.classes)
    if not root.is_dir():
        raise ConfigError(f"--classes directory not found: {root}")
    class_ids = sorted(d.name for d in root.iterdir() if d.is_dir())
    splits = build_class_splits(class_ids, _parse_counts(args.counts), args.seed)
    write_split_manifest(splits, Path(args.out))
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    dataset = synth_dataset_generate(args.classes, args.per_class, args.image_size, args.seed)
    export_dataset(dataset, Path(args.out))
    return 0


def _cmd_table(args: argparse.Namespace) -> int:
    init_db()
    results = _with_ledger(None, lambda svc: svc.accuracy_rows(ways=args.ways, split=args.split))
    if not results:
        raise ConfigError(f"No {args.ways}-way {args.split} evaluations in the ledger ({config.DATABASE_URL})")
    table = rows_from_results(results)
    if args.out:
        table.write(Path(args.out))
    print(table.format())
    return 0


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "splits": _cmd_splits,
    "synth": _cmd_synth,
    "table": _cmd_table,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config.configure_logging(level=args.log_level)
    logger.debug(config.describe())
    try:
        return COMMANDS[args.command](args)
    except MacoError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
