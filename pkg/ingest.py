"""
Ingest - image directories to datasets, bilinear resize, split manifests
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger
from PIL import Image

import config
from episodes import SPLIT_NAMES, ClassSplits, ImageDataset, build_class_splits, synth_dataset_generate
from errors import DatasetError, ReportError, SplitError
from schemas import DatasetSource, RunConfig
from storage import write_atomic, write_text


# ============================================================================
# RESIZE
# ============================================================================

def _axis_weights(in_size: int, out_size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel source coordinates, clamped to the image, as (low, high, fraction)."""
    scale = in_size / out_size
    src = np.clip((np.arange(out_size) + 0.5) * scale - 0.5, 0.0, in_size - 1)
    low = np.floor(src).astype(np.int64)
    high = np.minimum(low + 1, in_size - 1)
    return low, high, src - low


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """
    Bilinear resize of an H x W (x C) array with half-pixel centers.

    A resize to the same extents returns the input values unchanged.
    """
    if img.ndim not in (2, 3):
        raise DatasetError(f"resize expects H x W or H x W x C, got shape {img.shape}")
    data = img.astype(np.float64)
    trailing = (1,) * (data.ndim - 2)

    low, high, frac = _axis_weights(data.shape[0], height)
    frac = frac.reshape((-1, 1) + trailing)
    rows = data[low] * (1.0 - frac) + data[high] * frac

    low, high, frac = _axis_weights(data.shape[1], width)
    frac = frac.reshape((1, -1) + trailing)
    return rows[:, low] * (1.0 - frac) + rows[:, high] * frac


# ============================================================================
# INGESTION
# ============================================================================

@dataclass
class IngestReport:
    dataset: ImageDataset
    files: int
    loaded: int
    skipped: List[Path] = field(default_factory=list)


def decode_image(path: Path, image_size: int) -> np.ndarray:
    """Decode to RGB (grayscale is replicated), scale to [0, 1], resize to image_size."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if rgb.shape[:2] != (image_size, image_size):
        rgb = resize_bilinear(rgb, image_size, image_size)
    return rgb.astype(np.float32)


def _try_decode(path: Path, image_size: int) -> Optional[np.ndarray]:
    try:
        return decode_image(path, image_size)
    except (OSError, ValueError, Image.DecompressionBombError) as e:
        logger.warning(f"⚠️ Skipping undecodable image {path}: {e}")
        return None


def _class_files(root: Path) -> Dict[str, List[Path]]:
    classes = {}
    for class_dir in sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name):
        classes[class_dir.name] = sorted(
            (f for f in class_dir.iterdir() if f.is_file() and f.suffix.lower() in config.IMAGE_SUFFIXES),
            key=lambda f: f.name,
        )
    return classes


def ingest_dataset(root: Path, image_size: int = 84, workers: Optional[int] = None) -> IngestReport:
    """
    Load a tree with one subdirectory per class.

    Class ids are the subdirectory names in lexicographic order. Files are
    decoded on a thread pool and assembled in sorted file order.

    Raises:
        DatasetError: Root missing, no class directories, or a class with no
            decodable images
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"Dataset root not found: {root}")
    classes = _class_files(root)
    if not classes:
        raise DatasetError(f"No class directories under {root}")

    tasks = [(class_id, path) for class_id, paths in classes.items() for path in paths]
    logger.info(f"Ingesting {len(tasks)} files from {len(classes)} classes under {root}")

    with ThreadPoolExecutor(max_workers=workers or config.INGEST_WORKERS) as pool:
        decoded = list(pool.map(lambda task: _try_decode(task[1], image_size), tasks))

    stacks: Dict[str, List[np.ndarray]] = {class_id: [] for class_id in classes}
    skipped: List[Path] = []
    for (class_id, path), image in zip(tasks, decoded):
        if image is None:
            skipped.append(path)
        else:
            stacks[class_id].append(image)

    empty = [class_id for class_id, images in stacks.items() if not images]
    if empty:
        raise DatasetError(f"Classes with no decodable images under {root}: {empty[:5]}")

    dataset = ImageDataset({cid: np.stack(images) for cid, images in stacks.items()}, name=root.name)
    loaded = len(tasks) - len(skipped)
    if skipped:
        logger.warning(f"⚠️ Skipped {len(skipped)} of {len(tasks)} files")
    logger.success(f"✅ Dataset ingested: {len(dataset)} classes, {loaded} images at {image_size}px")
    return IngestReport(dataset=dataset, files=len(tasks), loaded=loaded, skipped=skipped)


def load_dataset(source: DatasetSource, image_size: int) -> ImageDataset:
    """Dataset named by a RunConfig: a directory tree or the synthetic generator."""
    if source.kind == "synthetic":
        return synth_dataset_generate(source.num_classes, source.images_per_class, image_size, source.seed)
    return ingest_dataset(source.path, image_size).dataset


def _save_png(image: np.ndarray, path: Path) -> None:
    pixels = Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8))
    write_atomic(path, lambda fh: pixels.save(fh, format="PNG"))


def export_dataset(dataset: ImageDataset, out_dir: Path) -> int:
    """Write every image as `<out_dir>/<class_id>/<index>.png`; returns the file count."""
    out_dir = Path(out_dir)
    written = 0
    try:
        for class_id in dataset.class_ids:
            for index, image in enumerate(dataset.images[class_id]):
                _save_png(image, out_dir / class_id / f"{index:03d}.png")
                written += 1
    except OSError as e:
        raise ReportError(f"Cannot write dataset under {out_dir}: {e}") from e
    logger.success(f"✅ Wrote {written} images for {len(dataset)} classes to {out_dir}")
    return written


# ============================================================================
# SPLIT MANIFESTS
# ============================================================================

def format_split_manifest(splits: ClassSplits) -> str:
    lines = [f"{class_id},{split}" for split in SPLIT_NAMES for class_id in splits.get(split)]
    return "\n".join(lines) + "\n"


def write_split_manifest(splits: ClassSplits, path: Path) -> Path:
    """Lines `class_id,split`, train then val then test."""
    path = Path(path)
    try:
        write_text(path, format_split_manifest(splits))
    except OSError as e:
        raise ReportError(f"Cannot write split manifest {path}: {e}") from e
    logger.success(f"✅ Split manifest written: {path} {splits.counts()}")
    return path


def read_split_manifest(path: Path) -> ClassSplits:
    """
    Parse a `class_id,split` manifest; blank lines and `#` comments are ignored.

    Raises:
        SplitError: Missing file, malformed line, unknown split or a class
            listed twice
    """
    path = Path(path)
    if not path.is_file():
        raise SplitError(f"Split manifest not found: {path}")

    members: Dict[str, List[str]] = {split: [] for split in SPLIT_NAMES}
    seen = set()
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2 or not parts[0]:
            raise SplitError(f"{path}:{number}: expected 'class_id,split', got {raw!r}")
        class_id, split = parts
        if split not in SPLIT_NAMES:
            raise SplitError(f"{path}:{number}: invalid split '{split}'\nValid options: {list(SPLIT_NAMES)}")
        if class_id in seen:
            raise SplitError(f"{path}:{number}: class '{class_id}' listed twice")
        seen.add(class_id)
        members[split].append(class_id)

    return ClassSplits(
        train=tuple(sorted(members["train"])),
        val=tuple(sorted(members["val"])),
        test=tuple(sorted(members["test"])),
    )


def resolve_splits(run_config: RunConfig, dataset: ImageDataset) -> ClassSplits:
    """Manifest splits when configured, otherwise seeded random splits; checked against the dataset."""
    if run_config.splits.manifest is not None:
        splits = read_split_manifest(run_config.splits.manifest)
        logger.info(f"Using split manifest {run_config.splits.manifest}")
    else:
        splits = build_class_splits(dataset.class_ids, run_config.splits.counts, run_config.splits.seed)
    splits.check_covers(dataset.class_ids)
    return splits
