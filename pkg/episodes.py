"""
Episodes - class splits, K-way n-shot sampling, augmentation, synthetic data
"""
import colorsys
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy import ndimage

from errors import DatasetError, EpisodeError, SplitError
from schemas import AugmentPolicy

SPLIT_NAMES = ("train", "val", "test")
SeedLike = Union[int, np.random.SeedSequence]


# ============================================================================
# DATA TYPES
# ============================================================================

@dataclass(frozen=True, eq=False)
class Episode:
    """
    One K-way n-shot trial.

    Attributes:
        support: K x n x H x W x C images in [0, 1], class-major
        query: H x W x C image
        target: position of the query's class in [0, K)
        class_ids: dataset class id at each position
        support_indices: K x n dataset image indices
        query_index: dataset image index of the query
    """
    support: np.ndarray
    query: np.ndarray
    target: int
    class_ids: Tuple[str, ...] = ()
    support_indices: Optional[np.ndarray] = None
    query_index: Optional[int] = None

    def __post_init__(self):
        if self.support.ndim != 5:
            raise EpisodeError(f"support must be K x n x H x W x C, got shape {self.support.shape}")
        if self.query.shape != self.support.shape[2:]:
            raise EpisodeError(f"query shape {self.query.shape} differs from support images {self.support.shape[2:]}")
        if not 0 <= self.target < self.ways:
            raise EpisodeError(f"target {self.target} outside [0, {self.ways})")
        if self.class_ids and len(self.class_ids) != self.ways:
            raise EpisodeError(f"{len(self.class_ids)} class ids for a {self.ways}-way episode")
        if self.support_indices is not None and self.query_index is not None:
            if self.query_index in set(int(i) for i in self.support_indices[self.target]):
                raise EpisodeError(f"query image {self.query_index} is also a support image of its class")

    @property
    def ways(self) -> int:
        return self.support.shape[0]

    @property
    def shots(self) -> int:
        return self.support.shape[1]

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return self.query.shape

    def images(self) -> np.ndarray:
        """All K*n+1 images: support in class order, then the query."""
        flat = self.support.reshape((-1,) + self.image_shape)
        return np.concatenate([flat, self.query[None]], axis=0)

    def shuffled(self, permutation: Sequence[int]) -> "Episode":
        """Reorder class positions, moving the target index along."""
        perm = np.asarray(permutation, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.ways)):
            raise EpisodeError(f"not a permutation of {self.ways} positions: {perm.tolist()}")
        new_target = int(np.flatnonzero(perm == self.target)[0])
        return Episode(
            support=self.support[perm],
            query=self.query,
            target=new_target,
            class_ids=tuple(self.class_ids[i] for i in perm) if self.class_ids else (),
            support_indices=None if self.support_indices is None else self.support_indices[perm],
            query_index=self.query_index,
        )


@dataclass(frozen=True, eq=False)
class ImageDataset:
    """Immutable map class id -> stacked images (M x H x W x C, float32 in [0, 1])."""
    images: Mapping[str, np.ndarray]
    name: str = "dataset"

    def __post_init__(self):
        if not self.images:
            raise DatasetError(f"Dataset '{self.name}' has no classes")
        shape = None
        for class_id, stack in self.images.items():
            if stack.ndim != 4 or stack.shape[0] == 0:
                raise DatasetError(f"Class '{class_id}' in '{self.name}' is empty or not M x H x W x C")
            if shape is None:
                shape = stack.shape[1:]
            elif stack.shape[1:] != shape:
                raise DatasetError(
                    f"Class '{class_id}' image shape {stack.shape[1:]} differs from {shape} in '{self.name}'"
                )
            stack.setflags(write=False)

    @property
    def class_ids(self) -> Tuple[str, ...]:
        return tuple(sorted(self.images))

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return next(iter(self.images.values())).shape[1:]

    @property
    def num_images(self) -> int:
        return sum(stack.shape[0] for stack in self.images.values())

    def class_size(self, class_id: str) -> int:
        return self.images[class_id].shape[0]

    def subset(self, class_ids: Iterable[str]) -> "ImageDataset":
        return ImageDataset({cid: self.images[cid] for cid in class_ids}, name=self.name)

    def __len__(self) -> int:
        return len(self.images)

    def __repr__(self) -> str:
        return f"<ImageDataset '{self.name}' classes={len(self)} images={self.num_images} shape={self.image_shape}>"


# ============================================================================
# CLASS SPLITS
# ============================================================================

@dataclass(frozen=True)
class ClassSplits:
    """Disjoint train/val/test class lists."""
    train: Tuple[str, ...]
    val: Tuple[str, ...]
    test: Tuple[str, ...]
    seed: Optional[int] = None

    def __post_init__(self):
        seen: Dict[str, str] = {}
        for split in SPLIT_NAMES:
            for class_id in getattr(self, split):
                if class_id in seen:
                    raise SplitError(f"Class '{class_id}' appears in both '{seen[class_id]}' and '{split}'")
                seen[class_id] = split

    def get(self, split: str) -> Tuple[str, ...]:
        if split not in SPLIT_NAMES:
            raise SplitError(f"Invalid split: '{split}'\nValid options: {list(SPLIT_NAMES)}")
        return getattr(self, split)

    def split_of(self, class_id: str) -> str:
        for split in SPLIT_NAMES:
            if class_id in getattr(self, split):
                return split
        raise SplitError(f"Class '{class_id}' is in no split")

    @property
    def all_classes(self) -> Tuple[str, ...]:
        return self.train + self.val + self.test

    def counts(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def check_covers(self, class_ids: Iterable[str]) -> None:
        """Raise SplitError unless the splits partition exactly `class_ids`."""
        expected = set(class_ids)
        actual = set(self.all_classes)
        if expected != actual:
            missing = sorted(expected - actual)[:5]
            extra = sorted(actual - expected)[:5]
            raise SplitError(f"Splits do not match dataset classes (missing {missing}, unknown {extra})")


def build_class_splits(class_ids: Sequence[str], counts: Tuple[int, int, int], seed: int) -> ClassSplits:
    """
    Uniform random partition of classes into train/val/test.

    Class ids are sorted before shuffling, so the result depends only on the
    set of ids and the seed.

    Raises:
        SplitError: If counts do not sum to the number of classes
    """
    ids = sorted(class_ids)
    if len(set(ids)) != len(ids):
        raise SplitError("Duplicate class ids in split input")
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise SplitError(f"Split counts must be three non-negative integers, got {tuple(counts)}")
    if sum(counts) != len(ids):
        raise SplitError(
            f"Split counts {tuple(counts)} sum to {sum(counts)}, but there are {len(ids)} classes"
        )

    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train, n_val, _ = counts
    return ClassSplits(
        train=tuple(sorted(shuffled[:n_train])),
        val=tuple(sorted(shuffled[n_train:n_train + n_val])),
        test=tuple(sorted(shuffled[n_train + n_val:])),
        seed=seed,
    )


# ============================================================================
# AUGMENTATION
# ============================================================================

def _snap(value: float) -> float:
    for exact in (-1.0, 0.0, 1.0):
        if abs(value - exact) < 1e-12:
            return exact
    return value


def affine_warp(
    img: np.ndarray,
    angle_degrees: float = 0.0,
    translate: Tuple[float, float] = (0.0, 0.0),
    zoom: float = 1.0,
    flip: bool = False,
) -> np.ndarray:
    """
    Rotate/zoom about the image center, shift by `translate` pixels (row, col),
    then optionally mirror left-right.

    Bilinear resampling; pixels mapped from outside the source are zero.
    A +90 degree rotation equals np.rot90(img, 1).
    """
    out = img
    if angle_degrees != 0.0 or zoom != 1.0 or translate[0] != 0.0 or translate[1] != 0.0:
        theta = np.deg2rad(angle_degrees)
        cos, sin = _snap(float(np.cos(theta))), _snap(float(np.sin(theta)))
        # output coordinate -> input coordinate
        rotation = np.array([[cos, sin], [-sin, cos]]) / zoom
        center = (np.array(img.shape[:2], dtype=np.float64) - 1.0) / 2.0
        offset = center - rotation @ (center + np.asarray(translate, dtype=np.float64))
        if img.ndim == 3:
            matrix = np.eye(3)
            matrix[:2, :2] = rotation
            offset = np.append(offset, 0.0)
        else:
            matrix = rotation
        out = ndimage.affine_transform(
            img.astype(np.float64), matrix, offset=offset, order=1, mode="grid-constant", cval=0.0
        )
    if flip:
        out = out[:, ::-1]
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def augment_image(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """
    Random rotation, translation, zoom and horizontal flip drawn from `policy`.

    Returns a copy of `img` unchanged when the policy is disabled.
    """
    if not policy.enabled:
        return img.copy()
    size = np.array(img.shape[:2], dtype=np.float64)
    angle = rng.uniform(-policy.rotation_max_degrees, policy.rotation_max_degrees)
    shift = rng.uniform(-policy.translate_max_fraction, policy.translate_max_fraction, size=2) * size
    low, high = policy.zoom_range
    zoom = rng.uniform(low, high)
    flip = bool(rng.random() < policy.hflip_probability)
    return affine_warp(img, angle, (float(shift[0]), float(shift[1])), zoom, flip)


# ============================================================================
# EPISODE SAMPLING
# ============================================================================

def sample_episode(
    dataset: ImageDataset,
    class_ids: Sequence[str],
    ways: int,
    shots: int,
    policy: Optional[AugmentPolicy],
    rng: np.random.Generator,
) -> Episode:
    """
    Draw one K-way n-shot episode from `class_ids`.

    Classes are drawn without replacement in random order (the order is the
    class position), the target position is uniform, and the query comes from
    the target class but outside its support images. Images are augmented
    only when a policy is given.

    Raises:
        EpisodeError: If there are fewer than K classes or a drawn class has
            fewer than n+1 images
    """
    if len(class_ids) < ways:
        raise EpisodeError(f"{ways}-way episodes need {ways} classes, split has {len(class_ids)}")

    positions = rng.choice(len(class_ids), size=ways, replace=False)
    target = int(rng.integers(ways))
    height, width, channels = dataset.image_shape

    support = np.empty((ways, shots, height, width, channels), dtype=np.float32)
    support_indices = np.empty((ways, shots), dtype=np.int64)
    query = None
    query_index = None
    chosen = []

    for pos, class_pos in enumerate(positions):
        class_id = class_ids[int(class_pos)]
        chosen.append(class_id)
        pool = dataset.images[class_id]
        if pool.shape[0] < shots + 1:
            raise EpisodeError(
                f"Class '{class_id}' has {pool.shape[0]} images, {shots}-shot episodes need {shots + 1}"
            )
        draw = shots + 1 if pos == target else shots
        picks = rng.choice(pool.shape[0], size=draw, replace=False)
        support_indices[pos] = picks[:shots]
        for slot, index in enumerate(picks[:shots]):
            image = pool[index]
            support[pos, slot] = augment_image(image, policy, rng) if policy is not None else image
        if pos == target:
            query_index = int(picks[shots])
            image = pool[query_index]
            query = augment_image(image, policy, rng) if policy is not None else np.array(image)

    return Episode(
        support=support,
        query=query.astype(np.float32),
        target=target,
        class_ids=tuple(chosen),
        support_indices=support_indices,
        query_index=query_index,
    )


class EpisodeSampler:
    """
    Seeded stream of episodes over one split.

    Augmentation is applied only when `augment=True` (training split) and the
    policy is enabled. `clone()` copies the stream state; `fork(k)` derives k
    independent streams for concurrent workers.
    """

    def __init__(
        self,
        dataset: ImageDataset,
        class_ids: Sequence[str],
        ways: int,
        shots: int,
        policy: Optional[AugmentPolicy] = None,
        augment: bool = False,
        seed: SeedLike = 0,
    ):
        self.dataset = dataset
        self.class_ids = tuple(class_ids)
        self.ways = ways
        self.shots = shots
        self.policy = policy if augment and policy is not None and policy.enabled else None
        self._seed_seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._rng = np.random.Generator(np.random.PCG64(self._seed_seq))

        if len(self.class_ids) < ways:
            raise EpisodeError(f"{ways}-way episodes need {ways} classes, split has {len(self.class_ids)}")
        unknown = [cid for cid in self.class_ids if cid not in dataset.images]
        if unknown:
            raise EpisodeError(f"Classes not in dataset: {unknown[:5]}")

    @property
    def augmenting(self) -> bool:
        return self.policy is not None

    def sample(self) -> Episode:
        return sample_episode(self.dataset, self.class_ids, self.ways, self.shots, self.policy, self._rng)

    def sample_batch(self, count: int) -> List[Episode]:
        return [self.sample() for _ in range(count)]

    def clone(self) -> "EpisodeSampler":
        twin = EpisodeSampler.__new__(EpisodeSampler)
        twin.dataset = self.dataset
        twin.class_ids = self.class_ids
        twin.ways = self.ways
        twin.shots = self.shots
        twin.policy = self.policy
        twin._seed_seq = self._seed_seq
        twin._rng = np.random.Generator(np.random.PCG64())
        twin._rng.bit_generator.state = self._rng.bit_generator.state
        return twin

    def fork(self, count: int) -> List["EpisodeSampler"]:
        return [
            EpisodeSampler(self.dataset, self.class_ids, self.ways, self.shots,
                           self.policy, augment=self.policy is not None, seed=child)
            for child in self._seed_seq.spawn(count)
        ]

    def with_shots(self, shots: int, seed: SeedLike) -> "EpisodeSampler":
        return EpisodeSampler(self.dataset, self.class_ids, self.ways, shots,
                              self.policy, augment=self.policy is not None, seed=seed)


def make_samplers(
    dataset: ImageDataset,
    splits: ClassSplits,
    ways: int,
    shots: int,
    policy: AugmentPolicy,
    seed: int,
    eval_seed: int,
) -> Dict[str, EpisodeSampler]:
    """Train (augmented), val and test samplers with separate seed streams."""
    train_seq, = np.random.SeedSequence(seed).spawn(1)
    samplers = {
        "train": EpisodeSampler(dataset, splits.train, ways, shots, policy, augment=True, seed=train_seq),
        "val": EpisodeSampler(dataset, splits.val, ways, shots, seed=eval_seed),
        "test": EpisodeSampler(dataset, splits.test, ways, shots, seed=eval_seed + 1),
    }
    logger.info(
        f"Samplers ready: {ways}-way {shots}-shot | train={len(splits.train)} "
        f"val={len(splits.val)} test={len(splits.test)} classes"
    )
    return samplers


# ============================================================================
# SYNTHETIC DATASET
# ============================================================================
SHAPES = ("circle", "triangle", "bar", "cross")
PATTERNS = ("solid", "outline", "striped")
HUES = 6


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if shape == "circle":
        return u ** 2 + v ** 2 <= 1.0
    if shape == "triangle":
        return (v <= 0.5) & (v >= -1.0 + 1.732 * np.abs(u))
    if shape == "bar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.35)
    return ((np.abs(u) <= 1.0) & (np.abs(v) <= 0.3)) | ((np.abs(v) <= 1.0) & (np.abs(u) <= 0.3))


def class_appearance(class_index: int) -> Tuple[str, float, str, float]:
    """(shape, hue, pattern, saturation) that identifies a synthetic class."""
    shape = SHAPES[class_index % len(SHAPES)]
    hue = ((class_index // len(SHAPES)) % HUES) / HUES
    pattern = PATTERNS[(class_index // (len(SHAPES) * HUES)) % len(PATTERNS)]
    saturation = 1.0 - 0.3 * ((class_index // (len(SHAPES) * HUES * len(PATTERNS))) % 3)
    return shape, hue, pattern, saturation


def render_synthetic_image(class_index: int, image_size: int, rng: np.random.Generator) -> np.ndarray:
    shape, hue, pattern, saturation = class_appearance(class_index)
    size = float(image_size)

    cy, cx = (size / 2.0) + rng.uniform(-0.1, 0.1, size=2) * size
    radius = rng.uniform(0.25, 0.35) * size
    angle = np.deg2rad(rng.uniform(-15.0, 15.0))

    yy, xx = np.mgrid[0:image_size, 0:image_size] + 0.5
    dy, dx = (yy - cy) / radius, (xx - cx) / radius
    u = np.cos(angle) * dx + np.sin(angle) * dy
    v = -np.sin(angle) * dx + np.cos(angle) * dy

    mask = _shape_mask(shape, u, v)
    if pattern == "outline":
        mask &= ~_shape_mask(shape, u / 0.6, v / 0.6)
    elif pattern == "striped":
        mask &= (np.floor((u + v) * 3.0) % 2) == 0

    value = rng.uniform(0.8, 1.0)
    color = np.array(colorsys.hsv_to_rgb(hue, saturation, value))
    background = rng.uniform(0.0, 0.25)

    img = np.full((image_size, image_size, 3), background)
    img[mask] = color
    img += rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset_generate(num_classes: int, images_per_class: int, image_size: int, seed: int) -> ImageDataset:
    """
    Procedural dataset of colored shapes, one class per (shape, hue, pattern).

    Class ids are `synth_000`, `synth_001`, ...; every class has its own seed
    stream derived from `seed`, so the dataset is bitwise reproducible.
    """
    if num_classes < 1 or images_per_class < 1 or image_size < 2:
        raise DatasetError(
            f"Invalid synthetic dataset size: classes={num_classes}, per_class={images_per_class}, "
            f"image_size={image_size}"
        )
    streams = np.random.SeedSequence(seed).spawn(num_classes)
    images = {}
    for c, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        images[f"synth_{c:03d}"] = np.stack(
            [render_synthetic_image(c, image_size, rng) for _ in range(images_per_class)]
        )
    dataset = ImageDataset(images, name=f"synthetic-{seed}")
    logger.info(f"Synthetic dataset: {num_classes} classes x {images_per_class} images at {image_size}px")
    return dataset
