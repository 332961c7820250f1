"""
Synthetic paired image/text data with planted foregrounds, label-derived similarity,
query/retrieval/train splits, and the on-disk dataset directory format.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from dotenv import dotenv_values
from pydantic import ValidationError as PydanticValidationError

from errors import CorruptDataError, NotFoundError, StorageError, ValidationError, VersionError
from models import DatasetManifest

DATASET_VERSION = 1
SPLIT_NAMES = ("train", "test", "retrieval")


@dataclass
class PairedDataset:
    """Aligned images, BOW texts and multi-label annotations."""
    manifest: DatasetManifest
    images: np.ndarray            # (n, H0, W0, C0) float32 in [0, 1]
    bows: np.ndarray              # (n, V) float32 raw counts
    label_matrix: np.ndarray      # (n, L) uint8 indicator
    splits: Dict[str, np.ndarray] = field(default_factory=dict)
    masks: Optional[np.ndarray] = None   # (n, H, W) uint8 planted foregrounds

    def __post_init__(self):
        n = self.manifest.n
        if not (len(self.images) == len(self.bows) == len(self.label_matrix) == n):
            raise ValidationError(
                f"Dataset is not aligned: {len(self.images)} images, {len(self.bows)} texts, "
                f"{len(self.label_matrix)} label rows, manifest n={n}")
        if self.masks is not None and len(self.masks) != n:
            raise ValidationError(f"Planted masks cover {len(self.masks)} of {n} instances")

    @property
    def n(self) -> int:
        return self.manifest.n

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def vocab(self) -> int:
        return self.bows.shape[1]

    @property
    def labels(self) -> List[List[int]]:
        return [np.flatnonzero(row).tolist() for row in self.label_matrix]

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise ValidationError(f"Dataset has no '{name}' split (have: {sorted(self.splits)})")
        return self.splits[name]

    def similarity(self) -> "SimilarityMatrix":
        return build_similarity(self.label_matrix)


class SimilarityMatrix:
    """Binary relevance S(i, j) = 1 iff the label sets of i and j intersect.

    Kept as the label indicator matrix; dense blocks and positive lists are derived
    on demand. S(i, i) = 1 for every instance.
    """

    def __init__(self, label_matrix: np.ndarray):
        self.indicator = np.asarray(label_matrix).astype(bool)

    def __len__(self) -> int:
        return self.indicator.shape[0]

    def __getitem__(self, index) -> bool:
        i, j = index
        return bool(i == j or np.any(self.indicator[i] & self.indicator[j]))

    def dense(self, rows: Optional[Sequence[int]] = None, cols: Optional[Sequence[int]] = None) -> np.ndarray:
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        cols = np.arange(len(self)) if cols is None else np.asarray(cols)
        a = self.indicator[rows].astype(np.int32)
        b = self.indicator[cols].astype(np.int32)
        block = (a @ b.T) > 0
        block |= rows[:, None] == cols[None, :]
        return block

    def positives(self, i: int) -> np.ndarray:
        """Positive list of instance i."""
        return np.flatnonzero(self.dense([i])[0])


def _indicator(labels: Union[np.ndarray, Iterable[Iterable[int]]], classes: Optional[int] = None) -> np.ndarray:
    if isinstance(labels, np.ndarray) and labels.ndim == 2:
        return labels.astype(np.uint8)
    label_sets = [sorted(set(int(c) for c in row)) for row in labels]
    classes = classes if classes is not None else 1 + max((max(s) for s in label_sets if s), default=0)
    matrix = np.zeros((len(label_sets), classes), dtype=np.uint8)
    for i, row in enumerate(label_sets):
        matrix[i, row] = 1
    return matrix


def build_similarity(labels: Union[np.ndarray, Iterable[Iterable[int]]]) -> SimilarityMatrix:
    """S from label sets (list of label lists or an (n, L) indicator matrix)."""
    return SimilarityMatrix(_indicator(labels))


# --- Generation ---
def _rectangle_shapes(grid: int) -> List[tuple]:
    cells = grid * grid
    return [(h, w) for h in range(1, grid + 1) for w in range(1, grid + 1)
            if 0.25 * cells <= h * w <= 0.5 * cells]


def draw_rectangle(grid: int, rng: np.random.Generator) -> tuple:
    """(top, left, height, width) of a rectangle covering 25-50% of a grid x grid board."""
    shapes = _rectangle_shapes(grid)
    if not shapes:
        raise ValidationError(f"A {grid}x{grid} grid admits no rectangle covering 25-50% of its cells")
    h, w = shapes[int(rng.integers(len(shapes)))]
    top = int(rng.integers(0, grid - h + 1))
    left = int(rng.integers(0, grid - w + 1))
    return top, left, h, w


def random_rectangle_mask(grid: int, rng: np.random.Generator) -> np.ndarray:
    top, left, h, w = draw_rectangle(grid, rng)
    mask = np.zeros((grid, grid), dtype=np.uint8)
    mask[top:top + h, left:left + w] = 1
    return mask


def generate_synthetic(n: int, classes: int, image_size: int = 16, grid_size: int = 8, vocab: int = 256,
                       noise: float = 0.1, seed: int = 7, channels: int = 3) -> PairedDataset:
    """Planted-foreground paired data.

    Every instance carries 1-3 of `classes` labels. Its image places per-class tiles
    inside a random rectangle covering 25-50% of the grid cells (the planted mask);
    the remaining cells hold class-independent distractor tiles scaled by `noise`.
    Its text sets counts on each label's vocabulary block, always including the
    block's first word, plus Poisson(10 * noise) random noise words.
    """
    if n <= 0 or image_size <= 0 or grid_size <= 0 or channels <= 0:
        raise ValidationError("Dataset sizes must be positive")
    if classes < 2:
        raise ValidationError(f"Need at least 2 classes, got {classes}")
    if image_size % grid_size:
        raise ValidationError(f"Grid size {grid_size} does not divide image size {image_size}")
    if noise < 0 or noise > 1:
        raise ValidationError(f"Noise level must lie in [0, 1], got {noise}")
    words_per_class = vocab // (2 * classes)
    if words_per_class < 1:
        raise ValidationError(f"Vocabulary of {vocab} words is too small for {classes} classes")

    rng = np.random.default_rng(seed)
    cell = image_size // grid_size
    class_tiles = rng.uniform(0.4, 1.0, size=(classes, cell, cell, channels))
    distractors = rng.uniform(0.0, 1.0, size=(8, cell, cell, channels))
    noise_lo = classes * words_per_class
    noise_words = np.arange(noise_lo, vocab) if noise_lo < vocab else np.arange(vocab)

    images = np.zeros((n, image_size, image_size, channels), dtype=np.float32)
    bows = np.zeros((n, vocab), dtype=np.float32)
    label_matrix = np.zeros((n, classes), dtype=np.uint8)
    masks = np.zeros((n, grid_size, grid_size), dtype=np.uint8)

    for i in range(n):
        k = int(rng.integers(1, min(3, classes) + 1))
        labels = np.sort(rng.choice(classes, size=k, replace=False))
        label_matrix[i, labels] = 1

        top, left, h, w = draw_rectangle(grid_size, rng)
        masks[i, top:top + h, left:left + w] = 1

        tiles = np.empty((grid_size, grid_size, cell, cell, channels))
        picks = rng.integers(0, len(distractors), size=(grid_size, grid_size))
        tiles[:] = noise * distractors[picks]
        owners = labels[np.arange(h * w) % k].reshape(h, w)
        jitter = rng.uniform(0.0, 1.0, size=(h, w, cell, cell, channels))
        tiles[top:top + h, left:left + w] = (1.0 - noise) * class_tiles[owners] + noise * jitter
        image = tiles.transpose(0, 2, 1, 3, 4).reshape(image_size, image_size, channels)
        images[i] = np.clip(image, 0.0, 1.0)

        for c in labels:
            block = np.arange(c * words_per_class, (c + 1) * words_per_class)
            extra = max(0, words_per_class // 2 - 1)
            chosen = np.concatenate([block[:1], rng.choice(block[1:], size=min(extra, len(block) - 1), replace=False)])
            bows[i, chosen] += rng.integers(1, 4, size=len(chosen))
        n_noise = int(rng.poisson(10.0 * noise)) if noise > 0 else 0
        if n_noise:
            np.add.at(bows[i], rng.choice(noise_words, size=n_noise), 1.0)

    manifest = DatasetManifest(
        version=DATASET_VERSION, n=n, classes=classes, vocab=vocab,
        image_height=image_size, image_width=image_size, image_channels=channels,
        grid_height=grid_size, grid_width=grid_size, noise=noise, seed=seed, has_masks=True,
    )
    return PairedDataset(manifest, images, bows, label_matrix, masks=masks)


def make_splits(n: int, n_test: int, n_train: int, seed: int) -> Dict[str, np.ndarray]:
    """Uniform test (query) draw; retrieval is the remainder; train is drawn from retrieval."""
    if n_test < 1 or n_test + 1 > n:
        raise ValidationError(f"Cannot take {n_test} test instances out of {n}")
    if n_train < 1 or n_train > n - n_test:
        raise ValidationError(f"Cannot take {n_train} train instances from a retrieval set of {n - n_test}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    test = np.sort(perm[:n_test])
    retrieval = np.sort(perm[n_test:])
    train = np.sort(rng.choice(retrieval, size=n_train, replace=False))
    return {"train": train.astype(np.int64), "test": test.astype(np.int64), "retrieval": retrieval.astype(np.int64)}


# --- Storage ---
def _payload(path: Path, dtype: str, shape: tuple) -> np.ndarray:
    if not path.is_file():
        raise NotFoundError(f"Dataset file '{path}' not found")
    data = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise CorruptDataError(f"'{path.name}' holds {data.size} values, expected {expected}")
    return data.reshape(shape)


def save_dataset(dataset: PairedDataset, path: Union[str, Path], force: bool = False) -> Path:
    """Write the dataset directory: manifest, raw arrays, labels, masks and splits."""
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise StorageError(f"Output directory '{path}' exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)

    manifest = dataset.manifest.model_copy(update={"has_masks": dataset.masks is not None})
    lines = [f"{key}={str(value).lower() if isinstance(value, bool) else value}"
             for key, value in manifest.model_dump().items()]
    (path / "manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")

    dataset.images.astype("<f4").tofile(path / "images.f32")
    dataset.bows.astype("<f4").tofile(path / "bow.f32")
    label_lines = [f"{i}: {' '.join(str(c) for c in row)}" for i, row in enumerate(dataset.labels)]
    (path / "labels.txt").write_text("\n".join(label_lines) + "\n", encoding="utf-8")
    if dataset.masks is not None:
        dataset.masks.astype(np.uint8).tofile(path / "masks.u8")
    split_lines = [f"{name}: {' '.join(str(i) for i in dataset.splits[name])}" for name in SPLIT_NAMES
                   if name in dataset.splits]
    (path / "splits.txt").write_text("\n".join(split_lines) + "\n", encoding="utf-8")
    return path


def _read_manifest(path: Path) -> DatasetManifest:
    manifest_path = path / "manifest"
    if not manifest_path.is_file():
        raise NotFoundError(f"Dataset manifest '{manifest_path}' not found")
    raw = dotenv_values(manifest_path, interpolate=False)
    try:
        version = int(raw.get("version", ""))
    except ValueError:
        raise CorruptDataError(f"Dataset manifest '{manifest_path}' has no readable version")
    if version != DATASET_VERSION:
        raise VersionError(f"Dataset format version {version} is not supported (expected {DATASET_VERSION})")
    try:
        return DatasetManifest(**raw)
    except PydanticValidationError as e:
        raise CorruptDataError(f"Dataset manifest '{manifest_path}' is invalid: {e.errors()[0]['msg']}") from e


def _read_index_lines(path: Path, n: int, check_range: bool = True) -> Dict[str, List[int]]:
    if not path.is_file():
        raise NotFoundError(f"Dataset file '{path}' not found")
    entries = {}
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise CorruptDataError(f"'{path.name}' line {number} has no ':' separator")
        try:
            values = [int(v) for v in rest.split()]
        except ValueError:
            raise CorruptDataError(f"'{path.name}' line {number} holds a non-integer entry")
        if check_range and any(v < 0 or v >= n for v in values):
            raise CorruptDataError(f"'{path.name}' line {number} indexes outside 0..{n - 1}")
        entries[key.strip()] = values
    return entries


def load_dataset(path: Union[str, Path]) -> PairedDataset:
    """Read a dataset directory written by save_dataset."""
    path = Path(path)
    if not path.is_dir():
        raise NotFoundError(f"Dataset directory '{path}' not found")
    manifest = _read_manifest(path)
    n = manifest.n
    images = _payload(path / "images.f32", "<f4",
                      (n, manifest.image_height, manifest.image_width, manifest.image_channels))
    bows = _payload(path / "bow.f32", "<f4", (n, manifest.vocab))

    label_rows = _read_index_lines(path / "labels.txt", n, check_range=False)
    label_matrix = np.zeros((n, manifest.classes), dtype=np.uint8)
    for key, row in label_rows.items():
        try:
            i = int(key)
        except ValueError:
            raise CorruptDataError(f"labels.txt has a non-integer instance id '{key}'")
        if i < 0 or i >= n or any(c < 0 or c >= manifest.classes for c in row):
            raise CorruptDataError(f"labels.txt entry '{key}' is out of range")
        label_matrix[i, row] = 1
    if len(label_rows) != n:
        raise CorruptDataError(f"labels.txt lists {len(label_rows)} instances, expected {n}")

    masks = None
    if manifest.has_masks:
        masks = _payload(path / "masks.u8", np.uint8, (n, manifest.grid_height, manifest.grid_width))

    splits = {name: np.asarray(values, dtype=np.int64)
              for name, values in _read_index_lines(path / "splits.txt", n).items()}
    return PairedDataset(manifest, images, bows, label_matrix, splits=splits, masks=masks)
