"""Dataset ingestion and construction.

Covers IDX (MNIST-container) reading, deterministic synthetic generators for
desk-scale work, image rotation and label-split transforms, the alpha-weighted
two-dataset mixture, flipped accuracy, and a small binary dataset format
(PMDS1) for persistence.

Mixture semantics: a :class:`MixedDataset` is never materialized as one array.
Its metrics are defined as the alpha-weighted combination of the per-part
metrics, which makes ``loss(mix) = (1-alpha)*loss(A) + alpha*loss(B)`` hold
exactly regardless of the two part sizes.  Physical concatenation (with
balanced resampling) exists separately for training a reference model on the
union, see :func:`balanced_concat`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nnet
from .errors import DataIOError, FormatError, ValidationError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

PMDS_MAGIC = b"PMDS"
PMDS_VERSION = 1


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.flags.writeable:
        a = a.copy()  # never flip writeability on a caller-owned array
        a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Labeled examples: features in [0, 1], integer labels in [0, C)."""

    name: str
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        _require(feats.ndim == 2 and feats.shape[0] >= 1, "features must be a nonempty N x D matrix")
        _require(labels.shape == (feats.shape[0],), "labels must match the feature rows")
        _require(self.num_classes >= 1, "num_classes must be >= 1")
        _require(bool((labels >= 0).all() and (labels < self.num_classes).all()),
                 "labels out of range")
        _require(bool(np.isfinite(feats).all()), "features contain non-finite values")
        _require(bool((feats >= 0.0).all() and (feats <= 1.0).all()),
                 "features must lie in [0, 1]")
        object.__setattr__(self, "features", _freeze(feats))
        object.__setattr__(self, "labels", _freeze(labels))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class MixedDataset:
    """Alpha-weighted union of two equally-labeled datasets."""

    part_a: Dataset
    part_b: Dataset
    alpha: float = 0.5

    def __post_init__(self):
        _require(self.part_a.num_classes == self.part_b.num_classes,
                 "mixed parts must share one class count")
        _require(0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return self.part_a.num_classes

    @property
    def name(self) -> str:
        return f"{self.part_a.name}-{self.part_b.name}"


@dataclass(frozen=True)
class CondensedDataset:
    """A few synthetic examples per class; features may exit [0, 1]."""

    source_name: str
    ipc: int
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        _require(self.ipc >= 1, "ipc must be >= 1")
        _require(feats.ndim == 2, "features must be 2-D")
        _require(labels.shape == (feats.shape[0],), "labels must match the feature rows")
        _require(bool(np.isfinite(feats).all()), "features contain non-finite values")
        classes = self.num_classes
        counts = np.bincount(labels, minlength=classes)
        _require(bool((counts == self.ipc).all()),
                 f"expected exactly {self.ipc} rows per class, got {counts.tolist()}")
        object.__setattr__(self, "features", _freeze(feats))
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def to_dataset(self, name: str | None = None) -> Dataset:
        """Clamped [0, 1] view usable wherever a Dataset is expected."""
        return Dataset(
            name or f"{self.source_name}-cond{self.ipc}",
            np.clip(self.features, 0.0, 1.0),
            self.labels,
            self.num_classes,
        )


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------

def _read_exact(fh, n: int, path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataIOError(f"{path}: truncated, wanted {n} bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path, name: str | None = None) -> Dataset:
    """Read the classic big-endian IDX image/label pair, scaling pixels by 255."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"{images_path}: bad image magic 0x{magic:08x}")
        pixels = np.frombuffer(_read_exact(fh, n * rows * cols, images_path),
                               dtype=np.uint8)
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, labels_path))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"{labels_path}: bad label magic 0x{magic:08x}")
        labels = np.frombuffer(_read_exact(fh, n_labels, labels_path), dtype=np.uint8)
    _require(n == n_labels,
             f"image count {n} != label count {n_labels}")
    feats = (pixels.astype(np.float32) / 255.0).reshape(n, rows * cols)
    classes = int(labels.max()) + 1
    return Dataset(name or images_path.stem, feats, labels.astype(np.int64), classes)


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def gen_blobs(classes: int, per_class: int, dim: int, spread: float, seed: int,
              name: str | None = None) -> Dataset:
    """Gaussian class clusters on a circle in the first two coordinates.

    The circle is the unit circle mapped into the unit square (center 0.5,
    radius 0.45) so that clamping to [0, 1] does not collapse classes.  All
    coordinates, including the non-informative ones, get noise of scale
    ``spread``; spread 0 therefore makes every point of a class identical.
    """
    _require(classes >= 2, "need at least 2 classes")
    _require(per_class >= 1, "need at least 1 point per class")
    _require(dim >= 2, "need at least 2 feature dimensions")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(classes) / classes
    centers = np.full((classes, dim), 0.5)
    centers[:, 0] = 0.5 + 0.45 * np.cos(angles)
    centers[:, 1] = 0.5 + 0.45 * np.sin(angles)
    feats = np.repeat(centers, per_class, axis=0)
    feats = feats + spread * rng.standard_normal(feats.shape)
    feats = np.clip(feats, 0.0, 1.0).astype(np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(name or f"blobs{classes}", feats, labels, classes)


def _bilinear_upsample(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    gh, gw = grid.shape
    rr = np.linspace(0.0, gh - 1.0, height)
    cc = np.linspace(0.0, gw - 1.0, width)
    r0 = np.floor(rr).astype(int)
    c0 = np.floor(cc).astype(int)
    r1 = np.minimum(r0 + 1, gh - 1)
    c1 = np.minimum(c0 + 1, gw - 1)
    fr = (rr - r0)[:, None]
    fc = (cc - c0)[None, :]
    top = grid[np.ix_(r0, c0)] * (1 - fc) + grid[np.ix_(r0, c1)] * fc
    bot = grid[np.ix_(r1, c0)] * (1 - fc) + grid[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def gen_textures(classes: int, per_class: int, height: int, width: int,
                 cell: int, seed: int, shift: int = 2, noise: float = 0.1,
                 name: str | None = None) -> Dataset:
    """Smooth random texture per class, jittered per sample.

    Each class owns one low-resolution random grid (``cell x cell``) that is
    bilinearly upsampled to the image size; samples are circular shifts of the
    template with amplitude jitter and pixel noise.  Because the templates are
    smooth and anisotropic, a classifier trained on them degrades gradually
    under image rotation, which makes these sets a deterministic desk-scale
    stand-in for handwritten-digit corpora.
    """
    _require(classes >= 2, "need at least 2 classes")
    _require(per_class >= 1, "need at least 1 sample per class")
    _require(cell >= 2, "cell grid must be at least 2 x 2")
    rng = np.random.default_rng(seed)
    templates = np.stack([
        _bilinear_upsample(rng.uniform(0.0, 1.0, size=(cell, cell)), height, width)
        for _ in range(classes)
    ])
    # Normalize each template to span [0.15, 0.85] so amplitude jitter stays in range.
    lo = templates.min(axis=(1, 2), keepdims=True)
    hi = templates.max(axis=(1, 2), keepdims=True)
    templates = 0.15 + 0.7 * (templates - lo) / np.maximum(hi - lo, 1e-9)

    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    images = np.empty((n, height, width))
    shifts_r = rng.integers(-shift, shift + 1, size=n)
    shifts_c = rng.integers(-shift, shift + 1, size=n)
    amps = rng.uniform(0.75, 1.0, size=n)
    pixel_noise = noise * rng.standard_normal((n, height, width))
    for i in range(n):
        img = np.roll(templates[labels[i]], (shifts_r[i], shifts_c[i]), axis=(0, 1))
        images[i] = amps[i] * img + pixel_noise[i]
    feats = np.clip(images, 0.0, 1.0).reshape(n, height * width).astype(np.float32)
    return Dataset(name or f"textures{classes}-c{cell}", feats, labels, classes)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def rotate(dataset: Dataset, degrees: float, height: int, width: int) -> Dataset:
    """Rotate every image counterclockwise about its center.

    Multiples of 90 degrees use an exact index permutation; other angles use
    bilinear interpolation with zero fill.  The rotation center is
    ((H-1)/2, (W-1)/2) and labels are unchanged.
    """
    _require(height * width == dataset.dim,
             f"height*width = {height * width} != feature dim {dataset.dim}")
    images = dataset.features.reshape(len(dataset), height, width)
    deg = float(degrees) % 360.0
    if deg == 0.0:
        return Dataset(f"{dataset.name}-rot{degrees:g}", dataset.features,
                       dataset.labels, dataset.num_classes)
    if deg % 90.0 == 0.0:
        k = int(deg // 90.0)
        out = np.rot90(images, k=k, axes=(1, 2))
    else:
        theta = np.deg2rad(deg)
        cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
        rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        x = cc - cx
        y = rr - cy
        # Inverse map of a visually counterclockwise rotation (rows grow down).
        src_c = cx + x * np.cos(theta) - y * np.sin(theta)
        src_r = cy + x * np.sin(theta) + y * np.cos(theta)
        r0 = np.floor(src_r).astype(int)
        c0 = np.floor(src_c).astype(int)
        fr = (src_r - r0).ravel()
        fc = (src_c - c0).ravel()
        out = np.zeros((len(dataset), height * width), dtype=np.float64)
        flat = images.reshape(len(dataset), -1)
        for dr, dc, w in (
            (0, 0, (1 - fr) * (1 - fc)),
            (0, 1, (1 - fr) * fc),
            (1, 0, fr * (1 - fc)),
            (1, 1, fr * fc),
        ):
            r = r0.ravel() + dr
            c = c0.ravel() + dc
            valid = (r >= 0) & (r < height) & (c >= 0) & (c < width)
            idx = np.where(valid, r * width + c, 0)
            out += np.where(valid, flat[:, idx], 0.0) * w
        out = out.reshape(len(dataset), height, width)
    feats = np.clip(out.reshape(len(dataset), -1), 0.0, 1.0).astype(np.float32)
    return Dataset(f"{dataset.name}-rot{degrees:g}", feats, dataset.labels,
                   dataset.num_classes)


def split_by_label(dataset: Dataset, labels_a, labels_b) -> tuple[Dataset, Dataset]:
    """Partition by label into two datasets that keep the global label indices.

    The two sets must be disjoint, nonempty, and together cover every label
    present, so merged evaluation over the shared 0..C-1 space stays
    well-defined.
    """
    set_a, set_b = set(int(v) for v in labels_a), set(int(v) for v in labels_b)
    _require(len(set_a) > 0 and len(set_b) > 0, "both label sets must be nonempty")
    _require(not (set_a & set_b), f"label sets overlap: {sorted(set_a & set_b)}")
    present = set(int(v) for v in np.unique(dataset.labels))
    _require(present <= (set_a | set_b),
             f"labels {sorted(present - set_a - set_b)} not covered by either set")
    in_a = np.isin(dataset.labels, sorted(set_a))
    in_b = np.isin(dataset.labels, sorted(set_b))
    part_a = Dataset(f"{dataset.name}-split-a", dataset.features[in_a],
                     dataset.labels[in_a], dataset.num_classes)
    part_b = Dataset(f"{dataset.name}-split-b", dataset.features[in_b],
                     dataset.labels[in_b], dataset.num_classes)
    return part_a, part_b


def mix(a: Dataset, b: Dataset, alpha: float = 0.5) -> MixedDataset:
    """Alpha-weighted union; metrics on it decompose linearly over the parts."""
    return MixedDataset(a, b, alpha)


def balanced_concat(mixed: MixedDataset, seed: int) -> Dataset:
    """Physical union with the smaller part resampled up to the larger size.

    Used to train reference models on the mixture with the same half/half
    weighting that the mixed metrics use at alpha = 1/2.
    """
    a, b = mixed.part_a, mixed.part_b
    target = max(len(a), len(b))
    rng = np.random.default_rng(seed)

    def resample(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
        if len(ds) == target:
            return ds.features, ds.labels
        idx = rng.choice(len(ds), size=target, replace=True)
        return ds.features[idx], ds.labels[idx]

    fa, la = resample(a)
    fb, lb = resample(b)
    return Dataset(f"{a.name}+{b.name}", np.vstack([fa, fb]),
                   np.concatenate([la, lb]), mixed.num_classes)


def flipped_accuracy(params_a, params_b, a: Dataset, b: Dataset) -> float:
    """Average of model A's accuracy on dataset B and model B's on dataset A."""
    return 0.5 * (nnet.predict_accuracy(params_a, b)
                  + nnet.predict_accuracy(params_b, a))


# ---------------------------------------------------------------------------
# PMDS1 persistence
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset | CondensedDataset, path) -> None:
    """Write the PMDS1 binary format; condensed features are clamped to [0, 1]."""
    if isinstance(dataset, CondensedDataset):
        dataset = dataset.to_dataset()
    path = Path(path)
    n, d = dataset.features.shape
    _require(dataset.num_classes <= 0xFFFF, "class count exceeds u16 labels")
    with open(path, "wb") as fh:
        fh.write(PMDS_MAGIC)
        fh.write(struct.pack("<IIII", PMDS_VERSION, n, d, dataset.num_classes))
        fh.write(dataset.features.astype("<f4").tobytes())
        fh.write(dataset.labels.astype("<u2").tobytes())


def load_dataset(path) -> Dataset:
    """Read a PMDS1 file; the dataset name is the file stem."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path)
        if magic != PMDS_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        version, n, d, c = struct.unpack("<IIII", _read_exact(fh, 16, path))
        if version != PMDS_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        feats = np.frombuffer(_read_exact(fh, 4 * n * d, path), dtype="<f4")
        labels = np.frombuffer(_read_exact(fh, 2 * n, path), dtype="<u2")
    return Dataset(path.stem, feats.reshape(n, d), labels.astype(np.int64), c)
