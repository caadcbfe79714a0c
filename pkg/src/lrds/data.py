"""Datasets, synthetic Gaussian blobs and file loaders (CSV, IDX)."""

from __future__ import annotations

import csv
import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, ParseError, ValidationError
from .numcore import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def round_half_up(x: float) -> int:
    """Round to the nearest integer, halves upward, using the decimal text of ``x``."""
    return int(Decimal(repr(float(x))).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValidationError(f"{self.name}: features must be a non-empty N x d matrix")
        if y.shape[0] != x.shape[0]:
            raise ValidationError(f"{self.name}: {x.shape[0]} feature rows but {y.shape[0]} labels")
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"{self.name}: features contain NaN or infinity")
        c = int(self.class_count)
        if c < 1 or y.min() < 0 or y.max() >= c:
            raise ValidationError(f"{self.name}: labels must lie in [0, {c})")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_count", c)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def checksum(self) -> str:
        """sha256 of (N, d, C) as little-endian int64, then features (<f8) and labels (<i8)."""
        h = hashlib.sha256()
        h.update(np.array([len(self), self.n_features, self.class_count], dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count, name or self.name)


@dataclass(frozen=True)
class BlobSpec:
    class_count: int
    samples_per_class: int
    centers: tuple = field(default=())
    spread: float | tuple = 1.0
    label_noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        if self.class_count < 2:
            raise InvalidArgument("blobs need at least two classes")
        if self.samples_per_class < 1:
            raise InvalidArgument("samples_per_class must be positive")
        if centers.ndim != 2 or centers.shape[0] != self.class_count:
            raise InvalidArgument("centers must hold one mean vector per class")
        spread = np.broadcast_to(np.asarray(self.spread, dtype=np.float64), (self.class_count,))
        if np.any(spread <= 0):
            raise InvalidArgument("spread must be positive")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise InvalidArgument("label_noise_rate must lie in [0, 1)")


def gen_blobs(spec: BlobSpec, name: str = "blobs") -> Dataset:
    """Gaussian clusters, shuffled, with an exact count of flipped labels.

    ``round_half_up(rate * N)`` distinct samples get a label drawn uniformly
    from the other classes. Noise is drawn after the features, so a noisy
    and a clean dataset with the same seed share every feature row.
    """
    rng = make_rng(spec.seed)
    centers = np.asarray(spec.centers, dtype=np.float64)
    c, d = centers.shape
    spread = np.broadcast_to(np.asarray(spec.spread, dtype=np.float64), (c,))
    n_per = spec.samples_per_class
    x = np.concatenate([centers[k] + spread[k] * rng.standard_normal((n_per, d)) for k in range(c)])
    y = np.repeat(np.arange(c), n_per)
    order = rng.permutation(x.shape[0])
    x, y = x[order], y[order]
    n_noisy = round_half_up(spec.label_noise_rate * y.size)
    if n_noisy:
        flip = rng.choice(y.size, size=n_noisy, replace=False)
        y[flip] = (y[flip] + rng.integers(1, c, size=n_noisy)) % c
    return Dataset(x, y, c, name)


def circle_centers(class_count: int, radius: float, dim: int = 2) -> np.ndarray:
    """Class means evenly spaced on a circle in the first two coordinates."""
    ang = 2 * np.pi * np.arange(class_count) / class_count
    out = np.zeros((class_count, dim))
    out[:, 0] = radius * np.cos(ang)
    out[:, 1] = radius * np.sin(ang)
    return out


# ---------------------------------------------------------------------------
# CSV


def save_csv(dataset: Dataset, path) -> None:
    d = dataset.n_features
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(d)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, class_count: int | None = None, name: str | None = None) -> Dataset:
    """Read ``f0,...,f{d-1},label`` rows; C defaults to 1 + max label."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", line=1) from None
        d = len(header) - 1
        if d < 1 or header != [f"f{j}" for j in range(d)] + ["label"]:
            raise ParseError(f"{path}: header must be f0,...,f{{d-1}},label", line=1)
        feats, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != d + 1:
                raise ParseError(f"{path}: expected {d + 1} columns, got {len(row)}", line=line)
            try:
                feats.append([float(v) for v in row[:d]])
            except ValueError:
                raise ParseError(f"{path}: non-numeric feature value", line=line) from None
            try:
                labels.append(int(row[d]))
            except ValueError:
                raise ParseError(f"{path}: label {row[d]!r} is not an integer", line=line) from None
            if labels[-1] < 0:
                raise ParseError(f"{path}: negative label", line=line)
    if not labels:
        raise ValidationError(f"{path}: no data rows")
    inferred = max(labels) + 1
    if class_count is not None and inferred > class_count:
        raise ValidationError(f"{path}: label {inferred - 1} >= declared class count {class_count}")
    return Dataset(np.array(feats), np.array(labels), class_count or inferred, name or path.stem)


# ---------------------------------------------------------------------------
# IDX (big-endian; MNIST layout)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def load_idx(images_path, labels_path, class_count: int | None = None, name: str = "idx") -> Dataset:
    """Images flattened row-major and divided by 255; labels as class indices."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 16:
        raise FormatError(f"{images_path}: truncated header")
    if len(lab) < 8:
        raise FormatError(f"{labels_path}: truncated header")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad image magic 0x{magic:08x} (expected 0x{IDX_IMAGES_MAGIC:08x})")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad label magic 0x{lmagic:08x} (expected 0x{IDX_LABELS_MAGIC:08x})")
    if n != ln:
        raise FormatError(f"count mismatch: {n} images but {ln} labels")
    size = n * rows * cols
    if len(img) - 16 < size:
        raise FormatError(f"{images_path}: truncated, expected {size} pixel bytes, got {len(img) - 16}")
    if len(lab) - 8 < n:
        raise FormatError(f"{labels_path}: truncated, expected {n} label bytes, got {len(lab) - 8}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=size, offset=16).reshape(n, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    c = class_count if class_count is not None else int(labels.max()) + 1
    if labels.max() >= c:
        raise ValidationError(f"label {labels.max()} >= declared class count {c}")
    return Dataset(pixels.astype(np.float64) / 255.0, labels, c, name)


def write_idx(images: np.ndarray, labels, images_path, labels_path) -> None:
    """Write uint8 images of shape (N, rows, cols) and their labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())
