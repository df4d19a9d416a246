"""Dataset containers, IDX/CSV ingestion, and synthetic corpus generators."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTHETIC_KINDS = ("two_spirals", "gaussian_blobs")


class BadMagic(ValueError):
    """File does not start with the expected IDX magic number."""


class TruncatedFile(ValueError):
    """File ended before the advertised payload was read."""


class CountMismatch(ValueError):
    """Image count and label count disagree."""


class LabelRange(ValueError):
    """A label falls outside [0, classes)."""


class EmptyDataset(ValueError):
    """The source contained no rows."""


class RowArity(ValueError):
    """A CSV row has the wrong number of fields."""

    def __init__(self, row: int, got: int, expected: int):
        self.row = row
        super().__init__(f"row {row}: expected {expected} fields, got {got}")


class NonNumericField(ValueError):
    """A CSV field could not be parsed as a number."""

    def __init__(self, row: int, text: str):
        self.row = row
        super().__init__(f"row {row}: non-numeric field {text!r}")


@dataclass
class Dataset:
    """A supervised corpus: float inputs, integer labels, and a split tag.

    inputs is [N, ...] float64 and labels is [N] int64 with every value
    in [0, classes).
    """

    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise CountMismatch(
                f"{self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels"
            )
        if self.split not in ("train", "val"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.labels.size:
            lo, hi = int(self.labels.min()), int(self.labels.max())
            if lo < 0 or hi >= self.classes:
                raise LabelRange(
                    f"labels span [{lo}, {hi}] but classes={self.classes}"
                )

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])


# ----------------------------------------------------------------- IDX binary


def _read_exact(fh, count: int, path: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedFile(f"{path}: wanted {count} bytes, got {len(buf)}")
    return buf


def _read_header(fh, magic: int, rank: int, path: str) -> tuple:
    got = struct.unpack(">I", _read_exact(fh, 4, path))[0]
    if got != magic:
        raise BadMagic(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{rank}I", _read_exact(fh, 4 * rank, path))


def load_idx(images_path, labels_path, classes: int | None = None,
             split: str = "train") -> Dataset:
    """Read an images/labels IDX pair into a Dataset.

    Big-endian headers; image payload is unsigned bytes scaled to [0, 1]
    by division by 255 and shaped [N, 1, H, W] (single implicit channel).
    When classes is omitted it is inferred as max(label) + 1.
    """
    images_path, labels_path = str(images_path), str(labels_path)
    with open(images_path, "rb") as fh:
        n, h, w = _read_header(fh, IDX_IMAGES_MAGIC, 3, images_path)
        raw = _read_exact(fh, n * h * w, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)
    with open(labels_path, "rb") as fh:
        (m,) = _read_header(fh, IDX_LABELS_MAGIC, 1, labels_path)
        labels = np.frombuffer(_read_exact(fh, m, labels_path), dtype=np.uint8)
    if n != m:
        raise CountMismatch(f"{n} images vs {m} labels")
    if classes is None:
        classes = int(labels.max()) + 1 if m else 0
    return Dataset(images.astype(np.float64) / 255.0,
                   labels.astype(np.int64), classes, split)


def write_idx(images_path, labels_path, images: np.ndarray,
              labels: np.ndarray) -> None:
    """Serialize uint8 images [N,H,W] and labels [N] as an IDX pair."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be [N,H,W], got {images.shape}")
    if labels.shape != (images.shape[0],):
        raise CountMismatch(f"{images.shape[0]} images vs {labels.shape} labels")
    with open(str(images_path), "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(str(labels_path), "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# ------------------------------------------------------------------ CSV rows


def load_csv(path, input_dim: int, classes: int, header: bool = False,
             split: str = "train") -> Dataset:
    """Read rows of input_dim floats plus one integer label."""
    with open(str(path), "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if header and lines:
        lines = lines[1:]
    rows, labels = [], []
    row_no = 0
    for line in lines:
        if not line.strip():
            continue
        row_no += 1
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != input_dim + 1:
            raise RowArity(row_no, len(fields), input_dim + 1)
        try:
            rows.append([float(f) for f in fields[:-1]])
            labels.append(int(fields[-1]))
        except ValueError:
            bad = next(f for f in fields if not _is_number(f))
            raise NonNumericField(row_no, bad) from None
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), classes, split)


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


# ------------------------------------------------------------ synthetic data


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    """n labels cycling through the classes, as even as n allows."""
    return np.arange(n, dtype=np.int64) % classes


def gen_synthetic(kind: str, n: int, noise: float = 0.0, seed=0,
                  classes: int = 4, split: str = "train") -> Dataset:
    """Deterministic 2-D toy corpora with balanced classes.

    two_spirals ignores the classes argument (always 2); gaussian_blobs
    places class centers on a circle of radius 5.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    if kind == "two_spirals":
        labels = _balanced_labels(n, 2)
        counts = [int((labels == c).sum()) for c in (0, 1)]
        points = np.zeros((n, 2))
        for c in (0, 1):
            t = np.linspace(0.25, 1.0, counts[c]) * 3.0 * np.pi
            r = t / (3.0 * np.pi) * 4.0
            sign = 1.0 if c == 0 else -1.0
            points[labels == c, 0] = sign * r * np.cos(t)
            points[labels == c, 1] = sign * r * np.sin(t)
        points += rng.normal(scale=noise, size=points.shape) if noise else 0.0
        return Dataset(points, labels, 2, split)
    if kind == "gaussian_blobs":
        labels = _balanced_labels(n, classes)
        angles = 2.0 * np.pi * np.arange(classes) / classes
        centers = 5.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        points = centers[labels]
        if noise:
            points = points + rng.normal(scale=noise, size=points.shape)
        return Dataset(points, labels, classes, split)
    raise ValueError(f"unknown synthetic kind {kind!r}")


def _class_templates(classes: int, hw: int) -> np.ndarray:
    """Fixed per-class prototype images in [0, 1], independent of run seed.

    Each class is a mid-gray canvas with several signed Gaussian bumps,
    so classes differ in fine light/dark structure rather than overall
    brightness.
    """
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    templates = np.zeros((classes, hw, hw))
    for c in range(classes):
        rng = np.random.default_rng([7, c])
        canvas = np.zeros((hw, hw))
        for _ in range(7):
            cy, cx = rng.uniform(1.5, hw - 2.5, size=2)
            sigma = rng.uniform(0.5, 1.1)
            amp = rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
            canvas += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                                   / (2.0 * sigma * sigma))
        canvas = 0.5 + 0.5 * canvas / np.abs(canvas).max()
        templates[c] = np.clip(canvas, 0.0, 1.0)
    return templates


def synthetic_image_corpus(n: int, classes: int = 10, hw: int = 12, seed=0,
                           noise: float = 0.2, max_shift: int = 2,
                           distractors: int = 3):
    """Build uint8 class-template images with jitter, ready for write_idx.

    Each sample is a fixed class prototype plus a few sample-specific
    distractor bumps (structured clutter that resembles template parts),
    randomly contrast-scaled, circularly shifted by up to max_shift
    pixels, and perturbed with Gaussian pixel noise.
    Returns (images [n,hw,hw] uint8, labels [n]).
    """
    rng = np.random.default_rng(seed)
    templates = _class_templates(classes, hw)
    labels = _balanced_labels(n, classes)
    order = rng.permutation(n)
    labels = labels[order]
    images = templates[labels].copy()
    contrast = rng.uniform(0.6, 1.0, size=n)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    for i in range(n):
        img = images[i] - 0.5
        for _ in range(distractors):
            cy, cx = rng.uniform(1.0, hw - 2.0, size=2)
            sigma = rng.uniform(0.5, 1.0)
            amp = rng.uniform(0.4, 0.8) * rng.choice([-1.0, 1.0])
            img = img + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                                     / (2.0 * sigma * sigma))
        img = contrast[i] * img
        img = np.roll(img, (int(shifts[i, 0]), int(shifts[i, 1])), axis=(0, 1))
        images[i] = 0.5 + img
    images += rng.normal(scale=noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    return np.round(images * 255.0).astype(np.uint8), labels
