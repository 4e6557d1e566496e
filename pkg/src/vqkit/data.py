"""Dataset ingestion, procedural generators, and patch/pixel transforms.

Images are float32 arrays in [0, 1], shape (H, W, 3). The only image codec is
binary PPM (P6, maxval 255); labels live in a sidecar `labels.csv` with header
`filename,class_id`. Everything is deterministic given a seed.
"""

from __future__ import annotations

import colorsys
import csv
import os
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError
from .seeding import substream

LABELS_FILENAME = "labels.csv"
CLASSES_FILENAME = "classes.txt"

_SHAPES = ("circle", "square", "triangle", "cross")
_COLOR_FAMILIES = (("red", 0.00), ("green", 0.30), ("blue", 0.58), ("purple", 0.83))


@dataclass
class LabeledDataset:
    """Images with dense class ids and stable iteration order."""

    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    names: list
    class_names: list

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ShapeError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.names) != len(self.images):
            raise ShapeError("images, labels, and names lengths differ")
        n_cls = len(self.class_names)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= n_cls):
            raise ShapeError("class ids must be dense in [0, num_classes)")

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, mask) -> "LabeledDataset":
        idx = np.flatnonzero(mask)
        return LabeledDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            names=[self.names[i] for i in idx],
            class_names=list(self.class_names),
        )


def heldout_mask(count: int, fold: int = 10) -> np.ndarray:
    """Deterministic ~1/fold held-out split by index hash."""
    return np.array(
        [zlib.crc32(str(i).encode()) % fold == 0 for i in range(count)], dtype=bool
    )


# ---------------------------------------------------------------------------
# PPM (P6) codec


def _next_token(data: bytes, off: int, path) -> tuple:
    n = len(data)
    while off < n:
        ch = data[off : off + 1]
        if ch == b"#":
            while off < n and data[off : off + 1] != b"\n":
                off += 1
        elif ch.isspace():
            off += 1
        else:
            break
    if off >= n:
        raise FormatError(f"{path}: truncated header at byte {off}")
    start = off
    while off < n and not data[off : off + 1].isspace():
        off += 1
    return data[start:off], off


def load_ppm(path) -> np.ndarray:
    """Load a binary PPM (P6, maxval 255) as float32 in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P6":
        raise FormatError(f"{path}: bad magic {data[:2]!r} at byte 0, expected b'P6'")
    off = 2
    fields = []
    for what in ("width", "height", "maxval"):
        tok, off = _next_token(data, off, path)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"{path}: non-numeric {what} {tok!r} at byte {off}") from None
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (must be 255)")
    off += 1  # single whitespace byte after maxval
    need = width * height * 3
    payload = data[off : off + need]
    if len(payload) < need:
        raise FormatError(
            f"{path}: truncated payload at byte {off + len(payload)} "
            f"(need {need} bytes, have {len(payload)})"
        )
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return (img.astype(np.float32) / 255.0).astype(np.float32)


def encode_ppm(image) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ShapeError("image values must lie in [0, 1]")
    h, w = img.shape[:2]
    quantized = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + quantized.tobytes()


def save_ppm(image, path):
    from .formats import atomic_write

    atomic_write(path, encode_ppm(image))


# ---------------------------------------------------------------------------
# patch transforms


def patchify(image, patch: int) -> np.ndarray:
    """Split into non-overlapping patches, row-major, each flattened channel-last.

    Accepts (H, W, 3) or a batch (N, H, W, 3); returns (T, 3p^2) or (N, T, 3p^2).
    """
    x = np.asarray(image)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    n, h, w, ch = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch {patch} does not divide image extents {h}x{w}")
    gh, gw = h // patch, w // patch
    tokens = (
        x.reshape(n, gh, patch, gw, patch, ch)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, gh * gw, patch * patch * ch)
    )
    return tokens if batched else tokens[0]


def unpatchify(tokens, height: int, width: int, patch: int) -> np.ndarray:
    """Inverse of `patchify` for (T, 3p^2) or (N, T, 3p^2)."""
    x = np.asarray(tokens)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    gh, gw = height // patch, width // patch
    if x.shape[1] != gh * gw or x.shape[2] != patch * patch * 3:
        raise ShapeError(f"tokens shape {x.shape[1:]} does not match {height}x{width}/{patch}")
    img = (
        x.reshape(x.shape[0], gh, gw, patch, patch, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(x.shape[0], height, width, 3)
    )
    return img if batched else img[0]


# ---------------------------------------------------------------------------
# procedural generators


def _shape_mask(kind, cx, cy, r, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == "square":
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= 0.85 * r
    if kind == "triangle":
        return (yy <= cy + 0.8 * r) & ((yy - (cy - r)) >= 1.8 * np.abs(xx - cx))
    if kind == "cross":
        arm = 0.35 * r
        return ((np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= r)) | (
            (np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= r)
        )
    raise ShapeError(f"unknown shape kind {kind!r}")


def gen_shapes(seed: int, count: int, num_classes: int = 8, image_size: int = 32) -> LabeledDataset:
    """Render a deterministic dataset of colored primitives.

    A class is a (shape, color-family) pair; position, size, hue, and
    brightness are jittered per image. Images are snapped to the 8-bit grid so
    an in-memory dataset equals its PPM round trip exactly.
    """
    if not 2 <= num_classes <= 16:
        raise ShapeError(f"num_classes must be in [2, 16], got {num_classes}")
    rng = substream(seed, "shapes")
    combos = [(s, fam) for fam in _COLOR_FAMILIES for s in _SHAPES][:num_classes]
    class_names = [f"{fam[0]}_{shape}" for shape, fam in combos]

    images = np.empty((count, image_size, image_size, 3), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    names = []
    for i in range(count):
        cls = i % num_classes
        shape, (_, hue0) = combos[cls]
        cx = image_size / 2 + rng.uniform(-4, 4)
        cy = image_size / 2 + rng.uniform(-4, 4)
        r = rng.uniform(5.0, 9.0)
        hue = (hue0 + rng.uniform(-0.04, 0.04)) % 1.0
        sat = rng.uniform(0.7, 1.0)
        val = rng.uniform(0.75, 1.0)
        bg = rng.uniform(0.05, 0.20)
        noise = rng.normal(0.0, 0.015, size=(image_size, image_size, 3))

        color = np.array(colorsys.hsv_to_rgb(hue, sat, val))
        mask = _shape_mask(shape, cx, cy, r, image_size)[:, :, None]
        img = np.where(mask, color[None, None, :], bg) + noise
        img = np.clip(img, 0.0, 1.0)
        images[i] = np.round(img * 255.0) / 255.0
        labels[i] = cls
        names.append(f"shape_{i:05d}.ppm")
    return LabeledDataset(images=images, labels=labels, names=names, class_names=class_names)


def gen_vectors(
    seed: int, count: int, dim: int, components: int = 1, spread: float = 8.0
) -> np.ndarray:
    """Sample (count, dim) float32 vectors: isotropic Gaussian, or a mixture of
    `components` unit-covariance Gaussians with separated means."""
    if dim < 1:
        raise ShapeError(f"dim must be >= 1, got {dim}")
    rng = substream(seed, "vectors")
    if components <= 1:
        return rng.standard_normal((count, dim)).astype(np.float32)
    means = rng.standard_normal((components, dim))
    means *= spread / np.linalg.norm(means, axis=1, keepdims=True)
    which = rng.integers(0, components, size=count)
    x = means[which] + rng.standard_normal((count, dim))
    return x.astype(np.float32)


# ---------------------------------------------------------------------------
# on-disk datasets


def save_dataset(dataset: LabeledDataset, directory):
    os.makedirs(directory, exist_ok=True)
    for img, name in zip(dataset.images, dataset.names):
        save_ppm(img, os.path.join(directory, name))
    rows = "filename,class_id\n" + "".join(
        f"{name},{label}\n" for name, label in zip(dataset.names, dataset.labels)
    )
    from .formats import atomic_write

    atomic_write(os.path.join(directory, LABELS_FILENAME), rows.encode("utf-8"))
    classes = "".join(f"{c}\n" for c in dataset.class_names)
    atomic_write(os.path.join(directory, CLASSES_FILENAME), classes.encode("utf-8"))


def load_dataset(directory) -> LabeledDataset:
    """Load a PPM directory with its labels.csv sidecar."""
    labels_path = os.path.join(directory, LABELS_FILENAME)
    if not os.path.exists(labels_path):
        raise FormatError(f"{labels_path}: labels file not found")
    with open(labels_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["filename", "class_id"]:
            raise FormatError(f"{labels_path}: bad header {header!r}")
        entries = [(row[0], int(row[1])) for row in reader if row]
    images, labels, names = [], [], []
    for name, cls in entries:
        img_path = os.path.join(directory, name)
        if not os.path.exists(img_path):
            raise FormatError(f"{labels_path}: referenced file {name} does not exist")
        images.append(load_ppm(img_path))
        labels.append(cls)
        names.append(name)
    classes_path = os.path.join(directory, CLASSES_FILENAME)
    if os.path.exists(classes_path):
        with open(classes_path) as f:
            class_names = [line.strip() for line in f if line.strip()]
    else:
        class_names = [str(i) for i in range(max(labels) + 1 if labels else 0)]
    return LabeledDataset(
        images=np.stack(images) if images else np.zeros((0, 1, 1, 3), dtype=np.float32),
        labels=np.asarray(labels, dtype=np.int64),
        names=names,
        class_names=class_names,
    )
