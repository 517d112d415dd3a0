"""Datasets: IDX binary ingestion, stratified splits, synthetic digits.

The IDX reader/writer follows the classic big-endian layout: magic
``0x00000803`` + (N, H, W) dimension sizes for image files, magic
``0x00000801`` + (N,) for label files, then raw unsigned bytes. Pixels
map to floats by ``b / 255`` and images come back as (N, 1, H, W); no
mean subtraction, so the [0, 1] clip range used throughout the defense
chain stays valid.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .errors import (IdxCountMismatchError, IdxMagicError, IdxTruncatedError,
                     ValidationError)
from .validation import as_image_batch, as_label_array

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    tag: str = ""

    def __post_init__(self):
        self.images = as_image_batch(self.images)
        self.labels = as_label_array(self.labels)
        if self.images.shape[0] != self.labels.shape[0]:
            raise IdxCountMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1

    def subset(self, indices, tag=None):
        return Dataset(self.images[indices], self.labels[indices],
                       tag if tag is not None else self.tag)


def _read_header(fh, path, expected_magic, n_dims):
    head = fh.read(4 * (1 + n_dims))
    if len(head) < 4 * (1 + n_dims):
        raise IdxTruncatedError(f"{path}: header truncated")
    values = struct.unpack(f">{1 + n_dims}I", head)
    if values[0] != expected_magic:
        raise IdxMagicError(
            f"{path}: magic 0x{values[0]:08x}, expected 0x{expected_magic:08x}")
    return values[1:]


def load_idx_images(images_path):
    """Load an IDX image file into a float array in [0, 1], shape
    (n, 1, h, w)."""
    with open(images_path, "rb") as fh:
        n, h, w = _read_header(fh, images_path, IMAGES_MAGIC, 3)
        payload = fh.read(n * h * w)
        if len(payload) < n * h * w:
            raise IdxTruncatedError(
                f"{images_path}: expected {n * h * w} pixel bytes, "
                f"got {len(payload)}")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, h, w)
    return images.astype(np.float64) / 255.0


def load_idx_labels(labels_path):
    """Load an IDX label file into an int64 vector."""
    with open(labels_path, "rb") as fh:
        (n_labels,) = _read_header(fh, labels_path, LABELS_MAGIC, 1)
        payload = fh.read(n_labels)
        if len(payload) < n_labels:
            raise IdxTruncatedError(
                f"{labels_path}: expected {n_labels} label bytes, "
                f"got {len(payload)}")
        labels = np.frombuffer(payload, dtype=np.uint8)
    return labels.astype(np.int64)


def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair into a :class:`Dataset`."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images_path} holds {images.shape[0]} images but "
            f"{labels_path} holds {labels.shape[0]} labels")
    return Dataset(images, labels)


def write_idx(ds, images_path, labels_path):
    """Write a grayscale dataset as an IDX file pair (pixels quantized
    to bytes via round(x * 255))."""
    if ds.images.shape[1] != 1:
        raise ValidationError(
            f"IDX writer handles single-channel images, got "
            f"{ds.images.shape[1]} channels")
    n, _, h, w = ds.images.shape
    pixels = np.clip(np.rint(ds.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    labels = ds.labels.astype(np.uint8)
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", LABELS_MAGIC, n))
        fh.write(labels.tobytes())


def split(ds, fractions, seed=0):
    """Partition a dataset into tagged, disjoint, label-stratified splits.

    ``fractions`` maps tag -> fraction; fractions must sum to 1. The cut
    is stratified per label so every class shows up in every split
    (per-class counts land within one sample of proportional), which the
    per-class percentile profiling downstream depends on.
    """
    tags = list(fractions.keys())
    fracs = np.array([float(fractions[t]) for t in tags])
    if (fracs < 0).any():
        raise ValidationError("split fractions must be non-negative")
    if abs(fracs.sum() - 1.0) > 1e-9:
        raise ValidationError(f"split fractions sum to {fracs.sum()}, not 1")
    rng = np.random.default_rng(seed)
    buckets = {t: [] for t in tags}
    boundaries = np.cumsum(fracs)
    for cls in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == cls)
        idx = idx[rng.permutation(idx.size)]
        cuts = np.rint(boundaries * idx.size).astype(int)
        start = 0
        for tag, stop in zip(tags, cuts):
            buckets[tag].append(idx[start:stop])
            start = stop
    out = {}
    for tag in tags:
        indices = np.sort(np.concatenate(buckets[tag])) if buckets[tag] else \
            np.empty(0, dtype=int)
        out[tag] = ds.subset(indices, tag=tag)
    return out


# --- synthetic digits ------------------------------------------------------
#
# Stroke-based 28x28 digit renderer used for desk-scale runs when the
# real MNIST IDX files are not on disk. Each digit is a list of
# polyline/arc strokes in a unit box; per-sample variation comes from a
# random affine map, an elastic displacement field, stroke width and
# intensity jitter, and additive noise. Fully deterministic per seed.

def _line(p0, p1, per_unit=220):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(np.hypot(*(p1 - p0)) * per_unit))
    t = np.linspace(0.0, 1.0, n)[:, None]
    return p0 + t * (p1 - p0)


def _arc(cx, cy, rx, ry, deg0, deg1, per_unit=220):
    # y grows downward; angles in screen convention
    span = np.radians(abs(deg1 - deg0))
    n = max(4, int(span * max(rx, ry) * per_unit))
    t = np.radians(np.linspace(deg0, deg1, n))
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _digit_strokes(digit):
    if digit == 0:
        return [_arc(0.5, 0.5, 0.26, 0.38, 0, 360)]
    if digit == 1:
        return [_line((0.52, 0.1), (0.52, 0.9)),
                _line((0.36, 0.26), (0.52, 0.1))]
    if digit == 2:
        return [_arc(0.5, 0.32, 0.24, 0.2, 170, 15),
                _line((0.73, 0.38), (0.26, 0.88)),
                _line((0.26, 0.88), (0.78, 0.88))]
    if digit == 3:
        return [_arc(0.47, 0.3, 0.23, 0.19, 160, -80),
                _arc(0.47, 0.69, 0.26, 0.21, -70, 165)]
    if digit == 4:
        return [_line((0.62, 0.1), (0.22, 0.6)),
                _line((0.22, 0.6), (0.82, 0.6)),
                _line((0.66, 0.34), (0.66, 0.9))]
    if digit == 5:
        return [_line((0.74, 0.12), (0.32, 0.12)),
                _line((0.32, 0.12), (0.29, 0.46)),
                _arc(0.47, 0.66, 0.26, 0.23, -132, 150)]
    if digit == 6:
        return [_arc(0.74, 0.6, 0.42, 0.52, 250, 182),
                _arc(0.5, 0.68, 0.22, 0.2, 0, 360)]
    if digit == 7:
        return [_line((0.24, 0.13), (0.78, 0.13)),
                _line((0.78, 0.13), (0.42, 0.9))]
    if digit == 8:
        return [_arc(0.5, 0.3, 0.2, 0.18, 0, 360),
                _arc(0.5, 0.69, 0.24, 0.21, 0, 360)]
    if digit == 9:
        return [_arc(0.5, 0.32, 0.21, 0.19, 0, 360),
                _arc(0.26, 0.42, 0.44, 0.5, -8, 72)]
    raise ValidationError(f"no glyph for digit {digit}")


_GLYPH_CACHE = {d: _digit_strokes(d) for d in range(10)}


def _render_digit(digit, rng, size=28):
    angle = rng.uniform(-0.2, 0.2)
    scale = rng.uniform(0.82, 1.08, size=2)
    shear = rng.uniform(-0.15, 0.15)
    shift = rng.uniform(-1.6, 1.6, size=2)
    width = rng.uniform(0.55, 0.95)
    amp = rng.uniform(0.78, 1.0)
    elastic_alpha = rng.uniform(0.5, 2.8)
    noise_sigma = rng.uniform(0.01, 0.04)

    c, s = np.cos(angle), np.sin(angle)
    mat = np.array([[c, -s], [s, c]]) @ np.array([[scale[0], shear],
                                                  [0.0, scale[1]]])
    img = np.zeros((size, size))
    for pts in _GLYPH_CACHE[digit]:
        p = (pts - 0.5) @ mat.T + 0.5
        px = p * (size - 6) + 3.0 + shift
        hist, _, _ = np.histogram2d(px[:, 1], px[:, 0], bins=size,
                                    range=[[0, size], [0, size]])
        img += hist
    # strokes are sampled at ~220 points per unit length, i.e. roughly
    # 220/(size-6) points per pixel bin; scale to ~1 along a stroke and
    # clip so crossings do not dominate the peak normalization
    img = np.minimum(img * (size - 6) / 220.0, 1.0)
    img = ndi.gaussian_filter(img, width)
    peak = img.max()
    if peak > 0:
        img = img * (amp / peak)

    field = np.stack([
        ndi.gaussian_filter(rng.uniform(-1, 1, (size, size)), 4.0),
        ndi.gaussian_filter(rng.uniform(-1, 1, (size, size)), 4.0)])
    norm = np.abs(field).max()
    if norm > 0:
        field = field / norm * elastic_alpha
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = ndi.map_coordinates(img, [yy + field[0], xx + field[1]],
                              order=1, mode="constant")

    img += rng.normal(0.0, noise_sigma, (size, size))
    return np.clip(img, 0.0, 1.0)


def make_digits(n, seed=0, size=28):
    """Generate a balanced synthetic handwritten-digit-style dataset."""
    if n < 1:
        raise ValidationError(f"need at least 1 sample, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 1, size, size))
    for i in range(n):
        images[i, 0] = _render_digit(int(labels[i]), rng, size)
    return Dataset(images, labels, tag="synthetic")
