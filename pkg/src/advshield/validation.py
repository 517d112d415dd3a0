"""Input validation helpers.

Every public entry point funnels array arguments through these so that
shape problems surface as :class:`~advshield.errors.ValidationError`
with a readable message instead of a numpy traceback deep inside a layer.
"""

import numpy as np

from .errors import ShapeError, ValidationError


def as_float_array(x, name="array", ndim=None, allow_empty=False):
    """Coerce to a C-contiguous float64 ndarray and check it is finite."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim} dimensions, got {arr.ndim} "
                         f"(shape {arr.shape})")
    if arr.size == 0 and not allow_empty:
        raise ValidationError(f"{name}: empty array")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name}: contains NaN or Inf")
    return arr


def as_label_array(y, num_classes=None, name="labels"):
    """Coerce to a 1-D int64 label vector, optionally range-checked."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ShapeError(f"{name}: expected 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValidationError(f"{name}: empty")
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(arr)
        if not np.allclose(arr, rounded):
            raise ValidationError(f"{name}: not integral")
        arr = rounded
    arr = arr.astype(np.int64)
    if num_classes is not None:
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValidationError(
                f"{name}: out of range [0, {num_classes}): "
                f"min={arr.min()}, max={arr.max()}")
    return arr


def as_image_batch(x, name="images"):
    """Validate an (N, C, H, W) batch of images scaled to [0, 1].

    A single (C, H, W) image is promoted to a batch of one.
    """
    arr = as_float_array(x, name=name)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected (N, C, H, W), got shape {arr.shape}")
    if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
        raise ValidationError(
            f"{name}: pixel values outside [0, 1] "
            f"(min={arr.min():.4g}, max={arr.max():.4g})")
    return np.clip(arr, 0.0, 1.0)


def check_fraction(value, name="value", low=0.0, high=1.0):
    v = float(value)
    if not (low <= v <= high):
        raise ValidationError(f"{name}: {v} outside [{low}, {high}]")
    return v
