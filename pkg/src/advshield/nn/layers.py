"""Layer zoo for the minimal float64 network engine.

Each layer exposes ``forward(x) -> (y, cache)`` and
``backward(dout, cache) -> (dx, grads)`` where ``grads`` aligns with
``params()``. Caches are returned rather than stored on the layer, so a
trained (frozen) network can run forward/backward from many threads at
once; only the SGD step mutates parameters.

All arrays are float64. Convolutions use valid padding with stride 1 and
pooling windows do not overlap (stride equals the window), which matches
the 28 -> 24 -> 12 -> 8 -> 4 arithmetic of the benchmark architectures.
"""

import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError


def l2_normalize(v, epsilon=1e-12):
    """Scale each row of a batch of feature vectors to unit L2 norm.

    ``v`` may be a single vector or a batch (leading axis = samples);
    trailing axes are treated as one flattened feature vector per sample.
    Rows with norm below ``epsilon`` are divided by ``epsilon`` instead
    (a hard failure here would poison whole training batches) and a
    degenerate-input warning is emitted.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    batch = v[None] if single else v
    flat = batch.reshape(batch.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    degenerate = norms < epsilon
    if degenerate.any():
        warnings.warn(
            f"l2_normalize: {int(degenerate.sum())} input row(s) with norm "
            f"< {epsilon:g}; dividing by epsilon instead",
            RuntimeWarning, stacklevel=2)
    denom = np.where(degenerate, epsilon, norms)
    out = (flat / denom[:, None]).reshape(batch.shape)
    return out[0] if single else out


class Layer:
    """Base class; subclasses set ``kind`` and implement the passes."""

    kind = None

    def params(self):
        return []

    def hyper(self):
        return {}

    def out_shape(self, in_shape):
        """Per-sample output shape for a per-sample ``in_shape``."""
        raise NotImplementedError

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError


class Dense(Layer):
    """Fully connected layer ``y = flatten(x) @ W + b``.

    Accepts any input shape and flattens the per-sample trailing axes,
    so no explicit flatten layer is needed in front of it.
    """

    kind = "Dense"

    def __init__(self, weight, bias):
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"Dense: weight {self.weight.shape} / bias {self.bias.shape} "
                "inconsistent")

    def params(self):
        return [self.weight, self.bias]

    def hyper(self):
        return {"in_dim": int(self.weight.shape[0]),
                "out_dim": int(self.weight.shape[1])}

    def out_shape(self, in_shape):
        in_dim = int(np.prod(in_shape))
        if in_dim != self.weight.shape[0]:
            raise ShapeError(
                f"Dense: input has {in_dim} features, weight expects "
                f"{self.weight.shape[0]}")
        return (self.weight.shape[1],)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.weight.shape[0]:
            raise ShapeError(
                f"Dense: input has {flat.shape[1]} features, weight expects "
                f"{self.weight.shape[0]}")
        return flat @ self.weight + self.bias, (x.shape, flat)

    def backward(self, dout, cache):
        x_shape, flat = cache
        dw = flat.T @ dout
        db = dout.sum(axis=0)
        dx = (dout @ self.weight.T).reshape(x_shape)
        return dx, [dw, db]


class Conv2D(Layer):
    """Valid-padding stride-1 2-D convolution via im2col."""

    kind = "Conv2D"

    def __init__(self, weight, bias):
        # weight: (C_out, C_in, KH, KW), bias: (C_out,)
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"Conv2D: weight {self.weight.shape} / bias {self.bias.shape} "
                "inconsistent")

    def params(self):
        return [self.weight, self.bias]

    def hyper(self):
        c_out, c_in, kh, kw = self.weight.shape
        return {"out_channels": int(c_out), "in_channels": int(c_in),
                "kernel": [int(kh), int(kw)]}

    def out_shape(self, in_shape):
        c_out, c_in, kh, kw = self.weight.shape
        if len(in_shape) != 3 or in_shape[0] != c_in:
            raise ShapeError(
                f"Conv2D: input shape {in_shape} incompatible with kernel "
                f"for {c_in} input channels")
        h, w = in_shape[1], in_shape[2]
        if h < kh or w < kw:
            raise ShapeError(
                f"Conv2D: {kh}x{kw} kernel larger than {h}x{w} input")
        return (c_out, h - kh + 1, w - kw + 1)

    def forward(self, x):
        c_out, c_in, kh, kw = self.weight.shape
        self.out_shape(x.shape[1:])
        n = x.shape[0]
        h_out = x.shape[2] - kh + 1
        w_out = x.shape[3] - kw + 1
        # (N, C, H_out, W_out, KH, KW) view, no copy
        windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
        col = windows.transpose(0, 2, 3, 1, 4, 5).reshape(
            n * h_out * w_out, c_in * kh * kw)
        w_mat = self.weight.reshape(c_out, -1)
        out = col @ w_mat.T + self.bias
        out = out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (x.shape, col)

    def backward(self, dout, cache):
        x_shape, col = cache
        c_out, c_in, kh, kw = self.weight.shape
        n, _, h_out, w_out = dout.shape
        dout_mat = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (dout_mat.T @ col).reshape(self.weight.shape)
        db = dout_mat.sum(axis=0)
        dcol = dout_mat @ self.weight.reshape(c_out, -1)
        dcol = dcol.reshape(n, h_out, w_out, c_in, kh, kw)
        dx = np.zeros(x_shape)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + h_out, j:j + w_out] += \
                    dcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, [dw, db]


class MaxPool2D(Layer):
    """Non-overlapping max pooling; stride equals the window size.

    Trailing rows/columns that do not fill a full window are dropped.
    """

    kind = "MaxPool2D"

    def __init__(self, window):
        self.window = int(window)
        if self.window < 1:
            raise ShapeError(f"MaxPool2D: window {window} < 1")

    def hyper(self):
        return {"window": self.window}

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"MaxPool2D: expected (C, H, W), got {in_shape}")
        c, h, w = in_shape
        if h < self.window or w < self.window:
            raise ShapeError(
                f"MaxPool2D: window {self.window} larger than {h}x{w} input")
        return (c, h // self.window, w // self.window)

    def forward(self, x):
        self.out_shape(x.shape[1:])
        k = self.window
        n, c = x.shape[:2]
        h_out, w_out = x.shape[2] // k, x.shape[3] // k
        cropped = x[:, :, :h_out * k, :w_out * k]
        tiles = cropped.reshape(n, c, h_out, k, w_out, k)
        tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h_out, w_out, k * k)
        arg = tiles.argmax(axis=-1)
        out = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, dout, cache):
        x_shape, arg = cache
        k = self.window
        n, c, h_out, w_out = dout.shape
        dtiles = np.zeros((n, c, h_out, w_out, k * k))
        np.put_along_axis(dtiles, arg[..., None], dout[..., None], axis=-1)
        dtiles = dtiles.reshape(n, c, h_out, w_out, k, k).transpose(
            0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape)
        dx[:, :, :h_out * k, :w_out * k] = dtiles.reshape(
            n, c, h_out * k, w_out * k)
        return dx, []


class ReLU(Layer):
    kind = "ReLU"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, cache):
        return dout * cache, []


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C) spatial mean."""

    kind = "GlobalAvgPool"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"GlobalAvgPool: expected (C, H, W), got {in_shape}")
        return (in_shape[0],)

    def forward(self, x):
        self.out_shape(x.shape[1:])
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dout, cache):
        x_shape = cache
        n, c, h, w = x_shape
        dx = np.broadcast_to(dout[:, :, None, None], x_shape) / (h * w)
        return np.ascontiguousarray(dx), []


class L2Normalize(Layer):
    """Bound each sample's activation vector to the unit hyper-sphere."""

    kind = "L2Normalize"

    def __init__(self, epsilon=1e-12):
        self.epsilon = float(epsilon)

    def hyper(self):
        return {"epsilon": self.epsilon}

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        y = l2_normalize(x, self.epsilon)
        flat = x.reshape(x.shape[0], -1)
        norms = np.linalg.norm(flat, axis=1)
        return y, (x.shape, y, norms)

    def backward(self, dout, cache):
        x_shape, y, norms = cache
        n = x_shape[0]
        g = dout.reshape(n, -1)
        yf = y.reshape(n, -1)
        degenerate = norms < self.epsilon
        denom = np.where(degenerate, self.epsilon, norms)
        # y = x / ||x||: dx = (g - y (y.g)) / ||x||; degenerate rows are
        # the linear map x / eps, so dx = g / eps there.
        proj = (yf * g).sum(axis=1, keepdims=True)
        dx = (g - yf * proj) / denom[:, None]
        if degenerate.any():
            dx[degenerate] = g[degenerate] / self.epsilon
        return dx.reshape(x_shape), []


class Softmax(Layer):
    """Row-wise softmax with max-subtraction stabilization."""

    kind = "Softmax"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    def backward(self, dout, cache):
        y = cache
        inner = (dout * y).sum(axis=-1, keepdims=True)
        return y * (dout - inner), []


LAYER_KINDS = {cls.kind: cls for cls in
               (Dense, Conv2D, MaxPool2D, ReLU, GlobalAvgPool, L2Normalize,
                Softmax)}
