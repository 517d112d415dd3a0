"""Network container: ordered layers, forward/backward, JSON round trip."""

import base64
import copy
import json

import numpy as np

from ..errors import ShapeError, ValidationError
from .layers import LAYER_KINDS, Conv2D, Dense, L2Normalize, MaxPool2D

FORMAT_VERSION = 1


class Network:
    """An ordered stack of layers over a fixed per-sample input shape.

    The container itself is cheap state (layers + input shape). Forward
    and backward keep their caches outside the network, so a frozen
    network is safe to share across threads.
    """

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.check_shapes()

    def check_shapes(self):
        """Walk the layer chain and verify shapes compose end to end."""
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as exc:
                raise ShapeError(
                    f"layer {i} ({layer.kind}): {exc}") from None
        return shape

    @property
    def output_shape(self):
        return self.check_shapes()

    def layer_shapes(self):
        """Per-sample activation shapes: input of layer 0, then each output."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        return shapes

    def copy(self):
        return copy.deepcopy(self)

    def num_params(self):
        return sum(p.size for layer in self.layers for p in layer.params())


def forward(net, batch, capture_at=None):
    """Run a batch through the network.

    Returns ``(logits, caches, captured)`` where ``caches`` feeds
    :func:`backward` and ``captured`` is the activation exiting layer
    ``capture_at`` (or None).
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == len(net.input_shape):
        x = x[None]
    if x.shape[1:] != net.input_shape:
        raise ShapeError(
            f"input shape {x.shape[1:]} does not match network input "
            f"{net.input_shape}")
    if capture_at is not None and not (0 <= capture_at < len(net.layers)):
        raise ValidationError(
            f"capture_at {capture_at} out of range for {len(net.layers)} layers")
    caches = []
    captured = None
    for i, layer in enumerate(net.layers):
        try:
            x, cache = layer.forward(x)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        caches.append(cache)
        if capture_at == i:
            captured = x
    return x, caches, captured


def backward(net, caches, dout, inject_at=None, inject_grad=None):
    """Reverse pass from an output gradient.

    ``inject_at``/``inject_grad`` add an extra gradient with respect to
    the *output* of the named layer on the way down; this is how the
    center-pull loss reaches both the weights below a checkpoint and the
    input image. Returns per-layer parameter gradient lists (aligned with
    ``net.layers``) and the gradient with respect to the input batch.
    """
    g = np.asarray(dout, dtype=np.float64)
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        if inject_at == i:
            g = g + inject_grad
        g, layer_grads = net.layers[i].backward(g, caches[i])
        grads[i] = layer_grads
    return grads, g


def predict(net, batch):
    """Argmax class labels for a batch."""
    logits, _, _ = forward(net, batch)
    return logits.argmax(axis=1)


# --- serialization ---------------------------------------------------------

def _encode(arr):
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text, shape):
    flat = np.frombuffer(base64.b64decode(text), dtype="<f8")
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise ValidationError(
            f"serialized parameter has {flat.size} values, shape {shape} "
            f"needs {expected}")
    return flat.reshape(shape).astype(np.float64)


# public names: other artifact files (defenders, dictionaries) reuse the
# same base64 little-endian float64 wire format
encode_array = _encode
decode_array = _decode


def to_dict(net):
    """JSON-ready dict; parameters as base64 little-endian float64."""
    layers = []
    for layer in net.layers:
        entry = {"kind": layer.kind, "hyper": layer.hyper(),
                 "params": [_encode(p) for p in layer.params()]}
        layers.append(entry)
    return {"format_version": FORMAT_VERSION,
            "input_shape": list(net.input_shape),
            "layers": layers}


def from_dict(doc):
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"unsupported model format_version {doc.get('format_version')!r}")
    layers = []
    for entry in doc["layers"]:
        kind = entry["kind"]
        if kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {kind!r}")
        hyper = entry.get("hyper", {})
        params = entry.get("params", [])
        if kind == "Dense":
            w = _decode(params[0], (hyper["in_dim"], hyper["out_dim"]))
            b = _decode(params[1], (hyper["out_dim"],))
            layers.append(Dense(w, b))
        elif kind == "Conv2D":
            kh, kw = hyper["kernel"]
            w = _decode(params[0], (hyper["out_channels"],
                                    hyper["in_channels"], kh, kw))
            b = _decode(params[1], (hyper["out_channels"],))
            layers.append(Conv2D(w, b))
        elif kind == "MaxPool2D":
            layers.append(MaxPool2D(hyper["window"]))
        elif kind == "L2Normalize":
            layers.append(L2Normalize(hyper.get("epsilon", 1e-12)))
        else:
            layers.append(LAYER_KINDS[kind]())
    return Network(layers, doc["input_shape"])


def save(net, path):
    with open(path, "w") as fh:
        json.dump(to_dict(net), fh, indent=1)


def load(path):
    with open(path) as fh:
        return from_dict(json.load(fh))
