"""Plain SGD training loop.

Deliberately simple: fixed learning rate, no momentum, seeded shuffle
and seeded He-uniform init, so two runs with the same config produce
bit-identical weights and the gradient-check oracles stay easy to reason
about.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..validation import as_label_array
from . import network as nnet
from .losses import cross_entropy


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 64
    epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate {self.learning_rate} must be > 0")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size {self.batch_size} must be >= 1")
        if self.epochs < 1:
            raise ValidationError(f"epochs {self.epochs} must be >= 1")


def he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def sgd_step(net, grads, learning_rate):
    """Apply one in-place SGD update from per-layer gradient lists."""
    for layer, layer_grads in zip(net.layers, grads):
        for param, grad in zip(layer.params(), layer_grads):
            param -= learning_rate * grad


def iterate_minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(net, images, labels, cfg, loss="cross_entropy"):
    """Train ``net`` in place; returns ``(net, per-epoch mean loss trace)``."""
    if loss != "cross_entropy":
        raise ValidationError(f"unknown loss {loss!r}")
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValidationError("empty dataset")
    num_classes = net.output_shape[-1]
    labels = as_label_array(labels, num_classes=num_classes)
    if labels.shape[0] != images.shape[0]:
        raise ValidationError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        batches = 0
        for idx in iterate_minibatches(images.shape[0], cfg.batch_size, rng):
            logits, caches, _ = nnet.forward(net, images[idx])
            batch_loss, dlogits = cross_entropy(logits, labels[idx])
            grads, _ = nnet.backward(net, caches, dlogits)
            sgd_step(net, grads, cfg.learning_rate)
            epoch_loss += batch_loss
            batches += 1
        trace.append(epoch_loss / batches)
    return net, trace


def accuracy(net, images, labels):
    preds = nnet.predict(net, images)
    return float(np.mean(preds == np.asarray(labels)))
