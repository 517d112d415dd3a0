"""Gradient-sign attacks used for calibration and evaluation.

Both attacks perturb inputs along the sign of the cross-entropy
gradient with respect to the true label, stay inside an L-infinity ball
of radius epsilon around the original image, and clip to [0, 1].
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .nn import backward, cross_entropy, forward
from .validation import as_image_batch, as_label_array

ATTACK_KINDS = ("fgs", "bim")


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    epsilon: float
    n_iters: int = 1
    step: float = None  # per-iteration step; defaults to 2.5*eps/n_iters

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValidationError(
                f"unknown attack kind {self.kind!r}; expected one of "
                f"{ATTACK_KINDS}")
        if self.epsilon <= 0:
            raise ValidationError(f"epsilon {self.epsilon} must be > 0")
        if self.n_iters < 1:
            raise ValidationError(f"n_iters {self.n_iters} must be >= 1")
        if self.step is not None and self.step <= 0:
            raise ValidationError(f"step {self.step} must be > 0")

    def resolved_step(self):
        if self.step is not None:
            return self.step
        if self.kind == "fgs":
            return self.epsilon
        return 2.5 * self.epsilon / self.n_iters

    def describe(self):
        if self.kind == "fgs":
            return f"fgs(eps={self.epsilon:g})"
        return (f"bim(eps={self.epsilon:g},step={self.resolved_step():g},"
                f"iters={self.n_iters})")

    def to_dict(self):
        return {"kind": self.kind, "epsilon": self.epsilon,
                "n_iters": self.n_iters, "step": self.step}

    @staticmethod
    def from_dict(doc):
        return AttackConfig(doc["kind"], float(doc["epsilon"]),
                            int(doc.get("n_iters", 1)), doc.get("step"))


def parse_attack(text):
    """Parse specs like ``fgs:eps=0.2`` or ``bim:step=0.002,iters=50``.

    For BIM, ``eps`` (the total budget) defaults to ``step * iters`` when
    only the per-iteration step is given, mirroring how iterated attacks
    are usually tabulated.
    """
    kind, _, rest = text.partition(":")
    kind = kind.strip().lower()
    fields = {}
    if rest.strip():
        for item in rest.split(","):
            key, _, value = item.partition("=")
            if not value:
                raise ValidationError(f"malformed attack parameter {item!r}")
            fields[key.strip()] = float(value)
    epsilon = fields.pop("eps", None)
    n_iters = int(fields.pop("iters", 1))
    step = fields.pop("step", None)
    if fields:
        raise ValidationError(
            f"unknown attack parameters {sorted(fields)} in {text!r}")
    if epsilon is None:
        if step is None:
            raise ValidationError(f"attack {text!r} needs eps= or step=")
        epsilon = step * n_iters
    return AttackConfig(kind, epsilon, n_iters, step)


def input_gradient(net, images, labels, batch_size=256):
    """Cross-entropy gradient with respect to the input batch."""
    out = np.empty_like(images)
    for start in range(0, images.shape[0], batch_size):
        x = images[start:start + batch_size]
        y = labels[start:start + batch_size]
        logits, caches, _ = forward(net, x)
        _, dlogits = cross_entropy(logits, y)
        _, dx = backward(net, caches, dlogits)
        out[start:start + batch_size] = dx
    return out


def fgs(net, images, labels, epsilon, batch_size=256):
    """One signed gradient step of size epsilon, clipped to [0, 1]."""
    if epsilon <= 0:
        raise ValidationError(f"epsilon {epsilon} must be > 0")
    images = as_image_batch(images)
    labels = as_label_array(labels, num_classes=net.output_shape[-1])
    grad = input_gradient(net, images, labels, batch_size)
    return np.clip(images + epsilon * np.sign(grad), 0.0, 1.0)


def bim(net, images, labels, epsilon, n_iters, step=None, batch_size=256):
    """Iterated signed steps inside the epsilon ball around the input.

    Each iteration moves by ``step`` along the current gradient sign,
    then projects back into the L-infinity ball and into [0, 1].  With
    ``n_iters=1`` and ``step=epsilon`` this is exactly :func:`fgs`.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon {epsilon} must be > 0")
    if n_iters < 1:
        raise ValidationError(f"n_iters {n_iters} must be >= 1")
    images = as_image_batch(images)
    labels = as_label_array(labels, num_classes=net.output_shape[-1])
    if step is None:
        step = 2.5 * epsilon / n_iters
    low = np.clip(images - epsilon, 0.0, 1.0)
    high = np.clip(images + epsilon, 0.0, 1.0)
    adv = images.copy()
    for _ in range(n_iters):
        grad = input_gradient(net, adv, labels, batch_size)
        adv = np.clip(adv + step * np.sign(grad), low, high)
    return adv


def generate(net, images, labels, config, batch_size=256):
    """Run the attack described by an :class:`AttackConfig`."""
    if config.kind == "fgs":
        return fgs(net, images, labels, config.epsilon, batch_size)
    return bim(net, images, labels, config.epsilon, config.n_iters,
               config.resolved_step(), batch_size)
