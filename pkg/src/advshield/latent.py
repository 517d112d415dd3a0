"""Latent-space defenders.

A defender is a replica of the victim classifier with an L2-normalize
layer spliced in before its classification head.  Joint fine-tuning with
a center-separation loss pulls each sample's checkpoint activation
toward a per-class center while pushing it away from the others, so
benign data condenses into tight class clusters.  At run time a sample
is flagged when its PCA-projected activation lands farther from the
center of the victim-predicted class than a calibrated benign radius.

Defenders can be chained: each one perturbs the training images along
its own center-pull gradient to synthesize the next defender's training
set, yielding a set of replicas with dissimilar latent geometry.
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import (DivergenceError, InsufficientProfileError,
                     ValidationError)
from .nn import (Network, backward, cross_entropy, decode_array, encode_array,
                 forward, iterate_minibatches, sgd_step)
from .pca import PcaProjection, fit_pca
from .validation import as_image_batch, as_label_array, check_fraction

DEFENDER_FORMAT_VERSION = 1


# --- center set and loss ---------------------------------------------------

@dataclass
class CenterSet:
    """Trainable per-class centers plus the loss scale ``gamma``."""

    values: np.ndarray  # (num_classes, feature_dim)
    gamma: float = 0.01

    @property
    def num_classes(self):
        return self.values.shape[0]

    def copy(self):
        return CenterSet(self.values.copy(), self.gamma)


def init_centers(features, labels, num_classes, gamma=0.01):
    """Start centers at the unit-normalized per-class feature means."""
    features = np.asarray(features, dtype=np.float64)
    labels = as_label_array(labels, num_classes=num_classes)
    values = np.zeros((num_classes, features.shape[1]))
    for k in range(num_classes):
        mask = labels == k
        if not mask.any():
            raise ValidationError(
                f"class {k} has no samples to initialize its center")
        values[k] = features[mask].mean(axis=0)
    return CenterSet(nn.l2_normalize(values), gamma)


def center_norm_penalty(centers):
    """Sum of squared deviations of center norms from 1."""
    norms = np.linalg.norm(centers.values, axis=1)
    return float(((norms - 1.0) ** 2).sum())


def center_loss(features, labels, centers):
    """Batch center-separation loss and its gradients.

    Per sample: squared distance to the own-class center minus the summed
    squared distances to all other centers; plus, once per batch, the
    center-norm penalty.  The whole thing is scaled by ``gamma`` and
    averaged over the batch.  Returns ``(loss, dfeatures, dcenters)``.
    """
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    c = centers.values
    batch, _ = f.shape
    num_classes = c.shape[0]

    diffs = f[:, None, :] - c[None, :, :]            # (B, K, p)
    sq = np.einsum("bkp,bkp->bk", diffs, diffs)      # (B, K)
    own = sq[np.arange(batch), y]
    pull = own.mean()
    push = (sq.sum(axis=1) - own).mean()
    penalty = center_norm_penalty(centers)
    gamma = centers.gamma
    loss = gamma * (pull - push + penalty)

    own_diff = f - c[y]                              # (B, p)
    all_diff = diffs.sum(axis=1)                     # (B, p), sum over centers
    dfeat = (gamma / batch) * (4.0 * own_diff - 2.0 * all_diff)

    sign = np.full((batch, num_classes), -1.0)
    sign[np.arange(batch), y] = 1.0
    col = sign.sum(axis=0)                           # (K,)
    dcent = (2.0 * gamma / batch) * (c * col[:, None] - sign.T @ f)
    norms = np.linalg.norm(c, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    dcent += gamma * 2.0 * ((norms - 1.0) / safe)[:, None] * c
    return float(loss), dfeat, dcent


def center_pull_grad(features, labels, centers):
    """Per-sample gradient of the own-center squared distance (unscaled)."""
    f = np.asarray(features, dtype=np.float64)
    return 2.0 * (f - centers.values[np.asarray(labels)])


# --- building a defender ---------------------------------------------------

def default_checkpoint(victim):
    """Index of the second-to-last layer, the usual splice point."""
    if len(victim.layers) < 2:
        raise ValidationError("network too shallow to host a checkpoint")
    return len(victim.layers) - 2


def attach_normalizer(victim, layer_index=None):
    """Copy the victim and splice an L2-normalize layer after ``layer_index``.

    Returns ``(network, checkpoint)`` where ``checkpoint`` is the index
    of the inserted layer, i.e. where normalized features are captured.
    The splice must sit before the classification head, and it leaves the
    argmax of the logits essentially unchanged (normalization only
    rescales the head's input per sample).
    """
    if layer_index is None:
        layer_index = default_checkpoint(victim)
    last = len(victim.layers) - 1
    if not 0 <= layer_index <= last - 1:
        raise ValidationError(
            f"splice point {layer_index} out of range: must come before "
            f"the classification head (layer {last})")
    net = victim.copy()
    net.layers.insert(layer_index + 1, nn.L2Normalize())
    net.check_shapes()
    return net, layer_index + 1


def capture_features(net, checkpoint, images, batch_size=256):
    """Checkpoint activations for a batch, computed in chunks."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for start in range(0, images.shape[0], batch_size):
        _, _, feats = forward(net, images[start:start + batch_size],
                              capture_at=checkpoint)
        out.append(feats)
    return np.concatenate(out, axis=0)


def fine_tune(net, checkpoint, centers, images, labels, cfg):
    """Jointly train network weights and centers in place.

    Batch objective: cross-entropy plus the center-separation loss, both
    backpropagated through the checkpoint.  Centers take plain SGD steps
    at the same learning rate.  Raises :class:`DivergenceError` when the
    center-norm penalty exceeds 10 after any epoch.  Returns the
    per-epoch mean total loss trace.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = as_label_array(labels, num_classes=centers.num_classes)
    n = images.shape[0]
    if n == 0:
        raise ValidationError("empty fine-tuning dataset")
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in iterate_minibatches(n, cfg.batch_size, rng):
            logits, caches, feats = forward(net, images[idx],
                                            capture_at=checkpoint)
            ce, dlogits = cross_entropy(logits, labels[idx])
            closs, dfeat, dcent = center_loss(feats, labels[idx], centers)
            grads, _ = backward(net, caches, dlogits,
                                inject_at=checkpoint, inject_grad=dfeat)
            sgd_step(net, grads, cfg.learning_rate)
            centers.values -= cfg.learning_rate * dcent
            total += (ce + closs) * idx.size
        trace.append(total / n)
        penalty = center_norm_penalty(centers)
        if penalty > 10.0:
            raise DivergenceError(
                f"center norms diverged: penalty {penalty:.3f} after epoch "
                f"{epoch + 1} (reduce the learning rate)")
    return trace


def perturb_dataset(net, checkpoint, centers, images, labels,
                    scale=0.1, batch_size=256):
    """Next-defender training set: ``clip(x + eta)`` per sample.

    ``eta`` is the input gradient of the own-center pull term through
    this defender, rescaled so each sample's perturbation has max-abs
    ``scale``.  Samples with a zero gradient pass through unchanged.
    """
    check_fraction(scale, "scale")
    images = np.asarray(images, dtype=np.float64)
    labels = as_label_array(labels, num_classes=centers.num_classes)
    out = np.empty_like(images)
    for start in range(0, images.shape[0], batch_size):
        x = images[start:start + batch_size]
        y = labels[start:start + batch_size]
        logits, caches, feats = forward(net, x, capture_at=checkpoint)
        dfeat = center_pull_grad(feats, y, centers)
        _, dx = backward(net, caches, np.zeros_like(logits),
                         inject_at=checkpoint, inject_grad=dfeat)
        peak = np.max(np.abs(dx), axis=tuple(range(1, dx.ndim)), keepdims=True)
        safe = np.where(peak > 0.0, peak, 1.0)
        eta = dx * (scale / safe) * (peak > 0.0)
        out[start:start + batch_size] = np.clip(x + eta, 0.0, 1.0)
    return out


# --- profiling and thresholds ----------------------------------------------

def profile_radii(net, checkpoint, centers, pca, images, predicted,
                  min_per_class=20, batch_size=256):
    """Sorted benign center distances per class, in PCA space.

    ``predicted`` carries the victim's label for each profiling sample;
    distances are grouped by that label.  Any class seen fewer than
    ``min_per_class`` times aborts profiling, since its percentile would
    be meaningless.
    """
    predicted = as_label_array(predicted, num_classes=centers.num_classes)
    feats = capture_features(net, checkpoint, images, batch_size)
    proj = pca.project(feats)
    centers_proj = pca.project(centers.values)
    table = []
    for k in range(centers.num_classes):
        mask = predicted == k
        count = int(mask.sum())
        if count < min_per_class:
            raise InsufficientProfileError(
                f"class {k} has {count} profiling samples, need at least "
                f"{min_per_class}")
        dists = np.linalg.norm(proj[mask] - centers_proj[k], axis=1)
        table.append(np.sort(dists))
    return table


def radius_thresholds(table, sp):
    """Per-class radii for a security parameter in [0, 100].

    The threshold is the (100-SP)th percentile of the benign distance
    table (linear interpolation), so SP is the target benign flag rate in
    percent.  SP=100 means flag everything; the stored radii are 0.
    """
    sp = float(sp)
    if not 0.0 <= sp <= 100.0:
        raise ValidationError(f"security parameter {sp} outside [0, 100]")
    if sp == 100.0:
        return np.zeros(len(table))
    return np.array([np.percentile(row, 100.0 - sp) for row in table])


# --- the artifact ----------------------------------------------------------

@dataclass
class LatentDefender:
    """A fitted latent defender ready for detection.

    Holds the fine-tuned replica, its splice point, centers, the PCA
    projection, per-class benign distance tables, and the thresholds for
    the current security parameter.
    """

    network: Network
    checkpoint: int
    centers: CenterSet
    pca: PcaProjection
    percentile_table: list = field(default_factory=list)
    sp: float = 5.0
    thresholds: np.ndarray = None

    def __post_init__(self):
        if self.thresholds is None and self.percentile_table:
            self.thresholds = radius_thresholds(self.percentile_table, self.sp)

    def set_sp(self, sp):
        self.thresholds = radius_thresholds(self.percentile_table, sp)
        self.sp = float(sp)

    def distances(self, images, predicted, batch_size=256):
        """Center distance per sample, against the predicted class."""
        predicted = as_label_array(predicted,
                                   num_classes=self.centers.num_classes)
        feats = capture_features(self.network, self.checkpoint, images,
                                 batch_size)
        proj = self.pca.project(feats)
        centers_proj = self.pca.project(self.centers.values)
        return np.linalg.norm(proj - centers_proj[predicted], axis=1)

    def flags(self, images, predicted, batch_size=256):
        scores = self.distances(images, predicted, batch_size)
        return self.flags_from_scores(scores, predicted, self.sp)

    def flags_from_scores(self, scores, predicted, sp):
        """Re-threshold precomputed distances at another SP (ROC sweeps)."""
        if float(sp) == 100.0:
            return np.ones(len(scores), dtype=bool)
        thr = radius_thresholds(self.percentile_table, sp)
        return np.asarray(scores) > thr[np.asarray(predicted)]


def train_defender(victim, train_images, train_labels, profile_images,
                   cfg, *, layer_index=None, gamma=0.01, sp=5.0,
                   min_energy=0.99, min_per_class=20):
    """Build one latent defender from a victim classifier.

    Splices the normalizer, initializes centers from class means,
    fine-tunes, fits the PCA on benign profiling features, and profiles
    benign radii grouped by the *victim's* predictions (the label a
    deployed defender will be handed).
    """
    train_images = as_image_batch(train_images)
    profile_images = as_image_batch(profile_images)
    num_classes = victim.output_shape[-1]
    labels = as_label_array(train_labels, num_classes=num_classes)

    net, checkpoint = attach_normalizer(victim, layer_index)
    feats = capture_features(net, checkpoint, train_images)
    centers = init_centers(feats, labels, num_classes, gamma)
    fine_tune(net, checkpoint, centers, train_images, labels, cfg)

    profile_feats = capture_features(net, checkpoint, profile_images)
    pca = fit_pca(profile_feats, min_energy)
    predicted = nn.predict(victim, profile_images)
    table = profile_radii(net, checkpoint, centers, pca, profile_images,
                          predicted, min_per_class)
    return LatentDefender(net, checkpoint, centers, pca, table, float(sp))


def build_chain(victim, train_images, train_labels, profile_images,
                n_defenders, cfg, *, eta_scale=0.1, sp=5.0, gamma=0.01,
                layer_index=None, min_energy=0.99, min_per_class=20):
    """Train ``n_defenders`` chained replicas.

    Defender n+1 starts from a fresh victim copy but trains on the
    previous defender's perturbed dataset; every defender profiles its
    radii on the same clean benign profiling set.
    """
    if n_defenders < 1:
        raise ValidationError(f"n_defenders {n_defenders} must be >= 1")
    data = as_image_batch(train_images)
    defenders = []
    for n in range(n_defenders):
        step_cfg = dataclasses.replace(cfg, seed=cfg.seed + n)
        defender = train_defender(
            victim, data, train_labels, profile_images, step_cfg,
            layer_index=layer_index, gamma=gamma, sp=sp,
            min_energy=min_energy, min_per_class=min_per_class)
        defenders.append(defender)
        if n + 1 < n_defenders:
            data = perturb_dataset(defender.network, defender.checkpoint,
                                   defender.centers, data, train_labels,
                                   scale=eta_scale)
    return defenders


# --- serialization ---------------------------------------------------------

def defender_to_dict(defender):
    c = defender.centers
    p = defender.pca
    return {
        "format_version": DEFENDER_FORMAT_VERSION,
        "network": nn.to_dict(defender.network),
        "checkpoint_layer": int(defender.checkpoint),
        "centers": {"gamma": c.gamma,
                    "shape": list(c.values.shape),
                    "data": encode_array(c.values)},
        "pca": {"mean": encode_array(p.mean),
                "components": encode_array(p.components),
                "shape": list(p.components.shape),
                "energy_kept": p.energy_kept,
                "eigenvalues": encode_array(p.eigenvalues)},
        "sp": defender.sp,
        "thresholds": encode_array(defender.thresholds),
        "percentile_table": {
            "counts": [int(len(row)) for row in defender.percentile_table],
            "rows": [encode_array(row) for row in defender.percentile_table]},
    }


def defender_from_dict(doc):
    if doc.get("format_version") != DEFENDER_FORMAT_VERSION:
        raise ValidationError(
            f"unsupported defender format_version {doc.get('format_version')!r}")
    net = nn.from_dict(doc["network"])
    c = doc["centers"]
    centers = CenterSet(decode_array(c["data"], tuple(c["shape"])),
                        float(c["gamma"]))
    p = doc["pca"]
    dim, n_keep = p["shape"]
    pca = PcaProjection(decode_array(p["mean"], (dim,)),
                        decode_array(p["components"], (dim, n_keep)),
                        float(p["energy_kept"]),
                        decode_array(p["eigenvalues"], (dim,)))
    t = doc["percentile_table"]
    table = [decode_array(row, (count,))
             for row, count in zip(t["rows"], t["counts"])]
    thresholds = decode_array(doc["thresholds"], (centers.num_classes,))
    return LatentDefender(net, int(doc["checkpoint_layer"]), centers, pca,
                          table, float(doc["sp"]), thresholds)


def save_defender(defender, path):
    with open(path, "w") as fh:
        json.dump(defender_to_dict(defender), fh, indent=1)


def load_defender(path):
    with open(path) as fh:
        return defender_from_dict(json.load(fh))
