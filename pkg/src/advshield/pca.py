"""PCA for taming high-dimensional checkpoint activations.

Distances to class centers are measured after projecting onto the
principal subspace that keeps at least 99% of the energy; the projection
is a plain affine map, so it can also be folded into a trailing dense
layer of the defender network (see :func:`fold_into_dense`).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .validation import as_float_array


@dataclass
class PcaProjection:
    mean: np.ndarray        # (p,)
    components: np.ndarray  # (p, L), orthonormal columns, eigenvalue order
    energy_kept: float
    eigenvalues: np.ndarray  # full spectrum, descending (diagnostics)

    @property
    def n_components(self):
        return self.components.shape[1]

    def project(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean) @ self.components


def fit_pca(features, min_energy=0.99):
    """Fit a projection keeping the smallest number of leading
    eigenvectors whose energy fraction reaches ``min_energy``."""
    x = as_float_array(features, name="features", ndim=2)
    n, p = x.shape
    if n < p:
        raise ValidationError(
            f"need at least {p} samples to fit a {p}-dimensional PCA, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[::-1], 0.0, None)  # descending, clamp round-off
    evecs = evecs[:, ::-1]
    total = evals.sum()
    if total <= 0.0:
        # all samples identical: keep one (arbitrary) direction
        return PcaProjection(mean, evecs[:, :1].copy(), 1.0, evals)
    ratios = np.cumsum(evals) / total
    n_keep = int(np.searchsorted(ratios, min_energy - 1e-12) + 1)
    n_keep = min(n_keep, p)
    return PcaProjection(mean, np.ascontiguousarray(evecs[:, :n_keep]),
                         float(ratios[n_keep - 1]), evals)


def fold_into_dense(pca):
    """Express the projection as dense-layer parameters.

    ``y = (x - mean) @ W = x @ W + (-mean @ W)``: returns ``(weight, bias)``
    ready to append to a network, making the projection part of the
    forward pass.
    """
    weight = pca.components.copy()
    bias = -pca.mean @ pca.components
    return weight, bias
