"""Input-space defense: per-class patch dictionaries and sparse recovery.

Benign images of a class are well approximated by a sparse combination
of atoms learned from that class's patches; adversarial images are not.
The defender reconstructs every patch of an incoming image with OMP
against the dictionary of the victim-predicted class, reassembles the
image, and flags it when the PSNR falls below a benign percentile.

The lasso subproblem inside dictionary learning is solved with an
in-house least-angle-regression homotopy; OMP is implemented with
incremental Gram-Schmidt orthogonalization and is vectorized over
patch batches.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientProfileError, ValidationError
from .nn import decode_array, encode_array
from .validation import as_label_array

DICTIONARY_FORMAT_VERSION = 1
PSNR_SENTINEL_DB = 200.0


# --- patches ---------------------------------------------------------------

@dataclass(frozen=True)
class PatchConfig:
    patch_size: int = 8
    stride: int = 4
    sample_cap: int = 1200  # per-class cap on patches used for learning

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValidationError(f"patch_size {self.patch_size} must be >= 1")
        if self.stride < 1:
            raise ValidationError(f"stride {self.stride} must be >= 1")
        if self.sample_cap < 1:
            raise ValidationError(f"sample_cap {self.sample_cap} must be >= 1")


def patch_positions(side, cfg):
    """Top-left offsets of every patch along one image side."""
    if cfg.patch_size > side:
        raise ValidationError(
            f"patch_size {cfg.patch_size} exceeds image side {side}")
    count = (side - cfg.patch_size) // cfg.stride + 1
    return [i * cfg.stride for i in range(count)]


def extract_patches(image, cfg):
    """Patch matrix of a single-channel image, one patch per column.

    Columns follow raster order (rows of the patch grid first).  The
    result has shape ``(patch_size**2, n_rows * n_cols)``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValidationError(
                f"expected a single-channel image, got {img.shape[0]} channels")
        img = img[0]
    if img.ndim != 2:
        raise ValidationError(f"expected a 2-D image, got ndim {img.ndim}")
    rows = patch_positions(img.shape[0], cfg)
    cols = patch_positions(img.shape[1], cfg)
    ps = cfg.patch_size
    out = np.empty((ps * ps, len(rows) * len(cols)))
    idx = 0
    for r in rows:
        for c in cols:
            out[:, idx] = img[r:r + ps, c:c + ps].ravel()
            idx += 1
    return out


def reassemble_patches(columns, image_shape, cfg):
    """Average overlapping patches back into an image.

    Returns ``(image, coverage)`` where ``coverage`` marks pixels touched
    by at least one patch; uncovered pixels (possible with a
    non-covering stride) hold zero and are excluded from PSNR.
    """
    h, w = image_shape
    rows = patch_positions(h, cfg)
    cols = patch_positions(w, cfg)
    ps = cfg.patch_size
    acc = np.zeros((h, w))
    count = np.zeros((h, w))
    idx = 0
    for r in rows:
        for c in cols:
            acc[r:r + ps, c:c + ps] += columns[:, idx].reshape(ps, ps)
            count[r:r + ps, c:c + ps] += 1.0
            idx += 1
    covered = count > 0
    acc[covered] /= count[covered]
    return acc, covered


# --- lasso via least-angle regression --------------------------------------

def _solve_psd(gram, rhs):
    # lstsq, not solve: near-duplicate atoms make the Gram matrix almost
    # singular and solve() returns garbage without raising
    return np.linalg.lstsq(gram, rhs, rcond=None)[0]


def lars_lasso(dictionary, target, beta, max_iter=None):
    """Solve ``min_v 0.5*||z - D v||^2 + beta*||v||_1`` by homotopy.

    Follows the piecewise-linear solution path in the penalty, starting
    at ``max|D^T z|`` where v = 0 and walking down to ``beta``: atoms
    join the active set when their correlation magnitude meets the
    shrinking bound and drop out when their coefficient crosses zero.
    The result satisfies the lasso KKT conditions at penalty ``beta``.
    """
    d = np.asarray(dictionary, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64)
    if beta <= 0:
        raise ValidationError(f"beta {beta} must be > 0")
    n_atoms = d.shape[1]
    corr0 = d.T @ z
    lam = float(np.max(np.abs(corr0))) if n_atoms else 0.0
    v = np.zeros(n_atoms)
    if lam <= beta:
        return v
    active = [int(np.argmax(np.abs(corr0)))]
    signs = [float(np.sign(corr0[active[0]]))]
    if max_iter is None:
        max_iter = 8 * n_atoms + 32

    for _ in range(max_iter):
        da = d[:, active]
        gram = da.T @ da
        coef_at_zero = _solve_psd(gram, da.T @ z)       # v(lam) = a - lam*b
        direction = _solve_psd(gram, np.asarray(signs))
        guard = lam - 1e-10 * max(1.0, lam)

        # coefficient sign crossings inside the active set
        events = []
        with np.errstate(divide="ignore", invalid="ignore"):
            cross = coef_at_zero / direction
        for pos, lam_cross in enumerate(cross):
            if np.isfinite(lam_cross) and beta < lam_cross < guard:
                events.append((float(lam_cross), "drop", pos))

        # inactive correlations catching up with the bound
        inactive = np.setdiff1d(np.arange(n_atoms), active,
                                assume_unique=False)
        if inactive.size:
            di = d[:, inactive]
            u = di.T @ (z - da @ coef_at_zero)
            w = di.T @ (da @ direction)
            with np.errstate(divide="ignore", invalid="ignore"):
                hit_pos = u / (1.0 - w)
                hit_neg = -u / (1.0 + w)
            for arr, sign in ((hit_pos, 1.0), (hit_neg, -1.0)):
                for j, lam_hit in zip(inactive, arr):
                    if np.isfinite(lam_hit) and beta < lam_hit < guard:
                        events.append((float(lam_hit), "add", (int(j), sign)))

        lam_next = max((e[0] for e in events), default=beta)
        if lam_next <= beta:
            coeffs = coef_at_zero - beta * direction
            v[active] = coeffs
            return v

        event_tol = 1e-12 * max(1.0, lam_next)
        drops = sorted({payload for val, kind, payload in events
                        if kind == "drop" and val >= lam_next - event_tol},
                       reverse=True)
        adds = [payload for val, kind, payload in events
                if kind == "add" and val >= lam_next - event_tol]
        for pos in drops:
            del active[pos]
            del signs[pos]
        for j, sign in adds:
            if j not in active:
                active.append(j)
                signs.append(sign)
        lam = lam_next
        if not active:
            # path restarted from zero; re-seed from raw correlations
            corr = d.T @ z
            lam = float(np.max(np.abs(corr)))
            if lam <= beta:
                return np.zeros(n_atoms)
            active = [int(np.argmax(np.abs(corr)))]
            signs = [float(np.sign(corr[active[0]]))]
    raise ValidationError("lasso path failed to converge; data may be "
                          "ill-conditioned")


def lasso_objective(dictionary, target, coeffs, beta):
    res = target - dictionary @ coeffs
    return 0.5 * float(res @ res) + beta * float(np.abs(coeffs).sum())


# --- dictionary learning ---------------------------------------------------

@dataclass
class Dictionary:
    """Per-class patch dictionary with its benign PSNR profile."""

    atoms: np.ndarray            # (patch_dim, n_atoms), unit columns
    class_id: int
    beta: float
    patch: PatchConfig
    psnr_percentiles: np.ndarray = None   # sorted benign PSNRs
    psnr_threshold: float = None

    @property
    def n_atoms(self):
        return self.atoms.shape[1]


def _init_atoms(data, n_atoms, rng):
    """Seed atoms with distinct normalized data columns."""
    picks = rng.choice(data.shape[1], size=n_atoms, replace=False)
    atoms = data[:, picks].copy()
    norms = np.linalg.norm(atoms, axis=0)
    weak = norms < 1e-10
    if weak.any():
        atoms[:, weak] = rng.standard_normal((data.shape[0], int(weak.sum())))
        norms = np.linalg.norm(atoms, axis=0)
    return atoms / norms


def learn_dictionary(data, n_atoms=225, beta=0.15, iterations=5, seed=0,
                     class_id=-1, patch=PatchConfig()):
    """Alternating minimization for a unit-norm patch dictionary.

    Sparse-coding step: lasso per column at penalty ``beta`` via
    :func:`lars_lasso`.  Dictionary update: per atom, the least-squares
    direction against the residual that excludes it, renormalized; atoms
    never used are re-seeded with the worst-reconstructed data column.
    Both half-steps decrease ``0.5*||Z - DV||^2 + beta*||V||_1``, and the
    returned trace records the objective after every half-step.
    """
    z = np.asarray(data, dtype=np.float64)
    if z.ndim != 2:
        raise ValidationError("patch matrix must be 2-D")
    dim, n_cols = z.shape
    if n_cols < n_atoms:
        raise ValidationError(
            f"{n_cols} patch columns cannot seed {n_atoms} atoms")
    rng = np.random.default_rng(seed)
    atoms = _init_atoms(z, n_atoms, rng)
    codes = np.zeros((n_atoms, n_cols))
    trace = []

    for _ in range(iterations):
        # sparse-coding half-step; columns whose best correlation is
        # already below beta stay zero without running the solver
        screen = np.max(np.abs(atoms.T @ z), axis=0) > beta
        old_codes = codes
        codes = np.zeros_like(old_codes)
        for col in np.flatnonzero(screen):
            codes[:, col] = lars_lasso(atoms, z[:, col], beta)
        # per column keep whichever code scores better under the current
        # atoms; inert when the solver is exact, a guard when it is not
        worse = (_column_objectives(atoms, z, codes, beta)
                 > _column_objectives(atoms, z, old_codes, beta))
        codes[:, worse] = old_codes[:, worse]
        residual = z - atoms @ codes
        trace.append(0.5 * float((residual ** 2).sum())
                     + beta * float(np.abs(codes).sum()))

        # dictionary half-step, one atom at a time against its own
        # residual; running residual kept in sync with every change
        used_cols = set()
        for k in range(n_atoms):
            row = codes[k]
            nz = np.flatnonzero(row)
            if nz.size == 0:
                col = _worst_column(residual, used_cols)
                used_cols.add(col)
                fresh = z[:, col]
                norm = np.linalg.norm(fresh)
                atoms[:, k] = (fresh / norm if norm > 1e-10 else
                               _random_unit(dim, rng))
                continue
            partial = residual[:, nz] + np.outer(atoms[:, k], row[nz])
            direction = partial @ row[nz]
            norm = np.linalg.norm(direction)
            if norm <= 1e-12:
                continue
            new_atom = direction / norm
            residual[:, nz] = partial - np.outer(new_atom, row[nz])
            atoms[:, k] = new_atom
        trace.append(0.5 * float((residual ** 2).sum())
                     + beta * float(np.abs(codes).sum()))

    return Dictionary(atoms, class_id, float(beta), patch), trace


def _column_objectives(atoms, z, codes, beta):
    res = z - atoms @ codes
    return (0.5 * np.einsum("ij,ij->j", res, res)
            + beta * np.abs(codes).sum(axis=0))


def _worst_column(residual, used_cols):
    errs = np.einsum("ij,ij->j", residual, residual)
    for col in np.argsort(errs)[::-1]:
        if int(col) not in used_cols:
            return int(col)
    return int(np.argmax(errs))


def _random_unit(dim, rng):
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def collect_patches(images, cfg, cap=None, rng=None, min_norm=1e-3):
    """Patch columns pooled over a set of images, optionally capped.

    When more than ``cap`` columns are available, prefers patches with
    some content (norm above ``min_norm``) and samples without
    replacement; near-empty patches only fill in when nothing else is
    left.  This keeps the learning set from being dominated by blank
    background patches.
    """
    blocks = [extract_patches(img, cfg) for img in images]
    data = np.concatenate(blocks, axis=1) if blocks else np.empty((0, 0))
    if cap is None or data.shape[1] <= cap:
        return data
    rng = rng or np.random.default_rng(0)
    norms = np.linalg.norm(data, axis=0)
    rich = np.flatnonzero(norms > min_norm)
    if rich.size >= cap:
        picks = rng.choice(rich, size=cap, replace=False)
    else:
        rest = np.flatnonzero(norms <= min_norm)
        extra = rng.choice(rest, size=cap - rich.size, replace=False)
        picks = np.concatenate([rich, extra])
    return data[:, np.sort(picks)]


def learn_class_dictionaries(images, labels, num_classes, *,
                             patch=PatchConfig(), n_atoms=225, beta=0.15,
                             iterations=5, seed=0):
    """One dictionary per class from that class's training images."""
    labels = as_label_array(labels, num_classes=num_classes)
    out = []
    for k in range(num_classes):
        class_images = np.asarray(images)[labels == k]
        if class_images.shape[0] == 0:
            raise ValidationError(f"class {k} has no images to learn from")
        rng = np.random.default_rng([seed, k])
        data = collect_patches(class_images, patch, cap=patch.sample_cap,
                               rng=rng)
        dictionary, _ = learn_dictionary(
            data, n_atoms=n_atoms, beta=beta, iterations=iterations,
            seed=seed + k, class_id=k, patch=patch)
        out.append(dictionary)
    return out


# --- orthogonal matching pursuit -------------------------------------------

@dataclass
class OmpResult:
    residual_norm: float
    support: list
    recon: np.ndarray


def omp(dictionary, target, k, tol=1e-4):
    """Greedy sparse approximation of one vector.

    Repeats: pick the atom most correlated with the residual (ties go to
    the lowest index), extend an orthonormal basis of the support by
    Gram-Schmidt, and deflate the residual.  Stops after ``k`` atoms or
    once the residual norm reaches ``tol``.  The residual equals the
    exact least-squares residual on the returned support.
    """
    atoms = np.asarray(dictionary, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64)
    if k > atoms.shape[0]:
        raise ValidationError(
            f"sparsity {k} exceeds patch dimension {atoms.shape[0]}")
    res_norms, supports, recon = _omp_block(atoms, z[:, None], k, tol)
    return OmpResult(float(res_norms[0]), supports[0], recon[:, 0])


def omp_batch(dictionary, targets, k, tol=1e-4, block=4096):
    """OMP over many columns at once; returns ``(norms, supports, recon)``."""
    atoms = np.asarray(dictionary, dtype=np.float64)
    z = np.asarray(targets, dtype=np.float64)
    if k > atoms.shape[0]:
        raise ValidationError(
            f"sparsity {k} exceeds patch dimension {atoms.shape[0]}")
    norms = np.empty(z.shape[1])
    supports = []
    recon = np.empty_like(z)
    for start in range(0, z.shape[1], block):
        sl = slice(start, start + block)
        block_norms, block_supports, block_recon = _omp_block(
            atoms, z[:, sl], k, tol)
        norms[sl] = block_norms
        supports.extend(block_supports)
        recon[:, sl] = block_recon
    return norms, supports, recon


def _omp_block(atoms, z, k, tol):
    dim, n = z.shape
    res = z.copy()
    basis = np.zeros((k, dim, n))
    chosen = np.full((k, n), -1, dtype=np.int64)
    stopped = np.linalg.norm(res, axis=0) <= tol
    for t in range(k):
        act = ~stopped
        if not act.any():
            break
        corr = atoms.T @ res
        corr[:, stopped] = 0.0
        j = np.argmax(np.abs(corr), axis=0)
        peak = np.abs(corr[j, np.arange(n)])
        # residual effectively orthogonal to every atom: no progress left
        flat = act & (peak <= 1e-10 * (1.0 + np.linalg.norm(res, axis=0)))
        stopped |= flat
        act &= ~flat
        if not act.any():
            continue
        if np.any((chosen[:t] == j[None]) & act[None]):
            raise AssertionError("atom reselected; residual should be "
                                 "orthogonal to the support")
        direction = atoms[:, j].copy()
        for _ in range(2):  # reorthogonalize: classical GS drifts
            for i in range(t):
                direction -= basis[i] * np.einsum(
                    "dn,dn->n", basis[i], direction)
        norm = np.linalg.norm(direction, axis=0)
        dependent = act & (norm <= 1e-10)  # atom adds nothing new
        stopped |= dependent
        act &= ~dependent
        safe = np.where(norm > 1e-10, norm, 1.0)
        q = (direction / safe) * act
        basis[t] = q
        coef = np.einsum("dn,dn->n", q, res)
        res -= q * coef
        chosen[t, act] = j[act]
        stopped |= np.linalg.norm(res, axis=0) <= tol
    res_norms = np.linalg.norm(res, axis=0)
    supports = [[int(a) for a in chosen[:, col] if a >= 0]
                for col in range(n)]
    return res_norms, supports, z - res


# --- PSNR scoring ----------------------------------------------------------

def psnr_db(mse):
    """PSNR against peak 1.0; exact reconstruction maps to a 200 dB cap."""
    if mse <= 0.0:
        return PSNR_SENTINEL_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_SENTINEL_DB)


def reconstruct_and_psnr(image, dictionary, k=8, tol=1e-4):
    """Whole-image OMP reconstruction score against one dictionary."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    cols = extract_patches(img, dictionary.patch)
    _, _, recon_cols = omp_batch(dictionary.atoms, cols, k, tol)
    recon, covered = reassemble_patches(recon_cols, img.shape,
                                        dictionary.patch)
    mse = float(((img - recon)[covered] ** 2).mean())
    return psnr_db(mse)


def batch_psnr(images, predicted, dictionaries, k=8, tol=1e-4):
    """PSNR per image, each against its predicted class's dictionary."""
    images = np.asarray(images, dtype=np.float64)
    predicted = as_label_array(predicted, num_classes=len(dictionaries))
    flat = images[:, 0] if images.ndim == 4 else images
    n, h, w = flat.shape
    out = np.empty(n)
    for cls, dictionary in enumerate(dictionaries):
        idx = np.flatnonzero(predicted == cls)
        if idx.size == 0:
            continue
        cfg = dictionary.patch
        cols_per_img = None
        stacked = []
        for i in idx:
            cols = extract_patches(flat[i], cfg)
            cols_per_img = cols.shape[1]
            stacked.append(cols)
        z = np.concatenate(stacked, axis=1)
        _, _, recon_cols = omp_batch(dictionary.atoms, z, k, tol)
        for pos, i in enumerate(idx):
            sl = slice(pos * cols_per_img, (pos + 1) * cols_per_img)
            recon, covered = reassemble_patches(recon_cols[:, sl], (h, w), cfg)
            mse = float(((flat[i] - recon)[covered] ** 2).mean())
            out[i] = psnr_db(mse)
    return out


# --- profiling, thresholds, and the defender artifact ----------------------

def psnr_thresholds(tables, sp):
    """Per-class PSNR floor at a security parameter in [0, 100].

    The threshold is the SP-th percentile of benign PSNRs (linear
    interpolation); samples scoring strictly below it are flagged, so SP
    approximates the benign flag rate in percent.  SP=100 flags
    everything regardless of the stored threshold.
    """
    sp = float(sp)
    if not 0.0 <= sp <= 100.0:
        raise ValidationError(f"security parameter {sp} outside [0, 100]")
    return np.array([np.percentile(row, sp) for row in tables])


@dataclass
class InputDefender:
    """Per-class dictionaries plus OMP settings and the current SP."""

    dictionaries: list
    sparsity: int = 8
    tol: float = 1e-4
    sp: float = 5.0
    thresholds: np.ndarray = None

    @property
    def num_classes(self):
        return len(self.dictionaries)

    def tables(self):
        rows = []
        for d in self.dictionaries:
            if d.psnr_percentiles is None:
                raise ValidationError(
                    f"dictionary for class {d.class_id} has no PSNR profile")
            rows.append(d.psnr_percentiles)
        return rows

    def set_sp(self, sp):
        self.thresholds = psnr_thresholds(self.tables(), sp)
        self.sp = float(sp)
        for d, thr in zip(self.dictionaries, self.thresholds):
            d.psnr_threshold = float(thr)

    def scores(self, images, predicted):
        return batch_psnr(images, predicted, self.dictionaries,
                          k=self.sparsity, tol=self.tol)

    def flags(self, images, predicted):
        return self.flags_from_scores(self.scores(images, predicted),
                                      predicted, self.sp)

    def flags_from_scores(self, scores, predicted, sp):
        """Re-threshold precomputed PSNRs at another SP (ROC sweeps)."""
        if float(sp) == 100.0:
            return np.ones(len(scores), dtype=bool)
        thr = psnr_thresholds(self.tables(), sp)
        return np.asarray(scores) < thr[np.asarray(predicted)]


def profile_input_defender(defender, images, predicted, min_per_class=20):
    """Store sorted benign PSNR tables on each dictionary and derive
    thresholds at the defender's current SP.

    ``predicted`` is the victim's label per sample; a class observed
    fewer than ``min_per_class`` times aborts profiling.
    """
    predicted = as_label_array(predicted, num_classes=defender.num_classes)
    scores = defender.scores(images, predicted)
    for cls, dictionary in enumerate(defender.dictionaries):
        mask = predicted == cls
        count = int(mask.sum())
        if count < min_per_class:
            raise InsufficientProfileError(
                f"class {cls} has {count} profiling samples, need at least "
                f"{min_per_class}")
        dictionary.psnr_percentiles = np.sort(scores[mask])
    defender.set_sp(defender.sp)
    return defender


# --- serialization ---------------------------------------------------------

def dictionary_to_dict(dictionary):
    doc = {
        "format_version": DICTIONARY_FORMAT_VERSION,
        "class_id": int(dictionary.class_id),
        "patch_config": {"patch_size": dictionary.patch.patch_size,
                         "stride": dictionary.patch.stride,
                         "sample_cap": dictionary.patch.sample_cap},
        "beta": dictionary.beta,
        "atoms": encode_array(dictionary.atoms),
        "atoms_shape": list(dictionary.atoms.shape),
        "threshold": dictionary.psnr_threshold,
        "percentiles": None,
        "percentile_count": 0,
    }
    if dictionary.psnr_percentiles is not None:
        doc["percentiles"] = encode_array(dictionary.psnr_percentiles)
        doc["percentile_count"] = int(len(dictionary.psnr_percentiles))
    return doc


def dictionary_from_dict(doc):
    if doc.get("format_version") != DICTIONARY_FORMAT_VERSION:
        raise ValidationError(
            f"unsupported dictionary format_version "
            f"{doc.get('format_version')!r}")
    pc = doc["patch_config"]
    patch = PatchConfig(pc["patch_size"], pc["stride"], pc["sample_cap"])
    atoms = decode_array(doc["atoms"], tuple(doc["atoms_shape"]))
    percentiles = None
    if doc.get("percentiles") is not None:
        percentiles = decode_array(doc["percentiles"],
                                   (doc["percentile_count"],))
    threshold = doc.get("threshold")
    return Dictionary(atoms, int(doc["class_id"]), float(doc["beta"]), patch,
                      percentiles,
                      float(threshold) if threshold is not None else None)


def save_dictionary(dictionary, path):
    with open(path, "w") as fh:
        json.dump(dictionary_to_dict(dictionary), fh, indent=1)


def load_dictionary(path):
    with open(path) as fh:
        return dictionary_from_dict(json.load(fh))
