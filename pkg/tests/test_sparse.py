"""Patches, lasso, dictionary learning, sparse recovery, PSNR scoring."""

import numpy as np
import pytest

from advshield import nn
from advshield.errors import (InsufficientProfileError, ValidationError)
from advshield.sparse import (Dictionary, InputDefender, PatchConfig,
                              batch_psnr, extract_patches, lars_lasso,
                              lasso_objective, learn_dictionary,
                              load_dictionary, omp, omp_batch, psnr_db,
                              psnr_thresholds, profile_input_defender,
                              reassemble_patches, reconstruct_and_psnr,
                              save_dictionary)

import oracles


# --- patches ---------------------------------------------------------------

def test_patch_counts_28x28():
    img = np.random.default_rng(0).random((28, 28))
    cols = extract_patches(img, PatchConfig(patch_size=8, stride=4))
    assert cols.shape == (64, 36)


def test_patch_raster_order():
    img = np.arange(36.0).reshape(6, 6) / 36.0
    cols = extract_patches(img, PatchConfig(patch_size=2, stride=2))
    np.testing.assert_array_equal(cols[:, 0],
                                  img[0:2, 0:2].reshape(-1))
    np.testing.assert_array_equal(cols[:, 1],
                                  img[0:2, 2:4].reshape(-1))
    np.testing.assert_array_equal(cols[:, 3],
                                  img[2:4, 0:2].reshape(-1))


def test_constant_image_identical_columns():
    cols = extract_patches(np.full((28, 28), 0.3),
                           PatchConfig(patch_size=8, stride=4))
    assert (cols == cols[:, [0]]).all()


def test_patch_larger_than_image():
    with pytest.raises(ValidationError):
        extract_patches(np.zeros((6, 6)), PatchConfig(patch_size=8, stride=4))


def test_nonoverlapping_reassembly_exact():
    img = np.random.default_rng(1).random((28, 28))
    cfg = PatchConfig(patch_size=4, stride=4)
    cols = extract_patches(img, cfg)
    back, covered = reassemble_patches(cols, img.shape, cfg)
    assert covered.all()
    np.testing.assert_array_equal(back, img)


def test_overlapping_reassembly_averages():
    img = np.random.default_rng(2).random((12, 12))
    cfg = PatchConfig(patch_size=8, stride=4)
    cols = extract_patches(img, cfg)
    back, covered = reassemble_patches(cols, img.shape, cfg)
    assert covered.all()
    np.testing.assert_allclose(back, img, atol=1e-12)


# --- lars_lasso ------------------------------------------------------------

def random_lasso_instance(seed, p=6, m=8):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(p, m))
    d /= np.linalg.norm(d, axis=0)
    z = rng.normal(size=p)
    beta = 10 ** rng.uniform(-2.0, 0.0)
    return d, z, beta


def test_lasso_zero_when_beta_dominates():
    d, z, _ = random_lasso_instance(0)
    beta = float(np.abs(d.T @ z).max())
    np.testing.assert_array_equal(lars_lasso(d, z, beta + 1e-9), 0.0)
    np.testing.assert_array_equal(lars_lasso(d, z, beta), 0.0)


def test_lasso_orthonormal_soft_threshold():
    rng = np.random.default_rng(3)
    d = np.linalg.qr(rng.normal(size=(8, 8)))[0]
    z = rng.normal(size=8)
    beta = 0.3
    corr = d.T @ z
    expected = np.sign(corr) * np.maximum(np.abs(corr) - beta, 0.0)
    np.testing.assert_allclose(lars_lasso(d, z, beta), expected, atol=1e-10)


@pytest.mark.parametrize("seed", range(40))
def test_lasso_kkt_and_objective_vs_cd(seed):
    d, z, beta = random_lasso_instance(seed)
    v = lars_lasso(d, z, beta)
    assert oracles.kkt_violation(d, z, beta, v) <= 1e-6
    ref = oracles.cd_lasso(d, z, beta)
    assert (lasso_objective(d, z, v, beta)
            <= oracles.lasso_objective(d, z, beta, ref) + 1e-6)


def test_lasso_handles_duplicate_atoms():
    rng = np.random.default_rng(9)
    d = rng.normal(size=(6, 5))
    d /= np.linalg.norm(d, axis=0)
    d = np.concatenate([d, d[:, [0]], -d[:, [1]]], axis=1)
    z = rng.normal(size=6)
    v = lars_lasso(d, z, 0.2)
    assert oracles.kkt_violation(d, z, 0.2, v) <= 1e-6


# --- dictionary learning ---------------------------------------------------

def test_learn_dictionary_unit_atoms_and_monotone_trace():
    rng = np.random.default_rng(4)
    data = rng.random((16, 60))
    d, trace = learn_dictionary(data, n_atoms=10, beta=0.1, iterations=6,
                                seed=0)
    np.testing.assert_allclose(np.linalg.norm(d.atoms, axis=0), 1.0,
                               atol=1e-9)
    diffs = np.diff(trace)
    assert (diffs <= 1e-6).all()


@pytest.mark.parametrize("seed", [1, 2])
def test_learn_dictionary_recovers_planted_model(seed):
    rng = np.random.default_rng(seed)
    p, m, n = 16, 12, 96
    d_true = rng.normal(size=(p, m))
    d_true /= np.linalg.norm(d_true, axis=0)
    v_true = np.zeros((m, n))
    for j in range(n):
        v_true[rng.integers(0, m), j] = 0.5 + rng.random()
    z = d_true @ v_true
    beta = 0.05
    planted_obj = beta * np.abs(v_true).sum()  # residual is zero
    d, trace = learn_dictionary(z, n_atoms=m, beta=beta, iterations=40,
                                seed=seed)
    assert abs(trace[-1] / planted_obj - 1.0) <= 0.05


def test_learn_dictionary_huge_beta_zeroes_codes():
    rng = np.random.default_rng(5)
    data = rng.random((12, 30))
    d, trace = learn_dictionary(data, n_atoms=8, beta=1e3, iterations=3,
                                seed=0)
    assert trace[-1] == pytest.approx(0.5 * float((data ** 2).sum()))


def test_learn_dictionary_needs_enough_columns():
    with pytest.raises(ValidationError):
        learn_dictionary(np.random.default_rng(0).random((8, 5)),
                         n_atoms=6, beta=0.1, iterations=1, seed=0)


# --- omp -------------------------------------------------------------------

def unit_columns(rng, p, m):
    d = rng.normal(size=(p, m))
    return d / np.linalg.norm(d, axis=0)


def test_omp_recovers_single_atom():
    d = unit_columns(np.random.default_rng(6), 8, 10)
    result = omp(d, d[:, 3] * 2.5, k=3, tol=1e-8)
    assert result.support == [3]
    assert result.residual_norm <= 1e-10


def test_omp_orthonormal_top_correlations():
    rng = np.random.default_rng(7)
    d = np.linalg.qr(rng.normal(size=(8, 8)))[0]
    z = rng.normal(size=8)
    corr = np.abs(d.T @ z)
    top2 = set(np.argsort(corr)[-2:])
    result = omp(d, z, k=2, tol=0.0)
    assert set(result.support) == top2
    rest = sorted(set(range(8)) - top2)
    expected = float(np.linalg.norm((d.T @ z)[rest]))
    assert result.residual_norm == pytest.approx(expected, abs=1e-10)


def test_omp_tie_breaks_to_lowest_index():
    d = np.eye(6)
    z = np.zeros(6)
    z[1] = 1.0
    z[4] = 1.0
    result = omp(d, z, k=1, tol=0.0)
    assert result.support == [1]


def test_omp_residual_is_exact_least_squares():
    rng = np.random.default_rng(8)
    d = unit_columns(rng, 8, 12)
    z = rng.normal(size=8)
    result = omp(d, z, k=4, tol=0.0)
    coeffs = np.linalg.lstsq(d[:, result.support], z, rcond=None)[0]
    exact = float(np.linalg.norm(z - d[:, result.support] @ coeffs))
    assert result.residual_norm == pytest.approx(exact, abs=1e-8)


@pytest.mark.parametrize("seed", range(80))
def test_omp_matches_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(4, 9))
    m = int(rng.integers(4, 13))
    d = unit_columns(rng, p, m)
    z = rng.normal(size=p)
    k = int(rng.integers(1, 3))
    result = omp(d, z, k=k, tol=1e-4)
    ref_norm, ref_support = oracles.greedy_omp(d, z, k, tol=1e-4)
    assert abs(result.residual_norm - ref_norm) <= 1e-6
    assert result.support == ref_support


def test_omp_batch_equals_single():
    rng = np.random.default_rng(10)
    d = unit_columns(rng, 8, 14)
    z = rng.normal(size=(8, 40))
    norms, supports, recon = omp_batch(d, z, 3, tol=1e-4)
    for j in range(40):
        single = omp(d, z[:, j], 3, tol=1e-4)
        assert norms[j] == pytest.approx(single.residual_norm, abs=1e-12)
        assert supports[j] == single.support
        np.testing.assert_allclose(recon[:, j], single.recon, atol=1e-12)


# --- psnr ------------------------------------------------------------------

def test_psnr_formula_and_sentinel():
    assert psnr_db(0.01) == pytest.approx(20.0)
    assert psnr_db(1.0) == pytest.approx(0.0)
    assert psnr_db(0.0) == 200.0
    assert psnr_db(1e-30) == 200.0


def test_exactly_tiled_image_hits_sentinel():
    rng = np.random.default_rng(11)
    img = np.clip(rng.random((8, 8)) + 0.05, 0.0, 1.0)
    cfg = PatchConfig(patch_size=4, stride=4)
    cols = extract_patches(img, cfg)
    atoms = cols / np.linalg.norm(cols, axis=0)
    d = Dictionary(atoms, class_id=0, beta=0.15, patch=cfg)
    assert reconstruct_and_psnr(img, d, k=1, tol=1e-10) == 200.0


def test_own_class_reconstructs_better(tiny):
    input_def = tiny["input_defender"]
    eval_part = tiny["parts"]["eval"]
    mask = eval_part.labels == 0
    images = eval_part.images[mask][:25]
    own = batch_psnr(images, np.zeros(len(images), dtype=np.int64),
                     input_def.dictionaries)
    other = batch_psnr(images, np.full(len(images), 5, dtype=np.int64),
                       input_def.dictionaries)
    assert own.mean() > other.mean()


# --- thresholds and detection ----------------------------------------------

def test_psnr_threshold_interpolation_example():
    table = [np.arange(10.0, 101.0, 10.0)]
    assert psnr_thresholds(table, 10.0)[0] == pytest.approx(19.0)


def test_psnr_threshold_sp0_flags_nothing():
    table = [np.arange(10.0, 101.0, 10.0)]
    thr = psnr_thresholds(table, 0.0)
    assert thr[0] == 10.0
    assert not (table[0] < thr[0]).any()


def test_psnr_thresholds_nondecreasing_in_sp():
    rng = np.random.default_rng(12)
    table = [np.sort(rng.random(41)) * 40.0 + 10.0]
    grid = [0.0, 1.0, 5.0, 25.0, 80.0, 100.0]
    values = [psnr_thresholds(table, sp)[0] for sp in grid]
    assert (np.diff(values) >= -1e-12).all()


def test_input_defender_profile_rate_tracks_sp(tiny):
    input_def = tiny["input_defender"]
    profile = tiny["parts"]["profile"]
    predicted = nn.predict(tiny["victim"], profile.images)
    scores = input_def.scores(profile.images, predicted)
    counts = np.bincount(predicted, minlength=10)
    slack = 1.0 / counts[counts > 0].min()
    for sp in (5.0, 10.0):
        rate = input_def.flags_from_scores(scores, predicted, sp).mean()
        assert abs(rate - sp / 100.0) <= slack


def test_input_defender_sp100_flags_all(tiny):
    input_def = tiny["input_defender"]
    images = tiny["parts"]["eval"].images[:20]
    predicted = nn.predict(tiny["victim"], images)
    assert input_def.flags_from_scores(
        input_def.scores(images, predicted), predicted, 100.0).all()


def test_noise_image_flagged(tiny):
    rng = np.random.default_rng(13)
    noise = rng.random((4, 1, 28, 28))
    predicted = nn.predict(tiny["victim"], noise)
    assert tiny["input_defender"].flags(noise, predicted).all()


def test_benign_mostly_unflagged_at_low_sp(tiny):
    images = tiny["parts"]["profile"].images[:60]
    predicted = nn.predict(tiny["victim"], images)
    rate = tiny["input_defender"].flags(images, predicted).mean()
    assert rate < 0.3


def test_profile_requires_min_class_count(tiny):
    defender = InputDefender([Dictionary(d.atoms, d.class_id, d.beta,
                                         d.patch)
                              for d in tiny["input_defender"].dictionaries])
    images = tiny["parts"]["profile"].images[:10]
    predicted = nn.predict(tiny["victim"], images)
    with pytest.raises(InsufficientProfileError):
        profile_input_defender(defender, images, predicted)


# --- serialization ---------------------------------------------------------

def test_dictionary_round_trip_bytes(tiny, tmp_path):
    d = tiny["input_defender"].dictionaries[2]
    first = tmp_path / "d.json"
    second = tmp_path / "d2.json"
    save_dictionary(d, first)
    save_dictionary(load_dictionary(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_dictionary_round_trip_values(tiny, tmp_path):
    d = tiny["input_defender"].dictionaries[7]
    path = tmp_path / "d.json"
    save_dictionary(d, path)
    back = load_dictionary(path)
    np.testing.assert_array_equal(back.atoms, d.atoms)
    np.testing.assert_array_equal(back.psnr_percentiles, d.psnr_percentiles)
    assert back.psnr_threshold == d.psnr_threshold
    assert back.class_id == d.class_id
    assert back.patch == d.patch
