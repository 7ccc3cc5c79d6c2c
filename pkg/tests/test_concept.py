import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccil import numerics as nx
from ccil.concept import (
    MeanBank,
    build_concept_matrix,
    cms_loss,
    feature_invariance_loss,
    logit_invariance_loss,
    update_mean_bank,
)
from oracles import central_diff, cms_naive, rel_err

finite = st.floats(-10, 10, allow_nan=False)


def full_bank(means, momentum=0.9):
    means = np.asarray(means, dtype=float)
    return MeanBank(means.copy(), np.ones(means.shape[0], dtype=bool), momentum)


# ---------------------------------------------------------------- concept matrix


def test_concept_matrix_example():
    M = build_concept_matrix(np.array([1.0, 2.0]), np.eye(2))
    np.testing.assert_array_equal(M, [[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_array_equal(M.sum(axis=0), [1.0, 2.0])


def test_concept_matrix_zero_features(rng):
    assert not build_concept_matrix(np.zeros(3), rng.normal(size=(3, 4))).any()


def test_concept_matrix_column_sums_match_linear(rng):
    z, W = rng.normal(size=6), rng.normal(size=(6, 4))
    assert np.max(np.abs(build_concept_matrix(z, W).sum(axis=0) - nx.linear_forward(z, W))) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8).flatmap(lambda d: st.tuples(arrays(np.float64, d, elements=finite),
                                                     arrays(np.float64, (d, 3), elements=finite))))  # fmt: skip
def test_column_sum_identity_property(zw):
    z, W = zw
    M = build_concept_matrix(z, W)
    assert M.shape == W.shape
    assert np.max(np.abs(M.sum(axis=0) - z @ W), initial=0.0) < 1e-10


def test_concept_matrix_dimension_error():
    with pytest.raises(nx.DimensionError):
        build_concept_matrix(np.zeros(3), np.zeros((4, 2)))


# ---------------------------------------------------------------- cms loss


def test_cms_zero_at_class_means(rng):
    z, W = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    y = np.array([0, 1, 0, 1])
    M = build_concept_matrix(z, W)
    # every sample of a class shares the same matrix
    z[2], z[3] = z[0], z[1]
    M = build_concept_matrix(z, W)
    bank = full_bank([M[0], M[1]])
    r = cms_loss(z, W, y, bank)
    assert r.loss == 0.0
    assert not r.grad_z.any() and not r.grad_W.any()


def test_cms_one_by_one():
    W = np.array([[1.5]])
    z = np.array([[1.0 / 1.5]])  # M = [[1]]
    r = cms_loss(z, W, np.array([0]), full_bank([[[0.0]]]))
    assert r.loss == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(r.grad_z, [[2.0 * 1.0 * 1.5]])
    np.testing.assert_allclose(r.grad_W, [[2.0 * 1.0 * z[0, 0]]])


def test_cms_matches_naive_sum_and_finite_differences(rng):
    z, W = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    y = np.array([0, 1, 1, 0])
    bank = full_bank(rng.normal(size=(2, 3, 2)))
    r = cms_loss(z, W, y, bank)
    naive = lambda zz, WW: cms_naive(zz, WW, y, bank.means, bank.initialized)  # noqa: E731
    assert r.loss == pytest.approx(naive(z, W), rel=1e-12)
    assert rel_err(r.grad_z, central_diff(lambda a: naive(a, W), z)) < 1e-6
    assert rel_err(r.grad_W, central_diff(lambda a: naive(z, a), W)) < 1e-6


def test_cms_gradient_formulas(rng):
    z, W = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    y = rng.integers(0, 3, size=5)
    bank = full_bank(rng.normal(size=(3, 4, 3)))
    r = cms_loss(z, W, y, bank)
    R = np.stack([np.outer(z[i], np.ones(3)) * W - bank.means[y[i]] for i in range(5)])
    np.testing.assert_allclose(r.grad_z, (2 / 5) * np.einsum("ndc,dc->nd", R, W))
    np.testing.assert_allclose(r.grad_W, (2 / 5) * np.einsum("ndc,nd->dc", R, z))


def test_cms_excludes_uninitialized_classes(rng):
    z, W = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    y = np.array([0, 1, 1, 0])
    bank = full_bank(rng.normal(size=(2, 3, 2)))
    bank.initialized[1] = False
    r = cms_loss(z, W, y, bank)
    assert r.n_excluded == 2 and not r.no_reference
    assert not r.grad_z[1].any() and not r.grad_z[2].any()
    assert r.loss == pytest.approx(cms_naive(z, W, y, bank.means, bank.initialized), rel=1e-12)
    empty = MeanBank.empty(2, (3, 2), 0.9)
    r = cms_loss(z, W, y, empty)
    assert r.loss == 0.0 and r.no_reference and r.n_excluded == 4


def test_cms_label_range(rng):
    with pytest.raises(ValueError):
        cms_loss(rng.normal(size=(2, 3)), rng.normal(size=(3, 2)), np.array([0, 2]), full_bank(np.zeros((2, 3, 2))))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite),
       arrays(np.float64, (2, 4, 2), elements=finite), st.lists(st.integers(0, 1), min_size=3, max_size=3))  # fmt: skip
def test_cms_nonnegative(z, W, means, labels):
    assert cms_loss(z, W, np.array(labels), full_bank(means)).loss >= 0.0


def test_cms_convex_in_one_sample(rng):
    """With W and the bank fixed, the per-coordinate minimizer zeroes grad_z."""
    d, c = 5, 3
    W = rng.normal(size=(d, c))
    W[2] = 0.0  # a coordinate the loss does not depend on
    bank = full_bank(rng.normal(size=(c, d, c)))
    z = rng.normal(size=(1, d))
    y = np.array([1])
    target = bank.means[1]
    norms = np.sum(W * W, axis=1)
    zstar = z.copy()
    mask = norms > 0
    zstar[0, mask] = np.sum(W * target, axis=1)[mask] / norms[mask]
    r = cms_loss(zstar, W, y, bank)
    assert np.max(np.abs(r.grad_z)) < 1e-12
    # strictly above the minimum elsewhere along every informative coordinate
    for j in np.flatnonzero(mask):
        bumped = zstar.copy()
        bumped[0, j] += 0.1
        assert cms_loss(bumped, W, y, bank).loss > r.loss


def test_cms_reduces_to_feature_loss(rng):
    for _ in range(100):
        n, d = rng.integers(1, 6), rng.integers(1, 6)
        z = rng.normal(size=(n, d))
        y = np.zeros(n, dtype=int)
        zhat = rng.normal(size=(1, d))
        r_cms = cms_loss(z, np.ones((d, 1)), y, full_bank(zhat[..., None]))
        r_fea = feature_invariance_loss(z, y, full_bank(zhat))
        assert abs(r_cms.loss - r_fea.loss) <= 1e-12
        assert np.max(np.abs(r_cms.grad_z - r_fea.grad_z)) <= 1e-12


# ---------------------------------------------------------------- ablation losses


def test_feature_loss_examples(rng):
    z = rng.normal(size=(3, 2))
    assert feature_invariance_loss(z, np.array([0, 1, 2]), full_bank(z)).loss == 0.0
    r = feature_invariance_loss(np.array([[3.0]]), np.array([0]), full_bank([[1.0]]))
    assert r.loss == 4.0
    np.testing.assert_array_equal(r.grad_z, [[4.0]])
    assert r.grad_W is None and r.grad_o is None


def test_feature_loss_finite_differences(rng):
    z, y = rng.normal(size=(5, 4)), rng.integers(0, 3, size=5)
    bank = full_bank(rng.normal(size=(3, 4)))
    r = feature_invariance_loss(z, y, bank)
    assert rel_err(r.grad_z, central_diff(lambda a: feature_invariance_loss(a, y, bank).loss, z)) < 1e-6


def test_logit_loss_examples(rng):
    o = rng.normal(size=(2, 3))
    assert logit_invariance_loss(o, np.array([0, 1]), full_bank(o)).loss == 0.0
    r = logit_invariance_loss(np.array([[0.0, 2.0]]), np.array([0]), full_bank([[0.0, 0.0]]))
    assert r.loss == 4.0
    assert r.grad_z is None and r.grad_W is None


def test_logit_loss_finite_differences(rng):
    o, y = rng.normal(size=(5, 3)), rng.integers(0, 3, size=5)
    bank = full_bank(rng.normal(size=(3, 3)))
    r = logit_invariance_loss(o, y, bank)
    assert rel_err(r.grad_o, central_diff(lambda a: logit_invariance_loss(a, y, bank).loss, o)) < 1e-6


# ---------------------------------------------------------------- momentum update


def test_update_lambda_one_takes_batch_mean(rng):
    bank = full_bank(rng.normal(size=(2, 2, 2)), momentum=1.0)
    vals = rng.normal(size=(4, 2, 2))
    y = np.array([0, 0, 1, 1])
    update_mean_bank(bank, vals, y)
    assert bank.means[0].tobytes() == vals[:2].mean(axis=0).tobytes()
    assert bank.means[1].tobytes() == vals[2:].mean(axis=0).tobytes()


def test_update_lambda_zero_freezes(rng):
    means = rng.normal(size=(2, 2, 2))
    bank = full_bank(means, momentum=0.0)
    update_mean_bank(bank, rng.normal(size=(3, 2, 2)), np.array([0, 1, 1]))
    assert bank.means.tobytes() == means.tobytes()


def test_update_arithmetic():
    bank = full_bank([[[0.0]]], momentum=0.9)
    update_mean_bank(bank, np.array([[[1.0]]]), np.array([0]))
    assert bank.means[0, 0, 0] == pytest.approx(0.9, abs=1e-15)


def test_update_first_appearance_and_absent_classes(rng):
    bank = MeanBank.empty(3, (2,), momentum=0.0)
    vals = rng.normal(size=(2, 2))
    update_mean_bank(bank, vals, np.array([1, 1]))
    np.testing.assert_array_equal(bank.initialized, [False, True, False])
    np.testing.assert_array_equal(bank.means[1], vals.mean(axis=0))
    assert not bank.means[0].any() and not bank.means[2].any()
    before = bank.means.copy()
    update_mean_bank(bank, rng.normal(size=(1, 2)), np.array([2]))
    np.testing.assert_array_equal(bank.means[1], before[1])


@pytest.mark.parametrize("lam", [0.0, 0.3, 0.9, 1.0])
def test_update_fixed_point(rng, lam):
    means = rng.normal(size=(2, 3))
    bank = full_bank(means, momentum=lam)
    vals = np.concatenate([means[[0]], means[[0]], means[[1]]])
    update_mean_bank(bank, vals, np.array([0, 0, 1]))
    np.testing.assert_allclose(bank.means, means, atol=1e-15)


def test_bank_momentum_range():
    with pytest.raises(ValueError):
        MeanBank.empty(2, (1,), 1.5)
