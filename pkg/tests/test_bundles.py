import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bahadur_lasso.bundles import (
    DomainError,
    JointModel,
    all_outcomes,
    bundle_index,
    extract_r0,
    gradient_w_alpha,
    independence_pmf,
    outcome_code,
    pmf_tables,
    standardized_outcome,
    validate_K,
    w_vector,
)
from bahadur_lasso.dgp import UnconditionalDGP


def random_pmf(M, rng):
    return rng.dirichlet(np.ones(2**M))


@st.composite
def valid_models(draw, max_M=5):
    M = draw(st.integers(2, max_M))
    seed = draw(st.integers(0, 2**32 - 1))
    alpha, r = extract_r0(random_pmf(M, np.random.default_rng(seed)))
    return JointModel(alpha, r)


def test_bundle_order():
    idx = bundle_index(4)
    assert idx.p == 11
    assert idx.labels()[:3] == ["{1,2}", "{1,3}", "{1,4}"]
    assert idx.labels()[6] == "{1,2,3}"
    assert idx.labels()[-1] == "{1,2,3,4}"
    assert idx.index_of((0, 1, 3)) == 7
    for l in range(idx.p):
        assert idx.index_of(idx.subset_of(l)) == l


def test_outcome_table_order():
    ys = all_outcomes(3)
    assert ys.shape == (8, 3)
    assert np.array_equal(outcome_code(ys), np.arange(8))


def test_standardized_outcome_value():
    np.testing.assert_allclose(standardized_outcome([1, 0], [0.8, 0.2]), [0.5, -0.5], atol=1e-15)


def test_standardized_outcome_rejects_degenerate():
    with pytest.raises(DomainError):
        standardized_outcome([1, 0], [1.0, 0.5])


def test_pmf_two_coordinates():
    m = JointModel([0.5, 0.5], [0.2])
    assert m.pmf([1, 1]) == pytest.approx(0.3, abs=1e-15)
    assert m.pmf([1, 0]) == pytest.approx(0.2, abs=1e-15)


def test_extract_from_table():
    alpha, r = extract_r0([0.3, 0.2, 0.2, 0.3])
    np.testing.assert_allclose(alpha, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(r, [0.2], atol=1e-15)


def test_validate_K_detects_negative_factor():
    rep = validate_K([0.5, 0.5], [1.5])
    assert not rep.valid
    assert rep.min_value == pytest.approx(-0.5)


def test_sampling_rejects_invalid_model():
    with pytest.raises(ValueError):
        JointModel([0.5, 0.5], [1.5]).sample(10, 0)


@settings(max_examples=60, deadline=None)
@given(valid_models())
def test_pmf_sums_to_one(model):
    assert abs(model.pmf_table().sum() - 1.0) < 1e-12


@settings(max_examples=60, deadline=None)
@given(valid_models())
def test_extract_roundtrip(model):
    alpha, r = extract_r0(model.pmf_table())
    np.testing.assert_allclose(alpha, model.alpha, atol=1e-12)
    np.testing.assert_allclose(r, model.r, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_w_orthonormal_under_product_measure(M, seed):
    alpha = np.random.default_rng(seed).uniform(0.05, 0.95, M)
    ys = all_outcomes(M)
    W = w_vector(ys, alpha)
    G = W.T @ (independence_pmf(ys, alpha)[:, None] * W)
    np.testing.assert_allclose(G, np.eye(W.shape[1]), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(M, seed):
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(0.1, 0.9, M)
    y = rng.integers(0, 2, M)
    G = gradient_w_alpha(y, alpha)
    step = 1e-6
    for m in range(M):
        e = np.zeros(M)
        e[m] = step
        fd = (w_vector(y, alpha + e) - w_vector(y, alpha - e)) / (2 * step)
        np.testing.assert_allclose(G[:, m], fd, rtol=1e-5, atol=1e-7)


def test_gradient_zero_outside_bundle():
    G = gradient_w_alpha([1, 0, 1], [0.3, 0.4, 0.6])
    idx = bundle_index(3)
    for l, b in enumerate(idx.table):
        for m in range(3):
            if m not in b:
                assert G[l, m] == 0.0


def test_pmf_tables_rowwise_matches_model():
    rng = np.random.default_rng(3)
    models = [JointModel(*extract_r0(random_pmf(3, rng))) for _ in range(4)]
    tab = pmf_tables(np.stack([m.alpha for m in models]), np.stack([m.r for m in models]))
    for k, m in enumerate(models):
        np.testing.assert_allclose(tab[k], m.pmf_table(), atol=1e-14)


def test_record_roundtrip():
    m = UnconditionalDGP.setup(2).model()
    back = JointModel.from_record(m.to_record())
    assert np.array_equal(back.alpha, m.alpha) and np.array_equal(back.r, m.r)


def test_sampling_is_seeded():
    m = UnconditionalDGP.setup(2).model()
    assert np.array_equal(m.sample(50, 7), m.sample(50, 7))
    assert not np.array_equal(m.sample(50, 7), m.sample(50, 8))


@pytest.mark.slow
def test_empirical_extraction_consistent():
    m = UnconditionalDGP.setup(2).model()
    Y = m.sample(10**6, 11)
    table = np.bincount(outcome_code(Y), minlength=16) / Y.shape[0]
    _, r = extract_r0(table)
    assert np.max(np.abs(r - m.r)) < 0.01
