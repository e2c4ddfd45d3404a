import numpy as np
import pytest

from bahadur_lasso import localized
from bahadur_lasso.bundles import JointModel, substream
from bahadur_lasso.dgp import ConditionalDGP
from bahadur_lasso.localized import (
    LocalPenaltySpec,
    build_local_design,
    design_penalty,
    fit_local_first_order,
    fit_local_plugin,
    local_lambda_max,
    local_objective,
    predict_r,
)
from bahadur_lasso.marginals import (
    AdversarialBox,
    InsufficientLocalData,
    KernelSpec,
    bootstrap_box_local,
    fit_marginals_local,
)
from bahadur_lasso.solver import VertexGuardError
from bahadur_lasso.tuning import lambda_value


def conditional_design(seed=0, N=300, h=0.3, x=0.5):
    dgp = ConditionalDGP.setup(2)
    X, Y = dgp.draw(N, substream(seed, 0))
    kern = KernelSpec(bandwidth=h)
    return dgp, X, Y, kern, build_local_design(X, Y, [x], kern, alpha_fn=lambda Z: dgp.alpha(Z[:, 0]))


def test_design_keeps_in_bandwidth_rows():
    _, X, _, _, des = conditional_design()
    assert np.all(np.abs(des.X[:, 0] - 0.5) <= 0.3)
    assert des.features().shape == (des.X.shape[0], 22)
    assert des.feature_derivatives().shape == (des.X.shape[0], 4, 22)
    assert des.obs_weights.sum() == pytest.approx(des.kernel_weights.sum() / X.shape[0])


def test_design_needs_points():
    X = np.array([0.0, 0.05, 0.9])
    Y = np.array([[0, 1], [1, 0], [1, 1]])
    with pytest.raises(InsufficientLocalData):
        build_local_design(X, Y, [0.9], KernelSpec(bandwidth=0.1), alpha_at_X=np.full((3, 2), 0.5))


def test_constant_coefficients_recovered():
    m = JointModel([0.4, 0.6], [0.3])
    rng = substream(1, 0)
    X = rng.random(6000)
    Y = m.sample(6000, rng)
    des = build_local_design(X, Y, [0.5], KernelSpec(bandwidth=0.3), alpha_fn=lambda Z: np.tile(m.alpha, (len(Z), 1)))
    fit = fit_local_plugin(des, design_penalty(des, 1e-4))
    assert fit.converged
    assert fit.a[0] == pytest.approx(0.3, abs=0.05)
    assert abs(fit.b[0, 0]) < 0.3


def test_local_lambda_max_kills_fit():
    _, _, _, _, des = conditional_design(2)
    pen = design_penalty(des, 1.0)
    lam = local_lambda_max(des, pen.lam_w)
    fit = fit_local_plugin(des, design_penalty(des, lam))
    assert np.all(fit.a == 0.0) and np.all(fit.b == 0.0)


def test_plugin_objective_agrees_with_original_parameterization():
    _, _, _, _, des = conditional_design(3)
    pen = design_penalty(des, 0.05)
    fit = fit_local_plugin(des, pen)
    assert fit.result.objective == pytest.approx(local_objective(des, fit.a, fit.b, pen), abs=1e-10)


def test_zero_width_box_matches_local_plugin():
    dgp = ConditionalDGP.setup(2)
    X, Y = dgp.draw(300, substream(4, 0))
    a0, b0 = dgp.alpha([0.5])[0], dgp.alpha_slope([0.5])[0][:, None]
    des = build_local_design(X, Y, [0.5], KernelSpec(bandwidth=0.3),
                             alpha_fn=lambda Z: a0 + (Z - 0.5) @ b0.T)
    pen = design_penalty(des, 0.2)
    box = AdversarialBox.point(a0, b0, anchor=des.anchor)
    fo = fit_local_first_order(des, box, pen)
    pi = fit_local_plugin(des, pen)
    np.testing.assert_allclose(fo.a, pi.a, atol=1e-8)
    np.testing.assert_allclose(fo.b, pi.b, atol=1e-8)


def test_local_first_order_with_bootstrap_box():
    dgp = ConditionalDGP.setup(2)
    X, Y = dgp.draw(100, substream(5, 0))
    kern = KernelSpec(bandwidth=0.1634)
    des = build_local_design(X, Y, [0.5], kern)
    box = bootstrap_box_local(fit_marginals_local(X, Y, [0.5], kern), B=300, rng_seed=1)
    lam = lambda_value("theory_local_FO", 100, 4, h=0.1634)
    fit = fit_local_first_order(des, box, design_penalty(des, lam))
    assert fit.converged
    assert fit.method == "first_order"


def test_exact_vertex_guard(monkeypatch):
    _, _, _, _, des = conditional_design(6)
    box = AdversarialBox(np.full(4, 0.4), np.full(4, 0.6), np.full((4, 1), -0.1), np.full((4, 1), 0.1))
    monkeypatch.setattr(localized, "MAX_EXACT_VERTEX_BITS", 4)
    with pytest.raises(VertexGuardError):
        fit_local_first_order(des, box, design_penalty(des, 0.1), inner="exact")


def test_predict_r_is_affine():
    _, _, _, _, des = conditional_design(7)
    fit = fit_local_plugin(des, design_penalty(des, 0.01))
    np.testing.assert_allclose(predict_r(fit, [0.6]), fit.a + 0.1 * fit.b[:, 0])


def test_penalty_shape_mismatch_rejected():
    _, _, _, _, des = conditional_design(8)
    with pytest.raises(ValueError):
        fit_local_plugin(des, LocalPenaltySpec(0.1, np.ones(3), np.ones((3, 1))))


def test_nearby_anchor_fits_close():
    dgp = ConditionalDGP.setup(2)
    X, Y = dgp.draw(3000, substream(9, 0))
    kern = KernelSpec(bandwidth=0.3)

    def fit_at(x):
        des = build_local_design(X, Y, [x], kern, alpha_fn=lambda Z: dgp.alpha(Z[:, 0]))
        return fit_local_plugin(des, design_penalty(des, 0.02))

    f1, f2 = fit_at(0.5), fit_at(0.52)
    assert np.max(np.abs(predict_r(f1, [0.52]) - f2.a)) < 0.05 + 0.3**2
