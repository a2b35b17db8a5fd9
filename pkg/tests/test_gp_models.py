import numpy as np
import pytest

from deepbayes import diff_engine as de
from deepbayes import rand_dist as rd
from deepbayes.gp_models import (BlrState, DklState, GpState, SvgpState,
                                 blr_fit_predict_lml, dkl_forward,
                                 gaussian_bump_features, gp_predict_lml,
                                 make_bump_centers, prop31_check,
                                 svgp_collapsed_bound, svgp_elbo)
from deepbayes.kernels import KernelParams


def _chol_lower(S):
    return np.linalg.cholesky(S)


# -- Bayesian linear regression ---------------------------------------------------

def test_blr_hand_worked_posterior():
    # single weight, phi = x: prior N(0, 1), noise 1, data (x, y) = (1, 2), (1, 2)
    # precision = 1 + 2, m = S * phi^T y = (1/3) * 4 = 4/3
    state = BlrState(alpha=1.0, sigma=1.0)
    m, S, _, _ = blr_fit_predict_lml(state, np.array([1.0, 1.0]), np.array([2.0, 2.0]))
    assert np.isclose(S.value[0, 0], 1.0 / 3.0)
    assert np.isclose(m.value[0], 4.0 / 3.0)


def test_blr_no_data_returns_prior():
    state = BlrState(alpha=2.0, sigma=1.0, centers=np.array([0.0, 1.0]), width=1.0)
    m, S, pred, lml = blr_fit_predict_lml(state, np.zeros(0), np.zeros(0),
                                          X_star=np.array([0.5]))
    assert np.allclose(m.value, 0.0)
    assert np.allclose(S.value, 4.0 * np.eye(2))
    assert lml.value == 0.0
    assert np.allclose(pred[0].value, 0.0)


def test_blr_small_noise_interpolates():
    x = np.linspace(-1, 1, 7)
    y = np.sin(2 * x)
    centers, width = make_bump_centers(x, 10)
    state = BlrState(alpha=5.0, sigma=1e-6, centers=centers, width=width)
    _, _, pred, _ = blr_fit_predict_lml(state, x, y, X_star=x)
    assert np.max(np.abs(pred[0].value - y)) < 1e-3


def test_blr_lml_matches_direct_density():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(9)
    y = rng.standard_normal(9)
    centers, width = make_bump_centers(x, 5)
    state = BlrState(alpha=1.4, sigma=0.6, centers=centers, width=width)
    _, _, _, lml = blr_fit_predict_lml(state, x, y)
    phi = gaussian_bump_features(x, centers, width).value
    cov = 1.4 ** 2 * phi @ phi.T + 0.36 * np.eye(9)
    assert np.isclose(lml.value, rd.mvn_log_density(y, np.zeros(9), cov=cov).value)


def test_blr_rejects_nonpositive_scales():
    with pytest.raises(ValueError):
        blr_fit_predict_lml(BlrState(alpha=-1.0), np.ones(2), np.ones(2))


def test_bump_centers_span_inputs():
    x = np.array([-2.0, 0.0, 3.0])
    centers, width = make_bump_centers(x, 6)
    assert centers[0] == -2.0 and centers[-1] == 3.0
    assert np.isclose(width, 1.0)
    phi = gaussian_bump_features(x, centers, width).value
    assert phi.shape == (3, 6) and np.all(phi > 0) and np.all(phi <= 1)


# -- exact GP regression ------------------------------------------------------------

def test_gp_prior_with_no_data():
    state = GpState(kernel_params=KernelParams(log_sf2=np.log(2.0)))
    Xs = np.array([[0.0], [1.0]])
    m, cov, lml = gp_predict_lml(state, np.zeros((0, 1)), np.zeros(0), X_star=Xs)
    assert np.allclose(m.value, 0.0)
    assert np.isclose(cov.value[0, 0], 2.0)
    assert lml.value == 0.0


def test_gp_interpolates_as_noise_vanishes():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((6, 1))
    y = np.sin(X[:, 0])
    state = GpState(log_noise=np.log(1e-10))
    mean, cov, _ = gp_predict_lml(state, X, y, X_star=X)
    assert np.max(np.abs(mean.value - y)) < 1e-4
    assert np.max(np.diag(cov.value)) < 1e-4


def test_gp_with_linear_kernel_equals_blr():
    # kernel alpha^2 phi phi^T reproduces the weight-space marginal exactly
    rng = np.random.default_rng(2)
    x = rng.standard_normal(8)
    y = rng.standard_normal(8)
    centers, width = make_bump_centers(x, 4)
    alpha, sigma = 1.3, 0.5
    _, _, _, lml_blr = blr_fit_predict_lml(
        BlrState(alpha=alpha, sigma=sigma, centers=centers, width=width), x, y)
    def kern(X1, X2):
        p1 = gaussian_bump_features(np.ravel(de.as_tensor(X1).value), centers, width)
        p2 = gaussian_bump_features(np.ravel(de.as_tensor(X2).value), centers, width)
        return de.elementwise("affine", de.matmul(p1, de.transpose(p2)), a=alpha ** 2)
    state = GpState(kernel_fn=kern, log_noise=np.log(sigma ** 2))
    _, _, lml_gp = gp_predict_lml(state, x.reshape(-1, 1), y)
    assert np.isclose(lml_blr.value, lml_gp.value, atol=1e-10)


def test_gp_lml_matches_direct_density():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((7, 2))
    y = rng.standard_normal(7)
    state = GpState(kernel_params=KernelParams(log_sf2=0.2, log_lengthscales=0.1),
                    log_noise=np.log(0.3))
    _, _, lml = gp_predict_lml(state, X, y)
    from deepbayes.kernels import se_ard_features
    K = se_ard_features(state.kernel_params, X).value + 0.3 * np.eye(7)
    assert np.isclose(lml.value, rd.mvn_log_density(y, np.zeros(7), cov=K).value)


def test_gp_hyperparameter_gradients():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((6, 2))
    y = rng.standard_normal(6)
    def fn(ps):
        state = GpState(kernel_params=KernelParams(log_sf2=ps["lsf"],
                                                   log_lengthscales=ps["lls"]),
                        log_noise=ps["lnv"])
        return gp_predict_lml(state, X, y)[2]
    rep = de.finite_diff_check(fn, {"lsf": np.asarray(0.1),
                                    "lls": np.array([0.0, 0.2]),
                                    "lnv": np.asarray(-1.0)})
    assert rep["passed"], rep


# -- optimal signal variance ---------------------------------------------------------

def test_optimal_signal_variance_data_fit_is_half_n():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((8, 1))
    y = rng.standard_normal(8)
    state = GpState(log_noise=np.log(0.2))
    sf2, data_fit, complexity = prop31_check(state, X, y)
    assert np.isclose(data_fit.value, -4.0, atol=1e-12)
    assert sf2.value > 0


def test_optimal_signal_variance_lml_decomposition():
    # lml at the optimal sf2 = data_fit - complexity - (N/2) log 2 pi
    rng = np.random.default_rng(6)
    n = 10
    X = rng.standard_normal((n, 2))
    y = rng.standard_normal(n)
    state = GpState(log_noise=np.log(0.4))
    sf2, data_fit, complexity = prop31_check(state, X, y)
    opt = GpState(kernel_params=KernelParams(log_sf2=np.log(sf2.value)),
                  log_noise=np.log(0.4 * sf2.value))
    _, _, lml = gp_predict_lml(opt, X, y)
    recon = data_fit.value - complexity.value - 0.5 * n * np.log(2 * np.pi)
    assert np.isclose(lml.value, recon, atol=1e-9)


def test_optimal_signal_variance_rejects_zero_targets():
    with pytest.raises(ValueError):
        prop31_check(GpState(), np.ones((3, 1)), np.zeros(3))


# -- sparse variational GPs -----------------------------------------------------------

def _random_svgp(rng, n=10, m=4, same_z=False, X=None):
    X = rng.standard_normal((n, 1)) if X is None else X
    y = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(X.shape[0])
    Z = X[:m].copy() if same_z else rng.standard_normal((m, 1))
    M = Z.shape[0]
    A = rng.standard_normal((M, M))
    S_chol = _chol_lower(A @ A.T + M * np.eye(M))
    state = SvgpState(Z=Z, m=rng.standard_normal(M), S_chol=S_chol,
                      kernel_params=KernelParams(log_sf2=0.1, log_lengthscales=0.2),
                      log_noise=np.log(0.3))
    return state, X, y


def test_collapsed_bound_equals_lml_when_inducing_cover_data():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((8, 1))
    y = np.cos(X[:, 0])
    state, _, _ = _random_svgp(rng, X=X, m=8, same_z=True)
    state.Z = X.copy()
    bound, _, _ = svgp_collapsed_bound(state, X, y)
    gp = GpState(kernel_params=state.kernel_params, log_noise=state.log_noise)
    _, _, lml = gp_predict_lml(gp, X, y)
    assert np.isclose(bound.value, lml.value, atol=1e-8)


def test_collapsed_bound_below_lml_for_subsets():
    rng = np.random.default_rng(8)
    for trial in range(10):
        state, X, y = _random_svgp(rng, n=12, m=4)
        bound, _, _ = svgp_collapsed_bound(state, X, y)
        gp = GpState(kernel_params=state.kernel_params, log_noise=state.log_noise)
        _, _, lml = gp_predict_lml(gp, X, y)
        assert bound.value <= lml.value + 1e-10, trial


def test_uncollapsed_at_optimal_q_attains_collapsed():
    rng = np.random.default_rng(9)
    state, X, y = _random_svgp(rng, n=9, m=4)
    bound, m_opt, S_opt = svgp_collapsed_bound(state, X, y)
    state.m = m_opt.value
    state.S_chol = _chol_lower(S_opt.value)
    elbo = svgp_elbo(state, X, y, total_n=X.shape[0])
    assert np.isclose(elbo.value, bound.value, atol=1e-8)


def test_uncollapsed_never_exceeds_collapsed():
    rng = np.random.default_rng(10)
    for trial in range(10):
        state, X, y = _random_svgp(rng, n=9, m=4)
        bound, _, _ = svgp_collapsed_bound(state, X, y)
        elbo = svgp_elbo(state, X, y, total_n=X.shape[0])
        assert elbo.value <= bound.value + 1e-8, trial


def test_svgp_minibatch_scaling_is_unbiased():
    rng = np.random.default_rng(11)
    state, X, y = _random_svgp(rng, n=12, m=4)
    full = svgp_elbo(state, X, y, total_n=12).value
    # averaging the scaled per-batch bounds over a disjoint partition
    parts = [svgp_elbo(state, X[i:i + 4], y[i:i + 4], total_n=12).value
             for i in (0, 4, 8)]
    assert np.isclose(np.mean(parts), full, atol=1e-9)


def test_svgp_rejects_empty_batch():
    rng = np.random.default_rng(12)
    state, X, y = _random_svgp(rng)
    with pytest.raises(ValueError):
        svgp_elbo(state, X[:0], y[:0], total_n=10)


def test_svgp_gradients():
    rng = np.random.default_rng(13)
    state, X, y = _random_svgp(rng, n=7, m=3)
    tril = np.tril(np.ones((3, 3)))
    def fn(ps):
        st = SvgpState(Z=ps["Z"], m=ps["m"],
                       S_chol=de.add(de.mul(ps["Sraw"], np.tril(np.ones((3, 3)), -1)),
                                     de.diag_embed(de.elementwise("exp",
                                                                  de.diag_part(ps["Sraw"])))),
                       kernel_params=KernelParams(log_sf2=ps["lsf"],
                                                  log_lengthscales=ps["lls"]),
                       log_noise=ps["lnv"])
        return svgp_elbo(st, X, y, total_n=X.shape[0])
    rep = de.finite_diff_check(fn, {"Z": state.Z, "m": state.m,
                                    "Sraw": np.tril(rng.standard_normal((3, 3)) * 0.3),
                                    "lsf": np.asarray(0.1), "lls": np.asarray(0.2),
                                    "lnv": np.asarray(-1.2)})
    assert rep["passed"], rep


# -- deterministic feature extractors ---------------------------------------------------

def test_extractor_identity_reduces_to_plain_gp():
    rng = np.random.default_rng(14)
    X = rng.standard_normal((6, 2))
    y = rng.standard_normal(6)
    dkl = DklState(weights=[(np.eye(2), np.zeros(2))], gp=GpState(log_noise=-1.0))
    feats = dkl_forward(dkl, X)
    _, _, lml_dkl = gp_predict_lml(dkl.gp, feats, y)
    _, _, lml_gp = gp_predict_lml(GpState(log_noise=-1.0), X, y)
    assert np.isclose(lml_dkl.value, lml_gp.value, atol=1e-12)


def test_extractor_constant_features_give_constant_kernel():
    rng = np.random.default_rng(15)
    X = rng.standard_normal((5, 3))
    dkl = DklState(weights=[(np.zeros((3, 2)), np.array([1.0, -1.0]))],
                   gp=GpState(kernel_params=KernelParams(log_sf2=np.log(1.6))))
    feats = dkl_forward(dkl, X)
    from deepbayes.kernels import se_ard_features
    K = se_ard_features(dkl.gp.kernel_params, feats).value
    assert np.allclose(K, 1.6)


def test_extractor_weight_gradients_through_lml():
    rng = np.random.default_rng(16)
    X = rng.standard_normal((6, 2))
    y = rng.standard_normal(6)
    def fn(ps):
        dkl = DklState(weights=[(ps["W0"], ps["b0"]), (ps["W1"], ps["b1"])],
                       gp=GpState(log_noise=-1.0))
        feats = dkl_forward(dkl, X)
        return gp_predict_lml(dkl.gp, feats, y)[2]
    rep = de.finite_diff_check(fn, {"W0": rng.standard_normal((2, 4)) * 0.7,
                                    "b0": rng.standard_normal(4) * 0.3,
                                    "W1": rng.standard_normal((4, 2)) * 0.7,
                                    "b1": rng.standard_normal(2) * 0.3})
    assert rep["passed"], rep


def test_extractor_dimension_mismatch_error():
    dkl = DklState(weights=[(np.eye(3), np.zeros(3))], gp=GpState())
    with pytest.raises(ValueError):
        dkl_forward(dkl, np.zeros((4, 2)))
