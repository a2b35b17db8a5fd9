"""Bayesian linear regression, exact GP regression, sparse variational GPs,
and deep-kernel features, all differentiable through diff_engine."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diff_engine as de
from . import rand_dist as rd
from .diff_engine import DiffTensor, as_tensor
from .kernels import KernelParams, se_ard_features

__all__ = [
    "BlrState", "GpState", "SvgpState", "DklState",
    "gaussian_bump_features", "blr_fit_predict_lml", "gp_predict_lml",
    "prop31_check", "svgp_elbo", "svgp_collapsed_bound", "dkl_forward",
]


@dataclass
class BlrState:
    """Linear regression with a Gaussian prior N(0, alpha^2 I) on weights.

    Features are either Gaussian bumps (centers/width set) or the raw inputs.
    """
    alpha: object = 1.0            # prior scale
    sigma: object = 1.0            # observation noise std
    centers: np.ndarray = None     # (K,) bump centers for 1-D inputs
    width: float = None
    posterior_m: np.ndarray = None
    posterior_S: np.ndarray = None


@dataclass
class GpState:
    kernel_params: KernelParams = field(default_factory=KernelParams)
    log_noise: object = 0.0        # log sigma^2
    kernel_fn: object = None       # optional (X1, X2) -> DiffTensor override
    chol_cache: object = None

    def noise_var(self) -> DiffTensor:
        return de.elementwise("exp", as_tensor(self.log_noise))

    def kern(self, X1, X2=None) -> DiffTensor:
        if self.kernel_fn is not None:
            return self.kernel_fn(X1, X1 if X2 is None else X2)
        return se_ard_features(self.kernel_params, X1, X2)


@dataclass
class SvgpState:
    Z: object = None               # (M, D)
    m: object = None               # (M,) variational mean
    S_chol: object = None          # (M, M) lower Cholesky of S
    kernel_params: KernelParams = field(default_factory=KernelParams)
    log_noise: object = 0.0

    def noise_var(self) -> DiffTensor:
        return de.elementwise("exp", as_tensor(self.log_noise))

    def kern(self, X1, X2=None) -> DiffTensor:
        return se_ard_features(self.kernel_params, X1, X2)


@dataclass
class DklState:
    weights: list = None           # [(W, b), ...] for a relu net
    gp: GpState = None


def gaussian_bump_features(X, centers, width) -> DiffTensor:
    """phi_k(x) = exp(-(x - c_k)^2 / (2 width^2)) for 1-D inputs."""
    X = as_tensor(X)
    x = de.reshape(X, (X.value.shape[0], 1))
    c = as_tensor(np.asarray(centers, dtype=np.float64).reshape(1, -1))
    d2 = de.elementwise("square", de.sub(x, c))
    return de.elementwise("exp", de.elementwise("affine", d2, a=-0.5 / float(width) ** 2))


def make_bump_centers(x, n_centers):
    """Evenly spaced centers over the input range; width equals the spacing."""
    lo, hi = float(np.min(x)), float(np.max(x))
    centers = np.linspace(lo, hi, n_centers)
    width = (hi - lo) / max(n_centers - 1, 1)
    return centers, width


def _blr_features(state: BlrState, X) -> DiffTensor:
    if state.centers is not None:
        return gaussian_bump_features(np.asarray(np.ravel(de.as_tensor(X).value)),
                                      state.centers, state.width)
    X = as_tensor(X)
    if X.value.ndim == 1:
        return de.reshape(X, (X.value.shape[0], 1))
    return X


def blr_fit_predict_lml(state: BlrState, X, y, X_star=None):
    """Posterior (m, S), predictive mean/var at X_star, and log marginal
    likelihood of linear regression with prior N(0, alpha^2 I) on weights.
    """
    alpha = as_tensor(state.alpha)
    sigma = as_tensor(state.sigma)
    if alpha.value <= 0 or sigma.value <= 0:
        raise ValueError("alpha and sigma must be positive")
    phi = _blr_features(state, X)
    n, k = phi.value.shape
    y = as_tensor(y)
    a2 = de.elementwise("square", alpha)
    s2 = de.elementwise("square", sigma)

    eye = as_tensor(np.eye(k))
    if n == 0:
        m = as_tensor(np.zeros(k))
        S = de.mul(a2, eye)
        lml = as_tensor(np.asarray(0.0))
    elif n <= k:
        # function-space form: better conditioned than the weight-space
        # precision when the features outnumber the data or the noise is tiny
        cov = de.add(de.mul(a2, de.matmul(phi, de.transpose(phi))),
                     de.mul(s2, as_tensor(np.eye(n))))
        Lc = de.cholesky_factor(cov)
        w_y = de.triangular_solve(Lc, y)
        w_p = de.triangular_solve(Lc, phi)                     # Lc^{-1} phi
        m = de.mul(a2, de.matmul(de.transpose(w_p), w_y))
        S = de.sub(de.mul(a2, eye),
                   de.mul(de.elementwise("square", a2),
                          de.matmul(de.transpose(w_p), w_p)))
        lml = rd.mvn_log_density(y, np.zeros(n), chol=Lc)
    else:
        prec = de.add(de.div(eye, a2),
                      de.div(de.matmul(de.transpose(phi), phi), s2))
        Lp = de.cholesky_factor(prec)
        # S = prec^{-1}
        w = de.triangular_solve(Lp, eye)
        S = de.matmul(de.transpose(w), w)
        m = de.matmul(S, de.div(de.matmul(de.transpose(phi), y), s2))
        cov = de.add(de.mul(a2, de.matmul(phi, de.transpose(phi))),
                     de.mul(s2, as_tensor(np.eye(n))))
        lml = rd.mvn_log_density(y, np.zeros(n), cov=cov)

    state.posterior_m = np.asarray(m.value)
    state.posterior_S = np.asarray(S.value)

    pred = None
    if X_star is not None:
        phis = _blr_features(state, X_star)
        mean = de.matmul(phis, m)
        var = de.add(de.tsum(de.mul(de.matmul(phis, S), phis), axis=1), s2)
        pred = (mean, var)
    return m, S, pred, lml


def gp_predict_lml(state: GpState, X, y, X_star=None):
    """Exact GP regression: predictive mean/cov at X_star and the LML."""
    X = as_tensor(X)
    y = as_tensor(y)
    n = X.value.shape[0]
    s2 = state.noise_var()
    if n == 0:
        if X_star is None:
            return None, None, as_tensor(np.asarray(0.0))
        Kss = state.kern(X_star)
        m = as_tensor(np.zeros(as_tensor(X_star).value.shape[0]))
        return m, Kss, as_tensor(np.asarray(0.0))

    K = state.kern(X)
    Kn = de.add(K, de.mul(s2, as_tensor(np.eye(n))))
    L = de.cholesky_factor(Kn)
    lml = rd.mvn_log_density(y, np.zeros(n), chol=L)

    if X_star is None:
        return None, None, lml
    Ks = state.kern(X, X_star)          # n x n*
    Kss = state.kern(X_star)
    w_y = de.triangular_solve(L, y)
    w_k = de.triangular_solve(L, Ks)
    mean = de.matmul(de.transpose(w_k), w_y)
    cov = de.sub(Kss, de.matmul(de.transpose(w_k), w_k))
    return mean, cov, lml


def prop31_check(state: GpState, X, y):
    """Optimal signal variance under the scaled parameterization where the
    noise is sigma_hat^2 * sf2, and the resulting data-fit term.

    With K = sf2 * Khat and noise sf2 * sigma_hat^2, the quadratic data-fit
    term of the LML at the optimal sf2 = y^T (Khat + sigma_hat^2 I)^{-1} y / N
    is exactly -N/2. Also returns the complexity penalty
    N/2 log sf2 + 1/2 log|Khat + sigma_hat^2 I|.
    """
    X = as_tensor(X)
    y = as_tensor(y)
    n = X.value.shape[0]
    if np.all(y.value == 0):
        raise ValueError("zero targets: optimal signal variance is degenerate")
    # unit-signal-variance kernel
    saved = state.kernel_params.log_sf2
    state.kernel_params.log_sf2 = 0.0
    try:
        Khat = state.kern(X)
    finally:
        state.kernel_params.log_sf2 = saved
    Mh = de.add(Khat, de.mul(state.noise_var(), as_tensor(np.eye(n))))
    L = de.cholesky_factor(Mh)
    w = de.triangular_solve(L, y)
    quad = de.tsum(de.elementwise("square", w))      # y^T Mh^{-1} y
    sf2_opt = de.elementwise("affine", quad, a=1.0 / n)
    data_fit = de.elementwise("affine", de.div(quad, sf2_opt), a=-0.5)
    logdet_hat = de.elementwise("affine",
                                de.tsum(de.elementwise("log", de.diag_part(L))), a=2.0)
    complexity = de.add(de.elementwise("affine", de.elementwise("log", sf2_opt), a=0.5 * n),
                        de.elementwise("affine", logdet_hat, a=0.5))
    return sf2_opt, data_fit, complexity


def _svgp_marginals(state: SvgpState, Xb):
    """Per-point q(f) mean and variance at the batch inputs."""
    Z = as_tensor(state.Z)
    Kzz = state.kern(Z)
    Lz = de.cholesky_factor(Kzz)
    Kzx = state.kern(Z, Xb)
    W = de.triangular_solve(Lz, Kzx)                     # M x Nb
    wm = de.triangular_solve(Lz, as_tensor(state.m))     # M
    mean = de.matmul(de.transpose(W), wm)
    U = de.triangular_solve(Lz, W, trans=True)           # Kzz^{-1} Kzx
    C = de.matmul(de.transpose(as_tensor(state.S_chol)), U)
    Xb_t = as_tensor(Xb)
    kdiag = de.diag_part(state.kern(Xb_t))
    var = de.add(de.sub(kdiag, de.tsum(de.elementwise("square", W), axis=0)),
                 de.tsum(de.elementwise("square", C), axis=0))
    return mean, var, Kzz


def svgp_elbo(state: SvgpState, Xb, yb, total_n) -> DiffTensor:
    """Uncollapsed sparse variational bound on a (mini)batch.

    (N/Nb) sum_n E_q[log N(y_n; f_n, s2)] - KL(q(u) || p(u)); the expectation
    is closed form for the Gaussian likelihood.
    """
    yb = as_tensor(yb)
    nb = yb.value.shape[0]
    if nb < 1:
        raise ValueError("empty batch")
    mean, var, Kzz = _svgp_marginals(state, Xb)
    s2 = state.noise_var()
    ell = de.sub(rd.normal_log_density(yb, mean, s2),
                 de.div(var, de.elementwise("affine", s2, a=2.0)))
    Sq = de.matmul(as_tensor(state.S_chol), de.transpose(as_tensor(state.S_chol)))
    M = Kzz.value.shape[0]
    kl = rd.kl_divergences("gaussian-full", (as_tensor(state.m), Sq),
                           (np.zeros(M), Kzz))
    return de.sub(de.elementwise("affine", de.tsum(ell), a=float(total_n) / nb), kl)


def svgp_collapsed_bound(state: SvgpState, X, y):
    """Collapsed bound log N(y; 0, Q + s2 I) - tr(K - Q)/(2 s2), plus the
    optimal (m, S) that make the uncollapsed bound attain it."""
    X = as_tensor(X)
    y = as_tensor(y)
    n = X.value.shape[0]
    Z = as_tensor(state.Z)
    s2 = state.noise_var()
    Kzz = state.kern(Z)
    Lz = de.cholesky_factor(Kzz)
    Kzx = state.kern(Z, X)
    W = de.triangular_solve(Lz, Kzx)                 # Lz^{-1} Kzx
    Q = de.matmul(de.transpose(W), W)
    cov = de.add(Q, de.mul(s2, as_tensor(np.eye(n))))
    fit = rd.mvn_log_density(y, np.zeros(n), cov=cov)
    kdiag = de.diag_part(state.kern(X))
    trace_gap = de.sub(de.tsum(kdiag), de.tsum(de.diag_part(Q)))
    bound = de.sub(fit, de.div(trace_gap, de.elementwise("affine", s2, a=2.0)))

    # optimal q(u): m = Kzz B^{-1} Kzx y / s2, S = Kzz B^{-1} Kzz,
    # with B = Kzz + Kzx Kxz / s2
    B = de.add(Kzz, de.div(de.matmul(Kzx, de.transpose(Kzx)), s2))
    Lb = de.cholesky_factor(B)
    wk = de.triangular_solve(Lb, Kzz)                # Lb^{-1} Kzz
    rhs = de.div(de.matmul(Kzx, y), s2)
    wr = de.triangular_solve(Lb, rhs)
    m_opt = de.matmul(de.transpose(wk), wr)
    S_opt = de.matmul(de.transpose(wk), wk)
    return bound, m_opt, S_opt


def dkl_forward(state: DklState, X) -> DiffTensor:
    """Deterministic feature extractor: relu net applied to the inputs.

    The effective kernel is the GP kernel on these features; hyperparameter
    and weight gradients flow through when the LML is differentiated.
    """
    h = as_tensor(X)
    if h.value.ndim == 1:
        h = de.reshape(h, (h.value.shape[0], 1))
    n_layers = len(state.weights)
    for i, (Wl, bl) in enumerate(state.weights):
        Wl, bl = as_tensor(Wl), as_tensor(bl)
        if h.value.shape[1] != Wl.value.shape[0]:
            raise ValueError(
                f"extractor layer {i}: input dim {h.value.shape[1]} != {Wl.value.shape[0]}")
        h = de.add(de.matmul(h, Wl), bl)
        if i < n_layers - 1:
            h = de.elementwise("relu", h)
    return h
