"""Bayesian neural networks and deep GPs with factorised, local-inducing
(DSVI), and global-inducing variational posteriors.

Layer parameters may be plain arrays or tracked DiffTensors; every function
composes diff_engine ops so gradients flow when a tape is active.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diff_engine as de
from . import rand_dist as rd
from .diff_engine import DiffTensor, as_tensor
from .kernels import KernelParams, add_layer_noise, se_ard_features

__all__ = [
    "PriorSpec", "GiBnnLayer", "FacBnnLayer", "GiDgpLayer", "DsviDgpLayer",
    "gi_bnn_layer_sample", "fac_bnn_layer_sample", "bnn_elbo",
    "scale_prior_terms", "gi_dgp_layer_sample", "dsvi_dgp_layer_sample",
    "bnn_as_dgp_gram",
]


@dataclass
class PriorSpec:
    """Weight prior p(w_col) = N(0, Sigma / fanin) with Sigma per variant:
    standard: Sigma = fanin * I (activations grow with depth);
    neal:     Sigma = I (1/fanin weight variance);
    scale:    Sigma = I / s, s ~ Gamma(2, 2), q(s) = Gamma(2+a_off, 2+b_off).
    """
    variant: str = "neal"
    alpha_off: object = 0.0
    beta_off: object = 0.0

    def __post_init__(self):
        if self.variant not in ("standard", "neal", "scale"):
            raise ValueError(f"unknown prior variant {self.variant!r}")


@dataclass
class GiBnnLayer:
    V: object                      # (M, width) pseudo-outputs
    log_lambda: object             # (M,) log of the diagonal precision
    prior: PriorSpec = field(default_factory=PriorSpec)
    width: int = 1
    bias: bool = True


@dataclass
class FacBnnLayer:
    mean_scaled: object            # (d, width); effective mean = mean_scaled * scale
    log_std: object                # (d, width)
    scale: float = 1.0
    prior: PriorSpec = field(default_factory=PriorSpec)
    width: int = 1
    bias: bool = True


@dataclass
class GiDgpLayer:
    V: object                      # (M, width)
    log_lambda: object             # (M,)
    kernel_params: KernelParams = field(default_factory=KernelParams)
    width: int = 1
    mean_function: str = "zero"    # "zero" | "identity"
    gram_input: bool = False       # kernel acts on a Gram matrix, not features


@dataclass
class DsviDgpLayer:
    Z: object                      # (M, d_in) local inducing inputs
    m: object                      # (M, width)
    S_chol: object                 # (width, M, M) per-output covariance roots
    kernel_params: KernelParams = field(default_factory=KernelParams)
    width: int = 1
    mean_function: str = "zero"


def _psi(F, first_layer: bool, bias: bool) -> DiffTensor:
    """Activation convention: inputs pass through untouched at layer 0,
    relu elsewhere; optional appended column of ones for the bias."""
    F = as_tensor(F)
    h = F if first_layer else de.elementwise("relu", F)
    if bias:
        ones = np.ones((h.value.shape[0], 1))
        h = de.concat([h, as_tensor(ones)], axis=1)
    return h


def _prior_precision_scalar(prior: PriorSpec, fanin: int, s=None):
    """nu * Sigma^{-1} as a scalar multiple of I (Sigma is isotropic)."""
    if prior.variant == "standard":
        return as_tensor(np.asarray(1.0))
    if prior.variant == "neal":
        return as_tensor(np.asarray(float(fanin)))
    if s is None:
        raise ValueError("scale prior requires a sampled s")
    return de.elementwise("affine", as_tensor(s), a=float(fanin))


def gi_bnn_layer_sample(psi_U, layer: GiBnnLayer, rng: rd.RngStream, s=None):
    """Sample the layer weights from the global-inducing conditional posterior.

    psi_U: (M, d) propagated, activated inducing features (bias included).
    Returns (W, logp_minus_logq, U_next) with U_next = psi_U @ W.
    Also returns the posterior (mean, cov) via the closure on attributes.
    """
    psi_U = as_tensor(psi_U)
    M, d = psi_U.value.shape
    V = as_tensor(layer.V)
    lam = de.elementwise("exp", as_tensor(layer.log_lambda))      # (M,)
    width = V.value.shape[1]
    fanin = d

    prior_prec = _prior_precision_scalar(layer.prior, fanin, s=s)
    lam_psi = de.mul(de.reshape(lam, (M, 1)), psi_U)              # Lambda psi
    prec = de.add(de.mul(prior_prec, as_tensor(np.eye(d))),
                  de.matmul(de.transpose(psi_U), lam_psi))
    Lp = de.cholesky_factor(prec)
    eye = as_tensor(np.eye(d))
    w_inv = de.triangular_solve(Lp, eye)
    S = de.matmul(de.transpose(w_inv), w_inv)                     # (d, d)
    Ls = de.cholesky_factor(S)
    Mean = de.matmul(S, de.matmul(de.transpose(lam_psi), V))      # (d, width)
    layer.posterior_mean = np.asarray(Mean.value)
    layer.posterior_cov = np.asarray(S.value)

    xi = as_tensor(rng.normal((d, width)))
    W = de.add(Mean, de.matmul(Ls, xi))

    # log p(W): independent N(0, (nu Sigma^{-1})^{-1} I) per entry
    prior_var = de.elementwise("reciprocal", prior_prec)
    logp = de.tsum(rd.normal_log_density(W, as_tensor(np.zeros((d, width))), prior_var))
    # log q(W): per-column N(mean_col, S)
    diff = de.sub(W, Mean)
    wq = de.triangular_solve(Ls, diff)
    ld = de.tsum(de.elementwise("log", de.diag_part(Ls)))
    logq = de.elementwise(
        "affine",
        de.add(de.tsum(de.elementwise("square", wq)),
               de.elementwise("affine", ld, a=2.0 * width, b=d * width * rd.LOG2PI)),
        a=-0.5)
    U_next = de.matmul(psi_U, W)
    return W, de.sub(logp, logq), U_next


def fac_bnn_layer_sample(layer: FacBnnLayer, d: int, rng: rd.RngStream, s=None):
    """Sample weights from the mean-field posterior; returns (W, logp - logq)."""
    mean = de.elementwise("affine", as_tensor(layer.mean_scaled), a=float(layer.scale))
    std = de.elementwise("exp", as_tensor(layer.log_std))
    if mean.value.shape[0] != d:
        raise ValueError("factorised layer fan-in mismatch")
    xi = as_tensor(rng.normal(mean.value.shape))
    W = de.add(mean, de.mul(std, xi))
    prior_prec = _prior_precision_scalar(layer.prior, d, s=s)
    prior_var = de.elementwise("reciprocal", prior_prec)
    logp = de.tsum(rd.normal_log_density(W, as_tensor(np.zeros_like(mean.value)), prior_var))
    logq = de.tsum(rd.normal_log_density(W, mean, de.elementwise("square", std)))
    return W, de.sub(logp, logq)


def scale_prior_terms(prior: PriorSpec, rng: rd.RngStream):
    """Sample the prior-scale s reparameterized from q(s) and return
    (s, KL(q(s) || Gamma(2, 2))). Non-scale variants return (1, 0)."""
    if prior.variant != "scale":
        return as_tensor(np.asarray(1.0)), as_tensor(np.asarray(0.0))
    a_off = as_tensor(prior.alpha_off)
    b_off = as_tensor(prior.beta_off)
    if np.any(a_off.value < 0) or np.any(b_off.value < 0):
        raise ValueError("scale prior offsets must be non-negative")
    aq = de.elementwise("affine", a_off, b=2.0)
    bq = de.elementwise("affine", b_off, b=2.0)
    s = rd.gamma_sample_reparam(aq, bq, rng)
    kl = rd.kl_divergences("gamma-gamma", (aq, bq),
                           (np.asarray(2.0), np.asarray(2.0)))
    return s, kl


def bnn_elbo(layers, Xb, yb, total_n, n_samples, rng: rd.RngStream,
             inducing_inputs=None, log_noise=0.0, kl_scale=1.0):
    """Monte-Carlo ELBO for a BNN with a Gaussian likelihood.

    Global-inducing layers propagate the learned inducing inputs alongside the
    batch; factorised layers only need the batch. The returned value is
    (N/Nb) * mean log-likelihood + kl_scale * (sum of logp - logq terms).
    """
    Xb = as_tensor(Xb)
    yb = as_tensor(yb)
    nb = Xb.value.shape[0]
    s2 = de.elementwise("exp", as_tensor(log_noise))
    streams = rng.split(max(n_samples, 1))
    total = None
    for k in range(n_samples):
        st = streams[k]
        F = Xb
        U = as_tensor(inducing_inputs) if inducing_inputs is not None else None
        inc_sum = as_tensor(np.asarray(0.0))
        for i, layer in enumerate(layers):
            s, kl_s = scale_prior_terms(layer.prior, st)
            psi_F = _psi(F, i == 0, layer.bias)
            if isinstance(layer, GiBnnLayer):
                if U is None:
                    raise ValueError("global-inducing layers need inducing inputs")
                psi_U = _psi(U, i == 0, layer.bias)
                W, inc, U = gi_bnn_layer_sample(psi_U, layer, st, s=s)
            else:
                W, inc = fac_bnn_layer_sample(layer, psi_F.value.shape[1], st, s=s)
            F = de.matmul(psi_F, W)
            inc_sum = de.add(inc_sum, de.sub(inc, kl_s))
        out = de.reshape(F, (nb,)) if F.value.ndim == 2 and F.value.shape[1] == 1 else F
        ll = de.tsum(rd.normal_log_density(yb, out, s2))
        term = de.add(de.elementwise("affine", ll, a=float(total_n) / nb),
                      de.elementwise("affine", inc_sum, a=float(kl_scale)))
        total = term if total is None else de.add(total, term)
    return de.elementwise("affine", total, a=1.0 / n_samples)


def _dgp_kernels(layer, U_prev, F_prev):
    """K_uu, K_fu, and the diagonal of K_ff for a feature-space layer."""
    kp = layer.kernel_params
    K_uu = se_ard_features(kp, U_prev)
    K_fu = se_ard_features(kp, F_prev, U_prev)
    kdiag = de.diag_part(se_ard_features(kp, F_prev))
    if kp.log_noise is not None:
        nv = kp.noise_var()
        K_uu = add_layer_noise(K_uu, nv)
        kdiag = de.add(kdiag, nv)
    return K_uu, K_fu, kdiag


def gi_dgp_layer_sample(F_prev, U_prev, layer: GiDgpLayer, rng: rd.RngStream,
                        kernel_blocks=None):
    """Global-inducing DGP layer (function-space analogue of the BNN layer).

    Samples inducing outputs from q(U | U_prev) with per-output covariance
    S = (K_uu^{-1} + Lambda)^{-1} and mean S Lambda v, then samples the batch
    outputs from the prior conditional p(F | U, F_prev, U_prev) per point.
    kernel_blocks optionally supplies precomputed (K_uu, K_fu, kdiag) — used
    by the Gram-layer models where the kernel is a function of Gram matrices.
    Returns (U_next, F_next, logp - logq).
    """
    if kernel_blocks is not None:
        K_uu, K_fu, kdiag = kernel_blocks
    else:
        K_uu, K_fu, kdiag = _dgp_kernels(layer, as_tensor(U_prev), as_tensor(F_prev))
    K_uu = as_tensor(K_uu)
    M = K_uu.value.shape[0]
    V = as_tensor(layer.V)
    width = V.value.shape[1]
    lam = de.elementwise("exp", as_tensor(layer.log_lambda))

    L = de.cholesky_factor(K_uu)
    # S = L (I + L^T Lambda L)^{-1} L^T  (stable for large/small Lambda)
    LtLam = de.mul(de.transpose(L), de.reshape(lam, (1, M)))     # L^T Lambda
    inner = de.add(as_tensor(np.eye(M)), de.matmul(LtLam, L))
    Li = de.cholesky_factor(inner)
    w = de.triangular_solve(Li, de.transpose(L))                 # Li^{-1} L^T
    S = de.matmul(de.transpose(w), w)
    Ls = de.cholesky_factor(S)
    Mean = de.matmul(S, de.mul(de.reshape(lam, (M, 1)), V))

    xi = as_tensor(rng.normal((M, width)))
    U_noise = de.matmul(Ls, xi)
    U = de.add(Mean, U_noise)

    # increment: sum_cols log N(u; 0, K_uu) - log N(u; Mean, S)
    logp = as_tensor(np.asarray(0.0))
    logq = as_tensor(np.asarray(0.0))
    ld_p = de.elementwise("affine", de.tsum(de.elementwise("log", de.diag_part(L))), a=2.0)
    ld_q = de.elementwise("affine", de.tsum(de.elementwise("log", de.diag_part(Ls))), a=2.0)
    wp = de.triangular_solve(L, U)
    wq = de.triangular_solve(Ls, U_noise)
    logp = de.elementwise("affine",
                          de.add(de.tsum(de.elementwise("square", wp)),
                                 de.elementwise("affine", ld_p, a=float(width),
                                                b=M * width * rd.LOG2PI)), a=-0.5)
    logq = de.elementwise("affine",
                          de.add(de.tsum(de.elementwise("square", wq)),
                                 de.elementwise("affine", ld_q, a=float(width),
                                                b=M * width * rd.LOG2PI)), a=-0.5)
    inc = de.sub(logp, logq)

    # batch outputs from the prior conditional, independent per point
    F_next = None
    if K_fu is not None:
        K_fu = as_tensor(K_fu)
        kdiag = as_tensor(kdiag)
        wk = de.triangular_solve(L, de.transpose(K_fu))          # L^{-1} K_uf
        wu = de.triangular_solve(L, U)
        mean_f = de.matmul(de.transpose(wk), wu)
        var_f = de.sub(kdiag, de.tsum(de.elementwise("square", wk), axis=0))
        var_f = de.mul(var_f, as_tensor((var_f.value > 0).astype(np.float64)))
        nb = K_fu.value.shape[0]
        xi_f = as_tensor(rng.normal((nb, width)))
        std_f = de.elementwise("sqrt", de.add(var_f, as_tensor(np.full(nb, 1e-12))))
        F_next = de.add(mean_f, de.mul(de.reshape(std_f, (nb, 1)), xi_f))

    if layer.mean_function == "identity":
        U = de.add(U, as_tensor(U_prev))
        if F_next is not None:
            F_next = de.add(F_next, as_tensor(F_prev))
    return U, F_next, inc


def dsvi_dgp_layer_marginals(F_prev, layer: DsviDgpLayer):
    """Per-point marginal q(f) moments after analytically integrating out the
    local inducing outputs. Returns (means, vars, KL): means/vars are lists of
    per-output (nb,) tensors, KL is summed over outputs."""
    F_prev = as_tensor(F_prev)
    Z = as_tensor(layer.Z)
    kp = layer.kernel_params
    M = Z.value.shape[0]
    width = layer.width
    K_zz = se_ard_features(kp, Z)
    if kp.log_noise is not None:
        K_zz = add_layer_noise(K_zz, kp.noise_var())
    L = de.cholesky_factor(K_zz)
    K_fz = se_ard_features(kp, F_prev, Z)
    kdiag = de.diag_part(se_ard_features(kp, F_prev))
    if kp.log_noise is not None:
        kdiag = de.add(kdiag, kp.noise_var())
    W = de.triangular_solve(L, de.transpose(K_fz))               # L^{-1} K_zf
    wm = de.triangular_solve(L, as_tensor(layer.m))              # (M, width)
    mean = de.matmul(de.transpose(W), wm)
    base_var = de.sub(kdiag, de.tsum(de.elementwise("square", W), axis=0))
    U_sol = de.triangular_solve(L, W, trans=True)                # K_zz^{-1} K_zf

    m_all = as_tensor(layer.m)
    kl_total = as_tensor(np.asarray(0.0))
    means, vars_ = [], []
    for lam in range(width):
        Sc = de.getitem(as_tensor(layer.S_chol), lam)            # (M, M)
        C = de.matmul(de.transpose(Sc), U_sol)
        var_l = de.add(base_var, de.tsum(de.elementwise("square", C), axis=0))
        means.append(de.getitem(mean, (slice(None), lam)))
        vars_.append(var_l)
        Sq = de.matmul(Sc, de.transpose(Sc))
        kl_total = de.add(kl_total, rd.kl_divergences(
            "gaussian-full", (de.getitem(m_all, (slice(None), lam)), Sq),
            (np.zeros(M), K_zz)))
    return means, vars_, kl_total


def dsvi_dgp_layer_sample(F_prev, layer: DsviDgpLayer, rng: rd.RngStream):
    """Doubly-stochastic DGP layer: sample the per-point marginals; returns
    (F_next, KL) with KL summed over the layer's outputs."""
    F_prev = as_tensor(F_prev)
    nb = F_prev.value.shape[0]
    means, vars_, kl_total = dsvi_dgp_layer_marginals(F_prev, layer)
    cols = []
    streams = rng.split(layer.width)
    for lam, (mean_l, var_l) in enumerate(zip(means, vars_)):
        var_l = de.add(de.mul(var_l, as_tensor((var_l.value > 0).astype(np.float64))),
                       as_tensor(np.full(nb, 1e-12)))
        xi = as_tensor(streams[lam].normal(nb))
        cols.append(de.reshape(de.add(mean_l, de.mul(de.elementwise("sqrt", var_l), xi)),
                               (nb, 1)))
    F_next = de.concat(cols, axis=1)
    if layer.mean_function == "identity":
        F_next = de.add(F_next, F_prev)
    return F_next, kl_total


def bnn_as_dgp_gram(prior: PriorSpec, F_prev, fanin=None, activation="relu",
                    s=1.0) -> DiffTensor:
    """Conditional Gram matrix of one BNN layer's activations:
    K_f = psi(F) Sigma psi(F)^T / fanin, the degenerate kernel that makes a
    BNN a DGP with this kernel."""
    F_prev = as_tensor(F_prev)
    psi = F_prev if activation == "identity" else de.elementwise("relu", F_prev)
    d = psi.value.shape[1]
    nu = float(fanin if fanin is not None else d)
    if prior.variant == "standard":
        sigma_scalar = nu
    elif prior.variant == "neal":
        sigma_scalar = 1.0
    else:
        sigma_scalar = 1.0 / float(as_tensor(s).value)
    return de.elementwise("affine", de.matmul(psi, de.transpose(psi)),
                          a=sigma_scalar / nu)
