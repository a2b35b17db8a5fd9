"""Deep Wishart process: prior over Gram matrices, generalized-Wishart
approximate posterior, inducing-point ELBO, and the inducing-extension
consistency algebra."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diff_engine as de
from . import rand_dist as rd
from .diff_engine import DiffTensor, as_tensor
from .kernels import KernelParams, se_from_gram

__all__ = [
    "GWishLayerPosterior", "DwpState", "gram_kernel_blocks",
    "dwp_prior_layer", "dwp_posterior_layer", "dwp_conditional_testpoints",
    "dwp_elbo_batch", "wishart_inducing_extension",
]


@dataclass
class GWishLayerPosterior:
    """Approximate posterior q(G | G_prev) = gWish(G; mixed scale, nu, ...).

    Mixed scale: (1-q) K(G_prev)/nu + q V V^T, q in (0,1) stored as a logit.
    alpha/beta generalize the Bartlett chi-squared diagonals, mu/sigma the
    sub-diagonal Gaussians. Variants: base; A (extra invertible mixing of the
    rows, LU-packed); AB (additionally a lower-triangular column mixing).
    """
    V: object                      # (M, M)
    logit_q: object                # scalar
    nu: int = 1
    log_alpha: object = None       # (ntilde,)
    log_beta: object = None        # (ntilde,)
    mu: object = None              # (M, ntilde), strictly-below-diagonal used
    log_sigma: object = None       # (M, ntilde)
    variant: str = "base"          # base | A | AB
    A_packed: object = None        # (M, M) LU-packed
    B_packed: object = None        # (ntilde, ntilde): log-diag, raw sub-diag

    def __post_init__(self):
        if self.variant not in ("base", "A", "AB"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class DwpState:
    inducing_inputs: object        # (M, nu0)
    layers: list                   # GWishLayerPosterior per Gram layer
    kernel_params: list            # KernelParams per Gram layer
    final_layer: object            # deep_models.GiDgpLayer over the last Gram
    final_kernel: KernelParams = field(default_factory=KernelParams)
    log_noise: object = 0.0
    nu0: int = 1


def standard_bartlett_params(M: int, nu: int):
    """alpha, beta, mu, sigma at which the generalized density reduces to the
    standard (singular) Wishart: T_jj^2 ~ Gamma((nu-j+1)/2, 1/2), T_ij ~ N(0,1)."""
    ntilde = min(M, nu)
    j = np.arange(1, ntilde + 1)
    alpha = 0.5 * (nu - j + 1.0)
    beta = np.full(ntilde, 0.5)
    mu = np.zeros((M, ntilde))
    sigma = np.ones((M, ntilde))
    return alpha, beta, mu, sigma


def _unpack_B(B_packed) -> DiffTensor:
    """Lower-triangular B with structurally positive diagonal."""
    B_packed = as_tensor(B_packed)
    n = B_packed.value.shape[0]
    low = de.mul(B_packed, as_tensor(np.tril(np.ones((n, n)), k=-1)))
    diag = de.diag_embed(de.elementwise("exp", de.diag_part(B_packed)))
    return de.add(low, diag)


def gram_kernel_blocks(kp: KernelParams, G_ii, G_ti, g_tt, nu):
    """SE kernel blocks from Gram blocks: only needs the squared-distance
    identity d2_ij = nu (G_ii - 2 G_ij + G_jj), so the test-test off-diagonal
    Gram entries are never required.

    Returns (K_ii, K_ti, k_tt_diag)."""
    K_ii = se_from_gram(kp, G_ii, nu)
    sf2 = kp.sf2()
    ls = kp.lengthscales()
    l2 = de.elementwise("square", ls)
    gi_diag = de.reshape(de.diag_part(as_tensor(G_ii)), (1, -1))
    g_tt = as_tensor(g_tt)
    nt = g_tt.value.shape[0]
    d2 = de.elementwise(
        "affine",
        de.add(de.sub(de.reshape(g_tt, (nt, 1)),
                      de.elementwise("affine", as_tensor(G_ti), a=2.0)), gi_diag),
        a=float(nu))
    d2 = de.mul(d2, as_tensor((d2.value >= 0).astype(np.float64)))
    K_ti = de.mul(sf2, de.elementwise("exp", de.elementwise("affine", de.div(d2, l2), a=-0.5)))
    k_tt = de.mul(sf2, as_tensor(np.ones(nt)))
    if kp.log_noise is not None:
        nv = kp.noise_var()
        K_ii = de.add(K_ii, de.mul(nv, as_tensor(np.eye(K_ii.value.shape[0]))))
        k_tt = de.add(k_tt, nv)
    return K_ii, K_ti, k_tt


def dwp_prior_layer(G_prev, kp: KernelParams, nu: int, rng: rd.RngStream,
                    nu_prev=None):
    """One prior layer: G ~ Wishart(K(G_prev)/nu, nu), sampled via Bartlett.

    Returns (G, log_density, features) with features the sampled root."""
    K = se_from_gram(kp, G_prev, nu_prev if nu_prev is not None else nu)
    N = K.value.shape[0]
    scale = de.elementwise("affine", K, a=1.0 / float(nu))
    L = de.cholesky_factor(scale)
    bf = rd.bartlett_sample(N, nu, rng)
    feat = de.matmul(L, as_tensor(bf.T))
    G = de.matmul(feat, de.transpose(feat))
    logp = rd.wishart_log_density(G, scale, nu)
    return G, logp, feat


def dwp_posterior_layer(G_ii_prev, layer: GWishLayerPosterior, kp: KernelParams,
                        rng: rd.RngStream, nu_prev=None, stl=False):
    """One posterior layer on the inducing block.

    Samples G_ii from the generalized Wishart over the mixed scale
    (1-q) K(G_ii_prev)/nu + q V V^T and returns (G_ii, features, increment)
    with increment = log p(G_ii | G_ii_prev) - log q(G_ii | G_ii_prev) and
    features the retained generalized-Bartlett root (F F^T = G_ii).
    """
    nu = int(layer.nu)
    K = se_from_gram(kp, G_ii_prev, nu_prev if nu_prev is not None else nu)
    if kp.log_noise is not None:
        K = de.add(K, de.mul(kp.noise_var(), as_tensor(np.eye(K.value.shape[0]))))
    M = K.value.shape[0]
    q = de.elementwise("sigmoid", as_tensor(layer.logit_q))
    V = as_tensor(layer.V)
    prior_scale = de.elementwise("affine", K, a=1.0 / float(nu))
    mixed = de.add(de.mul(de.elementwise("affine", q, a=-1.0, b=1.0), prior_scale),
                   de.mul(q, de.matmul(V, de.transpose(V))))
    Lmix = de.cholesky_factor(mixed)

    alpha = de.elementwise("exp", as_tensor(layer.log_alpha))
    beta = de.elementwise("exp", as_tensor(layer.log_beta))
    sigma = de.elementwise("exp", as_tensor(layer.log_sigma))
    A_packed = layer.A_packed if layer.variant in ("A", "AB") else None
    B = _unpack_B(layer.B_packed) if layer.variant == "AB" else None
    G, logq, feat = rd.gwish_sample_and_logpdf(
        Lmix, nu, alpha, beta, as_tensor(layer.mu), sigma, rng,
        A_packed=A_packed, B=B, detach_density_params=stl)
    logp = rd.wishart_log_density(G, prior_scale, nu)
    return G, feat, de.sub(logp, logq)


def dwp_conditional_testpoints(feat_i, S_ii, S_ti, s_tt, nu: int,
                               rng: rd.RngStream):
    """Sample imagined test-point features from the prior conditional and
    assemble the Gram cross blocks.

    feat_i: (M, ntilde) root of the inducing Gram (padded to M x nu if needed);
    S_ii, S_ti, s_tt: prior scale blocks (K/nu); per-point conditional
    F_t = S_ti S_ii^{-1} F_i + sqrt(s_tt - s_ti S_ii^{-1} s_it) xi.
    Returns (G_ti, g_tt)."""
    feat_i = as_tensor(feat_i)
    M = feat_i.value.shape[0]
    if feat_i.value.shape[1] < nu:
        pad = np.zeros((M, nu - feat_i.value.shape[1]))
        feat_i = de.concat([feat_i, as_tensor(pad)], axis=1)
    elif feat_i.value.shape[1] > nu:
        raise ValueError("feature root wider than the layer width")
    S_ti = as_tensor(S_ti)
    s_tt = as_tensor(s_tt)
    nt = S_ti.value.shape[0]
    L = de.cholesky_factor(S_ii)
    w_f = de.triangular_solve(L, feat_i)                  # L^{-1} F_i
    w_s = de.triangular_solve(L, de.transpose(S_ti))      # L^{-1} S_ti^T
    mean_t = de.matmul(de.transpose(w_s), w_f)            # (nt, nu)
    var_t = de.sub(s_tt, de.tsum(de.elementwise("square", w_s), axis=0))
    var_t = de.add(de.mul(var_t, as_tensor((var_t.value > 0).astype(np.float64))),
                   as_tensor(np.full(nt, 1e-12)))
    xi = as_tensor(rng.normal((nt, nu)))
    feat_t = de.add(mean_t, de.mul(de.reshape(de.elementwise("sqrt", var_t), (nt, 1)), xi))
    G_ti = de.matmul(feat_t, de.transpose(feat_i))
    g_tt = de.tsum(de.elementwise("square", feat_t), axis=1)
    return G_ti, g_tt


def dwp_elbo_batch(state: DwpState, Xt, y, total_n, rng: rd.RngStream,
                   n_samples=1, kl_scale=1.0, stl=False, return_predictions=False):
    """One minibatch ELBO for the deep Wishart process.

    Inducing and batch inputs are processed jointly: each Gram layer samples
    the inducing block from the approximate posterior (contributing
    log p - log q) and the batch rows from the prior conditional (no density
    terms: they cancel between prior and posterior). The final layer is a
    global-inducing GP over the last Gram matrix.
    """
    from .deep_models import gi_dgp_layer_sample

    Xi = as_tensor(state.inducing_inputs)
    Xt = as_tensor(Xt)
    y = as_tensor(y)
    nu0 = float(state.nu0)
    nb = Xt.value.shape[0]
    s2 = de.elementwise("exp", as_tensor(state.log_noise))

    streams = rng.split(max(n_samples, 1))
    total = None
    preds = []
    for k in range(n_samples):
        st = streams[k]
        G_ii = de.elementwise("affine", de.matmul(Xi, de.transpose(Xi)), a=1.0 / nu0)
        G_ti = de.elementwise("affine", de.matmul(Xt, de.transpose(Xi)), a=1.0 / nu0)
        g_tt = de.elementwise("affine", de.tsum(de.elementwise("square", Xt), axis=1),
                              a=1.0 / nu0)
        inc_sum = as_tensor(np.asarray(0.0))
        nu_prev = state.nu0
        for layer, kp in zip(state.layers, state.kernel_params):
            nu = int(layer.nu)
            sub = st.split(3)
            _, feat_i, inc = dwp_posterior_layer(G_ii, layer, kp, sub[0],
                                                 nu_prev=nu_prev, stl=stl)
            inc_sum = de.add(inc_sum, inc)
            K_ii, K_ti, k_tt = gram_kernel_blocks(kp, G_ii, G_ti, g_tt, nu_prev)
            S_ii = de.elementwise("affine", K_ii, a=1.0 / nu)
            S_ti = de.elementwise("affine", K_ti, a=1.0 / nu)
            s_tt = de.elementwise("affine", k_tt, a=1.0 / nu)
            G_ti, g_tt = dwp_conditional_testpoints(feat_i, S_ii, S_ti, s_tt,
                                                    nu, sub[1])
            G_ii = de.matmul(feat_i, de.transpose(feat_i))
            nu_prev = nu
            st = sub[2]

        K_ii, K_ti, k_tt = gram_kernel_blocks(state.final_kernel, G_ii, G_ti,
                                              g_tt, nu_prev)
        U, F, inc = gi_dgp_layer_sample(None, None, state.final_layer, st,
                                        kernel_blocks=(K_ii, K_ti, k_tt))
        inc_sum = de.add(inc_sum, inc)
        out = de.reshape(F, (nb,)) if F.value.shape[1] == 1 else F
        ll = de.tsum(rd.normal_log_density(y, out, s2))
        term = de.add(de.elementwise("affine", ll, a=float(total_n) / nb),
                      de.elementwise("affine", inc_sum, a=float(kl_scale)))
        total = term if total is None else de.add(total, term)
        preds.append(np.asarray(out.value))
    elbo = de.elementwise("affine", total, a=1.0 / n_samples)
    if return_predictions:
        return elbo, preds
    return elbo


def wishart_inducing_extension(Sigma_uu, sigma_us, sigma_ss, Psi_uu):
    """Extend a Wishart posterior scale Psi_uu on the inducing block to new
    points so the conditional beyond the inducing block is the prior's.

    x = Psi_uu Sigma_uu^{-1} sigma_us,
    a = sigma_ss - sigma_us^T Sigma_uu^{-1} (Sigma_uu - Psi_uu) Sigma_uu^{-1} sigma_us.

    Returns (x, a, certificate) where the certificate reports how closely the
    extended scale's conditional parameters match the prior conditional, plus
    the analogous inverse-Wishart residual (nonzero whenever Psi != Sigma,
    showing the same extension is impossible there).
    """
    Sigma_uu = np.asarray(as_tensor(Sigma_uu).value, dtype=np.float64)
    Psi_uu = np.asarray(as_tensor(Psi_uu).value, dtype=np.float64)
    sigma_us = np.asarray(as_tensor(sigma_us).value, dtype=np.float64).reshape(-1)
    sigma_ss = float(as_tensor(sigma_ss).value)

    sol = np.linalg.solve(Sigma_uu, sigma_us)       # Sigma^{-1} sigma
    x = Psi_uu @ sol
    a = sigma_ss - sigma_us @ sol + sol @ Psi_uu @ sol

    prior_schur = sigma_ss - sigma_us @ sol
    if a - x @ np.linalg.solve(Psi_uu, x) <= 0 and prior_schur > 0:
        raise ValueError("extension infeasible: Schur complement not positive")

    cond_weights_ext = np.linalg.solve(Psi_uu, x)   # Psi^{-1} x
    cert = {
        "weights_residual": float(np.max(np.abs(cond_weights_ext - sol))),
        "schur_residual": float(abs((a - x @ cond_weights_ext) - prior_schur)),
        "iw_residual": float(abs(prior_schur)
                             * np.linalg.norm(np.linalg.inv(Psi_uu)
                                              - np.linalg.inv(Sigma_uu))),
    }
    return x, a, cert
