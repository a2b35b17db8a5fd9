"""Samplers, log-densities, KL divergences, and change-of-variable Jacobians.

Everything is reparameterized: samples are differentiable functions of the
distribution parameters, and log-densities are built from diff_engine ops so
gradients flow through both the sample path and the density evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.special as spec

from . import diff_engine as de
from .diff_engine import DiffTensor, as_tensor, lift

__all__ = [
    "RngStream", "BartlettFactor", "MatrixNormalParams",
    "gaussian_sample", "matrix_normal_sample", "gamma_sample_reparam",
    "wishart_log_density", "inverse_wishart_log_density", "bartlett_sample",
    "jacobian_logdets", "gwish_sample_and_logpdf", "matrix_normal_conditional",
    "kl_divergences", "mvn_log_density", "normal_log_density", "lgamma",
    "lu_packed_matrix", "lu_packed_logdet",
]

LOG2PI = float(np.log(2.0 * np.pi))


class RngStream:
    """Splittable, reproducible random stream (counter-based Philox core).

    Every draw is addressable by (seed, spawn path, draw index); identical
    seeds give identical sequences.
    """

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
        else:
            self._ss = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.Philox(self._ss))

    def split(self, n: int) -> list["RngStream"]:
        return [RngStream(ss) for ss in self._ss.spawn(n)]

    def normal(self, shape=()):
        return self._gen.standard_normal(shape)

    def standard_gamma(self, alpha):
        return self._gen.standard_gamma(alpha)

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=()):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)


@dataclass
class BartlettFactor:
    """Lower-trapezoidal factor T (N x min(N, nu)) of a standard Wishart sample."""
    T: np.ndarray
    N: int
    nu: int

    @property
    def ntilde(self) -> int:
        return min(self.N, self.nu)


@dataclass
class MatrixNormalParams:
    mean: object            # DiffTensor or ndarray
    row_cov: object         # DiffTensor or ndarray
    col_cov_identity: bool = True


# -- Gaussian sampling --------------------------------------------------------

def gaussian_sample(mean, chol_cov, rng: RngStream) -> DiffTensor:
    """mean + L xi with xi ~ N(0, I); reparameterized in mean and L."""
    mean = as_tensor(mean)
    chol_cov = as_tensor(chol_cov)
    if chol_cov.value.shape[0] != mean.value.shape[0]:
        raise ValueError("gaussian_sample shape mismatch")
    xi = rng.normal(mean.value.shape)
    return de.add(mean, de.matmul(chol_cov, as_tensor(xi)) if xi.ndim == 2
                  else de.reshape(de.matmul(chol_cov, as_tensor(xi[:, None])), mean.value.shape))


def matrix_normal_sample(mean, row_chol, col_chol, rng: RngStream) -> DiffTensor:
    """M + Lr Xi Lc^T; col_chol=None means identity column covariance."""
    mean = as_tensor(mean)
    xi = as_tensor(rng.normal(mean.value.shape))
    out = de.matmul(as_tensor(row_chol), xi)
    if col_chol is not None:
        out = de.matmul(out, de.transpose(as_tensor(col_chol)))
    return de.add(mean, out)


# -- gamma with implicit reparameterization -----------------------------------

def gamma_sample_reparam(alpha, beta, rng: RngStream, score_fallback=False) -> DiffTensor:
    """Sample z ~ Gamma(shape=alpha, rate=beta), elementwise.

    Rate gradient is exact via z = g / beta. Shape gradient uses implicit
    reparameterization dz/da = -(dF/da) / p(z), with dF/da by central finite
    differences of the regularized incomplete gamma (step 1e-5).
    With score_fallback the sample is treated as constant in alpha
    (score-function handling is then the caller's responsibility).
    """
    alpha = as_tensor(alpha)
    beta = as_tensor(beta)
    av, bv = alpha.value, beta.value
    if np.any(av <= 0) or np.any(bv <= 0):
        raise ValueError("gamma parameters must be positive")
    g = rng.standard_gamma(np.broadcast_to(av, np.broadcast_shapes(av.shape, bv.shape)))
    z = g / bv

    h = 1e-5
    x = np.maximum(g, 1e-300)
    dF_da = (spec.gammainc(av + h, x) - spec.gammainc(np.maximum(av - h, 1e-12), x)) / (2 * h)
    logpdf = (av - 1.0) * np.log(x) - x - spec.gammaln(av)
    dg_da = -dF_da / np.exp(logpdf)

    parents = [(beta, lambda gr: de._unbroadcast(gr * (-z / bv), bv.shape))]
    if not score_fallback:
        parents.append((alpha, lambda gr: de._unbroadcast(gr * dg_da / bv, av.shape)))
    return lift(z, parents)


# -- scalar special functions as diff ops --------------------------------------

def lgamma(x) -> DiffTensor:
    x = as_tensor(x)
    return lift(spec.gammaln(x.value), [(x, lambda g: g * spec.digamma(x.value))])


def _multigammaln(a: float, d: int) -> float:
    return float(spec.multigammaln(a, d))


# -- Gaussian log densities ----------------------------------------------------

def normal_log_density(x, mean, var) -> DiffTensor:
    """Elementwise univariate normal log pdf; returns the elementwise tensor."""
    x, mean, var = as_tensor(x), as_tensor(mean), as_tensor(var)
    diff = de.sub(x, mean)
    quad = de.div(de.elementwise("square", diff), var)
    return de.elementwise("affine",
                          de.add(de.elementwise("log", var), quad),
                          a=-0.5, b=-0.5 * LOG2PI)


def mvn_log_density(y, mean, cov=None, chol=None) -> DiffTensor:
    """log N(y; mean, cov) for a vector y, via Cholesky."""
    y, mean = as_tensor(y), as_tensor(mean)
    L = chol if chol is not None else de.cholesky_factor(cov)
    L = as_tensor(L)
    n = y.value.shape[0]
    diff = de.sub(y, mean)
    w = de.triangular_solve(L, diff)
    quad = de.tsum(de.elementwise("square", w))
    logdet = de.elementwise("affine", de.tsum(de.elementwise("log", de.diag_part(L))), a=2.0)
    return de.elementwise("affine", de.add(quad, logdet), a=-0.5, b=-0.5 * n * LOG2PI)


# -- Wishart / inverse-Wishart densities ----------------------------------------

def _check_rank(G: np.ndarray, ntilde: int):
    sv = np.linalg.svd(G, compute_uv=False)
    rank = int(np.sum(sv > 1e-8 * sv[0])) if sv[0] > 0 else 0
    if rank != ntilde:
        raise ValueError(f"rank mismatch: expected rank {ntilde}, got {rank}")


def _trace_inv_product(chol_a, b) -> DiffTensor:
    """tr(A^{-1} B) given chol(A)=L: trace of L^{-1} B L^{-T}."""
    w = de.triangular_solve(chol_a, b)
    z = de.triangular_solve(chol_a, de.transpose(w))
    return de.tsum(de.diag_part(z))


def wishart_log_density(G, Sigma, nu) -> DiffTensor:
    """Log density of the (possibly singular) Wishart with PD scale Sigma.

    For nu < N the degrees of freedom must be an integer and G must have rank
    nu; for nu >= N any real nu is accepted.
    """
    G, Sigma = as_tensor(G), as_tensor(Sigma)
    N = G.value.shape[0]
    nu = float(nu)
    if nu < N and abs(nu - round(nu)) > 1e-12:
        raise ValueError("singular Wishart (nu < N) requires integer nu")
    ntilde = int(min(round(nu), N)) if nu < N else N
    _check_rank(G.value, ntilde)

    const = (0.5 * nu * (ntilde - N) * np.log(np.pi)
             - 0.5 * nu * N * np.log(2.0)
             - _multigammaln(0.5 * nu, ntilde))
    Ls = de.cholesky_factor(Sigma)
    log_det_sigma = de.elementwise(
        "affine", de.tsum(de.elementwise("log", de.diag_part(Ls))), a=2.0)
    block = G if ntilde == N else de.getitem(G, (slice(0, ntilde), slice(0, ntilde)))
    ld_block = de.logdet_psd(block)
    tr = _trace_inv_product(Ls, G)
    out = de.elementwise("affine", log_det_sigma, a=-0.5 * nu, b=const)
    out = de.add(out, de.elementwise("affine", ld_block, a=0.5 * (nu - N - 1)))
    out = de.add(out, de.elementwise("affine", tr, a=-0.5))
    if not np.isfinite(out.value):
        raise ValueError("wishart_log_density: non-finite result")
    return out


def inverse_wishart_log_density(G, Sigma, nu) -> DiffTensor:
    """Log density of the inverse Wishart; requires nu >= N and PD G, Sigma."""
    G, Sigma = as_tensor(G), as_tensor(Sigma)
    N = G.value.shape[0]
    nu = float(nu)
    if nu < N:
        raise ValueError("inverse Wishart requires nu >= N")
    const = -0.5 * nu * N * np.log(2.0) - _multigammaln(0.5 * nu, N)
    ld_sigma = de.logdet_psd(Sigma)
    Lg = de.cholesky_factor(G)
    ld_g = de.elementwise("affine", de.tsum(de.elementwise("log", de.diag_part(Lg))), a=2.0)
    tr = _trace_inv_product(Lg, Sigma)
    out = de.elementwise("affine", ld_sigma, a=0.5 * nu, b=const)
    out = de.add(out, de.elementwise("affine", ld_g, a=-0.5 * (nu + N + 1)))
    out = de.add(out, de.elementwise("affine", tr, a=-0.5))
    if not np.isfinite(out.value):
        raise ValueError("inverse_wishart_log_density: non-finite result")
    return out


# -- Bartlett ---------------------------------------------------------------

def bartlett_sample(N: int, nu, rng: RngStream) -> BartlettFactor:
    """Standard (singular) Bartlett factor: T T^T ~ Wishart(I_N, nu)."""
    nu_f = float(nu)
    if nu_f < N and abs(nu_f - round(nu_f)) > 1e-12:
        raise ValueError("singular Bartlett requires integer nu")
    ntilde = int(min(round(nu_f), N)) if nu_f < N else N
    T = np.zeros((N, ntilde))
    j = np.arange(1, ntilde + 1)
    T[j - 1, j - 1] = np.sqrt(2.0 * rng.standard_gamma(0.5 * (nu_f - j + 1.0)))
    rows, cols = np.tril_indices(N, k=-1)
    keep = cols < ntilde
    T[rows[keep], cols[keep]] = rng.normal(int(keep.sum()))
    return BartlettFactor(T=T, N=N, nu=nu)


# -- Appendix-style Jacobian log determinants ---------------------------------

def jacobian_logdets(variant: str, **kw) -> DiffTensor:
    """Log absolute Jacobian determinants for the matrix transforms used by
    the generalized Wishart densities.

    variants:
      llt:        Lambda (N x ntilde lower-trapezoidal) -> Lambda Lambda^T
      left_mul:   T -> L T, L lower-tri N x N           (kw: L, nu)
      right_mul:  T -> T B, B lower-tri ntilde x ntilde (kw: B, N, nu)
      congruence: C -> A C A^T, A invertible            (kw: A or log_abs_det_A,
                   C_block, D_block: the leading ntilde blocks; N, nu)
    """
    if variant == "llt":
        lam = as_tensor(kw["factor"])
        N = lam.value.shape[0]
        ntilde = lam.value.shape[1]
        if np.any(np.diag(lam.value[:ntilde, :ntilde]) == 0):
            raise ValueError("singular factor in llt Jacobian")
        d = de.diag_part(lam)
        w = np.asarray([N - i for i in range(ntilde)], dtype=np.float64) + 0.0
        # prod_i 2 * Lam_ii^{N-i+1}, i = 1..ntilde
        exps = np.arange(N, N - ntilde, -1, dtype=np.float64)
        logs = de.elementwise("log", d)
        return de.add(de.tsum(de.mul(logs, as_tensor(exps))),
                      as_tensor(np.asarray(ntilde * np.log(2.0))))
    if variant == "left_mul":
        L = as_tensor(kw["L"])
        nu = int(kw["nu"])
        N = L.value.shape[0]
        if np.any(np.diag(L.value) == 0):
            raise ValueError("singular factor in left_mul Jacobian")
        exps = np.minimum(np.arange(1, N + 1), nu).astype(np.float64)
        return de.tsum(de.mul(de.elementwise("log", de.diag_part(L)), as_tensor(exps)))
    if variant == "right_mul":
        B = as_tensor(kw["B"])
        N = int(kw["N"])
        ntilde = B.value.shape[0]
        if np.any(np.diag(B.value) == 0):
            raise ValueError("singular factor in right_mul Jacobian")
        exps = np.arange(N, N - ntilde, -1, dtype=np.float64)
        return de.tsum(de.mul(de.elementwise("log", de.diag_part(B)), as_tensor(exps)))
    if variant == "congruence":
        nu = float(kw["nu"])
        N = int(kw["N"])
        if "log_abs_det_A" in kw:
            lad = as_tensor(kw["log_abs_det_A"])
        else:
            A = np.asarray(as_tensor(kw["A"]).value)
            s, ld = np.linalg.slogdet(A)
            if s == 0:
                raise ValueError("singular A in congruence Jacobian")
            lad = as_tensor(np.asarray(ld))
        ld_c = de.logdet_psd(kw["C_block"])
        ld_d = de.logdet_psd(kw["D_block"])
        out = de.elementwise("affine", lad, a=nu)
        return de.add(out, de.elementwise("affine", de.sub(ld_c, ld_d), a=0.5 * (nu - N - 1)))
    raise ValueError(f"unknown Jacobian variant {variant!r}")


# -- LU-packed invertible matrices ---------------------------------------------

def lu_packed_matrix(P) -> DiffTensor:
    """A = (I + strict_lower(P)) @ upper(P): invertible by construction."""
    P = as_tensor(P)
    n = P.value.shape[0]
    low_mask = np.tril(np.ones((n, n)), k=-1)
    up_mask = np.triu(np.ones((n, n)))
    lower = de.add(de.mul(P, as_tensor(low_mask)), as_tensor(np.eye(n)))
    upper = de.mul(P, as_tensor(up_mask))
    return de.matmul(lower, upper)


def lu_packed_logdet(P) -> DiffTensor:
    """log |det A| for the LU-packed parameterization (sum of log |diag|)."""
    P = as_tensor(P)
    d = de.diag_part(P)
    if np.any(d.value == 0):
        raise ValueError("LU-packed matrix is singular (zero diagonal)")
    return de.tsum(de.elementwise("log", de.elementwise("square", d))) * 0.5


# -- generalized singular Wishart -----------------------------------------------

def gwish_sample_and_logpdf(chol_scale, nu: int, alpha, beta, mu, sigma,
                            rng: RngStream, A_packed=None, B=None,
                            detach_density_params=False):
    """Sample G from the (A/AB-)generalized singular Wishart and evaluate its
    log density at the sample.

    chol_scale: lower Cholesky L of the scale (N x N, DiffTensor or array)
    alpha, beta: length-ntilde positive vectors for the squared diagonal gammas
    mu, sigma: N x ntilde arrays; only strictly-below-diagonal entries used
    A_packed: optional LU-packed N x N matrix (A-variant)
    B: optional lower-triangular ntilde x ntilde, positive diagonal (AB-variant)
    detach_density_params: evaluate the density with the Bartlett parameters
    treated as constants (sticking-the-landing), keeping the sample path.

    Returns (G, log_density, feat) where feat is the retained root with
    feat feat^T = G (the imagined features of the inducing block).
    """
    L = as_tensor(chol_scale)
    N = L.value.shape[0]
    nu = int(nu)
    ntilde = min(N, nu)
    alpha, beta = as_tensor(alpha), as_tensor(beta)
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if np.any(alpha.value <= 0) or np.any(beta.value <= 0) or np.any(sigma.value <= 0):
        raise ValueError("alpha, beta, sigma must be positive")

    # sample the generalized Bartlett factor
    tsq = gamma_sample_reparam(alpha, beta, rng)           # length ntilde
    tdiag = de.elementwise("sqrt", tsq)
    xi = as_tensor(rng.normal((N, ntilde)))
    off = de.add(mu, de.mul(sigma, xi))
    below = np.zeros((N, ntilde))
    r, c = np.tril_indices(N, k=-1)
    keep = c < ntilde
    below[r[keep], c[keep]] = 1.0
    T = de.mul(off, as_tensor(below))
    diag_block = de.diag_embed(tdiag)
    if N > ntilde:
        diag_block = de.concat([diag_block, as_tensor(np.zeros((N - ntilde, ntilde)))], axis=0)
    T = de.add(T, diag_block)

    # assemble the root and the Gram sample
    feat = T
    if B is not None:
        B = as_tensor(B)
        if np.any(np.diag(B.value) <= 0):
            raise ValueError("B must have positive diagonal")
        feat = de.matmul(feat, B)
    if A_packed is not None:
        A = lu_packed_matrix(A_packed)
        feat = de.matmul(A, feat)
    feat = de.matmul(L, feat)
    G = de.matmul(feat, de.transpose(feat))

    # log density at the sample
    a_d, b_d, mu_d, sg_d = alpha, beta, mu, sigma
    if detach_density_params:
        a_d, b_d = de.stop_gradient(alpha), de.stop_gradient(beta)
        mu_d, sg_d = de.stop_gradient(mu), de.stop_gradient(sigma)

    ldiag = de.diag_part(L)
    if np.any(ldiag.value <= 0):
        raise ValueError("chol_scale must have positive diagonal")
    exps_all = np.minimum(np.arange(1, N + 1), nu).astype(np.float64)
    exps_top = np.arange(N, N - ntilde, -1, dtype=np.float64)  # N-j+1, j=1..ntilde
    log_ld = de.elementwise("log", ldiag)
    logq = de.neg(de.tsum(de.mul(log_ld, as_tensor(exps_all))))
    top = de.getitem(log_ld, slice(0, ntilde))
    logq = de.sub(logq, de.tsum(de.mul(top, as_tensor(exps_top))))

    # gamma terms on the squared diagonal
    gam = de.add(
        de.sub(de.mul(a_d, de.elementwise("log", b_d)), lgamma(a_d)),
        de.sub(de.mul(de.sub(a_d, as_tensor(np.ones(ntilde))), de.elementwise("log", tsq)),
               de.mul(b_d, tsq)))
    logq = de.add(logq, de.tsum(gam))
    logq = de.sub(logq, de.tsum(de.mul(de.elementwise("log", tdiag),
                                       as_tensor(exps_top - 1.0))))  # T_jj^{N-j}

    # Gaussian terms below the diagonal
    var = de.elementwise("square", sg_d)
    norm_terms = normal_log_density(de.mul(T, as_tensor(below)),
                                    de.mul(mu_d, as_tensor(below)), var)
    logq = de.add(logq, de.tsum(de.mul(norm_terms, as_tensor(below))))

    if B is not None:
        logq = de.sub(logq, de.tsum(de.mul(de.elementwise("log", de.diag_part(B)),
                                           as_tensor(2.0 * exps_top))))
    if A_packed is not None:
        # C = (T[B]) (T[B])^T; D = A C A^T; leading ntilde blocks
        TB = T if B is None else de.matmul(T, B)
        C = de.matmul(TB, de.transpose(TB))
        D = de.matmul(de.matmul(A, C), de.transpose(A))
        cb = de.getitem(C, (slice(0, ntilde), slice(0, ntilde)))
        db = de.getitem(D, (slice(0, ntilde), slice(0, ntilde)))
        lad = lu_packed_logdet(A_packed)
        nu_f = float(nu)
        logq = de.add(logq, de.elementwise(
            "affine", de.sub(de.logdet_psd(db), de.logdet_psd(cb)), a=0.5 * (nu_f - N - 1)))
        logq = de.sub(logq, de.elementwise("affine", lad, a=nu_f))

    if not np.isfinite(logq.value):
        raise ValueError("gwish log density non-finite")
    return G, logq, feat


# -- matrix normal conditioning --------------------------------------------------

def matrix_normal_conditional(S_ii, S_ti, S_tt, F_i) -> MatrixNormalParams:
    """Conditional of rows t given rows i of a matrix normal with row scale
    [[S_ii, S_ti^T], [S_ti, S_tt]] and identity column covariance.

    mean = S_ti S_ii^{-1} F_i; row_cov = S_tt - S_ti S_ii^{-1} S_ti^T.
    """
    S_ii, S_ti, S_tt, F_i = map(as_tensor, (S_ii, S_ti, S_tt, F_i))
    L = de.cholesky_factor(S_ii)
    w_f = de.triangular_solve(L, F_i)               # L^{-1} F_i
    w_s = de.triangular_solve(L, de.transpose(S_ti))  # L^{-1} S_ti^T
    mean = de.matmul(de.transpose(w_s), w_f)
    row_cov = de.sub(S_tt, de.matmul(de.transpose(w_s), w_s))
    return MatrixNormalParams(mean=mean, row_cov=row_cov, col_cov_identity=True)


# -- KL divergences ----------------------------------------------------------------

def kl_divergences(variant: str, q, p) -> DiffTensor:
    """Closed-form KL(q || p).

    gaussian-full:     q = (mean, cov), p = (mean, cov)
    gaussian-diagonal: q = (mean, var), p = (mean, var), elementwise vectors
    gamma-gamma:       q = (shape, rate), p = (shape, rate)
    """
    if variant == "gaussian-full":
        mq, Sq = map(as_tensor, q)
        mp_, Sp = map(as_tensor, p)
        k = mq.value.shape[0]
        Lp = de.cholesky_factor(Sp)
        tr = _trace_inv_product(Lp, Sq)
        diff = de.sub(mp_, mq)
        w = de.triangular_solve(Lp, diff)
        quad = de.tsum(de.elementwise("square", w))
        ld = de.sub(de.logdet_psd(Sp), de.logdet_psd(Sq))
        return de.elementwise("affine",
                              de.add(de.add(tr, quad), de.elementwise("affine", ld, b=-float(k))),
                              a=0.5)
    if variant == "gaussian-diagonal":
        mq, vq = map(as_tensor, q)
        mp_, vp = map(as_tensor, p)
        ratio = de.div(vq, vp)
        quad = de.div(de.elementwise("square", de.sub(mq, mp_)), vp)
        term = de.sub(de.add(ratio, quad),
                      de.add(de.elementwise("log", ratio), as_tensor(np.ones_like(vq.value))))
        return de.elementwise("affine", de.tsum(term), a=0.5)
    if variant == "gamma-gamma":
        aq, bq = map(as_tensor, q)
        ap, bp = map(as_tensor, p)
        if np.any(aq.value <= 0) or np.any(bq.value <= 0) or \
           np.any(ap.value <= 0) or np.any(bp.value <= 0):
            raise ValueError("gamma parameters must be positive")
        dig = lift(spec.digamma(aq.value), [(aq, lambda g: g * spec.polygamma(1, aq.value))])
        out = de.mul(de.sub(aq, ap), dig)
        out = de.add(out, de.sub(lgamma(ap), lgamma(aq)))
        out = de.add(out, de.mul(ap, de.sub(de.elementwise("log", bq),
                                            de.elementwise("log", bp))))
        out = de.add(out, de.mul(aq, de.div(de.sub(bp, bq), bq)))
        return de.tsum(out)
    raise ValueError(f"unknown KL variant {variant!r}")
