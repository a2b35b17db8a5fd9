"""Covariance functions on features and on Gram matrices."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diff_engine as de
from .diff_engine import DiffTensor, as_tensor

__all__ = ["KernelParams", "se_ard_features", "se_from_gram", "add_layer_noise"]


@dataclass
class KernelParams:
    """Squared-exponential kernel hyperparameters, stored in log space.

    log_lengthscales is a length-D vector for ARD or a scalar for a single
    shared lengthscale; log_noise is an optional per-layer noise variance
    parameter (log sigma_l^2).
    """
    log_sf2: object = 0.0                      # log signal variance
    log_lengthscales: object = 0.0             # scalar or (D,)
    log_noise: object = None                   # log sigma_l^2, optional

    def sf2(self) -> DiffTensor:
        return de.elementwise("exp", as_tensor(self.log_sf2))

    def lengthscales(self) -> DiffTensor:
        return de.elementwise("exp", as_tensor(self.log_lengthscales))

    def noise_var(self) -> DiffTensor:
        if self.log_noise is None:
            raise ValueError("kernel has no noise parameter")
        return de.elementwise("exp", as_tensor(self.log_noise))


def _sqdist(Xs, Xs2) -> DiffTensor:
    n1 = de.tsum(de.elementwise("square", Xs), axis=1, keepdims=True)     # N x 1
    n2 = de.tsum(de.elementwise("square", Xs2), axis=1, keepdims=True)    # N' x 1
    cross = de.matmul(Xs, de.transpose(Xs2))
    d2 = de.add(de.sub(n1, de.elementwise("affine", cross, a=2.0)), de.transpose(n2))
    v = d2.value
    if np.any(v < -1e-10):
        raise ValueError("squared distance negative beyond tolerance")
    return de.mul(d2, as_tensor((v >= 0).astype(np.float64)))  # clamp tiny negatives


def se_ard_features(params: KernelParams, X, X2=None) -> DiffTensor:
    """sf2 * exp(-0.5 sum_d (x_d - x'_d)^2 / l_d^2); N x N' kernel matrix."""
    X = as_tensor(X)
    X2 = X if X2 is None else as_tensor(X2)
    if X.value.shape[1] != X2.value.shape[1]:
        raise ValueError("feature dimension mismatch")
    ls = params.lengthscales()
    if ls.value.ndim == 1 and ls.value.shape[0] not in (1, X.value.shape[1]):
        raise ValueError("lengthscale count does not match feature dimension")
    Xs = de.div(X, ls)
    Xs2 = de.div(X2, ls)
    d2 = _sqdist(Xs, Xs2)
    return de.mul(params.sf2(), de.elementwise("exp", de.elementwise("affine", d2, a=-0.5)))


def se_from_gram(params: KernelParams, G, nu) -> DiffTensor:
    """SE kernel evaluated from a normalized Gram matrix G = F F^T / nu.

    d2_ij = nu * (G_ii - 2 G_ij + G_jj); single shared lengthscale only, since
    there are no explicit feature coordinates to weight separately.
    """
    G = as_tensor(G)
    diag = de.reshape(de.diag_part(G), (G.value.shape[0], 1))
    d2 = de.elementwise(
        "affine",
        de.add(de.sub(diag, de.elementwise("affine", G, a=2.0)), de.transpose(diag)),
        a=float(nu))
    v = d2.value
    if np.any(v < -1e-10):
        raise ValueError("squared distance negative beyond tolerance")
    d2 = de.mul(d2, as_tensor((v >= 0).astype(np.float64)))
    ls = params.lengthscales()
    if ls.value.ndim and ls.value.size > 1:
        raise ValueError("se_from_gram requires a single shared lengthscale")
    l2 = de.elementwise("square", ls)
    return de.mul(params.sf2(),
                  de.elementwise("exp", de.elementwise("affine", de.div(d2, l2), a=-0.5)))


def add_layer_noise(K, noise_var) -> DiffTensor:
    """K + noise_var * I."""
    K = as_tensor(K)
    n = K.value.shape[0]
    if K.value.shape[0] != K.value.shape[1]:
        raise ValueError("add_layer_noise requires a square matrix")
    nv = as_tensor(noise_var)
    return de.add(K, de.mul(nv, as_tensor(np.eye(n))))
