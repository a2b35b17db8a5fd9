"""Datasets, model wrappers, experiment orchestration, and the CLI."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import deep_models as dm
from . import diff_engine as de
from . import dwp as dwp_mod
from . import gp_models as gm
from . import rand_dist as rd
from .diff_engine import as_tensor
from .kernels import KernelParams
from .train import TrainConfig, train_loop

__all__ = ["Dataset", "ExperimentConfig", "ExperimentResult",
           "gen_cubic_toy", "gen_deep_linear", "load_csv", "run_experiment",
           "main"]


# -- datasets -----------------------------------------------------------------

@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    y_mean: float = 0.0
    y_std: float = 1.0
    extra: dict = field(default_factory=dict)

    def denormalize_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean


def _normalize(X_tr, y_tr, X_te, y_te):
    """Normalization constants come from the training split only."""
    xm = X_tr.mean(axis=0)
    xs = X_tr.std(axis=0)
    xs = np.where(xs == 0, 1.0, xs)
    ym = float(y_tr.mean())
    ys = float(y_tr.std()) or 1.0
    return Dataset(
        X_train=(X_tr - xm) / xs, y_train=(y_tr - ym) / ys,
        X_test=(X_te - xm) / xs, y_test=(y_te - ym) / ys,
        x_mean=xm, x_std=xs, y_mean=ym, y_std=ys)


def gen_cubic_toy(seed=0) -> Dataset:
    """40 points, x ~ Uniform([-4,-2] u [2,4]), y = x^3 + N(0, 3^2); inputs
    and targets normalized by their own statistics."""
    rng = np.random.default_rng(seed)
    sign = np.where(rng.uniform(size=40) < 0.5, -1.0, 1.0)
    x = sign * rng.uniform(2.0, 4.0, size=40)
    y = x ** 3 + rng.normal(0.0, 3.0, size=40)
    X = x[:, None]
    ds = _normalize(X, y, X.copy(), y.copy())
    ds.extra["raw_x"] = x
    ds.extra["raw_y"] = y
    return ds


def gen_deep_linear(seed=0) -> Dataset:
    """1000 train / 100 test points, 5 standard-normal inputs, targets from a
    linear model with weight prior N(0, I/5) and noise variance 0.1. The exact
    LML of the generating model is stored in extra['analytic_lml']."""
    rng = np.random.default_rng(seed)
    D, n_tr, n_te = 5, 1000, 100
    X = rng.standard_normal((n_tr + n_te, D))
    w = rng.normal(0.0, np.sqrt(1.0 / D), size=D)
    y = X @ w + rng.normal(0.0, np.sqrt(0.1), size=n_tr + n_te)
    X_tr, y_tr = X[:n_tr], y[:n_tr]
    X_te, y_te = X[n_tr:], y[n_tr:]
    cov = X_tr @ X_tr.T / D + 0.1 * np.eye(n_tr)
    L = np.linalg.cholesky(cov)
    half = np.linalg.solve(L, y_tr)
    lml = (-0.5 * n_tr * np.log(2 * np.pi) - np.sum(np.log(np.diag(L)))
           - 0.5 * half @ half)
    ds = Dataset(X_train=X_tr, y_train=y_tr, X_test=X_te, y_test=y_te,
                 x_mean=np.zeros(D), x_std=np.ones(D))
    ds.extra["analytic_lml"] = float(lml)
    return ds


def load_csv(path, seed=0, test_fraction=0.1) -> Dataset:
    """Comma-separated numeric file with a header row; last column is the
    target. 90/10 train/test split by seeded shuffle; normalization from the
    training rows only."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = lines[0].split(",")
    ncol = len(header)
    if ncol < 2:
        raise ValueError(f"{path}: need at least 2 columns, got {ncol}")
    rows = []
    for r, ln in enumerate(lines[1:], start=2):
        cells = ln.split(",")
        if len(cells) != ncol:
            raise ValueError(f"{path}: row {r} has {len(cells)} cells, expected {ncol}")
        vals = []
        for c, cell in enumerate(cells, start=1):
            try:
                vals.append(float(cell))
            except ValueError:
                raise ValueError(f"{path}: non-numeric cell at row {r}, column {c}: {cell!r}")
        rows.append(vals)
    data = np.asarray(rows, dtype=np.float64)
    n = data.shape[0]
    perm = np.random.default_rng(seed).permutation(n)
    n_te = max(1, int(round(n * test_fraction))) if n > 1 else 0
    te, tr = perm[:n_te], perm[n_te:]
    return _normalize(data[tr, :-1], data[tr, -1], data[te, :-1], data[te, -1])


# -- parameter helpers ----------------------------------------------------------

def _chol_from_raw(raw):
    """Lower-triangular matrix with structurally positive diagonal from an
    unconstrained square matrix (diagonal passed through exp)."""
    raw = as_tensor(raw)
    n = raw.value.shape[0]
    low = de.mul(raw, as_tensor(np.tril(np.ones((n, n)), k=-1)))
    diag = de.diag_embed(de.elementwise("exp", de.diag_part(raw)))
    return de.add(low, diag)


def _log_mean_exp(a, axis=0):
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.mean(np.exp(a - m), axis=axis))


# -- models -----------------------------------------------------------------------

class BlrViModel:
    """Full-covariance Gaussian VI over the weights of Gaussian-bump linear
    regression. The ELBO is closed form (no MC), so at convergence it equals
    the exact log marginal likelihood."""

    def __init__(self, dataset: Dataset, n_features=12, alpha=1.0, sigma=0.3):
        self.alpha = alpha
        self.sigma = sigma
        x = dataset.X_train[:, 0]
        self.centers, self.width = gm.make_bump_centers(x, n_features)
        self.k = n_features

    def _phi(self, X):
        return gm.gaussian_bump_features(np.ravel(np.asarray(as_tensor(X).value)),
                                         self.centers, self.width)

    def init_params(self):
        return {"mean": np.zeros(self.k),
                "chol_raw": np.eye(self.k) * np.log(self.alpha)}

    def objective(self, p, Xb, yb, total_n, n_samples, rng, kl_scale):
        phi = self._phi(Xb)
        nb = phi.value.shape[0]
        m = p["mean"]
        Lq = _chol_from_raw(p["chol_raw"])
        Sq = de.matmul(Lq, de.transpose(Lq))
        s2 = self.sigma ** 2
        pred = de.matmul(phi, m)
        quad_extra = de.tsum(de.mul(de.matmul(phi, Sq), phi), axis=1)
        ll = de.sub(de.tsum(rd.normal_log_density(as_tensor(yb), pred,
                                                  as_tensor(np.asarray(s2)))),
                    de.elementwise("affine", de.tsum(quad_extra), a=0.5 / s2))
        kl = rd.kl_divergences("gaussian-full", (m, Sq),
                               (np.zeros(self.k), self.alpha ** 2 * np.eye(self.k)))
        return de.sub(de.elementwise("affine", ll, a=float(total_n) / nb),
                      de.elementwise("affine", kl, a=float(kl_scale)))

    def exact_lml(self, dataset: Dataset) -> float:
        st = gm.BlrState(alpha=self.alpha, sigma=self.sigma,
                         centers=self.centers, width=self.width)
        _, _, _, lml = gm.blr_fit_predict_lml(st, dataset.X_train, dataset.y_train)
        return float(lml.value)

    def evaluate(self, params, dataset, rng, n_samples):
        p = {k: as_tensor(v) for k, v in params.items()}
        n = dataset.X_train.shape[0]
        elbo = self.objective(p, dataset.X_train, dataset.y_train, n, 1, rng, 1.0)
        phi = self._phi(dataset.X_test).value
        mean = phi @ params["mean"]
        Lq = _chol_from_raw(params["chol_raw"]).value
        var = np.sum((phi @ Lq) ** 2, axis=1) + self.sigma ** 2
        ll = -0.5 * np.log(2 * np.pi * var) - 0.5 * (dataset.y_test - mean) ** 2 / var
        rmse = float(np.sqrt(np.mean((dataset.y_test - mean) ** 2)))
        return {"elbo_per_point": float(elbo.value) / n,
                "test_ll_per_point": float(np.mean(ll)), "rmse": rmse}


class GpLmlModel:
    """Exact GP regression; 'training' is hyperparameter optimization of the
    log marginal likelihood. Optional deep-kernel feature extractor."""

    def __init__(self, dataset: Dataset, ard=True, dkl_widths=None, seed=0):
        self.D = dataset.X_train.shape[1]
        self.ard = ard
        self.dkl_widths = dkl_widths
        self.seed = seed

    def init_params(self):
        p = {"log_sf2": np.asarray(0.0),
             "log_ls": np.zeros(self.D if self.ard and not self.dkl_widths else 1),
             "log_noise": np.asarray(-2.0)}
        if self.dkl_widths:
            rng = np.random.default_rng(self.seed)
            dims = [self.D] + list(self.dkl_widths)
            for i in range(len(dims) - 1):
                p[f"W{i}"] = rng.standard_normal((dims[i], dims[i + 1])) / np.sqrt(dims[i])
                p[f"b{i}"] = np.zeros(dims[i + 1])
            p["log_ls"] = np.zeros(1)
        return p

    def _state_and_features(self, p, X):
        kp = KernelParams(log_sf2=p["log_sf2"], log_lengthscales=p["log_ls"])
        st = gm.GpState(kernel_params=kp, log_noise=p["log_noise"])
        if self.dkl_widths:
            n_l = len(self.dkl_widths)
            ws = [(p[f"W{i}"], p[f"b{i}"]) for i in range(n_l)]
            X = gm.dkl_forward(gm.DklState(weights=ws, gp=st), X)
        return st, X

    def objective(self, p, Xb, yb, total_n, n_samples, rng, kl_scale):
        st, feats = self._state_and_features(p, Xb)
        _, _, lml = gm.gp_predict_lml(st, feats, yb)
        return lml

    def evaluate(self, params, dataset, rng, n_samples):
        p = {k: as_tensor(v) for k, v in params.items()}
        st, feats = self._state_and_features(p, dataset.X_train)
        _, te_feats = self._state_and_features(p, dataset.X_test)
        mean, cov, lml = gm.gp_predict_lml(st, feats, dataset.y_train, te_feats)
        var = np.diag(cov.value) + float(np.exp(params["log_noise"]))
        resid = dataset.y_test - mean.value
        ll = -0.5 * np.log(2 * np.pi * var) - 0.5 * resid ** 2 / var
        n = dataset.X_train.shape[0]
        return {"elbo_per_point": float(lml.value) / n,
                "test_ll_per_point": float(np.mean(ll)),
                "rmse": float(np.sqrt(np.mean(resid ** 2)))}


class SvgpModel:
    def __init__(self, dataset: Dataset, M=20, seed=0):
        self.D = dataset.X_train.shape[1]
        self.M = min(M, dataset.X_train.shape[0])
        self.X0 = dataset.X_train[:self.M].copy()

    def init_params(self):
        return {"Z": self.X0.copy(), "m": np.zeros(self.M),
                "S_raw": np.eye(self.M) * -1.0,
                "log_sf2": np.asarray(0.0), "log_ls": np.zeros(self.D),
                "log_noise": np.asarray(-2.0)}

    def _state(self, p):
        kp = KernelParams(log_sf2=p["log_sf2"], log_lengthscales=p["log_ls"])
        return gm.SvgpState(Z=p["Z"], m=p["m"], S_chol=_chol_from_raw(p["S_raw"]),
                            kernel_params=kp, log_noise=p["log_noise"])

    def objective(self, p, Xb, yb, total_n, n_samples, rng, kl_scale):
        return gm.svgp_elbo(self._state(p), Xb, yb, total_n)

    def evaluate(self, params, dataset, rng, n_samples):
        p = {k: as_tensor(v) for k, v in params.items()}
        st = self._state(p)
        mean, var, _ = gm._svgp_marginals(st, dataset.X_test)
        s2 = float(np.exp(params["log_noise"]))
        v = var.value + s2
        resid = dataset.y_test - mean.value
        ll = -0.5 * np.log(2 * np.pi * v) - 0.5 * resid ** 2 / v
        n = dataset.X_train.shape[0]
        elbo = gm.svgp_elbo(st, dataset.X_train, dataset.y_train, n)
        return {"elbo_per_point": float(elbo.value) / n,
                "test_ll_per_point": float(np.mean(ll)),
                "rmse": float(np.sqrt(np.mean(resid ** 2)))}


class BnnModel:
    """BNN with Gaussian likelihood; posterior is 'gi' (global inducing) or
    'fac' (mean field). Hidden activations are relu; a bias column is
    appended at every layer."""

    def __init__(self, dataset: Dataset, posterior="gi", widths=(50, 50), M=40,
                 prior_variant="neal", seed=0):
        self.posterior = posterior
        self.widths = list(widths) + [1]
        self.D = dataset.X_train.shape[1]
        self.M = min(M, dataset.X_train.shape[0])
        self.X0 = dataset.X_train[:self.M].copy()
        self.y0 = dataset.y_train[:self.M].copy()
        self.prior_variant = prior_variant
        self.seed = seed

    def _fanins(self):
        dims = [self.D] + self.widths
        return [dims[i] + 1 for i in range(len(self.widths))]  # +1 for the bias

    def init_params(self):
        rng = np.random.default_rng(self.seed)
        p = {"log_noise_s": np.asarray(-0.3)}   # effective log noise = -3
        n_layers = len(self.widths)
        if self.posterior == "gi":
            p["U0"] = self.X0.copy()
            for i, w in enumerate(self.widths):
                last = i == n_layers - 1
                p[f"V{i}"] = (self.y0[:, None].copy() if last
                              else rng.standard_normal((self.M, w)))
                p[f"lam{i}"] = np.full(self.M, 0.0 if last else -4.0)
        else:
            for i, (w, fi) in enumerate(zip(self.widths, self._fanins())):
                p[f"mean{i}"] = rng.standard_normal((fi, w))
                p[f"lstd{i}"] = np.full((fi, w), 0.5 * np.log(1e-3 / np.sqrt(fi)))
        return p

    def _layers(self, p):
        layers = []
        prior = dm.PriorSpec(self.prior_variant)
        for i, w in enumerate(self.widths):
            if self.posterior == "gi":
                layers.append(dm.GiBnnLayer(V=p[f"V{i}"], log_lambda=p[f"lam{i}"],
                                            prior=prior, width=w))
            else:
                fi = self._fanins()[i]
                layers.append(dm.FacBnnLayer(mean_scaled=p[f"mean{i}"],
                                             log_std=p[f"lstd{i}"],
                                             scale=1.0 / np.sqrt(fi),
                                             prior=prior, width=w))
        return layers

    def objective(self, p, Xb, yb, total_n, n_samples, rng, kl_scale):
        log_noise = de.elementwise("affine", as_tensor(p["log_noise_s"]), a=10.0)
        return dm.bnn_elbo(self._layers(p), Xb, yb, total_n, n_samples, rng,
                           inducing_inputs=p.get("U0"), log_noise=log_noise,
                           kl_scale=kl_scale)

    def _sample_outputs(self, params, X, rng, n_samples):
        p = {k: as_tensor(v) for k, v in params.items()}
        layers = self._layers(p)
        outs = []
        for st in rng.split(n_samples):
            F = as_tensor(X)
            U = p.get("U0")
            for i, layer in enumerate(layers):
                s, _ = dm.scale_prior_terms(layer.prior, st)
                psi_F = dm._psi(F, i == 0, layer.bias)
                if isinstance(layer, dm.GiBnnLayer):
                    psi_U = dm._psi(U, i == 0, layer.bias)
                    W, _, U = dm.gi_bnn_layer_sample(psi_U, layer, st, s=s)
                else:
                    W, _ = dm.fac_bnn_layer_sample(layer, psi_F.value.shape[1], st, s=s)
                F = de.matmul(psi_F, W)
            outs.append(F.value[:, 0])
        return np.asarray(outs)

    def evaluate(self, params, dataset, rng, n_samples):
        n = dataset.X_train.shape[0]
        sub = rng.split(2)
        n_elbo = min(n_samples, 20)
        p = {k: as_tensor(v) for k, v in params.items()}
        elbo = self.objective(p, dataset.X_train, dataset.y_train, n,
                              n_elbo, sub[0], 1.0)
        preds = self._sample_outputs(params, dataset.X_test, sub[1], n_samples)
        s2 = float(np.exp(10.0 * params["log_noise_s"]))
        ll = (-0.5 * np.log(2 * np.pi * s2)
              - 0.5 * (dataset.y_test[None, :] - preds) ** 2 / s2)
        mean_pred = preds.mean(axis=0)
        return {"elbo_per_point": float(elbo.value) / n,
                "test_ll_per_point": float(np.mean(_log_mean_exp(ll, axis=0))),
                "rmse": float(np.sqrt(np.mean((dataset.y_test - mean_pred) ** 2)))}


class DgpModel:
    """Deep GP with 'gi' (global inducing) or 'dsvi' (local inducing)
    posterior; intermediate layers use identity mean functions when the
    widths allow it and the final layer is zero-mean."""

    def __init__(self, dataset: Dataset, posterior="gi", depth=2, M=20, seed=0):
        self.posterior = posterior
        self.D = dataset.X_train.shape[1]
        self.widths = [self.D] * (depth - 1) + [1]
        self.M = min(M, dataset.X_train.shape[0])
        self.X0 = dataset.X_train[:self.M].copy()
        self.y0 = dataset.y_train[:self.M].copy()
        self.seed = seed

    def init_params(self):
        rng = np.random.default_rng(self.seed)
        p = {"log_noise_s": np.asarray(-0.3), "Z0": self.X0.copy()}
        n_layers = len(self.widths)
        if self.posterior == "dsvi":
            rng2 = np.random.default_rng(self.seed + 1)
            for i in range(1, n_layers):
                p[f"Z{i}"] = rng2.standard_normal((self.M, self.widths[i - 1]))
        for i, w in enumerate(self.widths):
            last = i == n_layers - 1
            p[f"log_sf2_{i}"] = np.asarray(0.0)
            d_in = self.D if i == 0 else self.widths[i - 1]
            p[f"log_ls_{i}"] = np.zeros(d_in if i == 0 else 1)
            if self.posterior == "gi":
                p[f"V{i}"] = (self.y0[:, None].copy() if last
                              else rng.standard_normal((self.M, w)) * 0.1)
                p[f"lam{i}"] = np.full(self.M, 0.0 if last else -4.0)
            else:
                p[f"m{i}"] = np.zeros((self.M, w))
                # start q(u) at the prior: S = K_ZZ, so the KL starts at zero
                Z = p["Z0"] if i == 0 else p[f"Z{i}"]
                from .kernels import se_ard_features
                kp = KernelParams(log_sf2=p[f"log_sf2_{i}"],
                                  log_lengthscales=p[f"log_ls_{i}"])
                K = se_ard_features(kp, Z).value
                L = np.linalg.cholesky(K + 1e-6 * np.eye(self.M))
                raw = np.tril(L, k=-1) + np.diag(np.log(np.diag(L)))
                p[f"S_raw{i}"] = np.tile(raw[None], (w, 1, 1))
        return p

    def _kp(self, p, i):
        return KernelParams(log_sf2=p[f"log_sf2_{i}"],
                            log_lengthscales=p[f"log_ls_{i}"])

    def objective(self, p, Xb, yb, total_n, n_samples, rng, kl_scale):
        nb = np.asarray(as_tensor(Xb).value).shape[0]
        s2 = de.elementwise("exp",
                            de.elementwise("affine", as_tensor(p["log_noise_s"]), a=10.0))
        total = None
        n_layers = len(self.widths)
        for st in rng.split(n_samples):
            F = as_tensor(Xb)
            U = as_tensor(p["Z0"])
            inc_sum = as_tensor(np.asarray(0.0))
            for i, w in enumerate(self.widths):
                last = i == n_layers - 1
                mean_fn = "identity" if (not last and F.value.shape[1] == w) else "zero"
                if self.posterior == "gi":
                    layer = dm.GiDgpLayer(V=p[f"V{i}"], log_lambda=p[f"lam{i}"],
                                          kernel_params=self._kp(p, i), width=w,
                                          mean_function=mean_fn)
                    U, F, inc = dm.gi_dgp_layer_sample(F, U, layer, st)
                    inc_sum = de.add(inc_sum, inc)
                else:
                    layer = dm.DsviDgpLayer(Z=p["Z0"] if i == 0 else p[f"Z{i}"],
                                            m=p[f"m{i}"],
                                            S_chol=None, kernel_params=self._kp(p, i),
                                            width=w, mean_function=mean_fn)
                    chols = [_chol_from_raw(de.getitem(as_tensor(p[f"S_raw{i}"]), lam))
                             for lam in range(w)]
                    layer.S_chol = de.concat(
                        [de.reshape(c, (1, self.M, self.M)) for c in chols], axis=0)
                    F, kl = dm.dsvi_dgp_layer_sample(F, layer, st)
                    inc_sum = de.sub(inc_sum, kl)
            out = de.reshape(F, (nb,))
            ll = de.tsum(rd.normal_log_density(as_tensor(yb), out, s2))
            term = de.add(de.elementwise("affine", ll, a=float(total_n) / nb),
                          de.elementwise("affine", inc_sum, a=float(kl_scale)))
            total = term if total is None else de.add(total, term)
        return de.elementwise("affine", total, a=1.0 / n_samples)

    def _sample_outputs(self, params, X, rng, n_samples):
        p = {k: as_tensor(v) for k, v in params.items()}
        n_layers = len(self.widths)
        outs = []
        for st in rng.split(n_samples):
            F = as_tensor(X)
            U = p["Z0"]
            for i, w in enumerate(self.widths):
                last = i == n_layers - 1
                mean_fn = "identity" if (not last and F.value.shape[1] == w) else "zero"
                if self.posterior == "gi":
                    layer = dm.GiDgpLayer(V=p[f"V{i}"], log_lambda=p[f"lam{i}"],
                                          kernel_params=self._kp(p, i), width=w,
                                          mean_function=mean_fn)
                    U, F, _ = dm.gi_dgp_layer_sample(F, U, layer, st)
                else:
                    layer = dm.DsviDgpLayer(Z=p["Z0"] if i == 0 else p[f"Z{i}"],
                                            m=p[f"m{i}"], S_chol=None,
                                            kernel_params=self._kp(p, i),
                                            width=w, mean_function=mean_fn)
                    chols = [_chol_from_raw(de.getitem(as_tensor(p[f"S_raw{i}"]), lam))
                             for lam in range(w)]
                    layer.S_chol = de.concat(
                        [de.reshape(c, (1, self.M, self.M)) for c in chols], axis=0)
                    F, _ = dm.dsvi_dgp_layer_sample(F, layer, st)
            outs.append(F.value[:, 0])
        return np.asarray(outs)

    def evaluate(self, params, dataset, rng, n_samples):
        n = dataset.X_train.shape[0]
        sub = rng.split(2)
        p = {k: as_tensor(v) for k, v in params.items()}
        elbo = self.objective(p, dataset.X_train, dataset.y_train, n,
                              min(n_samples, 20), sub[0], 1.0)
        preds = self._sample_outputs(params, dataset.X_test, sub[1],
                                     min(n_samples, 50))
        s2 = float(np.exp(10.0 * params["log_noise_s"]))
        ll = (-0.5 * np.log(2 * np.pi * s2)
              - 0.5 * (dataset.y_test[None, :] - preds) ** 2 / s2)
        mean_pred = preds.mean(axis=0)
        return {"elbo_per_point": float(elbo.value) / n,
                "test_ll_per_point": float(np.mean(_log_mean_exp(ll, axis=0))),
                "rmse": float(np.sqrt(np.mean((dataset.y_test - mean_pred) ** 2)))}



class DwpModel:
    """Deep Wishart process with `n_gram_layers` Gram layers and a
    global-inducing GP output layer; variant in {base, A, AB}."""

    def __init__(self, dataset: Dataset, n_gram_layers=2, M=20, variant="base",
                 seed=0):
        self.D = dataset.X_train.shape[1]
        self.nu = max(self.D, 2)
        self.M = min(M, dataset.X_train.shape[0])
        self.X0 = dataset.X_train[:self.M].copy()
        self.y0 = dataset.y_train[:self.M].copy()
        self.n_layers = n_gram_layers
        self.variant = variant
        self.seed = seed

    def init_params(self):
        M, nu = self.M, self.nu
        ntilde = min(M, nu)
        p = {"log_noise_s": np.asarray(-0.3), "Xi": self.X0.copy(),
             "Vf": self.y0[:, None].copy(), "lamf": np.zeros(M),
             "log_sf2_f": np.asarray(0.0), "log_ls_f": np.asarray(0.0)}
        a, b, mu, sg = dwp_mod.standard_bartlett_params(M, nu)
        G0 = self.X0 @ self.X0.T / self.D
        for i in range(self.n_layers):
            p[f"log_sf2_{i}"] = np.asarray(0.0)
            p[f"log_ls_{i}"] = np.asarray(0.0)
            p[f"V{i}"] = (np.linalg.cholesky(G0 + 1e-6 * np.eye(M))
                          if i == 0 else np.eye(M))
            p[f"lq{i}"] = np.asarray(np.log(0.1 / 0.9))        # logit(0.1)
            p[f"la{i}"] = np.log(a)
            p[f"lb{i}"] = np.log(b)
            p[f"mu{i}"] = mu.copy()
            p[f"ls{i}"] = np.log(sg)
            if self.variant in ("A", "AB"):
                p[f"A{i}"] = np.eye(M)
            if self.variant == "AB":
                p[f"B{i}"] = np.zeros((ntilde, ntilde))
        return p

    def _state(self, p):
        layers, kps = [], []
        for i in range(self.n_layers):
            layers.append(dwp_mod.GWishLayerPosterior(
                V=p[f"V{i}"], logit_q=p[f"lq{i}"], nu=self.nu,
                log_alpha=p[f"la{i}"], log_beta=p[f"lb{i}"],
                mu=p[f"mu{i}"], log_sigma=p[f"ls{i}"], variant=self.variant,
                A_packed=p.get(f"A{i}"), B_packed=p.get(f"B{i}")))
            kps.append(KernelParams(log_sf2=p[f"log_sf2_{i}"],
                                    log_lengthscales=p[f"log_ls_{i}"]))
        final = dm.GiDgpLayer(V=p["Vf"], log_lambda=p["lamf"],
                              kernel_params=None, width=1)
        fk = KernelParams(log_sf2=p["log_sf2_f"], log_lengthscales=p["log_ls_f"])
        log_noise = de.elementwise("affine", as_tensor(p["log_noise_s"]), a=10.0)
        return dwp_mod.DwpState(inducing_inputs=p["Xi"], layers=layers,
                                kernel_params=kps, final_layer=final,
                                final_kernel=fk, log_noise=log_noise,
                                nu0=self.D)

    def objective(self, p, Xb, yb, total_n, n_samples, rng, kl_scale, stl=False):
        return dwp_mod.dwp_elbo_batch(self._state(p), Xb, yb, total_n, rng,
                                      n_samples=n_samples, kl_scale=kl_scale,
                                      stl=stl)

    def evaluate(self, params, dataset, rng, n_samples):
        p = {k: as_tensor(v) for k, v in params.items()}
        n = dataset.X_train.shape[0]
        sub = rng.split(2)
        n_elbo = min(n_samples, 20)
        elbo = self.objective(p, dataset.X_train, dataset.y_train, n,
                              n_elbo, sub[0], 1.0)
        st = self._state(p)
        _, preds = dwp_mod.dwp_elbo_batch(st, dataset.X_test, dataset.y_test,
                                          n, sub[1], n_samples=min(n_samples, 50),
                                          return_predictions=True)
        preds = np.asarray(preds)
        s2 = float(np.exp(10.0 * params["log_noise_s"]))
        ll = (-0.5 * np.log(2 * np.pi * s2)
              - 0.5 * (dataset.y_test[None, :] - preds) ** 2 / s2)
        mean_pred = preds.mean(axis=0)
        return {"elbo_per_point": float(elbo.value) / n,
                "test_ll_per_point": float(np.mean(_log_mean_exp(ll, axis=0))),
                "rmse": float(np.sqrt(np.mean((dataset.y_test - mean_pred) ** 2)))}


# -- experiment orchestration ------------------------------------------------------

@dataclass
class ExperimentConfig:
    model: str = "bnn-gi"
    dataset: str = "cubic-toy"       # cubic-toy | deep-linear | path to CSV
    depth: int = 2
    widths: tuple = (50, 50)
    M: int = 40
    prior: str = "neal"
    seed: int = 0
    out: str = "results"
    train: TrainConfig = field(default_factory=TrainConfig)

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        tc = d.pop("train", {})
        cfg = ExperimentConfig(**{k: v for k, v in d.items()
                                  if k in ExperimentConfig.__dataclass_fields__})
        if isinstance(tc, dict):
            cfg.train = TrainConfig(**tc)
        if isinstance(cfg.widths, list):
            cfg.widths = tuple(cfg.widths)
        return cfg


@dataclass
class ExperimentResult:
    config: dict
    trace: list
    final: dict
    wall_clock: float
    seed: int
    aborted: dict = None


def _make_dataset(name, seed):
    if name == "cubic-toy":
        return gen_cubic_toy(seed)
    if name == "deep-linear":
        return gen_deep_linear(seed)
    return load_csv(name, seed=seed)


def _make_model(cfg: ExperimentConfig, ds: Dataset):
    kind = cfg.model
    if kind == "blr":
        return BlrViModel(ds)
    if kind == "gp":
        return GpLmlModel(ds)
    if kind == "dkl":
        return GpLmlModel(ds, dkl_widths=(100, 50, 2), seed=cfg.seed)
    if kind == "svgp":
        return SvgpModel(ds, M=cfg.M, seed=cfg.seed)
    if kind in ("bnn-gi", "bnn-fac"):
        return BnnModel(ds, posterior=kind.split("-")[1], widths=cfg.widths,
                        M=cfg.M, prior_variant=cfg.prior, seed=cfg.seed)
    if kind in ("dgp-gi", "dgp-dsvi"):
        return DgpModel(ds, posterior=kind.split("-")[1], depth=cfg.depth,
                        M=cfg.M, seed=cfg.seed)
    if kind in ("dwp", "dwp-a", "dwp-ab"):
        variant = {"dwp": "base", "dwp-a": "A", "dwp-ab": "AB"}[kind]
        return DwpModel(ds, n_gram_layers=max(cfg.depth - 1, 0), M=cfg.M,
                        variant=variant, seed=cfg.seed)
    raise ValueError(f"unknown model kind {cfg.model!r}")


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    ds = _make_dataset(cfg.dataset, cfg.seed)
    model = _make_model(cfg, ds)
    tc = cfg.train
    tc.seed = cfg.seed
    res = train_loop(model, ds, tc)
    result = ExperimentResult(
        config=_config_dict(cfg), trace=res["trace"],
        final=res.get("final", {}), wall_clock=res["wall_clock"],
        seed=cfg.seed, aborted=res["aborted"])
    os.makedirs(cfg.out, exist_ok=True)
    stem = f"{cfg.model}_{os.path.basename(str(cfg.dataset))}_{cfg.seed}"
    with open(os.path.join(cfg.out, stem + ".json"), "w") as fh:
        json.dump(asdict(result), fh, indent=2, default=_json_default)
    if ds.X_train.shape[1] == 1:
        _write_plot_data(model, res["params"], ds, os.path.join(cfg.out, stem + ".bands"))
    return result


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return float(o)
    raise TypeError(type(o))


def _config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    return d


def _write_plot_data(model, params, ds: Dataset, path):
    """x-grid, predictive mean, and +-1/+-2 std bands for 1-D inputs."""
    grid = np.linspace(ds.X_train[:, 0].min() - 1, ds.X_train[:, 0].max() + 1,
                       200)[:, None]
    rng = rd.RngStream(0)
    if hasattr(model, "_sample_outputs"):
        outs = model._sample_outputs(params, grid, rng, 50)
        mean, std = outs.mean(axis=0), outs.std(axis=0)
    elif isinstance(model, BlrViModel):
        phi = model._phi(grid).value
        mean = phi @ params["mean"]
        Lq = _chol_from_raw(as_tensor(params["chol_raw"])).value
        std = np.sqrt(np.sum((phi @ Lq) ** 2, axis=1))
    else:
        return
    cols = np.column_stack([grid[:, 0], mean, mean - std, mean + std,
                            mean - 2 * std, mean + 2 * std])
    np.savetxt(path, cols, header="x mean lo1 hi1 lo2 hi2")


# -- CLI ---------------------------------------------------------------------------

def _quick_checks() -> int:
    """Fast self-contained oracle checks; returns a process exit code."""
    rng = np.random.default_rng(0)
    failures = []

    def check(name, ok):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        if not ok:
            failures.append(name)

    rep = de.finite_diff_check(
        lambda ps: de.logdet_psd(de.elementwise(
            "affine", de.add(ps[0], de.transpose(ps[0])), a=0.5)),
        [np.eye(3) * 3 + rng.standard_normal((3, 3)) * 0.1])
    check("logdet gradient vs finite differences", rep["passed"])

    X = rng.standard_normal((8, 2))
    y = rng.standard_normal(8)
    st = gm.GpState(kernel_params=KernelParams(log_lengthscales=np.zeros(2)),
                    log_noise=np.log(0.1))
    _, dfit, _ = gm.prop31_check(st, X, y)
    check("optimal-signal-variance data fit = -N/2", abs(dfit.value + 4.0) < 1e-8)

    sv = gm.SvgpState(Z=X, m=np.zeros(8), S_chol=np.eye(8),
                      kernel_params=st.kernel_params, log_noise=np.log(0.1))
    bound, _, _ = gm.svgp_collapsed_bound(sv, X, y)
    _, _, lml = gm.gp_predict_lml(st, X, y)
    check("collapsed bound equals LML at Z=X", abs(bound.value - lml.value) < 1e-8)

    from scipy.stats import wishart as sw
    G = X[:3] @ X[:3].T + 2 * np.eye(3)
    S = np.eye(3)
    check("Wishart log density matches reference",
          abs(rd.wishart_log_density(G, S, 5.0).value - sw.logpdf(G, 5, S)) < 1e-8)
    return 1 if failures else 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="deepbayes")
    ap.add_argument("--out", default="results")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=None)
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("config")
    p_toy = sub.add_parser("toy", help="generate a synthetic dataset")
    p_toy.add_argument("name", choices=["cubic-toy", "deep-linear"])
    sub.add_parser("check", help="run quick oracle checks")
    args = ap.parse_args(argv)

    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    if args.cmd == "check":
        return _quick_checks()

    if args.cmd == "toy":
        ds = _make_dataset(args.name, args.seed)
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, f"{args.name}_{args.seed}.npz")
        np.savez(path, X_train=ds.X_train, y_train=ds.y_train,
                 X_test=ds.X_test, y_test=ds.y_test)
        print(f"wrote {path}")
        return 0

    # run
    import yaml
    with open(args.config, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    cfg = ExperimentConfig.from_dict(raw)
    if args.seed is not None and "seed" not in raw:
        cfg.seed = args.seed
    if args.out != "results" or "out" not in raw:
        cfg.out = args.out
    t0 = time.time()
    result = run_experiment(cfg)
    final = result.final or {}
    print(f"model={cfg.model} dataset={cfg.dataset} seed={cfg.seed} "
          f"elbo/pt={final.get('elbo_per_point')} "
          f"test_ll/pt={final.get('test_ll_per_point')} "
          f"rmse={final.get('rmse')} "
          f"({time.time() - t0:.1f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
