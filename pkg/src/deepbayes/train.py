"""Shared reparameterized stochastic-gradient training loop (Adam)."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diff_engine as de
from . import rand_dist as rd

__all__ = ["TrainConfig", "AdamState", "adam_step", "kl_anneal_factor",
           "train_loop", "stl_estimator"]


@dataclass
class TrainConfig:
    steps: int = 20000
    lr: float = 1e-2
    lr_drop_factor: float = 0.1
    lr_drop_steps: tuple = (10000,)
    anneal_steps: int = 1000
    batch_size: int = None          # None = full batch
    train_samples: int = 10
    eval_samples: int = 100
    eval_every: int = 250
    seed: int = 0
    stl: bool = False
    clip_norm: float = 100.0

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.anneal_steps > self.steps:
            raise ValueError("anneal steps exceed total steps")
        if self.train_samples < 1 or self.eval_samples < 1:
            raise ValueError("sample counts must be >= 1")

    def lr_at(self, step: int) -> float:
        lr = self.lr
        for s in self.lr_drop_steps:
            if step >= s:
                lr *= self.lr_drop_factor
        return lr


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> dict:
    """Bias-corrected Adam update; returns the new parameter dict."""
    state.t += 1
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        mhat = state.m[name] / (1 - state.beta1 ** state.t)
        vhat = state.v[name] / (1 - state.beta2 ** state.t)
        out[name] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
    return out


def kl_anneal_factor(step: int, anneal_steps: int) -> float:
    """min(1, step / anneal_steps); multiplies only the KL terms."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if anneal_steps <= 0:
        return 1.0
    return min(1.0, step / anneal_steps)


def stl_estimator(toggle: bool, params):
    """Sticking-the-landing path control: when toggled, the given variational
    parameters are detached wherever the density (log q) is evaluated, while
    the sample path keeps its gradient. Toggle off is the identity."""
    if not toggle:
        return params
    if isinstance(params, (list, tuple)):
        return type(params)(de.stop_gradient(de.as_tensor(p)) for p in params)
    return de.stop_gradient(de.as_tensor(params))


def _clip_global_norm(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def train_loop(model, dataset, config: TrainConfig):
    """Maximize the model's ELBO with Adam; returns a result dict with the
    evaluation trace, final parameters, and summary.

    The model exposes:
      init_params() -> dict of arrays
      objective(params, Xb, yb, total_n, n_samples, rng, kl_scale) -> scalar
      evaluate(params, dataset, rng, n_samples) -> metrics dict (optional)
    """
    params = {k: np.asarray(v, dtype=np.float64).copy()
              for k, v in model.init_params().items()}
    adam = AdamState()
    n = dataset.X_train.shape[0]
    batch = config.batch_size or n
    trace = []
    aborted = None
    last_good = {k: v.copy() for k, v in params.items()}
    t0 = time.time()

    for step in range(config.steps):
        step_rng = rd.RngStream(np.random.SeedSequence(
            entropy=config.seed, spawn_key=(step,)))
        if batch < n:
            idx = step_rng.permutation(n)[:batch]
        else:
            idx = np.arange(n)
        Xb, yb = dataset.X_train[idx], dataset.y_train[idx]
        kl_scale = kl_anneal_factor(step, config.anneal_steps)
        try:
            with de.Tape() as tape:
                wrapped = {k: tape.param(v, k) for k, v in params.items()}
                elbo = model.objective(wrapped, Xb, yb, n,
                                       config.train_samples, step_rng.split(1)[0],
                                       kl_scale)
                loss = de.elementwise("affine", elbo, a=-1.0)
                grads = de.backward_pass(loss)
            if not np.isfinite(loss.value):
                raise FloatingPointError("non-finite loss")
            grads = _clip_global_norm(grads, config.clip_norm)
            params = adam_step(adam, params, grads, config.lr_at(step))
            last_good = {k: v.copy() for k, v in params.items()}
        except (FloatingPointError, np.linalg.LinAlgError) as e:
            aborted = {"step": step, "reason": str(e)}
            params = last_good
            break

        if step % config.eval_every == 0 or step == config.steps - 1:
            eval_rng = rd.RngStream(np.random.SeedSequence(
                entropy=config.seed, spawn_key=(1 << 20, step)))
            rec = {"step": step}
            rec.update(_evaluate(model, params, dataset, eval_rng, config))
            trace.append(rec)

    result = {
        "trace": trace,
        "params": params,
        "aborted": aborted,
        "wall_clock": time.time() - t0,
        "seed": config.seed,
    }
    if trace:
        result["final"] = trace[-1]
    return result


def _evaluate(model, params, dataset, rng: rd.RngStream, config: TrainConfig):
    if hasattr(model, "evaluate"):
        return model.evaluate(params, dataset, rng, config.eval_samples)
    n = dataset.X_train.shape[0]
    elbo = model.objective(
        {k: de.as_tensor(v) for k, v in params.items()},
        dataset.X_train, dataset.y_train, n, config.eval_samples, rng, 1.0)
    return {"elbo_per_point": float(elbo.value) / n}
