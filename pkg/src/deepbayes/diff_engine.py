"""Dense f64 linear algebra with reverse-mode differentiation on a tape.

All tensors are numpy float64 arrays wrapped in DiffTensor. Operations
record vector-Jacobian closures on the active Tape; backward_pass walks the
tape in reverse creation order exactly once.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla

__all__ = [
    "Tape", "DiffTensor", "as_tensor", "lift",
    "matmul", "add", "sub", "mul", "div", "neg", "transpose", "tsum",
    "elementwise", "cholesky_factor", "triangular_solve", "logdet_psd",
    "diag_part", "diag_embed", "concat", "reshape", "getitem",
    "stop_gradient", "backward_pass", "finite_diff_check",
]

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of operations for one training run (single-threaded)."""

    def __init__(self):
        self._nodes: list[DiffTensor] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        assert _ACTIVE and _ACTIVE[-1] is self
        _ACTIVE.pop()
        return False

    def param(self, value, name: str) -> "DiffTensor":
        t = DiffTensor(value, tape=self, name=name)
        self._nodes.append(t)
        return t

    def _record(self, t: "DiffTensor"):
        self._nodes.append(t)


def _active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


class DiffTensor:
    """Dense real matrix/vector with a gradient slot on a recording tape."""

    __slots__ = ("value", "name", "grad", "_tape", "_parents")

    def __init__(self, value, tape=None, name=None, parents=None):
        self.value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)):
            raise ValueError(f"non-finite values in tensor {name or ''}")
        self.name = name
        self.grad = None
        self._tape = tape
        self._parents = parents or []

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"DiffTensor(shape={self.value.shape}, name={self.name!r})"


def as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x)


def _tracked(*xs):
    """Tensors participate in the graph iff a tape is active and an input is tracked."""
    tape = _active_tape()
    if tape is None:
        return None
    if any(isinstance(x, DiffTensor) and x._tape is not None for x in xs):
        return tape
    return None


def lift(value, parents) -> DiffTensor:
    """Create a tensor from a custom op.

    parents: list of (tensor, vjp) pairs, vjp mapping the output cotangent to
    the parent cotangent.  Untracked parents are dropped.
    """
    tape = _tracked(*[p for p, _ in parents])
    kept = [(p, f) for p, f in parents if isinstance(p, DiffTensor) and p._tape is not None]
    out = DiffTensor(value, tape=tape, parents=kept if tape else [])
    if tape is not None:
        tape._record(out)
    return out


def _unbroadcast(g, shape):
    """Reduce cotangent g back to `shape` after numpy broadcasting."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- core ops ---------------------------------------------------------------

def matmul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim == 2 and b.value.ndim == 1:
        if a.value.shape[1] != b.value.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
        val = a.value @ b.value
        return lift(val, [(a, lambda g: np.outer(g, b.value)),
                          (b, lambda g: a.value.T @ g)])
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    val = a.value @ b.value
    return lift(val, [(a, lambda g: g @ b.value.T), (b, lambda g: a.value.T @ g)])


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    return lift(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    ])


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    return lift(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(-g, b.value.shape)),
    ])


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    return lift(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    ])


def div(a, b) -> DiffTensor:
    return mul(a, elementwise("reciprocal", b))


def neg(a) -> DiffTensor:
    a = as_tensor(a)
    return lift(-a.value, [(a, lambda g: -g)])


def transpose(a) -> DiffTensor:
    a = as_tensor(a)
    return lift(a.value.T, [(a, lambda g: g.T)])


def tsum(a, axis=None, keepdims=False) -> DiffTensor:
    a = as_tensor(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape).copy()

    return lift(val, [(a, vjp)])


def reshape(a, shape) -> DiffTensor:
    a = as_tensor(a)
    return lift(a.value.reshape(shape), [(a, lambda g: g.reshape(a.value.shape))])


def getitem(a, idx) -> DiffTensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return lift(a.value[idx], [(a, vjp)])


def concat(parts, axis=0) -> DiffTensor:
    parts = [as_tensor(p) for p in parts]
    val = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * val.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return lift(val, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def diag_part(a) -> DiffTensor:
    a = as_tensor(a)
    n = min(a.value.shape)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[np.arange(n), np.arange(n)] = g
        return out

    return lift(np.diagonal(a.value).copy(), [(a, vjp)])


def diag_embed(v) -> DiffTensor:
    v = as_tensor(v)
    return lift(np.diag(v.value), [(v, lambda g: np.diagonal(g).copy())])


def stop_gradient(a) -> DiffTensor:
    """Value passes through; gradients do not (sticking-the-landing support)."""
    a = as_tensor(a)
    return DiffTensor(a.value.copy())


# -- elementwise family -----------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def elementwise(tag, x, a=1.0, b=0.0) -> DiffTensor:
    """Elementwise map. tag in {exp, log, softplus, relu, square, reciprocal,
    affine, sqrt, sigmoid}; affine computes a*x + b for python scalars a, b."""
    x = as_tensor(x)
    v = x.value
    if tag == "exp":
        val = np.exp(v)
        d = val
    elif tag == "log":
        if np.any(v <= 0):
            raise ValueError("log domain violation: non-positive input")
        val = np.log(v)
        d = 1.0 / v
    elif tag == "softplus":
        val = _softplus(v)
        d = _sigmoid(v)
    elif tag == "relu":
        val = np.maximum(v, 0.0)
        d = (v > 0).astype(np.float64)
    elif tag == "square":
        val = v * v
        d = 2.0 * v
    elif tag == "reciprocal":
        if np.any(v == 0):
            raise ValueError("reciprocal domain violation: zero input")
        val = 1.0 / v
        d = -val * val
    elif tag == "affine":
        val = a * v + b
        d = np.full_like(v, a)
    elif tag == "sqrt":
        if np.any(v < 0):
            raise ValueError("sqrt domain violation: negative input")
        val = np.sqrt(v)
        d = 0.5 / np.maximum(val, 1e-300)
    elif tag == "sigmoid":
        val = _sigmoid(v)
        d = val * (1.0 - val)
    else:
        raise ValueError(f"unknown elementwise tag {tag!r}")
    return lift(val, [(x, lambda g, d=d: g * d)])


# -- factorizations ---------------------------------------------------------

def _chol_with_jitter(s: np.ndarray):
    """Cholesky with the jitter ladder: 1e-8*mean(diag) doubling to 1e-4*mean(diag)."""
    n = s.shape[0]
    sym = 0.5 * (s + s.T)
    scale = float(np.mean(np.diag(sym)))
    if scale <= 0:
        scale = 1.0
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        pass
    jit = 1e-8 * scale
    while jit <= 1e-4 * scale:
        try:
            return np.linalg.cholesky(sym + jit * np.eye(n))
        except np.linalg.LinAlgError:
            jit *= 2.0
    # locate the offending pivot for the error message
    pivot = n
    for k in range(1, n + 1):
        try:
            np.linalg.cholesky(sym[:k, :k] + 1e-4 * scale * np.eye(k))
        except np.linalg.LinAlgError:
            pivot = k
            break
    raise np.linalg.LinAlgError(
        f"matrix not positive definite after max jitter (pivot {pivot} of {n})")


def _phi(x):
    """Lower triangle with halved diagonal (Cholesky reverse-mode helper)."""
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky_factor(s) -> DiffTensor:
    """Lower Cholesky factor of a symmetric PD matrix, with jitter policy."""
    s = as_tensor(s)
    v = s.value
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ValueError("cholesky_factor requires a square matrix")
    if np.max(np.abs(v - v.T)) > 1e-10 * max(1.0, np.max(np.abs(v))):
        raise ValueError("cholesky_factor requires a symmetric matrix")
    L = _chol_with_jitter(v)

    def vjp(g):
        p = _phi(L.T @ g)
        s1 = sla.solve_triangular(L, p.T, trans="T", lower=True)
        s2 = sla.solve_triangular(L, s1.T, trans="T", lower=True)
        return 0.5 * (s2 + s2.T)

    return lift(L, [(s, vjp)])


def triangular_solve(l, b, trans=False) -> DiffTensor:
    """Solve l x = b (or l^T x = b when trans) for lower-triangular l."""
    l, b = as_tensor(l), as_tensor(b)
    lv, bv = l.value, b.value
    if lv.ndim != 2 or lv.shape[0] != lv.shape[1]:
        raise ValueError("triangular_solve requires a square triangular factor")
    if np.any(np.diag(lv) == 0):
        raise ValueError("triangular_solve: zero diagonal element")
    squeeze = bv.ndim == 1
    bm = bv[:, None] if squeeze else bv
    x = sla.solve_triangular(lv, bm, trans="T" if trans else "N", lower=True)

    def vjp_b(g):
        gm = g[:, None] if squeeze else g
        gb = sla.solve_triangular(lv, gm, trans="N" if trans else "T", lower=True)
        return gb[:, 0] if squeeze else gb

    def vjp_l(g):
        gm = g[:, None] if squeeze else g
        gb = sla.solve_triangular(lv, gm, trans="N" if trans else "T", lower=True)
        ga = -gb @ x.T  # cotangent to the (possibly transposed) operator
        return np.tril(ga if not trans else ga.T)

    val = x[:, 0] if squeeze else x
    return lift(val, [(l, vjp_l), (b, vjp_b)])


def logdet_psd(s) -> DiffTensor:
    """log|s| for symmetric PD s, via Cholesky; gradient s^{-1}."""
    s = as_tensor(s)
    L = _chol_with_jitter(s.value)
    val = 2.0 * np.sum(np.log(np.diag(L)))
    inv = sla.cho_solve((L, True), np.eye(s.value.shape[0]))

    def vjp(g):
        return float(g) * 0.5 * (inv + inv.T)

    return lift(np.asarray(val), [(s, vjp)])


# -- backward ---------------------------------------------------------------

def backward_pass(loss: DiffTensor) -> dict:
    """Accumulate gradients of a scalar loss into every tracked tensor.

    Returns a dict mapping parameter name -> gradient for named parameters.
    """
    if loss.value.size != 1:
        raise ValueError("backward_pass requires a scalar loss")
    tape = loss._tape
    if tape is None:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        for parent, vjp in node._parents:
            pg = np.asarray(vjp(g), dtype=np.float64)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg.copy()
    out = {}
    for node in tape._nodes:
        if node.name is not None and node.grad is not None:
            out[node.name] = node.grad
    return out


def finite_diff_check(fn, params, h=1e-5, tol=1e-5):
    """Compare reverse-mode gradients of fn against central finite differences.

    fn: callable taking a list (or dict) of DiffTensors, returning a scalar
        DiffTensor; must be deterministic.
    params: list or dict of numpy arrays (initial parameter values).

    Returns a report dict with per-parameter max relative errors and a pass flag.
    """
    keys = None
    if isinstance(params, dict):
        keys = list(params.keys())
        raw_fn = fn
        fn = lambda ps: raw_fn(dict(zip(keys, ps)))
        params = [params[k] for k in keys]
    params = [np.asarray(p, dtype=np.float64) for p in params]
    with Tape() as tape:
        wrapped = [tape.param(p.copy(), f"p{i}") for i, p in enumerate(params)]
        loss = fn(wrapped)
        grads = backward_pass(loss)
    analytic = [grads.get(f"p{i}", np.zeros_like(p)) for i, p in enumerate(params)]

    def eval_at(vals):
        out = fn([as_tensor(v) for v in vals])
        return float(out.value)

    errors = []
    for i, p in enumerate(params):
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        for k in range(flat.size):
            bump = np.zeros_like(flat)
            bump[k] = h
            vp = [q.copy() for q in params]
            vm = [q.copy() for q in params]
            vp[i] = (flat + bump).reshape(p.shape)
            vm[i] = (flat - bump).reshape(p.shape)
            num.reshape(-1)[k] = (eval_at(vp) - eval_at(vm)) / (2 * h)
        denom = np.maximum(np.abs(num), np.maximum(np.abs(analytic[i]), 1.0))
        errors.append(float(np.max(np.abs(num - analytic[i]) / denom)) if p.size else 0.0)
    return {
        "max_rel_errors": errors,
        "max_rel_error": max(errors) if errors else 0.0,
        "passed": all(e <= tol for e in errors),
        "tol": tol,
    }
