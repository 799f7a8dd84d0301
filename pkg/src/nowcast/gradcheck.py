"""Finite-difference verification of every backward pass.

Each check builds a random instance, projects the op output onto a fixed random
tensor to get a scalar loss, and compares the analytic gradient with central
differences (step 1e-5, float64).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import ops
from .models import ModelConfig, ModelKind, build_model, ConvLSTMParams, ConvLSTMState, \
    convlstm_step, convlstm_step_grad
from .nn import BatchNorm, RngState
from .ops import ConvSpec

STEP = 1e-5
OP_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    family: str
    max_rel_err: float
    tolerance: float
    n_checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def rel_err(analytic, numeric) -> float:
    """Max abs difference scaled by the larger gradient magnitude."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index=None, h=STEP):
    """Central differences of f() w.r.t. entries of ``arr`` (modified in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def guarded_grad(f: Callable[[], float], arr: np.ndarray, i: int, h=STEP) -> Optional[float]:
    """Central difference at one entry, or None when the probes straddle a kink.

    A kink is any change in a relu mask or pooling argmax between the base
    point and either probe; there the difference quotient is not a derivative.
    """
    flat = arr.reshape(-1)
    old = flat[i]
    with ops.trace_kinks() as base:
        f()
    flat[i] = old + h
    with ops.trace_kinks() as up:
        fp = f()
    flat[i] = old - h
    with ops.trace_kinks() as down:
        fm = f()
    flat[i] = old
    if up != base or down != base:
        return None
    return (fp - fm) / (2 * h)


def _sample(rng, size, k):
    return rng.choice(size, size=min(k, size), replace=False)


# ------------------------------------------------------------------ op checks

def check_conv3d(rng, n_entries=40):
    k = tuple(int(v) for v in rng.integers(1, 4, size=3))
    s = tuple(int(v) for v in rng.integers(1, 3, size=3))
    p = tuple(int(rng.integers(0, kk)) for kk in k)
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    spec = ConvSpec(k, s, p, cin, cout)
    x = rng.standard_normal((2, 4, 5, 5, cin))
    w = rng.standard_normal((*k, cin, cout))
    b = rng.standard_normal(cout)
    y, cache = ops.conv3d(x, w, b, spec)
    R = rng.standard_normal(y.shape)
    gx, gw, gb = ops.conv3d_grad(R, cache)
    f = lambda: float(np.sum(ops.conv3d(x, w, b, spec)[0] * R))
    errs = []
    for arr, g in ((x, gx), (w, gw), (b, gb)):
        idx = _sample(rng, arr.size, n_entries)
        errs.append(rel_err(g.reshape(-1)[idx], numeric_grad(f, arr, idx)))
    return max(errs)


def check_conv_transpose3d(rng, n_entries=40):
    k = tuple(int(v) for v in rng.integers(1, 4, size=3))
    s = tuple(int(v) for v in rng.integers(1, 3, size=3))
    p = tuple(int(rng.integers(0, kk)) for kk in k)
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    spec = ConvSpec(k, s, p, cin, cout)
    x = rng.standard_normal((2, 3, 4, 4, cin))
    w = rng.standard_normal((*k, cout, cin))
    b = rng.standard_normal(cout)
    y, cache = ops.conv_transpose3d(x, w, spec, b)
    R = rng.standard_normal(y.shape)
    gx, gw, gb = ops.conv_transpose3d_grad(R, cache)
    f = lambda: float(np.sum(ops.conv_transpose3d(x, w, spec, b)[0] * R))
    errs = []
    for arr, g in ((x, gx), (w, gw), (b, gb)):
        idx = _sample(rng, arr.size, n_entries)
        errs.append(rel_err(g.reshape(-1)[idx], numeric_grad(f, arr, idx)))
    return max(errs)


def check_maxpool(rng, n_entries=60):
    win = (int(rng.integers(1, 3)), 2, 2)
    x = rng.standard_normal((2, 2 * win[0], 4, 6, 2))
    y, cache = ops.maxpool(x, win)
    R = rng.standard_normal(y.shape)
    gx = ops.maxpool_grad(R, cache)
    f = lambda: float(np.sum(ops.maxpool(x, win)[0] * R))
    idx = _sample(rng, x.size, n_entries)
    return rel_err(gx.reshape(-1)[idx], numeric_grad(f, x, idx))


def check_concat(rng, n_entries=60):
    a = rng.standard_normal((1, 2, 3, 3, 2))
    b = rng.standard_normal((1, 2, 3, 3, 3))
    y, cache = ops.concat(a, b)
    R = rng.standard_normal(y.shape)
    ga, gb = ops.concat_grad(R, cache)
    f = lambda: float(np.sum(ops.concat(a, b)[0] * R))
    return max(rel_err(ga, numeric_grad(f, a)), rel_err(gb, numeric_grad(f, b)))


def check_pointwise(rng, kind):
    x = rng.standard_normal((1, 2, 3, 3, 2))
    if kind in ("relu", "leaky_relu"):
        # keep away from the kink
        x = np.where(np.abs(x) < 0.05, 0.1, x)
    other = rng.standard_normal(x.shape) if kind in ops.BINARY else None
    y, cache = ops.pointwise(x, kind, other)
    R = rng.standard_normal(y.shape)
    grads = ops.pointwise_grad(R, cache)
    f = lambda: float(np.sum(ops.pointwise(x, kind, other)[0] * R))
    err = rel_err(grads[0], numeric_grad(f, x))
    if other is not None:
        err = max(err, rel_err(grads[1], numeric_grad(f, other)))
    return err


def check_batchnorm(rng, mode="train"):
    C = int(rng.integers(1, 4))
    st = BatchNorm("bn", C)
    st.gamma.value[:] = rng.uniform(0.5, 1.5, C)
    st.beta.value[:] = rng.standard_normal(C)
    if mode == "infer":
        st.running_mean[:] = rng.standard_normal(C)
        st.running_var[:] = rng.uniform(0.5, 2.0, C)
        st.trained = True
    x = rng.standard_normal((2, 2, 3, 3, C)) * 2 + 1
    train = mode == "train"
    y, cache = st.forward(x, train)
    R = rng.standard_normal(y.shape)
    st.gamma.zero_grad()
    st.beta.zero_grad()
    gx = st.backward(R, cache)
    f = lambda: float(np.sum(st.forward(x, train)[0] * R))
    return max(rel_err(gx, numeric_grad(f, x)),
               rel_err(st.gamma.grad, numeric_grad(f, st.gamma.value)),
               rel_err(st.beta.grad, numeric_grad(f, st.beta.value)))


def check_convlstm(rng, literal=False):
    H = W = 4
    cin, hc = 2, 3
    p = ConvLSTMParams("cell", cin, hc, H, W, 3, RngState(int(rng.integers(2 ** 32))))
    for q in p.params():
        q.value[...] = rng.standard_normal(q.value.shape) * 0.5
    x = rng.standard_normal((2, 1, H, W, cin))
    a0 = rng.standard_normal((2, 1, H, W, hc)) * 0.5
    c0 = rng.standard_normal((2, 1, H, W, hc)) * 0.5
    Ra, Rc = rng.standard_normal(a0.shape), rng.standard_normal(c0.shape)

    def loss():
        st, _ = convlstm_step(x, ConvLSTMState(a0, c0), p, literal)
        return float(np.sum(st.a * Ra) + np.sum(st.c * Rc))

    st, cache = convlstm_step(x, ConvLSTMState(a0, c0), p, literal)
    for q in p.params():
        q.zero_grad()
    gx, ga, gc = convlstm_step_grad(Ra, Rc, cache, p)
    errs = [rel_err(gx, numeric_grad(loss, x)), rel_err(ga, numeric_grad(loss, a0)),
            rel_err(gc, numeric_grad(loss, c0))]
    for q in p.params():
        idx = _sample(rng, q.value.size, 8)
        errs.append(rel_err(q.grad.reshape(-1)[idx], numeric_grad(loss, q.value, idx)))
    return max(errs)


# --------------------------------------------------------------- model checks

def tiny_config(kind, seed=0, **kw) -> ModelConfig:
    base = dict(height=16, width=16, depth=2, base_channels=4, hidden_channels=4,
                lstm_layers=2, seed=seed)
    base.update(kw)
    return ModelConfig(kind=ModelKind.parse(str(getattr(kind, "value", kind))), **base)


def check_model(kind, rng, n_params=10, batch=2, cfg: Optional[ModelConfig] = None,
                model=None) -> float:
    """Sampled parameter and input gradients of an MSE loss on the whole graph."""
    from .training import mse_loss
    cfg = cfg or tiny_config(kind, seed=int(rng.integers(2 ** 32)))
    model = model or build_model(cfg)
    if cfg.kind in (ModelKind.RNC, ModelKind.RNC_R):
        # nonzero peepholes so every path carries gradient
        for p in model.params():
            if ".W_c" in p.name or p.name.endswith((".b_i", ".b_f", ".b_c", ".b_o")):
                p.value[...] = rng.standard_normal(p.value.shape) * 0.3
    x = rng.standard_normal((batch, cfg.n_in, cfg.height, cfg.width, 1)) * 0.5 + 0.5
    target = rng.standard_normal((batch, cfg.n_out, cfg.height, cfg.width, 1))

    def loss():
        y, _ = model.forward(x, train=True)
        return mse_loss(y, target)[0]

    y, cache = model.forward(x, train=True)
    _, gy = mse_loss(y, target)
    model.zero_grad()
    gx = model.backward(cache, gy)
    params = model.params()
    # scale by the largest sampled magnitude so structurally tiny entries do not
    # turn round-off into large relative errors
    a_list, n_list = _sample_guarded(rng, loss, [(p.value, p.grad) for p in params], n_params)
    ax, nx = _sample_guarded(rng, loss, [(x, gx)], 10)
    return max(rel_err(a_list, n_list), rel_err(ax, nx))


def _sample_guarded(rng, loss, pairs, k, max_tries=None):
    """Draw k (analytic, numeric) pairs from random entries, skipping kinks."""
    max_tries = max_tries or 20 * k
    a_list, n_list = [], []
    for _ in range(max_tries):
        if len(a_list) == k:
            break
        value, grad = pairs[int(rng.integers(len(pairs)))]
        i = int(rng.integers(value.size))
        n = guarded_grad(loss, value, i)
        if n is None:
            continue
        a_list.append(grad.reshape(-1)[i])
        n_list.append(n)
    if len(a_list) < k:
        raise RuntimeError(f"only {len(a_list)} of {k} kink-free probes found")
    return a_list, n_list


# ------------------------------------------------------------------- runner

def op_families() -> Dict[str, Callable]:
    fams = {
        "conv3d": check_conv3d,
        "conv_transpose3d": check_conv_transpose3d,
        "maxpool": check_maxpool,
        "concat": check_concat,
        "batchnorm": lambda r: max(check_batchnorm(r, "train"), check_batchnorm(r, "infer")),
        "convlstm": lambda r: max(check_convlstm(r, False), check_convlstm(r, True)),
    }
    for kind in ops.UNARY + ops.BINARY:
        fams[f"pointwise_{kind}"] = (lambda k: lambda r: check_pointwise(r, k))(kind)
    return fams


def model_families() -> Dict[str, Callable]:
    return {f"model_{k.value}": (lambda kk: lambda r: check_model(kk, r))(k) for k in ModelKind}


def run_gradcheck(seed: int = 0, only: Optional[List[str]] = None, op_repeats: int = 3
                  ) -> List[CheckResult]:
    results = []
    fams = [(n, f, OP_TOL, op_repeats) for n, f in op_families().items()]
    fams += [(n, f, MODEL_TOL, 1) for n, f in model_families().items()]
    for name, fn, tol, reps in fams:
        if only and not any(o.lower() in name.lower() for o in only):
            continue
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        t0 = time.perf_counter()
        err = max(fn(rng) for _ in range(reps))
        results.append(CheckResult(name, err, tol, reps, time.perf_counter() - t0))
    return results
