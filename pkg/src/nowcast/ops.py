"""Differentiable tensor primitives with hand-written backward passes.

Tensors are float64 numpy arrays laid out [batch, time, height, width, channel].
Every forward op returns ``(output, cache)``; the matching ``*_grad`` op takes
the upstream gradient and that cache and returns gradients for each
differentiable input. A cache may be consumed once.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionError, IntegrityError

Triple = Tuple[int, int, int]
AXES = ("time", "height", "width")

# above this many input taps per output (kernel volume * cin) the per-tap loop
# beats building the full im2col matrix
_IM2COL_MAX = 64

_SIG_LO = np.finfo(np.float64).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)

# when a list, piecewise-linear ops append their active pattern to it
# (relu masks, pool argmaxes); gradient checks use it to spot kink crossings
_kink_trace = None


@contextlib.contextmanager
def trace_kinks():
    global _kink_trace
    prev, _kink_trace = _kink_trace, []
    try:
        yield _kink_trace
    finally:
        _kink_trace = prev


def _record(pattern):
    if _kink_trace is not None:
        _kink_trace.append(hashlib.blake2b(np.ascontiguousarray(pattern).tobytes(),
                                           digest_size=16).digest())


class OpCache:
    """Record of forward-pass inputs for the paired gradient op."""

    __slots__ = ("op", "data", "used")

    def __init__(self, op: str, **data):
        self.op = op
        self.data = data
        self.used = False

    def take(self, op: str) -> dict:
        if self.op != op:
            raise IntegrityError(f"cache from {self.op!r} passed to {op} gradient")
        if self.used:
            raise IntegrityError(f"{op} cache consumed twice")
        self.used = True
        data, self.data = self.data, {}
        return data


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 entries, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    kernel: Triple = (3, 3, 3)
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError("kernel and stride entries must be >= 1")
        if min(self.padding) < 0:
            raise ValueError("padding must be >= 0")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def weight_shape(self) -> tuple:
        return (*self.kernel, self.in_channels, self.out_channels)

    def conv_out(self, dims) -> Triple:
        return tuple((d + 2 * p - k) // s + 1
                     for d, k, s, p in zip(dims, self.kernel, self.stride, self.padding))

    def transpose_out(self, dims) -> Triple:
        return tuple((d - 1) * s - 2 * p + k
                     for d, k, s, p in zip(dims, self.kernel, self.stride, self.padding))


def _check5(x, name="x"):
    if x.ndim != 5:
        raise DimensionError(f"{name} must be 5-D [batch, time, height, width, channel], "
                             f"got shape {x.shape}")


def _pad(x, padding):
    if not any(padding):
        return x
    pt, ph, pw = padding
    return np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))


def _crop(x, padding):
    pt, ph, pw = padding
    T, H, W = x.shape[1:4]
    return x[:, pt:T - pt, ph:H - ph, pw:W - pw]


def _tap(xp, a, b, c, stride, out):
    st, sh, sw = stride
    To, Ho, Wo = out
    return xp[:, a:a + st * (To - 1) + 1:st, b:b + sh * (Ho - 1) + 1:sh,
              c:c + sw * (Wo - 1) + 1:sw]


def _im2col(xp, kernel, stride, out):
    kt, kh, kw = kernel
    N, cin = xp.shape[0], xp.shape[-1]
    cols = np.empty((N, *out, kt, kh, kw, cin))
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                cols[:, :, :, :, a, b, c, :] = _tap(xp, a, b, c, stride, out)
    return cols.reshape(-1, kt * kh * kw * cin)


def _correlate(xp, w, stride, out):
    """Strided valid cross-correlation of padded input xp with w."""
    kt, kh, kw, cin, cout = w.shape
    N = xp.shape[0]
    if kt * kh * kw * cin <= _IM2COL_MAX:
        cols = _im2col(xp, w.shape[:3], stride, out)
        return (cols @ w.reshape(-1, cout)).reshape(N, *out, cout)
    y = np.zeros((N, *out, cout))
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                y += _tap(xp, a, b, c, stride, out) @ w[a, b, c]
    return y


def _correlate_adjoint(gy, w, stride, padded_dims):
    """Adjoint of _correlate with respect to its input."""
    kt, kh, kw, cin, cout = w.shape
    N, *out = gy.shape[:4]
    if tuple(stride) == (1, 1, 1):
        # stride 1: full correlation with the flipped, channel-swapped kernel
        gyp = np.pad(gy, ((0, 0), (kt - 1, kt - 1), (kh - 1, kh - 1), (kw - 1, kw - 1),
                          (0, 0)))
        wf = np.ascontiguousarray(w[::-1, ::-1, ::-1].swapaxes(3, 4))
        return _correlate(gyp, wf, stride, tuple(padded_dims))
    gxp = np.zeros((N, *padded_dims, cin))
    wt = np.swapaxes(w, 3, 4)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                _tap(gxp, a, b, c, stride, out)[...] += gy @ wt[a, b, c]
    return gxp


def _correlate_wgrad(xp, gy, kernel, stride):
    kt, kh, kw = kernel
    cin, cout = xp.shape[-1], gy.shape[-1]
    out = gy.shape[1:4]
    g2 = gy.reshape(-1, cout)
    if kt * kh * kw * cin <= _IM2COL_MAX:
        cols = _im2col(xp, kernel, stride, out)
        return (cols.T @ g2).reshape(kt, kh, kw, cin, cout)
    gw = np.empty((kt, kh, kw, cin, cout))
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                gw[a, b, c] = _tap(xp, a, b, c, stride, out).reshape(-1, cin).T @ g2
    return gw


def _check_conv(x, w, spec, transpose):
    _check5(x)
    if w.ndim != 5 or tuple(w.shape[:3]) != spec.kernel:
        raise DimensionError(f"weight shape {w.shape} does not match kernel {spec.kernel}")
    c_in = w.shape[4] if transpose else w.shape[3]
    c_out = w.shape[3] if transpose else w.shape[4]
    if (c_in, c_out) != (spec.in_channels, spec.out_channels):
        raise DimensionError(
            f"weight channels {c_in}->{c_out} disagree with spec "
            f"{spec.in_channels}->{spec.out_channels}")
    if x.shape[-1] != c_in:
        raise DimensionError(f"channel axis: input has {x.shape[-1]}, weight expects {c_in}")


def conv3d(x, w, b, spec: ConvSpec):
    """3-D cross-correlation, zero padded. ``w`` is [kt, kh, kw, cin, cout]."""
    _check_conv(x, w, spec, transpose=False)
    if b is not None and b.shape != (spec.out_channels,):
        raise DimensionError(f"bias shape {b.shape}, expected ({spec.out_channels},)")
    for name, d, p, k in zip(AXES, x.shape[1:4], spec.padding, spec.kernel):
        if d + 2 * p < k:
            raise DimensionError(f"{name} axis: size {d} with padding {p} is smaller "
                                 f"than kernel {k}")
    xp = _pad(x, spec.padding)
    out = spec.conv_out(x.shape[1:4])
    y = _correlate(xp, w, spec.stride, out)
    if b is not None:
        y += b
    return y, OpCache("conv3d", x_shape=x.shape, xp=xp, w=w, spec=spec,
                      y_shape=y.shape, has_bias=b is not None)


def conv3d_grad(gy, cache: OpCache):
    d = cache.take("conv3d")
    spec = d["spec"]
    if gy.shape != d["y_shape"]:
        raise DimensionError(f"upstream gradient shape {gy.shape}, expected {d['y_shape']}")
    gxp = _correlate_adjoint(gy, d["w"], spec.stride, d["xp"].shape[1:4])
    gx = _crop(gxp, spec.padding)
    gw = _correlate_wgrad(d["xp"], gy, spec.kernel, spec.stride)
    gb = gy.sum(axis=(0, 1, 2, 3)) if d["has_bias"] else None
    return gx, gw, gb


def conv_transpose3d(x, w, spec: ConvSpec, b=None):
    """Transposed convolution: the adjoint of ``conv3d`` with the same ``w``.

    ``w`` keeps the [kt, kh, kw, c_conv_in, c_conv_out] layout of the conv it is
    the adjoint of, so ``x`` carries c_conv_out channels and the output
    carries c_conv_in. ``spec.in_channels`` / ``out_channels`` describe this
    op's own input/output.
    """
    _check_conv(x, w, spec, transpose=True)
    out = spec.transpose_out(x.shape[1:4])
    for name, d in zip(AXES, out):
        if d < 1:
            raise DimensionError(f"{name} axis: transposed output size {d} < 1")
    padded = tuple(d + 2 * p for d, p in zip(out, spec.padding))
    y = _crop(_correlate_adjoint(x, w, spec.stride, padded), spec.padding)
    y = np.ascontiguousarray(y)
    if b is not None:
        y += b
    return y, OpCache("conv_transpose3d", x=x, w=w, spec=spec, y_shape=y.shape,
                      has_bias=b is not None)


def conv_transpose3d_grad(gy, cache: OpCache):
    d = cache.take("conv_transpose3d")
    spec, x, w = d["spec"], d["x"], d["w"]
    if gy.shape != d["y_shape"]:
        raise DimensionError(f"upstream gradient shape {gy.shape}, expected {d['y_shape']}")
    gyp = _pad(gy, spec.padding)
    out = x.shape[1:4]
    gx = _correlate(gyp, w, spec.stride, out)
    gw = _correlate_wgrad(gyp, x, spec.kernel, spec.stride)
    gb = gy.sum(axis=(0, 1, 2, 3)) if d["has_bias"] else None
    return gx, gw, gb


# ---------------------------------------------------------------- max pooling

def maxpool(x, window=(1, 2, 2)):
    _check5(x)
    wt, wh, ww = _triple(window)
    N, T, H, W, C = x.shape
    for name, d, k in zip(AXES, (T, H, W), (wt, wh, ww)):
        if d % k:
            raise DimensionError(f"{name} axis: size {d} not divisible by pool window {k}")
    v = x.reshape(N, T // wt, wt, H // wh, wh, W // ww, ww, C)
    v = v.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(N, T // wt, H // wh, W // ww, C, -1)
    idx = np.argmax(v, axis=-1)  # first maximum in (t, h, w) scan order
    y = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    _record(idx)
    return y, OpCache("maxpool", idx=idx, x_shape=x.shape, window=(wt, wh, ww))


def maxpool_grad(gy, cache: OpCache):
    d = cache.take("maxpool")
    idx = d["idx"]
    wt, wh, ww = d["window"]
    N, T, H, W, C = d["x_shape"]
    if gy.shape != idx.shape:
        raise DimensionError(f"upstream gradient shape {gy.shape}, expected {idx.shape}")
    g = np.zeros((*idx.shape, wt * wh * ww))
    np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
    g = g.reshape(N, T // wt, H // wh, W // ww, C, wt, wh, ww)
    g = g.transpose(0, 1, 5, 2, 6, 3, 7, 4).reshape(N, T, H, W, C)
    return g


# -------------------------------------------------------------- concatenation

def concat(a, b, axis=-1):
    ax = axis % a.ndim
    if a.ndim != b.ndim or any(sa != sb for i, (sa, sb) in enumerate(zip(a.shape, b.shape))
                               if i != ax):
        raise DimensionError(f"cannot concatenate shapes {a.shape} and {b.shape} "
                             f"along axis {ax}")
    y = np.concatenate([a, b], axis=ax)
    return y, OpCache("concat", split=a.shape[ax], axis=ax)


def concat_grad(gy, cache: OpCache):
    d = cache.take("concat")
    ga, gb = np.split(gy, [d["split"]], axis=d["axis"])
    return ga, gb


# ------------------------------------------------------------------ pointwise

def sigmoid(x):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    y[~pos] = e / (1.0 + e)
    # keep outputs inside the open interval even where float64 saturates
    return np.clip(y, _SIG_LO, _ONE_MINUS)


def _tanh(x):
    return np.clip(np.tanh(x), -_ONE_MINUS, _ONE_MINUS)


UNARY = ("sigmoid", "tanh", "relu", "leaky_relu")
BINARY = ("add", "hadamard")


def pointwise(x, kind: str, other=None, slope: float = 0.01):
    """Elementwise op. Unary: sigmoid, tanh, relu, leaky_relu. Binary: add, hadamard."""
    if kind in BINARY:
        if other is None or np.shape(other) != np.shape(x):
            raise DimensionError(f"{kind}: operand shapes {np.shape(x)} and "
                                 f"{np.shape(other)} differ")
        if kind == "add":
            return x + other, OpCache("pointwise", kind=kind)
        return x * other, OpCache("pointwise", kind=kind, x=x, other=other)
    if kind == "sigmoid":
        y = sigmoid(x)
        return y, OpCache("pointwise", kind=kind, y=y)
    if kind == "tanh":
        y = _tanh(x)
        return y, OpCache("pointwise", kind=kind, y=y)
    if kind == "relu":
        _record(x > 0)
        return np.maximum(x, 0.0), OpCache("pointwise", kind=kind, mask=x > 0)
    if kind == "leaky_relu":
        mask = x > 0
        _record(mask)
        return np.where(mask, x, slope * x), OpCache("pointwise", kind=kind, mask=mask,
                                                     slope=slope)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def pointwise_grad(gy, cache: OpCache):
    """Gradient tuple: ``(gx,)`` for unary kinds, ``(gx, g_other)`` for binary."""
    d = cache.take("pointwise")
    kind = d["kind"]
    if kind == "add":
        return gy, gy
    if kind == "hadamard":
        return gy * d["other"], gy * d["x"]
    if kind == "sigmoid":
        y = d["y"]
        return (gy * y * (1.0 - y),)
    if kind == "tanh":
        y = d["y"]
        return (gy * (1.0 - y * y),)
    if kind == "relu":
        return (np.where(d["mask"], gy, 0.0),)
    return (np.where(d["mask"], gy, d["slope"] * gy),)


def as_tensor(a, shape: Optional[tuple] = None) -> np.ndarray:
    """Float64 copy of ``a``; rejects non-finite entries."""
    t = np.array(a, dtype=np.float64)
    if shape is not None:
        t = t.reshape(shape)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor entries must be finite")
    return t
