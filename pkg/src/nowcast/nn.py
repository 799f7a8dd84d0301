"""Network building blocks: parameters, initialization, batch norm, layers, checkpoints."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, FormatError, LengthError
from .ops import ConvSpec, OpCache


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape differs from value shape")

    def zero_grad(self):
        self.grad[...] = 0.0


class RngState:
    """Counter-based splittable generator: (seed, counter) fixes every stream."""

    def __init__(self, seed: int = 0, counter: int = 0):
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.counter = int(counter)

    def generator(self) -> np.random.Generator:
        g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.counter])))
        self.counter += 1
        return g

    def split(self) -> "RngState":
        child_seed = int(self.generator().integers(0, 2 ** 63))
        return RngState(child_seed)


def fans(shape) -> Tuple[int, int]:
    """(fan_in, fan_out) for a weight laid out [*kernel, cin, cout]."""
    shape = tuple(shape)
    if len(shape) < 2:
        raise ConfigError(f"cannot infer fans from shape {shape}")
    receptive = int(np.prod(shape[:-2]))
    return receptive * shape[-2], receptive * shape[-1]


def xavier_init(shape, rng: RngState) -> np.ndarray:
    fan_in, fan_out = fans(shape)
    if fan_in == 0 or fan_out == 0:
        raise ConfigError(f"zero fan for shape {tuple(shape)}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.generator().uniform(-bound, bound, size=shape)


# ----------------------------------------------------------------- batch norm

class BatchNorm:
    """Per-channel batch normalization with exponential running statistics."""

    def __init__(self, name: str, channels: int, decay: float = 0.9, eps: float = 1e-5):
        if not 0 < decay < 1:
            raise ConfigError("decay must lie in (0, 1)")
        self.name = name
        self.gamma = Param(f"{name}.gamma", np.ones(channels))
        self.beta = Param(f"{name}.beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.decay = decay
        self.eps = eps
        self.trained = False
        # set when inference ran on the initial (0, 1) running statistics
        self.stale_inference = False

    @property
    def channels(self) -> int:
        return self.gamma.value.shape[0]

    def params(self) -> List[Param]:
        return [self.gamma, self.beta]

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x, train: bool):
        if x.shape[-1] != self.channels:
            raise DimensionError(f"{self.name}: input has {x.shape[-1]} channels, "
                                 f"expected {self.channels}")
        axes = tuple(range(x.ndim - 1))
        if train:
            mu = x.mean(axis=axes)
            xc = x - mu
            var = (xc * xc).mean(axis=axes)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = xc * inv
            flat = np.ptp(x.reshape(-1, x.shape[-1]), axis=0) == 0
            if flat.any():
                # constant channels normalize to exactly zero
                xhat[..., flat] = 0.0
            self.running_mean[...] = self.decay * self.running_mean + (1 - self.decay) * mu
            self.running_var[...] = self.decay * self.running_var + (1 - self.decay) * var
            self.trained = True
        else:
            if not self.trained:
                self.stale_inference = True
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv
        y = self.gamma.value * xhat + self.beta.value
        return y, OpCache("batchnorm", xhat=xhat, inv=inv, train=train)

    def backward(self, gy, cache: OpCache):
        d = cache.take("batchnorm")
        xhat, inv = d["xhat"], d["inv"]
        axes = tuple(range(gy.ndim - 1))
        self.gamma.grad += (gy * xhat).sum(axis=axes)
        self.beta.grad += gy.sum(axis=axes)
        gxhat = gy * self.gamma.value
        if not d["train"]:
            return gxhat * inv
        return inv * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))


def batchnorm(x, st: BatchNorm, mode: str = "train"):
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    return st.forward(x, mode == "train")


def batchnorm_grad(gy, cache: OpCache, st: BatchNorm):
    """Returns (gx, g_gamma, g_beta); parameter grads are also accumulated on ``st``."""
    g0, b0 = st.gamma.grad.copy(), st.beta.grad.copy()
    gx = st.backward(gy, cache)
    return gx, st.gamma.grad - g0, st.beta.grad - b0


# ---------------------------------------------------------------------- layers

class Conv:
    """Convolution (or transposed convolution) layer owning its weight and bias."""

    def __init__(self, name: str, spec: ConvSpec, rng: RngState, transpose: bool = False,
                 bias: bool = True):
        self.name = name
        self.spec = spec
        self.transpose = transpose
        shape = spec.weight_shape if not transpose else (
            *spec.kernel, spec.out_channels, spec.in_channels)
        self.w = Param(f"{name}.w", xavier_init(shape, rng))
        self.b = Param(f"{name}.b", np.zeros(spec.out_channels)) if bias else None

    def params(self) -> List[Param]:
        return [self.w] + ([self.b] if self.b is not None else [])

    def forward(self, x):
        b = self.b.value if self.b is not None else None
        if self.transpose:
            return ops.conv_transpose3d(x, self.w.value, self.spec, b)
        return ops.conv3d(x, self.w.value, b, self.spec)

    def backward(self, gy, cache):
        if self.transpose:
            gx, gw, gb = ops.conv_transpose3d_grad(gy, cache)
        else:
            gx, gw, gb = ops.conv3d_grad(gy, cache)
        self.w.grad += gw
        if self.b is not None:
            self.b.grad += gb
        return gx

    def zero_(self):
        self.w.value[...] = 0.0
        if self.b is not None:
            self.b.value[...] = 0.0


class ConvActBN:
    """conv -> leaky ReLU -> batch norm."""

    def __init__(self, name: str, spec: ConvSpec, rng: RngState, slope: float = 0.01,
                 decay: float = 0.9, eps: float = 1e-5):
        self.conv = Conv(f"{name}.conv", spec, rng)
        self.bn = BatchNorm(f"{name}.bn", spec.out_channels, decay, eps)
        self.slope = slope

    def params(self):
        return self.conv.params() + self.bn.params()

    def buffers(self):
        return self.bn.buffers()

    def batchnorms(self):
        return [self.bn]

    def forward(self, x, train: bool):
        h, c1 = self.conv.forward(x)
        h, c2 = ops.pointwise(h, "leaky_relu", slope=self.slope)
        y, c3 = self.bn.forward(h, train)
        return y, (c1, c2, c3)

    def backward(self, gy, cache):
        c1, c2, c3 = cache
        g = self.bn.backward(gy, c3)
        (g,) = ops.pointwise_grad(g, c2)
        return self.conv.backward(g, c1)


# ------------------------------------------------------------------ checkpoint

NCP_MAGIC = b"NCP1"
NCP_VERSION = 1


def encode_checkpoint(config: Dict[str, str], arrays: Dict[str, np.ndarray]) -> bytes:
    """Serialize key=value config text plus named float64 arrays."""
    text = "".join(f"{k}={v}\n" for k, v in config.items()).encode("utf-8")
    parts = [NCP_MAGIC, struct.pack("<II", NCP_VERSION, len(text)), text,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise LengthError(f"checkpoint truncated at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != NCP_MAGIC:
        raise FormatError("bad checkpoint magic, expected b'NCP1'")
    version, tlen = struct.unpack("<II", take(8))
    if version != NCP_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config = {}
    for line in bytes(take(tlen)).decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        config[k] = v
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise LengthError(f"{len(view) - pos} trailing bytes after checkpoint payload")
    return config, arrays


def save_checkpoint(path, config, arrays) -> None:
    Path(path).write_bytes(encode_checkpoint(config, arrays))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def unique_names(params: Iterable[Param]) -> None:
    seen = set()
    for p in params:
        if p.name in seen:
            raise ConfigError(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)
