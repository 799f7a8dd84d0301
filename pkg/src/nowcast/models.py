"""Nowcasting architectures.

Three convolutional encoder-decoder variants (plain, residual head, dual head)
and two ConvLSTM variants (plain, residual head). Every model maps a model-space
input of shape [N, n_in, H, W, 1] to [N, n_out, H, W, 1] and supports an
explicit backward pass over the cache recorded by ``forward``.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import BatchNorm, Conv, ConvActBN, Param, RngState, unique_names, xavier_init
from .ops import ConvSpec, OpCache


class ModelKind(str, enum.Enum):
    CNC = "CNC"
    CNC_R = "CNC-R"
    CNC_D = "CNC-D"
    RNC = "RNC"
    RNC_R = "RNC-R"

    @classmethod
    def parse(cls, s: str) -> "ModelKind":
        key = s.strip().upper().replace("_", "-")
        for k in cls:
            if k.value == key:
                return k
        raise ConfigError(f"unknown model kind {s!r}; choose from "
                          f"{', '.join(k.value for k in cls)}")


@dataclass(frozen=True)
class ModelConfig:
    kind: ModelKind = ModelKind.CNC
    height: int = 64
    width: int = 64
    depth: int = 2
    base_channels: int = 8
    hidden_channels: int = 8
    lstm_layers: int = 2
    kernel_t: int = 3
    kernel_s: int = 3
    n_in: int = 9
    n_out: int = 3
    slope: float = 0.01
    bn_decay: float = 0.9
    bn_eps: float = 1e-5
    eq5_literal: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind.parse(str(getattr(self.kind, "value",
                                                                      self.kind))))
        if self.n_in < 1 or self.n_out < 1:
            raise ConfigError("n_in and n_out must be >= 1")
        if self.kind.value.startswith("CNC"):
            if self.depth < 1:
                raise ConfigError("depth must be >= 1")
            f = 2 ** self.depth
            if self.height % f or self.width % f:
                raise ConfigError(f"height/width ({self.height}x{self.width}) must be "
                                  f"divisible by 2^depth = {f}")
            if self.n_in % self.n_out:
                raise ConfigError("n_in must be a multiple of n_out for temporal compression")
        if self.kernel_s % 2 == 0 or self.kernel_t % 2 == 0:
            raise ConfigError("kernel sizes must be odd to keep 'same' padding")
        if self.lstm_layers < 1:
            raise ConfigError("lstm_layers must be >= 1")

    def to_text(self) -> Dict[str, str]:
        d = asdict(self)
        d["kind"] = self.kind.value
        return {k: str(v) for k, v in d.items()}

    @classmethod
    def from_text(cls, d: Dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "kind":
                kw[f.name] = ModelKind.parse(v)
            elif f.type in ("bool", bool):
                kw[f.name] = v == "True"
            elif f.type in ("float", float):
                kw[f.name] = float(v)
            else:
                kw[f.name] = int(v)
        return cls(**kw)


class Model:
    """Shared bookkeeping: parameter lists, state dicts, cache integrity."""

    cfg: ModelConfig

    def params(self) -> List[Param]:
        raise NotImplementedError

    def batchnorms(self) -> List[BatchNorm]:
        return []

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for bn in self.batchnorms():
            out.update(bn.buffers())
        return out

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        d = {p.name: p.value for p in self.params()}
        d.update(self.buffers())
        return d

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        targets = {p.name: p.value for p in self.params()}
        targets.update(self.buffers())
        missing = set(targets) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, t in targets.items():
            a = arrays[name]
            if a.shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {a.shape}, model {t.shape}")
            t[...] = a
        for bn in self.batchnorms():
            bn.trained = True

    def _check_input(self, x):
        c = self.cfg
        want = (c.n_in, c.height, c.width, 1)
        if x.ndim != 5 or x.shape[1:] != want:
            raise DimensionError(f"{c.kind.value} expects input [N, {c.n_in}, {c.height}, "
                                 f"{c.width}, 1], got {x.shape}")

    def forward(self, x, train: bool = False) -> Tuple[np.ndarray, OpCache]:
        self._check_input(x)
        y, inner = self._forward(x, train)
        return y, OpCache("model", inner=inner, x_shape=x.shape, y_shape=y.shape)

    def backward(self, cache: OpCache, gy) -> np.ndarray:
        """Accumulate parameter gradients; return the gradient w.r.t. the input."""
        d = cache.take("model")
        if gy.shape != d["y_shape"]:
            raise DimensionError(f"loss gradient shape {gy.shape}, expected {d['y_shape']}")
        return self._backward(d["inner"], gy, d["x_shape"])

    def predict(self, x) -> np.ndarray:
        return self.forward(x, train=False)[0]

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params())


def model_backward(model: Model, cache: OpCache, loss_grad) -> Dict[str, np.ndarray]:
    """Fill every ``Param.grad`` from a single forward cache and return them by name."""
    model.zero_grad()
    model.backward(cache, loss_grad)
    return {p.name: p.grad for p in model.params()}


# ------------------------------------------------------------ encoder/decoder

class EncoderBlock:
    def __init__(self, name, cin, cout, cfg: ModelConfig, rng: RngState):
        k = (cfg.kernel_t, cfg.kernel_s, cfg.kernel_s)
        pad = tuple(i // 2 for i in k)
        self.conv1 = ConvActBN(f"{name}.conv1", ConvSpec(k, 1, pad, cin, cout), rng,
                               cfg.slope, cfg.bn_decay, cfg.bn_eps)
        self.conv2 = ConvActBN(f"{name}.conv2", ConvSpec(k, 1, pad, cout, cout), rng,
                               cfg.slope, cfg.bn_decay, cfg.bn_eps)
        self.pool = (1, 2, 2)
        self.out_channels = cout

    def params(self):
        return self.conv1.params() + self.conv2.params()

    def batchnorms(self):
        return self.conv1.batchnorms() + self.conv2.batchnorms()

    def forward(self, x, train):
        h, c1 = self.conv1.forward(x, train)
        skip, c2 = self.conv2.forward(h, train)
        b, c3 = ops.maxpool(skip, self.pool)
        return b, skip, (c1, c2, c3)

    def backward(self, gb, gskip, cache):
        c1, c2, c3 = cache
        g = ops.maxpool_grad(gb, c3) + gskip
        g = self.conv2.backward(g, c2)
        return self.conv1.backward(g, c1)


class DecoderBlock:
    def __init__(self, name, cin, cskip, cout, cfg: ModelConfig, rng: RngState):
        self.name = name
        k = (cfg.kernel_t, cfg.kernel_s, cfg.kernel_s)
        pad = tuple(i // 2 for i in k)
        self.deconv = Conv(f"{name}.deconv", ConvSpec((1, 2, 2), (1, 2, 2), 0, cin, cskip),
                           rng, transpose=True)
        self.conv1 = ConvActBN(f"{name}.conv1", ConvSpec(k, 1, pad, 2 * cskip, cout), rng,
                               cfg.slope, cfg.bn_decay, cfg.bn_eps)
        self.conv2 = ConvActBN(f"{name}.conv2", ConvSpec(k, 1, pad, cout, cout), rng,
                               cfg.slope, cfg.bn_decay, cfg.bn_eps)

    def params(self):
        return self.deconv.params() + self.conv1.params() + self.conv2.params()

    def batchnorms(self):
        return self.conv1.batchnorms() + self.conv2.batchnorms()

    def forward(self, x, skip, train):
        up, c0 = self.deconv.forward(x)
        if up.shape[:4] != skip.shape[:4]:
            raise DimensionError(f"{self.name}: upsampled shape {up.shape[:4]} does not "
                                 f"match skip shape {skip.shape[:4]}")
        h, cc = ops.concat(up, skip)
        h, c1 = self.conv1.forward(h, train)
        y, c2 = self.conv2.forward(h, train)
        return y, (c0, cc, c1, c2)

    def backward(self, gy, cache):
        """Returns (gradient w.r.t. the upsampled input, gradient w.r.t. skip)."""
        c0, cc, c1, c2 = cache
        g = self.conv2.backward(gy, c2)
        g = self.conv1.backward(g, c1)
        gup, gskip = ops.concat_grad(g, cc)
        return self.deconv.backward(gup, c0), gskip


def encoder_block_forward(I, blk: EncoderBlock, train: bool = True):
    b, skip, cache = blk.forward(I, train)
    return b, skip, OpCache("encoder_block", inner=cache)


def encoder_block_backward(gb, gskip, cache: OpCache, blk: EncoderBlock):
    return blk.backward(gb, gskip, cache.take("encoder_block")["inner"])


def decoder_block_forward(I_up, skip, blk: DecoderBlock, train: bool = True):
    y, cache = blk.forward(I_up, skip, train)
    return y, OpCache("decoder_block", inner=cache)


def decoder_block_backward(gy, cache: OpCache, blk: DecoderBlock):
    return blk.backward(gy, cache.take("decoder_block")["inner"])


class Decoder:
    """Decoder stack plus the head that compresses time from n_in to n_out."""

    def __init__(self, name, enc_channels: List[int], cfg: ModelConfig, rng: RngState):
        self.blocks = []
        cin = enc_channels[-1]
        for i in reversed(range(len(enc_channels))):
            c = enc_channels[i]
            self.blocks.append(DecoderBlock(f"{name}.dec{i}", cin, c, c, cfg, rng))
            cin = c
        r = cfg.n_in // cfg.n_out
        ks = cfg.kernel_s
        self.head = Conv(f"{name}.head",
                         ConvSpec((r, ks, ks), (r, 1, 1), (0, ks // 2, ks // 2), cin, 1), rng)

    def params(self):
        ps = []
        for b in self.blocks:
            ps += b.params()
        return ps + self.head.params()

    def batchnorms(self):
        out = []
        for b in self.blocks:
            out += b.batchnorms()
        return out

    def forward(self, bottom, skips, train):
        h = bottom
        caches = []
        for blk, skip in zip(self.blocks, reversed(skips)):
            h, c = blk.forward(h, skip, train)
            caches.append(c)
        y, ch = self.head.forward(h)
        return y, (caches, ch)

    def backward(self, gy, cache):
        """Returns (gradient w.r.t. bottom, list of skip gradients in encoder order)."""
        caches, ch = cache
        g = self.head.backward(gy, ch)
        gskips = []
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            g, gs = blk.backward(g, c)
            gskips.append(gs)
        return g, gskips


class Encoder:
    def __init__(self, cfg: ModelConfig, rng: RngState):
        self.channels = [cfg.base_channels * 2 ** i for i in range(cfg.depth)]
        self.blocks = []
        cin = 1
        for i, c in enumerate(self.channels):
            self.blocks.append(EncoderBlock(f"enc{i}", cin, c, cfg, rng))
            cin = c

    def params(self):
        ps = []
        for b in self.blocks:
            ps += b.params()
        return ps

    def batchnorms(self):
        out = []
        for b in self.blocks:
            out += b.batchnorms()
        return out

    def forward(self, x, train):
        h = x
        skips, caches = [], []
        for blk in self.blocks:
            h, skip, c = blk.forward(h, train)
            skips.append(skip)
            caches.append(c)
        return h, skips, caches

    def backward(self, gbottom, gskips, caches):
        g = gbottom
        for blk, gs, c in zip(reversed(self.blocks), reversed(gskips), reversed(caches)):
            g = blk.backward(g, gs, c)
        return g


class CNC(Model):
    """Encoder-decoder over the whole input sequence.

    ``residual`` adds the last input frame to every output step; ``dual``
    averages a direct branch and a residual branch sharing one encoder.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = RngState(cfg.seed)
        self.residual = cfg.kind is ModelKind.CNC_R
        self.dual = cfg.kind is ModelKind.CNC_D
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder("dec", self.encoder.channels, cfg, rng)
        self.decoder_res = (Decoder("res", self.encoder.channels, cfg, rng)
                            if self.dual else None)
        unique_names(self.params())

    def params(self):
        ps = self.encoder.params() + self.decoder.params()
        if self.dual:
            ps += self.decoder_res.params()
        return ps

    def batchnorms(self):
        out = self.encoder.batchnorms() + self.decoder.batchnorms()
        if self.dual:
            out += self.decoder_res.batchnorms()
        return out

    def zero_terminal_(self):
        self.decoder.head.zero_()
        if self.dual:
            self.decoder_res.head.zero_()

    def branches(self, x, train=False):
        """Resolved outputs of the direct and residual branches (dual head only)."""
        bottom, skips, _ = self.encoder.forward(x, train)
        a, _ = self.decoder.forward(bottom, skips, train)
        r, _ = self.decoder_res.forward(bottom, skips, train)
        return a, r + x[:, -1:]

    def _forward(self, x, train):
        bottom, skips, ce = self.encoder.forward(x, train)
        y, cd = self.decoder.forward(bottom, skips, train)
        last = x[:, -1:]
        cr = None
        if self.residual:
            y = y + last
        elif self.dual:
            r, cr = self.decoder_res.forward(bottom, skips, train)
            y = 0.5 * (y + (r + last))
        return y, (ce, cd, cr)

    def _backward(self, cache, gy, x_shape):
        ce, cd, cr = cache
        gx = np.zeros(x_shape)
        if self.dual:
            g = 0.5 * gy
            gb, gskips = self.decoder.backward(g, cd)
            gb2, gskips2 = self.decoder_res.backward(g, cr)
            gb = gb + gb2
            gskips = [a + b for a, b in zip(gskips, gskips2)]
            gx[:, -1:] += g.sum(axis=1, keepdims=True)
        else:
            gb, gskips = self.decoder.backward(gy, cd)
            if self.residual:
                gx[:, -1:] += gy.sum(axis=1, keepdims=True)
        gx += self.encoder.backward(gb, gskips, ce)
        return gx


# ---------------------------------------------------------------- ConvLSTM

GATES = ("i", "f", "c", "o")


@dataclass
class ConvLSTMState:
    a: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.a.shape != self.c.shape:
            raise DimensionError("hidden and cell tensors must share a shape")


class ConvLSTMParams:
    """Input/hidden kernels, peephole weights and biases of one ConvLSTM layer."""

    def __init__(self, name, cin, hidden, height, width, kernel, rng: RngState):
        self.name = name
        self.cin, self.hidden = cin, hidden
        pad = (0, kernel // 2, kernel // 2)
        self.spec_x = ConvSpec((1, kernel, kernel), 1, pad, cin, 4 * hidden)
        self.spec_a = ConvSpec((1, kernel, kernel), 1, pad, hidden, 4 * hidden)
        self.W_x = {g: Param(f"{name}.W_x{g}", xavier_init((1, kernel, kernel, cin, hidden), rng))
                    for g in GATES}
        self.W_a = {g: Param(f"{name}.W_a{g}",
                             xavier_init((1, kernel, kernel, hidden, hidden), rng))
                    for g in GATES}
        self.W_c = {g: Param(f"{name}.W_c{g}", np.zeros((height, width, hidden)))
                    for g in ("i", "f", "o")}
        self.b = {g: Param(f"{name}.b_{g}", np.zeros(hidden)) for g in GATES}

    def params(self) -> List[Param]:
        return (list(self.W_x.values()) + list(self.W_a.values()) + list(self.W_c.values())
                + list(self.b.values()))

    def zero_(self):
        for p in self.params():
            p.value[...] = 0.0

    def stacked(self):
        wx = np.concatenate([self.W_x[g].value for g in GATES], axis=-1)
        wa = np.concatenate([self.W_a[g].value for g in GATES], axis=-1)
        b = np.concatenate([self.b[g].value for g in GATES])
        return wx, wa, b


def convlstm_step(x_t, prev: ConvLSTMState, p: ConvLSTMParams, eq5_literal: bool = False):
    """One ConvLSTM update on [N, 1, H, W, C] tensors.

    With ``eq5_literal`` the previous cell is gated by the output gate instead
    of the forget gate, and the output-gate peephole then reads the previous
    cell since the new one is not yet known.
    """
    if x_t.shape[:4] != prev.a.shape[:4]:
        raise DimensionError(f"input {x_t.shape} and state {prev.a.shape} disagree")
    hc = p.hidden
    wx, wa, b = p.stacked()
    zx, cx = ops.conv3d(x_t, wx, None, p.spec_x)
    za, ca = ops.conv3d(prev.a, wa, None, p.spec_a)
    z = zx + za + b
    zi, zf, zc, zo = (z[..., k * hc:(k + 1) * hc] for k in range(4))
    cp = prev.c
    i = ops.sigmoid(zi + p.W_c["i"].value * cp)
    f = ops.sigmoid(zf + p.W_c["f"].value * cp)
    g = np.tanh(zc)
    if eq5_literal:
        o = ops.sigmoid(zo + p.W_c["o"].value * cp)
        c = o * cp + i * g
    else:
        c = f * cp + i * g
        o = ops.sigmoid(zo + p.W_c["o"].value * c)
    tc = np.tanh(c)
    a = o * tc
    cache = OpCache("convlstm_step", cx=cx, ca=ca, cp=cp, i=i, f=f, g=g, o=o, c=c, tc=tc,
                    literal=eq5_literal)
    return ConvLSTMState(a, c), cache


def convlstm_step_grad(ga, gc, cache: OpCache, p: ConvLSTMParams):
    """Backward of one step given gradients w.r.t. the new (a, c).

    Accumulates parameter gradients on ``p`` and returns
    (gradient w.r.t. x_t, w.r.t. previous a, w.r.t. previous c).
    """
    d = cache.take("convlstm_step")
    cp, i, f, g, o, c, tc = (d[k] for k in ("cp", "i", "f", "g", "o", "c", "tc"))
    red = (0, 1)  # peepholes are shared over batch and the singleton time axis
    go = ga * tc
    gc = gc + ga * o * (1.0 - tc * tc)
    gzo = go * o * (1.0 - o)
    Wco, Wci, Wcf = p.W_c["o"].value, p.W_c["i"].value, p.W_c["f"].value
    if d["literal"]:
        gcp = gc * o
        gzo = gzo + gc * cp * o * (1.0 - o)
        p.W_c["o"].grad += (gzo * cp).sum(axis=red)
        gcp = gcp + gzo * Wco
        gzf = np.zeros_like(f)
    else:
        p.W_c["o"].grad += (gzo * c).sum(axis=red)
        gc = gc + gzo * Wco
        gcp = gc * f
        gzf = gc * cp * f * (1.0 - f)
        p.W_c["f"].grad += (gzf * cp).sum(axis=red)
        gcp = gcp + gzf * Wcf
    gzi = gc * g * i * (1.0 - i)
    p.W_c["i"].grad += (gzi * cp).sum(axis=red)
    gcp = gcp + gzi * Wci
    gzc = gc * i * (1.0 - g * g)
    gz = np.concatenate([gzi, gzf, gzc, gzo], axis=-1)
    gx, gwx, _ = ops.conv3d_grad(gz, d["cx"])
    gap, gwa, _ = ops.conv3d_grad(gz, d["ca"])
    gb = gz.sum(axis=(0, 1, 2, 3))
    hc = p.hidden
    for k, name in enumerate(GATES):
        sl = slice(k * hc, (k + 1) * hc)
        p.W_x[name].grad += gwx[..., sl]
        p.W_a[name].grad += gwa[..., sl]
        p.b[name].grad += gb[sl]
    return gx, gap, gcp


class RNC(Model):
    """Stacked ConvLSTM unrolled over the inputs, then run in generation mode.

    Generation step j consumes the previous emitted frame (the last observed
    frame for j = 1) and emits a frame through a 1x1 head on the top hidden
    state. With a residual head each emission is head + last observed frame,
    and that resolved frame is what gets fed back.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = RngState(cfg.seed)
        self.residual = cfg.kind is ModelKind.RNC_R
        self.layers = []
        cin = 1
        for l in range(cfg.lstm_layers):
            self.layers.append(ConvLSTMParams(f"lstm{l}", cin, cfg.hidden_channels, cfg.height,
                                              cfg.width, cfg.kernel_s, rng))
            cin = cfg.hidden_channels
        self.head = Conv("head", ConvSpec(1, 1, 0, cfg.hidden_channels, 1), rng)
        unique_names(self.params())

    def params(self):
        ps = []
        for l in self.layers:
            ps += l.params()
        return ps + self.head.params()

    def zero_terminal_(self):
        self.head.zero_()

    def zero_(self):
        for p in self.params():
            p.value[...] = 0.0

    def _step(self, inp, states):
        caches = []
        h = inp
        new = []
        for p, st in zip(self.layers, states):
            st2, c = convlstm_step(h, st, p, self.cfg.eq5_literal)
            new.append(st2)
            caches.append(c)
            h = st2.a
        return new, caches

    def _forward(self, x, train):
        N = x.shape[0]
        c = self.cfg
        shape = (N, 1, c.height, c.width, c.hidden_channels)
        states = [ConvLSTMState(np.zeros(shape), np.zeros(shape)) for _ in self.layers]
        step_caches = []
        self.state_shapes = []
        for t in range(c.n_in):
            states, sc = self._step(x[:, t:t + 1], states)
            step_caches.append(sc)
            self.state_shapes.append([s.a.shape for s in states])
        last = x[:, -1:]
        fb = last
        outs, head_caches = [], []
        for _ in range(c.n_out):
            states, sc = self._step(fb, states)
            step_caches.append(sc)
            self.state_shapes.append([s.a.shape for s in states])
            e, hc = self.head.forward(states[-1].a)
            if self.residual:
                e = e + last
            outs.append(e)
            head_caches.append(hc)
            fb = e
        return np.concatenate(outs, axis=1), (step_caches, head_caches, shape)

    def _backward(self, cache, gy, x_shape):
        step_caches, head_caches, shape = cache
        c = self.cfg
        L = len(self.layers)
        gx = np.zeros(x_shape)
        ga = [np.zeros(shape) for _ in range(L)]
        gc = [np.zeros(shape) for _ in range(L)]
        g_fb = np.zeros((x_shape[0], 1, c.height, c.width, 1))  # grad w.r.t. next step's input
        for t in reversed(range(c.n_in + c.n_out)):
            if t >= c.n_in:
                j = t - c.n_in
                # emission j feeds step t + 1 as input
                ge = gy[:, j:j + 1] + g_fb
                if self.residual:
                    gx[:, -1:] += ge
                ga[-1] = ga[-1] + self.head.backward(ge, head_caches[j])
            g_in = None
            for l in reversed(range(L)):
                gin_l, ga[l], gc[l] = convlstm_step_grad(ga[l], gc[l], step_caches[t][l],
                                                         self.layers[l])
                if l > 0:
                    ga[l - 1] = ga[l - 1] + gin_l
                else:
                    g_in = gin_l
            if t >= c.n_in:
                if t == c.n_in:
                    gx[:, -1:] += g_in
                    g_fb = np.zeros_like(g_fb)
                else:
                    g_fb = g_in
            else:
                gx[:, t:t + 1] += g_in
        return gx


def build_model(cfg: ModelConfig) -> Model:
    if cfg.kind in (ModelKind.RNC, ModelKind.RNC_R):
        return RNC(cfg)
    return CNC(cfg)
