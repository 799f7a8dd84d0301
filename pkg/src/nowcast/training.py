"""MSE loss, Adam, and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .models import Model, ModelKind
from .nn import Param

log = logging.getLogger(__name__)


def mse_loss(pred, target) -> Tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Sequence[Param], st: AdamState, h: AdamHyper = AdamHyper()) -> None:
    """One bias-corrected Adam update of every parameter from its ``grad``."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {p.name}")
    st.t += 1
    c1 = 1.0 - h.beta1 ** st.t
    c2 = 1.0 - h.beta2 ** st.t
    for p in params:
        m = st.m.get(p.name)
        if m is None:
            m = st.m[p.name] = np.zeros_like(p.value)
            st.v[p.name] = np.zeros_like(p.value)
        v = st.v[p.name]
        m *= h.beta1
        m += (1.0 - h.beta1) * p.grad
        v *= h.beta2
        v += (1.0 - h.beta2) * p.grad * p.grad
        p.value -= h.lr * (m / c1) / (np.sqrt(v / c2) + h.eps)


def clip_global_norm(params: Sequence[Param], max_norm: float) -> bool:
    """Rescale gradients to ``max_norm`` if their global L2 norm exceeds it."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total <= max_norm:
        return False
    scale = max_norm / total
    for p in params:
        p.grad *= scale
    return True


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 0           # 0 disables early stopping
    clip_norm: Optional[float] = 5.0  # applied to recurrent models only

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float
    clip_events: int


@dataclass
class History:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    train_index: Optional[np.ndarray] = None
    val_index: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.records)

    @property
    def train_loss(self):
        return [r.train_loss for r in self.records]

    @property
    def val_loss(self):
        return [r.val_loss for r in self.records]

    @property
    def best_val_loss(self) -> Optional[float]:
        if self.best_epoch is None:
            return None
        return self.records[self.best_epoch - 1].val_loss

    def deterministic_rows(self):
        """Rows without the wall-clock column."""
        return [(r.epoch, r.train_loss, r.val_loss, r.clip_events) for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "seconds", "clip_events"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), _fmt(r.val_loss),
                            f"{r.seconds:.3f}", r.clip_events])


def _fmt(v):
    return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(v)


def split_indices(n: int, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 0x5A17]).permutation(n)
    n_val = int(round(n * val_fraction))
    if val_fraction > 0 and n > 1:
        n_val = max(1, n_val)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def model_space_loss(model: Model, x, y, batch_size: int = 8) -> float:
    """Pooled MSE of ``model`` in inference mode over model-space arrays."""
    sse = 0.0
    count = 0
    for s in range(0, len(x), batch_size):
        pred = model.predict(x[s:s + batch_size])
        d = pred - y[s:s + batch_size]
        sse += float(np.sum(d * d))
        count += d.size
    return sse / count


def train(model: Model, x, y, tc: TrainConfig = TrainConfig(), h: AdamHyper = AdamHyper(),
          val: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[Model, History]:
    """Fit ``model`` on model-space arrays x [S, n_in, H, W, 1], y [S, n_out, H, W, 1].

    Unless ``val`` is given, a seeded ``val_fraction`` of samples is held out.
    The parameters of the best validation epoch are restored on exit.
    """
    if len(x) == 0:
        raise ConfigError("training needs at least one sample")
    if val is None:
        tr_idx, va_idx = split_indices(len(x), tc.val_fraction, tc.seed)
        xv, yv = x[va_idx], y[va_idx]
        xt, yt = x[tr_idx], y[tr_idx]
    else:
        tr_idx, va_idx = np.arange(len(x)), None
        xt, yt = x, y
        xv, yv = val
    hist = History(train_index=tr_idx, val_index=va_idx)
    if tc.epochs == 0:
        return model, hist
    params = model.params()
    recurrent = model.cfg.kind in (ModelKind.RNC, ModelKind.RNC_R)
    st = AdamState()
    best, best_state = math.inf, None
    since_best = 0
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([tc.seed, epoch]).permutation(len(xt))
        total, seen, clips = 0.0, 0, 0
        for bi, s in enumerate(range(0, len(order), tc.batch_size)):
            idx = np.sort(order[s:s + tc.batch_size])
            xb, yb = xt[idx], yt[idx]
            model.zero_grad()
            pred, cache = model.forward(xb, train=True)
            loss, g = mse_loss(pred, yb)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            model.backward(cache, g)
            if recurrent and tc.clip_norm and clip_global_norm(params, tc.clip_norm):
                clips += 1
            adam_step(params, st, h)
            total += loss * len(idx)
            seen += len(idx)
        train_loss = total / seen
        val_loss = model_space_loss(model, xv, yv, tc.batch_size) if len(xv) else None
        rec = EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0, clips)
        hist.records.append(rec)
        log.info("epoch %d train %.6f val %s (%.1fs, %d clips)", epoch, train_loss,
                 val_loss, rec.seconds, clips)
        score = val_loss if val_loss is not None else train_loss
        if score < best:
            best, since_best = score, 0
            hist.best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        else:
            since_best += 1
            if tc.patience and since_best >= tc.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, hist
