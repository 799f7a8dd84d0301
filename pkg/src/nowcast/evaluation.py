"""Skill scores, the recursive feedback forecaster, and per-lead aggregation.

Undefined scores (zero denominators) are reported as ``None`` and written as
``NA`` in CSV output; they never propagate as NaN.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError
from .grid import Sample, inverse_transform, transform

SCORE_NAMES = ("mse", "bias", "r2", "cc", "pod", "far", "hss", "acc")


@dataclass(frozen=True)
class ContingencyTable:
    hits: int
    false_alarms: int
    misses: int
    correct_negatives: int

    def __post_init__(self):
        if min(self.hits, self.false_alarms, self.misses, self.correct_negatives) < 0:
            raise ValueError("contingency counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.hits + self.false_alarms + self.misses + self.correct_negatives

    def __add__(self, other: "ContingencyTable") -> "ContingencyTable":
        return ContingencyTable(self.hits + other.hits,
                                self.false_alarms + other.false_alarms,
                                self.misses + other.misses,
                                self.correct_negatives + other.correct_negatives)


def contingency(pred, obs, threshold: float = 0.1) -> ContingencyTable:
    pred = np.asarray(pred)
    obs = np.asarray(obs)
    if pred.shape != obs.shape:
        raise DimensionError(f"prediction {pred.shape} and observation {obs.shape} differ")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    p = pred >= threshold
    o = obs >= threshold
    H = int(np.count_nonzero(p & o))
    F = int(np.count_nonzero(p & ~o))
    M = int(np.count_nonzero(~p & o))
    return ContingencyTable(H, F, M, p.size - H - F - M)


def _ratio(num, den) -> Optional[float]:
    return None if den == 0 else num / den


def categorical_scores(t: ContingencyTable) -> Dict[str, Optional[float]]:
    H, F, M, Z = t.hits, t.false_alarms, t.misses, t.correct_negatives
    hss_den = (H + M) * (M + Z) + (H + F) * (F + Z)
    return {
        "pod": _ratio(H, H + M),
        "far": _ratio(F, H + F),
        "hss": _ratio(2 * (H * Z - F * M), hss_den),
        "acc": _ratio(H + Z, t.total),
    }


def continuous_scores(pred, obs, appendix_literal: bool = False) -> Dict[str, Optional[float]]:
    """MSE, bias ratio, R^2 and Pearson CC of ``pred`` (est) against ``obs``.

    With ``appendix_literal`` the bias is the relative difference
    sum(obs - est) / sum(obs) and R^2 uses mean(est) in its denominator.
    """
    est = np.asarray(pred, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    if est.shape != obs.shape:
        raise DimensionError(f"prediction and observation lengths differ: {est.size} vs {obs.size}")
    if est.size < 2:
        raise DimensionError("continuous scores need at least 2 values")
    err = obs - est
    sse = float(np.dot(err, err))
    s_obs = float(obs.sum())
    if appendix_literal:
        bias = _ratio(float(err.sum()), s_obs)
        dev = obs - est.mean()
    else:
        bias = _ratio(float(est.sum()), s_obs)
        dev = obs - obs.mean()
    ss_dev = float(np.dot(dev, dev))
    r2 = None if ss_dev == 0 else 1.0 - sse / ss_dev
    oc = obs - obs.mean()
    ec = est - est.mean()
    den = math.sqrt(float(np.dot(oc, oc)) * float(np.dot(ec, ec)))
    cc = None if den == 0 else float(np.dot(oc, ec)) / den
    if cc is not None:
        cc = max(-1.0, min(1.0, cc))
    return {"mse": sse / est.size, "bias": bias, "r2": r2, "cc": cc}


# ------------------------------------------------------------------ feedback

@dataclass(frozen=True)
class FeedbackConfig:
    cycles: int = 3
    n_in: int = 9

    def __post_init__(self):
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")


class NetForecaster:
    """Runs a network on physical-rate inputs: transform, predict, invert."""

    def __init__(self, model, batch_size: int = 8):
        self.model = model
        self.kind = model.cfg.kind.value
        self.n_in, self.n_out = model.cfg.n_in, model.cfg.n_out
        self.batch_size = batch_size

    def forecast(self, x):
        x = np.asarray(x, dtype=np.float64)
        outs = []
        for s in range(0, len(x), self.batch_size):
            xm = transform(x[s:s + self.batch_size])[..., None]
            outs.append(inverse_transform(self.model.predict(xm)[..., 0]))
        return np.concatenate(outs)


def feedback_forecast(forecaster, x, fc: FeedbackConfig = FeedbackConfig()) -> np.ndarray:
    """Extend the horizon by feeding predictions back as inputs.

    ``x`` is [N, n_in, H, W] in mm/h. Each cycle consumes the most recent
    ``n_in`` frames of (inputs ++ predictions so far). Returns
    [N, cycles * n_out, H, W] in lead-time order.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return feedback_forecast(forecaster, x[None], fc)[0]
    if x.shape[1] != fc.n_in:
        raise DataError(f"feedback input must have {fc.n_in} frames, got {x.shape[1]}")
    hist = x
    preds = []
    for _ in range(fc.cycles):
        y = np.asarray(forecaster.forecast(hist[:, -fc.n_in:]), dtype=np.float64)
        n_out = getattr(forecaster, "n_out", 3)
        if y.shape != (x.shape[0], n_out, *x.shape[2:]):
            raise DataError(f"forecaster returned shape {y.shape}, expected "
                            f"{(x.shape[0], n_out, *x.shape[2:])}")
        preds.append(y)
        hist = np.concatenate([hist, y], axis=1)
    return np.concatenate(preds, axis=1)


# ---------------------------------------------------------------- evaluation

@dataclass
class LeadMetrics:
    lead_minutes: int
    scores: Dict[str, Optional[float]]
    n_samples: int
    table: Optional[ContingencyTable] = None


@dataclass
class MetricReport:
    leads: List[LeadMetrics]
    per_sample: List[Dict] = field(default_factory=list)
    skipped: int = 0
    threshold: float = 0.1
    predictions: Optional[np.ndarray] = None  # [S, leads, H, W] when requested

    def lead_minutes(self) -> List[int]:
        return [l.lead_minutes for l in self.leads]

    def score(self, name: str) -> List[Optional[float]]:
        return [l.scores[name] for l in self.leads]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lead_minutes", *SCORE_NAMES, "n_samples"])
            for l in self.leads:
                w.writerow([l.lead_minutes, *(_fmt(l.scores[k]) for k in SCORE_NAMES),
                            l.n_samples])

    def write_per_sample_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "lead_minutes", *SCORE_NAMES])
            for r in self.per_sample:
                w.writerow([r["sample"], r["lead_minutes"],
                            *(_fmt(r[k]) for k in SCORE_NAMES)])


def _fmt(v) -> str:
    return "NA" if v is None else repr(float(v))


def evaluate(forecaster, samples: Sequence[Sample], threshold: float = 0.1,
             fc: FeedbackConfig = FeedbackConfig(cycles=1), dt_seconds: int = 1800,
             appendix_literal: bool = False, batch_size: int = 16,
             keep_predictions: bool = False) -> MetricReport:
    """All eight scores per lead time, pooled over samples, in mm/h space.

    Continuous scores pool pixels across samples; categorical scores sum the
    per-sample contingency tables. Per-sample scores are kept as well.
    Samples whose targets are shorter than the requested horizon are skipped.
    """
    n_lead = fc.cycles * getattr(forecaster, "n_out", 3)
    usable = [s for s in samples if len(s.target) >= n_lead]
    skipped = len(samples) - len(usable)
    if not usable:
        raise DataError(f"no sample has {n_lead} target frames "
                        f"({skipped} samples are too short)")
    preds, obs = [], []
    for s in range(0, len(usable), batch_size):
        chunk = usable[s:s + batch_size]
        x = np.stack([c.input_array() for c in chunk]).astype(np.float64)
        preds.append(feedback_forecast(forecaster, x, fc))
        obs.append(np.stack([c.target_array()[:n_lead] for c in chunk]).astype(np.float64))
    pred = np.concatenate(preds)
    ob = np.concatenate(obs)
    leads, per_sample = [], []
    for j in range(n_lead):
        minutes = (j + 1) * dt_seconds // 60
        scores = continuous_scores(pred[:, j], ob[:, j], appendix_literal)
        table = ContingencyTable(0, 0, 0, 0)
        for i in range(len(usable)):
            t = contingency(pred[i, j], ob[i, j], threshold)
            table = table + t
            row = {"sample": i, "lead_minutes": minutes}
            row.update(continuous_scores(pred[i, j], ob[i, j], appendix_literal))
            row.update(categorical_scores(t))
            per_sample.append(row)
        scores.update(categorical_scores(table))
        leads.append(LeadMetrics(minutes, scores, len(usable), table))
    per_sample.sort(key=lambda r: (r["sample"], r["lead_minutes"]))
    return MetricReport(leads, per_sample, skipped, threshold,
                        pred if keep_predictions else None)


# -------------------------------------------------------------------- PGM

def pgm_bytes(frame, cap: float = 20.0) -> bytes:
    """Binary greyscale (P5) image of a rain-rate frame; 255 maps to ``cap`` mm/h."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionError("PGM frames must be 2-D")
    v = np.floor(255.0 * np.minimum(np.maximum(f, 0.0), cap) / cap + 0.5).astype(np.uint8)
    H, W = f.shape
    return f"P5\n{W} {H}\n255\n".encode("ascii") + v.tobytes()


def write_pgm(path, frame, cap: float = 20.0) -> None:
    Path(path).write_bytes(pgm_bytes(frame, cap))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DataError("not a binary PGM (P5) file")
    W, H = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W)
