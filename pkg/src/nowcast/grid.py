"""Gridded precipitation sequences: NCG file I/O, windowing, synthesis, scaling.

Frames hold rain rates in mm/h. Values are kept at float32 precision, which is
what the NCG format stores, so a sequence survives a write/read cycle
bit-exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence as Seq, Tuple

import numpy as np

from .errors import ConfigError, DataError, DimensionError, FormatError, LengthError

NCG_MAGIC = b"NCG1"
NCG_VERSION = 1
NCG_HEADER = struct.Struct("<4s5I")  # magic, version, T, H, W, dt_seconds
RATE_CAP = 100.0
DEFAULT_DT = 1800


@dataclass(frozen=True)
class GridFrame:
    values: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise DimensionError(f"frame must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("frame contains non-finite values")
        if np.any(v < 0):
            raise DataError("frame contains negative rates")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Sequence:
    frames: Tuple[GridFrame, ...]
    dt_seconds: int = DEFAULT_DT

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if self.dt_seconds <= 0:
            raise ConfigError("dt_seconds must be positive")
        if not frames:
            return
        shape = frames[0].values.shape
        for i, f in enumerate(frames):
            if f.values.shape != shape:
                raise DimensionError(
                    f"frame {i} has shape {f.values.shape}, expected {shape}")
            if i and f.timestamp - frames[i - 1].timestamp != self.dt_seconds:
                raise DataError(
                    f"frame {i} timestamp is not previous + {self.dt_seconds}s")

    @classmethod
    def from_array(cls, arr, dt_seconds: int = DEFAULT_DT, t0: int = 0) -> "Sequence":
        """Build a sequence from a (T, H, W) array of rates."""
        arr = np.asarray(arr)
        if arr.ndim != 3:
            raise DimensionError(f"expected (T, H, W) array, got shape {arr.shape}")
        frames = []
        for i, a in enumerate(arr):
            try:
                frames.append(GridFrame(a, t0 + i * dt_seconds))
            except DataError as e:
                raise DataError(f"frame {i}: {e}") from None
        return cls(tuple(frames), dt_seconds)

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames[0].values.shape

    def array(self) -> np.ndarray:
        """Stacked (T, H, W) float32 view of all frames."""
        if not self.frames:
            return np.zeros((0, 0, 0), dtype=np.float32)
        return np.stack([f.values for f in self.frames])

    def __eq__(self, other):
        if not isinstance(other, Sequence):
            return NotImplemented
        if self.dt_seconds != other.dt_seconds or len(self) != len(other):
            return False
        return all(a.timestamp == b.timestamp and a.values.shape == b.values.shape
                   and a.values.tobytes() == b.values.tobytes()
                   for a, b in zip(self.frames, other.frames))


@dataclass(frozen=True)
class WindowConfig:
    n_in: int = 9
    n_out: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1 or self.stride < 1:
            raise ConfigError("n_in, n_out and stride must all be >= 1")


@dataclass(frozen=True)
class Sample:
    input: Tuple[GridFrame, ...]
    target: Tuple[GridFrame, ...]
    start: int = 0

    def input_array(self) -> np.ndarray:
        return np.stack([f.values for f in self.input])

    def target_array(self) -> np.ndarray:
        return np.stack([f.values for f in self.target])


# --------------------------------------------------------------------- NCG I/O

def encode_sequence(seq: Sequence) -> bytes:
    T = len(seq)
    H, W = seq.shape if T else (0, 0)
    header = NCG_HEADER.pack(NCG_MAGIC, NCG_VERSION, T, H, W, seq.dt_seconds)
    return header + seq.array().astype("<f4").tobytes()


def decode_sequence(buf: bytes) -> Sequence:
    if len(buf) < NCG_HEADER.size:
        raise LengthError(f"file holds {len(buf)} bytes, header needs {NCG_HEADER.size}")
    magic, version, T, H, W, dt = NCG_HEADER.unpack_from(buf)
    if magic != NCG_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {NCG_MAGIC!r}")
    if version != NCG_VERSION:
        raise FormatError(f"unsupported NCG version {version}")
    if dt == 0:
        raise FormatError("dt_seconds must be positive")
    n = T * H * W
    payload = len(buf) - NCG_HEADER.size
    if payload != 4 * n:
        raise LengthError(
            f"header promises {T}x{H}x{W} floats ({4 * n} bytes), payload has {payload}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=NCG_HEADER.size)
    data = data.astype(np.float32).reshape(T, H, W)
    for i, frame in enumerate(data):
        if not np.all(np.isfinite(frame)):
            raise DataError(f"frame {i} contains NaN or infinite values")
        if np.any(frame < 0):
            raise DataError(f"frame {i} contains negative rates")
    return Sequence.from_array(data, dt_seconds=dt)


def read_sequence(path) -> Sequence:
    return decode_sequence(Path(path).read_bytes())


def write_sequence(seq: Sequence, path) -> None:
    if not isinstance(seq, Sequence):
        raise TypeError("write_sequence expects a Sequence")
    # encode first so an invalid sequence never leaves a partial file behind
    data = encode_sequence(seq)
    Path(path).write_bytes(data)


# ------------------------------------------------------------------ windowing

def window(seq: Sequence, cfg: WindowConfig = WindowConfig()) -> List[Sample]:
    T = len(seq)
    span = cfg.n_in + cfg.n_out
    if T < span:
        return []
    out = []
    for s in range(0, T - span + 1, cfg.stride):
        out.append(Sample(seq.frames[s:s + cfg.n_in],
                          seq.frames[s + cfg.n_in:s + span], start=s))
    return out


def stack_samples(samples: Seq[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """Return (inputs, targets) as float64 arrays of shape (S, n, H, W)."""
    x = np.stack([s.input_array() for s in samples]).astype(np.float64)
    y = np.stack([s.target_array() for s in samples]).astype(np.float64)
    return x, y


# ------------------------------------------------------------------- scaling

def transform(x):
    """Rain rate (mm/h) to model space: ln(1 + min(x, 100))."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise DataError("transform expects nonnegative rates")
    return np.log1p(np.minimum(x, RATE_CAP))


def inverse_transform(y):
    """Model space back to rain rate: max(0, exp(y) - 1)."""
    return np.maximum(0.0, np.expm1(np.asarray(y, dtype=np.float64)))


# ----------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class Cell:
    """One anisotropic Gaussian rain cell, in pixel units per frame."""
    y0: float
    x0: float
    vy: float
    vx: float
    intensity: float
    growth: float = 0.0
    sigma_major: float = 4.0
    sigma_minor: float = 4.0
    angle: float = 0.0
    spin: float = 0.0

    def render(self, t: float, height: int, width: int) -> np.ndarray:
        cy = self.y0 + self.vy * t
        cx = self.x0 + self.vx * t
        th = self.angle + self.spin * t
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        dy, dx = yy - cy, xx - cx
        c, s = math.cos(th), math.sin(th)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        q = (u / self.sigma_major) ** 2 + (v / self.sigma_minor) ** 2
        return self.intensity * math.exp(self.growth * t) * np.exp(-0.5 * q)


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    n_frames: int = 24
    n_cells: int = 3
    intensity_range: Tuple[float, float] = (2.0, 20.0)
    velocity_range: Tuple[float, float] = (-1.5, 1.5)
    growth_rate_range: Tuple[float, float] = (-0.05, 0.05)
    sigma_range: Tuple[float, float] = (3.0, 8.0)
    spin_range: Tuple[float, float] = (-0.05, 0.05)
    noise_std: float = 0.0
    seed: int = 0
    dt_seconds: int = DEFAULT_DT

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.n_frames < 0 or self.n_cells < 0:
            raise ConfigError("height/width must be >= 1; n_frames, n_cells >= 0")
        for name in ("intensity_range", "velocity_range", "growth_rate_range",
                     "sigma_range", "spin_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: min {lo} > max {hi}")
        if self.intensity_range[0] < 0 or self.sigma_range[0] <= 0:
            raise ConfigError("intensities must be >= 0 and sigmas > 0")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


def random_cells(cfg: SynthConfig, rng: np.random.Generator) -> List[Cell]:
    cells = []
    for _ in range(cfg.n_cells):
        vy, vx = rng.uniform(*cfg.velocity_range, size=2)
        # start cells where they stay mostly inside the domain for the whole run
        mid_y = cfg.height / 2 - vy * cfg.n_frames / 2
        mid_x = cfg.width / 2 - vx * cfg.n_frames / 2
        cells.append(Cell(
            y0=mid_y + rng.uniform(-0.3, 0.3) * cfg.height,
            x0=mid_x + rng.uniform(-0.3, 0.3) * cfg.width,
            vy=vy, vx=vx,
            intensity=rng.uniform(*cfg.intensity_range),
            growth=rng.uniform(*cfg.growth_rate_range),
            sigma_major=rng.uniform(*cfg.sigma_range),
            sigma_minor=rng.uniform(*cfg.sigma_range),
            angle=rng.uniform(0.0, math.pi),
            spin=rng.uniform(*cfg.spin_range),
        ))
    return cells


def render_cells(cells: Seq[Cell], n_frames: int, height: int, width: int) -> np.ndarray:
    out = np.zeros((n_frames, height, width))
    for t in range(n_frames):
        for c in cells:
            out[t] += c.render(t, height, width)
    return out


def synthesize(cfg: SynthConfig) -> Sequence:
    rng = np.random.default_rng(cfg.seed)
    cells = random_cells(cfg, rng)
    field_ = render_cells(cells, cfg.n_frames, cfg.height, cfg.width)
    if cfg.noise_std > 0:
        field_ += rng.normal(0.0, cfg.noise_std, size=field_.shape)
    np.maximum(field_, 0.0, out=field_)
    return Sequence.from_array(field_.astype(np.float32), dt_seconds=cfg.dt_seconds)


def synthesize_events(cfg: SynthConfig, n_events: int) -> List[Sequence]:
    """Independent sequences, one per event, seeded from cfg.seed."""
    seeds = np.random.SeedSequence(cfg.seed).generate_state(n_events, dtype=np.uint64)
    return [synthesize(replace(cfg, seed=int(s))) for s in seeds]
