"""Six-channel bus telemetry: synthesis, CSV I/O, MinMax scaling and windowing.

Channels are ordered ``v, i, theta, delta, p, q`` (per-unit magnitudes,
angles in radians). Generated series satisfy

    p = v * i * cos(theta - delta)
    q = v * i * sin(theta - delta)

at every sample, because p and q are computed from the other four channels
rather than sampled.
"""

from __future__ import annotations

import csv
import dataclasses
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, KirchhoffWarning, ParseError

CHANNELS = ("v", "i", "theta", "delta", "p", "q")
V, I, THETA, DELTA, P, Q = range(6)
CSV_HEADER = ("t",) + CHANNELS

MINUTES_PER_DAY = 1440
DEFAULT_LENGTH = 10080  # one week at 1-minute cadence
DEFAULT_WINDOW = 16
EPS_PHYS = 1e-9
EPS_INGEST = 1e-3
TRAIN_FRACTION = 0.75
VAL_FRACTION = 0.10


class MeasurementFrame(NamedTuple):
    t: int
    v: float
    i: float
    theta: float
    delta: float
    p: float
    q: float


@dataclass
class LoadProfile:
    base: float = 0.85
    amplitude: float = 0.25
    peak_hour: float = 19.0
    ar_coef: float = 0.97
    noise: float = 0.002
    power_factor: float = 0.95


@dataclass
class PVProfile:
    peak: float = 0.30
    center_hour: float = 12.5
    width_hours: float = 2.6
    sunrise_hour: float = 6.5
    sunset_hour: float = 18.5
    cloudiness: float = 0.15


@dataclass
class WindProfile:
    mean: float = 0.10
    amplitude: float = 0.06
    smoothing: int = 90
    capacity: float = 0.20


@dataclass
class GeneratorConfig:
    length: int = DEFAULT_LENGTH
    seed: int = 7
    load_profile: LoadProfile = field(default_factory=LoadProfile)
    pv_profile: PVProfile = field(default_factory=PVProfile)
    wind_profile: WindProfile = field(default_factory=WindProfile)
    base_voltage: float = 1.0
    voltage_sensitivity: float = 0.04
    angle_sensitivity: float = 0.05
    window: int = DEFAULT_WINDOW

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        profiles = {"load_profile": LoadProfile, "pv_profile": PVProfile,
                    "wind_profile": WindProfile}
        for key, kind in profiles.items():
            if key in d and isinstance(d[key], dict):
                d[key] = kind(**d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self):
        if self.length < self.window:
            raise ConfigError(f"length {self.length} is shorter than window {self.window}")
        if not self.base_voltage > 0:
            raise ConfigError(f"base_voltage must be positive, got {self.base_voltage}")
        amplitudes = {
            "load_profile.amplitude": self.load_profile.amplitude,
            "load_profile.noise": self.load_profile.noise,
            "pv_profile.peak": self.pv_profile.peak,
            "pv_profile.cloudiness": self.pv_profile.cloudiness,
            "wind_profile.amplitude": self.wind_profile.amplitude,
            "wind_profile.capacity": self.wind_profile.capacity,
        }
        for name, value in amplitudes.items():
            if value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")
        if not 0 < self.load_profile.power_factor <= 1:
            raise ConfigError("load_profile.power_factor must lie in (0, 1]")


def default_split(length: int) -> Tuple[int, int]:
    """(train_end, val_end) for the 75/10/15 split."""
    train_end = int(length * TRAIN_FRACTION)
    val_end = int(round(length * (TRAIN_FRACTION + VAL_FRACTION)))
    return train_end, val_end


@dataclass
class SeriesSet:
    """A multichannel series with its split points and MinMax state.

    ``data`` has shape (length, 6). ``normalized`` says which space the
    values are in; ``channel_min``/``channel_max`` are kept through
    normalization so the physical values can always be recovered.
    """

    t: np.ndarray
    data: np.ndarray
    split: Tuple[int, int]
    channel_min: Optional[np.ndarray] = None
    channel_max: Optional[np.ndarray] = None
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.int64)
        if self.data.ndim != 2 or self.data.shape[1] != len(CHANNELS):
            raise DataError(f"series data must have shape (n, 6), got {self.data.shape}")
        if len(self.t) != len(self.data):
            raise DataError("time index and data length differ")
        train_end, val_end = self.split
        if not 0 <= train_end <= val_end <= len(self.data):
            raise DataError(f"invalid split {self.split} for length {len(self.data)}")

    def __len__(self):
        return len(self.data)

    @property
    def frames(self):
        return [MeasurementFrame(int(t), *map(float, row)) for t, row in zip(self.t, self.data)]

    @property
    def fitted(self) -> bool:
        return self.channel_min is not None and self.channel_max is not None

    @property
    def train_range(self) -> range:
        return range(0, self.split[0])

    @property
    def val_range(self) -> range:
        return range(self.split[0], self.split[1])

    @property
    def test_range(self) -> range:
        return range(self.split[1], len(self))

    def replace(self, **changes) -> "SeriesSet":
        return dataclasses.replace(self, **changes)

    def copy(self) -> "SeriesSet":
        return self.replace(
            t=self.t.copy(),
            data=self.data.copy(),
            channel_min=None if self.channel_min is None else self.channel_min.copy(),
            channel_max=None if self.channel_max is None else self.channel_max.copy(),
        )


def _ar1(rng, n, coef, sigma):
    eps = rng.normal(0.0, sigma, n)
    out = np.empty(n)
    acc = 0.0
    for k in range(n):
        acc = coef * acc + eps[k]
        out[k] = acc
    return out


def _smooth(x, width):
    if width <= 1:
        return x
    kernel = np.hanning(width + 2)[1:-1]
    kernel /= kernel.sum()
    padded = np.pad(x, (width, width), mode="reflect")
    return np.convolve(padded, kernel, mode="same")[width:-width]


def generate_synthetic(cfg: GeneratorConfig) -> SeriesSet:
    """Synthesize a Kirchhoff-consistent week (by default) of bus telemetry.

    Net injection is load minus PV minus wind. Voltage sags linearly with
    net load around ``base_voltage``; the current phasor is solved from the
    complex power, and p/q are finally recomputed from (v, i, theta, delta)
    so the power identities hold to round-off.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.length
    minutes = np.arange(n)
    hour = (minutes % MINUTES_PER_DAY) / 60.0

    lp = cfg.load_profile
    daily = np.cos(2 * np.pi * (hour - lp.peak_hour) / 24.0)
    load = lp.base + lp.amplitude * daily + _ar1(rng, n, lp.ar_coef, lp.noise)
    load = np.maximum(load, 0.05)

    pv = cfg.pv_profile
    bell = np.exp(-0.5 * ((hour - pv.center_hour) / pv.width_hours) ** 2)
    bell[(hour < pv.sunrise_hour) | (hour > pv.sunset_hour)] = 0.0
    clouds = 1.0 - pv.cloudiness * np.clip(_smooth(rng.uniform(0, 1, n), 45), 0, 1)
    solar = pv.peak * bell * clouds

    wp = cfg.wind_profile
    gust = _smooth(rng.normal(0.0, 1.0, n), wp.smoothing)
    gust /= max(np.std(gust), 1e-12)
    wind = np.clip(wp.mean + wp.amplitude * gust, 0.0, wp.capacity)

    p_net = load - solar - wind
    tan_phi = np.tan(np.arccos(lp.power_factor))
    q_net = load * tan_phi

    v = cfg.base_voltage - cfg.voltage_sensitivity * p_net - 0.5 * cfg.voltage_sensitivity * q_net
    if np.any(v <= 0):
        raise ConfigError("profile parameters drive the voltage non-positive")
    theta = -cfg.angle_sensitivity * p_net
    s = np.hypot(p_net, q_net)
    i = s / v
    delta = theta - np.arctan2(q_net, p_net)

    phi = theta - delta
    p = v * i * np.cos(phi)
    q = v * i * np.sin(phi)

    data = np.column_stack([v, i, theta, delta, p, q])
    return SeriesSet(t=minutes, data=data, split=default_split(n))


def physics_residuals(data: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Residuals p - v i cos(theta-delta) and q - v i sin(theta-delta)."""
    data = np.asarray(data, dtype=np.float64)
    vi = data[..., V] * data[..., I]
    phi = data[..., THETA] - data[..., DELTA]
    return data[..., P] - vi * np.cos(phi), data[..., Q] - vi * np.sin(phi)


def ingest_csv(path, split: Optional[Tuple[int, int]] = None, tolerance: float = EPS_INGEST) -> SeriesSet:
    """Read a ``t,v,i,theta,delta,p,q`` CSV into a SeriesSet.

    Frames whose power identities are off by more than ``tolerance`` are
    kept; each one produces a :class:`KirchhoffWarning`.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise ParseError(f"{path}: missing column", row=1, column=missing[0])
        cols = [header.index(c) for c in CSV_HEADER]
        ts, rows = [], []
        for lineno, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) < len(header):
                raise ParseError(f"{path}: too few fields", row=lineno)
            values = []
            for name, col in zip(CSV_HEADER, cols):
                cell = record[col].strip()
                try:
                    values.append(int(cell) if name == "t" else float(cell))
                except ValueError:
                    raise ParseError(f"{path}: non-numeric value {cell!r}", row=lineno, column=name) from None
            ts.append(values[0])
            rows.append(values[1:])
    if not rows:
        raise ParseError(f"{path}: no data rows")

    data = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        bad = int(np.argwhere(~np.isfinite(data))[0, 0])
        raise ParseError(f"{path}: non-finite value", row=bad + 2)
    res_p, res_q = physics_residuals(data)
    for k in np.flatnonzero((np.abs(res_p) > tolerance) | (np.abs(res_q) > tolerance)):
        warnings.warn(
            f"{path}: row {k + 2} (t={ts[k]}) violates power identities "
            f"(dp={res_p[k]:.3g}, dq={res_q[k]:.3g})",
            KirchhoffWarning,
            stacklevel=2,
        )
    if split is None:
        split = default_split(len(data))
    return SeriesSet(t=np.array(ts), data=data, split=split)


def export_csv(s: SeriesSet, path) -> None:
    """Write physical-unit values with the ingest schema (repr-exact floats)."""
    data = invert_minmax(s).data if s.normalized else s.data
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t, row in zip(s.t, data):
            w.writerow([int(t)] + [repr(float(x)) for x in row])


def fit_minmax(s: SeriesSet, rows: Optional[Sequence[int]] = None) -> SeriesSet:
    """Record per-channel min/max over ``rows`` (the training split by default)."""
    if s.normalized:
        raise DataError("fit_minmax expects physical-unit data")
    rows = s.train_range if rows is None else rows
    if len(rows) == 0:
        raise DataError("cannot fit MinMax on an empty range")
    block = s.data[np.asarray(rows, dtype=np.int64)]
    lo, hi = block.min(axis=0), block.max(axis=0)
    flat = np.flatnonzero(hi <= lo)
    if flat.size:
        raise DataError(f"degenerate channel {CHANNELS[flat[0]]!r}: max equals min")
    return s.replace(channel_min=lo, channel_max=hi)


def _require_fit(s: SeriesSet):
    if not s.fitted:
        raise DataError("MinMax state not fitted; call fit_minmax first")


def apply_minmax(s: SeriesSet) -> SeriesSet:
    _require_fit(s)
    if s.normalized:
        return s
    scaled = (s.data - s.channel_min) / (s.channel_max - s.channel_min)
    return s.replace(data=scaled, normalized=True)


def invert_minmax(s: SeriesSet) -> SeriesSet:
    _require_fit(s)
    if not s.normalized:
        return s
    return s.replace(data=denormalize(s.data, s.channel_min, s.channel_max), normalized=False)


def normalize(x, lo, hi):
    return (np.asarray(x) - lo) / (hi - lo)


def denormalize(x, lo, hi):
    return np.asarray(x) * (hi - lo) + lo


@dataclass
class WindowBatch:
    windows: np.ndarray  # (count, n_w, 6)
    origin: np.ndarray
    n_w: int
    step: int

    def __len__(self):
        return len(self.windows)


def windowize(s, n_w: int = DEFAULT_WINDOW, step: int = 1) -> WindowBatch:
    """Slice a SeriesSet (or a raw (n, 6) array) into overlapping windows."""
    data = s.data if isinstance(s, SeriesSet) else np.asarray(s, dtype=np.float64)
    n = len(data)
    if step < 1:
        raise ConfigError(f"step must be >= 1, got {step}")
    if n_w < 1 or n_w > n:
        raise ConfigError(f"window length {n_w} does not fit a series of length {n}")
    view = np.lib.stride_tricks.sliding_window_view(data, n_w, axis=0)[::step]
    # sliding_window_view puts the window axis last: (count, 6, n_w)
    windows = np.ascontiguousarray(view.transpose(0, 2, 1))
    origin = np.arange(len(windows), dtype=np.int64) * step
    return WindowBatch(windows=windows, origin=origin, n_w=n_w, step=step)
