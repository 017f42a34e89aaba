"""Anomaly scores, thresholds and confusion-matrix metrics.

Per timestep and channel the score is the absolute reconstruction error
(MinMax space) plus a physics mismatch computed from the reported values in
physical units. The timestep's aggregate is the max over channels.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import ConfigError, DataError
from .telemetry import DELTA, I, P, Q, THETA, V

EPS_DEN = 1e-6
DEFAULT_QUANTILE = 0.995


def aggregate_windows(recon, origin, length, method="mean"):
    """Collapse overlapping window reconstructions to one value per timestep.

    ``recon`` is (count, n_w, 6) and window k covers
    ``[origin[k], origin[k] + n_w)``. Timesteps no window covers are NaN.
    """
    recon = np.asarray(recon, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.int64)
    count, n_w, c = recon.shape
    if len(origin) != count:
        raise DataError("one origin per window required")
    if count and origin[-1] + n_w > length:
        raise DataError("windows extend past the series length")
    if np.any(np.diff(origin) <= 0):
        raise DataError("window origins must be strictly increasing")
    if method == "mean":
        total = np.zeros((length, c))
        hits = np.zeros(length)
        for j in range(n_w):
            np.add.at(total, origin + j, recon[:, j])
            np.add.at(hits, origin + j, 1.0)
        with np.errstate(invalid="ignore"):
            return total / hits[:, None]
    if method == "median":
        stack = np.full((length, n_w, c), np.nan)
        for j in range(n_w):
            stack[origin + j, j] = recon[:, j]
        with np.errstate(all="ignore"), warnings.catch_warnings():
            # all-NaN slices (uncovered timesteps) are expected and stay NaN
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmedian(stack, axis=1)
    raise ConfigError(f"unknown aggregation {method!r}")


def pointwise_scores(x, x_hat):
    """|x - x_hat| per timestep and channel."""
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise DataError(f"length mismatch: {x.shape} vs {x_hat.shape}")
    return np.abs(x - x_hat)


def _guarded_sq(target, num, den, eps):
    """|target - num/den|^2, or 0 where |den| < eps."""
    ok = np.abs(den) >= eps
    safe = np.where(ok, den, 1.0)
    return np.where(ok, (target - num / safe) ** 2, 0.0)


def _wrap(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi


def physics_score(frames, eps_den=EPS_DEN, voltage_form="divide"):
    """Squared power-identity mismatch for each channel, solved for that channel.

    ``frames`` holds physical-unit rows ``v, i, theta, delta, p, q``. With
    phi = theta - delta:

    * v: |v - p/(i cos phi)|^2 + |v - q/(i sin phi)|^2
    * i: |i - p/(v cos phi)|^2 + |i - q/(v sin phi)|^2
    * theta, delta: |wrap(phi - atan2(q, p))|^2
    * p: |p - v i cos phi|^2,  q: |q - v i sin phi|^2

    Terms whose denominator is smaller than ``eps_den`` in magnitude are
    dropped. ``voltage_form="multiply"`` replaces the divided voltage form
    by |p - v i cos phi|^2 + |q - v i sin phi|^2.
    """
    f = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    v, i, th, de, p, q = (f[:, k] for k in range(6))
    phi = th - de
    cos, sin = np.cos(phi), np.sin(phi)
    out = np.zeros_like(f)
    if voltage_form == "divide":
        out[:, V] = _guarded_sq(v, p, i * cos, eps_den) + _guarded_sq(v, q, i * sin, eps_den)
    elif voltage_form == "multiply":
        out[:, V] = (p - v * i * cos) ** 2 + (q - v * i * sin) ** 2
    else:
        raise ConfigError(f"unknown voltage_form {voltage_form!r}")
    out[:, I] = _guarded_sq(i, p, v * cos, eps_den) + _guarded_sq(i, q, v * sin, eps_den)
    s_ok = np.hypot(p, q) >= eps_den
    ang = np.where(s_ok, _wrap(phi - np.arctan2(q, p)) ** 2, 0.0)
    out[:, THETA] = ang
    out[:, DELTA] = ang
    out[:, P] = (p - v * i * cos) ** 2
    out[:, Q] = (q - v * i * sin) ** 2
    return out


@dataclass
class ScoringOptions:
    quantile: float = DEFAULT_QUANTILE
    aggregation: str = "mean"
    voltage_form: str = "divide"
    eps_den: float = EPS_DEN
    # physics residuals are expressed in percent of the per-unit base before squaring
    physics_unit_scale: float = 100.0
    threshold_mode: str = "quantile"  # "best_f1" peeks at labels (oracle mode)

    def validate(self):
        if not 0 < self.quantile <= 1:
            raise ConfigError("quantile must lie in (0, 1]")
        if self.aggregation not in ("mean", "median"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.threshold_mode not in ("quantile", "best_f1"):
            raise ConfigError(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.physics_unit_scale < 0:
            raise ConfigError("physics_unit_scale must be >= 0")


def channel_scores(x_norm, x_hat_norm, frames_phys, opts: Optional[ScoringOptions] = None):
    """Per-channel scores (n, 6) = pointwise + scaled physics mismatch."""
    opts = opts or ScoringOptions()
    phys = physics_score(frames_phys, opts.eps_den, opts.voltage_form)
    return pointwise_scores(x_norm, x_hat_norm) + opts.physics_unit_scale ** 2 * phys


def aggregate_scores(scores):
    """Max over channels: the worst violation flags the timestep."""
    return np.max(np.asarray(scores), axis=-1)


def threshold_from_validation(val_scores, quantile=DEFAULT_QUANTILE):
    val_scores = np.asarray(val_scores, dtype=np.float64).ravel()
    if val_scores.size == 0:
        raise DataError("threshold needs at least one validation score")
    if not 0 <= quantile <= 1:
        raise ConfigError("quantile must lie in [0, 1]")
    return float(np.quantile(val_scores, quantile))


@dataclass
class Metrics:
    tp: int
    tn: int
    fp: int
    fn: int
    acc: float
    prec: float
    rec: float
    f1: float
    prec_defined: bool = True
    rec_defined: bool = True

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def fp_rate(self):
        neg = self.fp + self.tn
        return self.fp / neg if neg else 0.0

    def summary(self) -> str:
        lines = [f"{k} = {v}" for k, v in asdict(self).items()]
        lines.append(f"fp_rate = {self.fp_rate}")
        return "\n".join(lines) + "\n"


def confusion(verdicts, labels):
    verdicts = np.asarray(verdicts, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    if verdicts.shape != labels.shape:
        raise DataError(f"length mismatch: {verdicts.shape} verdicts vs {labels.shape} labels")
    tp = int(np.sum(verdicts & labels))
    tn = int(np.sum(~verdicts & ~labels))
    fp = int(np.sum(verdicts & ~labels))
    fn = int(np.sum(~verdicts & labels))
    return tp, tn, fp, fn


def metrics_from_counts(tp, tn, fp, fn) -> Metrics:
    """ACC, precision, recall and F1 from confusion counts.

    Precision with no positive verdicts and recall with no positive labels
    are undefined; they are reported as 1.0 with the matching flag cleared.
    F1 is 0 when precision + recall is 0.
    """
    total = tp + tn + fp + fn
    if total == 0:
        raise DataError("no scored timesteps")
    acc = (tp + tn) / total
    prec_defined = tp + fp > 0
    rec_defined = tp + fn > 0
    prec = tp / (tp + fp) if prec_defined else 1.0
    rec = tp / (tp + fn) if rec_defined else 1.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return Metrics(tp, tn, fp, fn, acc, prec, rec, f1, prec_defined, rec_defined)


def evaluate(verdicts, labels) -> Metrics:
    return metrics_from_counts(*confusion(verdicts, labels))


def f1_from(prec, rec):
    return 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0


def best_f1_threshold(scores, labels):
    """Oracle threshold maximizing F1 on labelled scores (uses the labels)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    cands = np.unique(scores)
    best_t, best_f = float(cands[-1]), -1.0
    for t in cands:
        f = evaluate(scores > t, labels).f1
        if f > best_f:
            best_t, best_f = float(t), f
    return best_t


@dataclass
class AnomalyReport:
    t: np.ndarray
    scores: np.ndarray        # (n, 6) per channel
    aggregate: np.ndarray     # (n,)
    threshold: float
    verdicts: np.ndarray
    labels: Optional[np.ndarray] = None
    metrics: Optional[Metrics] = None
    oracle: bool = False

    def export_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t", "score", "verdict", "label"))
            labels = self.labels if self.labels is not None else [None] * len(self.t)
            for ti, s, v, lab in zip(self.t, self.aggregate, self.verdicts, labels):
                w.writerow((int(ti), repr(float(s)), int(bool(v)), "" if lab is None else int(bool(lab))))

    def summary(self) -> str:
        head = f"threshold = {self.threshold!r}\noracle_threshold = {self.oracle}\nscored = {len(self.t)}\n"
        return head + (self.metrics.summary() if self.metrics is not None else "")


def read_scores(path):
    """Load a ``t,score,verdict,label`` file; missing labels become None."""
    ts, scores, verdicts, labels = [], [], [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"t", "score", "verdict", "label"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: expected header 't,score,verdict,label'")
        for n, row in enumerate(reader, start=2):
            try:
                ts.append(int(row["t"]))
                scores.append(float(row["score"]))
                verdicts.append(bool(int(row["verdict"])))
                labels.append(None if row["label"] == "" else bool(int(row["label"])))
            except ValueError:
                raise DataError(f"{path}: bad value on row {n}") from None
    labs = None if any(lab is None for lab in labels) else np.array(labels, dtype=bool)
    return np.array(ts), np.array(scores), np.array(verdicts, dtype=bool), labs


def parse_summary(text: str) -> Dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
