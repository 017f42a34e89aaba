"""Multiplicative false-data injection on one telemetry channel.

An attacked sample is reported as ``(1 + alpha) * actual``. Additive
campaigns draw alpha > 0, deductive alpha < 0, combined campaigns use both
signs in equal proportion. Attacks are applied to physical-unit data and
only inside the test split; p and q are deliberately left inconsistent.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .telemetry import CHANNELS, SeriesSet

DEFAULT_ATTACK_FRACTION = 0.026
DEFAULT_ALPHA_MAX = 0.05


class AttackKind(str, Enum):
    ADDITIVE = "additive"
    DEDUCTIVE = "deductive"
    COMBINED = "combined"


def channel_index(channel) -> int:
    if isinstance(channel, (int, np.integer)):
        if not 0 <= channel < len(CHANNELS):
            raise ConfigError(f"channel index {channel} out of range")
        return int(channel)
    name = str(channel).lower()
    aliases = {"θ": "theta", "δ": "delta"}
    name = aliases.get(name, name)
    if name not in CHANNELS:
        raise ConfigError(f"unknown channel {channel!r}; expected one of {CHANNELS}")
    return CHANNELS.index(name)


@dataclass
class AttackCampaign:
    """One injection campaign.

    ``alpha_min``/``alpha_max`` bound the attack *magnitude* |alpha|; the
    sign comes from ``kind``. Setting them equal gives a fixed-magnitude
    campaign. ``target_indices`` are absolute sample indices.
    """

    kind: AttackKind = AttackKind.COMBINED
    alpha_min: float = 0.005
    alpha_max: float = DEFAULT_ALPHA_MAX
    channel: str = "i"
    target_indices: List[int] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.kind = AttackKind(self.kind)
        self.channel = CHANNELS[channel_index(self.channel)]
        self.target_indices = sorted(int(k) for k in self.target_indices)

    def validate(self):
        if not 0 < self.alpha_min <= self.alpha_max:
            raise ConfigError(
                f"attack magnitude bounds must satisfy 0 < alpha_min <= alpha_max, "
                f"got ({self.alpha_min}, {self.alpha_max})")
        if len(set(self.target_indices)) != len(self.target_indices):
            raise ConfigError("duplicate target indices")

    def draw_alphas(self) -> np.ndarray:
        """Signed attack magnitudes, one per target index, deterministic per seed."""
        self.validate()
        rng = np.random.default_rng([self.seed, 17])
        n = len(self.target_indices)
        mags = rng.uniform(self.alpha_min, self.alpha_max, n) if self.alpha_max > self.alpha_min \
            else np.full(n, self.alpha_min)
        if self.kind is AttackKind.ADDITIVE:
            signs = np.ones(n)
        elif self.kind is AttackKind.DEDUCTIVE:
            signs = -np.ones(n)
        else:
            signs = np.where(np.arange(n) < (n + 1) // 2, 1.0, -1.0)
            signs = rng.permutation(signs)
        return signs * mags

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        return d


def schedule_targets(test_len: int, count: int, seed: int, mode: str = "random") -> List[int]:
    """Pick ``count`` distinct sorted positions in ``range(test_len)``."""
    if count < 0:
        raise ConfigError("attack count must be >= 0")
    if count > test_len:
        raise ConfigError(f"cannot attack {count} samples in a test region of {test_len}")
    rng = np.random.default_rng([seed, 23])
    if mode == "random":
        picks = rng.choice(test_len, size=count, replace=False)
    elif mode == "contiguous":
        start = int(rng.integers(0, test_len - count + 1))
        picks = np.arange(start, start + count)
    else:
        raise ConfigError(f"unknown scheduling mode {mode!r}")
    return sorted(int(k) for k in picks)


def make_campaign(series: SeriesSet, count: Optional[int] = None, kind=AttackKind.COMBINED,
                  alpha_min=0.005, alpha_max=DEFAULT_ALPHA_MAX, channel="i", seed=0,
                  mode="random") -> AttackCampaign:
    """Campaign with targets scheduled inside the test split of ``series``."""
    test = series.test_range
    if count is None:
        count = int(round(DEFAULT_ATTACK_FRACTION * len(test)))
    rel = schedule_targets(len(test), count, seed, mode)
    return AttackCampaign(kind=kind, alpha_min=alpha_min, alpha_max=alpha_max, channel=channel,
                          target_indices=[test.start + k for k in rel], seed=seed)


def magnitude_grid(lo: float, hi: float, steps: int) -> List[float]:
    """Evenly spaced attack magnitudes from ``lo`` to ``hi`` inclusive."""
    if not lo > 0:
        raise ConfigError("magnitude grid must start above zero (alpha = 0 is not an attack)")
    if hi < lo:
        raise ConfigError("magnitude grid upper bound is below the lower bound")
    if steps < 1:
        raise ConfigError("magnitude grid needs at least one step")
    if steps == 1:
        return [float(lo)]
    return [float(round(a, 12)) for a in np.linspace(lo, hi, steps)]


def inject(series: SeriesSet, campaign: AttackCampaign) -> Tuple[SeriesSet, np.ndarray]:
    """Apply ``campaign`` to a physical-unit series.

    Returns the attacked copy and boolean labels over the test split.
    """
    if series.normalized:
        raise DataError("attacks must be injected into physical-unit data, before normalization")
    campaign.validate()
    test = series.test_range
    targets = np.asarray(campaign.target_indices, dtype=np.int64)
    outside = targets[(targets < test.start) | (targets >= test.stop)]
    if outside.size:
        raise DataError(
            f"target index {int(outside[0])} lies outside the test split "
            f"[{test.start}, {test.stop}); training and validation data must stay clean")
    col = channel_index(campaign.channel)
    attacked = series.copy()
    attacked.data[targets, col] *= 1.0 + campaign.draw_alphas()
    labels = np.zeros(len(test), dtype=bool)
    labels[targets - test.start] = True
    return attacked, labels


def export_labels(labels: Sequence[bool], t: Sequence[int], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t", "label"))
        for ti, lab in zip(t, labels):
            w.writerow((int(ti), int(bool(lab))))


def read_labels(path) -> Tuple[np.ndarray, np.ndarray]:
    ts, labels = [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"t", "label"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected header 't,label'")
        for row in reader:
            try:
                ts.append(int(row["t"]))
                labels.append(bool(int(row["label"])))
            except ValueError:
                raise DataError(f"{path}: bad label row {row}") from None
    return np.array(ts, dtype=np.int64), np.array(labels, dtype=bool)
