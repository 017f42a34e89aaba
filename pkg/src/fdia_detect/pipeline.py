"""End-to-end pipeline steps shared by the CLI and the experiments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .attacks import AttackCampaign, AttackKind, DEFAULT_ALPHA_MAX, inject, make_campaign, magnitude_grid
from .errors import ConfigError, DataError
from .piconvae import ModelConfig, PIConvAEModel, TrainReport, train
from .scoring import (AnomalyReport, ScoringOptions, aggregate_scores, aggregate_windows,
                      best_f1_threshold, channel_scores, evaluate, threshold_from_validation)
from .telemetry import (CHANNELS, GeneratorConfig, SeriesSet, fit_minmax, normalize, windowize)


@dataclass
class AttackSpec:
    """Key-value description of a campaign; targets are scheduled at run time."""

    kind: str = "combined"
    alpha_min: float = 0.005
    alpha_max: float = DEFAULT_ALPHA_MAX
    channel: str = "i"
    count: Optional[int] = None  # None -> 2.6% of the test split
    mode: str = "random"
    seed: int = 0

    def campaign(self, series: SeriesSet) -> AttackCampaign:
        return make_campaign(series, count=self.count, kind=AttackKind(self.kind),
                             alpha_min=self.alpha_min, alpha_max=self.alpha_max,
                             channel=self.channel, seed=self.seed, mode=self.mode)


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    scoring: ScoringOptions = field(default_factory=ScoringOptions)
    seed: int = 7
    out_dir: str = "runs"

    def to_dict(self):
        return {
            "generator": self.generator.to_dict(),
            "attack": dataclasses.asdict(self.attack),
            "model": self.model.to_dict(),
            "scoring": dataclasses.asdict(self.scoring),
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {"generator", "attack", "model", "scoring", "seed", "out_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                generator=GeneratorConfig.from_dict(d.get("generator", {})),
                attack=AttackSpec(**d.get("attack", {})),
                model=ModelConfig.from_dict(d.get("model", {})),
                scoring=ScoringOptions(**d.get("scoring", {})),
                seed=d.get("seed", 7),
                out_dir=d.get("out_dir", "runs"),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc


def split_windows(series: SeriesSet, n_w: int):
    """Normalized (train, val) windows; MinMax is fitted on the training split."""
    fitted = fit_minmax(series)
    norm = normalize(fitted.data, fitted.channel_min, fitted.channel_max)
    tr_end, val_end = series.split
    if tr_end < n_w or val_end - tr_end < n_w:
        raise DataError(f"train/validation splits must each hold at least one window of {n_w}")
    return (fitted, windowize(norm[:tr_end], n_w).windows, windowize(norm[tr_end:val_end], n_w).windows)


def train_model(series: SeriesSet, cfg: ModelConfig, progress=None) -> Tuple[PIConvAEModel, TrainReport]:
    fitted, tr, va = split_windows(series, cfg.n_w)
    model = PIConvAEModel(cfg, fitted.channel_min, fitted.channel_max)
    report = train(model, tr, va, progress=progress)
    return model, report


def reconstruct_series(model: PIConvAEModel, data_phys, aggregation="mean"):
    """Normalized series and its per-timestep reconstruction (both (n, 6))."""
    if model.channel_min is None:
        raise DataError("checkpoint carries no normalization constants")
    x = normalize(data_phys, model.channel_min, model.channel_max)
    wb = windowize(x, model.config.n_w)
    recon = model.reconstruct(wb.windows)
    return x, aggregate_windows(recon, wb.origin, len(x), aggregation)


def detect(model: PIConvAEModel, series: SeriesSet, labels=None,
           opts: Optional[ScoringOptions] = None) -> AnomalyReport:
    """Score every timestep, threshold on the clean validation split, judge the test split."""
    opts = opts or ScoringOptions()
    opts.validate()
    if model.config.channels != len(CHANNELS) or series.data.shape[1] != model.config.channels:
        raise DataError("checkpoint channel count does not match the dataset")
    x, x_hat = reconstruct_series(model, series.data, opts.aggregation)
    scores = channel_scores(x, x_hat, series.data, opts)
    agg = aggregate_scores(scores)
    val, test = series.val_range, series.test_range
    if len(val) == 0 or len(test) == 0:
        raise DataError("dataset needs non-empty validation and test splits")
    test_agg = agg[test.start:test.stop]
    oracle = opts.threshold_mode == "best_f1"
    if oracle:
        if labels is None:
            raise ConfigError("best_f1 threshold mode needs labels")
        threshold = best_f1_threshold(test_agg, labels)
    else:
        threshold = threshold_from_validation(agg[val.start:val.stop], opts.quantile)
    verdicts = test_agg > threshold
    metrics = None
    if labels is not None:
        labels = np.asarray(labels, dtype=bool)
        metrics = evaluate(verdicts, labels)
    return AnomalyReport(t=series.t[test.start:test.stop], scores=scores[test.start:test.stop],
                         aggregate=test_agg, threshold=threshold, verdicts=verdicts,
                         labels=labels, metrics=metrics, oracle=oracle)


SWEEP_FIELDS = ("alpha", "acc", "prec", "rec", "f1")


def sweep(model: PIConvAEModel, series: SeriesSet, grid, spec: AttackSpec,
          opts: Optional[ScoringOptions] = None):
    """One fixed-magnitude detection run per level; targets and signs are shared across levels."""
    rows = []
    for alpha in sorted(grid):
        level = dataclasses.replace(spec, alpha_min=alpha, alpha_max=alpha)
        attacked, labels = inject(series, level.campaign(series))
        m = detect(model, attacked, labels, opts).metrics
        rows.append({"alpha": alpha, "acc": m.acc, "prec": m.prec, "rec": m.rec, "f1": m.f1})
    return rows
