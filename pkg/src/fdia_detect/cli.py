"""Command line entry point: ``fdia-detect <command> ...``.

Every command writes into a fresh run directory under ``--out`` together
with ``manifest.json`` recording the effective configuration, input
checksums and output checksums; ``replay`` re-executes a manifest and
checks that the outputs are byte-identical.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import export_labels, inject, magnitude_grid, read_labels
from .errors import ConfigError, DataError, FdiaError, NumericError
from .pipeline import SWEEP_FIELDS, RunConfig, detect, sweep, train_model
from .piconvae import load_checkpoint, save_checkpoint
from .scoring import evaluate, read_scores
from .telemetry import export_csv, generate_synthetic, ingest_csv

log = logging.getLogger("fdia_detect")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_run_dir(root, command) -> Path:
    root = Path(root)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    for n in range(1000):
        run = root / (f"{command}-{stamp}" + (f"-{n}" if n else ""))
        try:
            run.mkdir(parents=True)
            return run
        except FileExistsError:
            continue
        except OSError as exc:
            raise DataError(f"cannot create run directory under {root}: {exc}") from exc
    raise DataError(f"could not allocate a run directory under {root}")


# ---------------------------------------------------------------- commands
# Each takes (config, params, run_dir) and returns (inputs, outputs): dicts
# of logical name -> path. Outputs must depend only on config, params and
# input contents so that replays are byte-identical.

def run_generate(cfg: RunConfig, params, run_dir):
    series = generate_synthetic(cfg.generator)
    out = run_dir / "dataset.csv"
    export_csv(series, out)
    log.info("wrote %d frames to %s", len(series), out)
    return {}, {"dataset": out}


def run_inject(cfg: RunConfig, params, run_dir):
    series = ingest_csv(params["data"])
    campaign = cfg.attack.campaign(series)
    attacked, labels = inject(series, campaign)
    out, lab = run_dir / "attacked.csv", run_dir / "labels.csv"
    export_csv(attacked, out)
    export_labels(labels, series.t[series.test_range.start:], lab)
    (run_dir / "campaign.json").write_text(json.dumps(campaign.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"data": params["data"]}, {"attacked": out, "labels": lab, "campaign": run_dir / "campaign.json"}


LOSS_COLUMNS = ("epoch", "train_loss", "val_loss", "val_ae", "val_phy_p", "val_phy_q", "val_mse", "learning_rate")


def _fmt(x):
    return "" if isinstance(x, float) and np.isnan(x) else repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def run_train(cfg: RunConfig, params, run_dir):
    series = ingest_csv(params["data"])
    start = time.perf_counter()
    model, report = train_model(
        series, cfg.model,
        progress=lambda e, r: log.info("epoch %d  train %.5g  val %.5g", e, r.train_loss[-1], r.val_loss[-1]))
    log.info("training finished in %.1fs (%s)", time.perf_counter() - start, report.stop_reason)
    ckpt, losses, summary = run_dir / "checkpoint.bin", run_dir / "losses.csv", run_dir / "train_report.txt"
    save_checkpoint(model, ckpt)
    with losses.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for row in report.rows():
            w.writerow([_fmt(row[c]) for c in LOSS_COLUMNS])
    summary.write_text(
        f"physics_enabled = {cfg.model.physics_enabled}\n"
        f"epochs_run = {report.epochs_run}\n"
        f"best_epoch = {report.best_epoch}\n"
        f"stop_reason = {report.stop_reason}\n"
        f"best_val_loss = {min(report.val_loss)!r}\n" if report.val_loss else
        f"physics_enabled = {cfg.model.physics_enabled}\nepochs_run = 0\n")
    return {"data": params["data"]}, {"checkpoint": ckpt, "losses": losses, "report": summary}


def _detect_inputs(cfg, params):
    series = ingest_csv(params["data"])
    inputs = {"data": params["data"], "checkpoint": params["checkpoint"]}
    if params.get("labels"):
        ts, labels = read_labels(params["labels"])
        test = series.test_range
        if len(labels) != len(test) or not np.array_equal(ts, series.t[test.start:]):
            raise DataError("labels file does not cover the dataset's test split")
        inputs["labels"] = params["labels"]
        return series, labels, inputs
    attacked, labels = inject(series, cfg.attack.campaign(series))
    return attacked, labels, inputs


def run_detect(cfg: RunConfig, params, run_dir):
    model = load_checkpoint(params["checkpoint"])
    series, labels, inputs = _detect_inputs(cfg, params)
    report = detect(model, series, labels, cfg.scoring)
    scores, metrics = run_dir / "scores.csv", run_dir / "metrics.txt"
    report.export_csv(scores)
    metrics.write_text(report.summary())
    m = report.metrics
    log.info("threshold %.4g  prec %.4f  rec %.4f  f1 %.4f", report.threshold, m.prec, m.rec, m.f1)
    return inputs, {"scores": scores, "metrics": metrics}


def run_evaluate(cfg: RunConfig, params, run_dir):
    _, scores, verdicts, labels = read_scores(params["scores"])
    if labels is None:
        raise DataError(f"{params['scores']}: label column is empty; nothing to evaluate against")
    if params.get("threshold") is not None:
        verdicts = scores > float(params["threshold"])
    out = run_dir / "metrics.txt"
    head = f"threshold = {params.get('threshold')!r}\n" if params.get("threshold") is not None else ""
    out.write_text(head + evaluate(verdicts, labels).summary())
    return {"scores": params["scores"]}, {"metrics": out}


def run_sweep(cfg: RunConfig, params, run_dir):
    model = load_checkpoint(params["checkpoint"])
    series = ingest_csv(params["data"])
    grid = magnitude_grid(*params["grid"])
    rows = sweep(model, series, grid, cfg.attack, cfg.scoring)
    out = run_dir / "sweep.csv"
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for row in rows:
            w.writerow([repr(float(row[k])) for k in SWEEP_FIELDS])
    return {"data": params["data"], "checkpoint": params["checkpoint"]}, {"sweep": out}


COMMANDS = {
    "generate": run_generate,
    "inject": run_inject,
    "train": run_train,
    "detect": run_detect,
    "evaluate": run_evaluate,
    "sweep": run_sweep,
}


def execute(command, cfg: RunConfig, params, out_root=None):
    """Run ``command`` in a new run directory and write its manifest."""
    run_dir = make_run_dir(out_root or cfg.out_dir, command)
    params = {k: (str(Path(v).resolve()) if k in ("data", "checkpoint", "labels", "scores") and v else v)
              for k, v in params.items()}
    for key in ("data", "checkpoint", "labels", "scores"):
        if params.get(key) and not Path(params[key]).is_file():
            raise DataError(f"{key} file not found: {params[key]}")
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "params": params,
    }
    # written first so an interrupted run still documents its settings
    (run_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    inputs, outputs = COMMANDS[command](cfg, params, run_dir)
    manifest["inputs"] = {k: {"path": str(Path(p).resolve()), "sha256": sha256(p)} for k, p in inputs.items()}
    manifest["outputs"] = {Path(p).name: sha256(p) for p in outputs.values()}
    (run_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return run_dir, manifest


def replay(manifest_path, out_root=None):
    """Re-run a manifest; returns (run_dir, mismatches)."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("command") not in COMMANDS:
        raise DataError(f"manifest names unknown command {manifest.get('command')!r}")
    for name, info in manifest.get("inputs", {}).items():
        if not Path(info["path"]).is_file():
            raise DataError(f"replay input {name} missing: {info['path']}")
        if sha256(info["path"]) != info["sha256"]:
            raise DataError(f"replay input {name} changed since the original run: {info['path']}")
    cfg = RunConfig.from_dict(manifest["config"])
    root = out_root or manifest_path.parent.parent
    run_dir, new = execute(manifest["command"], cfg, manifest["params"], root)
    old = manifest.get("outputs", {})
    mismatches = sorted(k for k in set(old) | set(new["outputs"]) if old.get(k) != new["outputs"].get(k))
    return run_dir, mismatches


# ---------------------------------------------------------------- argument parsing

def _attack_flags(p):
    g = p.add_argument_group("attack campaign")
    g.add_argument("--kind", choices=("additive", "deductive", "combined"))
    g.add_argument("--alpha-min", type=float, help="smallest attack magnitude |alpha|")
    g.add_argument("--alpha-max", type=float, help="largest attack magnitude |alpha|")
    g.add_argument("--channel", help="attacked channel: v, i, theta, delta, p or q")
    g.add_argument("--count", type=int, help="number of attacked test samples")
    g.add_argument("--mode", choices=("random", "contiguous"))
    g.add_argument("--attack-seed", type=int)


def _scoring_flags(p):
    g = p.add_argument_group("scoring")
    g.add_argument("--quantile", type=float)
    g.add_argument("--aggregation", choices=("mean", "median"))
    g.add_argument("--voltage-form", choices=("divide", "multiply"))
    g.add_argument("--physics-unit-scale", type=float)
    g.add_argument("--oracle-threshold", action="store_true",
                   help="choose the best-F1 threshold using the labels (upper bound, not a detector)")


def build_parser():
    parser = _Parser(prog="fdia-detect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON run configuration (sections: generator, attack, model, scoring)")
        p.add_argument("--out", help="root directory for run directories (default: config out_dir)")
        return p

    p = common(sub.add_parser("generate", help="synthesize a Kirchhoff-consistent dataset"))
    p.add_argument("--length", type=int)
    p.add_argument("--seed", type=int)

    p = common(sub.add_parser("inject", help="inject an attack campaign into a dataset's test split"))
    p.add_argument("--data", required=True)
    _attack_flags(p)

    p = common(sub.add_parser("train", help="train a PIConvAE (or the ConvAE baseline)"))
    p.add_argument("--data", required=True)
    p.add_argument("--no-physics", action="store_true", help="train the plain ConvAE baseline")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--model-seed", type=int)
    p.add_argument("--update-mode", choices=("alternating", "joint"))

    p = common(sub.add_parser("detect", help="score a dataset and report detection metrics"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", help="labels.csv from `inject`; if given, --data is taken as already attacked")
    _attack_flags(p)
    _scoring_flags(p)

    p = common(sub.add_parser("evaluate", help="recompute metrics from a scores file"))
    p.add_argument("--scores", required=True)
    p.add_argument("--threshold", type=float)

    p = common(sub.add_parser("sweep", help="detection metrics across fixed attack magnitudes"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", nargs=3, type=float, metavar=("LO", "HI", "STEPS"), default=[0.01, 0.05, 5])
    _attack_flags(p)
    _scoring_flags(p)

    p = sub.add_parser("replay", help="re-run a manifest and compare output checksums")
    p.add_argument("manifest")
    p.add_argument("--out")
    return parser


def load_config(path) -> RunConfig:
    if not path:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)


def _override(obj, **values):
    values = {k: v for k, v in values.items() if v is not None}
    return dataclasses.replace(obj, **values) if values else obj


def config_from_args(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if args.command == "generate":
        cfg.generator = _override(cfg.generator, length=args.length, seed=args.seed)
        if args.seed is not None:
            cfg.seed = args.seed
    if hasattr(args, "kind"):
        cfg.attack = _override(cfg.attack, kind=args.kind, alpha_min=args.alpha_min, alpha_max=args.alpha_max,
                               channel=args.channel, count=args.count, mode=args.mode, seed=args.attack_seed)
    if hasattr(args, "quantile"):
        cfg.scoring = _override(cfg.scoring, quantile=args.quantile, aggregation=args.aggregation,
                                voltage_form=args.voltage_form, physics_unit_scale=args.physics_unit_scale,
                                threshold_mode="best_f1" if args.oracle_threshold else None)
    if args.command == "train":
        cfg.model = _override(cfg.model, epochs=args.epochs, batch_size=args.batch_size, patience=args.patience,
                              seed=args.model_seed, update_mode=args.update_mode,
                              physics_enabled=False if args.no_physics else None)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def params_from_args(args) -> dict:
    keys = {"inject": ("data",), "train": ("data",), "detect": ("checkpoint", "data", "labels"),
            "evaluate": ("scores", "threshold"), "sweep": ("checkpoint", "data", "grid")}
    params = {k: getattr(args, k) for k in keys.get(args.command, ())}
    if "grid" in params:
        lo, hi, steps = params["grid"]
        if steps != int(steps):
            raise ConfigError("grid STEPS must be an integer")
        params["grid"] = [lo, hi, int(steps)]
    return params


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            run_dir, mismatches = replay(args.manifest, args.out)
            if mismatches:
                print(f"{run_dir}: replay differs in {', '.join(mismatches)}", file=sys.stderr)
                return EXIT_NUMERIC
            print(run_dir)
            return EXIT_OK
        cfg = config_from_args(args)
        run_dir, _ = execute(args.command, cfg, params_from_args(args))
        print(run_dir)
        return EXIT_OK
    except ConfigError as exc:
        print(f"fdia-detect: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"fdia-detect: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"fdia-detect: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
