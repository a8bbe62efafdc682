"""``survplanes`` command-line interface.

Configuration files are YAML with optional ``synth:`` and ``train:``
sections holding :class:`SynthConfig` / :class:`TrainConfig` fields.
``--set section.key=value`` overrides a single field (the value is parsed as
YAML) and ``--seed`` overrides the seed of the section a command uses.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint
from .domain import forecast_mask, read_cohort, split_cohort, validate_cohort, write_cohort
from .exceptions import (CheckpointError, DegenerateDistributionError, SamplingError,
                         UndefinedMetricError)
from .head import calibrate, fit_calibrator
from .metrics import (DEFAULT_HORIZONS, bootstrap_eye_level, horizon_eval, horizon_key,
                      point_metrics, select_threshold, stratify_and_km, write_km_csv)
from .synth import SynthConfig, generate
from .trainer import TrainConfig, finetune_unsupervised, train

REPORT_VERSION = 1
DEFAULT_THRESHOLD = 0.5


class CommandError(Exception):
    """A user-facing failure; the message is printed and the exit code is 1."""


# -- configuration ---------------------------------------------------------------

def load_config(path, overrides=(), seed=None, section=None) -> dict:
    """Merge a YAML config file, ``section.key=value`` overrides and a seed."""
    config = {"synth": {}, "train": {}}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise CommandError(f"cannot read config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise CommandError(f"config {path} must be a mapping")
        unknown = set(loaded) - set(config)
        if unknown:
            raise CommandError(f"unknown config sections: {sorted(unknown)}")
        for name, values in loaded.items():
            if values is None:
                continue
            if not isinstance(values, dict):
                raise CommandError(f"config section {name!r} must be a mapping")
            config[name].update(values)
    for item in overrides:
        key, sep, raw = item.partition("=")
        name, dot, field_name = key.partition(".")
        if not sep or not dot or name not in config or not field_name:
            raise CommandError(f"--set expects section.key=value with section synth or train, "
                               f"got {item!r}")
        config[name][field_name] = yaml.safe_load(raw)
    if seed is not None and section is not None:
        config[section]["seed"] = seed
    return config


def synth_config(values: dict) -> SynthConfig:
    try:
        return SynthConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CommandError(f"invalid synth config: {exc}") from None


def train_config(values: dict, **forced) -> TrainConfig:
    try:
        return TrainConfig.from_dict({**values, **forced})
    except (TypeError, ValueError) as exc:
        raise CommandError(f"invalid train config: {exc}") from None


def parse_horizons(text) -> tuple:
    try:
        values = tuple(float(part) for part in str(text).split(",") if part.strip())
    except ValueError:
        raise CommandError(f"cannot parse horizons {text!r}; expected e.g. 6,12,24") from None
    if not values or any(not np.isfinite(h) or h < 0 for h in values):
        raise CommandError(f"horizons must be non-negative months, got {text!r}")
    return values


# -- io helpers ------------------------------------------------------------------

def _load_cohort(path, require_labels=False, what="cohort"):
    try:
        cohort = read_cohort(path)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read {what} {path}: {exc}") from None
    report = validate_cohort(cohort)
    if not report.is_valid:
        raise CommandError(f"{what} {path} is invalid ({len(report)} violations); "
                           f"first: {report.violations[0]}")
    if require_labels and not cohort.labeled:
        raise CommandError(f"{what} {path} has no labels")
    return cohort


def _load_checkpoint(path):
    try:
        return checkpoint.load(path)
    except OSError as exc:
        raise CommandError(f"cannot read checkpoint {path}: {exc}") from None
    except CheckpointError as exc:
        raise CommandError(f"bad checkpoint {path}: {exc}") from None


def _write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class _HistoryWriter:
    """Streams one JSON line per epoch, flushed as it is produced."""

    def __init__(self, path):
        self.path = Path(path)
        self.fh = open(self.path, "w", encoding="utf-8")

    def __call__(self, record):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _history_path(args):
    return args.history if args.history else f"{args.out}.history.jsonl"


# -- commands --------------------------------------------------------------------

def split_paths(out) -> dict:
    out = Path(out)
    stem = out.name[: -len(out.suffix)] if out.suffix else out.name
    suffix = out.suffix or ".jsonl"
    return {part: out.with_name(f"{stem}.{part}{suffix}") for part in ("train", "val", "test")}


def truth_path(out) -> Path:
    out = Path(out)
    stem = out.name[: -len(out.suffix)] if out.suffix else out.name
    return out.with_name(f"{stem}.truth.jsonl")


def cmd_synth(args) -> int:
    values = load_config(args.config, args.set, args.seed, "synth")["synth"]
    config = synth_config(values)
    sizes = None
    if args.split:
        try:
            sizes = [int(s) for s in args.split.split(",")]
        except ValueError:
            raise CommandError(f"--split expects sizes like 200,50,50, got {args.split!r}") from None
        if len(sizes) != 3 or min(sizes) < 1:
            raise CommandError("--split needs three positive sizes (train,val,test)")
    try:
        cohort, truth = generate(config)
    except ValueError as exc:
        raise CommandError(f"cannot generate cohort: {exc}") from None
    outputs = {}
    if sizes is None:
        outputs[Path(args.out)] = cohort.without_labels() if args.unlabeled else cohort
    else:
        try:
            parts = split_cohort(cohort, sizes, seed=config.seed)
        except ValueError as exc:
            raise CommandError(str(exc)) from None
        paths = split_paths(args.out)
        for name, part in zip(("train", "val", "test"), parts):
            if args.unlabeled and name == "train":
                part = part.without_labels()
            outputs[paths[name]] = part
    for path, part in outputs.items():
        write_cohort(part, path)
    truth.write(truth_path(args.out))
    for path in outputs:
        print(path)
    return 0


def cmd_train(args) -> int:
    values = load_config(args.config, args.set, args.seed, "train")["train"]
    config = train_config(values)
    train_cohort = _load_cohort(args.train, what="training cohort")
    if config.mode != "supervised":
        raise CommandError(f"train runs in supervised mode but the config sets mode="
                           f"{config.mode!r}; use finetune for unlabeled adaptation")
    if not train_cohort.labeled:
        raise CommandError(f"supervised mode needs a labeled training cohort, but "
                           f"{args.train} has no labels; use finetune for unlabeled data")
    val = _load_cohort(args.val, True, "validation cohort") if args.val else None
    history = _HistoryWriter(_history_path(args))
    try:
        model, _ = train(train_cohort, val, config, on_epoch=history)
    except (SamplingError, ValueError) as exc:
        raise CommandError(f"training failed: {exc}") from None
    finally:
        history.close()
    checkpoint.save(model, args.out)
    print(args.out)
    return 0


def cmd_finetune(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    values = load_config(args.config, args.set, args.seed, "train")["train"]
    base = {**model.config.to_dict(), **values}
    config = train_config(base, mode="unsupervised")
    cohort = _load_cohort(args.unlabeled, what="unlabeled cohort")
    if cohort.feature_dim != model.encoder.input_dim:
        raise CommandError(f"cohort has {cohort.feature_dim} features, checkpoint expects "
                           f"{model.encoder.input_dim}")
    val = _load_cohort(args.val, True, "validation cohort") if args.val else None
    history = _HistoryWriter(_history_path(args))
    try:
        tuned, _ = finetune_unsupervised(model, cohort, val, config, on_epoch=history)
    except (SamplingError, ValueError) as exc:
        raise CommandError(f"fine-tuning failed: {exc}") from None
    finally:
        history.close()
    checkpoint.save(tuned, args.out)
    print(args.out)
    return 0


def _thresholds(model, val, horizons):
    thresholds, errors = {}, {}
    for h in horizons:
        key = horizon_key(h)
        if val is None:
            thresholds[key] = DEFAULT_THRESHOLD
            continue
        times, events = val.label_arrays()
        keep = forecast_mask(times, events)
        ev = horizon_eval(model.predict_cdf(val, h)[keep], times[keep], events[keep], h)
        try:
            thresholds[key] = select_threshold(ev)
        except UndefinedMetricError as exc:
            errors[f"threshold_{key}"] = str(exc)
    return thresholds, errors


def evaluate_cohort(model, cohort, horizons, val=None, bootstrap=0, seed=0, km_dir=None):
    """Metrics report for ``cohort`` as a JSON-ready dict."""
    if val is not None:
        try:
            model = replace(model, calibrator=fit_calibrator(model.predict_risk(val)))
        except (ValueError, DegenerateDistributionError) as exc:
            raise CommandError(f"cannot calibrate on validation cohort: {exc}") from None
    times, events = cohort.label_arrays()
    keep = forecast_mask(times, events)
    risks = model.predict_risk(cohort)
    cdfs = {h: model.predict_cdf(cohort, h) for h in horizons}
    thresholds, threshold_errors = _thresholds(model, val, horizons)
    metrics = point_metrics(risks[keep], {h: c[keep] for h, c in cdfs.items()},
                            times[keep], events[keep], thresholds)
    metrics["errors"].update(threshold_errors)
    report = {
        "report_version": REPORT_VERSION,
        "n_eyes": len(cohort),
        "n_visits": cohort.n_visits,
        "n_forecastable_visits": int(keep.sum()),
        "horizons_months": [float(h) for h in horizons],
        "threshold_source": "validation" if val is not None else "fixed_0.5",
        "calibrated": model.calibrator is not None,
        "metrics": metrics,
    }
    if bootstrap:
        summary = bootstrap_eye_level(cohort, model, horizons, bootstrap, seed, thresholds)
        report["bootstrap"] = {"n_resamples": bootstrap, "seed": seed, **summary.as_dict()}
    if km_dir is not None:
        if model.calibrator is None:
            report["metrics"]["errors"]["km"] = "no calibrator; pass --calibrate-on"
        else:
            curves = stratify_and_km(calibrate(model.calibrator, risks[keep]),
                                     times[keep], events[keep])
            Path(km_dir).mkdir(parents=True, exist_ok=True)
            km_path = Path(km_dir) / "km_curves.csv"
            write_km_csv(curves, km_path)
            report["km"] = {"path": str(km_path),
                            "groups": {name: {"n": int(c.at_risk[0]),
                                              "events": int(c.events.sum())}
                                       for name, c in curves.items()}}
    return report


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    cohort = _load_cohort(args.cohort, True, "evaluation cohort")
    val = _load_cohort(args.calibrate_on, True, "validation cohort") if args.calibrate_on else None
    horizons = parse_horizons(args.horizons)
    seed = 0 if args.seed is None else args.seed
    report = evaluate_cohort(model, cohort, horizons, val, args.bootstrap, seed, args.km)
    text = _dump(report)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def prediction_rows(model, cohort, horizons):
    """Header and per-visit rows of the prediction CSV."""
    risks = model.predict_risk(cohort)
    calibrated = calibrate(model.calibrator, risks) if model.calibrator is not None else None
    stage = model.predict_cdf(cohort, 0.0)
    cdfs = [model.predict_cdf(cohort, h) for h in horizons]
    header = ["eye_id", "visit_time", "risk", "calibrated_risk", "p_stage"]
    header += [f"p_t{horizon_key(h)}" for h in horizons]
    rows = []
    for i, v in enumerate(cohort):
        row = [v.eye_id, repr(float(v.visit_time)), repr(float(risks[i])),
               "" if calibrated is None else repr(float(calibrated[i])),
               repr(float(stage[i]))]
        row += [repr(float(c[i])) for c in cdfs]
        rows.append(row)
    return header, rows


def cmd_predict(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    cohort = _load_cohort(args.cohort, what="cohort")
    if cohort.feature_dim != model.encoder.input_dim:
        raise CommandError(f"cohort has {cohort.feature_dim} features, checkpoint expects "
                           f"{model.encoder.input_dim}")
    header, rows = prediction_rows(model, cohort, parse_horizons(args.horizons))
    out = Path(args.out)
    tmp = out.with_name(out.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, out)
    print(out)
    return 0


def cmd_validate(args) -> int:
    try:
        cohort = read_cohort(args.cohort)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read cohort {args.cohort}: {exc}") from None
    report = validate_cohort(cohort)
    for violation in report:
        print(violation)
    status = "valid" if report.is_valid else f"{len(report)} violations"
    print(f"{args.cohort}: {len(cohort)} eyes, {cohort.n_visits} visits, "
          f"{'labeled' if cohort.labeled else 'unlabeled'}, {status}")
    return 0 if report.is_valid else 1


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survplanes",
                                     description="Conversion-time forecasting on longitudinal cohorts.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="YAML file with synth:/train: sections")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config field; repeatable")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", required=out_required, help="output path")

    p = sub.add_parser("synth", help="generate a synthetic cohort and its ground truth")
    common(p)
    p.add_argument("--split", help="train,val,test eye counts; writes <stem>.<part><suffix>")
    p.add_argument("--unlabeled", action="store_true",
                   help="strip labels from the cohort (the train part when splitting)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="supervised training")
    common(p)
    p.add_argument("--train", required=True, help="labeled training cohort")
    p.add_argument("--val", help="labeled validation cohort for selection and calibration")
    p.add_argument("--history", help="history path (default <out>.history.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="unsupervised fine-tuning of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, help="input checkpoint")
    p.add_argument("--unlabeled", required=True, help="cohort used without labels")
    p.add_argument("--val", help="labeled validation cohort for selection and calibration")
    p.add_argument("--history", help="history path (default <out>.history.jsonl)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="metrics report on a labeled cohort")
    common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--horizons", default=",".join(f"{h:g}" for h in DEFAULT_HORIZONS),
                   help="comma separated months")
    p.add_argument("--bootstrap", type=int, default=0, metavar="N",
                   help="eye-level bootstrap resamples")
    p.add_argument("--km", metavar="DIR", help="write Kaplan-Meier curves of risk groups")
    p.add_argument("--calibrate-on", metavar="VAL",
                   help="labeled cohort for the calibrator and decision thresholds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-visit predictions as CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--horizons", default=",".join(f"{h:g}" for h in DEFAULT_HORIZONS),
                   help="comma separated months")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("validate", help="check a cohort file")
    p.add_argument("cohort")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
