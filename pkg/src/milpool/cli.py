"""``milpool`` command line: gen-data, train, evaluate, report, check.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numerical failure (non-finite loss or gradient, failed self-check).

Configuration comes from an optional flat ``key = value`` file (``#`` starts
a comment) overlaid with ``--set key=value`` and the dedicated flags, in that
order. Keys are the fields of ``TrainConfig`` and ``DatasetSpec`` plus
``data`` and ``out``; one ``seed`` drives both data generation and training.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import atomic_write_text
from .pipeline import (
    NumericalFailure,
    TrainConfig,
    evaluate,
    generate_pseudo_labels,
    load_model,
    train_stage1,
    train_stage2,
)
from .report import ReportError, build_report
from .sed_metrics import (
    ScoreReport,
    confidence_reliability,
    decode_events,
    event_based_scores,
    events_to_frames,
    segment_based_scores,
    write_events_json,
)
from .synthdata import DatasetError, DatasetSpec, generate_dataset, load_dataset, manifest_digest, save_dataset

log = logging.getLogger("milpool")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PATH_KEYS = ("data", "out")
DATASET_KEYS = ("num_classes", "frames_per_clip", "feature_dim", "frame_rate", "strong", "weak", "unlabeled",
                "validation", "noise_std", "signature_norm", "duration_sigma", "seed")


class UsageError(Exception):
    pass


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- configuration


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    out = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace("(", "").replace(")", "").split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def _train_defaults() -> dict:
    return {f.name: getattr(TrainConfig(), f.name) for f in dataclasses.fields(TrainConfig)}


def _dataset_defaults() -> dict:
    spec = DatasetSpec()
    return {k: getattr(spec, k) for k in DATASET_KEYS}


def merged_settings(args) -> dict:
    settings: dict = {}
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        settings[k.strip()] = v.strip()
    for key, attr in (("seed", "seed"), ("data", "data"), ("out", "out")):
        v = getattr(args, attr, None)
        if v is not None:
            settings[key] = v
    known = set(_train_defaults()) | set(DATASET_KEYS) | set(PATH_KEYS) | {"label"}
    unknown = sorted(set(settings) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    return settings


def train_config_from(settings: dict, overrides: dict) -> TrainConfig:
    defaults = _train_defaults()
    values = {k: _coerce(k, settings[k], defaults[k]) for k in defaults if k in settings}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dataset_spec_from(settings: dict, overrides: dict) -> DatasetSpec:
    defaults = _dataset_defaults()
    values = {k: _coerce(k, settings[k], defaults[k]) for k in DATASET_KEYS if k in settings}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return DatasetSpec(**values)


def _require(settings: dict, key: str, flag: str) -> Path:
    if key not in settings:
        raise UsageError(f"missing {flag} (or '{key}' in the config file)")
    return Path(settings[key])


# ---------------------------------------------------------------- commands


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_gen_data(args) -> int:
    settings = merged_settings(args)
    out = _require(settings, "out", "--out")
    spec = dataset_spec_from(settings, {
        "strong": args.strong, "weak": args.weak, "unlabeled": args.unlabeled,
        "validation": args.validation, "frames_per_clip": args.frames,
    })
    if (out / "manifest.json").exists() and not args.force:
        raise ConfigError(f"{out} already holds a dataset; pass --force to overwrite")
    manifest = save_dataset(generate_dataset(spec), out)
    counts = spec.counts()
    print(f"dataset written to {out}")
    print("clips: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"classes={spec.num_classes} frames={spec.frames_per_clip} features={spec.feature_dim} seed={spec.seed}")
    for name in ("manifest.json", "features.bin", "strong_labels.json", "hidden_truth.json"):
        print(f"sha256 {name} {_sha256_file(out / name)}")
    print(f"digest {manifest_digest(manifest)}")
    return EXIT_OK


def _train_overrides(args) -> dict:
    return {
        "pooling": args.pooling,
        "n_init": args.n_init,
        "lam": args.lam,
        "alpha": args.alpha,
        "epochs": args.epochs,
        "confidence_epochs": args.confidence_epochs,
        "stage2_epochs": args.stage2_epochs,
        "ablation": args.ablation,
        "weighting": args.weighting,
    }


def _scores_summary(ev) -> dict:
    out = dict(ev.report.event.macro())
    seg = ev.report.segment.macro()
    out["segment_ER"] = seg["ER"]
    out["segment_F1"] = seg["F1"]
    return out


def _write_scores(out: Path, stage: str, ev):
    atomic_write_text(out / f"{stage}_scores.csv", ev.report.event.to_csv())
    atomic_write_text(out / f"{stage}_segment_scores.csv", ev.report.segment.to_csv())


def _read_meta(path: Path) -> dict:
    return json.loads(path.read_text()) if path.exists() else {}


def _write_meta(out: Path, meta: dict):
    atomic_write_text(out / "run.json", json.dumps(meta, indent=1, sort_keys=True))


def cmd_train(args) -> int:
    settings = merged_settings(args)
    data = _require(settings, "data", "--data")
    out = _require(settings, "out", "--out")
    config = train_config_from(settings, _train_overrides(args))
    dataset = load_dataset(data)
    clips = dataset.training_view()
    validation = dataset.split("validation")
    out.mkdir(parents=True, exist_ok=True)
    meta_path = out / "run.json"
    label = args.label or settings.get("label") or out.name

    if args.stage == 1:
        result = train_stage1(clips, config, out)
        meta = {"label": label, "dataset_digest": manifest_digest(data), "stage1_config": config.to_dict(), "scores": {}}
        if validation:
            ev = evaluate(result.teacher, validation, dataset, config.threshold, config.median_ratio)
            _write_scores(out, "stage1", ev)
            truth = np.stack([c.targets.t_frame for c in validation])
            conf, post = confidence_reliability(ev.bundle.frame_probs, ev.bundle.confidence, truth, 10, config.threshold)
            atomic_write_text(out / "stage1_reliability_confidence.csv", conf.to_csv())
            atomic_write_text(out / "stage1_reliability_posterior.csv", post.to_csv())
            meta["scores"]["stage1"] = _scores_summary(ev)
            _print_block("stage 1 teacher, validation", ev.report, True)
        _write_meta(out, meta)
        print(f"final n: {result.report.n_trajectory[-1] if result.report.n_trajectory else 'n/a'}")
        return EXIT_OK

    source = Path(args.source) if args.source else out
    student_path, teacher_path = source / "stage1_student.ckpt", source / "stage1_teacher.ckpt"
    for p in (student_path, teacher_path):
        if not p.exists():
            raise ConfigError(f"stage two needs {p}; run 'train --stage 1' first")
    student, teacher = load_model(student_path), load_model(teacher_path)
    pseudo = generate_pseudo_labels(teacher, clips)
    result = train_stage2(pseudo, clips, config, student, out)
    notes = {k: v for k, v in result.report.notes.items() if k != "step_losses"}
    log.info("retraining targets: %s", notes)
    print(f"predicted entries: {notes['predicted_entries']}  discarded: {notes['discarded_entries']}")
    if notes["confidence_free"]:
        print("confidence-free retraining (alpha = 0 or unweighted)")
    meta = _read_meta(meta_path) or _read_meta(source / "run.json")
    meta.setdefault("scores", {})
    meta["label"] = args.label or settings.get("label") or meta.get("label", label)
    meta["stage2_config"] = config.to_dict()
    meta["retrain"] = notes
    if validation:
        model = result.student if args.use_student else result.teacher
        ev = evaluate(model, validation, dataset, config.threshold, config.median_ratio)
        _write_scores(out, "stage2", ev)
        meta["scores"]["stage2"] = _scores_summary(ev)
        _print_block("stage 2 " + ("student" if args.use_student else "teacher") + ", validation", ev.report, True)
    _write_meta(out, meta)
    return EXIT_OK


def _print_block(title: str, report: ScoreReport, segment: bool):
    print(title)
    blocks = [("event", report.event)] + ([("segment", report.segment)] if segment and report.segment else [])
    for name, block in blocks:
        m = block.macro()
        print(f"  {name:8s} ER={m['ER']:.4f} F1={100 * m['F1']:.2f}% DEL={m['DEL']:.4f} INS={m['INS']:.4f}")


def cmd_evaluate(args) -> int:
    dataset = load_dataset(args.data)
    clips = dataset.split(args.split)
    if not clips:
        raise ConfigError(f"split {args.split!r} is empty")
    spec = dataset.spec
    if args.oracle:
        refs = [c.hidden_truth for c in clips]
        frames = [events_to_frames(r, spec.frames_per_clip, spec.num_classes, spec.frame_rate) for r in refs]
        est = [decode_events(f, 0.5, None, spec.frame_rate) for f in frames]
        report = ScoreReport(
            event_based_scores(refs, est, num_classes=spec.num_classes).event,
            segment_based_scores(refs, est, spec.clip_seconds, num_classes=spec.num_classes).segment,
        )
        estimates = {c.id: e for c, e in zip(clips, est)}
    else:
        if not args.checkpoint:
            raise UsageError("evaluate needs --checkpoint (or --oracle)")
        params = load_model(args.checkpoint)
        ev = evaluate(params, clips, dataset, args.threshold)
        report, estimates = ev.report, ev.estimates
    _print_block(f"{args.split} ({len(clips)} clips)", report, args.segment)
    if args.out:
        out = Path(args.out)
        atomic_write_text(out, report.event.to_csv())
        if args.segment:
            atomic_write_text(out.with_name(out.stem + "_segment" + out.suffix), report.segment.to_csv())
    if args.events_out:
        write_events_json(args.events_out, estimates)
    return EXIT_OK


def cmd_report(args) -> int:
    written = build_report(args.runs, args.out)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_check(args) -> int:
    from .selfcheck import run_all

    ok = True
    for name, passed, detail in run_all():
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="milpool", description="Power-pooling sound event detection experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(g)
    g.add_argument("--out")
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    for name in ("strong", "weak", "unlabeled", "validation", "frames"):
        g.add_argument(f"--{name}", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training stage 1 or 2")
    common(t)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--from", dest="source", help="stage-one run directory (stage 2; defaults to --out)")
    t.add_argument("--pooling", choices=("max", "mean", "linear", "auto", "attention", "power"))
    t.add_argument("--n-init", type=float)
    t.add_argument("--lam", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--confidence-epochs", type=int)
    t.add_argument("--stage2-epochs", type=int)
    t.add_argument("--ablation", choices=("none", "prob09", "prob_weighted", "prob05"))
    t.add_argument("--weighting", choices=("confidence", "none"))
    t.add_argument("--use-student", action="store_true", help="evaluate the student instead of the teacher")
    t.add_argument("--label", help="run name used in reports")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="validation")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--segment", action="store_true", help="add the segment-based block")
    e.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    e.add_argument("--out", help="event-based CSV path")
    e.add_argument("--events-out", help="decoded events as JSON")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="SVG and CSV figures from run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("check", help="gradient and property self-tests")
    c.set_defaults(func=cmd_check)
    return parser


def _thread_limit():
    raw = os.environ.get("MILPOOL_THREADS")
    if raw is None or raw == "":
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"MILPOOL_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, checkpoint.CheckpointError, ReportError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
