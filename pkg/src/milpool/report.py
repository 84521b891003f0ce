"""Static SVG figures with sibling CSVs holding the exact plotted numbers."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .checkpoint import atomic_write_bytes, atomic_write_text  # noqa: E402
from .sed_metrics import Reliability  # noqa: E402

SVG_METADATA = {"Date": None, "Creator": None}


class ReportError(ValueError):
    pass


@dataclass
class RunSummary:
    """What ``report`` needs from one run directory."""

    name: str
    label: str
    n_trajectory: list[float]
    scores: dict[str, dict[str, float]]
    reliability_conf: Reliability | None
    reliability_post: Reliability | None


def _read_reliability(path: Path) -> Reliability | None:
    if not path.exists():
        return None
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    edges = [float(rows[0]["bin_lo"])] + [float(r["bin_hi"]) for r in rows]
    return Reliability(
        np.array(edges),
        np.array([float(r["mean_score"]) for r in rows]),
        np.array([float(r["accuracy"]) for r in rows]),
        np.array([int(r["count"]) for r in rows]),
    )


def load_run(run_dir) -> RunSummary:
    run = Path(run_dir)
    meta_path = run / "run.json"
    s1_path = run / "stage1_report.json"
    if not meta_path.exists() and not s1_path.exists():
        raise ReportError(f"{run} holds no stage report")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    traj = []
    if s1_path.exists():
        rows = json.loads(s1_path.read_text())["rows"]
        traj = [r["n"] for r in rows if r.get("phase") == "classification" and r.get("n") is not None]
    return RunSummary(
        name=run.name,
        label=meta.get("label", run.name),
        n_trajectory=traj,
        scores=meta.get("scores", {}),
        reliability_conf=_read_reliability(run / "stage1_reliability_confidence.csv"),
        reliability_post=_read_reliability(run / "stage1_reliability_posterior.csv"),
    )


def _save_svg(fig, path: Path):
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def n_curves(runs: list[RunSummary], out_dir: Path) -> list[Path]:
    runs = [r for r in runs if r.n_trajectory]
    if not runs:
        return []
    rows = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in runs:
        ax.plot(range(1, len(r.n_trajectory) + 1), r.n_trajectory, label=r.label)
        rows += [[r.label, e + 1, repr(float(n))] for e, n in enumerate(r.n_trajectory)]
    ax.set_xlabel("epoch")
    ax.set_ylabel("n")
    ax.legend()
    fig.tight_layout()
    svg, table = out_dir / "n_curves.svg", out_dir / "n_curves.csv"
    _save_svg(fig, svg)
    atomic_write_text(table, _csv(rows, ["run", "epoch", "n"]))
    return [svg, table]


def reliability_plot(run: RunSummary, out_dir: Path) -> list[Path]:
    conf, post = run.reliability_conf, run.reliability_post
    if conf is None or post is None:
        return []
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], color="0.6", linestyle="--", label="y = x")
    for rel, name in ((conf, "confidence"), (post, "posterior (positives)")):
        keep = rel.count > 0
        ax.plot(rel.mean_score[keep], rel.accuracy[keep], marker="o", label=name)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("score")
    ax.set_ylabel("frame accuracy")
    ax.legend()
    fig.tight_layout()
    rows = []
    for i in range(len(conf.count)):
        rows.append([
            f"{conf.edges[i]:.4f}", f"{conf.edges[i + 1]:.4f}",
            _num(conf.mean_score[i]), _num(conf.accuracy[i]), int(conf.count[i]),
            _num(post.mean_score[i]), _num(post.accuracy[i]), int(post.count[i]),
        ])
    header = ["bin_lo", "bin_hi", "conf_mean", "conf_accuracy", "conf_count", "post_mean", "post_accuracy", "post_count"]
    svg, table = out_dir / f"reliability_{run.name}.svg", out_dir / f"reliability_{run.name}.csv"
    _save_svg(fig, svg)
    atomic_write_text(table, _csv(rows, header))
    return [svg, table]


def _num(v) -> str:
    return "nan" if np.isnan(v) else repr(float(v))


def er_table(runs: list[RunSummary], out_dir: Path) -> list[Path]:
    rows = []
    for r in runs:
        for stage, model in (("stage1", "MT-SSED"), ("stage2", "C-SSED")):
            s = r.scores.get(stage)
            if s:
                rows.append([r.label, model, _num(s["ER"]), _num(s["F1"]), _num(s.get("segment_ER", np.nan))])
    if not rows:
        return []
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(rows) + 1.5))
    labels = [f"{r[0]} / {r[1]}" for r in rows]
    ax.barh(range(len(rows)), [float(r[2]) for r in rows], color="0.4")
    ax.set_yticks(range(len(rows)), labels)
    ax.invert_yaxis()
    ax.set_xlabel("event-based macro ER")
    fig.tight_layout()
    svg, table = out_dir / "er_table.svg", out_dir / "er_table.csv"
    _save_svg(fig, svg)
    atomic_write_text(table, _csv(rows, ["run", "model", "event_ER", "event_F1", "segment_ER"]))
    return [svg, table]


def build_report(run_dirs, out_dir) -> list[Path]:
    if not run_dirs:
        raise ReportError("no run directories given")
    runs = [load_run(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = n_curves(runs, out)
    for r in runs:
        written += reliability_plot(r, out)
    written += er_table(runs, out)
    if not written:
        raise ReportError("runs contain nothing to plot")
    return written
