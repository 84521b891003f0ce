"""Turning frame posteriors into events, and scoring events against references.

Event-based scoring follows the usual collar rules: an estimate matches a
reference of the same class when the onsets differ by at most 200 ms and the
offsets by at most ``max(200 ms, 20% of the reference length)``. Matching is
greedy in reference order, each estimate used once. Per class::

    DEL = Nfn / Nref    INS = Nfp / Nref    ER = DEL + INS
    F1  = 2 Ntp / (2 Ntp + Nfp + Nfn)

and the macro row is the unweighted mean over classes with ``Nref > 0``.
Classes without references are reported with NaN rates and left out of the
macro average.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import _backend

CSV_COLUMNS = ("class", "ER", "F1", "DEL", "INS", "Ntp", "Nfp", "Nfn", "Nref")


class Event(NamedTuple):
    class_id: int
    onset: float
    offset: float


class EventList:
    """Immutable sequence of events for one clip."""

    def __init__(self, events: Iterable = ()):
        evs = []
        for e in events:
            e = Event(int(e[0]), float(e[1]), float(e[2]))
            if not e.offset > e.onset:
                raise ValueError(f"event offset must exceed onset: {e}")
            evs.append(e)
        self.events = tuple(evs)

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def __getitem__(self, i):
        return self.events[i]

    def __eq__(self, other):
        return isinstance(other, EventList) and self.events == other.events

    def __repr__(self):
        return f"EventList({list(self.events)!r})"

    def of_class(self, k: int) -> list[Event]:
        return [e for e in self.events if e.class_id == k]

    def shifted(self, dt: float) -> "EventList":
        return EventList((e.class_id, e.onset + dt, e.offset + dt) for e in self.events)

    def to_json(self) -> list[dict]:
        return [{"class": e.class_id, "onset_sec": e.onset, "offset_sec": e.offset} for e in self.events]

    @classmethod
    def from_json(cls, items) -> "EventList":
        return cls((d["class"], d["onset_sec"], d["offset_sec"]) for d in items)


def median_filter(binary, window: int) -> np.ndarray:
    """Binary median filter; the window shrinks symmetrically near the edges."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"median filter window must be odd and >= 1, got {window}")
    seq = np.asarray(binary)
    if seq.ndim != 1:
        raise ValueError("median_filter works on one sequence at a time")
    if seq.size == 0:
        return seq.astype(np.int8)
    return np.asarray(_backend.median_filter_binary(seq.astype(np.int64), int(window)))


def class_windows_from_durations(mean_durations, frame_rate: float, ratio: float = 1.0 / 3.0) -> list[int]:
    """Median window per class, proportional to its mean event duration, forced odd."""
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    out = []
    for d in mean_durations:
        if d <= 0:
            raise ValueError("durations must be positive")
        w = int(math.floor(ratio * d * frame_rate + 0.5))
        if w % 2 == 0:
            w -= 1
        out.append(max(w, 1))
    return out


def _runs(active: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of ones as inclusive (start, end) frame pairs."""
    padded = np.concatenate(([0], active.astype(np.int8), [0]))
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def decode_events(frame_probs, threshold: float = 0.5, class_windows: Sequence[int] | None = None, frame_rate: float = 25.0) -> EventList:
    """Threshold, median-filter per class, and emit one event per run of active frames."""
    probs = np.asarray(frame_probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("frame_probs must be (T, C)")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    T, C = probs.shape
    if class_windows is None:
        class_windows = [1] * C
    if len(class_windows) != C:
        raise ValueError(f"{len(class_windows)} windows for {C} classes")
    events = []
    for k in range(C):
        active = median_filter((probs[:, k] >= threshold).astype(np.int8), class_windows[k])
        for start, end in _runs(active):
            events.append((k, start / frame_rate, (end + 1) / frame_rate))
    events.sort(key=lambda e: (e[1], e[0]))
    return EventList(events)


def events_to_frames(events: EventList, num_frames: int, num_classes: int, frame_rate: float) -> np.ndarray:
    """(T, C) 0/1 activity; frame i is active if an event covers [i, i+1) / frame_rate."""
    out = np.zeros((num_frames, num_classes), dtype=np.int8)
    for e in events:
        start = max(int(math.floor(e.onset * frame_rate + 1e-9)), 0)
        end = min(int(math.ceil(e.offset * frame_rate - 1e-9)), num_frames)
        if end > start:
            out[start:end, e.class_id] = 1
    return out


@dataclass
class ClassScore:
    ntp: int = 0
    nfp: int = 0
    nfn: int = 0
    nref: int = 0

    @property
    def deletion(self) -> float:
        return self.nfn / self.nref if self.nref else math.nan

    @property
    def insertion(self) -> float:
        return self.nfp / self.nref if self.nref else math.nan

    @property
    def error_rate(self) -> float:
        return (self.nfn + self.nfp) / self.nref if self.nref else math.nan

    @property
    def f1(self) -> float:
        denom = 2 * self.ntp + self.nfp + self.nfn
        return 2 * self.ntp / denom if denom else math.nan

    def __iadd__(self, other: "ClassScore"):
        self.ntp += other.ntp
        self.nfp += other.nfp
        self.nfn += other.nfn
        self.nref += other.nref
        return self


@dataclass
class ScoreBlock:
    """Per-class counts at one granularity (events or segments)."""

    classes: dict[int, ClassScore] = field(default_factory=dict)

    def scored_classes(self) -> list[int]:
        return sorted(k for k, s in self.classes.items() if s.nref > 0)

    def macro(self) -> dict[str, float]:
        ks = self.scored_classes()
        if not ks:
            return {"ER": math.nan, "F1": math.nan, "DEL": math.nan, "INS": math.nan}
        rows = [self.classes[k] for k in ks]
        f1s = [r.f1 for r in rows]
        return {
            "ER": float(np.mean([r.error_rate for r in rows])),
            "F1": float(np.mean(f1s)),
            "DEL": float(np.mean([r.deletion for r in rows])),
            "INS": float(np.mean([r.insertion for r in rows])),
        }

    def totals(self) -> ClassScore:
        tot = ClassScore()
        for s in self.classes.values():
            tot += s
        return tot

    def rows(self, class_names: Sequence[str] | None = None) -> list[list]:
        out = []
        for k in sorted(self.classes):
            s = self.classes[k]
            name = class_names[k] if class_names else str(k)
            out.append([name, s.error_rate, s.f1, s.deletion, s.insertion, s.ntp, s.nfp, s.nfn, s.nref])
        m = self.macro()
        t = self.totals()
        out.append(["macro", m["ER"], m["F1"], m["DEL"], m["INS"], t.ntp, t.nfp, t.nfn, t.nref])
        return out

    def to_csv(self, class_names=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows(class_names):
            w.writerow([row[0]] + [_fmt(v) for v in row[1:5]] + row[5:])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


@dataclass
class ScoreReport:
    event: ScoreBlock | None = None
    segment: ScoreBlock | None = None


def _per_clip(reference, estimate):
    if isinstance(reference, EventList) or isinstance(estimate, EventList):
        return [reference if isinstance(reference, EventList) else EventList(reference)], [
            estimate if isinstance(estimate, EventList) else EventList(estimate)
        ]
    refs = [r if isinstance(r, EventList) else EventList(r) for r in reference]
    ests = [e if isinstance(e, EventList) else EventList(e) for e in estimate]
    if len(refs) != len(ests):
        raise ValueError("reference and estimate cover different numbers of clips")
    return refs, ests


def _class_ids(refs, ests, num_classes):
    ids = set(range(num_classes)) if num_classes else set()
    for lst in (*refs, *ests):
        ids.update(e.class_id for e in lst)
    return sorted(ids)


def match_events(ref: list[Event], est: list[Event], onset_collar=0.2, offset_collar=0.2, offset_ratio=0.2) -> int:
    """Greedy one-to-one matching in reference order; returns the number of hits."""
    used = [False] * len(est)
    hits = 0
    for r in ref:
        off_tol = max(offset_collar, offset_ratio * (r.offset - r.onset))
        for j, e in enumerate(est):
            if used[j]:
                continue
            # tiny slack so collars given in decimal seconds are inclusive despite rounding
            if abs(e.onset - r.onset) <= onset_collar + 1e-9 and abs(e.offset - r.offset) <= off_tol + 1e-9:
                used[j] = True
                hits += 1
                break
    return hits


def event_based_scores(reference, estimate, onset_collar: float = 0.2, offset_collar: float = 0.2, offset_ratio: float = 0.2, num_classes: int | None = None) -> ScoreReport:
    """Event-level counts and rates. Accepts one EventList each or per-clip lists of them."""
    refs, ests = _per_clip(reference, estimate)
    block = ScoreBlock({k: ClassScore() for k in _class_ids(refs, ests, num_classes)})
    for ref, est in zip(refs, ests):
        for k in block.classes:
            rk, ek = ref.of_class(k), est.of_class(k)
            tp = match_events(rk, ek, onset_collar, offset_collar, offset_ratio)
            block.classes[k] += ClassScore(tp, len(ek) - tp, len(rk) - tp, len(rk))
    return ScoreReport(event=block)


def segment_activity(events: EventList, clip_len: float, num_classes: int, segment_len: float = 1.0) -> np.ndarray:
    """(num_segments, C) 0/1 raster; a segment is active if any event overlaps it."""
    nseg = int(math.ceil(clip_len / segment_len - 1e-9))
    out = np.zeros((nseg, num_classes), dtype=np.int8)
    for e in events:
        first = max(int(math.floor(e.onset / segment_len)), 0)
        last = min(int(math.ceil(e.offset / segment_len)) - 1, nseg - 1)
        out[first : last + 1, e.class_id] = 1
    return out


def segment_based_scores(reference, estimate, clip_len: float, segment_len: float = 1.0, num_classes: int | None = None) -> ScoreReport:
    refs, ests = _per_clip(reference, estimate)
    ids = _class_ids(refs, ests, num_classes)
    C = max(ids) + 1 if ids else 0
    block = ScoreBlock({k: ClassScore() for k in ids})
    for ref, est in zip(refs, ests):
        r = segment_activity(ref, clip_len, C, segment_len)
        e = segment_activity(est, clip_len, C, segment_len)
        for k in ids:
            tp = int(np.sum((r[:, k] == 1) & (e[:, k] == 1)))
            fp = int(np.sum((r[:, k] == 0) & (e[:, k] == 1)))
            fn = int(np.sum((r[:, k] == 1) & (e[:, k] == 0)))
            block.classes[k] += ClassScore(tp, fp, fn, int(r[:, k].sum()))
    return ScoreReport(segment=block)


@dataclass
class Reliability:
    """Per-bin mean score, accuracy and occupancy (NaN where a bin is empty)."""

    edges: np.ndarray
    mean_score: np.ndarray
    accuracy: np.ndarray
    count: np.ndarray

    def occupied(self, min_count: int = 1) -> np.ndarray:
        return self.count >= min_count

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "mean_score", "accuracy", "count"])
        for i in range(len(self.count)):
            w.writerow([f"{self.edges[i]:.4f}", f"{self.edges[i + 1]:.4f}", _fmt(self.mean_score[i]), _fmt(self.accuracy[i]), int(self.count[i])])
        return buf.getvalue()


def _bin(scores, correct, bins):
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.floor(scores * bins).astype(np.int64), 0, bins - 1)
    count = np.bincount(idx, minlength=bins)
    s_sum = np.bincount(idx, weights=scores, minlength=bins)
    c_sum = np.bincount(idx, weights=correct.astype(np.float64), minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, s_sum / np.maximum(count, 1), np.nan)
        acc = np.where(count > 0, c_sum / np.maximum(count, 1), np.nan)
    return Reliability(edges, mean, acc, count)


def _flatten(a) -> np.ndarray:
    if isinstance(a, (list, tuple)):
        return np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in a])
    return np.asarray(a, dtype=np.float64).ravel()


def confidence_reliability(frame_probs, confidence, truth, bins: int = 10, threshold: float = 0.5) -> tuple[Reliability, Reliability]:
    """Accuracy of binarised frame predictions, binned by confidence.

    Returns ``(by_confidence, by_posterior_on_positives)``; the second bins
    only predictions with probability >= ``threshold`` by that probability.
    Inputs are arrays of matching shape or lists of per-clip arrays.
    """
    if bins < 2:
        raise ValueError("need at least two bins")
    p, c, t = _flatten(frame_probs), _flatten(confidence), _flatten(truth)
    if not (p.shape == c.shape == t.shape):
        raise ValueError("frame_probs, confidence and truth differ in size")
    pred = p >= threshold
    correct = pred == (t >= 0.5)
    by_conf = _bin(c, correct, bins)
    by_prob = _bin(p[pred], correct[pred], bins)
    return by_conf, by_prob


def write_events_json(path, per_clip: dict[str, EventList]):
    from .checkpoint import atomic_write_text

    atomic_write_text(path, json.dumps({k: v.to_json() for k, v in per_clip.items()}, indent=1, sort_keys=True))


def read_events_json(path) -> dict[str, EventList]:
    with open(path) as fh:
        data = json.load(fh)
    return {k: EventList.from_json(v) for k, v in data.items()}
