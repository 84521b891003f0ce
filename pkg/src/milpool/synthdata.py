"""Deterministic synthetic polyphonic "spectrogram" clips with three label regimes.

Each class owns a fixed random spectral signature. An event adds its class
signature (scaled by a per-event gain) to every frame it covers, on top of
Gaussian background noise. Event counts are Poisson per class, durations
log-normal around the class mean, onsets uniform. Overlapping events of one
class are merged, so each class track is a set of disjoint runs; different
classes overlap freely.

On-disk layout of a dataset directory::

    manifest.json       {version, spec, features_file, clips: [{id, split,
                         offset, length, sha256, weak_labels}]}
    features.bin        little-endian float32, row-major (T, F) per clip,
                        concatenated in sorted-id order
    strong_labels.json  {clip id: [{class, onset_sec, offset_sec}]}  strong + validation
    hidden_truth.json   {clip id: [...]} for every clip, evaluation only
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes, atomic_write_text
from .losses import Availability, FrameTargets
from .numerics import RngStream
from .sed_metrics import EventList, events_to_frames

MANIFEST_VERSION = 1
SPLITS = ("strong", "weak", "unlabeled", "validation")
TRAIN_SPLITS = ("strong", "weak", "unlabeled")

DEFAULT_DURATIONS = (0.5, 0.8, 1.2, 1.6, 2.2, 3.0, 3.8, 4.8, 6.0, 7.0)
DEFAULT_RATES = (0.6, 0.5, 0.5, 0.4, 0.35, 0.3, 0.3, 0.25, 0.2, 0.2)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ClassProfile:
    mean_duration: float
    occurrence_rate: float
    signature_seed: int


def default_profiles(num_classes: int = 10) -> tuple[ClassProfile, ...]:
    out = []
    for k in range(num_classes):
        out.append(
            ClassProfile(
                DEFAULT_DURATIONS[k % len(DEFAULT_DURATIONS)],
                DEFAULT_RATES[k % len(DEFAULT_RATES)],
                1000 + k,
            )
        )
    return tuple(out)


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    frames_per_clip: int = 250
    feature_dim: int = 32
    frame_rate: float = 25.0
    strong: int = 200
    weak: int = 150
    unlabeled: int = 1400
    validation: int = 100
    profiles: tuple[ClassProfile, ...] = ()  # empty: default_profiles(num_classes)
    noise_std: float = 1.0
    signature_norm: float = 2.5
    gain_range: tuple[float, float] = (0.6, 1.4)
    duration_sigma: float = 0.3
    seed: int = 42

    def __post_init__(self):
        profiles = tuple(p if isinstance(p, ClassProfile) else ClassProfile(**p) for p in self.profiles)
        if not profiles:
            profiles = default_profiles(self.num_classes)
        object.__setattr__(self, "profiles", profiles)
        object.__setattr__(self, "gain_range", tuple(float(g) for g in self.gain_range))
        if min(self.strong, self.weak, self.unlabeled, self.validation) < 0:
            raise DatasetError("split counts must be non-negative")
        if self.num_classes < 1 or self.frames_per_clip < 2 or self.feature_dim < 1 or self.frame_rate <= 0:
            raise DatasetError("invalid dataset dimensions")
        if len(profiles) != self.num_classes:
            raise DatasetError(f"{len(profiles)} class profiles for {self.num_classes} classes")
        for p in profiles:
            if p.mean_duration <= 0 or p.occurrence_rate < 0:
                raise DatasetError(f"invalid class profile {p}")
        if self.noise_std < 0 or self.signature_norm < 0:
            raise DatasetError("noise_std and signature_norm must be non-negative")

    @property
    def clip_seconds(self) -> float:
        return self.frames_per_clip / self.frame_rate

    def counts(self) -> dict[str, int]:
        return {s: getattr(self, s) for s in SPLITS}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gain_range"] = list(self.gain_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["profiles"] = tuple(ClassProfile(**p) for p in d.get("profiles", ()))
        return cls(**d)


@dataclass
class FeatureClip:
    id: str
    split: str
    features: np.ndarray
    targets: FrameTargets
    hidden_truth: EventList = field(repr=False)


@dataclass
class TrainingClip:
    """What the trainer may see: features and the labels of the clip's regime."""

    id: str
    features: np.ndarray
    targets: FrameTargets


@dataclass
class Dataset:
    spec: DatasetSpec
    clips: list[FeatureClip]

    def split(self, name: str) -> list[FeatureClip]:
        return [c for c in self.clips if c.split == name]

    def training_view(self) -> list[TrainingClip]:
        return [TrainingClip(c.id, c.features, c.targets) for c in self.clips if c.split in TRAIN_SPLITS]

    def strong_mean_durations(self) -> list[float]:
        """Mean event length per class measured on the strongly labelled split."""
        sums = np.zeros(self.spec.num_classes)
        counts = np.zeros(self.spec.num_classes)
        fr = self.spec.frame_rate
        for c in self.split("strong"):
            for col in range(self.spec.num_classes):
                active = c.targets.t_frame[:, col] > 0.5
                padded = np.concatenate(([0], active.astype(np.int8), [0]))
                d = np.diff(padded)
                lengths = np.flatnonzero(d == -1) - np.flatnonzero(d == 1)
                sums[col] += lengths.sum() / fr
                counts[col] += lengths.size
        prior = np.array([p.mean_duration for p in self.spec.profiles])
        return [float(s / n) if n else float(p) for s, n, p in zip(sums, counts, prior)]


def class_signatures(spec: DatasetSpec) -> np.ndarray:
    sig = np.empty((spec.num_classes, spec.feature_dim))
    for k, p in enumerate(spec.profiles):
        v = RngStream(p.signature_seed, "signature").generator.normal(size=spec.feature_dim)
        sig[k] = spec.signature_norm * v / np.linalg.norm(v)
    return sig


def sample_durations(profile: ClassProfile, spec: DatasetSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    """Event lengths in frames, clipped to [2, T]."""
    sigma = spec.duration_sigma
    mu = math.log(profile.mean_duration) - 0.5 * sigma * sigma
    secs = rng.lognormal(mu, sigma, size=size)
    frames = np.rint(secs * spec.frame_rate).astype(np.int64)
    return np.clip(frames, 2, spec.frames_per_clip)


def _merge(runs: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for s, e in sorted(runs):
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def generate_clip(spec: DatasetSpec, signatures: np.ndarray, split: str, index: int) -> tuple[np.ndarray, EventList]:
    T, F, fr = spec.frames_per_clip, spec.feature_dim, spec.frame_rate
    rng = RngStream(spec.seed, "clip", split, index).generator
    x = rng.normal(0.0, spec.noise_std, size=(T, F))
    events = []
    lo, hi = spec.gain_range
    for k, prof in enumerate(spec.profiles):
        count = rng.poisson(prof.occurrence_rate)
        if count == 0:
            continue
        durs = sample_durations(prof, spec, rng, count)
        runs = []
        for d in durs:
            onset = int(rng.integers(0, T - d + 1))
            gain = rng.uniform(lo, hi)
            x[onset : onset + d] += gain * signatures[k]
            runs.append((onset, onset + int(d)))
        for s, e in _merge(runs):
            events.append((k, s / fr, e / fr))
    events.sort(key=lambda e: (e[1], e[0]))
    # stored as float32 on disk, so keep exactly that precision in memory too
    return x.astype(np.float32).astype(np.float64), EventList(events)


def _targets_for(split: str, truth: EventList, spec: DatasetSpec) -> FrameTargets:
    frames = events_to_frames(truth, spec.frames_per_clip, spec.num_classes, spec.frame_rate).astype(np.float64)
    if split in ("strong", "validation"):
        return FrameTargets.strong(frames)
    if split == "weak":
        return FrameTargets.weak(frames.max(axis=0))
    return FrameTargets.unlabeled()


def generate_dataset(spec: DatasetSpec) -> Dataset:
    signatures = class_signatures(spec)
    clips = []
    for split in SPLITS:
        for i in range(getattr(spec, split)):
            feats, truth = generate_clip(spec, signatures, split, i)
            clips.append(FeatureClip(f"{split}_{i:05d}", split, feats, _targets_for(split, truth, spec), truth))
    return Dataset(spec, clips)


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write manifest, feature blob and label files; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, chunks = [], []
    offset = 0
    strong, hidden = {}, {}
    for clip in sorted(dataset.clips, key=lambda c: c.id):
        raw = np.ascontiguousarray(clip.features, dtype="<f4").tobytes()
        rec = {"id": clip.id, "split": clip.split, "offset": offset, "length": len(raw), "sha256": _sha(raw)}
        if clip.targets.availability is Availability.WEAK:
            rec["weak_labels"] = [int(k) for k in np.flatnonzero(clip.targets.t_clip > 0.5)]
        records.append(rec)
        chunks.append(raw)
        offset += len(raw)
        if clip.targets.availability is Availability.STRONG:
            strong[clip.id] = clip.hidden_truth.to_json()
        hidden[clip.id] = clip.hidden_truth.to_json()
    manifest = {
        "version": MANIFEST_VERSION,
        "spec": dataset.spec.to_dict(),
        "features_file": "features.bin",
        "strong_labels_file": "strong_labels.json",
        "hidden_truth_file": "hidden_truth.json",
        "clips": records,
    }
    atomic_write_bytes(out / "features.bin", b"".join(chunks))
    atomic_write_text(out / "strong_labels.json", json.dumps(strong, indent=1, sort_keys=True))
    atomic_write_text(out / "hidden_truth.json", json.dumps(hidden, indent=1, sort_keys=True))
    path = out / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unreadable manifest {path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')!r} (expected {MANIFEST_VERSION})")
    spec = DatasetSpec.from_dict(manifest["spec"])
    root = path.parent
    blob = (root / manifest["features_file"]).read_bytes()
    strong = json.loads((root / manifest["strong_labels_file"]).read_text())
    hidden = json.loads((root / manifest["hidden_truth_file"]).read_text())
    T, F = spec.frames_per_clip, spec.feature_dim
    clips = []
    for rec in manifest["clips"]:
        start, length = rec["offset"], rec["length"]
        raw = blob[start : start + length]
        if len(raw) != length or length != 4 * T * F or _sha(raw) != rec["sha256"]:
            raise DatasetError(f"checksum mismatch for clip {rec['id']}")
        feats = np.frombuffer(raw, dtype="<f4").reshape(T, F).astype(np.float64)
        split = rec["split"]
        truth = EventList.from_json(hidden[rec["id"]])
        if split in ("strong", "validation"):
            labels = EventList.from_json(strong[rec["id"]])
            targets = FrameTargets.strong(events_to_frames(labels, T, spec.num_classes, spec.frame_rate).astype(np.float64))
        elif split == "weak":
            tc = np.zeros(spec.num_classes)
            tc[rec["weak_labels"]] = 1.0
            targets = FrameTargets.weak(tc)
        else:
            targets = FrameTargets.unlabeled()
        clips.append(FeatureClip(rec["id"], split, feats, targets, truth))
    order = {s: i for i, s in enumerate(SPLITS)}
    clips.sort(key=lambda c: (order[c.split], c.id))
    return Dataset(spec, clips)


def manifest_digest(manifest_path) -> str:
    """sha256 over manifest and feature blob, for reproducibility checks."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    h = hashlib.sha256(path.read_bytes())
    h.update((path.parent / "features.bin").read_bytes())
    return h.hexdigest()
