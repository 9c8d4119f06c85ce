"""Per-video (or per-frame) model recommendation against fused pseudo-labels.

Each model is scored by J&F against the pseudo-labels and the best one wins
its unit. A feature-bucketed performance database records how each model
scored historically; it feeds the fusion weights and breaks exact ties
before the lexicographic fallback on model id.
"""

from __future__ import annotations

import copy
import enum
import json
import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from vosfuse.errors import ConfigInvalid, ScoreOutOfRange, UnknownModel
from vosfuse.fusion import PseudoLabelSet
from vosfuse.mask_io import PredictionSet, VideoSequence, object_ids, write_json
from vosfuse.metrics import (
    DEFAULT_CONFIG,
    MetricConfig,
    composite_jf,
    evaluate_video,
    frame_score,
    scored_frame_indices,
    video_jf,
)


@dataclass(frozen=True)
class FrameFeatures:
    object_count: int
    mean_object_area_fraction: float
    min_object_area_fraction: float
    scene_complexity: float


def extract_features(frame: np.ndarray) -> FrameFeatures:
    """Object count, object size distribution and label-boundary density.

    Complexity is the fraction of horizontally or vertically adjacent pixel
    pairs whose labels differ.
    """
    frame = np.asarray(frame)
    total = frame.size
    counts = np.bincount(frame.ravel().astype(np.int64))
    areas = [int(c) / total for label, c in enumerate(counts) if label != 0 and c > 0]
    h, w = frame.shape
    pairs = h * (w - 1) + (h - 1) * w
    if pairs:
        differing = np.count_nonzero(frame[:, 1:] != frame[:, :-1]) + np.count_nonzero(frame[1:, :] != frame[:-1, :])
        complexity = differing / pairs
    else:
        complexity = 0.0
    return FrameFeatures(
        object_count=len(areas),
        mean_object_area_fraction=sum(areas) / len(areas) if areas else 0.0,
        min_object_area_fraction=min(areas) if areas else 0.0,
        scene_complexity=complexity,
    )


COUNT_BINS = ("0", "1", "2-3", "4+")
SIZE_BINS = ("tiny", "small", "medium", "large")
COMPLEXITY_BINS = ("low", "high")


@dataclass(frozen=True, order=True)
class FeatureBucket:
    count: str
    size: str
    complexity: str


def bucket_features(features: FrameFeatures, complexity_split: float | None) -> FeatureBucket:
    n = features.object_count
    count = "0" if n == 0 else "1" if n == 1 else "2-3" if n <= 3 else "4+"
    a = features.min_object_area_fraction
    size = "tiny" if a < 0.005 else "small" if a < 0.02 else "medium" if a < 0.10 else "large"
    high = complexity_split is not None and features.scene_complexity > complexity_split
    return FeatureBucket(count, size, "high" if high else "low")


@dataclass
class PerformanceDB:
    """bucket -> model -> [score_sum, sample_count], plus the complexity history
    whose median splits the complexity bins."""

    entries: dict[FeatureBucket, dict[str, list]] = field(default_factory=dict)
    version: int = 0
    complexity_history: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(per_model) for per_model in self.entries.values())

    @property
    def complexity_split(self) -> float | None:
        return statistics.median(self.complexity_history) if self.complexity_history else None

    def bucket(self, features: FrameFeatures) -> FeatureBucket:
        return bucket_features(features, self.complexity_split)

    def mean(self, bucket: FeatureBucket, model: str) -> float | None:
        entry = self.entries.get(bucket, {}).get(model)
        if entry is None:
            return None
        return entry[0] / entry[1]

    def record(self, features: FrameFeatures, model: str, score: float) -> None:
        """In-place update; :func:`update_performance_db` is the copying form."""
        if not (0.0 <= score <= 1.0):
            raise ScoreOutOfRange(f"score {score} for model {model} outside [0, 1]")
        bucket = self.bucket(features)
        entry = self.entries.setdefault(bucket, {}).setdefault(model, [0.0, 0])
        entry[0] += float(score)
        entry[1] += 1
        self.complexity_history.append(float(features.scene_complexity))
        self.version += 1

    def to_dict(self) -> dict:
        entries = [
            {
                "bucket": {"count": b.count, "size": b.size, "complexity": b.complexity},
                "model": model,
                "score_sum": s,
                "sample_count": n,
            }
            for b in sorted(self.entries)
            for model, (s, n) in sorted(self.entries[b].items())
        ]
        return {"version": self.version, "complexity_history": list(self.complexity_history), "entries": entries}

    @classmethod
    def from_dict(cls, payload: Mapping) -> PerformanceDB:
        db = cls(version=int(payload.get("version", 0)),
                 complexity_history=[float(c) for c in payload.get("complexity_history", [])])
        for item in payload.get("entries", []):
            b = item["bucket"]
            bucket = FeatureBucket(str(b["count"]), str(b["size"]), str(b["complexity"]))
            if bucket.count not in COUNT_BINS or bucket.size not in SIZE_BINS or bucket.complexity not in COMPLEXITY_BINS:
                raise ConfigInvalid(f"unknown bucket {b}")
            s, n = float(item["score_sum"]), int(item["sample_count"])
            if n < 1 or not (0.0 <= s / n <= 1.0):
                raise ConfigInvalid(f"invalid db entry for {item['model']}: sum={s}, count={n}")
            db.entries.setdefault(bucket, {})[str(item["model"])] = [s, n]
        return db

    def save(self, path: str | os.PathLike) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | os.PathLike) -> PerformanceDB:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def update_performance_db(db: PerformanceDB, features: FrameFeatures, model: str, score: float) -> PerformanceDB:
    new = copy.deepcopy(db)
    new.record(features, model, score)
    return new


# -- scoring and recommendation ---------------------------------------------


def score_against_pseudo(
    model_seq: VideoSequence, pseudo_seq: VideoSequence, cfg: MetricConfig = DEFAULT_CONFIG
) -> float:
    """Mean J&F over the pseudo-label's objects, with the pseudo-labels as ground truth."""
    jf = video_jf(evaluate_video(model_seq, pseudo_seq, cfg), cfg)
    if jf is None:
        return cfg.empty_empty_score if cfg.empty_empty_score is not None else 1.0
    return jf


def frame_jf(pred: np.ndarray, ref: np.ndarray, roster: Sequence[int], cfg: MetricConfig = DEFAULT_CONFIG) -> float:
    """J&F of one frame, averaged over ``roster`` objects."""
    scores = [frame_score(pred == obj, ref == obj, cfg) for obj in roster]
    scores = [s for s in scores if s.defined]
    if not scores:
        return cfg.empty_empty_score if cfg.empty_empty_score is not None else 1.0
    return sum(composite_jf(s.j, s.f, cfg) for s in scores) / len(scores)


class Granularity(str, enum.Enum):
    VIDEO = "video"
    FRAME = "frame"


@dataclass
class ModelChoice:
    granularity: Granularity
    assignments: dict[str, str | list[str]]
    scores: dict[str, dict[str, float]]
    frame_scores: dict[str, list[dict[str, float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "granularity": self.granularity.value,
            "assignments": {v: self.assignments[v] for v in sorted(self.assignments)},
            "scores": {v: {m: s for m, s in sorted(ms.items())} for v, ms in sorted(self.scores.items())},
        }
        if self.frame_scores:
            out["frame_scores"] = {v: self.frame_scores[v] for v in sorted(self.frame_scores)}
        return out


def _pick(scores: Mapping[str, float], prior: Mapping[str, float]) -> str:
    # best score, then best historical prior, then smallest model id
    return min(scores, key=lambda m: (-scores[m], -prior.get(m, 0.0), m))


def _db_prior(db: PerformanceDB | None, frames: Sequence[np.ndarray], models: Sequence[str]) -> dict[str, float]:
    if db is None or not len(db):
        return {}
    buckets = [db.bucket(extract_features(f)) for f in frames]
    prior = {}
    for m in models:
        means = [x for x in (db.mean(b, m) for b in buckets) if x is not None]
        if means:
            prior[m] = sum(means) / len(means)
    return prior


def recommend(
    preds: PredictionSet,
    pseudo: PseudoLabelSet,
    db: PerformanceDB | None = None,
    granularity: Granularity | str = Granularity.VIDEO,
    cfg: MetricConfig = DEFAULT_CONFIG,
) -> ModelChoice:
    granularity = Granularity(granularity)
    models = sorted(preds.models)
    missing = sorted(set(preds.video_ids) ^ set(pseudo.videos))
    if missing:
        raise UnknownModel(f"predictions and pseudo-labels cover different videos: {missing}")
    choice = ModelChoice(granularity, {}, {})
    for video in preds.video_ids:
        ref = pseudo.videos[video]
        video_scores = {m: score_against_pseudo(preds.videos[m][video], ref, cfg) for m in models}
        choice.scores[video] = video_scores
        if granularity is Granularity.VIDEO:
            idx = scored_frame_indices(len(ref), cfg)
            prior = _db_prior(db, [ref.frames[t] for t in idx], models)
            choice.assignments[video] = _pick(video_scores, prior)
            continue
        roster = object_ids(ref.frames[0]) if len(ref) else []
        picks, per_frame = [], []
        for t, ref_frame in enumerate(ref.frames):
            scores = {m: frame_jf(np.asarray(preds.videos[m][video].frames[t]), ref_frame, roster, cfg) for m in models}
            prior = _db_prior(db, [ref_frame], models)
            picks.append(_pick(scores, prior))
            per_frame.append(scores)
        choice.assignments[video] = picks
        choice.frame_scores[video] = per_frame
    return choice


def assemble_final(preds: PredictionSet, choice: ModelChoice) -> dict[str, VideoSequence]:
    """Copy each unit's frames from its assigned model."""
    out = {}
    for video in sorted(choice.assignments):
        assigned = choice.assignments[video]
        used = {assigned} if isinstance(assigned, str) else set(assigned)
        for m in sorted(used):
            if m not in preds.videos:
                raise UnknownModel(f"video {video} is assigned to unknown model {m!r}")
        if isinstance(assigned, str):
            src = preds.videos[assigned][video]
            out[video] = VideoSequence(video, [f.copy() for f in src.frames], list(src.frame_names))
        else:
            per_frame = list(assigned)
            names = preds.videos[per_frame[0]][video].frame_names
            if len(per_frame) != len(names):
                raise UnknownModel(f"video {video}: {len(per_frame)} assignments for {len(names)} frames")
            frames = [preds.videos[m][video].frames[t].copy() for t, m in enumerate(per_frame)]
            out[video] = VideoSequence(video, frames, list(names))
    return out


def record_scores(
    db: PerformanceDB | None,
    preds: PredictionSet,
    pseudo: PseudoLabelSet,
    cfg: MetricConfig = DEFAULT_CONFIG,
) -> PerformanceDB:
    """Return a copy of ``db`` updated with every model's frame-level J&F against
    the pseudo-labels. Buckets use the complexity split of the incoming db."""
    new = copy.deepcopy(db) if db is not None else PerformanceDB()
    split = new.complexity_split
    for video in preds.video_ids:
        ref = pseudo.videos[video]
        roster = object_ids(ref.frames[0]) if len(ref) else []
        for t in scored_frame_indices(len(ref), cfg):
            features = extract_features(ref.frames[t])
            bucket = bucket_features(features, split)
            for m in sorted(preds.models):
                score = frame_jf(np.asarray(preds.videos[m][video].frames[t]), ref.frames[t], roster, cfg)
                entry = new.entries.setdefault(bucket, {}).setdefault(m, [0.0, 0])
                entry[0] += score
                entry[1] += 1
                new.version += 1
            new.complexity_history.append(float(features.scene_complexity))
    return new
