"""Pseudo-label fusion of several models' label maps.

Frames to fuse are passed as a mapping ``model id -> label map``. Weighted
label shares are always accumulated over model ids in sorted order, so the
result does not depend on the order the models were listed in.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from vosfuse.errors import ConfidenceOutOfRange, DimensionMismatch, EmptyInput, NegativeConfidence
from vosfuse.mask_io import PredictionSet, VideoSequence

if TYPE_CHECKING:
    from vosfuse.selection import PerformanceDB

logger = logging.getLogger(__name__)

UNANIMOUS, MAJORITY, CONFLICT = 0, 1, 2
STATUS_NAMES = ("unanimous", "majority", "conflict")

# shares closer than this are treated as tied
TIE_EPS = 1e-9


class FusionMethod(str, enum.Enum):
    VOTE = "vote"
    AVG_BBOX = "avg-bbox"
    MAX_BBOX = "max-bbox"
    PGMR = "pgmr"


def _stack(frames: Mapping[str, np.ndarray]) -> tuple[list[str], np.ndarray]:
    if not frames:
        raise EmptyInput("no frames to fuse")
    ids = sorted(frames)
    arrays = [np.asarray(frames[m]) for m in ids]
    shape = arrays[0].shape
    for m, a in zip(ids, arrays):
        if a.shape != shape:
            raise DimensionMismatch(f"model {m} frame is {a.shape}, model {ids[0]} frame is {shape}")
    return ids, np.stack(arrays)


def normalize_weights(weights: Mapping[str, float], models: Sequence[str]) -> dict[str, float]:
    missing = [m for m in models if m not in weights]
    if missing:
        raise ValueError(f"no weight for model(s) {', '.join(missing)}")
    if any(weights[m] < 0 for m in models):
        raise ValueError("model weights must be non-negative")
    total = sum(weights[m] for m in sorted(models))
    if total <= 0:
        raise ValueError("at least one model weight must be positive")
    return {m: weights[m] / total for m in models}


def label_shares(
    frames: Mapping[str, np.ndarray], weights: Mapping[str, float]
) -> tuple[np.ndarray, np.ndarray]:
    """Normalized weighted share of every label at every pixel.

    Returns ``(labels, shares)`` with ``labels`` ascending and
    ``shares[i]`` the (H, W) share of ``labels[i]``.
    """
    ids, stack = _stack(frames)
    w = normalize_weights(weights, ids)
    labels = np.unique(stack)
    shares = np.zeros((labels.size,) + stack.shape[1:], dtype=np.float64)
    for i, label in enumerate(labels):
        hit = stack == label
        for k, m in enumerate(ids):
            if w[m]:
                shares[i] += w[m] * hit[k]
    return labels, shares


def _argmax_label(labels: np.ndarray, shares: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    best_label = np.full(shares.shape[1:], labels[0], dtype=labels.dtype)
    best_share = shares[0].copy()
    # labels ascend, so a later label must beat the best strictly to take over
    for i in range(1, labels.size):
        better = shares[i] > best_share + TIE_EPS
        best_label[better] = labels[i]
        best_share[better] = shares[i][better]
    return best_label, best_share


@dataclass
class ConsistencyMap:
    """Per-pixel inter-model agreement.

    ``status`` holds UNANIMOUS / MAJORITY / CONFLICT codes, ``label`` the
    top-share label and ``agreement`` its share. Full label histograms are
    kept only for conflict pixels (``conflict_coords`` rows index
    ``conflict_shares`` rows, columns follow ``labels``).
    """

    status: np.ndarray
    label: np.ndarray
    agreement: np.ndarray
    labels: np.ndarray
    conflict_coords: np.ndarray
    conflict_shares: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.status.shape

    def histogram(self, row: int, col: int) -> dict[int, float]:
        if self.status[row, col] != CONFLICT:
            return {int(self.label[row, col]): float(self.agreement[row, col])}
        hit = np.flatnonzero((self.conflict_coords[:, 0] == row) & (self.conflict_coords[:, 1] == col))
        shares = self.conflict_shares[hit[0]]
        return {int(l): float(s) for l, s in zip(self.labels, shares) if s > 0}

    def fractions(self) -> dict[str, float]:
        total = self.status.size
        counts = np.bincount(self.status.ravel(), minlength=3)
        return {name: float(counts[i]) / total for i, name in enumerate(STATUS_NAMES)}


def _consistency_from_shares(stack: np.ndarray, labels: np.ndarray, shares: np.ndarray) -> ConsistencyMap:
    label, agreement = _argmax_label(labels, shares)
    unanimous = np.all(stack == stack[0], axis=0)
    status = np.full(label.shape, CONFLICT, dtype=np.uint8)
    status[agreement > 0.5 + TIE_EPS] = MAJORITY
    status[unanimous] = UNANIMOUS
    coords = np.argwhere(status == CONFLICT)
    conflict_shares = shares[:, coords[:, 0], coords[:, 1]].T if coords.size else np.zeros((0, labels.size))
    return ConsistencyMap(status, label, agreement, labels, coords, conflict_shares)


def consistency_map(frames: Mapping[str, np.ndarray], weights: Mapping[str, float]) -> ConsistencyMap:
    """Classify each pixel as unanimous, majority (weighted share > 0.5) or conflict."""
    _, stack = _stack(frames)
    labels, shares = label_shares(frames, weights)
    return _consistency_from_shares(stack, labels, shares)


def weighted_pixel_vote(frames: Mapping[str, np.ndarray], weights: Mapping[str, float]) -> np.ndarray:
    """Per pixel, the label with the largest weighted share; ties go to the smaller label."""
    labels, shares = label_shares(frames, weights)
    return _argmax_label(labels, shares)[0]


def uniform_weights(models: Sequence[str]) -> dict[str, float]:
    return {m: 1.0 for m in models}


def confidence_weights(
    db: PerformanceDB | None,
    confidences: Mapping[str, float],
    models: Sequence[str],
    bucket: object | None = None,
) -> dict[str, float]:
    """weight(m) = historical mean score in ``bucket`` x prediction confidence.

    A missing db, bucket or entry counts as a historical score of 1.0; a model
    without a confidence counts as fully confident. If every product is zero
    the weights fall back to uniform.
    """
    weights = {}
    for m in models:
        conf = float(confidences.get(m, 1.0))
        if conf < 0:
            raise NegativeConfidence(f"model {m}: negative confidence {conf}")
        if conf > 1:
            raise ConfidenceOutOfRange(f"model {m}: confidence {conf} above 1")
        hist = 1.0
        if db is not None and bucket is not None:
            mean = db.mean(bucket, m)
            if mean is not None:
                hist = mean
        weights[m] = hist * conf
    if all(w == 0 for w in weights.values()):
        return uniform_weights(models)
    return weights


# -- bounding boxes -----------------------------------------------------------


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel box."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def area(self) -> int:
        return (self.bottom - self.top + 1) * (self.right - self.left + 1)

    def contains(self, other: BBox) -> bool:
        return (
            self.top <= other.top and self.left <= other.left
            and self.bottom >= other.bottom and self.right >= other.right
        )


def bounding_box(mask: np.ndarray) -> BBox | None:
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def _frame_list(frames: Mapping[str, np.ndarray] | Sequence[np.ndarray]) -> list[np.ndarray]:
    if isinstance(frames, Mapping):
        return [np.asarray(frames[m]) for m in sorted(frames)]
    return [np.asarray(f) for f in frames]


def _object_boxes(frames: list[np.ndarray]) -> dict[int, list[BBox]]:
    if not frames:
        raise EmptyInput("no frames to fuse")
    shape = frames[0].shape
    boxes: dict[int, list[BBox]] = {}
    for f in frames:
        if f.shape != shape:
            raise DimensionMismatch(f"frame shape {f.shape} differs from {shape}")
        for obj in np.unique(f):
            if obj != 0:
                boxes.setdefault(int(obj), []).append(bounding_box(f == obj))
    return boxes


def _half_up_mean(values: Sequence[int]) -> int:
    # exact integer form of floor(sum / n + 1/2)
    return (2 * sum(values) + len(values)) // (2 * len(values))


def average_box(boxes: Sequence[BBox]) -> BBox:
    return BBox(
        _half_up_mean([b.top for b in boxes]),
        _half_up_mean([b.left for b in boxes]),
        _half_up_mean([b.bottom for b in boxes]),
        _half_up_mean([b.right for b in boxes]),
    )


def enclosing_box(boxes: Sequence[BBox]) -> BBox:
    return BBox(
        min(b.top for b in boxes),
        min(b.left for b in boxes),
        max(b.bottom for b in boxes),
        max(b.right for b in boxes),
    )


def render_boxes(boxes: Mapping[int, BBox], shape: tuple[int, int], dtype=np.uint8) -> np.ndarray:
    """Fill boxes largest first so smaller objects end up on top."""
    out = np.zeros(shape, dtype=dtype)
    h, w = shape
    for obj, box in sorted(boxes.items(), key=lambda item: (-item[1].area, item[0])):
        top, left = max(box.top, 0), max(box.left, 0)
        bottom, right = min(box.bottom, h - 1), min(box.right, w - 1)
        out[top:bottom + 1, left:right + 1] = obj
    return out


def average_bbox_fusion(frames: Mapping[str, np.ndarray] | Sequence[np.ndarray]) -> np.ndarray:
    """Per object, average the boxes of the models that see it and fill the result."""
    arrays = _frame_list(frames)
    boxes = _object_boxes(arrays)
    return render_boxes({obj: average_box(bs) for obj, bs in boxes.items()}, arrays[0].shape, arrays[0].dtype)


def max_bbox_fusion(frames: Mapping[str, np.ndarray] | Sequence[np.ndarray]) -> np.ndarray:
    """Per object, fill the box enclosing every model's box."""
    arrays = _frame_list(frames)
    boxes = _object_boxes(arrays)
    return render_boxes({obj: enclosing_box(bs) for obj, bs in boxes.items()}, arrays[0].shape, arrays[0].dtype)


# -- full pipeline ------------------------------------------------------------


@dataclass
class PseudoLabelSet:
    videos: dict[str, VideoSequence]
    method: FusionMethod
    consistency: dict[str, list[ConsistencyMap]] = field(default_factory=dict)

    def consistency_summary(self, video: str) -> list[dict]:
        seq = self.videos[video]
        return [
            {"frame": name, **{k: round(v, 6) for k, v in cmap.fractions().items()}}
            for name, cmap in zip(seq.frame_names, self.consistency.get(video, []))
        ]


def fuse_frame_pgmr(
    frames: Mapping[str, np.ndarray],
    confidences: Mapping[str, float],
    db: PerformanceDB | None = None,
) -> tuple[np.ndarray, ConsistencyMap]:
    """Consistency check, confidence weighting, then a vote on conflict pixels."""
    ids, stack = _stack(frames)
    bucket = None
    if db is not None and len(db):
        from vosfuse.selection import extract_features

        provisional = weighted_pixel_vote(frames, uniform_weights(ids))
        bucket = db.bucket(extract_features(provisional))
    weights = confidence_weights(db, confidences, ids, bucket)
    labels, shares = label_shares(frames, weights)
    cmap = _consistency_from_shares(stack, labels, shares)
    fused = cmap.label.copy()
    conflict = cmap.status == CONFLICT
    if conflict.any():
        voted, _ = _argmax_label(labels, shares)
        fused[conflict] = voted[conflict]
    return fused.astype(stack.dtype, copy=False), cmap


def _fuse_video(preds: PredictionSet, video: str, db: PerformanceDB | None, method: FusionMethod):
    models = preds.models
    seqs = [preds.videos[m][video] for m in models]
    names = seqs[0].frame_names
    conf = {m: preds.frame_confidences(m, video) for m in models}
    fused, maps = [], []
    for t in range(len(names)):
        frames = {m: s.frames[t] for m, s in zip(models, seqs)}
        if method is FusionMethod.PGMR:
            frame, cmap = fuse_frame_pgmr(frames, {m: conf[m][t] for m in models}, db)
            maps.append(cmap)
        elif method is FusionMethod.VOTE:
            frame = weighted_pixel_vote(frames, uniform_weights(models))
        elif method is FusionMethod.AVG_BBOX:
            frame = average_bbox_fusion(frames)
        elif method is FusionMethod.MAX_BBOX:
            frame = max_bbox_fusion(frames)
        else:
            raise ValueError(f"unknown fusion method {method!r}")
        fused.append(frame)
    return VideoSequence(video, fused, list(names)), maps


def build_pseudo_labels(
    preds: PredictionSet,
    db: PerformanceDB | None = None,
    method: FusionMethod | str = FusionMethod.PGMR,
    jobs: int = 1,
) -> PseudoLabelSet:
    method = FusionMethod(method)
    videos = preds.video_ids
    if jobs > 1 and len(videos) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda v: _fuse_video(preds, v, db, method), videos))
    else:
        results = [_fuse_video(preds, v, db, method) for v in videos]
    out = PseudoLabelSet(videos={}, method=method)
    for video, (seq, maps) in zip(videos, results):
        out.videos[video] = seq
        if method is FusionMethod.PGMR:
            out.consistency[video] = maps
    return out
