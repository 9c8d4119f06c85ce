"""Region Jaccard (J), pixel F-measure (F) and the weighted J&F composite.

All scores are computed from raw pixel counts::

    J = |P & G| / |P | G|
    precision = |P & G| / |P|,  recall = |P & G| / |G|
    F = 2 * precision * recall / (precision + recall)

so for two non-empty masks ``F == 2J / (1 + J)``. F here is the region
F-measure, not the contour-based boundary F used by the DAVIS toolkit.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping

import numpy as np

from vosfuse.errors import DimensionMismatch, FrameCountMismatch, OutOfRange
from vosfuse.mask_io import VideoSequence, object_ids

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricConfig:
    """Composite weights and the conventions for empty masks.

    ``empty_empty_score=None`` leaves frames where both masks are empty
    unscored instead of crediting them.
    """

    j_weight: float = 0.5
    f_weight: float = 0.5
    empty_empty_score: float | None = 1.0
    empty_gt_nonempty_pred_score: float = 0.0
    skip_first_frame: bool = True

    def __post_init__(self) -> None:
        if self.j_weight < 0 or self.f_weight < 0:
            raise ValueError("J and F weights must be non-negative")
        if abs(self.j_weight + self.f_weight - 1.0) > 1e-9:
            raise ValueError(f"J and F weights must sum to 1, got {self.j_weight} + {self.f_weight}")


DEFAULT_CONFIG = MetricConfig()


@dataclass(frozen=True)
class FrameScore:
    j: float
    f: float
    precision: float
    recall: float
    defined: bool = True


def _counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    return int(pred.sum()), int(gt.sum()), int(np.count_nonzero(pred & gt))


def jaccard(pred: np.ndarray, gt: np.ndarray, cfg: MetricConfig = DEFAULT_CONFIG) -> float:
    n_pred, n_gt, inter = _counts(pred, gt)
    if n_gt == 0:
        if n_pred == 0:
            return cfg.empty_empty_score if cfg.empty_empty_score is not None else float("nan")
        return cfg.empty_gt_nonempty_pred_score
    return inter / (n_pred + n_gt - inter)


def precision_recall(pred: np.ndarray, gt: np.ndarray) -> tuple[float | None, float | None]:
    """Pixel precision and recall; ``None`` marks an empty denominator."""
    n_pred, n_gt, inter = _counts(pred, gt)
    precision = inter / n_pred if n_pred else None
    recall = inter / n_gt if n_gt else None
    return precision, recall


def _f_from_pr(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f_measure(pred: np.ndarray, gt: np.ndarray, cfg: MetricConfig = DEFAULT_CONFIG) -> float:
    return frame_score(pred, gt, cfg).f


def frame_score(pred: np.ndarray, gt: np.ndarray, cfg: MetricConfig = DEFAULT_CONFIG) -> FrameScore:
    """All four numbers for one binary mask pair, with empty-mask conventions applied."""
    n_pred, n_gt, inter = _counts(pred, gt)
    if n_gt == 0:
        if n_pred == 0:
            s = cfg.empty_empty_score
            if s is None:
                return FrameScore(float("nan"), float("nan"), float("nan"), float("nan"), defined=False)
            return FrameScore(s, s, s, s)
        s = cfg.empty_gt_nonempty_pred_score
        return FrameScore(s, s, 0.0, s)
    if n_pred == 0:
        return FrameScore(0.0, 0.0, 0.0, 0.0)
    precision = inter / n_pred
    recall = inter / n_gt
    return FrameScore(inter / (n_pred + n_gt - inter), _f_from_pr(precision, recall), precision, recall)


def composite_jf(j: float, f: float, cfg: MetricConfig = DEFAULT_CONFIG) -> float:
    if not (0.0 <= j <= 1.0 and 0.0 <= f <= 1.0):
        raise OutOfRange(f"J={j} and F={f} must lie in [0, 1]")
    return cfg.j_weight * j + cfg.f_weight * f


def round_half_up(value: float, places: int = 4) -> float:
    """Round like a results table does: 0.87255 -> 0.8726.

    The value is first snapped to 12 decimals so binary representation error
    (0.87255 is stored as 0.872549999...) cannot flip the half-way case.
    """
    snapped = Decimal(repr(round(value, 12)))
    return float(snapped.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


def format_score(value: float, places: int = 4) -> str:
    return f"{round_half_up(value, places):.{places}f}"


# -- sequences ----------------------------------------------------------------


def _check_pair(pred: VideoSequence, gt: VideoSequence) -> None:
    if len(pred) != len(gt):
        raise FrameCountMismatch(
            f"video {gt.video_id}: {len(pred)} predicted frames vs {len(gt)} ground-truth frames"
        )
    if len(gt) and pred.shape != gt.shape:
        raise DimensionMismatch(
            f"video {gt.video_id}: prediction {pred.shape[0]}x{pred.shape[1]} "
            f"vs ground truth {gt.shape[0]}x{gt.shape[1]}"
        )


def scored_frame_indices(n_frames: int, cfg: MetricConfig = DEFAULT_CONFIG) -> range:
    # a one-frame video has nothing but its annotation, so that frame is scored
    start = 1 if cfg.skip_first_frame and n_frames > 1 else 0
    return range(start, n_frames)


def frame_scores(
    pred: VideoSequence, gt: VideoSequence, cfg: MetricConfig = DEFAULT_CONFIG
) -> dict[int, list[FrameScore]]:
    """Per-object list of frame scores; the roster is the first GT frame's labels."""
    _check_pair(pred, gt)
    if not len(gt):
        return {}
    roster = object_ids(gt.frames[0])
    out: dict[int, list[FrameScore]] = {obj: [] for obj in roster}
    for t in scored_frame_indices(len(gt), cfg):
        p, g = np.asarray(pred.frames[t]), np.asarray(gt.frames[t])
        for obj in roster:
            out[obj].append(frame_score(p == obj, g == obj, cfg))
    return out


def mean_score(scores: list[FrameScore]) -> FrameScore:
    defined = [s for s in scores if s.defined]
    if not defined:
        nan = float("nan")
        return FrameScore(nan, nan, nan, nan, defined=False)
    n = len(defined)
    return FrameScore(
        j=sum(s.j for s in defined) / n,
        f=sum(s.f for s in defined) / n,
        precision=sum(s.precision for s in defined) / n,
        recall=sum(s.recall for s in defined) / n,
    )


def evaluate_video(
    pred: VideoSequence, gt: VideoSequence, cfg: MetricConfig = DEFAULT_CONFIG
) -> dict[int, FrameScore]:
    """Mean frame score per object, frame 0 excluded unless configured otherwise."""
    return {obj: mean_score(scores) for obj, scores in frame_scores(pred, gt, cfg).items()}


def video_jf(per_object: Mapping[int, FrameScore], cfg: MetricConfig = DEFAULT_CONFIG) -> float | None:
    """Mean composite over scored objects, or ``None`` when no object was scored."""
    scored = [s for s in per_object.values() if s.defined]
    if not scored:
        return None
    j = sum(s.j for s in scored) / len(scored)
    f = sum(s.f for s in scored) / len(scored)
    return composite_jf(j, f, cfg)


@dataclass
class ScoreTable:
    per_object: dict[str, dict[int, FrameScore]]
    per_video: dict[str, tuple[float, float, float]]
    global_score: tuple[float, float, float]
    config: MetricConfig = field(default_factory=MetricConfig)

    @property
    def global_jf(self) -> float:
        return self.global_score[2]

    def to_dict(self) -> dict:
        def nums(j: float, f: float, jf: float) -> dict:
            return {"J": round_half_up(j), "F": round_half_up(f), "JF": round_half_up(jf)}

        videos = {}
        for video in sorted(self.per_object):
            entry = {"objects": {}}
            if video in self.per_video:
                entry.update(nums(*self.per_video[video]))
            for obj, s in sorted(self.per_object[video].items()):
                if not s.defined:
                    continue
                entry["objects"][str(obj)] = {
                    **nums(s.j, s.f, composite_jf(s.j, s.f, self.config)),
                    "precision": round_half_up(s.precision),
                    "recall": round_half_up(s.recall),
                }
            videos[video] = entry
        return {"config": asdict(self.config), "global": nums(*self.global_score), "videos": videos}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["video", "object", "J", "F", "JF"])
        for video in sorted(self.per_object):
            for obj, s in sorted(self.per_object[video].items()):
                if s.defined:
                    jf = composite_jf(s.j, s.f, self.config)
                    writer.writerow([video, obj, format_score(s.j), format_score(s.f), format_score(jf)])
        j, f, jf = self.global_score
        writer.writerow(["GLOBAL", "", format_score(j), format_score(f), format_score(jf)])
        return buf.getvalue()


def evaluate_dataset(
    preds: Mapping[str, VideoSequence],
    gt: Mapping[str, VideoSequence],
    cfg: MetricConfig = DEFAULT_CONFIG,
    jobs: int = 1,
) -> ScoreTable:
    """Score one model's sequences against ground truth.

    The global J and F are unweighted means over all (video, object) pairs.
    """
    videos = sorted(gt)
    missing = [v for v in videos if v not in preds]
    if missing:
        raise FrameCountMismatch(f"no predictions for video(s) {', '.join(missing)}")

    def one(video: str) -> dict[int, FrameScore]:
        return evaluate_video(preds[video], gt[video], cfg)

    if jobs > 1 and len(videos) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, videos))
    else:
        results = [one(v) for v in videos]

    per_object: dict[str, dict[int, FrameScore]] = {}
    per_video: dict[str, tuple[float, float, float]] = {}
    all_j: list[float] = []
    all_f: list[float] = []
    for video, scores in zip(videos, results):
        per_object[video] = scores
        scored = [s for s in scores.values() if s.defined]
        if not scored:
            logger.warning("video %s has no scorable objects", video)
            continue
        j = sum(s.j for s in scored) / len(scored)
        f = sum(s.f for s in scored) / len(scored)
        per_video[video] = (j, f, composite_jf(j, f, cfg))
        all_j.extend(s.j for s in scored)
        all_f.extend(s.f for s in scored)
    if all_j:
        gj, gf = sum(all_j) / len(all_j), sum(all_f) / len(all_f)
    else:
        gj = gf = 0.0
    return ScoreTable(per_object, per_video, (gj, gf, composite_jf(gj, gf, cfg)), cfg)
