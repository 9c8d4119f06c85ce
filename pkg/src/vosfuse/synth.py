"""Deterministic synthetic VOS benchmark.

Ground truth: rectangles and ellipses moving on piecewise-linear paths.
Later-indexed objects occlude earlier ones, objects may vanish for a
contiguous span and come back, and background occluders can hide part or
all of an object for a frame. Predictions are ground truth degraded per
model (see :func:`degrade_video`).

Randomness comes from numpy's PCG64 generator seeded through
``SeedSequence([seed, video_index, ...])``, so every video is generated
independently of the others and of the order they are produced in.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from vosfuse.errors import ConfigInvalid
from vosfuse.mask_io import PredictionSet, VideoSequence
from vosfuse.metrics import DEFAULT_CONFIG, MetricConfig, evaluate_video, video_jf

SHAPE_KINDS = ("rectangle", "ellipse")
_NOISE_STREAM = 0x5EED
# chance that a pixel within boundary_jitter of an object edge is flipped
JITTER_FLIP_PROB = 0.2


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    videos: int = 4
    frames_per_video: int = 20
    width: int = 96
    height: int = 96
    objects_per_video: tuple[int, int] = (1, 4)
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    occlusion_rate: float = 0.1
    disappear_rate: float = 0.2

    def __post_init__(self) -> None:
        lo, hi = self.objects_per_video
        problems = []
        if min(self.videos, self.frames_per_video, self.width, self.height, lo) < 1:
            problems.append("counts and sizes must be >= 1")
        if hi < lo:
            problems.append(f"objects_per_video range {self.objects_per_video} is empty")
        if hi > 255:
            problems.append("at most 255 objects fit an indexed PNG")
        if not self.shape_kinds or set(self.shape_kinds) - set(SHAPE_KINDS):
            problems.append(f"shape_kinds must be a non-empty subset of {SHAPE_KINDS}")
        for name in ("occlusion_rate", "disappear_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            problems.append("seed must be a 64-bit unsigned integer")
        if min(self.width, self.height) < 8:
            problems.append("frames must be at least 8x8")
        if problems:
            raise ConfigInvalid("; ".join(problems))


@dataclass(frozen=True)
class NoiseProfile:
    model: str
    boundary_jitter: int = 0
    drop_object_prob: float = 0.0
    label_swap_prob: float = 0.0
    translation_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.boundary_jitter < 0 or self.translation_sigma < 0:
            raise ConfigInvalid(f"profile {self.model}: jitter and sigma must be non-negative")
        for name in ("drop_object_prob", "label_swap_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigInvalid(f"profile {self.model}: {name} must lie in [0, 1]")

    @classmethod
    def from_dict(cls, payload: Mapping) -> NoiseProfile:
        return cls(
            model=str(payload["model"]),
            boundary_jitter=int(payload.get("boundary_jitter", 0)),
            drop_object_prob=float(payload.get("drop_object_prob", 0.0)),
            label_swap_prob=float(payload.get("label_swap_prob", 0.0)),
            translation_sigma=float(payload.get("translation_sigma", 0.0)),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def video_id(index: int) -> str:
    return f"video_{index:03d}"


def frame_name(index: int) -> str:
    return f"{index:05d}"


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


@dataclass
class _Track:
    kind: str
    half_h: float
    half_w: float
    centers: np.ndarray  # (T, 2) row, col
    hidden: range = field(default_factory=lambda: range(0))


def _footprint(track: _Track, t: int, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    cy, cx = track.centers[t]
    rows = (np.arange(h) - cy)[:, None]
    cols = (np.arange(w) - cx)[None, :]
    if track.kind == "rectangle":
        return (np.abs(rows) <= track.half_h) & (np.abs(cols) <= track.half_w)
    return (rows / track.half_h) ** 2 + (cols / track.half_w) ** 2 <= 1.0


def _make_tracks(cfg: SynthConfig, rng: np.random.Generator) -> list[_Track]:
    h, w, n_frames = cfg.height, cfg.width, cfg.frames_per_video
    lo, hi = cfg.objects_per_video
    n_obj = int(rng.integers(lo, hi + 1))
    short = min(h, w)
    tracks = []
    for _ in range(n_obj):
        kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
        # log-uniform extent gives a spread of tiny to large objects
        scale = float(np.exp(rng.uniform(np.log(0.03), np.log(0.2))))
        half_h = max(1.5, scale * short * rng.uniform(0.7, 1.3))
        half_w = max(1.5, scale * short * rng.uniform(0.7, 1.3))
        n_way = int(rng.integers(2, 5))
        keys = np.linspace(0, n_frames - 1, n_way)
        ways_r = rng.uniform(half_h, h - 1 - half_h, size=n_way)
        ways_c = rng.uniform(half_w, w - 1 - half_w, size=n_way)
        t = np.arange(n_frames)
        centers = np.stack([np.interp(t, keys, ways_r), np.interp(t, keys, ways_c)], axis=1)
        u_gone, u_start, u_end = rng.random(3)
        hidden = range(0)
        if n_frames >= 3 and u_gone < cfg.disappear_rate:
            start = 1 + int(u_start * (n_frames - 2))  # 1 .. T-2
            end = start + 1 + int(u_end * (n_frames - 1 - start))  # start+1 .. T-1
            hidden = range(start, end)
        tracks.append(_Track(kind, half_h, half_w, centers, hidden))
    return tracks


def _render_frame(
    tracks: Sequence[_Track], t: int, shape: tuple[int, int], occluder: tuple[float, ...] | None
) -> np.ndarray:
    frame = np.zeros(shape, dtype=np.uint8)
    visible = [(k + 1, _footprint(tr, t, shape)) for k, tr in enumerate(tracks) if t not in tr.hidden]
    for label, fp in visible:
        frame[fp] = label
    # overlap alone must never hide an object completely; occluders may
    for _ in range(len(visible)):
        buried = [(label, fp) for label, fp in visible if not np.any(frame == label)]
        if not buried:
            break
        for label, fp in buried:
            frame[fp] = label
    for label, fp in visible:
        if not np.any(frame == label):
            cy, cx = np.argwhere(fp).mean(axis=0).round().astype(int)
            frame[cy, cx] = label
    if occluder is not None:
        top, left, bottom, right = (int(round(v)) for v in occluder)
        frame[max(top, 0):max(bottom + 1, 0), max(left, 0):max(right + 1, 0)] = 0
    return frame


def _occluder(tracks: Sequence[_Track], t: int, rng: np.random.Generator, rate: float) -> tuple[float, ...] | None:
    u, pick, sy, sx, oy, ox = rng.random(6)
    candidates = [tr for tr in tracks if t not in tr.hidden]
    if t == 0 or not candidates or u >= rate:
        return None
    tr = candidates[int(pick * len(candidates))]
    cy, cx = tr.centers[t]
    # 0.6-1.6x the object's extent, centre offset up to half an extent
    hh, hw = tr.half_h * (0.6 + sy), tr.half_w * (0.6 + sx)
    cy += (oy - 0.5) * tr.half_h
    cx += (ox - 0.5) * tr.half_w
    return (cy - hh, cx - hw, cy + hh, cx + hw)


def generate_video(cfg: SynthConfig, index: int) -> VideoSequence:
    rng = _rng(cfg.seed, index)
    tracks = _make_tracks(cfg, rng)
    shape = (cfg.height, cfg.width)
    frames = []
    for t in range(cfg.frames_per_video):
        occ = _occluder(tracks, t, rng, cfg.occlusion_rate)
        frames.append(_render_frame(tracks, t, shape, occ))
    return VideoSequence(video_id(index), frames, [frame_name(t) for t in range(cfg.frames_per_video)])


def generate_sequence(cfg: SynthConfig) -> dict[str, VideoSequence]:
    """Ground-truth sequences for every video in ``cfg``; same config, same output."""
    return {video_id(i): generate_video(cfg, i) for i in range(cfg.videos)}


# -- degraded predictions -----------------------------------------------------


def _model_stream(model: str) -> int:
    return zlib.crc32(model.encode("utf-8"))


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = mask.shape
    out = np.zeros_like(mask)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src = mask[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    out[max(dy, 0):max(dy, 0) + src.shape[0], max(dx, 0):max(dx, 0) + src.shape[1]] = src
    return out


def degrade_video(gt: VideoSequence, profile: NoiseProfile, seed: int, index: int) -> VideoSequence:
    """One model's prediction for ``gt``.

    * boundary jitter: each pixel within ``boundary_jitter`` px of an object
      edge flips with probability ``JITTER_FLIP_PROB``;
    * translation: per frame and object, a Gaussian shift rounded to pixels;
    * drop: the model loses an object for the rest of the video; a higher
      probability also moves the loss earlier, so 1.0 loses it from frame 0;
    * swap: two objects exchange identities from some frame on.

    The number of random draws does not depend on the profile's parameters,
    so profiles sharing a model id see the same underlying noise.
    """
    rng = _rng(seed, index, _NOISE_STREAM, _model_stream(profile.model))
    n_frames = len(gt)
    labels = sorted({int(v) for f in gt.frames for v in np.unique(f) if v != 0})
    n = len(labels)

    u_drop, u_drop_start = rng.random(n), rng.random(n)
    p = profile.drop_object_prob
    drop_from = {lab: int(u_drop_start[i] * (1.0 - p) * n_frames) if u_drop[i] < p else n_frames
                 for i, lab in enumerate(labels)}

    u_swap, u_swap_start = rng.random(2)
    order = rng.permutation(n) if n else np.array([], dtype=int)
    q = profile.label_swap_prob
    swap: dict[int, int] = {}
    swap_from = n_frames
    if n >= 2 and u_swap < q:
        a, b = labels[order[0]], labels[order[1]]
        swap = {a: b, b: a}
        swap_from = int(u_swap_start * (1.0 - q) * n_frames)

    frames = []
    for t, truth in enumerate(gt.frames):
        u_flip = rng.random(truth.shape)
        offsets = rng.standard_normal((n, 2))
        out = np.zeros_like(truth)
        for i, lab in enumerate(labels):
            if t >= drop_from[lab]:
                continue
            mask = truth == lab
            if not mask.any():
                continue
            if profile.boundary_jitter:
                r = profile.boundary_jitter
                band = ndimage.binary_dilation(mask, iterations=r) & ~ndimage.binary_erosion(mask, iterations=r)
                mask = mask ^ (band & (u_flip < JITTER_FLIP_PROB))
            dy, dx = (int(round(v)) for v in offsets[i] * profile.translation_sigma)
            if dy or dx:
                mask = _shift(mask, dy, dx)
            out[mask] = swap.get(lab, lab) if t >= swap_from else lab
        frames.append(out)
    return VideoSequence(gt.video_id, frames, list(gt.frame_names))


def synthesize_predictions(
    gt: Mapping[str, VideoSequence], profiles: Sequence[NoiseProfile], seed: int
) -> PredictionSet:
    if not profiles:
        raise ConfigInvalid("at least one noise profile is required")
    models = [p.model for p in profiles]
    if len(set(models)) != len(models):
        raise ConfigInvalid(f"duplicate model ids in profiles: {models}")
    videos = {
        p.model: {v: degrade_video(gt[v], p, seed, i) for i, v in enumerate(sorted(gt))}
        for p in profiles
    }
    return PredictionSet(models, videos)


def oracle_best(
    preds: PredictionSet, gt: Mapping[str, VideoSequence], cfg: MetricConfig = DEFAULT_CONFIG
) -> dict[str, str]:
    """Per video, the model with the highest true J&F (smallest id on ties)."""
    best = {}
    fallback = cfg.empty_empty_score if cfg.empty_empty_score is not None else 1.0
    for video in sorted(gt):
        scores = {}
        for m in preds.models:
            jf = video_jf(evaluate_video(preds.videos[m][video], gt[video], cfg), cfg)
            scores[m] = fallback if jf is None else jf
        best[video] = min(scores, key=lambda m: (-scores[m], m))
    return best


# Five models trading boundary precision against tracking robustness: the
# sharpest one loses objects most often, so the per-video winner varies.
BENCHMARK_PROFILES = (
    NoiseProfile("model_a", boundary_jitter=1, drop_object_prob=0.10, label_swap_prob=0.06),
    NoiseProfile("model_b", boundary_jitter=2, drop_object_prob=0.06, label_swap_prob=0.10),
    NoiseProfile("model_c", boundary_jitter=3, drop_object_prob=0.04, label_swap_prob=0.04),
    NoiseProfile("model_d", boundary_jitter=0, drop_object_prob=0.25, label_swap_prob=0.10),
    NoiseProfile("model_e", boundary_jitter=4, drop_object_prob=0.02, label_swap_prob=0.02),
)


def benchmark_config(seed: int = 0) -> SynthConfig:
    return SynthConfig(
        seed=seed, videos=24, frames_per_video=30, width=96, height=96,
        objects_per_video=(1, 4), occlusion_rate=0.1, disappear_rate=0.3,
    )
