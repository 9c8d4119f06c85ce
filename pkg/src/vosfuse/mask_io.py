"""Mask datasets on disk: indexed PNG label maps, prediction sets, RLE.

A mask frame is a 2-D integer ``numpy`` array (height x width) where 0 is
background and every positive value is one object's identity. Directory
layout follows the MOSE/DAVIS convention::

    gt/Annotations/<video>/<NNNNN>.png
    predictions/<model>/<video>/<NNNNN>.png
    confidences/<model>/<video>.json        # optional, one float per frame
"""

from __future__ import annotations

import contextlib
import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from vosfuse.errors import (
    ConfidenceOutOfRange,
    CorruptImage,
    DimensionMismatch,
    InconsistentCoverage,
    InvalidFrameNames,
    IoFailure,
    LabelOverflow,
    LengthMismatch,
    MissingFile,
    NotIndexedPng,
)

logger = logging.getLogger(__name__)

MAX_LABEL = 255
MASK_SUFFIX = ".png"


def davis_palette() -> list[int]:
    """The 256-entry VOC/DAVIS colour map, flattened to RGB triples."""
    palette = []
    for idx in range(256):
        r = g = b = 0
        c = idx
        for shift in range(7, -1, -1):
            r |= (c & 1) << shift
            g |= ((c >> 1) & 1) << shift
            b |= ((c >> 2) & 1) << shift
            c >>= 3
        palette.extend((r, g, b))
    return palette


_PALETTE = davis_palette()


def check_frame(frame: np.ndarray, max_label: int = MAX_LABEL) -> np.ndarray:
    """Validate a label map and return it as an array.

    Raises ``ValueError`` for non-2-D or empty arrays and non-integer or
    negative labels; :class:`LabelOverflow` when a label exceeds ``max_label``.
    """
    arr = np.asarray(frame)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"mask frame must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer) and arr.dtype != np.bool_:
        raise ValueError(f"mask labels must be integers, got {arr.dtype}")
    if arr.size and arr.min() < 0:
        raise ValueError("mask labels must be non-negative")
    if arr.size and int(arr.max()) > max_label:
        raise LabelOverflow(f"label {int(arr.max())} exceeds max object id {max_label}")
    return arr


def binary_mask(frame: np.ndarray, object_id: int) -> np.ndarray:
    return np.asarray(frame) == object_id


def object_ids(frame: np.ndarray) -> list[int]:
    """Sorted non-zero labels present in ``frame``."""
    return [int(v) for v in np.unique(frame) if v != 0]


@dataclass
class VideoSequence:
    video_id: str
    frames: list[np.ndarray]
    frame_names: list[str]

    def __post_init__(self) -> None:
        if len(self.frames) != len(self.frame_names):
            raise InvalidFrameNames(
                f"{self.video_id}: {len(self.frames)} frames but {len(self.frame_names)} names"
            )
        for a, b in zip(self.frame_names, self.frame_names[1:]):
            if not a < b:
                raise InvalidFrameNames(f"{self.video_id}: frame names not increasing at {a!r}, {b!r}")
        if self.frames:
            shape = np.shape(self.frames[0])
            for name, frame in zip(self.frame_names, self.frames):
                if np.shape(frame) != shape:
                    raise DimensionMismatch(
                        f"{self.video_id}/{name}: shape {np.shape(frame)} differs from {shape}"
                    )

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(np.shape(self.frames[0])) if self.frames else (0, 0)

    def __len__(self) -> int:
        return len(self.frames)

    def equals(self, other: VideoSequence) -> bool:
        return (
            self.frame_names == other.frame_names
            and len(self.frames) == len(other.frames)
            and all(np.array_equal(a, b) for a, b in zip(self.frames, other.frames))
        )


@dataclass
class PredictionSet:
    """Per-model predicted sequences, keyed ``videos[model][video]``.

    ``confidences[model][video]`` holds per-frame scores in [0, 1]; a model
    or video without an entry is treated as fully confident.
    """

    models: list[str]
    videos: dict[str, dict[str, VideoSequence]]
    confidences: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _check_coverage(self.models, self.videos)
        for model, per_video in self.confidences.items():
            for video, values in per_video.items():
                _check_confidences(values, f"{model}/{video}")
                n = len(self.videos[model][video])
                if len(values) != n:
                    raise InconsistentCoverage(
                        f"confidences for {model}/{video} have {len(values)} entries, expected {n}"
                    )

    @property
    def video_ids(self) -> list[str]:
        return sorted(self.videos[self.models[0]]) if self.models else []

    def frame_confidences(self, model: str, video: str) -> list[float]:
        values = self.confidences.get(model, {}).get(video)
        if values is None:
            return [1.0] * len(self.videos[model][video])
        return list(values)

    def restrict(self, model: str) -> dict[str, VideoSequence]:
        return self.videos[model]


def _check_confidences(values: Sequence[float], where: str) -> None:
    for v in values:
        if not (0.0 <= float(v) <= 1.0):
            raise ConfidenceOutOfRange(f"{where}: confidence {v} outside [0, 1]")


def _check_coverage(models: Sequence[str], videos: Mapping[str, Mapping[str, VideoSequence]]) -> None:
    if not models:
        return
    missing = [m for m in models if m not in videos]
    if missing:
        raise InconsistentCoverage(f"no predictions for model(s) {', '.join(missing)}")
    all_videos = sorted(set().union(*(videos[m].keys() for m in models)))
    for video in all_videos:
        for model in models:
            if video not in videos[model]:
                raise InconsistentCoverage(f"model {model} is missing video {video}")
        names = sorted(set().union(*(videos[m][video].frame_names for m in models)))
        for model in models:
            have = set(videos[model][video].frame_names)
            for name in names:
                if name not in have:
                    raise InconsistentCoverage(
                        f"video {video}: model {model} has {len(have)} frames, expected {len(names)}"
                        f" (missing frame {name})"
                    )
        shapes = {m: videos[m][video].shape for m in models}
        ref = shapes[models[0]]
        for model, shape in shapes.items():
            if shape != ref:
                raise DimensionMismatch(
                    f"video {video}: model {model} frames are {shape[0]}x{shape[1]}, "
                    f"model {models[0]} frames are {ref[0]}x{ref[1]}"
                )


# -- PNG ---------------------------------------------------------------------


def load_mask_frame(path: str | os.PathLike) -> np.ndarray:
    """Read an indexed-palette PNG and return its palette indices as uint8."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"mask file not found: {path}")
    try:
        with Image.open(path) as img:
            if img.mode != "P":
                raise NotIndexedPng(f"{path}: expected an indexed-palette PNG, got mode {img.mode}")
            img.load()
            arr = np.array(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise CorruptImage(f"{path}: {exc}") from exc
    return arr


def save_mask_frame(frame: np.ndarray, path: str | os.PathLike) -> None:
    """Write ``frame`` as an 8-bit indexed PNG (label = palette index).

    The file appears atomically: it is written to a temporary sibling first
    and renamed into place.
    """
    arr = check_frame(frame, MAX_LABEL).astype(np.uint8, copy=False)
    path = Path(path)
    h, w = arr.shape
    img = Image.frombytes("P", (w, h), np.ascontiguousarray(arr).tobytes())
    img.putpalette(_PALETTE)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=MASK_SUFFIX, dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                img.save(fh, format="PNG")
            os.replace(tmp, path)
        except BaseException:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _frame_names(video_dir: Path) -> list[str]:
    names = sorted(p.stem for p in video_dir.iterdir() if p.suffix.lower() == MASK_SUFFIX)
    widths = {len(n) for n in names}
    if len(widths) > 1:
        raise InvalidFrameNames(f"{video_dir}: frame names have mixed widths {sorted(widths)}")
    return names


def load_video_dir(video_dir: str | os.PathLike, video_id: str | None = None) -> VideoSequence:
    video_dir = Path(video_dir)
    if not video_dir.is_dir():
        raise MissingFile(f"video directory not found: {video_dir}")
    names = _frame_names(video_dir)
    frames = [load_mask_frame(video_dir / f"{n}{MASK_SUFFIX}") for n in names]
    return VideoSequence(video_id or video_dir.name, frames, names)


def _map_videos(root: Path, video_ids: Sequence[str], jobs: int) -> dict[str, VideoSequence]:
    if jobs > 1 and len(video_ids) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            loaded = list(pool.map(lambda v: load_video_dir(root / v, v), video_ids))
    else:
        loaded = [load_video_dir(root / v, v) for v in video_ids]
    return {seq.video_id: seq for seq in loaded}


def load_sequences(root: str | os.PathLike, jobs: int = 1) -> dict[str, VideoSequence]:
    """Load every ``root/<video>/<frame>.png`` sequence, sorted by video id."""
    root = Path(root)
    if not root.is_dir():
        raise MissingFile(f"directory not found: {root}")
    video_ids = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    return _map_videos(root, video_ids, jobs)


def load_ground_truth(gt_root: str | os.PathLike, jobs: int = 1) -> dict[str, VideoSequence]:
    """Load ``gt_root/Annotations``; a root that already is the annotation dir also works."""
    gt_root = Path(gt_root)
    ann = gt_root / "Annotations"
    return load_sequences(ann if ann.is_dir() else gt_root, jobs=jobs)


def save_sequences(seqs: Mapping[str, VideoSequence], root: str | os.PathLike) -> None:
    root = Path(root)
    for video_id in sorted(seqs):
        seq = seqs[video_id]
        for name, frame in zip(seq.frame_names, seq.frames):
            save_mask_frame(frame, root / video_id / f"{name}{MASK_SUFFIX}")


def list_models(pred_root: str | os.PathLike) -> list[str]:
    pred_root = Path(pred_root)
    if not pred_root.is_dir():
        raise MissingFile(f"prediction root not found: {pred_root}")
    return sorted(p.name for p in pred_root.iterdir() if p.is_dir() and not p.name.startswith("."))


def load_prediction_set(
    root: str | os.PathLike, models: Sequence[str] | None = None, jobs: int = 1
) -> PredictionSet:
    """Load ``root/<model>/<video>/<frame>.png`` for each model.

    Confidences are read from ``root/../confidences/<model>/<video>.json``
    when present. The returned set is fully validated or an error is raised.
    """
    root = Path(root)
    models = list(models) if models else list_models(root)
    videos: dict[str, dict[str, VideoSequence]] = {}
    for model in models:
        model_dir = root / model
        if not model_dir.is_dir():
            raise InconsistentCoverage(f"model {model} has no prediction directory under {root}")
        videos[model] = load_sequences(model_dir, jobs=jobs)

    conf_root = root.parent / "confidences"
    confidences: dict[str, dict[str, list[float]]] = {}
    for model in models:
        for video in sorted(videos[model]):
            path = conf_root / model / f"{video}.json"
            if not path.is_file():
                continue
            try:
                values = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfidenceOutOfRange(f"{path}: not valid JSON ({exc})") from exc
            if not isinstance(values, list):
                raise ConfidenceOutOfRange(f"{path}: expected a JSON array of floats")
            confidences.setdefault(model, {})[video] = [float(v) for v in values]
    return PredictionSet(models, videos, confidences)


def save_prediction_set(preds: PredictionSet, root: str | os.PathLike) -> None:
    root = Path(root)
    for model in preds.models:
        save_sequences(preds.videos[model], root / model)
    conf_root = root.parent / "confidences"
    for model, per_video in sorted(preds.confidences.items()):
        for video, values in sorted(per_video.items()):
            write_json(conf_root / model / f"{video}.json", [float(v) for v in values])


# -- run-length encoding -----------------------------------------------------


@dataclass(frozen=True)
class RleMask:
    width: int
    height: int
    runs: tuple[tuple[int, int], ...]


def rle_encode(frame: np.ndarray) -> RleMask:
    """Row-major runs of equal labels; adjacent runs always differ."""
    arr = check_frame(frame, max_label=np.iinfo(np.int64).max)
    flat = arr.ravel()
    starts = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], starts, [flat.size]))
    runs = tuple((int(flat[s]), int(e - s)) for s, e in zip(bounds[:-1], bounds[1:]))
    return RleMask(width=arr.shape[1], height=arr.shape[0], runs=runs)


def rle_decode(rle: RleMask) -> np.ndarray:
    total = rle.width * rle.height
    lengths = [length for _, length in rle.runs]
    if any(length <= 0 for length in lengths):
        raise LengthMismatch("run lengths must be positive")
    if sum(lengths) != total:
        raise LengthMismatch(f"runs cover {sum(lengths)} pixels, frame has {rle.width}x{rle.height}={total}")
    values = np.array([value for value, _ in rle.runs], dtype=np.int64)
    flat = np.repeat(values, lengths)
    out_dtype = np.uint8 if values.size and values.max() <= MAX_LABEL else np.int64
    return flat.astype(out_dtype).reshape(rle.height, rle.width)


# -- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    kind: str
    model: str
    video: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.model}/{self.video}: {self.detail}"


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def of_kind(self, *kinds: str) -> list[Finding]:
        return [f for f in self.findings if f.kind in kinds]

    def to_dict(self) -> dict:
        return {"findings": [vars(f) for f in self.findings]}


LAYOUT_KINDS = ("MissingVideo", "FrameMismatch", "DimensionMismatch")


def validate_against_ground_truth(
    preds: PredictionSet, gt: Mapping[str, VideoSequence]
) -> ValidationReport:
    """Compare every model's layout with the ground truth.

    Problems are collected rather than raised. Kinds: ``MissingVideo``,
    ``ExtraVideo``, ``FrameMismatch``, ``DimensionMismatch`` and
    ``UnknownObject`` (a predicted id absent from the first GT frame).
    """
    report = ValidationReport()
    add = report.findings.append
    for model in preds.models:
        per_video = preds.videos[model]
        for video in sorted(set(per_video) - set(gt)):
            add(Finding("ExtraVideo", model, video, "video not in ground truth"))
        for video in sorted(gt):
            truth = gt[video]
            if video not in per_video:
                add(Finding("MissingVideo", model, video, "no predictions for video"))
                continue
            seq = per_video[video]
            if seq.frame_names != truth.frame_names:
                missing = sorted(set(truth.frame_names) - set(seq.frame_names))
                extra = sorted(set(seq.frame_names) - set(truth.frame_names))
                add(Finding(
                    "FrameMismatch", model, video,
                    f"{len(seq)} predicted frames vs {len(truth)} ground-truth frames"
                    f" (missing {missing[:5]}, extra {extra[:5]})",
                ))
            if seq.shape != truth.shape:
                add(Finding(
                    "DimensionMismatch", model, video,
                    f"prediction {seq.shape[0]}x{seq.shape[1]} vs ground truth {truth.shape[0]}x{truth.shape[1]}",
                ))
            roster = set(object_ids(truth.frames[0])) if truth.frames else set()
            seen: set[int] = set()
            for frame in seq.frames:
                seen.update(object_ids(frame))
            for obj in sorted(seen - roster):
                add(Finding("UnknownObject", model, video, f"object {obj} not in first ground-truth frame"))
    return report


# -- filesystem helpers -------------------------------------------------------


def write_json(path: str | os.PathLike, payload: object) -> None:
    """Deterministic, atomic JSON write (sorted keys, trailing newline)."""
    write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


@contextlib.contextmanager
def atomic_directory(target: str | os.PathLike) -> Iterator[Path]:
    """Yield a scratch directory that replaces ``target`` only on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".tmp-{target.name}-", dir=target.parent))
    try:
        yield scratch
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target) if target.is_dir() else target.unlink()
    os.replace(scratch, target)
    # mkdtemp creates 0700 directories
    os.chmod(target, 0o755)
