from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import pytest

from vosfuse.mask_io import PredictionSet, VideoSequence


def make_seq(video: str, frames: Sequence, start: int = 0) -> VideoSequence:
    arrays = [np.asarray(f, dtype=np.uint8) for f in frames]
    names = [f"{start + i:05d}" for i in range(len(arrays))]
    return VideoSequence(video, arrays, names)


def make_preds(spec: Mapping[str, Mapping[str, Sequence]]) -> PredictionSet:
    """``{model: {video: [frames]}}`` -> PredictionSet."""
    models = sorted(spec)
    videos = {m: {v: make_seq(v, frames) for v, frames in spec[m].items()} for m in models}
    return PredictionSet(models, videos)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_label_frame(rng: np.random.Generator, shape=(16, 16), max_label: int = 4) -> np.ndarray:
    return rng.integers(0, max_label + 1, size=shape, dtype=np.uint8)


# -- acceptance summary --------------------------------------------------------

_criteria: dict[str, str] = {}
_outcomes: dict[str, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None and marker.args:
            _criteria[item.nodeid] = marker.args[0]


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    if report.when == "call" or report.failed:
        if _outcomes.get(report.nodeid) != "FAIL":
            _outcomes[report.nodeid] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, name in _criteria.items():
        if nodeid in _outcomes:
            terminalreporter.write_line(f"{_outcomes[nodeid]}  {name}")
