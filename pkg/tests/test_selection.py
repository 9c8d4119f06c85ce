from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_preds
from vosfuse.errors import ScoreOutOfRange, UnknownModel
from vosfuse.fusion import FusionMethod, PseudoLabelSet
from vosfuse.metrics import evaluate_video, video_jf
from vosfuse.selection import (
    FrameFeatures,
    Granularity,
    ModelChoice,
    PerformanceDB,
    _pick,
    assemble_final,
    bucket_features,
    extract_features,
    recommend,
    record_scores,
    score_against_pseudo,
    update_performance_db,
)


def differing_pairs_oracle(frame):
    h, w = frame.shape
    diff = total = 0
    for r in range(h):
        for c in range(w):
            for dr, dc in ((0, 1), (1, 0)):
                rr, cc = r + dr, c + dc
                if rr < h and cc < w:
                    total += 1
                    diff += int(frame[r, c] != frame[rr, cc])
    return diff / total


def test_background_features():
    assert extract_features(np.zeros((5, 5), np.uint8)) == FrameFeatures(0, 0.0, 0.0, 0.0)


def test_small_object_features():
    frame = np.zeros((10, 10), np.uint8)
    frame[4:6, 4:6] = 1
    feats = extract_features(frame)
    assert feats.object_count == 1
    assert feats.mean_object_area_fraction == pytest.approx(0.04)
    assert feats.min_object_area_fraction == pytest.approx(0.04)
    # a 2x2 block away from the border has 8 boundary pairs out of 180
    assert feats.scene_complexity == pytest.approx(8 / 180)
    assert feats.scene_complexity == pytest.approx(differing_pairs_oracle(frame))


def test_three_objects_counted(rng):
    frame = np.zeros((6, 6), np.uint8)
    frame[0, 0], frame[2, 2], frame[5, 5] = 1, 2, 3
    assert extract_features(frame).object_count == 3
    for _ in range(20):
        f = rng.integers(0, 5, (7, 9), dtype=np.uint8)
        assert extract_features(f).scene_complexity == pytest.approx(differing_pairs_oracle(f))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 40), st.floats(0, 1), st.floats(0, 1), st.floats(0, 2), st.none() | st.floats(0, 1))
def test_bucketing_is_total(n, mean_area, min_area, complexity, split):
    b = bucket_features(FrameFeatures(n, mean_area, min_area, complexity), split)
    assert b.count in ("0", "1", "2-3", "4+")
    assert b.size in ("tiny", "small", "medium", "large")
    assert b.complexity in ("low", "high")


def test_bucket_thresholds():
    def size(a):
        return bucket_features(FrameFeatures(1, a, a, 0.0), None).size

    assert [size(a) for a in (0.004, 0.005, 0.019, 0.02, 0.099, 0.1)] == [
        "tiny", "small", "small", "medium", "medium", "large"
    ]
    assert [bucket_features(FrameFeatures(n, 0.1, 0.1, 0), None).count for n in (1, 2, 3, 4, 9)] == [
        "1", "2-3", "2-3", "4+", "4+"
    ]


# -- performance db ------------------------------------------------------------------


FEATS = FrameFeatures(1, 0.2, 0.2, 0.05)


def test_db_mean_updates():
    db = update_performance_db(PerformanceDB(), FEATS, "A", 0.8)
    bucket = db.bucket(FEATS)
    assert db.mean(bucket, "A") == pytest.approx(0.8)
    assert db.entries[bucket]["A"][1] == 1
    db2 = update_performance_db(db, FEATS, "A", 0.6)
    assert db2.mean(db2.bucket(FEATS), "A") == pytest.approx(0.7)
    assert db2.entries[db2.bucket(FEATS)]["A"][1] == 2
    # the copying form leaves its input alone
    assert db.entries[bucket]["A"] == [0.8, 1]


def test_db_rejects_bad_score():
    with pytest.raises(ScoreOutOfRange):
        PerformanceDB().record(FEATS, "A", 1.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.floats(0, 1))
def test_db_mean_moves_toward_new_score(history, s):
    db = PerformanceDB()
    for h in history:
        db.record(FEATS, "A", h)
    bucket = db.bucket(FEATS)
    before = db.mean(bucket, "A")
    db.record(FEATS, "A", s)
    assert db.bucket(FEATS) == bucket
    assert abs(db.mean(bucket, "A") - s) <= abs(before - s) + 1e-12


def test_db_round_trip(tmp_path, rng):
    db = PerformanceDB()
    for i in range(30):
        feats = FrameFeatures(int(rng.integers(0, 6)), 0.1, float(rng.random() * 0.2), float(rng.random()))
        db.record(feats, f"m{i % 3}", float(rng.random()))
    db.save(tmp_path / "db.json")
    back = PerformanceDB.load(tmp_path / "db.json")
    assert back == db
    assert back.to_dict() == db.to_dict()
    back.save(tmp_path / "db2.json")
    assert (tmp_path / "db2.json").read_bytes() == (tmp_path / "db.json").read_bytes()


# -- scoring and recommendation -------------------------------------------------------------


def _video(rng, n=4, shape=(10, 10)):
    frames = []
    for _ in range(n):
        f = np.zeros(shape, np.uint8)
        r, c = rng.integers(0, 6, size=2)
        f[r:r + 4, c:c + 4] = 1
        f[0:2, 7:10] = 2
        frames.append(f)
    return frames


def _perturb(frames, rng, rate=0.1):
    return [np.where(rng.random(f.shape) < rate, 0, f).astype(np.uint8) for f in frames]


def _pseudo(frames):
    return PseudoLabelSet({"v": make_preds({"_": {"v": frames}}).videos["_"]["v"]}, FusionMethod.PGMR)


def test_score_against_pseudo_extremes(rng):
    frames = _video(rng)
    preds = make_preds({"A": {"v": frames}, "B": {"v": [np.zeros_like(f) for f in frames]}})
    ref = _pseudo(frames).videos["v"]
    assert score_against_pseudo(preds.videos["A"]["v"], ref) == 1.0
    assert score_against_pseudo(preds.videos["B"]["v"], ref) == 0.0


def test_score_matches_metrics_module(rng):
    for _ in range(10):
        frames = _video(rng)
        noisy = _perturb(frames, rng, 0.3)
        preds = make_preds({"A": {"v": noisy}})
        ref = _pseudo(frames).videos["v"]
        expected = video_jf(evaluate_video(preds.videos["A"]["v"], ref))
        assert score_against_pseudo(preds.videos["A"]["v"], ref) == pytest.approx(expected, abs=1e-12)


def test_self_selection(rng):
    frames = _video(rng)
    preds = make_preds({
        "A": {"v": _perturb(frames, rng)},
        "B": {"v": frames},
        "C": {"v": _perturb(frames, rng)},
    })
    choice = recommend(preds, _pseudo(frames))
    assert choice.assignments == {"v": "B"}
    assert choice.scores["v"]["B"] == 1.0


def test_tie_goes_to_smaller_id(rng):
    frames = _video(rng)
    same = _perturb(frames, rng)
    preds = make_preds({"Z": {"v": same}, "K": {"v": same}})
    assert recommend(preds, _pseudo(frames)).assignments["v"] == "K"


def test_db_prior_breaks_ties(rng):
    frames = _video(rng)
    same = _perturb(frames, rng)
    preds = make_preds({"A": {"v": same}, "B": {"v": same}})
    db = PerformanceDB()
    for f in frames[1:]:
        db.record(extract_features(f), "A", 0.2)
        db.record(extract_features(f), "B", 0.9)
    assert recommend(preds, _pseudo(frames), db).assignments["v"] == "B"


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.sampled_from("ABCDE"), st.floats(0, 1), min_size=1), st.integers(-8, 8))
def test_argmax_invariance(scores, e):
    # powers of two scale floats exactly, so no new ties can appear
    k = 2.0**e
    assert _pick(scores, {}) == _pick({m: s * k for m, s in scores.items()}, {})


def test_recommend_is_deterministic(rng):
    frames = _video(rng, n=5)
    preds = make_preds({m: {"v": _perturb(frames, rng, 0.2)} for m in "ABC"})
    pseudo = _pseudo(frames)
    a = recommend(preds, pseudo, granularity="frame")
    b = recommend(preds, pseudo, granularity="frame")
    assert a.to_dict() == b.to_dict()


def test_frame_granularity_picks_best_per_frame(rng):
    frames = _video(rng, n=4)
    a = [frames[0], frames[1], _perturb([frames[2]], rng, 0.5)[0], frames[3]]
    b = [frames[0], _perturb([frames[1]], rng, 0.5)[0], frames[2], frames[3]]
    preds = make_preds({"A": {"v": a}, "B": {"v": b}})
    choice = recommend(preds, _pseudo(frames), granularity=Granularity.FRAME)
    assert choice.assignments["v"] == ["A", "A", "B", "A"]
    final = assemble_final(preds, choice)
    assert all(np.array_equal(x, y) for x, y in zip(final["v"].frames, frames))


def test_assemble_whole_video(rng):
    frames = _video(rng)
    other = _perturb(frames, rng)
    preds = make_preds({"A": {"v": frames, "w": other}, "B": {"v": other, "w": frames}})
    final = assemble_final(preds, ModelChoice(Granularity.VIDEO, {"v": "A", "w": "A"}, {}))
    assert final["v"].equals(preds.videos["A"]["v"])
    assert final["w"].equals(preds.videos["A"]["w"])


def test_assemble_interleaves_frames(rng):
    a = [rng.integers(0, 3, (5, 5), dtype=np.uint8) for _ in range(4)]
    b = [rng.integers(0, 3, (5, 5), dtype=np.uint8) for _ in range(4)]
    preds = make_preds({"A": {"v": a}, "B": {"v": b}})
    final = assemble_final(preds, ModelChoice(Granularity.FRAME, {"v": ["A", "B", "A", "B"]}, {}))
    expected = [a[0], b[1], a[2], b[3]]
    assert [f.tobytes() for f in final["v"].frames] == [f.tobytes() for f in expected]


def test_assemble_unknown_model(rng):
    preds = make_preds({"A": {"v": _video(rng)}})
    with pytest.raises(UnknownModel):
        assemble_final(preds, ModelChoice(Granularity.VIDEO, {"v": "Q"}, {}))


def test_record_scores_returns_updated_copy(rng):
    frames = _video(rng)
    preds = make_preds({"A": {"v": frames}, "B": {"v": _perturb(frames, rng)}})
    db = PerformanceDB()
    new = record_scores(db, preds, _pseudo(frames))
    assert len(db) == 0 and db.version == 0
    assert new.version == 2 * (len(frames) - 1)
    for per_model in new.entries.values():
        if "A" in per_model:
            assert per_model["A"][0] / per_model["A"][1] == pytest.approx(1.0)
