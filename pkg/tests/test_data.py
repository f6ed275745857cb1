import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rri_seqnet.data import (DataError, RriRecord, SplitPlan, interpolate_tachogram, load_rri_csv, make_splits,
                             pre_af_crop, read_segment_cache, resample_tachogram, split_counts, window_segments,
                             write_rri_csv, write_segment_cache)


def _write(tmp_path, text, name="r.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _regular(label="NSR", duration=3600.0, rr=1.0, onset=None):
    return RriRecord.from_beats("s1", label, np.arange(0.0, duration + rr / 2, rr), af_onset=onset)


def test_load_simple_csv(tmp_path):
    rec = load_rri_csv(_write(tmp_path, "subject_id,label,beat_time_s\na,NSR,0.0\na,NSR,0.8\na,NSR,1.6\n"))
    np.testing.assert_allclose(rec.rr, [0.8, 0.8])
    np.testing.assert_allclose(rec.rr_times, [0.8, 1.6])
    assert rec.subject_id == "a" and rec.af_onset is None


def test_implausible_interval_removed(tmp_path, caplog):
    rows = "".join(f"a,NSR,{t}\n" for t in (0.0, 1.0, 7.0, 8.0, 9.0))
    logger = logging.getLogger("rri_seqnet.data")
    logger.addHandler(caplog.handler)
    try:
        with caplog.at_level("INFO", logger="rri_seqnet.data"):
            rec = load_rri_csv(_write(tmp_path, "subject_id,label,beat_time_s\n" + rows))
    finally:
        logger.removeHandler(caplog.handler)
    np.testing.assert_allclose(rec.rr, [1.0, 1.0, 1.0])
    np.testing.assert_allclose(rec.rr_times, [1.0, 8.0, 9.0])
    assert "removed 1" in caplog.text


@pytest.mark.parametrize("body,line", [
    ("a,NSR,0.0\na,NSR,1.0\na,NSR,0.5\n", 4),
    ("a,NSR,0.0\na,NSR,x\n", 3),
    ("a,NSR,0.0\na,XX,1.0\n", 3),
    ("a,NSR,0.0\nb,NSR,1.0\n", 3),
])
def test_csv_errors_name_line(tmp_path, body, line):
    with pytest.raises(DataError, match=f":{line}:"):
        load_rri_csv(_write(tmp_path, "subject_id,label,beat_time_s\n" + body))


def test_empty_csv_rejected(tmp_path):
    with pytest.raises(DataError, match="empty"):
        load_rri_csv(_write(tmp_path, ""))
    with pytest.raises(DataError, match="no beats"):
        load_rri_csv(_write(tmp_path, "subject_id,label,beat_time_s\n"))


def test_csv_roundtrip(tmp_path):
    rec = RriRecord.from_beats("af7", "AF", np.round(np.cumsum(np.full(50, 0.8123456)), 6), af_onset=30.5)
    write_rri_csv(rec, tmp_path / "x.csv")
    back = load_rri_csv(tmp_path / "x.csv")
    np.testing.assert_array_equal(back.beats, rec.beats)
    assert back.af_onset == 30.5 and back.label == "AF"


def test_pre_af_crop():
    rec = _regular("AF", duration=12000.0, onset=10000.0)
    cropped = pre_af_crop(rec)
    assert (cropped.t_start, cropped.t_end) == (2800.0, 10000.0)
    assert cropped.beats.min() >= 2800.0 and cropped.beats.max() < 10000.0
    assert pre_af_crop(_regular("AF", duration=6000.0, onset=5000.0)) is None
    nsr = _regular()
    assert pre_af_crop(nsr) is nsr


def test_resample_constant_and_hand_value():
    rec = _regular(duration=2000.0)
    np.testing.assert_array_equal(resample_tachogram(rec, 0.0), np.ones(1800))
    # rr 0.5 at t=0, rr 1.5 at t=2: the sample at t=1 is 1.0
    assert interpolate_tachogram(np.array([0.0, 2.0]), np.array([0.5, 1.5]), np.array([1.0]))[0] == 1.0


def test_resample_rejects_uncovered_window():
    with pytest.raises(DataError, match="not covered"):
        resample_tachogram(_regular(duration=1000.0), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(0.5, 1.5), st.integers(3, 200))
def test_resampler_reproduces_affine(slope, icpt, n):
    times = np.sort(np.random.default_rng(n).uniform(0, 100, n))
    out = interpolate_tachogram(times, icpt + slope * times, np.linspace(times[0], times[-1], 37))
    np.testing.assert_allclose(out, icpt + slope * np.linspace(times[0], times[-1], 37), atol=1e-12)


@pytest.mark.parametrize("hours,expected", [(2, 4), (24, 48), (29 / 60, 0)])
def test_window_counts(hours, expected):
    rec = _regular(duration=hours * 3600 + 0.5)
    segs = window_segments(rec)
    assert len(segs) == expected
    assert all(s.values.shape == (1800,) for s in segs)
    assert [s.window_index for s in segs] == list(range(expected))


def test_windows_tile_without_gap():
    rr = 0.7 + 0.3 * np.sin(np.arange(9000) / 50)
    rec = RriRecord.from_beats("s", "NSR", np.concatenate([[0.0], np.cumsum(rr)]))
    segs = window_segments(rec)
    whole = resample_tachogram(rec, 0.0, n=1800 * len(segs))
    np.testing.assert_array_equal(np.concatenate([s.values for s in segs]), whole)


@pytest.mark.parametrize("n,expected", [(151, (90, 30, 31)), (54, (32, 11, 11)), (5, (3, 1, 1))])
def test_split_counts(n, expected):
    assert split_counts(n) == expected


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 80), st.integers(5, 80), st.lists(st.integers(0, 10**6), min_size=1, max_size=5, unique=True))
def test_splits_disjoint_and_complete(n_af, n_nsr, seeds):
    subjects = {"AF": [f"a{i}" for i in range(n_af)], "NSR": [f"n{i}" for i in range(n_nsr)]}
    for plan in make_splits(subjects, seeds):
        asg = plan.assignment()
        assert sorted(asg) == sorted(subjects["AF"] + subjects["NSR"])
        for ds, subs in subjects.items():
            assert [len(getattr(plan, sp)[ds]) for sp in ("train", "val", "test")] == list(split_counts(len(subs)))


def test_splits_deterministic_and_seed_dependent():
    subjects = {"AF": [f"a{i}" for i in range(20)], "NSR": [f"n{i}" for i in range(10)]}
    a, b = make_splits(subjects, [1, 1])
    c = make_splits(subjects, [2])[0]
    assert a.to_dict() == b.to_dict() and a.to_dict() != c.to_dict()
    assert SplitPlan.from_dict(json.loads(json.dumps(a.to_dict()))).to_dict() == a.to_dict()


def test_overlapping_plan_rejected():
    plan = SplitPlan(0, {"AF": ["x"]}, {"AF": ["x"]}, {"AF": []})
    with pytest.raises(DataError, match="x"):
        plan.assignment()


def test_segment_cache_roundtrip(tmp_path):
    segs = window_segments(_regular(duration=3601.0, rr=0.9))
    write_segment_cache(tmp_path / "c", segs, {"s1": "train"}, seed=3)
    values, index = read_segment_cache(tmp_path / "c")
    np.testing.assert_allclose(values, np.stack([s.values for s in segs]).astype(np.float32))
    assert (tmp_path / "c.f32").stat().st_size == 4 * 1800 * len(segs)
    assert index[1] == {"subject_id": "s1", "label": "NSR", "window_index": 1, "split": "train", "seed": 3}
