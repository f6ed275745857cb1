import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from rri_seqnet.data import RR_MAX, RR_MIN, pre_af_crop, window_segments
from rri_seqnet.synth import SynthConfig, ectopic_counts, synth_generate


def test_reproducible_and_independent_of_count():
    a = synth_generate(3, "NSR", 11)
    b = synth_generate(5, "NSR", 11)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.beats, rb.beats)
    assert not np.array_equal(a[0].beats, synth_generate(1, "NSR", 12)[0].beats)


def test_bad_kind():
    with pytest.raises(ValueError):
        synth_generate(1, "AF", 0)


def test_preaf_records_are_two_hours_before_onset():
    for rec in synth_generate(5, "preAF", 0):
        assert rec.label == "AF" and rec.af_onset == 7200.0
        cropped = pre_af_crop(rec)
        assert cropped is not None and len(window_segments(cropped)) == 4


def test_values_within_plausibility_bounds():
    for rec in synth_generate(4, "preAF", 1) + synth_generate(4, "NSR", 1):
        assert np.all(np.diff(rec.beats) >= RR_MIN - 1e-6) and np.all(np.diff(rec.beats) <= RR_MAX + 1e-6)
        for seg in window_segments(pre_af_crop(rec)):
            assert seg.values.min() >= RR_MIN - 1e-6 and seg.values.max() <= RR_MAX + 1e-6


def test_nsr_mean_rr():
    cfg = SynthConfig(nsr_duration_s=1800.0)
    means = [rec.rr.mean() for rec in synth_generate(100, "NSR", 3, cfg)]
    assert 0.80 <= np.mean(means) <= 0.90


def test_ectopic_burden_rises_towards_onset():
    recs = synth_generate(100, "preAF", 4)
    first = np.array([ectopic_counts(r, 0, 1800) for r in recs])
    last = np.array([ectopic_counts(r, 5400, 7200) for r in recs])
    assert last.mean() / first.mean() > 3


def test_final_window_variance_inflated():
    recs = synth_generate(30, "preAF", 5, SynthConfig(preaf_rate_start=0.0, preaf_rate_end=0.0))
    early = np.mean([np.var(r.rr[(r.rr_times > 600) & (r.rr_times < 2400)]) for r in recs])
    late = np.mean([np.var(r.rr[r.rr_times > 5500]) for r in recs])
    assert 1.5 < late / early < 2.5


def test_classes_separable_by_simple_features():
    feats, labels = [], []
    for rec in synth_generate(40, "preAF", 6) + synth_generate(15, "NSR", 6):
        rec = pre_af_crop(rec)
        for seg in window_segments(rec):
            t0 = rec.t_start + 1800 * seg.window_index
            feats.append([np.var(seg.values), ectopic_counts(rec, t0, t0 + 1800)])
            labels.append(seg.target)
    X, y = np.array(feats), np.array(labels)
    X = (X - X.mean(0)) / X.std(0)
    clf = LogisticRegression().fit(X, y)
    assert roc_auc_score(y, clf.predict_proba(X)[:, 1]) >= 0.85
