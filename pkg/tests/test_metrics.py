import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mintlab import metrics
from mintlab.errors import ParameterError

from oracles import accuracy_recount, auc_all_pairs, fpr_at_tpr_scan, roc_brute_force


def _labels(n_pos, n_neg):
    return np.r_[np.ones(n_pos), np.zeros(n_neg)]


def test_accuracy_examples():
    assert metrics.accuracy_at_threshold([0.9, 0.8, 0.2, 0.1], _labels(2, 2)) == 1.0
    assert metrics.accuracy_at_threshold(np.full(10, 0.5), _labels(5, 5)) == 0.5
    with pytest.raises(metrics.InputError):
        metrics.accuracy_at_threshold([], [])


def test_accuracy_recount_on_handcrafted_scores():
    scores = [0.91, 0.12, 0.5, 0.49, 0.77, 0.03, 0.66, 0.5, 0.31, 0.88,
              0.45, 0.52, 0.99, 0.07, 0.6, 0.4, 0.51, 0.2, 0.73, 0.38]
    labels = [1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 0, 0, 0, 1, 0, 1, 0]
    for t in (0.5, 0.3, 0.7):
        assert metrics.accuracy_at_threshold(scores, labels, t) == accuracy_recount(scores, labels, t)


def test_roc_examples():
    pts = metrics.roc_points([0.9, 0.8, 0.2, 0.1], _labels(2, 2))
    assert (0.0, 1.0) in pts
    assert metrics.roc_points(np.full(6, 0.3), _labels(3, 3)) == [(0.0, 0.0), (1.0, 1.0)]
    with pytest.raises(metrics.InputError):
        metrics.roc_points([0.1, 0.2], [1, 1])


@pytest.mark.parametrize("seed", range(10))
def test_roc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random(30), 1)  # coarse grid forces ties
    labels = rng.permutation(_labels(15, 15))
    assert metrics.roc_points(scores, labels) == roc_brute_force(scores, labels)


def test_auc_examples():
    assert metrics.auc([0.9, 0.1], [1, 0]) == 1.0
    assert metrics.auc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75
    with pytest.raises(metrics.InputError):
        metrics.auc([0.3, 0.4], [0, 0])


def test_auc_matches_all_pairs_and_trapezoid():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n_pos, n_neg = rng.integers(1, 33, 2)
        scores = np.round(rng.random(n_pos + n_neg), int(rng.integers(1, 4)))
        labels = _labels(n_pos, n_neg)
        a = metrics.auc(scores, labels)
        assert a == auc_all_pairs(scores[:n_pos], scores[n_pos:])
        assert abs(a - metrics.trapezoid_auc(metrics.roc_points(scores, labels))) <= 1e-12


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_rank_invariance_and_label_swap(seed):
    rng = np.random.default_rng(seed)
    scores = rng.random(40)
    labels = rng.permutation(_labels(20, 20))
    warped = np.exp(3 * scores) - 1
    assert metrics.roc_points(scores, labels) == metrics.roc_points(warped, labels)
    assert metrics.auc(scores, labels) == metrics.auc(warped, labels)
    assert metrics.accuracy_at_threshold(scores, labels, 0.5) == \
        metrics.accuracy_at_threshold(warped, labels, np.exp(1.5) - 1)
    assert abs(metrics.auc(scores, 1 - labels) - (1 - metrics.auc(scores, labels))) <= 1e-12


def test_random_labels_concentrate_at_half():
    rng = np.random.default_rng(1)
    n = 1000
    bound = 3 * math.sqrt(0.25 / n)
    accs = np.array([metrics.accuracy_at_threshold(rng.random(n), rng.permutation(_labels(n // 2, n // 2)))
                     for _ in range(1000)])
    # a 3-sigma band holds 99.7% of trials; the trial mean sits within 3 sigma / sqrt(1000)
    assert np.mean(np.abs(accs - 0.5) <= bound) >= 0.99
    assert abs(accs.mean() - 0.5) <= bound / math.sqrt(1000)


def test_fpr_at_tpr_examples():
    assert metrics.fpr_at_tpr([0.9, 0.8, 0.2, 0.1], 0.95, _labels(2, 2)) == 0.0
    assert metrics.fpr_at_tpr(np.full(6, 0.4), 1.0, _labels(3, 3)) == 1.0
    with pytest.raises(ParameterError):
        metrics.fpr_at_tpr([0.1, 0.9], 0.0, [0, 1])
    with pytest.raises(metrics.InputError):
        metrics.fpr_at_tpr([0.1, 0.9], 0.9, [0, 0])


@pytest.mark.parametrize("seed", range(5))
def test_fpr_at_tpr_matches_scan(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random(30), 2)
    labels = rng.permutation(_labels(15, 15))
    for target in (0.5, 0.8, 0.9, 0.95, 1.0):
        assert metrics.fpr_at_tpr(scores, target, labels) == fpr_at_tpr_scan(scores, labels, target)


def test_non_finite_scores_rejected():
    with pytest.raises(metrics.InputError):
        metrics.ScoreSet.from_arrays([0.1, np.nan], [1, 0])


# -- reports -------------------------------------------------------------------

def _report(seed=1, scores=None, labels=None, **kw):
    scores = np.array([0.9, 0.7, 0.3, 0.1]) if scores is None else scores
    labels = _labels(2, 2) if labels is None else labels
    args = dict(plan_hash="ab" * 32, seed=seed, detector="cnn[stage1]", param_count=1234,
                audited_train_accuracy=0.95, resolution=32)
    args.update(kw)
    return metrics.evaluate(metrics.ScoreSet.from_arrays(scores, labels), **args)


def test_emit_twice_identical_and_round_trip(tmp_path):
    r = _report(scores=np.array([0.9, 0.6, 0.6, 0.2]))
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    metrics.emit_report(r, str(a), roc_csv=str(tmp_path / "roc.csv"))
    metrics.emit_report(r, str(b))
    assert a.read_bytes() == b.read_bytes()
    assert metrics.parse_report(str(a)) == r


def test_perfect_report_csv_has_corner(tmp_path):
    r = _report()
    assert r.auc == 1.0 and r.accuracy == 1.0
    metrics.emit_report(r, str(tmp_path / "r.json"), roc_csv=str(tmp_path / "roc.csv"))
    rows = (tmp_path / "roc.csv").read_text().splitlines()
    assert rows[0] == "fpr,tpr" and "0.0,1.0" in rows


def test_unbalanced_eval_rejected():
    with pytest.raises(metrics.InputError, match="unbalanced"):
        _report(scores=np.array([0.9, 0.7, 0.3]), labels=_labels(2, 1))


def test_nan_train_accuracy_written_as_null(tmp_path):
    r = _report(audited_train_accuracy=float("nan"))
    assert r.audited_train_accuracy is None
    metrics.emit_report(r, str(tmp_path / "r.json"))
    assert '"audited_train_accuracy": null' in (tmp_path / "r.json").read_text()


def test_aggregate_mean_and_sample_std():
    rng = np.random.default_rng(3)
    reports = []
    for seed in (1, 2, 3):
        scores = rng.random(40)
        reports.append(_report(seed, scores, rng.permutation(_labels(20, 20))))
    agg = metrics.aggregate(reports, "ab" * 32)
    accs = [r.accuracy for r in reports]
    assert abs(agg["accuracy"]["mean"] - sum(accs) / 3) <= 1e-12
    assert agg["accuracy"]["std"] == pytest.approx(np.std(accs, ddof=1), abs=1e-12)
    assert agg["seeds"] == [1, 2, 3] and set(agg) >= {"fpr_at_tpr_0.9", "auc"}
    assert metrics.aggregate(reports[:1], "x")["accuracy"]["std"] == 0.0
    with pytest.raises(metrics.InputError):
        metrics.aggregate([], "x")


@pytest.mark.parametrize("x,text", [(0.12345, "0.1235"), (0.5, "0.5000"), (0.00005, "0.0001"),
                                    (0.00015, "0.0001"), (1.0, "1.0000")])
def test_four_decimal_formatting(x, text):
    # the exact binary value decides ties: 0.00015 is stored just below the half
    assert metrics.fmt4(x) == text
