import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from ctfs.metrics import ConfusionMatrix, miou, read_report_miou, write_report


def test_perfect_prediction_diagonal():
    gt = np.array([[0, 1], [2, 2]])
    cm = ConfusionMatrix(3).accumulate(gt, gt)
    assert np.array_equal(cm.counts, np.diag([1, 1, 2]))
    ious, mean = miou(cm)
    assert ious == [1.0, 1.0, 1.0] and mean == 1.0


def test_worked_two_class_example():
    ious, mean = miou(np.array([[50, 50], [0, 100]]))
    assert ious[0] == 0.5
    assert ious[1] == 100 / 150
    assert mean == (0.5 + 100 / 150) / 2
    assert round(mean, 4) == 0.5833


def test_absent_class_excluded():
    cm = np.array([[10, 0, 0], [0, 0, 0], [2, 0, 8]])
    ious, mean = miou(cm)
    assert np.isnan(ious[1])
    assert mean == (10 / 12 + 8 / 10) / 2


def test_background_exclusion():
    cm = np.array([[10, 0], [5, 5]])
    assert miou(cm, include_background=False)[1] == 0.5


def test_empty_rejected():
    with pytest.raises(ValueError):
        miou(np.zeros((3, 3)))


def test_overflow_rejected():
    with pytest.raises(ValueError):
        ConfusionMatrix(3).accumulate(np.array([0, 3]), np.array([0, 1]))


def test_additivity():
    rng = np.random.default_rng(0)
    a_gt, a_pr = rng.integers(0, 4, (2, 16, 16))
    b_gt, b_pr = rng.integers(0, 4, (2, 16, 16))
    sep = ConfusionMatrix(4).accumulate(a_gt, a_pr).accumulate(b_gt, b_pr)
    joint = ConfusionMatrix(4).accumulate(np.concatenate([a_gt, b_gt]), np.concatenate([a_pr, b_pr]))
    assert np.array_equal(sep.counts, joint.counts)
    sharded = ConfusionMatrix(4).accumulate(b_gt, b_pr) + ConfusionMatrix(4).accumulate(a_gt, a_pr)
    assert np.array_equal(sharded.counts, joint.counts)


def test_loop_oracle():
    rng = np.random.default_rng(1)
    gt, pr = rng.integers(0, 5, (2, 20, 20))
    cm = ConfusionMatrix(5).accumulate(gt, pr)
    assert cm.counts.tolist() == oracles.confusion(gt.ravel(), pr.ravel(), 5)
    assert cm.total == 400


@given(seed=st.integers(0, 2**32 - 1))
def test_miou_bounds_and_label_permutation(seed):
    rng = np.random.default_rng(seed)
    gt, pr = rng.integers(0, 4, (2, 10, 10))
    cm = ConfusionMatrix(4).accumulate(gt, pr)
    _, m = miou(cm)
    assert 0.0 <= m <= 1.0
    perm = rng.permutation(4)
    _, m2 = miou(ConfusionMatrix(4).accumulate(perm[gt], perm[pr]))
    assert m2 == pytest.approx(m)


def test_report_roundtrip(tmp_path):
    write_report(tmp_path / "r.csv", ["a", "b"], [0.5, float("nan")], 0.5, "ck.pt")
    assert read_report_miou(tmp_path / "r.csv") == 0.5
