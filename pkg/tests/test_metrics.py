import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advdepth import metrics
from advdepth.metrics import SparseDepth, format_ratio, mmd, ratio_report, rmse, select_targets


def rmse_loop(pred, gt, valid):
    total, n = 0.0, 0
    for p, g, v in zip(pred.ravel(), gt.ravel(), valid.ravel()):
        if v:
            total += (p - g) ** 2
            n += 1
    return math.sqrt(total / n)


def mmd_loop(pred, mask):
    vals = [p for p, m in zip(pred.ravel(), mask.ravel()) if m]
    return math.fsum(vals) / len(vals)


def test_rmse_examples():
    gt = np.full((4, 4), 10.0)
    valid = np.ones((4, 4))
    assert rmse(gt, gt, valid) == 0.0
    assert rmse(gt + 3, SparseDepth(gt, valid)) == pytest.approx(3.0, abs=1e-15)


def test_rmse_ignores_invalid_pixels():
    gt = np.zeros((2, 2))
    pred = np.array([[1.0, 100.0], [1.0, 100.0]])
    assert rmse(pred, gt, np.array([[1, 0], [1, 0]])) == 1.0


def test_rmse_rejects_empty_mask():
    with pytest.raises(ValueError):
        rmse(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2)))


def test_mmd_examples():
    m = np.zeros((4, 4))
    m[1:3, 1:3] = 1
    assert mmd(np.full((4, 4), 20.0), m) == 20.0
    pred = np.zeros((4, 4))
    pred[1, 1:3], pred[2, 1:3] = 10.0, 30.0
    assert mmd(pred, m) == 20.0
    with pytest.raises(ValueError):
        mmd(pred, np.zeros((4, 4)))


def test_metrics_match_loop_oracles():
    r = np.random.default_rng(8)
    for _ in range(100):
        gt = r.uniform(1, 100, size=(8, 8))
        pred = r.uniform(1, 100, size=(8, 8))
        valid = r.random((8, 8)) < 0.3
        valid[r.integers(8), r.integers(8)] = True
        mask = r.random((8, 8)) < 0.2
        mask[r.integers(8), r.integers(8)] = True
        assert abs(rmse(pred, gt, valid) - rmse_loop(pred, gt, valid)) < 1e-12
        assert abs(mmd(pred, mask) - mmd_loop(pred, mask)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(0.01, 100))
def test_metric_properties(seed, a):
    r = np.random.default_rng(seed)
    gt, pred = r.uniform(1, 100, size=(2, 6, 6))
    valid = np.ones((6, 6))
    mask = r.random((6, 6)) < 0.5
    mask[0, 0] = True
    perm = r.permutation(36)
    assert rmse(pred, gt, valid) == pytest.approx(
        rmse(pred.ravel()[perm], gt.ravel()[perm], valid.ravel()), abs=1e-12
    )
    assert rmse(pred[::-1], gt[::-1], valid) == pytest.approx(rmse(pred, gt, valid), abs=1e-12)
    assert mmd(a * pred, mask) == pytest.approx(a * mmd(pred, mask), rel=1e-12, abs=1e-12)


def test_sparse_depth_fraction():
    assert SparseDepth(np.ones((2, 2)), np.array([[1, 0], [0, 0]])).valid_fraction == 0.25
    with pytest.raises(ValueError):
        SparseDepth(np.ones((2, 2)), np.ones((3, 3)))


def test_select_targets_rules():
    gt = np.full((4, 4), 11.4)
    gt[:, 2:] = 60.0
    valid = np.ones((4, 4))
    valid[3, :] = 0
    near = np.zeros((4, 4))
    near[:2, :2] = 1
    far = np.zeros((4, 4))
    far[:2, 2:] = 1
    no_gt = np.zeros((4, 4))
    no_gt[3, :] = 1
    kept = select_targets([near, far, no_gt], gt, valid)
    assert len(kept) == 1 and kept[0] is near
    assert select_targets(kept, gt, valid) == kept
    with pytest.raises(ValueError):
        select_targets([near], gt, valid, threshold=0)


def test_ratio_report_table_arithmetic():
    assert format_ratio(ratio_report(4.22, 11.54).rmse_ratio) == "2.7×"
    assert format_ratio(ratio_report(clean_mmd=20.76, adv_mmd=72.35).mmd_ratio) == "3.5×"
    assert format_ratio(ratio_report(5.0, 5.0).rmse_ratio) == "1.0×"
    # full precision is kept
    assert ratio_report(4.22, 11.54).rmse_ratio == 11.54 / 4.22


def test_ratio_absent_when_clean_is_zero():
    r = ratio_report(0.0, 3.0)
    assert r.rmse_ratio is None
    assert format_ratio(r.rmse_ratio) == ""
    assert ratio_report(1.0, 2.0).mmd_ratio is None


def test_csv_round_trip(tmp_path):
    rows = [
        ("000001", "fgsm", "non-targeted", ratio_report(4.22, 11.54), None),
        ("000002", "mifgsm", "targeted", ratio_report(3.0, 4.0, 20.76, 72.35), 80.0),
    ]
    path = tmp_path / "r.csv"
    metrics.write_csv(path, rows)
    header = path.read_text().splitlines()[0]
    assert header.split(",")[:9] == [
        "image-id", "method", "mode", "clean-rmse", "adv-rmse", "rmse-ratio", "clean-mmd", "adv-mmd", "mmd-ratio",
    ]
    assert metrics.read_csv(path) == rows


def test_csv_missing_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("image-id,method\n1,fgsm\n")
    with pytest.raises(ValueError):
        metrics.read_csv(p)
