import numpy as np
import pytest

from bonemap.grid import LabelVolume
from bonemap.metrics import boundary_dsc, evaluate, global_dsc

from oracles import boundary_score, boundary_set, set_dice


def _labels(arr, k=2):
    return LabelVolume.from_zyx(np.asarray(arr, dtype=np.uint8), num_classes=k)


def _random_pair(rng, side=12, k=3):
    a = rng.integers(0, k, size=(side, side, side))
    b = a.copy()
    flips = rng.random(a.shape) < 0.15
    b[flips] = rng.integers(0, k, size=int(flips.sum()))
    return _labels(a, k), _labels(b, k)


def test_global_dsc_identity_and_disjoint():
    rng = np.random.default_rng(0)
    gt = _labels(rng.integers(0, 2, size=(4, 4, 4)))
    assert global_dsc(gt, gt, 1) == 1.0
    a = np.zeros((1, 1, 8), dtype=np.uint8)
    b = np.zeros((1, 1, 8), dtype=np.uint8)
    a[0, 0, :4] = 1
    b[0, 0, 4:] = 1
    assert global_dsc(_labels(a), _labels(b), 1) == 0.0


def test_global_dsc_half_overlap():
    a = np.zeros((1, 1, 8), dtype=np.uint8)
    b = np.zeros((1, 1, 8), dtype=np.uint8)
    a[0, 0, 0:4] = 1  # |P| = 4
    b[0, 0, 2:6] = 1  # |G| = 4, overlap = 2
    assert global_dsc(_labels(a), _labels(b), 1) == 0.5


def test_global_dsc_both_empty():
    z = _labels(np.zeros((2, 2, 2)), k=3)
    assert global_dsc(z, z, 2) == 1.0


def test_boundary_dsc_identity_any_tol():
    rng = np.random.default_rng(1)
    fg = np.zeros((6, 6, 6), dtype=np.uint8)
    fg[2:5, 1:4, 2:5] = 1
    gt = _labels(fg)
    for tol in range(5):
        assert boundary_dsc(gt, gt, 1, tol) == 1.0


def test_boundary_dsc_empty_conventions():
    empty = _labels(np.zeros((4, 4, 4)))
    cube = np.zeros((4, 4, 4), dtype=np.uint8)
    cube[1:3, 1:3, 1:3] = 1
    assert boundary_dsc(empty, empty, 1, 0) == 1.0
    assert boundary_dsc(_labels(cube), empty, 1, 3) == 0.0
    with pytest.raises(ValueError):
        boundary_dsc(empty, empty, 1, -1)


def test_boundary_dsc_shifted_cube():
    a = np.zeros((8, 8, 8), dtype=np.uint8)
    b = np.zeros((8, 8, 8), dtype=np.uint8)
    a[1:5, 1:5, 1:5] = 1
    b[2:6, 1:5, 1:5] = 1  # shifted one voxel along z
    strict = boundary_dsc(_labels(a), _labels(b), 1, 0)
    relaxed = boundary_dsc(_labels(a), _labels(b), 1, 1)
    assert strict < 1.0
    assert relaxed == 1.0


def test_boundary_dsc_tol0_is_strict_set_dice():
    rng = np.random.default_rng(2)
    for _ in range(5):
        pred, gt = _random_pair(rng, side=8)
        for c in (1, 2):
            sp = boundary_set(pred.labels == c)
            sg = boundary_set(gt.labels == c)
            assert boundary_dsc(pred, gt, c, 0) == pytest.approx(set_dice(sp, sg), abs=1e-12)


def test_matches_brute_force_reference():
    rng = np.random.default_rng(3)
    for _ in range(5):
        pred, gt = _random_pair(rng, side=10)
        report = evaluate(pred, gt)
        for c in (1, 2):
            p_set = {tuple(v) for v in np.argwhere(pred.labels == c)}
            g_set = {tuple(v) for v in np.argwhere(gt.labels == c)}
            assert report.per_class[c].g_dsc == pytest.approx(set_dice(p_set, g_set), abs=1e-12)
            sp = boundary_set(pred.labels == c)
            sg = boundary_set(gt.labels == c)
            assert report.per_class[c].b_dsc == pytest.approx(boundary_score(sp, sg, 0), abs=1e-12)
            for tol in (1, 2, 3, 4):
                want = boundary_score(sp, sg, tol)
                got = report.per_class[c].relaxed_b_dsc[tol - 1]
                assert got == pytest.approx(want, abs=1e-12)


def test_tolerance_monotonicity():
    rng = np.random.default_rng(4)
    for _ in range(5):
        pred, gt = _random_pair(rng, side=9)
        for c in (1, 2):
            scores = [boundary_dsc(pred, gt, c, t) for t in range(5)]
            assert all(a <= b + 1e-15 for a, b in zip(scores, scores[1:]))


def test_symmetry_in_arguments():
    rng = np.random.default_rng(5)
    pred, gt = _random_pair(rng, side=8)
    a = evaluate(pred, gt)
    b = evaluate(gt, pred)
    for c in a.per_class:
        assert a.per_class[c].g_dsc == b.per_class[c].g_dsc
        assert a.per_class[c].b_dsc == b.per_class[c].b_dsc
        assert a.per_class[c].relaxed_b_dsc == b.per_class[c].relaxed_b_dsc


def test_evaluate_report_basics():
    rng = np.random.default_rng(6)
    gt = _labels(rng.integers(0, 3, size=(6, 6, 6)), k=3)
    report = evaluate(gt, gt)
    assert report.mean_g_dsc == 1.0
    assert report.mean_b_dsc == 1.0
    blank = _labels(np.zeros((6, 6, 6)), k=3)
    report = evaluate(blank, gt)
    for c in (1, 2):
        assert report.per_class[c].g_dsc == 0.0
        assert report.per_class[c].b_dsc == 0.0


def test_mean_excludes_absent_classes():
    gt = np.zeros((5, 5, 5), dtype=np.uint8)
    gt[1:3, 1:3, 1:3] = 1  # class 2 absent everywhere
    report = evaluate(_labels(gt, k=3), _labels(gt, k=3))
    assert report.per_class[2].g_dsc == 1.0  # vacuous
    assert not report.per_class[2].present
    assert report.mean_g_dsc == 1.0


def test_csv_rows_format():
    gt = np.zeros((4, 4, 4), dtype=np.uint8)
    gt[1:3, 1:3, 1:3] = 1
    rows = evaluate(_labels(gt, k=2), _labels(gt, k=2)).csv_rows()
    assert rows[0] == "class,g_dsc,b_dsc,rb_dsc_1,rb_dsc_2,rb_dsc_3,rb_dsc_4"
    assert rows[1].startswith("1,1.000000,1.000000")
    assert rows[-1].startswith("mean,")


def test_shape_mismatch_rejected():
    a = _labels(np.zeros((2, 2, 2)))
    b = _labels(np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        global_dsc(a, b, 1)
    with pytest.raises(ValueError):
        evaluate(a, b)
