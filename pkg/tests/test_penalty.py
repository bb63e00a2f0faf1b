import numpy as np
import pytest

from bonemap.edt import EmptyForegroundError, boundary_voxels, edt
from bonemap.grid import LabelVolume, class_mask
from bonemap.penalty import build_penalty, inner_map, outer_map


def _labels(arr, k):
    return LabelVolume.from_zyx(np.asarray(arr, dtype=np.uint8), num_classes=k)


def _line(values, k=2):
    return _labels(np.asarray(values).reshape(1, 1, -1), k)


def _random_blob_volume(rng, side=12, num_classes=3):
    """Multi-class volume made of small separated boxes (one per class)."""
    lab = np.zeros((side, side, side), dtype=np.uint8)
    anchors = [(1, 1, 1), (side - 5, side - 5, side - 5), (1, side - 4, side - 5)]
    for c in range(1, num_classes):
        az, ay, ax = anchors[(c - 1) % len(anchors)]
        dz, dy, dx = rng.integers(2, 4, size=3)
        lab[az : az + dz, ay : ay + dy, ax : ax + dx] = c
    return _labels(lab, num_classes)


def test_outer_line():
    gt = _line([0, 0, 1, 0, 0])
    assert outer_map(gt).data.ravel().tolist() == [0.0, 1.0, 0.0, 1.0, 0.0]


def test_outer_two_voxel_line():
    gt = _line([1, 0])
    assert outer_map(gt).data.ravel().tolist() == [0.0, 0.0]


def test_outer_farthest_background_is_zero():
    rng = np.random.default_rng(2)
    gt = _random_blob_volume(rng)
    out = outer_map(gt).data
    bg = gt.labels == 0
    d = edt(LabelVolume(gt.shape, (gt.labels > 0).astype(np.uint8), 2)).dist.data
    far = np.unravel_index(np.argmax(np.where(bg, d, -1.0)), d.shape)
    assert out[far] == 0.0


def test_outer_requires_foreground():
    with pytest.raises(EmptyForegroundError):
        outer_map(_line([0, 0, 0]))
    with pytest.raises(EmptyForegroundError):
        build_penalty(_line([0, 0, 0]))


def test_inner_line():
    gt = _line([0, 0, 1, 1, 1, 0, 0])
    im, absent = inner_map(gt, 1)
    assert not absent
    assert im.data.ravel().tolist() == [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]


def test_inner_single_voxel_class():
    gt = _line([0, 1, 0])
    im, absent = inner_map(gt, 1)
    assert not absent
    assert im.data.sum() == 0.0


def test_inner_deepest_voxel_is_zero():
    rng = np.random.default_rng(3)
    gt = _random_blob_volume(rng)
    for c in (1, 2):
        im, _ = inner_map(gt, c)
        cm = class_mask(gt, c).labels != 0
        comp = LabelVolume(gt.shape, (~cm).astype(np.uint8), 2)
        depth = edt(comp).dist.data
        deepest = np.unravel_index(np.argmax(np.where(cm, depth, -1.0)), depth.shape)
        assert im.data[deepest] == 0.0


def test_inner_absent_class_flagged():
    gt = _labels(np.array([[[0, 1, 0]]]), k=3)  # class 2 missing
    im, absent = inner_map(gt, 2)
    assert absent
    assert im.data.sum() == 0.0
    pm = build_penalty(gt)
    assert pm.absent_classes == frozenset({2})


def test_build_line_combination():
    gt = _line([0, 0, 1, 1, 1, 0, 0])
    pm = build_penalty(gt)
    assert pm.outer.data.ravel().tolist() == [0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
    assert pm.inner[0].data.ravel().tolist() == [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]
    assert pm.phi.data.ravel().tolist() == [0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0]


def test_build_all_foreground():
    gt = _labels(np.ones((2, 2, 2)), k=2)
    pm = build_penalty(gt)
    assert pm.outer.data.sum() == 0.0
    assert pm.phi.data.sum() == 0.0
    assert not pm.absent_classes


def test_phi_nonnegative_and_support_disjoint():
    rng = np.random.default_rng(4)
    for _ in range(10):
        gt = _random_blob_volume(rng)
        pm = build_penalty(gt)
        assert pm.phi.data.min() >= 0.0
        assert np.all(pm.outer.data * pm.inner[0].data == 0.0)
        assert np.all(pm.outer.data * pm.inner[1].data == 0.0)
        assert np.all(pm.inner[0].data * pm.inner[1].data == 0.0)
        # phi equals exactly one constituent per voxel
        bg = gt.labels == 0
        assert np.array_equal(pm.phi.data[bg], pm.outer.data[bg])
        for c in (1, 2):
            cm = gt.labels == c
            assert np.array_equal(pm.phi.data[cm], pm.inner[c - 1].data[cm])


def test_boundary_peaking():
    rng = np.random.default_rng(5)
    gt = _random_blob_volume(rng, side=16)
    pm = build_penalty(gt)
    phi = pm.phi.data
    # class maxima sit on the innermost shell (minimal depth within the class)
    for c in (1, 2):
        cm = gt.labels == c
        comp = LabelVolume(gt.shape, (~cm).astype(np.uint8), 2)
        depth = edt(comp).dist.data
        cls_phi = np.where(cm, phi, -np.inf)
        argmax = cls_phi == cls_phi.max()
        assert np.all(depth[argmax] == depth[cm].min())
    # background maxima are face-adjacent to foreground
    fg = gt.labels > 0
    bg_phi = np.where(~fg, phi, -np.inf)
    argmax = np.argwhere(bg_phi == bg_phi.max())
    for z, y, x in argmax:
        neigh = []
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            tz, ty, tx = z + dz, y + dy, x + dx
            if 0 <= tz < fg.shape[0] and 0 <= ty < fg.shape[1] and 0 <= tx < fg.shape[2]:
                neigh.append(fg[tz, ty, tx])
        assert any(neigh)


def test_phi_argmax_near_some_class_boundary():
    rng = np.random.default_rng(6)
    gt = _random_blob_volume(rng, side=16)
    pm = build_penalty(gt)
    shells = np.zeros(gt.shape.zyx, dtype=bool)
    for c in (1, 2):
        shells |= boundary_voxels(class_mask(gt, c)).labels != 0
    shell_pts = np.argwhere(shells).astype(float)
    for pt in np.argwhere(pm.phi.data == pm.phi.data.max()):
        d2 = ((shell_pts - pt) ** 2).sum(axis=1).min()
        assert d2 <= 1.0 + 1e-12


def test_per_class_normalization_independent():
    # identical class-2 blob embedded next to differently sized class-1 blobs
    a = np.zeros((10, 10, 10), dtype=np.uint8)
    b = np.zeros((10, 10, 10), dtype=np.uint8)
    a[1:3, 1:3, 1:3] = 1
    b[1:6, 1:6, 1:6] = 1
    for vol in (a, b):
        vol[7:9, 7:9, 7:9] = 2
    im_a, _ = inner_map(_labels(a, 3), 2)
    im_b, _ = inner_map(_labels(b, 3), 2)
    assert np.array_equal(im_a.data, im_b.data)


def test_build_deterministic():
    rng = np.random.default_rng(8)
    gt = _random_blob_volume(rng)
    p1 = build_penalty(gt)
    p2 = build_penalty(gt)
    assert np.array_equal(p1.phi.data, p2.phi.data)
