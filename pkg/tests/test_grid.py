import numpy as np
import pytest

from bonemap.grid import (
    ClassVolume,
    LabelVolume,
    ScalarVolume,
    Shape3,
    argmax_labels,
    class_mask,
    hadamard,
    one_hot,
)


def test_shape_validation():
    with pytest.raises(ValueError):
        Shape3(0, 1, 1)
    with pytest.raises(ValueError):
        Shape3(1, 1, 1, spacing=(1.0, -1.0, 1.0))
    s = Shape3(2, 3, 4)
    assert s.numel == 24
    assert s.zyx == (4, 3, 2)


def test_linear_index_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(5):
        s = Shape3(int(rng.integers(1, 7)), int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        for i in range(s.numel):
            x, y, z = s.xyz_of(i)
            assert s.linear_index(x, y, z) == i


def test_ravel_is_x_fastest():
    s = Shape3(3, 2, 2)
    data = np.arange(12).reshape(s.zyx)
    vol = ScalarVolume(s, data)
    flat = vol.data.ravel()
    # walking the flat buffer, x moves fastest
    assert flat[s.linear_index(1, 0, 0)] == data[0, 0, 1]
    assert flat[s.linear_index(0, 1, 0)] == data[0, 1, 0]
    assert flat[s.linear_index(0, 0, 1)] == data[1, 0, 0]


def test_volume_invariants():
    s = Shape3(2, 2, 2)
    with pytest.raises(ValueError):
        ScalarVolume(s, np.zeros(7))
    with pytest.raises(ValueError):
        ScalarVolume(s, np.full(8, np.nan))
    with pytest.raises(ValueError):
        LabelVolume(s, np.full(8, 3), num_classes=3)
    vol = ScalarVolume(s, np.zeros(8))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1.0  # frozen after construction


def test_one_hot_single_voxel():
    lab = LabelVolume(Shape3(1, 1, 1), [0], num_classes=2)
    oh = one_hot(lab)
    assert oh.data[:, 0, 0, 0].tolist() == [1.0, 0.0]


def test_one_hot_identity_pattern():
    lab = LabelVolume(Shape3(3, 1, 1), [0, 1, 2], num_classes=3)
    oh = one_hot(lab)
    assert np.array_equal(oh.data[:, 0, 0, :], np.eye(3))


def test_one_hot_partition_and_argmax_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(5):
        k = int(rng.integers(2, 5))
        raw = rng.integers(0, k, size=(3, 4, 2))
        lab = LabelVolume.from_zyx(raw, num_classes=k)
        oh = one_hot(lab)
        assert np.allclose(oh.data.sum(axis=0), 1.0)
        oh.check_probabilities()
        back = argmax_labels(oh)
        assert np.array_equal(back.labels, lab.labels)


def test_class_mask():
    lab = LabelVolume(Shape3(3, 1, 1), [0, 1, 2], num_classes=3)
    assert class_mask(lab, 1).labels.ravel().tolist() == [0, 1, 0]
    empty = LabelVolume(Shape3(3, 1, 1), [0, 0, 0], num_classes=3)
    assert class_mask(empty, 1).labels.sum() == 0
    with pytest.raises(ValueError):
        class_mask(lab, 3)
    # masks over all classes partition the volume
    union = sum(class_mask(lab, c).labels.astype(int) for c in range(3))
    assert np.array_equal(union, np.ones_like(union))


def test_hadamard():
    s = Shape3(2, 1, 1)
    a = ScalarVolume(s, [2.0, 3.0])
    b = ScalarVolume(s, [4.0, -1.0])
    assert hadamard(a, b).data.ravel().tolist() == [8.0, -3.0]
    ones = ScalarVolume(s, [1.0, 1.0])
    assert np.array_equal(hadamard(a, ones).data, a.data)
    zeros = ScalarVolume(s, [0.0, 0.0])
    assert hadamard(a, zeros).data.sum() == 0.0
    with pytest.raises(ValueError):
        hadamard(a, ScalarVolume(Shape3(1, 1, 1), [1.0]))


def test_hadamard_commutative_associative_on_integers():
    rng = np.random.default_rng(3)
    s = Shape3(4, 3, 2)
    a = ScalarVolume(s, rng.integers(-5, 6, size=s.numel).astype(float))
    b = ScalarVolume(s, rng.integers(-5, 6, size=s.numel).astype(float))
    c = ScalarVolume(s, rng.integers(-5, 6, size=s.numel).astype(float))
    assert np.array_equal(hadamard(a, b).data, hadamard(b, a).data)
    assert np.array_equal(hadamard(hadamard(a, b), c).data, hadamard(a, hadamard(b, c)).data)
