"""Dense 3D volume containers and the elementwise algebra shared by all modules.

Memory layout is fixed package-wide: volume arrays are indexed ``[z, y, x]``
and stored C-contiguous, so a flat ``ravel()`` walks x fastest.  Class-channel
data puts the channel axis first (``[k, z, y, x]``), i.e. channel-major.
All numeric data is float64; labels are uint8.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Shape3",
    "ScalarVolume",
    "LabelVolume",
    "ClassVolume",
    "one_hot",
    "argmax_labels",
    "class_mask",
    "hadamard",
]


@dataclass(frozen=True)
class Shape3:
    """Voxel counts per axis plus spacing metadata (mm per voxel).

    Spacing is carried for file round-trips only; distances and metrics work
    in voxel units.
    """

    nx: int
    ny: int
    nz: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            n = getattr(self, name)
            if not isinstance(n, (int, np.integer)) or n < 1:
                raise ValueError(f"{name} must be a positive integer, got {n!r}")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing!r}")
        object.__setattr__(self, "spacing", sp)

    @property
    def numel(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def zyx(self) -> tuple[int, int, int]:
        """Numpy array shape for this volume."""
        return (self.nz, self.ny, self.nx)

    def linear_index(self, x: int, y: int, z: int) -> int:
        """Flat index of voxel (x, y, z) in x-fastest order."""
        if not (0 <= x < self.nx and 0 <= y < self.ny and 0 <= z < self.nz):
            raise IndexError(f"voxel ({x}, {y}, {z}) outside {self.nx}x{self.ny}x{self.nz}")
        return x + self.nx * (y + self.ny * z)

    def xyz_of(self, i: int) -> tuple[int, int, int]:
        """Inverse of linear_index."""
        if not (0 <= i < self.numel):
            raise IndexError(f"linear index {i} outside volume of {self.numel} voxels")
        x = i % self.nx
        y = (i // self.nx) % self.ny
        z = i // (self.nx * self.ny)
        return (x, y, z)


def _frozen_array(data, dtype, shape: Shape3, ndim_extra: int = 0, k: int = 0):
    arr = np.array(data, dtype=dtype, order="C", copy=True)
    want = (k,) + shape.zyx if ndim_extra else shape.zyx
    if arr.size != int(np.prod(want)):
        raise ValueError(f"data length {arr.size} does not match shape {want}")
    arr = arr.reshape(want)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    """Dense grid of real values: images, distance maps, penalty fields."""

    shape: Shape3
    data: np.ndarray  # float64, [z, y, x]

    def __post_init__(self):
        arr = _frozen_array(self.data, np.float64, self.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("scalar volume contains non-finite values")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_zyx(cls, arr: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> "ScalarVolume":
        nz, ny, nx = arr.shape
        return cls(Shape3(nx, ny, nz, spacing), arr)


@dataclass(frozen=True)
class LabelVolume:
    """Dense grid of small-integer class labels; 0 is background."""

    shape: Shape3
    labels: np.ndarray  # uint8, [z, y, x]
    num_classes: int = 2

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.dtype.kind not in "iub":
            raise ValueError(f"labels must be integer-valued, got dtype {raw.dtype}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if raw.size and (raw.min() < 0 or raw.max() >= self.num_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes - 1}], "
                f"found range [{raw.min()}, {raw.max()}]"
            )
        arr = _frozen_array(raw, np.uint8, self.shape)
        object.__setattr__(self, "labels", arr)

    @classmethod
    def from_zyx(cls, arr: np.ndarray, num_classes: int, spacing=(1.0, 1.0, 1.0)) -> "LabelVolume":
        nz, ny, nx = arr.shape
        return cls(Shape3(nx, ny, nz, spacing), arr, num_classes)

    def foreground(self) -> np.ndarray:
        """Boolean [z, y, x] array, True where label > 0."""
        return self.labels > 0


@dataclass(frozen=True)
class ClassVolume:
    """K scalar channels per voxel, channel-major: logits, probabilities, one-hot."""

    shape: Shape3
    num_classes: int
    data: np.ndarray  # float64, [k, z, y, x]

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        arr = _frozen_array(self.data, np.float64, self.shape, ndim_extra=1, k=self.num_classes)
        if arr.shape[0] != self.num_classes:
            raise ValueError(f"channel count {arr.shape[0]} != num_classes {self.num_classes}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("class volume contains non-finite values")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_kzyx(cls, arr: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> "ClassVolume":
        k, nz, ny, nx = arr.shape
        return cls(Shape3(nx, ny, nz, spacing), k, arr)

    def check_probabilities(self, tol: float = 1e-9) -> None:
        """Raise unless channels are a per-voxel probability distribution."""
        if self.data.min() < 0:
            raise ValueError("probability channels must be non-negative")
        sums = self.data.sum(axis=0)
        if np.abs(sums - 1.0).max() > tol:
            raise ValueError("per-voxel channel sums deviate from 1")


def one_hot(labels: LabelVolume) -> ClassVolume:
    """Expand labels into per-voxel indicator channels (one channel per class)."""
    k = labels.num_classes
    out = np.zeros((k,) + labels.shape.zyx, dtype=np.float64)
    zz, yy, xx = np.indices(labels.shape.zyx, sparse=True)
    out[labels.labels.astype(np.intp), zz, yy, xx] = 1.0
    return ClassVolume(labels.shape, k, out)


def argmax_labels(channels: ClassVolume) -> LabelVolume:
    """Per-voxel argmax over channels; ties resolve to the lowest class index."""
    lab = np.argmax(channels.data, axis=0).astype(np.uint8)
    return LabelVolume(channels.shape, lab, channels.num_classes)


def class_mask(labels: LabelVolume, c: int) -> LabelVolume:
    """Binary volume marking voxels of class ``c``."""
    if not (0 <= c < labels.num_classes):
        raise ValueError(f"class {c} out of range [0, {labels.num_classes - 1}]")
    mask = (labels.labels == c).astype(np.uint8)
    return LabelVolume(labels.shape, mask, 2)


def hadamard(a: ScalarVolume, b: ScalarVolume) -> ScalarVolume:
    """Elementwise product of two volumes of identical shape."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return ScalarVolume(a.shape, a.data * b.data)
