"""Synthetic three-blob volumes standing in for knee-bone ground truth.

Three ellipsoids (classes 1..3) with voxel-count ratios of roughly 1.6 and 16
between the largest and the other two, placed with a two-voxel face margin
and at least one background voxel between blobs.  The image is per-class mean
intensity plus seeded Gaussian noise.  ``perturb`` produces controlled
imperfect copies of a label volume for metric and cleanup tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import LabelVolume, ScalarVolume, Shape3
from .postproc import StructuringElement, dilate, erode

__all__ = ["PhantomSpec", "generate", "perturb", "Shift", "ErodeBoundary", "Speckle"]

NUM_CLASSES = 4  # background + three bones


@dataclass(frozen=True)
class PhantomSpec:
    shape: Shape3
    volume_ratio_femur_tibia: float = 1.6
    volume_ratio_femur_patella: float = 16.0
    noise_sigma: float = 0.1
    intensities: tuple[float, float, float, float] = (0.0, 1.0, 0.65, 0.35)
    fill_fraction: float = 0.035  # volume fraction of the largest blob
    rng_seed: int = 0

    def __post_init__(self):
        if self.volume_ratio_femur_tibia <= 1 or self.volume_ratio_femur_patella <= 1:
            raise ValueError("volume ratios must be > 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if len(self.intensities) != NUM_CLASSES:
            raise ValueError(f"need {NUM_CLASSES} per-class intensities")
        if not (0 < self.fill_fraction <= 0.2):
            raise ValueError("fill_fraction must be in (0, 0.2]")
        object.__setattr__(self, "intensities", tuple(float(v) for v in self.intensities))


_FACE_MARGIN = 2
_PLACEMENT_TRIES = 200


def _blob_radii(spec: PhantomSpec, fill: float) -> list[float]:
    total = spec.shape.numel * fill
    counts = [total, total / spec.volume_ratio_femur_tibia, total / spec.volume_ratio_femur_patella]
    return [(3.0 * n / (4.0 * math.pi)) ** (1.0 / 3.0) for n in counts]


def _min_side_estimate(spec: PhantomSpec) -> int:
    # smallest blob needs radius >= ~1.2 voxels to voxelize reliably
    patella_count = 4.0 / 3.0 * math.pi * 1.2**3
    min_volume = patella_count * spec.volume_ratio_femur_patella / spec.fill_fraction
    return int(math.ceil(min_volume ** (1.0 / 3.0)))


def _rasterize(shape: Shape3, center, semi) -> np.ndarray:
    nz, ny, nx = shape.zyx
    cz, cy, cx = center
    sz, sy, sx = semi
    z0, z1 = max(0, int(cz - sz) - 1), min(nz, int(cz + sz) + 2)
    y0, y1 = max(0, int(cy - sy) - 1), min(ny, int(cy + sy) + 2)
    x0, x1 = max(0, int(cx - sx) - 1), min(nx, int(cx + sx) + 2)
    zz, yy, xx = np.meshgrid(
        np.arange(z0, z1), np.arange(y0, y1), np.arange(x0, x1), indexing="ij"
    )
    inside = (
        ((zz - cz) / sz) ** 2 + ((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2
    ) <= 1.0
    out = np.zeros(shape.zyx, dtype=bool)
    out[z0:z1, y0:y1, x0:x1] = inside
    return out


def generate(spec: PhantomSpec) -> tuple[ScalarVolume, LabelVolume]:
    """Deterministically generate (image, ground truth) for the given spec."""
    rng = np.random.default_rng(spec.rng_seed)
    nz, ny, nx = spec.shape.zyx

    labels = None
    fill = spec.fill_fraction
    for _ in range(6):  # shrink and retry if the blobs cannot be packed
        radii = _blob_radii(spec, fill)
        if radii[-1] < 1.2:
            break
        attempt = np.zeros(spec.shape.zyx, dtype=np.uint8)
        forbidden = np.zeros(spec.shape.zyx, dtype=bool)
        ok = True
        for cls, r in enumerate(radii, start=1):
            factors = rng.uniform(0.9, 1.12, size=3)
            factors /= factors.prod() ** (1.0 / 3.0)
            semi = r * factors  # (z, y, x) semi-axes, volume-preserving jitter
            lo = [_FACE_MARGIN + s for s in semi]
            hi = [n - 1 - _FACE_MARGIN - s for s, n in zip(semi, (nz, ny, nx))]
            placed = False
            if all(a <= b for a, b in zip(lo, hi)):
                for _try in range(_PLACEMENT_TRIES):
                    center = [rng.uniform(a, b) for a, b in zip(lo, hi)]
                    blob = _rasterize(spec.shape, center, semi)
                    if not blob.any() or (blob & forbidden).any():
                        continue
                    attempt[blob] = cls
                    grown = dilate(LabelVolume(spec.shape, blob.astype(np.uint8), 2))
                    forbidden |= grown.labels != 0
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            labels = attempt
            break
        fill *= 0.85

    if labels is None:
        raise ValueError(
            f"blobs cannot fit in {nx}x{ny}x{nz}; "
            f"need roughly {_min_side_estimate(spec)} voxels per side "
            f"at fill_fraction={spec.fill_fraction}"
        )

    gt = LabelVolume(spec.shape, labels, NUM_CLASSES)
    means = np.asarray(spec.intensities)[labels]
    image = means + spec.noise_sigma * rng.standard_normal(spec.shape.zyx)
    return ScalarVolume(spec.shape, image), gt


@dataclass(frozen=True)
class Shift:
    """Translate all labels by ``step`` voxels along axis 'x', 'y', or 'z'."""

    axis: str = "x"
    step: int = 1


@dataclass(frozen=True)
class ErodeBoundary:
    """Peel one 6-connected boundary shell off every foreground class."""


@dataclass(frozen=True)
class Speckle:
    """Relabel ``count`` random voxels; exactly that many voxels end up differing."""

    count: int
    label: int | None = None  # None: random wrong label per voxel


def perturb(gt: LabelVolume, ops: list, seed: int = 0) -> LabelVolume:
    """Apply the listed perturbations in order, deterministically per seed."""
    rng = np.random.default_rng(seed)
    lab = gt.labels.copy()
    axis_map = {"x": 2, "y": 1, "z": 0}
    for op in ops:
        if isinstance(op, Shift):
            if op.axis not in axis_map:
                raise ValueError(f"unknown axis {op.axis!r}")
            out = np.zeros_like(lab)
            ax = axis_map[op.axis]
            n = lab.shape[ax]
            s = op.step
            if abs(s) < n:
                dst = [slice(None)] * 3
                src = [slice(None)] * 3
                dst[ax] = slice(max(0, s), n + min(0, s))
                src[ax] = slice(max(0, -s), n + min(0, -s))
                out[tuple(dst)] = lab[tuple(src)]
            lab = out
        elif isinstance(op, ErodeBoundary):
            out = np.zeros_like(lab)
            for c in range(1, gt.num_classes):
                cm = LabelVolume(gt.shape, (lab == c).astype(np.uint8), 2)
                kept = erode(cm, StructuringElement(6)).labels != 0
                out[kept] = c
            lab = out
        elif isinstance(op, Speckle):
            flat = lab.reshape(-1)
            if op.label is not None:
                candidates = np.nonzero(flat != op.label)[0]
            else:
                candidates = np.arange(flat.size)
            if op.count > candidates.size:
                raise ValueError(f"cannot speckle {op.count} voxels, only {candidates.size} eligible")
            picks = rng.choice(candidates, size=op.count, replace=False)
            if op.label is not None:
                flat[picks] = op.label
            else:
                for i in picks:
                    choices = [k for k in range(gt.num_classes) if k != flat[i]]
                    flat[i] = choices[int(rng.integers(0, len(choices)))]
        else:
            raise ValueError(f"unknown perturbation {op!r}")
    return LabelVolume(gt.shape, lab, gt.num_classes)
