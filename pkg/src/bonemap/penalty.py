"""Error-penalizing distance maps built from a ground-truth label volume.

The combined field phi weights voxels by proximity to object boundaries: on
background it is the reverted distance-to-foreground (max minus distance, one
global max), on each foreground class it is the reverted depth inside that
class (per-class max, so small structures are not drowned out by large ones).
The two sides have disjoint support, so phi is their plain sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edt import EmptyForegroundError, edt
from .grid import LabelVolume, ScalarVolume, class_mask

__all__ = ["PenaltyMap", "outer_map", "inner_map", "build_penalty"]


@dataclass(frozen=True)
class PenaltyMap:
    """Combined penalty field phi plus its constituents, kept for inspection.

    ``inner[c - 1]`` is the map for foreground class c; ``absent_classes``
    lists foreground classes with no voxels in the source volume (their inner
    maps are identically zero).
    """

    phi: ScalarVolume
    outer: ScalarVolume
    inner: tuple[ScalarVolume, ...]
    num_classes: int
    absent_classes: frozenset[int] = frozenset()


def _foreground_union(gt: LabelVolume) -> LabelVolume:
    return LabelVolume(gt.shape, (gt.labels > 0).astype(np.uint8), 2)


def outer_map(gt: LabelVolume) -> ScalarVolume:
    """Reverted distance map on the background side.

    Computes the distance D to the nearest foreground voxel of any class and
    returns max(D) - D on background voxels (zero on foreground), so values
    are largest right next to the objects and fall to zero at the farthest
    background voxel.
    """
    union = _foreground_union(gt)
    if not union.labels.any():
        raise EmptyForegroundError("empty foreground: outer map undefined")
    d = edt(union).dist.data
    out = np.where(union.labels != 0, 0.0, d.max() - d)
    return ScalarVolume(gt.shape, out)


def inner_map(gt: LabelVolume, c: int) -> tuple[ScalarVolume, bool]:
    """Reverted depth map inside foreground class ``c``; zero elsewhere.

    The depth of a class voxel is its distance to the nearest voxel outside
    the class; the map holds (per-class max depth) - depth, so it peaks on the
    class's inner boundary shell and vanishes at its deepest voxel.  Returns
    the map and a flag that is True when the class has no voxels (the map is
    then identically zero).  A class filling the whole volume has no outside
    to measure against; all its voxels count as equally deep (zero map).
    """
    if not (1 <= c < gt.num_classes):
        raise ValueError(f"foreground class expected, got {c} (K={gt.num_classes})")
    cmask = class_mask(gt, c).labels != 0
    zero = ScalarVolume(gt.shape, np.zeros(gt.shape.zyx))
    if not cmask.any():
        return zero, True
    complement = LabelVolume(gt.shape, (~cmask).astype(np.uint8), 2)
    if not complement.labels.any():
        return zero, False
    depth = edt(complement).dist.data
    peak = depth[cmask].max()
    out = np.where(cmask, peak - depth, 0.0)
    return ScalarVolume(gt.shape, out), False


def build_penalty(gt: LabelVolume) -> PenaltyMap:
    """Assemble phi = outer + sum of per-class inner maps (disjoint supports)."""
    outer = outer_map(gt)
    inner = []
    absent = set()
    phi = outer.data.copy()
    for c in range(1, gt.num_classes):
        im, is_absent = inner_map(gt, c)
        inner.append(im)
        if is_absent:
            absent.add(c)
        else:
            phi = phi + im.data
    return PenaltyMap(
        phi=ScalarVolume(gt.shape, phi),
        outer=outer,
        inner=tuple(inner),
        num_classes=gt.num_classes,
        absent_classes=frozenset(absent),
    )
