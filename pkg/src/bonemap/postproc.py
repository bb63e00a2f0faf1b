"""Mask cleanup: radius-1 morphological closing, then largest-component extraction.

Out-of-bounds voxels count as background for both dilation and erosion, so
dilation gains nothing from the faces and erosion shrinks there.  Component
labeling is two-pass union-find; components are ordered by descending size
with ties broken by the smallest linear voxel index, so results are
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import LabelVolume

__all__ = [
    "StructuringElement",
    "dilate",
    "erode",
    "closing",
    "ComponentLabeling",
    "connected_components",
    "postprocess",
]


@dataclass(frozen=True)
class StructuringElement:
    """Radius-1 neighborhood: 6 face neighbors or the full 26-neighborhood."""

    kind: int = 26

    def __post_init__(self):
        if self.kind not in (6, 26):
            raise ValueError(f"structuring element kind must be 6 or 26, got {self.kind}")

    def offsets(self) -> list[tuple[int, int, int]]:
        if self.kind == 6:
            return [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
        return [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def _connectivity_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    se = StructuringElement(connectivity)
    return [o for o in se.offsets() if o != (0, 0, 0)]


def _shifted(mask: np.ndarray, off: tuple[int, int, int], fill: bool) -> np.ndarray:
    """mask sampled at voxel + off, with out-of-bounds reading as ``fill``."""
    out = np.full(mask.shape, fill, dtype=bool)
    src, dst = [], []
    for n, o in zip(mask.shape, off):
        lo, hi = max(0, -o), n - max(0, o)
        if lo >= hi:
            return out
        dst.append(slice(lo, hi))
        src.append(slice(lo + o, hi + o))
    out[tuple(dst)] = mask[tuple(src)]
    return out


def _as_binary(mask: LabelVolume) -> np.ndarray:
    if mask.num_classes != 2:
        raise ValueError(f"expected a binary mask, got K={mask.num_classes}")
    return mask.labels != 0


def dilate(mask: LabelVolume, se: StructuringElement = StructuringElement()) -> LabelVolume:
    fg = _as_binary(mask)
    out = np.zeros_like(fg)
    for off in se.offsets():
        out |= _shifted(fg, off, False)
    return LabelVolume(mask.shape, out.astype(np.uint8), 2)


def erode(mask: LabelVolume, se: StructuringElement = StructuringElement()) -> LabelVolume:
    fg = _as_binary(mask)
    out = np.ones_like(fg)
    for off in se.offsets():
        out &= _shifted(fg, off, False)
    return LabelVolume(mask.shape, out.astype(np.uint8), 2)


def closing(mask: LabelVolume, se: StructuringElement = StructuringElement()) -> LabelVolume:
    return erode(dilate(mask, se), se)


@dataclass(frozen=True)
class ComponentLabeling:
    """Component ids 1..n on foreground (0 background), largest component first."""

    labels: np.ndarray        # int32, [z, y, x]
    sizes: tuple[int, ...]    # sizes[i] is the size of component i + 1
    seeds: tuple[int, ...]    # smallest linear voxel index per component

    @property
    def count(self) -> int:
        return len(self.sizes)


def connected_components(mask: LabelVolume, connectivity: int = 26) -> ComponentLabeling:
    fg = _as_binary(mask)
    nz, ny, nx = fg.shape
    # raster-order predecessors only: each voxel unions with neighbors
    # already visited in the first pass
    preds = [
        (dz, dy, dx)
        for (dz, dy, dx) in _connectivity_offsets(connectivity)
        if dz < 0 or (dz == 0 and (dy < 0 or (dy == 0 and dx < 0)))
    ]
    grid = np.zeros((nz + 2, ny + 2, nx + 2), dtype=np.int64)
    parent: list[int] = [0]

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    voxels = np.argwhere(fg)
    for z, y, x in voxels:
        best = 0
        labels = []
        for dz, dy, dx in preds:
            lab = grid[z + 1 + dz, y + 1 + dy, x + 1 + dx]
            if lab:
                labels.append(int(lab))
        if labels:
            roots = sorted({find(a) for a in labels})
            best = roots[0]
            for r in roots[1:]:
                parent[r] = best
        else:
            best = len(parent)
            parent.append(best)
        grid[z + 1, y + 1, x + 1] = best

    sizes: dict[int, int] = {}
    seeds: dict[int, int] = {}
    roots_of = {}
    out = np.zeros(fg.shape, dtype=np.int32)
    for z, y, x in voxels:
        root = find(int(grid[z + 1, y + 1, x + 1]))
        roots_of[(z, y, x)] = root
        lin = int(x) + nx * (int(y) + ny * int(z))
        sizes[root] = sizes.get(root, 0) + 1
        if root not in seeds:
            seeds[root] = lin  # raster order makes this the minimum
    order = sorted(sizes, key=lambda r: (-sizes[r], seeds[r]))
    rank = {r: i + 1 for i, r in enumerate(order)}
    for (z, y, x), root in roots_of.items():
        out[z, y, x] = rank[root]
    return ComponentLabeling(
        labels=out,
        sizes=tuple(sizes[r] for r in order),
        seeds=tuple(seeds[r] for r in order),
    )


def postprocess(
    pred: LabelVolume,
    se: StructuringElement = StructuringElement(),
    connectivity: int = 26,
) -> LabelVolume:
    """Per foreground class: close, then keep only the largest component.

    Voxels the closing adds join the class only where the input was
    background and no earlier class claimed them; a voxel never switches
    between foreground classes.  The largest component is taken after those
    constraints, so each surviving class is a single component.  Dropped
    voxels become background.
    """
    out = np.zeros(pred.shape.zyx, dtype=np.uint8)
    for c in range(1, pred.num_classes):
        cm = pred.labels == c
        if not cm.any():
            continue
        closed = closing(LabelVolume(pred.shape, cm.astype(np.uint8), 2), se)
        candidate = (closed.labels != 0) & ((pred.labels == 0) | cm) & (out == 0)
        if not candidate.any():
            continue
        comps = connected_components(
            LabelVolume(pred.shape, candidate.astype(np.uint8), 2), connectivity
        )
        out[comps.labels == 1] = c
    return LabelVolume(pred.shape, out, pred.num_classes)
