"""Physical voxel geometry: tensor entries as axis-aligned boxes, box overlaps.

All coordinates are physical mm in double precision, whatever the tensor
payload precision. Boxes are closed; boundary contact counts as zero overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite point ({self.x}, {self.y}, {self.z})")


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box, min strictly below max on every axis."""

    min: Point3
    max: Point3

    def __post_init__(self):
        if not (self.min.x < self.max.x and self.min.y < self.max.y and self.min.z < self.max.z):
            raise ValueError(f"degenerate box: min {self.min} not strictly below max {self.max}")

    def volume(self) -> float:
        return (self.max.x - self.min.x) * (self.max.y - self.min.y) * (self.max.z - self.min.z)


def entry_to_box(geom, index: tuple[int, int, int]) -> Box3:
    """Physical box of tensor entry `index` (one-based (x, y, z)).

    x spans [origin_x + (x-1)*r, origin_x + x*r], y likewise, and z spans
    the slice boundaries [slice_z[z-1], slice_z[z]].
    """
    x, y, z = index
    nx, ny = geom.slice_shape
    nz = geom.slices
    if not (1 <= x <= nx and 1 <= y <= ny and 1 <= z <= nz):
        raise IndexError(f"entry {index} out of range for grid {nx}x{ny}x{nz}")
    ox, oy = geom.origin_xy
    r = geom.slice_resolution
    return Box3(
        Point3(ox + (x - 1) * r, oy + (y - 1) * r, geom.slice_z[z - 1]),
        Point3(ox + x * r, oy + y * r, geom.slice_z[z]),
    )


def voxel_center(box: Box3) -> Point3:
    """Componentwise midpoint of a box."""
    return Point3(
        (box.min.x + box.max.x) / 2.0,
        (box.min.y + box.max.y) / 2.0,
        (box.min.z + box.max.z) / 2.0,
    )


def overlap_volume(a: Box3, b: Box3) -> float:
    """Volume of the intersection, 0 if disjoint (or boundary-touching)."""
    dx = min(a.max.x, b.max.x) - max(a.min.x, b.min.x)
    dy = min(a.max.y, b.max.y) - max(a.min.y, b.min.y)
    dz = min(a.max.z, b.max.z) - max(a.min.z, b.min.z)
    if dx <= 0.0 or dy <= 0.0 or dz <= 0.0:
        return 0.0
    return dx * dy * dz


def overlap_ratio(a: Box3, b: Box3) -> float:
    """Intersection volume over the smaller box's volume; in [0, 1]."""
    return overlap_volume(a, b) / min(a.volume(), b.volume())


# --- vectorized grid helpers -------------------------------------------------
# Arrays of per-entry bounds for a whole grid; used by the accelerated graph
# builder and structure mapping. The scalar ops above stay the reference path.


def grid_bounds(geom) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-axis boundary arrays (x_edges, y_edges, z_edges) for a grid.

    x_edges has slice_shape[0]+1 entries, entry i covers [x_edges[i], x_edges[i+1]].
    """
    nx, ny = geom.slice_shape
    ox, oy = geom.origin_xy
    r = geom.slice_resolution
    x_edges = ox + r * np.arange(nx + 1, dtype=np.float64)
    y_edges = oy + r * np.arange(ny + 1, dtype=np.float64)
    z_edges = np.asarray(geom.slice_z, dtype=np.float64)
    return x_edges, y_edges, z_edges


def axis_overlaps(cell_lo: float, cell_hi: float, edges: np.ndarray) -> tuple[int, int, np.ndarray]:
    """Overlap lengths of [cell_lo, cell_hi] against consecutive-edge intervals.

    Returns (first_index, last_index_exclusive, lengths) covering every
    interval with strictly positive overlap; empty range if none.
    """
    lo = int(np.searchsorted(edges, cell_lo, side="right")) - 1
    hi = int(np.searchsorted(edges, cell_hi, side="left"))
    lo = max(lo, 0)
    hi = min(hi, len(edges) - 1)
    if lo >= hi:
        return 0, 0, np.empty(0, dtype=np.float64)
    lengths = np.minimum(edges[lo + 1 : hi + 1], cell_hi) - np.maximum(edges[lo:hi], cell_lo)
    keep = lengths > 0.0
    if not keep.all():
        idx = np.nonzero(keep)[0]
        if idx.size == 0:
            return 0, 0, np.empty(0, dtype=np.float64)
        lo2, hi2 = lo + int(idx[0]), lo + int(idx[-1]) + 1
        return lo2, hi2, lengths[idx[0] : idx[-1] + 1]
    return lo, hi, lengths
