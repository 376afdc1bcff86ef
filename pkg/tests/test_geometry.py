"""Voxel geometry: box construction, overlap volume/ratio, equivariance."""

from __future__ import annotations

import numpy as np
import pytest

from dosegraph.bundles import BundleError, GridGeometry
from dosegraph.geometry import Box3, Point3, entry_to_box, overlap_ratio, overlap_volume, voxel_center


def geom(origin=(0.0, 0.0), r=2.0, slice_z=(0.0, 1.0), shape=(2, 2)):
    return GridGeometry(origin, r, slice_z, shape)


def box(xmin, xmax, ymin, ymax, zmin, zmax):
    return Box3(Point3(xmin, ymin, zmin), Point3(xmax, ymax, zmax))


def test_entry_to_box_first_entry():
    b = entry_to_box(geom(), (1, 1, 1))
    assert b.min == Point3(0.0, 0.0, 0.0)
    assert b.max == Point3(2.0, 2.0, 1.0)


def test_entry_to_box_second_column():
    b = entry_to_box(geom(), (2, 1, 1))
    assert b.min == Point3(2.0, 0.0, 0.0)
    assert b.max == Point3(4.0, 2.0, 1.0)


def test_entry_to_box_shifted_origin():
    b = entry_to_box(geom(origin=(5.0, 5.0)), (1, 1, 1))
    assert b.min == Point3(5.0, 5.0, 0.0)
    assert b.max == Point3(7.0, 7.0, 1.0)


def test_entry_to_box_out_of_range():
    for bad in [(0, 1, 1), (3, 1, 1), (1, 3, 1), (1, 1, 2)]:
        with pytest.raises(IndexError):
            entry_to_box(geom(), bad)


def test_entry_to_box_uses_slice_boundaries():
    g = geom(slice_z=(0.0, 1.0, 4.0))
    assert entry_to_box(g, (1, 1, 2)).min.z == 1.0
    assert entry_to_box(g, (1, 1, 2)).max.z == 4.0


def test_voxel_center_cube():
    assert voxel_center(box(0, 2, 0, 2, 0, 2)) == Point3(1.0, 1.0, 1.0)


def test_voxel_center_flat_box():
    assert voxel_center(box(5, 7, 5, 7, 0, 1)) == Point3(6.0, 6.0, 0.5)


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        box(0, 0, 0, 1, 0, 1)


def test_non_finite_point_rejected():
    with pytest.raises(ValueError):
        Point3(0.0, float("nan"), 0.0)


def test_overlap_volume_hand_case():
    a = box(0, 2, 0, 2, 0, 2)
    b = box(1, 3, 0, 2, 0, 2)
    assert overlap_volume(a, b) == 4.0


def test_overlap_volume_disjoint():
    assert overlap_volume(box(0, 1, 0, 1, 0, 1), box(2, 3, 0, 1, 0, 1)) == 0.0


def test_overlap_volume_touching_is_zero():
    assert overlap_volume(box(0, 1, 0, 1, 0, 1), box(1, 2, 0, 1, 0, 1)) == 0.0


def test_overlap_volume_self():
    a = box(0, 3, 0, 2, 0, 5)
    assert overlap_volume(a, a) == 30.0


def test_overlap_ratio_half():
    a = box(0, 2, 0, 2, 0, 2)
    b = box(1, 3, 0, 2, 0, 2)
    assert overlap_ratio(a, b) == 0.5


def test_overlap_ratio_containment():
    small = box(1, 2, 1, 2, 1, 2)
    large = box(0, 10, 0, 10, 0, 10)
    assert overlap_ratio(small, large) == 1.0


def test_overlap_ratio_disjoint():
    assert overlap_ratio(box(0, 1, 0, 1, 0, 1), box(5, 6, 0, 1, 0, 1)) == 0.0


def test_symmetry_and_bounds():
    rng = np.random.default_rng(7)
    for _ in range(50):
        lo = rng.uniform(-10, 10, size=(2, 3))
        ext = rng.uniform(0.1, 8.0, size=(2, 3))
        a = Box3(Point3(*lo[0]), Point3(*(lo[0] + ext[0])))
        b = Box3(Point3(*lo[1]), Point3(*(lo[1] + ext[1])))
        assert overlap_volume(a, b) == overlap_volume(b, a)
        assert overlap_ratio(a, b) == overlap_ratio(b, a)
        assert 0.0 <= overlap_ratio(a, b) <= 1.0


def test_shrinking_never_increases_overlap():
    rng = np.random.default_rng(8)
    for _ in range(30):
        lo = rng.uniform(-5, 5, size=(2, 3))
        ext = rng.uniform(1.0, 6.0, size=(2, 3))
        a = Box3(Point3(*lo[0]), Point3(*(lo[0] + ext[0])))
        b = Box3(Point3(*lo[1]), Point3(*(lo[1] + ext[1])))
        shrunk = Box3(Point3(*(lo[0] + 0.25 * ext[0])), Point3(*(lo[0] + 0.75 * ext[0])))
        assert overlap_volume(shrunk, b) <= overlap_volume(a, b)


def test_translation_equivariance_bit_exact():
    base = geom(origin=(3.0, -2.0), r=2.0, slice_z=(0.0, 2.0, 5.0), shape=(3, 3))
    other = geom(origin=(2.0, -1.0), r=3.0, slice_z=(1.0, 4.0), shape=(2, 2))
    offset = (17.0, -9.0, 23.0)
    for index_a in [(1, 1, 1), (3, 2, 2)]:
        for index_b in [(1, 1, 1), (2, 2, 1)]:
            a = entry_to_box(base, index_a)
            b = entry_to_box(other, index_b)
            at = entry_to_box(base.translated(*offset), index_a)
            bt = entry_to_box(other.translated(*offset), index_b)
            assert (at.min.x, at.min.y, at.min.z) == (a.min.x + 17.0, a.min.y - 9.0, a.min.z + 23.0)
            assert (at.max.x, at.max.y, at.max.z) == (a.max.x + 17.0, a.max.y - 9.0, a.max.z + 23.0)
            assert overlap_volume(at, bt) == overlap_volume(a, b)
            assert overlap_ratio(at, bt) == overlap_ratio(a, b)


def test_grid_geometry_validation():
    with pytest.raises(BundleError, match="strictly increasing"):
        geom(slice_z=(0.0, 0.0, 1.0))
    with pytest.raises(BundleError, match="slice_resolution"):
        geom(r=0.0)
    with pytest.raises(BundleError, match="boundaries"):
        geom(slice_z=(0.0,))
