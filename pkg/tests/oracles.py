"""Independent reference implementations the fast paths are checked against.

Everything here is deliberately written as plain loops over scalar geometry
or textbook formulas: slow, but obvious enough to trust by inspection.
"""

from __future__ import annotations

import numpy as np

from dosegraph.bundles import NUM_STRUCTURES, CaseBundle, GridGeometry
from dosegraph.geometry import entry_to_box, overlap_ratio, overlap_volume


def grid_boxes(geom: GridGeometry) -> list:
    """Every voxel box of a grid, in lexicographic (x, y, z) order."""
    nx, ny, nz = geom.shape
    boxes = []
    for x in range(1, nx + 1):
        for y in range(1, ny + 1):
            for z in range(1, nz + 1):
                boxes.append(entry_to_box(geom, (x, y, z)))
    return boxes


def all_pairs_edges(image_geom: GridGeometry, dose_geom: GridGeometry, threshold: float) -> np.ndarray:
    """Image-dose edges by checking every (dose voxel, image voxel) pair.

    Returns (E, 2) rows of (dose lex index, image lex index), in the same
    (dose, image) sort order the graph builder promises.
    """
    image_boxes = grid_boxes(image_geom)
    dose_boxes = grid_boxes(dose_geom)
    edges = []
    for d_index, dose_box in enumerate(dose_boxes):
        for i_index, image_box in enumerate(image_boxes):
            if overlap_ratio(dose_box, image_box) > threshold:
                edges.append((d_index, i_index))
    if not edges:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(edges, dtype=np.int64)


def structure_weights(mask: np.ndarray, image_geom: GridGeometry, dose_geom: GridGeometry) -> np.ndarray:
    """Per-dose-voxel overlap volume with a structure, by explicit pairs.

    Contributions are collected in lexicographic mask order and summed with
    np.sum, the same accumulation the production path uses.
    """
    image_boxes = grid_boxes(image_geom)
    mask_flat = np.asarray(mask, dtype=bool).ravel()
    mask_boxes = [box for box, inside in zip(image_boxes, mask_flat) if inside]
    weights = []
    for dose_box in grid_boxes(dose_geom):
        vols = np.array([overlap_volume(dose_box, b) for b in mask_boxes], dtype=np.float64)
        weights.append(vols.sum() if vols.size else 0.0)
    return np.asarray(weights, dtype=np.float64)


def covering_structure(masks: np.ndarray, image_geom: GridGeometry, dose_geom: GridGeometry) -> np.ndarray:
    """Per-dose-voxel argmax structure slot (-1 when nothing overlaps)."""
    totals = np.stack([structure_weights(masks[s], image_geom, dose_geom) for s in range(NUM_STRUCTURES)])
    out = np.full(totals.shape[1], -1, dtype=np.int64)
    for v in range(totals.shape[1]):
        if totals[:, v].max() > 0.0:
            out[v] = int(np.argmax(totals[:, v]))
    return out


def context_features(features: np.ndarray, image_geom: GridGeometry, dose_geom: GridGeometry) -> np.ndarray:
    """Mean image-voxel feature row over voxels overlapping each dose voxel."""
    channels = features.shape[0]
    image_boxes = grid_boxes(image_geom)
    rows = features.reshape(channels, -1).T
    out = []
    for dose_box in grid_boxes(dose_geom):
        hit = [i for i, b in enumerate(image_boxes) if overlap_volume(dose_box, b) > 0.0]
        if hit:
            out.append(rows[hit].sum(axis=0) / len(hit))
        else:
            out.append(np.zeros(channels))
    return np.asarray(out, dtype=np.float64)


def cdvh_sort_and_scan(values: np.ndarray, weights: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Cumulative curve by sorting doses and scanning suffix weight sums."""
    order = np.argsort(values, kind="stable")
    v = np.asarray(values, dtype=np.float64)[order]
    w = np.asarray(weights, dtype=np.float64)[order]
    total = w.sum()
    suffix = np.concatenate([np.cumsum(w[::-1])[::-1], [0.0]])
    out = []
    for edge in edges:
        first = np.searchsorted(v, edge, side="left")
        out.append(suffix[first] / total)
    return np.asarray(out, dtype=np.float64)


def least_squares_fit(x: np.ndarray, y: np.ndarray) -> float:
    """Best achievable MSE of an affine model on (x, y)."""
    design = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = design @ coef - y
    return float(np.mean(residual**2))


def random_case(rng: np.random.Generator, max_image: int = 12, max_dose: int = 6, tag: str = "case") -> CaseBundle:
    """Random small case: random shapes, origins, resolutions, masks, dose.

    Image slices get non-uniform thickness to exercise the variable-z path.
    """
    image_shape = tuple(int(n) for n in rng.integers(2, max_image + 1, size=3))
    dose_shape = tuple(int(n) for n in rng.integers(1, max_dose + 1, size=3))

    def geometry(shape):
        origin = tuple(float(v) for v in rng.uniform(-60.0, 60.0, size=2))
        res = float(rng.uniform(0.6, 4.0))
        z0 = float(rng.uniform(-60.0, 60.0))
        steps = rng.uniform(0.5, 3.5, size=shape[2])
        slice_z = tuple(float(z) for z in (z0 + np.concatenate([[0.0], np.cumsum(steps)])))
        return GridGeometry(origin_xy=origin, slice_resolution=res, slice_z=slice_z, slice_shape=shape[:2])

    image_geom = geometry(image_shape)
    dose_geom = geometry(dose_shape)
    masks = rng.random((NUM_STRUCTURES, *image_shape)) < 0.25
    ptv = np.zeros(image_shape, dtype=bool)
    n_ptv = int(rng.integers(1, max(2, image_shape[0] * image_shape[1] // 3)))
    idx = rng.choice(np.prod(image_shape), size=min(n_ptv, int(np.prod(image_shape))), replace=False)
    ptv.ravel()[idx] = True
    masks[-1] = ptv
    image = rng.uniform(0.0, 1500.0, size=image_shape).astype(np.float32)
    dose = rng.uniform(0.0, 80.0, size=dose_shape).astype(np.float32)
    return CaseBundle(
        case_id=f"{tag}-{rng.integers(0, 10**9)}",
        image=image,
        image_geom=image_geom,
        dose=dose,
        dose_geom=dose_geom,
        structure_masks=masks,
        prescription_dose=float(rng.uniform(20.0, 80.0)),
        prescription_text="",
    )
