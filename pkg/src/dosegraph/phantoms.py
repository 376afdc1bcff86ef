"""Synthetic phantom cases with a known closed-form dose law.

Each phantom places an ellipsoidal PTV and a seeded subset of box/ellipsoid
OARs inside a solid body box, paints every structure into the image tensor
at its intensity band (see conversion.intensity_band), and fills the dose
tensor from

    dose(v) = prescription * exp(-manhattan(center(v), ptv_centroid) / tau)

for dose voxels whose center lies inside the body's physical extent, 0
outside. The centroid is the rasterized PTV mask centroid, so the law can be
re-checked from the saved bundle alone. In boost mode the prescription text
carries the token BOOST_PTV and doses of dose voxels whose center falls in a
PTV-masked image voxel are scaled by 1.1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundles import NUM_STRUCTURES, PTV_SLOT, BundleError, CaseBundle, GridGeometry
from .conversion import intensity_band

BOOST_TOKEN = "BOOST_PTV"
IMAGE_NOISE_SD = 5.0
IMAGE_NOISE_CLIP = 30.0  # keeps painted voxels inside their intensity band


@dataclass(frozen=True)
class PhantomConfig:
    image_shape: tuple[int, int, int] = (16, 16, 8)
    dose_shape: tuple[int, int, int] = (8, 8, 4)
    image_resolution: float = 2.0
    dose_resolution: float = 4.0
    tau: float = 12.0  # dose decay length, mm
    noise_sd: float = 0.0  # dose noise, Gy
    instruction_mode: str = "none"  # none | boost
    seed: int = 0
    prescription_dose: float = 60.0
    num_oars: int = 8  # placement attempts beyond body; misses stay all-zero
    grid_stagger: bool = True  # integer-mm offset between image and dose grids

    def __post_init__(self):
        if any(n < 1 for n in self.image_shape) or any(n < 1 for n in self.dose_shape):
            raise BundleError("phantom shapes must be positive")
        if not self.tau > 0:
            raise BundleError(f"tau must be > 0, got {self.tau}")
        if self.noise_sd < 0:
            raise BundleError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if self.instruction_mode not in ("none", "boost"):
            raise BundleError(f"unknown instruction_mode {self.instruction_mode!r}")


def _voxel_centers(geom: GridGeometry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    nx, ny = geom.slice_shape
    ox, oy = geom.origin_xy
    r = geom.slice_resolution
    cx = ox + r * (np.arange(nx) + 0.5)
    cy = oy + r * (np.arange(ny) + 0.5)
    z = np.asarray(geom.slice_z)
    cz = (z[:-1] + z[1:]) / 2.0
    return cx, cy, cz


def _ellipsoid_mask(geom: GridGeometry, center, semi) -> np.ndarray:
    cx, cy, cz = _voxel_centers(geom)
    dx = (cx - center[0])[:, None, None] / semi[0]
    dy = (cy - center[1])[None, :, None] / semi[1]
    dz = (cz - center[2])[None, None, :] / semi[2]
    return dx * dx + dy * dy + dz * dz <= 1.0


def _box_mask(geom: GridGeometry, center, half) -> np.ndarray:
    cx, cy, cz = _voxel_centers(geom)
    inx = np.abs(cx - center[0])[:, None, None] <= half[0]
    iny = np.abs(cy - center[1])[None, :, None] <= half[1]
    inz = np.abs(cz - center[2])[None, None, :] <= half[2]
    return inx & iny & inz


def ptv_boost_region(case: CaseBundle) -> np.ndarray:
    """Dose voxels whose center lies in a PTV-masked image voxel.

    The containing image voxel is found by floor indexing (clamped at the
    grid edge); centers exactly on a grid line belong to the upper voxel.
    """
    geom = case.image_geom
    cx, cy, cz = _voxel_centers(case.dose_geom)
    r = geom.slice_resolution
    ix = np.clip(np.floor((cx - geom.origin_xy[0]) / r).astype(int), 0, geom.slice_shape[0] - 1)
    iy = np.clip(np.floor((cy - geom.origin_xy[1]) / r).astype(int), 0, geom.slice_shape[1] - 1)
    z_edges = np.asarray(geom.slice_z)
    iz = np.clip(np.searchsorted(z_edges, cz, side="right") - 1, 0, geom.slices - 1)
    ptv = case.structure_masks[PTV_SLOT]
    return ptv[np.ix_(ix, iy, iz)]


def body_extent(case: CaseBundle) -> tuple[np.ndarray, np.ndarray]:
    """Physical bounding box (lo, hi) of the body mask's voxel union."""
    body = case.structure_masks[0]
    if not body.any():
        raise BundleError("phantom has no body mask")
    idx = np.nonzero(body)
    geom = case.image_geom
    r = geom.slice_resolution
    ox, oy = geom.origin_xy
    z = np.asarray(geom.slice_z)
    lo = np.array([ox + r * idx[0].min(), oy + r * idx[1].min(), z[idx[2].min()]])
    hi = np.array([ox + r * (idx[0].max() + 1), oy + r * (idx[1].max() + 1), z[idx[2].max() + 1]])
    return lo, hi


def phantom_dose_field(case: CaseBundle, tau: float) -> np.ndarray:
    """Noiseless, unboosted closed-form dose for a phantom bundle (float64)."""
    masks = case.structure_masks
    pts = np.argwhere(masks[PTV_SLOT]).astype(np.float64)
    geom = case.image_geom
    r = geom.slice_resolution
    z = np.asarray(geom.slice_z)
    centers = np.stack(
        [
            geom.origin_xy[0] + r * (pts[:, 0] + 0.5),
            geom.origin_xy[1] + r * (pts[:, 1] + 0.5),
            (z[pts[:, 2].astype(int)] + z[pts[:, 2].astype(int) + 1]) / 2.0,
        ],
        axis=1,
    )
    centroid = centers.mean(axis=0)
    cx, cy, cz = _voxel_centers(case.dose_geom)
    dist = (
        np.abs(cx - centroid[0])[:, None, None]
        + np.abs(cy - centroid[1])[None, :, None]
        + np.abs(cz - centroid[2])[None, None, :]
    )
    dose = case.prescription_dose * np.exp(-dist / tau)
    lo, hi = body_extent(case)
    inside = (
        (cx >= lo[0])[:, None, None] & (cx <= hi[0])[:, None, None]
        & (cy >= lo[1])[None, :, None] & (cy <= hi[1])[None, :, None]
        & (cz >= lo[2])[None, None, :] & (cz <= hi[2])[None, None, :]
    )
    dose[~inside] = 0.0
    return dose


def generate_phantom(config: PhantomConfig) -> CaseBundle:
    """Deterministic synthetic case for the given config."""
    for shape in (config.image_shape, config.dose_shape):
        if any(n < 4 for n in shape):
            raise BundleError(f"shape {shape} too small to fit a PTV (< 4 voxels per axis)")
    rng = np.random.default_rng(np.random.SeedSequence([0x0D05E, config.seed]))
    nxi, nyi, nzi = config.image_shape
    ri, rd = float(config.image_resolution), float(config.dose_resolution)
    image_geom = GridGeometry((0.0, 0.0), ri, tuple(ri * k for k in range(nzi + 1)), (nxi, nyi))

    if config.grid_stagger:
        off = rng.integers(-2, 3, size=3)
    else:
        off = np.zeros(3, dtype=int)
    nxd, nyd, nzd = config.dose_shape
    dose_geom = GridGeometry(
        (float(off[0]), float(off[1])),
        rd,
        tuple(float(off[2]) + rd * k for k in range(nzd + 1)),
        (nxd, nyd),
    )

    # Solid body box, inset one voxel from every image-grid face.
    masks = np.zeros((NUM_STRUCTURES,) + config.image_shape, dtype=bool)
    masks[0][1 : nxi - 1, 1 : nyi - 1, 1 : nzi - 1] = True
    body_lo = np.array([ri, ri, ri])
    body_hi = np.array([ri * (nxi - 1), ri * (nyi - 1), ri * (nzi - 1)])

    # PTV: ellipsoid centered on the dose-voxel center nearest a seeded point
    # in the middle of the body, so the mask centroid lands on a dose center.
    dcx, dcy, dcz = _voxel_centers(dose_geom)
    target = (body_lo + body_hi) / 2.0 + rng.uniform(-0.15, 0.15, size=3) * (body_hi - body_lo)
    center = np.array(
        [dcx[np.abs(dcx - target[0]).argmin()],
         dcy[np.abs(dcy - target[1]).argmin()],
         dcz[np.abs(dcz - target[2]).argmin()]]
    )
    semi = rng.uniform(1.5, 2.5, size=3) * ri
    # Clamp to the distance to each body face so the ellipsoid is never
    # clipped by the body mask (keeps the rasterization symmetric about
    # `center` when the center sits on the image lattice's symmetry points).
    semi = np.minimum(semi, np.minimum(center - body_lo, body_hi - center) - 1e-9)
    masks[PTV_SLOT] = _ellipsoid_mask(image_geom, center, semi) & masks[0]
    if not masks[PTV_SLOT].any():
        raise BundleError("phantom too small: PTV rasterized to an empty mask")

    # OARs: disjoint boxes/ellipsoids inside the body; skipped slots stay zero.
    slots = rng.permutation(np.arange(1, NUM_STRUCTURES - 1))[: config.num_oars]
    occupied = masks[PTV_SLOT].copy()
    for slot in slots:
        for _ in range(20):
            c = rng.uniform(body_lo + ri, body_hi - ri)
            extent = rng.uniform(1.0, 2.5, size=3) * ri
            shape_kind = rng.integers(0, 2)
            m = (_box_mask if shape_kind else _ellipsoid_mask)(image_geom, c, extent)
            m &= masks[0]
            if m.any() and not (m & occupied).any():
                masks[slot] = m
                occupied |= m
                break

    # Image: each structure painted at its band midpoint, clipped noise on top.
    image = np.zeros(config.image_shape, dtype=np.float64)
    for slot in range(NUM_STRUCTURES):
        if masks[slot].any():
            lo_band, hi_band = intensity_band(slot)
            paint = (lo_band + hi_band) / 2.0
            if slot == 0:
                image[masks[0]] = paint
            else:
                image[masks[slot]] = paint
    noise = np.clip(rng.normal(0.0, IMAGE_NOISE_SD, size=config.image_shape), -IMAGE_NOISE_CLIP, IMAGE_NOISE_CLIP)
    image = (image + noise).astype(np.float32)

    prescription_text = BOOST_TOKEN if config.instruction_mode == "boost" else ""
    case = CaseBundle(
        case_id=f"phantom-{config.seed:05d}",
        image=image,
        image_geom=image_geom,
        dose=np.zeros(config.dose_shape, dtype=np.float32),
        dose_geom=dose_geom,
        structure_masks=masks,
        prescription_dose=config.prescription_dose,
        prescription_text=prescription_text,
    )

    dose = phantom_dose_field(case, config.tau).astype(np.float32)
    if config.instruction_mode == "boost":
        region = ptv_boost_region(case)
        dose[region] = (dose[region].astype(np.float64) * 1.1).astype(np.float32)
    dose_noise = rng.normal(0.0, 1.0, size=config.dose_shape)  # drawn in both modes
    if config.noise_sd > 0:
        dose = np.maximum(dose.astype(np.float64) + config.noise_sd * dose_noise, 0.0).astype(np.float32)
    return CaseBundle(
        case_id=case.case_id,
        image=image,
        image_geom=image_geom,
        dose=dose,
        dose_geom=dose_geom,
        structure_masks=masks,
        prescription_dose=config.prescription_dose,
        prescription_text=prescription_text,
    )


def generate_phantom_set(n: int, seed: int, boost_fraction: float = 0.0, **overrides) -> list[CaseBundle]:
    """n phantoms with per-case seeds seed..seed+n-1; the first
    round(boost_fraction*n) cases use boost mode."""
    n_boost = int(round(boost_fraction * n))
    cases = []
    for i in range(n):
        mode = "boost" if i < n_boost else "none"
        cfg = PhantomConfig(seed=seed + i, instruction_mode=mode, **overrides)
        cases.append(generate_phantom(cfg))
    return cases
