"""Structure segmentation and per-pixel geometric feature extraction.

Converts a case into the 18-channel feature tensor consumed by the graph
builder: 15 structure indicator channels, Manhattan distance to the PTV
centroid (mm), and two angle channels (azimuth, elevation, radians).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .bundles import NUM_STRUCTURES, PTV_SLOT, CaseBundle, GridGeometry
from .geometry import Point3

NUM_CHANNELS = NUM_STRUCTURES + 3
BODY_INTENSITY_THRESHOLD = 50.0
# 4-connectivity within a slice; slices never merge.
_SLICE_CONNECTIVITY = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class ConversionError(ValueError):
    pass


def intensity_band(slot: int) -> tuple[float, float]:
    """Half-open intensity interval [lo, hi) labelling structure `slot`.

    Slot k is painted around (k+1)*100, so bands are disjoint and everything
    painted sits at or above the body threshold.
    """
    if not 0 <= slot < NUM_STRUCTURES:
        raise ConversionError(f"structure slot {slot} out of range")
    mid = (slot + 1) * 100.0
    return mid - 50.0, mid + 50.0


@dataclass(frozen=True)
class StructureMasks:
    """Per-structure binary masks on the image grid, 15 slots."""

    masks: np.ndarray  # bool, (15, nx, ny, nz)
    provenance: str  # provided | derived

    def __post_init__(self):
        m = np.asarray(self.masks)
        if m.ndim != 4 or m.shape[0] != NUM_STRUCTURES or m.dtype != np.bool_:
            raise ConversionError(f"masks must be bool (15, nx, ny, nz), got {m.dtype} {m.shape}")
        if not m[PTV_SLOT].any():
            raise ConversionError("PTV mask is empty")
        if self.provenance not in ("provided", "derived"):
            raise ConversionError(f"unknown provenance {self.provenance!r}")
        m.flags.writeable = False
        object.__setattr__(self, "masks", m)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.masks.shape[1:]


def _largest_component_per_slice(mask: np.ndarray) -> np.ndarray:
    out = np.zeros_like(mask)
    for z in range(mask.shape[2]):
        labels, count = ndimage.label(mask[:, :, z], structure=_SLICE_CONNECTIVITY)
        if count == 0:
            continue
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
        out[:, :, z] = labels == (int(np.argmax(sizes)) + 1)
    return out


def segment_structures(case: CaseBundle) -> StructureMasks:
    """Structure masks for a case, provided or derived.

    A bundle whose OAR slots carry any voxels passes through unchanged.
    Otherwise OAR masks are derived from the image by intensity-band
    thresholding followed by largest-connected-component selection per slice.
    The PTV mask is always the bundle's.
    """
    if case.structure_masks[:PTV_SLOT].any():
        return StructureMasks(case.structure_masks.copy(), "provided")
    image = case.image.astype(np.float64)
    if not (image >= BODY_INTENSITY_THRESHOLD).any():
        raise ConversionError("neither structure masks nor intensity labels available")
    masks = np.zeros_like(case.structure_masks)
    masks[0] = _largest_component_per_slice(image >= BODY_INTENSITY_THRESHOLD)
    for slot in range(1, PTV_SLOT):
        lo, hi = intensity_band(slot)
        masks[slot] = _largest_component_per_slice((image >= lo) & (image < hi))
    masks[PTV_SLOT] = case.structure_masks[PTV_SLOT]
    return StructureMasks(masks, "derived")


def _fractional_centroid_index(ptv: np.ndarray) -> np.ndarray:
    return np.argwhere(ptv).astype(np.float64).mean(axis=0)


def _slice_mid_offsets(geom: GridGeometry) -> np.ndarray:
    """Slice-center z offsets from the first z boundary, in mm.

    Built from boundary differences rather than absolute coordinates, so a
    common integer-mm translation of the geometry leaves them bit-identical.
    """
    z = np.asarray(geom.slice_z)
    return ((z[:-1] - z[0]) + (z[1:] - z[0])) / 2.0


def ptv_centroid(masks: StructureMasks, geom: GridGeometry) -> Point3:
    """Unweighted mean of the PTV voxel centers."""
    ptv = masks.masks[PTV_SLOT]
    if ptv.shape != (geom.slice_shape[0], geom.slice_shape[1], geom.slices):
        raise ConversionError(f"mask shape {ptv.shape} does not match geometry")
    mi = _fractional_centroid_index(ptv)
    zrel = _slice_mid_offsets(geom)
    idx_z = np.argwhere(ptv)[:, 2]
    return Point3(
        geom.origin_xy[0] + geom.slice_resolution * (mi[0] + 0.5),
        geom.origin_xy[1] + geom.slice_resolution * (mi[1] + 0.5),
        geom.slice_z[0] + zrel[idx_z].mean(),
    )


@dataclass(frozen=True)
class FeatureTensor:
    """18 x image-shape tensor: indicators, Manhattan distance, two angles."""

    values: np.ndarray  # float64, (18, nx, ny, nz)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 4 or v.shape[0] != NUM_CHANNELS:
            raise ConversionError(f"feature tensor must be (18, nx, ny, nz), got {v.shape}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape[1:]

    def rows(self) -> np.ndarray:
        """(num_pixels, 18) view, pixels in lexicographic (x, y, z) order."""
        return self.values.reshape(NUM_CHANNELS, -1).T


def extract_pixel_features(masks: StructureMasks, geom: GridGeometry) -> FeatureTensor:
    """Per-pixel features relative to the PTV centroid.

    Channels 0..14 are the structure indicators; 15 is the Manhattan
    distance from the pixel center to the centroid; 16 is the azimuth
    atan2(dy, dx); 17 is the elevation atan2(dz, hypot(dx, dy)). The pixel
    whose center coincides with the centroid gets angles (0, 0).
    """
    ptv = masks.masks[PTV_SLOT]
    if ptv.shape != (geom.slice_shape[0], geom.slice_shape[1], geom.slices):
        raise ConversionError(f"mask shape {ptv.shape} does not match geometry")
    mi = _fractional_centroid_index(ptv)
    r = geom.slice_resolution
    # Offsets from grid indices, never absolute coordinates: a common
    # integer-mm translation of the geometry leaves them bit-identical.
    dx = r * (np.arange(geom.slice_shape[0]) - mi[0])
    dy = r * (np.arange(geom.slice_shape[1]) - mi[1])
    zrel = _slice_mid_offsets(geom)
    dz = zrel - zrel[np.argwhere(ptv)[:, 2]].mean()

    out = np.empty((NUM_CHANNELS,) + ptv.shape, dtype=np.float64)
    out[:NUM_STRUCTURES] = masks.masks
    out[NUM_STRUCTURES] = (
        np.abs(dx)[:, None, None] + np.abs(dy)[None, :, None] + np.abs(dz)[None, None, :]
    )
    azimuth = np.arctan2(dy[None, :], dx[:, None])
    out[NUM_STRUCTURES + 1] = azimuth[:, :, None]
    horiz = np.hypot(dx[:, None], dy[None, :])
    out[NUM_STRUCTURES + 2] = np.arctan2(dz[None, None, :], horiz[:, :, None])
    at_centroid = (dx == 0.0)[:, None, None] & (dy == 0.0)[None, :, None] & (dz == 0.0)[None, None, :]
    out[NUM_STRUCTURES + 1][at_centroid] = 0.0
    out[NUM_STRUCTURES + 2][at_centroid] = 0.0
    return FeatureTensor(out)
