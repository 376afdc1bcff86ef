"""Case bundle format: one patient case on disk and in memory.

A bundle holds the image tensor, the dose tensor, both grid geometries,
15 structure masks aligned to the image grid, and the prescription. Tensors
are stored as raw little-endian float32 so save/load round-trips bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .container import ContainerError, read_container, write_container

BUNDLE_MAGIC = b"DGBUNDLE"

# Slot order is fixed: 14 organs at risk, then the planning target volume.
STRUCTURE_NAMES = (
    "body",
    "left_brachial_plexus",
    "right_brachial_plexus",
    "esophagus",
    "skin_rind",
    "bronchial_tree",
    "chest_wall",
    "left_lung",
    "right_lung",
    "heart",
    "trachea",
    "carina",
    "spinal_cord",
    "liver",
    "ptv",
)
NUM_STRUCTURES = len(STRUCTURE_NAMES)  # 15
PTV_SLOT = 14


class BundleError(ValueError):
    """Invalid bundle contents or file."""


@dataclass(frozen=True)
class GridGeometry:
    """Physical layout of one 3D tensor.

    slice_z stores voxel boundaries, so it has slices+1 entries; slice k
    (one-based) spans [slice_z[k-1], slice_z[k]]. x/y spacing is the shared
    slice_resolution.
    """

    origin_xy: tuple[float, float]
    slice_resolution: float
    slice_z: tuple[float, ...]
    slice_shape: tuple[int, int]

    def __post_init__(self):
        if not self.slice_resolution > 0:
            raise BundleError(f"slice_resolution must be > 0, got {self.slice_resolution}")
        z = np.asarray(self.slice_z, dtype=np.float64)
        if z.ndim != 1 or len(z) < 2:
            raise BundleError("slice_z needs at least 2 boundaries")
        if not np.all(np.diff(z) > 0):
            raise BundleError("slice_z not strictly increasing")
        if not np.all(np.isfinite(z)):
            raise BundleError("slice_z entries must be finite")
        nx, ny = self.slice_shape
        if nx < 1 or ny < 1:
            raise BundleError(f"slice_shape must be positive, got {self.slice_shape}")
        object.__setattr__(self, "slice_z", tuple(float(v) for v in z))
        object.__setattr__(self, "origin_xy", (float(self.origin_xy[0]), float(self.origin_xy[1])))
        object.__setattr__(self, "slice_shape", (int(nx), int(ny)))

    @property
    def slices(self) -> int:
        return len(self.slice_z) - 1

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.slice_shape[0], self.slice_shape[1], self.slices)

    def translated(self, dx: float, dy: float, dz: float) -> "GridGeometry":
        return GridGeometry(
            (self.origin_xy[0] + dx, self.origin_xy[1] + dy),
            self.slice_resolution,
            tuple(z + dz for z in self.slice_z),
            self.slice_shape,
        )


@dataclass(frozen=True)
class CaseBundle:
    """One case: image + dose tensors with geometry, masks, prescription."""

    case_id: str
    image: np.ndarray  # float32, shape image_geom.shape
    image_geom: GridGeometry
    dose: np.ndarray  # float32 Gy, shape dose_geom.shape
    dose_geom: GridGeometry
    structure_masks: np.ndarray  # bool, (15,) + image shape
    prescription_dose: float
    prescription_text: str

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        dose = np.asarray(self.dose, dtype=np.float32)
        masks = np.asarray(self.structure_masks, dtype=bool)
        if image.shape != self.image_geom.shape:
            raise BundleError(f"image shape {image.shape} != geometry shape {self.image_geom.shape}")
        if dose.shape != self.dose_geom.shape:
            raise BundleError(f"dose shape {dose.shape} != geometry shape {self.dose_geom.shape}")
        if masks.shape != (NUM_STRUCTURES,) + image.shape:
            raise BundleError(
                f"structure_masks shape {masks.shape} != {(NUM_STRUCTURES,) + image.shape}"
            )
        if np.any(dose < 0):
            raise BundleError("dose values must be >= 0")
        if not masks[PTV_SLOT].any():
            raise BundleError("PTV mask is empty")
        if not self.prescription_dose > 0:
            raise BundleError(f"prescription_dose must be > 0, got {self.prescription_dose}")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "dose", dose)
        object.__setattr__(self, "structure_masks", masks)
        object.__setattr__(self, "prescription_dose", float(self.prescription_dose))
        # Read-only views: a loaded bundle is shared across threads as-is.
        for arr in (image, dose, masks):
            arr.setflags(write=False)

    def with_masks(self, masks: np.ndarray) -> "CaseBundle":
        return replace(self, structure_masks=masks)

    def translated(self, dx: float, dy: float, dz: float) -> "CaseBundle":
        """Same case with both grids shifted by a common physical offset."""
        return replace(
            self,
            image_geom=self.image_geom.translated(dx, dy, dz),
            dose_geom=self.dose_geom.translated(dx, dy, dz),
        )

    def has_ground_truth(self) -> bool:
        """True when the dose tensor carries a real dose (any positive voxel)."""
        return bool(np.any(self.dose > 0))


def _geom_header(geom: GridGeometry) -> dict:
    return {
        "origin_xy": list(geom.origin_xy),
        "slice_resolution": geom.slice_resolution,
        "slice_z": list(geom.slice_z),
        "slice_shape": list(geom.slice_shape),
    }


def _geom_from_header(h: dict) -> GridGeometry:
    return GridGeometry(
        (h["origin_xy"][0], h["origin_xy"][1]),
        h["slice_resolution"],
        tuple(h["slice_z"]),
        (h["slice_shape"][0], h["slice_shape"][1]),
    )


def save_bundle(case: CaseBundle, path) -> None:
    """Write a case to disk; saving the same case twice is byte-identical."""
    header = {
        "kind": "case_bundle",
        "case_id": case.case_id,
        "image_geom": _geom_header(case.image_geom),
        "dose_geom": _geom_header(case.dose_geom),
        "structure_names": list(STRUCTURE_NAMES),
        "prescription_dose": case.prescription_dose,
        "prescription_text": case.prescription_text,
    }
    tensors = [
        ("image", case.image),
        ("dose", case.dose),
        ("structure_masks", case.structure_masks.astype(np.float32)),
    ]
    write_container(path, BUNDLE_MAGIC, header, tensors)


def load_bundle(path) -> CaseBundle:
    """Read and validate a case bundle."""
    try:
        header, tensors = read_container(path, BUNDLE_MAGIC)
    except ContainerError as exc:
        raise BundleError(str(exc)) from exc
    for key in ("case_id", "image_geom", "dose_geom", "prescription_dose", "prescription_text"):
        if key not in header:
            raise BundleError(f"{path}: header missing field {key!r}")
    for name in ("image", "dose", "structure_masks"):
        if name not in tensors:
            raise BundleError(f"{path}: missing tensor {name!r}")
    masks = tensors["structure_masks"]
    if masks.shape[0] != NUM_STRUCTURES:
        raise BundleError(f"{path}: expected {NUM_STRUCTURES} mask slots, got {masks.shape[0]}")
    if not masks[PTV_SLOT].any():
        raise BundleError(f"{path}: missing PTV mask (slot {PTV_SLOT} is empty)")
    return CaseBundle(
        case_id=header["case_id"],
        image=tensors["image"],
        image_geom=_geom_from_header(header["image_geom"]),
        dose=tensors["dose"],
        dose_geom=_geom_from_header(header["dose_geom"]),
        structure_masks=masks != 0,
        prescription_dose=header["prescription_dose"],
        prescription_text=header["prescription_text"],
    )


def list_bundles(directory) -> list[Path]:
    """Bundle files under a directory, sorted by name."""
    return sorted(Path(directory).glob("*.dgb"))
