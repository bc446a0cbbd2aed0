"""
Artificial Abnormalities
========================
The three surrogate abnormalities injected into phantoms, their semantic
description (``AbnormalitySpec``) and the fixed 11-slot binary label layout:

    bit  0      mirrored
    bits 1-5    rotation  -90, -45, 0, 45, 90 degrees
    bits 6-10   occluded lobe  LUL, LLL, RUL, RML, RLL

Single-task datasets only carry the bits of their own task (1 for mirroring,
5 for rotation or occlusion). Abnormalities that a task does not use stay
absent in its specs (not mirrored, 0 degrees, no occluded lobe).

Composition order in ``inject``: occlusion → mirror → rotation, so lobe masks
are always applied in their native orientation.
"""

import itertools
import logging
from enum import Enum
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from common.errors import InvalidInputError
from volumes.volume_core import Volume

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Enumerations
# ---------------------------------------------------------------------------

class Lobe(str, Enum):
    LUL = "LUL"     # left upper
    LLL = "LLL"     # left lower
    RUL = "RUL"     # right upper
    RML = "RML"     # right middle
    RLL = "RLL"     # right lower


class Task(str, Enum):
    MIRROR = "mirror"
    ROTATION = "rotation"
    OCCLUSION = "occlusion"
    COMBINED = "combined"


LOBES: tuple[Lobe, ...] = tuple(Lobe)
ROTATIONS: tuple[int, ...] = (-90, -45, 0, 45, 90)
LABEL_SIZE = 11

TASK_SLICES = {
    Task.MIRROR: slice(0, 1),
    Task.ROTATION: slice(1, 6),
    Task.OCCLUSION: slice(6, 11),
    Task.COMBINED: slice(0, 11),
}

LABEL_NAMES: tuple[str, ...] = (
    ("mirrored",)
    + tuple(f"rot={r}" for r in ROTATIONS)
    + tuple(f"occ={lobe.value}" for lobe in LOBES)
)


def task_label_names(task: Union[Task, str]) -> tuple[str, ...]:
    return LABEL_NAMES[TASK_SLICES[Task(task)]]


# ---------------------------------------------------------------------------
# Spec and label types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AbnormalitySpec:
    mirrored: bool = False
    rotation_deg: int = 0
    occluded_lobe: Optional[Lobe] = None

    def __post_init__(self):
        if isinstance(self.rotation_deg, bool) or int(self.rotation_deg) != self.rotation_deg \
                or int(self.rotation_deg) not in ROTATIONS:
            raise InvalidInputError(f"rotation_deg must be one of {ROTATIONS}, got {self.rotation_deg!r}")
        object.__setattr__(self, "rotation_deg", int(self.rotation_deg))
        object.__setattr__(self, "mirrored", bool(self.mirrored))
        if self.occluded_lobe is not None:
            try:
                object.__setattr__(self, "occluded_lobe", Lobe(self.occluded_lobe))
            except ValueError:
                raise InvalidInputError(f"Unknown lobe {self.occluded_lobe!r}") from None

    def to_dict(self) -> dict:
        return {
            "mirrored": self.mirrored,
            "rotation_deg": self.rotation_deg,
            "occluded_lobe": self.occluded_lobe.value if self.occluded_lobe else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AbnormalitySpec":
        return cls(bool(d.get("mirrored", False)), int(d.get("rotation_deg", 0)), d.get("occluded_lobe"))


@dataclass(frozen=True)
class LabelVector:
    """Binary label bits for one task (11 for the combined task)."""

    bits: tuple[int, ...]
    task: Task = Task.COMBINED

    def __post_init__(self):
        task = Task(self.task)
        bits = tuple(int(b) for b in self.bits)
        object.__setattr__(self, "task", task)
        object.__setattr__(self, "bits", bits)
        expected = TASK_SLICES[task].stop - TASK_SLICES[task].start
        if len(bits) != expected or any(b not in (0, 1) for b in bits):
            raise InvalidInputError(f"{task.value} label needs {expected} binary bits, got {bits}")
        if task == Task.COMBINED:
            groups = (bits[1:6], bits[6:11])
        elif task in (Task.ROTATION, Task.OCCLUSION):
            groups = (bits,)
        else:
            groups = ()
        for group in groups:
            if sum(group) != 1:
                raise InvalidInputError(f"Label group must be one-hot, got {bits}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float32)


def _one_hot(index: int, size: int = 5) -> tuple[int, ...]:
    return tuple(int(i == index) for i in range(size))


def spec_to_label(spec: AbnormalitySpec) -> LabelVector:
    if spec.occluded_lobe is None:
        raise InvalidInputError("The combined label needs an occluded lobe")
    bits = (int(spec.mirrored),) + _one_hot(ROTATIONS.index(spec.rotation_deg)) \
        + _one_hot(LOBES.index(spec.occluded_lobe))
    return LabelVector(bits, Task.COMBINED)


def label_to_spec(label: LabelVector) -> AbnormalitySpec:
    if label.task != Task.COMBINED:
        raise InvalidInputError("label_to_spec needs a combined (11-bit) label")
    bits = label.bits
    return AbnormalitySpec(
        mirrored=bool(bits[0]),
        rotation_deg=ROTATIONS[bits[1:6].index(1)],
        occluded_lobe=LOBES[bits[6:11].index(1)],
    )


def task_label(spec: AbnormalitySpec, task: Union[Task, str]) -> LabelVector:
    task = Task(task)
    if task == Task.COMBINED:
        return spec_to_label(spec)
    if task == Task.MIRROR:
        return LabelVector((int(spec.mirrored),), task)
    if task == Task.ROTATION:
        return LabelVector(_one_hot(ROTATIONS.index(spec.rotation_deg)), task)
    if spec.occluded_lobe is None:
        raise InvalidInputError("Occlusion label needs an occluded lobe")
    return LabelVector(_one_hot(LOBES.index(spec.occluded_lobe)), task)


def all_specs() -> list[AbnormalitySpec]:
    """All 2 · 5 · 5 = 50 combined specs."""
    return [
        AbnormalitySpec(m, r, lobe)
        for m, r, lobe in itertools.product((False, True), ROTATIONS, LOBES)
    ]


# ---------------------------------------------------------------------------
# Lobe masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LobeMaskSet:
    """
    Five disjoint lobe masks, stored as one uint8 label map
    (0 = outside the lungs, i + 1 = ``LOBES[i]``).
    """

    label_map: np.ndarray

    def __post_init__(self):
        label_map = np.asarray(self.label_map)
        if label_map.ndim != 3:
            raise InvalidInputError(f"Lobe label map must be 3D, got {label_map.shape}")
        label_map = label_map.astype(np.uint8, copy=False)
        if label_map.max(initial=0) > len(LOBES):
            raise InvalidInputError("Lobe label map has values beyond the five lobes")
        present = np.bincount(label_map.ravel(), minlength=len(LOBES) + 1)[1:]
        missing = [lobe.value for lobe, n in zip(LOBES, present) if n == 0]
        if missing:
            raise InvalidInputError(f"Empty lobe mask(s): {missing}")
        object.__setattr__(self, "label_map", label_map)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.label_map.shape)

    def mask(self, lobe: Union[Lobe, str]) -> np.ndarray:
        return self.label_map == (LOBES.index(Lobe(lobe)) + 1)

    @property
    def masks(self) -> tuple[np.ndarray, ...]:
        return tuple(self.mask(lobe) for lobe in LOBES)

    def lung_mask(self) -> np.ndarray:
        return self.label_map > 0


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def mirror_array(data: np.ndarray) -> np.ndarray:
    """Reverse the left-right (column) axis."""
    return np.flip(data, axis=2).copy()


def rotate_array(data: np.ndarray, angle: int, order: int = 1, fill: float = 0.0) -> np.ndarray:
    """
    Rotate every transverse slice about its centre; positive = counterclockwise
    as displayed (rows down, columns right).
    """
    if isinstance(angle, bool) or angle not in ROTATIONS:
        raise InvalidInputError(f"Rotation angle must be one of {ROTATIONS}, got {angle!r}")
    if angle == 0:
        return data.copy()
    if abs(angle) == 90 and data.shape[1] == data.shape[2]:
        return np.rot90(data, k=angle // 90, axes=(1, 2)).copy()

    source = data.astype(np.uint8) if data.dtype == bool else data
    theta = np.deg2rad(angle)
    c, s = np.cos(theta), np.sin(theta)
    # maps output (row, col) offsets from the centre onto input offsets
    matrix = np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])
    centre = np.array([0.0, (data.shape[1] - 1) / 2.0, (data.shape[2] - 1) / 2.0])
    offset = centre - matrix @ centre
    rotated = ndimage.affine_transform(
        source, matrix, offset=offset, order=order, mode="constant", cval=fill, prefilter=False,
    )
    return rotated.astype(bool) if data.dtype == bool else rotated


def apply_mirror(v: Volume) -> Volume:
    return v.derive(mirror_array(v.data), "mirror")


def apply_rotation(v: Volume, angle: int) -> Volume:
    return v.derive(rotate_array(v.data, angle, order=1, fill=0.0), f"rotate[{angle}]")


def apply_occlusion(v: Volume, masks: LobeMaskSet, lobe: Union[Lobe, str]) -> Volume:
    """Set every voxel of ``lobe`` to 0.0; everything else is left untouched."""
    if masks.shape != v.shape:
        raise InvalidInputError(f"Mask shape {masks.shape} does not match volume {v.shape}")
    try:
        lobe = Lobe(lobe)
    except ValueError:
        raise InvalidInputError(f"Unknown lobe {lobe!r}") from None
    data = v.data.copy()
    data[masks.mask(lobe)] = 0.0
    return v.derive(data, f"occlude[{lobe.value}]")


def transform_mask(mask: np.ndarray, spec: AbnormalitySpec) -> np.ndarray:
    """Apply the geometric part of ``spec`` to a boolean mask (nearest neighbour)."""
    out = mirror_array(mask) if spec.mirrored else mask.copy()
    return rotate_array(out, spec.rotation_deg, order=0, fill=0)


def inject(phantom, spec: AbnormalitySpec, task: Union[Task, str] = Task.COMBINED):
    """
    Apply ``spec`` to a phantom: occlusion, then mirroring, then rotation.

    Returns (Volume, LabelVector) where the label covers ``task``'s bits.
    """
    volume = phantom.volume
    if spec.occluded_lobe is not None:
        volume = apply_occlusion(volume, phantom.lobe_masks, spec.occluded_lobe)
    if spec.mirrored:
        volume = apply_mirror(volume)
    if spec.rotation_deg != 0:
        volume = apply_rotation(volume, spec.rotation_deg)
    return volume, task_label(spec, task)
