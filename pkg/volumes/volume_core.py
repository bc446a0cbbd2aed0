"""
Volume Core
===========
The volumetric image type used throughout the pipeline and the deterministic
pre-processing applied to every scan before it reaches a model.

Axes are ``[slice, row, col]``: slices are transverse and run cranio-caudal,
rows run anterior → posterior, columns run from the patient's right to the
patient's left (radiological display convention).

Pre-processing chain (``preprocess_scan``):
    1. clip to [-1000, 1300] HU and map affinely onto [0, 1]
    2. keep the thorax slab: lung slices plus 40 % of that count on each side
    3. rescale with one factor (aspect ratio preserved) and pad with air (0.0)

Usage:
    from volumes.volume_core import Volume, ValueDomain, preprocess_scan

    raw = Volume(hu_array, spacing=(2.5, 0.8, 0.8), value_domain=ValueDomain.RAW_HU)
    vol = preprocess_scan(raw, lung_range, target=(64, 64, 64))
"""

import logging
from enum import Enum
from pathlib import Path
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from common.errors import InvalidInputError
from common.io_utils import save_array, load_array, save_json, load_json

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------
HU_MIN = -1000.0
HU_MAX = 1300.0
HU_RANGE = HU_MAX - HU_MIN      # 2300
SLAB_MARGIN_NUM = 2             # margin = floor(2n / 5) = floor(0.4 n), exact in ints
SLAB_MARGIN_DEN = 5
PAD_VALUE = 0.0                 # normalized air


class ValueDomain(str, Enum):
    RAW_HU = "raw_hu"
    NORMALIZED = "normalized"


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Volume:
    """
    3D voxel grid with metadata.

    Attributes
    ----------
    data         : ndarray [slice, row, col]
    spacing      : optional voxel size in mm per axis
    value_domain : raw HU or normalized [0, 1]
    provenance   : seed and transform history, persisted in the sidecar
    """

    data: np.ndarray
    spacing: Optional[tuple[float, float, float]] = None
    value_domain: ValueDomain = ValueDomain.NORMALIZED
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidInputError(f"Volume must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise InvalidInputError(f"Volume has an empty dimension: {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "value_domain", ValueDomain(self.value_domain))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def depth(self) -> int:
        return int(self.data.shape[0])

    def derive(self, data: np.ndarray, step: str, **changes) -> "Volume":
        """New volume with ``data`` and ``step`` appended to the transform history."""
        provenance = dict(self.provenance)
        provenance["history"] = list(provenance.get("history", [])) + [step]
        return Volume(
            data=data,
            spacing=changes.get("spacing", self.spacing),
            value_domain=changes.get("value_domain", self.value_domain),
            provenance=provenance,
        )


@dataclass(frozen=True)
class SlabRange:
    """Inclusive slice range."""

    first_slice: int
    last_slice: int

    @property
    def n_slices(self) -> int:
        return self.last_slice - self.first_slice + 1

    def validate(self, depth: int) -> None:
        if not (0 <= self.first_slice <= self.last_slice < depth):
            raise InvalidInputError(
                f"Slab [{self.first_slice}, {self.last_slice}] outside volume of depth {depth}"
            )


# ---------------------------------------------------------------------------
# Intensity
# ---------------------------------------------------------------------------

def clip_and_normalize(v: Volume) -> Volume:
    """Clamp to [-1000, 1300] HU then map linearly onto [0, 1]."""
    if v.value_domain != ValueDomain.RAW_HU:
        raise InvalidInputError("clip_and_normalize expects a raw_hu volume")
    if v.data.size == 0:
        raise InvalidInputError("Cannot normalize an empty volume")
    data = (np.clip(v.data.astype(np.float64), HU_MIN, HU_MAX) - HU_MIN) / HU_RANGE
    return v.derive(data, "clip_and_normalize", value_domain=ValueDomain.NORMALIZED)


def denormalize(v: Volume) -> Volume:
    """Inverse of the affine map in ``clip_and_normalize`` (clipping is not undone)."""
    if v.value_domain != ValueDomain.NORMALIZED:
        raise InvalidInputError("denormalize expects a normalized volume")
    data = v.data.astype(np.float64) * HU_RANGE + HU_MIN
    return v.derive(data, "denormalize", value_domain=ValueDomain.RAW_HU)


# ---------------------------------------------------------------------------
# Thorax slab
# ---------------------------------------------------------------------------

def lung_range_from_mask(lung_mask: np.ndarray) -> SlabRange:
    """First and last slice containing any lung voxel."""
    slices = np.flatnonzero(np.asarray(lung_mask).reshape(lung_mask.shape[0], -1).any(axis=1))
    if slices.size == 0:
        raise InvalidInputError("Lung mask is empty")
    return SlabRange(int(slices[0]), int(slices[-1]))


def slab_bounds(depth: int, lung_range: SlabRange) -> SlabRange:
    lung_range.validate(depth)
    margin = (SLAB_MARGIN_NUM * lung_range.n_slices) // SLAB_MARGIN_DEN
    return SlabRange(
        max(0, lung_range.first_slice - margin),
        min(depth - 1, lung_range.last_slice + margin),
    )


def select_thorax_slab(v: Volume, lung_range: SlabRange) -> Volume:
    """Lung slices plus floor(0.4·n) slices above and below, clamped to the scan."""
    bounds = slab_bounds(v.depth, lung_range)
    data = v.data[bounds.first_slice: bounds.last_slice + 1]
    return v.derive(data, f"thorax_slab[{bounds.first_slice}:{bounds.last_slice}]")


# ---------------------------------------------------------------------------
# Resize + pad
# ---------------------------------------------------------------------------

def _validate_target(target) -> tuple[int, int, int]:
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise InvalidInputError(f"Invalid target shape: {target}")
    return target


def fitted_shape(shape, target) -> tuple[tuple[int, int, int], float]:
    """Largest shape with one common scale factor that fits inside ``target``."""
    scale = min(t / s for t, s in zip(target, shape))
    fitted = tuple(min(t, max(1, int(round(s * scale)))) for s, t in zip(shape, target))
    return fitted, scale


def _rescale(data: np.ndarray, new_shape, order: int) -> np.ndarray:
    old = np.asarray(data.shape, dtype=np.float64)
    new = np.asarray(new_shape, dtype=np.float64)
    ratio = old / new
    # pixel-centre alignment: in = (out + 0.5) * ratio - 0.5
    offset = 0.5 * ratio - 0.5
    return ndimage.affine_transform(
        data,
        matrix=ratio,
        offset=offset,
        output_shape=tuple(int(n) for n in new_shape),
        order=order,
        mode="nearest",
        prefilter=False,
    )


def _pad_to(data: np.ndarray, target, fill) -> np.ndarray:
    pads = []
    for size, want in zip(data.shape, target):
        total = want - size
        before = total // 2
        pads.append((before, total - before))
    return np.pad(data, pads, mode="constant", constant_values=fill)


def resize_pad(v: Volume, target) -> Volume:
    """Rescale (trilinear, aspect ratio preserved) to fit ``target``, then pad with air."""
    target = _validate_target(target)
    fitted, scale = fitted_shape(v.shape, target)
    if fitted == v.shape:
        data = v.data
    else:
        data = _rescale(v.data.astype(np.float64), fitted, order=1)
    data = _pad_to(data, target, PAD_VALUE)
    return v.derive(data, f"resize_pad{target}@{scale:.4f}")


def resize_pad_mask(mask: np.ndarray, source_shape, target) -> np.ndarray:
    """Nearest-neighbour companion of ``resize_pad`` for integer label maps."""
    target = _validate_target(target)
    fitted, _ = fitted_shape(tuple(source_shape), target)
    data = mask if fitted == tuple(mask.shape) else _rescale(mask, fitted, order=0)
    return _pad_to(data, target, 0).astype(mask.dtype)


def preprocess_scan(v: Volume, lung_range: SlabRange, target) -> Volume:
    """Full chain applied to a raw scan: normalize → thorax slab → resize + pad."""
    return resize_pad(select_thorax_slab(clip_and_normalize(v), lung_range), target)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _sibling(path_stem: Path, suffix: str) -> Path:
    return path_stem.parent / f"{path_stem.name}{suffix}"


def save_volume(path_stem: Path, v: Volume, dtype=np.float32) -> dict:
    """
    Write ``<stem>.npy.gz`` plus the ``<stem>.json`` sidecar.

    Returns the sidecar dict (includes the content digest).
    """
    path_stem = Path(path_stem)
    digest = save_array(_sibling(path_stem, ".npy.gz"), v.data.astype(dtype))
    sidecar = {
        "shape": list(v.shape),
        "spacing": list(v.spacing) if v.spacing else None,
        "value_domain": v.value_domain.value,
        "provenance": v.provenance,
        "sha256": digest,
    }
    save_json(_sibling(path_stem, ".json"), sidecar)
    return sidecar


def load_volume(path_stem: Path) -> Volume:
    path_stem = Path(path_stem)
    sidecar = load_json(_sibling(path_stem, ".json"))
    data = load_array(_sibling(path_stem, ".npy.gz"))
    if list(data.shape) != sidecar["shape"]:
        raise InvalidInputError(f"{path_stem}: sidecar shape {sidecar['shape']} != data {data.shape}")
    spacing = tuple(sidecar["spacing"]) if sidecar.get("spacing") else None
    return Volume(data, spacing, ValueDomain(sidecar["value_domain"]), sidecar.get("provenance", {}))
