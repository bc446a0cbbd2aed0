"""
Thorax Phantoms
===============
Procedural chest CT phantoms with exact lobe masks, standing in for real scans
plus a lobe segmentation.

What a phantom contains (all rendered in HU, then clipped + normalized):
    - air background and an elliptic body cylinder of soft tissue
    - spine (bone) posteriorly, heart offset to the patient's left
    - two lung ellipsoids, split into five lobes by oblique fissures
    - a per-lobe intensity offset and a per-lobe sinusoidal texture

Everything is a deterministic function of (seed, shape).

Usage:
    from synth.phantom import generate_phantom

    p = generate_phantom(seed=7, shape=(64, 64, 64))
    p.volume.data.shape, p.lobe_masks.mask("RML").sum()
"""

import logging
from pathlib import Path
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from common.errors import InvalidInputError
from common.io_utils import save_array, load_array
from synth.abnormalities import LOBES, Lobe, LobeMaskSet
from volumes.volume_core import (
    Volume, ValueDomain, clip_and_normalize, lung_range_from_mask,
    preprocess_scan, resize_pad_mask, slab_bounds,
    save_volume, load_volume,
)

logger = logging.getLogger(__name__)

MIN_DIM = 16

# Tissue intensities (HU)
AIR_HU = -1000.0
SOFT_TISSUE_HU = 40.0
HEART_HU = 60.0
BONE_HU = 700.0
NOISE_HU = 15.0

# Lobe appearance: base HU offset and texture wave vector (x, y, z cycles over the grid)
LOBE_BASE_HU = {
    Lobe.LUL: -865.0,
    Lobe.LLL: -820.0,
    Lobe.RUL: -855.0,
    Lobe.RML: -790.0,
    Lobe.RLL: -840.0,
}
LOBE_TEXTURE = {
    Lobe.LUL: (4.0, 0.0, 0.0),
    Lobe.LLL: (0.0, 4.0, 0.0),
    Lobe.RUL: (0.0, 0.0, 4.0),
    Lobe.RML: (3.0, 3.0, 0.0),
    Lobe.RLL: (3.0, 0.0, 3.0),
}
TEXTURE_HU = 45.0


@dataclass(frozen=True, eq=False)
class Phantom:
    volume: Volume
    lobe_masks: LobeMaskSet
    seed: int

    def __post_init__(self):
        if self.volume.shape != self.lobe_masks.shape:
            raise InvalidInputError(
                f"Phantom volume {self.volume.shape} and masks {self.lobe_masks.shape} differ"
            )


def _check_shape(shape) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < MIN_DIM:
        raise InvalidInputError(f"Phantom shape must be 3 dims each >= {MIN_DIM}, got {shape}")
    return shape


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_phantom_hu(seed: int, shape, lung_extent: float = 0.8) -> tuple[Volume, LobeMaskSet]:
    """
    Render a raw-HU phantom.

    ``lung_extent`` is the cranio-caudal half-length of the lungs as a fraction
    of the grid; values below 1 leave body-only slices above and below.
    """
    shape = _check_shape(shape)
    rng = np.random.default_rng(seed)

    def jitter(scale: float) -> float:
        return float(rng.uniform(-scale, scale))

    d, h, w = shape
    z, y, x = np.meshgrid(
        np.linspace(-1.0, 1.0, d), np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w),
        indexing="ij",
    )

    # y grows posteriorly, x grows towards the patient's left
    body = (x / (0.85 + jitter(0.04))) ** 2 + (y / (0.65 + jitter(0.04))) ** 2 <= 1.0
    spine = (x ** 2 + (y - 0.45) ** 2 <= 0.12 ** 2) & body
    lz = lung_extent * (1.0 + jitter(0.05))
    heart = (
        ((x - 0.12 - jitter(0.03)) / 0.22) ** 2
        + ((y + 0.15) / 0.22) ** 2
        + ((z - 0.25 * lz) / (0.45 * lz)) ** 2
    ) <= 1.0

    zn = z / lz
    yn = y / 0.42
    right_lung = ((x + 0.45 + jitter(0.02)) / 0.28) ** 2 + yn ** 2 + zn ** 2 <= 1.0
    left_lung = ((x - 0.45 + jitter(0.02)) / 0.26) ** 2 + yn ** 2 + zn ** 2 <= 1.0
    keep = body & ~heart & ~spine
    right_lung &= keep
    left_lung &= keep

    # oblique fissure, rising anteriorly
    fissure = zn - 0.4 * yn
    left_split = 0.05 + jitter(0.05)
    right_split = 0.15 + jitter(0.05)
    horizontal = -0.3 + jitter(0.05)

    label_map = np.zeros(shape, dtype=np.uint8)
    label_map[left_lung & (fissure < left_split)] = LOBES.index(Lobe.LUL) + 1
    label_map[left_lung & (fissure >= left_split)] = LOBES.index(Lobe.LLL) + 1
    label_map[right_lung & (fissure >= right_split)] = LOBES.index(Lobe.RLL) + 1
    label_map[right_lung & (fissure < right_split) & (zn < horizontal)] = LOBES.index(Lobe.RUL) + 1
    label_map[right_lung & (fissure < right_split) & (zn >= horizontal)] = LOBES.index(Lobe.RML) + 1

    noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, shape), sigma=1.0)
    noise *= NOISE_HU / max(float(noise.std()), 1e-12)

    hu = np.full(shape, AIR_HU, dtype=np.float64)
    hu[body] = SOFT_TISSUE_HU
    hu[heart & body] = HEART_HU
    hu[spine] = BONE_HU
    for i, lobe in enumerate(LOBES):
        region = label_map == i + 1
        fx, fy, fz = LOBE_TEXTURE[lobe]
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = np.sin(np.pi * (fx * x + fy * y + fz * z) + phase)
        hu[region] = LOBE_BASE_HU[lobe] + TEXTURE_HU * wave[region]
    hu[body] += noise[body]

    volume = Volume(hu, value_domain=ValueDomain.RAW_HU, provenance={"seed": int(seed), "history": ["render"]})
    return volume, LobeMaskSet(label_map)


def generate_phantom(seed: int, shape) -> Phantom:
    """Phantom whose lungs fill most of the grid, normalized to [0, 1]."""
    raw, masks = render_phantom_hu(seed, shape)
    return Phantom(clip_and_normalize(raw), masks, int(seed))


def generate_native_phantom(seed: int, native_shape, target) -> Phantom:
    """
    Render at a larger native field of view (lungs span the middle of the scan)
    and run the scan preprocessing chain down to ``target``.
    """
    raw, masks = render_phantom_hu(seed, native_shape, lung_extent=0.55)
    lung_range = lung_range_from_mask(masks.lung_mask())
    volume = preprocess_scan(raw, lung_range, target)

    bounds = slab_bounds(raw.depth, lung_range)
    slab_map = masks.label_map[bounds.first_slice: bounds.last_slice + 1]
    label_map = resize_pad_mask(slab_map, slab_map.shape, target)
    return Phantom(volume, LobeMaskSet(label_map), int(seed))


def derive_phantom_seed(base_seed: int, index: int) -> int:
    """Independent per-phantom seed; stable under appending phantoms."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_phantom(path_stem: Path, p: Phantom) -> dict:
    """Volume as ``<stem>.npy.gz`` + sidecar, lobe label map as ``<stem>.lobes.npy.gz``."""
    path_stem = Path(path_stem)
    sidecar = save_volume(path_stem, p.volume)
    mask_digest = save_array(path_stem.parent / f"{path_stem.name}.lobes.npy.gz", p.lobe_masks.label_map)
    return {"sha256": sidecar["sha256"], "mask_sha256": mask_digest}


def load_phantom(path_stem: Path) -> Phantom:
    path_stem = Path(path_stem)
    volume = load_volume(path_stem)
    label_map = load_array(path_stem.parent / f"{path_stem.name}.lobes.npy.gz")
    return Phantom(volume, LobeMaskSet(label_map), int(volume.provenance.get("seed", -1)))
