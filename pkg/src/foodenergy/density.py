"""Ground-truth energy density maps: construction, integration and scaling.

A raw map holds kcal per pixel; each food's energy is spread uniformly over
the pixels its segmentation label covers.  Maps are then scaled onto
[0, 255] with a dataset-wide factor, and from there onto [-1, 1].
"""

from __future__ import annotations

import enum
import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

logger = logging.getLogger(__name__)

RAW_MAGIC = b"EDM1"
_HEADER = struct.Struct("<4sII")


class Representation(str, enum.Enum):
    RAW_KCAL_PER_PIXEL = "raw"
    SCALED_0_255 = "scaled"
    SIGNED_UNIT = "signed"


RAW = Representation.RAW_KCAL_PER_PIXEL
SCALED = Representation.SCALED_0_255
SIGNED = Representation.SIGNED_UNIT


class ZeroPixelIngredientWarning(UserWarning):
    pass


@dataclass
class EnergyDensityMap:
    values: np.ndarray
    representation: Representation = RAW
    scale_used: float | None = None

    @property
    def shape(self):
        return self.values.shape


def build_raw_density_map(mask, energies) -> EnergyDensityMap:
    """Spread each ingredient's energy evenly over its mask pixels.

    ``mask`` is an integer label grid (0 = background, k = k-th ingredient,
    1-based).  ``energies`` is a sequence of kcal values or
    :class:`~foodenergy.records.IngredientRecord`.  Ingredients with no
    pixels cannot be represented and trigger a warning.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be a 2-D label grid")
    energies = [float(getattr(e, "energy_kcal", e)) for e in energies]
    n = len(energies)
    if mask.size and (mask.min() < 0 or mask.max() > n):
        raise ValueError(f"mask labels exceed the {n} listed ingredients")

    counts = np.bincount(mask.ravel().astype(np.int64), minlength=n + 1)
    per_label = np.zeros(n + 1, dtype=np.float64)
    for k in range(1, n + 1):
        if counts[k] == 0:
            warnings.warn(f"zero-pixel ingredient {k}", ZeroPixelIngredientWarning,
                          stacklevel=2)
            continue
        per_label[k] = energies[k - 1] / counts[k]
    return EnergyDensityMap(per_label[mask], RAW)


def integrate_energy(density_map: EnergyDensityMap) -> float:
    if density_map.representation is not RAW:
        raise ValueError("integrate_energy requires a RAW kcal-per-pixel map")
    return float(np.sum(density_map.values, dtype=np.float64))


def compute_dataset_scale(maps) -> float:
    """255 divided by the largest raw pixel value over all maps."""
    peak = 0.0
    for m in maps:
        values = m.values if isinstance(m, EnergyDensityMap) else np.asarray(m)
        if values.size:
            peak = max(peak, float(values.max()))
    if peak <= 0:
        raise ValueError("degenerate dataset: every density map is zero")
    return 255.0 / peak


def scale_density_map(density_map: EnergyDensityMap, target: Representation,
                      density_scale: float | None = None) -> EnergyDensityMap:
    """Convert between RAW, SCALED and SIGNED representations.

    RAW -> SCALED multiplies by ``density_scale`` and clamps to [0, 255];
    SCALED -> SIGNED is ``v / 127.5 - 1``.  Inverse directions and the
    two-step RAW <-> SIGNED chain are supported.
    """
    target = Representation(target)
    source = density_map.representation
    v = np.asarray(density_map.values, dtype=np.float64)
    needs_scale = RAW in (source, target) and source is not target
    if needs_scale and not (density_scale is not None and density_scale > 0):
        raise ValueError("density_scale must be positive")
    if source is target:
        return EnergyDensityMap(v.copy(), target, density_map.scale_used)

    if source is RAW:
        v = np.clip(v * density_scale, 0.0, 255.0)
    elif source is SIGNED:
        v = (v + 1.0) * 127.5
    # v is now SCALED
    if target is SIGNED:
        v = v / 127.5 - 1.0
    elif target is RAW:
        v = v / density_scale
    return EnergyDensityMap(v, target, density_scale if needs_scale else density_map.scale_used)


def map_path(out_dir, dish_id: str, representation: Representation) -> Path:
    suffix = "density.raw" if Representation(representation) is RAW else "density.png"
    return Path(out_dir) / f"{dish_id}.{suffix}"


def save_raw_map(density_map: EnergyDensityMap, path) -> None:
    """Binary float32 grid behind a ``(magic, H, W)`` little-endian header."""
    if density_map.representation is not RAW:
        raise ValueError("only RAW maps use the float32 format")
    values = np.ascontiguousarray(density_map.values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RAW_MAGIC, h, w))
        fh.write(values.tobytes())


def load_raw_map(path) -> EnergyDensityMap:
    data = Path(path).read_bytes()
    magic, h, w = _HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise ValueError(f"{path}: not a raw density map")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size, count=h * w)
    return EnergyDensityMap(values.reshape(h, w).astype(np.float64), RAW)


def save_scaled_map(density_map: EnergyDensityMap, path) -> None:
    """8-bit grayscale PNG of a SCALED map (values rounded)."""
    if density_map.representation is not SCALED:
        raise ValueError("only SCALED maps are stored as 8-bit images")
    img = np.clip(np.rint(density_map.values), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")


def load_scaled_map(path) -> EnergyDensityMap:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None or img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"{path}: expected an 8-bit grayscale density image")
    return EnergyDensityMap(img.astype(np.float64), SCALED)


def load_mask(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ValueError(f"could not read mask {path}")
    if img.ndim != 2:
        raise ValueError(f"{path}: mask must be single-channel")
    return img.astype(np.int64)


def build_dataset_maps(records, out_dir, scale_records=None) -> float:
    """Build, scale and persist ground-truth maps for every record.

    The dataset scale is computed over ``scale_records`` (defaults to all
    ``records``) and applied to every map.  Writes ``<id>.density.raw`` and
    ``<id>.density.png`` into ``out_dir`` and returns the scale.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = {}
    for r in records:
        if r.mask_path is None:
            raise ValueError(f"{r.dish_id}: no segmentation mask")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ZeroPixelIngredientWarning)
            raw[r.dish_id] = build_raw_density_map(load_mask(r.mask_path), r.ingredients)
        for w in caught:
            logger.warning("%s: %s", r.dish_id, w.message)
    scope = records if scale_records is None else scale_records
    scale = compute_dataset_scale(raw[r.dish_id] for r in scope)
    for dish_id, m in raw.items():
        save_raw_map(m, map_path(out_dir, dish_id, RAW))
        save_scaled_map(scale_density_map(m, SCALED, scale), map_path(out_dir, dish_id, SCALED))
    return scale
