"""Synthetic overhead eating scenes with exact energy, mask and depth ground truth.

Each dish is a plate disk on a table with one or two non-overlapping food
ellipses.  A food's energy is its palette density (kcal per pixel) times its
pixel count, so the ground-truth density map reproduces the palette density
exactly.  Depth is the plate plane minus the food's height, in 1e-4 m units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .depth import encode_depth
from .records import DatasetManifest, DishRecord, IngredientRecord, save_manifest, write_metadata

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoodType:
    name: str
    color: tuple  # RGB
    kcal_per_pixel: float
    height: int  # depth units above the plate


DEFAULT_PALETTE = (
    FoodType("broccoli", (40, 140, 50), 0.25, 300),
    FoodType("carrot", (235, 120, 30), 0.35, 200),
    FoodType("salmon", (250, 150, 130), 1.6, 250),
    FoodType("rice", (225, 205, 120), 1.2, 350),
    FoodType("steak", (110, 55, 35), 2.2, 280),
    FoodType("tomato", (205, 25, 35), 0.2, 400),
)

TABLE_COLOR = (150, 110, 75)
PLATE_COLOR = (236, 236, 232)


@dataclass
class SynthConfig:
    n_dishes: int = 200
    image_side: int = 64
    food_palette: tuple = DEFAULT_PALETTE
    max_foods_per_dish: int = 2
    seed: int = 0
    plate_depth: int = 3000
    min_dish_kcal: float = 10.0
    color_noise: float = 4.0
    dropout_fraction: float = 0.0
    max_retries: int = 50

    def __post_init__(self):
        if self.n_dishes < 1:
            raise ValueError("n_dishes must be >= 1")
        if any(f.kcal_per_pixel <= 0 for f in self.food_palette):
            raise ValueError("palette energy densities must be positive")
        if not 1 <= self.max_foods_per_dish <= len(self.food_palette):
            raise ValueError("max_foods_per_dish must be in [1, palette size]")


@dataclass
class SynthDish:
    dish_id: str
    rgb: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    foods: list = field(default_factory=list)  # (FoodType, pixel count)

    @property
    def ingredients(self):
        return tuple(IngredientRecord(f.name, f.kcal_per_pixel * n) for f, n in self.foods)


def _place_food(rng, side, plate, occupied):
    r_lo, r_hi = max(2, side * 0.07), side * 0.17
    axes = (int(rng.uniform(r_lo, r_hi)), int(rng.uniform(r_lo, r_hi)))
    center = (int(rng.uniform(0.25, 0.75) * side), int(rng.uniform(0.25, 0.75) * side))
    angle = float(rng.uniform(0, 180))
    region = np.zeros((side, side), np.uint8)
    cv2.ellipse(region, center, axes, angle, 0, 360, 1, thickness=-1)
    region = region.astype(bool)
    if not region.any() or (region & ~plate).any() or (region & occupied).any():
        return None
    return region


def render_dish(config: SynthConfig, index: int) -> SynthDish:
    """Deterministically render dish ``index`` from its own RNG stream."""
    side = config.image_side
    rng = np.random.default_rng([config.seed, index])
    yy, xx = np.mgrid[:side, :side]
    c = (side - 1) / 2.0
    plate = (yy - c) ** 2 + (xx - c) ** 2 <= (0.45 * side) ** 2
    palette = config.food_palette

    for _ in range(config.max_retries):
        n_foods = int(rng.integers(1, config.max_foods_per_dish + 1))
        kinds = rng.choice(len(palette), size=n_foods, replace=False)
        mask = np.zeros((side, side), np.uint8)
        foods = []
        for label, kind in enumerate(kinds, start=1):
            region = None
            for _ in range(config.max_retries):
                region = _place_food(rng, side, plate, mask > 0)
                if region is not None:
                    break
            if region is None:
                break
            mask[region] = label
            foods.append((palette[kind], int(region.sum())))
        if len(foods) == n_foods and sum(f.kcal_per_pixel * n for f, n in foods) >= config.min_dish_kcal:
            break
    else:
        raise RuntimeError(f"could not place foods for dish {index}")

    rgb = np.empty((side, side, 3), np.float64)
    rgb[:] = TABLE_COLOR
    rgb[plate] = PLATE_COLOR
    depth = np.full((side, side), config.plate_depth, np.int64)
    for label, (food, _) in enumerate(foods, start=1):
        rgb[mask == label] = food.color
        depth[mask == label] = config.plate_depth - food.height
    if config.color_noise:
        rgb += rng.normal(0.0, config.color_noise, rgb.shape)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    if config.dropout_fraction:
        depth[rng.random(depth.shape) < config.dropout_fraction] = 0
    return SynthDish(f"dish_{index:05d}", rgb, mask, depth.astype(np.uint16), foods)


def generate_synthetic_dataset(config: SynthConfig, out) -> DatasetManifest:
    """Write RGB/depth/mask images, ``metadata.csv`` and ``manifest.json`` under ``out``."""
    out = Path(out)
    for sub in ("rgb", "depth", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(config.n_dishes):
        dish = render_dish(config, i)
        rgb_path = out / "rgb" / f"{dish.dish_id}.png"
        depth_path = out / "depth" / f"{dish.dish_id}.png"
        mask_path = out / "mask" / f"{dish.dish_id}.png"
        cv2.imwrite(str(rgb_path), cv2.cvtColor(dish.rgb, cv2.COLOR_RGB2BGR))
        encode_depth(dish.depth, depth_path)
        cv2.imwrite(str(mask_path), dish.mask)
        ingredients = dish.ingredients
        records.append(DishRecord(dish.dish_id, rgb_path,
                                  sum(i.energy_kcal for i in ingredients), ingredients,
                                  depth_path=depth_path, mask_path=mask_path))
    write_metadata(records, out / "metadata.csv")
    manifest = DatasetManifest(records, seed=config.seed)
    save_manifest(manifest, out / "manifest.json")
    logger.info("wrote %d synthetic dishes to %s", len(records), out)
    return manifest
