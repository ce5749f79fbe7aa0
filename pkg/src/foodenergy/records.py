"""Dish/ingredient records, metadata CSV ingestion and the dataset manifest."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

TRAIN = "TRAIN"
TEST = "TEST"

TOTAL_REL_TOL = 1e-6

MISSING_FILE = "missing-file"
NEGATIVE_ENERGY = "negative-energy"
TOTAL_MISMATCH = "total-mismatch"
EMPTY_NAME = "empty-name"

SIMPLE_SCHEMA = "simple"
NUTRITION5K_SCHEMA = "nutrition5k"


class MetadataError(Exception):
    """Raised when a metadata file is missing or cannot be parsed."""


@dataclass(frozen=True)
class IngredientRecord:
    name: str
    energy_kcal: float
    category: str | None = None


@dataclass(frozen=True)
class DishRecord:
    dish_id: str
    rgb_path: Path
    total_energy_kcal: float
    ingredients: tuple[IngredientRecord, ...]
    depth_path: Path | None = None
    mask_path: Path | None = None

    @property
    def n_ingredients(self) -> int:
        return len(self.ingredients)


@dataclass
class DatasetManifest:
    records: list[DishRecord]
    density_scale: float | None = None
    split: dict[str, str] = field(default_factory=dict)
    strata_edges: list[float] = field(default_factory=list)
    seed: int = 0
    density_dir: Path | None = None

    def __post_init__(self):
        ids = [r.dish_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("dish_id values must be unique within a manifest")
        known = set(ids)
        unknown = [d for d in self.split if d not in known]
        if unknown:
            raise ValueError(f"split references unknown dish ids: {unknown[:5]}")
        if self.density_scale is not None and not self.density_scale > 0:
            raise ValueError("density_scale must be positive")

    def by_id(self) -> dict[str, DishRecord]:
        return {r.dish_id: r for r in self.records}

    def subset(self, part: str) -> list[DishRecord]:
        """Records assigned to ``part`` (TRAIN or TEST), in manifest order."""
        if not self.split:
            raise ValueError("manifest has no split assignment")
        return [r for r in self.records if self.split.get(r.dish_id) == part]


def validate_record(record: DishRecord, check_files: bool = True) -> list[str]:
    """Return every violated record invariant; an empty list means ok."""
    violations = []
    if any(not ing.name.strip() for ing in record.ingredients):
        violations.append(EMPTY_NAME)
    energies = [ing.energy_kcal for ing in record.ingredients]
    if record.total_energy_kcal < 0 or any(e < 0 for e in energies):
        violations.append(NEGATIVE_ENERGY)
    if not math.isclose(sum(energies), record.total_energy_kcal,
                        rel_tol=TOTAL_REL_TOL, abs_tol=1e-12):
        violations.append(TOTAL_MISMATCH)
    if check_files:
        paths = [record.rgb_path, record.depth_path, record.mask_path]
        if any(p is not None and not Path(p).is_file() for p in paths):
            violations.append(MISSING_FILE)
    return violations


def default_paths(root: Path, dish_id: str, schema: str = SIMPLE_SCHEMA):
    """Conventional (rgb, depth, mask) locations for a dish under ``root``."""
    root = Path(root)
    if schema == NUTRITION5K_SCHEMA:
        base = root / "imagery" / "realsense_overhead" / dish_id
        mask = root / "masks" / f"{dish_id}.png"
        return base / "rgb.png", base / "depth_raw.png", mask
    return (root / "rgb" / f"{dish_id}.png",
            root / "depth" / f"{dish_id}.png",
            root / "mask" / f"{dish_id}.png")


def _parse_simple_row(row):
    dish_id, total = row[0].strip(), float(row[1])
    rest = row[2:]
    while rest and not rest[-1].strip():
        rest = rest[:-1]
    if len(rest) % 2:
        raise ValueError("ingredient columns must come in name,kcal pairs")
    ingredients = tuple(IngredientRecord(rest[i].strip(), float(rest[i + 1]))
                        for i in range(0, len(rest), 2))
    return dish_id, total, ingredients


def _parse_nutrition5k_row(row):
    # dish_id, total_calories, total_mass, total_fat, total_carb, total_protein,
    # then (ingr_id, ingr_name, grams, calories, fat, carb, protein) repeated.
    dish_id, total = row[0].strip(), float(row[1])
    rest = row[6:]
    ingredients = []
    for i in range(0, len(rest) - 6, 7):
        ingredients.append(IngredientRecord(rest[i + 1].strip(), float(rest[i + 3]),
                                            category=rest[i].strip() or None))
    return dish_id, total, tuple(ingredients)


def load_metadata(root, schema: str = SIMPLE_SCHEMA, filename: str | None = None):
    """Parse the dish metadata CSV under ``root``.

    Returns ``(records, rejected)`` where ``rejected`` lists
    ``(dish_id, reasons)`` for rows that failed parsing or validation.
    File existence is not checked here; see :func:`validate_record`.
    """
    root = Path(root)
    if schema == SIMPLE_SCHEMA:
        path = root / (filename or "metadata.csv")
        parse, has_header = _parse_simple_row, True
    elif schema == NUTRITION5K_SCHEMA:
        path = root / (filename or "metadata/dish_metadata_cafe1.csv")
        parse, has_header = _parse_nutrition5k_row, False
    else:
        raise MetadataError(f"unknown metadata schema {schema!r}")
    if not path.is_file():
        raise MetadataError(f"metadata file not found: {path}")

    records, rejected, seen = [], [], set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if has_header:
            header = next(reader, None)
            if not header or header[0].strip() != "dish_id":
                raise MetadataError(f"{path}: missing 'dish_id,total_kcal' header")
        for lineno, row in enumerate(reader, start=2 if has_header else 1):
            if not row or not "".join(row).strip():
                continue
            try:
                dish_id, total, ingredients = parse(row)
            except (ValueError, IndexError) as exc:
                rejected.append((row[0] if row else f"line{lineno}", [f"parse-error: {exc}"]))
                continue
            if dish_id in seen:
                rejected.append((dish_id, ["duplicate-id"]))
                continue
            rgb, depth, mask = default_paths(root, dish_id, schema)
            record = DishRecord(dish_id, rgb, total, ingredients,
                                depth_path=depth, mask_path=mask)
            problems = validate_record(record, check_files=False)
            if problems:
                rejected.append((dish_id, problems))
                continue
            seen.add(dish_id)
            records.append(record)
    for dish_id, reasons in rejected:
        logger.warning("rejected %s: %s", dish_id, ", ".join(reasons))
    return records, rejected


def write_metadata(records, path):
    """Write records in the simple metadata CSV layout."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dish_id", "total_kcal", "ingredient_name", "ingredient_kcal"])
        for r in records:
            row = [r.dish_id, repr(float(r.total_energy_kcal))]
            for ing in r.ingredients:
                row += [ing.name, repr(float(ing.energy_kcal))]
            writer.writerow(row)


def _rel(path, base):
    if path is None:
        return None
    return Path(os.path.relpath(Path(path).resolve(), base.resolve())).as_posix()


def _abs(value, base):
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else (base / p)


def manifest_to_dict(manifest: DatasetManifest, base: Path) -> dict:
    records = []
    for r in manifest.records:
        records.append({
            "dish_id": r.dish_id,
            "rgb_path": _rel(r.rgb_path, base),
            "depth_path": _rel(r.depth_path, base),
            "mask_path": _rel(r.mask_path, base),
            "total_energy_kcal": r.total_energy_kcal,
            "ingredients": [{"name": i.name, "energy_kcal": i.energy_kcal,
                             "category": i.category} for i in r.ingredients],
        })
    out = {
        "records": records,
        "density_scale": manifest.density_scale,
        "split": dict(manifest.split),
        "strata_edges": list(manifest.strata_edges),
        "seed": manifest.seed,
    }
    if manifest.density_dir is not None:
        out["density_dir"] = _rel(manifest.density_dir, base)
    return out


def manifest_from_dict(data: dict, base: Path) -> DatasetManifest:
    records = []
    for d in data["records"]:
        records.append(DishRecord(
            dish_id=d["dish_id"],
            rgb_path=_abs(d["rgb_path"], base),
            depth_path=_abs(d.get("depth_path"), base),
            mask_path=_abs(d.get("mask_path"), base),
            total_energy_kcal=float(d["total_energy_kcal"]),
            ingredients=tuple(IngredientRecord(i["name"], float(i["energy_kcal"]),
                                               i.get("category"))
                              for i in d["ingredients"]),
        ))
    return DatasetManifest(
        records=records,
        density_scale=data.get("density_scale"),
        split=dict(data.get("split") or {}),
        strata_edges=[float(x) for x in data.get("strata_edges") or []],
        seed=int(data.get("seed", 0)),
        density_dir=_abs(data.get("density_dir"), base),
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Persist as JSON; file paths are stored relative to the manifest's directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_to_dict(manifest, path.parent), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return manifest_from_dict(json.load(fh), path.parent)
