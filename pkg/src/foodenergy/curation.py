"""Subset selection, stratified train/test splitting and energy statistics."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .records import TEST, TRAIN, DatasetManifest

logger = logging.getLogger(__name__)

INGREDIENT_COUNT = "ingredient-count"
MIN_ENERGY = "min-energy"
EXCLUDED = "excluded"
NO_DEPTH = "no-depth"

# Energy statistics of the curated Nutrition5k subset, for report context only.
REFERENCE_SUBSET_MEAN_KCAL = 124.96
REFERENCE_FULL_MEAN_KCAL = 254.94
REFERENCE_SUBSET_SIZE = 909


@dataclass
class CurationRules:
    max_ingredients_exclusive: int = 3
    min_total_kcal: float = 10.0
    exclusion_ids: frozenset = field(default_factory=frozenset)
    require_depth: bool = False

    def __post_init__(self):
        if self.max_ingredients_exclusive < 1:
            raise ValueError("max_ingredients_exclusive must be >= 1")
        if self.min_total_kcal < 0:
            raise ValueError("min_total_kcal must be >= 0")
        self.exclusion_ids = frozenset(self.exclusion_ids)


@dataclass
class DistributionStats:
    mean_kcal: float
    std_kcal: float
    histogram: list  # (bin lower edge, count)
    outlier_fraction: float
    range_kcal: tuple

    def to_dict(self):
        return {
            "mean_kcal": self.mean_kcal,
            "std_kcal": self.std_kcal,
            "outlier_fraction": self.outlier_fraction,
            "range_kcal": list(self.range_kcal),
            "histogram": [[lo, n] for lo, n in self.histogram],
            "reference_subset_mean_kcal": REFERENCE_SUBSET_MEAN_KCAL,
            "reference_full_mean_kcal": REFERENCE_FULL_MEAN_KCAL,
        }


def read_exclusion_file(path) -> frozenset:
    """One dish id per line; ``#`` starts a comment."""
    ids = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                ids.add(line)
    return frozenset(ids)


def apply_curation_rules(records, rules: CurationRules):
    """Split records into ``(kept, dropped)``; each drop carries one reason code."""
    kept, dropped = [], []
    for r in records:
        if r.dish_id in rules.exclusion_ids:
            reason = EXCLUDED
        elif r.n_ingredients >= rules.max_ingredients_exclusive:
            reason = INGREDIENT_COUNT
        elif r.total_energy_kcal < rules.min_total_kcal:
            reason = MIN_ENERGY
        elif rules.require_depth and r.depth_path is None:
            reason = NO_DEPTH
        else:
            kept.append(r)
            continue
        dropped.append((r.dish_id, reason))
    return kept, dropped


def quantile_edges(values, n_strata: int) -> list[float]:
    values = np.asarray(values, dtype=float)
    return [float(q) for q in np.quantile(values, np.linspace(0, 1, n_strata + 1))]


def assign_strata(values, edges) -> np.ndarray:
    """Stratum index per value; interior edges are right-closed bin boundaries."""
    inner = np.asarray(edges[1:-1], dtype=float)
    return np.searchsorted(inner, np.asarray(values, dtype=float), side="left")


def stratified_split(manifest: DatasetManifest, train_fraction: float = 0.8,
                     n_strata: int = 5, seed: int = 0):
    """Assign each record to TRAIN or TEST, stratified by total energy.

    Records are binned into ``n_strata`` quantile bins of total kCal; each
    bin is shuffled with ``seed`` and cut at ``round(train_fraction * size)``.
    Returns ``(assignment, strata_edges)``.
    """
    records = manifest.records
    if not records:
        raise ValueError("manifest is empty")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    if n_strata < 1:
        raise ValueError("n_strata must be >= 1")

    energies = np.array([r.total_energy_kcal for r in records])
    edges = quantile_edges(energies, n_strata)
    strata = assign_strata(energies, edges)
    rng = np.random.default_rng(seed)

    assignment = {}
    for s in range(n_strata):
        members = [records[i].dish_id for i in np.flatnonzero(strata == s)]
        if not members:
            continue
        if len(members) < 2:
            logger.info("stratum %d has %d record(s); assigned to TRAIN", s, len(members))
            assignment.update({d: TRAIN for d in members})
            continue
        order = rng.permutation(len(members))
        n_train = int(round(train_fraction * len(members)))
        for rank, idx in enumerate(order):
            assignment[members[idx]] = TRAIN if rank < n_train else TEST
    return assignment, edges


def distribution_stats(records, n_bins: int = 20) -> DistributionStats:
    if not records:
        raise ValueError("distribution_stats needs at least one record")
    energies = np.array([r.total_energy_kcal for r in records], dtype=float)
    mean = float(energies.mean())
    std = float(energies.std()) if len(energies) > 1 else 0.0
    counts, edges = np.histogram(energies, bins=n_bins,
                                 range=(energies.min(), energies.max()))
    outliers = np.abs(energies - mean) > 3 * std
    return DistributionStats(
        mean_kcal=mean,
        std_kcal=std,
        histogram=[(float(lo), int(n)) for lo, n in zip(edges[:-1], counts)],
        outlier_fraction=float(outliers.mean()),
        range_kcal=(float(energies.min()), float(energies.max())),
    )


def export_stats(stats: DistributionStats, out_dir, render: bool = True) -> dict:
    """Write ``histogram.csv`` and ``summary.json`` (plus a PNG when matplotlib is available)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    with open(out_dir / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lower", "count"])
        for lo, n in stats.histogram:
            w.writerow([repr(lo), n])
    written["histogram"] = out_dir / "histogram.csv"
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(stats.to_dict(), fh, indent=2)
    written["summary"] = out_dir / "summary.json"
    if render:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            return written
        lows = [lo for lo, _ in stats.histogram]
        width = (lows[1] - lows[0]) if len(lows) > 1 else 1.0
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar(lows, [n for _, n in stats.histogram], width=width or 1.0, align="edge")
        ax.set_xlabel("energy (kCal)")
        ax.set_ylabel("dishes")
        fig.tight_layout()
        fig.savefig(out_dir / "histogram.png", dpi=100)
        plt.close(fig)
        written["plot"] = out_dir / "histogram.png"
    return written
