"""Training, MAE/MAPE evaluation and the stream/normalization ablation table."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .depth import decode_depth, normalize_depth, postprocess_depth
from .fusion import (REDUCED_SIDE, STANDARD_SIDE, AblationConfig, EnergyRegressor, Stream,
                     default_ablation_configs, ordered_streams, stack_streams)
from .objective import TrainingConfig
from .records import TEST, TRAIN, DatasetManifest

logger = logging.getLogger(__name__)

# Published results on the curated Nutrition5k subset, in default row order:
# (MAE kCal, MAPE %).
_REFERENCE_VALUES = [(26.85, 40.64), (13.35, 16.90), (76.86, 133.88),
                     (17.54, 23.20), (14.65, 16.88),
                     (15.83, 27.04), (13.29, 13.57),
                     (12.75, 16.83)]
REFERENCE_TABLE = {cfg.label: v for cfg, v in zip(default_ablation_configs(), _REFERENCE_VALUES)}

# Baselines published with Nutrition5k (full dataset): (name, MAE kCal, MAPE %).
NUTRITION5K_BASELINES = (
    ("2D direct prediction", 70.6, 26.1),
    ("depth as 4th channel", 47.6, 18.8),
    ("volume scalar", 41.3, 16.5),
)


class MissingStreamError(ValueError):
    pass


@dataclass
class EvalReport:
    rows: list  # (dish_id, e, e_hat)
    mae_kcal: float
    mape_percent: float
    label: str = ""
    reference_rows: list = field(default_factory=list)  # (label, mae, mape)

    def to_dict(self):
        return {
            "label": self.label,
            "mae_kcal": self.mae_kcal,
            "mape_percent": self.mape_percent,
            "per_dish": [{"dish_id": d, "e": e, "e_hat": p} for d, e, p in self.rows],
            "reference_rows": [{"label": l, "mae_kcal": m, "mape_percent": p}
                               for l, m, p in self.reference_rows],
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, ensure_ascii=False)
            fh.write("\n")


def compute_metrics(e_hat, e, dish_ids=None):
    """Return ``(MAE kcal, MAPE percent)``; MAPE is undefined for zero ground truth."""
    e_hat = np.asarray(e_hat, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if e_hat.shape != e.shape or e.ndim != 1 or not len(e):
        raise ValueError("predictions and ground truth must be equal-length 1-D arrays")
    zero = np.flatnonzero(e == 0)
    if zero.size:
        who = dish_ids[zero[0]] if dish_ids is not None else f"index {zero[0]}"
        raise ValueError(f"MAPE undefined: ground-truth energy is 0 for {who}")
    err = np.abs(e_hat - e)
    return float(err.mean()), float((err / e).mean() * 100.0)


def make_report(dish_ids, e, e_hat, label="", reference=True) -> EvalReport:
    mae, mape = compute_metrics(e_hat, e, dish_ids)
    refs = []
    if reference and label in REFERENCE_TABLE:
        refs.append((label, *REFERENCE_TABLE[label]))
    rows = [(d, float(a), float(b)) for d, a, b in zip(dish_ids, e, e_hat)]
    return EvalReport(rows, mae, mape, label, refs)


def _read_rgb(path, side):
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise MissingStreamError(f"could not read RGB image {path}")
    img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    if side is not None and img.shape[:2] != (side, side):
        img = cv2.resize(img, (side, side), interpolation=cv2.INTER_AREA)
    return img


def _resize(grid, side):
    if grid.shape[-2:] == (side, side):
        return grid
    return cv2.resize(grid, (side, side), interpolation=cv2.INTER_LINEAR)


def check_stream_sources(records, streams, generator):
    streams = ordered_streams(streams)
    if Stream.DENSITY in streams and generator is None:
        raise MissingStreamError("density stream requires a trained generator")
    if Stream.DEPTH in streams:
        missing = [r.dish_id for r in records
                   if r.depth_path is None or not Path(r.depth_path).is_file()]
        if missing:
            raise MissingStreamError(f"depth maps missing for {len(missing)} dishes, "
                                     f"e.g. {missing[:3]}")
    missing = [r.dish_id for r in records if not Path(r.rgb_path).is_file()]
    if missing and (Stream.RGB in streams or Stream.DENSITY in streams):
        raise MissingStreamError(f"RGB images missing for {missing[:3]}")


def load_stream_inputs(records, streams, generator=None, side=REDUCED_SIDE,
                       dilation_kernel=5, closing_kernel=5) -> dict:
    """Per-stream arrays in [-1, 1] at ``side`` x ``side``, keyed by :class:`Stream`.

    Density maps always come from ``generator`` applied to the RGB image;
    ground-truth maps are never used here.
    """
    streams = ordered_streams(streams)
    check_stream_sources(records, streams, generator)
    out = {}
    if Stream.RGB in streams or Stream.DENSITY in streams:
        gen_side = generator.image_side if generator is not None else side
        rgb_gen = np.stack([_read_rgb(r.rgb_path, gen_side) for r in records])
        if Stream.RGB in streams:
            rgb = rgb_gen if gen_side == side else np.stack(
                [cv2.resize(im, (side, side), interpolation=cv2.INTER_AREA) for im in rgb_gen])
            out[Stream.RGB] = rgb.astype(np.float32) / 127.5 - 1.0
        if Stream.DENSITY in streams:
            maps = generator.predict(rgb_gen)
            out[Stream.DENSITY] = np.stack([_resize(m, side) for m in maps]).astype(np.float32)
    if Stream.DEPTH in streams:
        grids = []
        for r in records:
            d = postprocess_depth(decode_depth(r.depth_path), dilation_kernel, closing_kernel)
            grids.append(_resize(normalize_depth(d).values.astype(np.float32), side))
        out[Stream.DEPTH] = np.stack(grids)
    return out


def regressor_for(ablation: AblationConfig, config: TrainingConfig, reduced_backbone=False,
                  hidden_units=4096, weights_path=None) -> EnergyRegressor:
    return EnergyRegressor(
        streams=tuple(s.value for s in ablation.streams),
        normalization=ablation.normalization.value,
        reduced_backbone=reduced_backbone, hidden_units=hidden_units,
        output_scale=config.output_scale, initial_lr=config.initial_lr,
        lr_decay=config.lr_decay, decay_every_epochs=config.decay_every_epochs,
        epochs=config.epochs, batch_size=config.batch_size, seed=config.seed,
        weights_path=weights_path)


def _side(reduced_backbone):
    return REDUCED_SIDE if reduced_backbone else STANDARD_SIDE


def train_regressor(manifest: DatasetManifest, ablation: AblationConfig, config: TrainingConfig,
                    generator=None, reduced_backbone=False, hidden_units=4096,
                    weights_path=None, dilation_kernel=5, closing_kernel=5, inputs=None):
    """Fit a regressor on the TRAIN split; returns ``(model, loss_history)``.

    ``inputs`` may carry preloaded per-stream arrays for the TRAIN records.
    """
    records = manifest.subset(TRAIN)
    if not records:
        raise ValueError("TRAIN split is empty")
    if inputs is None:
        inputs = load_stream_inputs(records, ablation.streams, generator,
                                    _side(reduced_backbone), dilation_kernel, closing_kernel)
    X = stack_streams(inputs, ablation.streams)
    y = np.array([r.total_energy_kcal for r in records])
    model = regressor_for(ablation, config, reduced_backbone, hidden_units, weights_path)
    model.fit(X, y)
    return model, model.loss_history_


def evaluate(model: EnergyRegressor, manifest: DatasetManifest, split: str = TEST,
             generator=None, dilation_kernel=5, closing_kernel=5, inputs=None) -> EvalReport:
    """MAE/MAPE of ``model`` over one split, with per-dish rows."""
    records = manifest.subset(split)
    if not records:
        raise ValueError(f"{split} split is empty")
    ablation = model.ablation
    if inputs is None:
        inputs = load_stream_inputs(records, ablation.streams, generator,
                                    _side(model.reduced_backbone), dilation_kernel, closing_kernel)
    e_hat = model.predict(stack_streams(inputs, ablation.streams))
    e = [r.total_energy_kcal for r in records]
    return make_report([r.dish_id for r in records], e, e_hat, ablation.label)


def mean_baseline_report(manifest: DatasetManifest, split: str = TEST) -> EvalReport:
    """Predict the TRAIN mean energy for every dish."""
    mean = float(np.mean([r.total_energy_kcal for r in manifest.subset(TRAIN)]))
    records = manifest.subset(split)
    return make_report([r.dish_id for r in records], [r.total_energy_kcal for r in records],
                       [mean] * len(records), "train-mean", reference=False)


@dataclass
class AblationRow:
    config: AblationConfig
    report: EvalReport | None = None
    history: list = field(default_factory=list)
    error: str | None = None

    @property
    def reference(self):
        return REFERENCE_TABLE.get(self.config.label, (None, None))


def run_ablation(manifest: DatasetManifest, configs=None, training: TrainingConfig | None = None,
                 generator=None, reduced_backbone=False, hidden_units=4096, weights_path=None,
                 dilation_kernel=5, closing_kernel=5) -> list[AblationRow]:
    """Train and evaluate every configuration on the shared split and seed.

    A failing row is recorded with its error and the remaining rows still run.
    """
    configs = default_ablation_configs() if configs is None else list(configs)
    if not configs:
        raise ValueError("no ablation configurations given")
    training = training or TrainingConfig()
    side = _side(reduced_backbone)
    cache = {}

    def inputs_for(part, streams):
        out = {}
        for s in streams:
            key = (part, s)
            if key not in cache:
                cache[key] = load_stream_inputs(manifest.subset(part), (s,), generator, side,
                                                dilation_kernel, closing_kernel)[s]
            out[s] = cache[key]
        return out

    rows = []
    for cfg in configs:
        try:
            model, history = train_regressor(
                manifest, cfg, training, generator, reduced_backbone, hidden_units,
                weights_path, inputs=inputs_for(TRAIN, cfg.streams))
            report = evaluate(model, manifest, TEST, generator,
                              inputs=inputs_for(TEST, cfg.streams))
            rows.append(AblationRow(cfg, report, history))
            logger.info("%s: MAE %.2f MAPE %.2f", cfg.label, report.mae_kcal, report.mape_percent)
        except Exception as exc:  # noqa: BLE001 - a failed row must not stop the table
            logger.exception("ablation row %s failed", cfg.label)
            rows.append(AblationRow(cfg, error=f"{type(exc).__name__}: {exc}"))
    return rows


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_ablation_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "mae_kcal", "mape_percent", "ref_mae", "ref_mape"])
        for row in rows:
            ref_mae, ref_mape = row.reference
            mae = row.report.mae_kcal if row.report else None
            mape = row.report.mape_percent if row.report else None
            w.writerow([row.config.label, _fmt(mae), _fmt(mape), _fmt(ref_mae), _fmt(ref_mape)])


def write_ablation_json(rows, path):
    data = []
    for row in rows:
        ref_mae, ref_mape = row.reference
        data.append({
            "label": row.config.label,
            "key": row.config.key,
            "streams": [s.value for s in row.config.streams],
            "normalization": row.config.normalization.value,
            "report": row.report.to_dict() if row.report else None,
            "ref_mae": ref_mae,
            "ref_mape": ref_mape,
            "error": row.error,
        })
    payload = {"rows": data,
               "nutrition5k_baselines": [{"method": n, "mae_kcal": m, "mape_percent": p}
                                         for n, m, p in NUTRITION5K_BASELINES]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, ensure_ascii=False)
        fh.write("\n")


def write_loss_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss"])
        for h in history:
            w.writerow([h["epoch"], repr(h["lr"]), repr(h["train_loss"])])
