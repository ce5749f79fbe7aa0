"""Command-line entry point: ``foodenergy <subcommand> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import cv2
import numpy as np

from . import __version__
from .curation import (CurationRules, apply_curation_rules, distribution_stats, export_stats,
                       read_exclusion_file, stratified_split)
from .density import (SCALED, SIGNED, EnergyDensityMap, build_dataset_maps, load_scaled_map,
                      map_path, save_scaled_map, scale_density_map)
from .fusion import AblationConfig, EnergyRegressor, default_ablation_configs
from .generator import DensityMapGenerator, GanConfig
from .harness import (AblationRow, _read_rgb, evaluate, run_ablation, train_regressor,
                      write_ablation_csv, write_ablation_json, write_loss_history)
from .objective import TrainingConfig
from .records import (TRAIN, DatasetManifest, load_manifest, load_metadata,
                      save_manifest, validate_record)
from .synthetic import SynthConfig, generate_synthetic_dataset

logger = logging.getLogger("foodenergy")


def _provenance(path: Path, command: str, args: dict) -> None:
    import torch

    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(args.items())
              if k not in ("func", "config", "verbose")}
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    record = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(blob).hexdigest()[:16],
        "seed": config.get("seed"),
        "versions": {"foodenergy": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "torch": torch.__version__},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.name + suffix)


def _training_config(a) -> TrainingConfig:
    return TrainingConfig(initial_lr=a.lr, lr_decay=a.lr_decay, decay_every_epochs=a.decay_every,
                          epochs=a.epochs, output_scale=a.output_scale, seed=a.seed,
                          batch_size=a.batch_size)


def _load_generator(path):
    return DensityMapGenerator.load(path) if path else None


# -- subcommands -----------------------------------------------------------

def cmd_synth(a):
    out = Path(a.out)
    cfg = SynthConfig(n_dishes=a.n, image_side=a.side, seed=a.seed,
                      dropout_fraction=a.dropout_fraction)
    manifest = generate_synthetic_dataset(cfg, out)
    _provenance(out / "provenance.json", "synth", vars(a))
    print(f"wrote {len(manifest.records)} dishes to {out}")


def cmd_curate(a):
    records, rejected = load_metadata(a.root, a.schema)
    valid = []
    for r in records:
        problems = validate_record(r, check_files=True)
        if problems:
            rejected.append((r.dish_id, problems))
        else:
            valid.append(r)
    exclusions = read_exclusion_file(a.exclude) if a.exclude else frozenset()
    rules = CurationRules(a.max_ingredients, a.min_kcal, exclusions, a.require_depth)
    kept, dropped = apply_curation_rules(valid, rules)
    if not kept:
        raise ValueError("curation kept no records")
    manifest = DatasetManifest(kept, seed=a.seed)
    manifest.split, manifest.strata_edges = stratified_split(manifest, a.train_fraction,
                                                             a.strata, a.seed)
    out = Path(a.out)
    save_manifest(manifest, out)
    with open(_sidecar(out, ".dropped.json"), "w") as fh:
        json.dump({"rejected": [[d, reasons] for d, reasons in rejected],
                   "dropped": [[d, reason] for d, reason in dropped]}, fh, indent=2)
    _provenance(_sidecar(out, ".provenance.json"), "curate", vars(a))
    n_train = sum(v == TRAIN for v in manifest.split.values())
    print(f"kept {len(kept)} dishes ({n_train} train / {len(kept) - n_train} test), "
          f"dropped {len(dropped)}, rejected {len(rejected)}")


def cmd_build_gt(a):
    manifest = load_manifest(a.manifest)
    out = Path(a.out)
    maps_dir = out / "maps"
    scope = manifest.records if a.scale_scope == "all" else manifest.subset(TRAIN)
    manifest.density_scale = build_dataset_maps(manifest.records, maps_dir, scale_records=scope)
    manifest.density_dir = maps_dir
    save_manifest(manifest, out / "manifest.json")
    _provenance(out / "provenance.json", "build-gt", vars(a))
    print(f"density scale {manifest.density_scale:.6g}; manifest at {out / 'manifest.json'}")


def _gan_pairs(manifest: DatasetManifest, side: int):
    if manifest.density_dir is None:
        raise ValueError("manifest has no density maps; run build-gt first")
    records = manifest.subset(TRAIN)
    X = np.stack([_read_rgb(r.rgb_path, side) for r in records])
    y = []
    for r in records:
        signed = scale_density_map(load_scaled_map(map_path(manifest.density_dir, r.dish_id, SCALED)),
                                   SIGNED).values
        if signed.shape != (side, side):
            signed = cv2.resize(signed, (side, side), interpolation=cv2.INTER_LINEAR)
        y.append(signed)
    return X, np.stack(y)


def cmd_train_gan(a):
    manifest = load_manifest(a.manifest)
    config = GanConfig(image_side=a.side, l1_weight=a.l1_weight, epochs=a.epochs,
                       learning_rate=a.lr, seed=a.seed, ngf=a.ngf, ndf=a.ndf,
                       batch_size=a.batch_size)
    X, y = _gan_pairs(manifest, config.image_side)
    model = DensityMapGenerator.from_config(config).fit(X, y)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    with open(_sidecar(out, ".history.json"), "w") as fh:
        json.dump(model.history_, fh, indent=2)
    _provenance(_sidecar(out, ".provenance.json"), "train-gan", vars(a))
    print(f"trained generator for {config.epochs} epochs on {len(X)} pairs -> {out}")


def cmd_infer_gan(a):
    manifest = load_manifest(a.manifest)
    model = DensityMapGenerator.load(a.ckpt)
    records = manifest.records if a.split == "all" else manifest.subset(a.split.upper())
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    X = np.stack([_read_rgb(r.rgb_path, model.image_side) for r in records])
    maps = model.predict(X)
    for r, m in zip(records, maps):
        np.save(out / f"{r.dish_id}.generated.npy", m.astype(np.float32))
        save_scaled_map(scale_density_map(EnergyDensityMap(m, SIGNED), SCALED),
                        out / f"{r.dish_id}.generated.png")
    _provenance(out / "provenance.json", "infer-gan", vars(a))
    print(f"wrote {len(records)} generated maps to {out}")


def cmd_train(a):
    manifest = load_manifest(a.manifest)
    ablation = AblationConfig(tuple(a.streams.split(",")), a.norm)
    model, history = train_regressor(manifest, ablation, _training_config(a),
                                     _load_generator(a.gan_ckpt), a.reduced_backbone, a.hidden,
                                     a.weights, a.dilate, a.close)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    write_loss_history(history, _sidecar(out, ".loss.csv"))
    _provenance(_sidecar(out, ".provenance.json"), "train", vars(a))
    last = history[-1]["train_loss"] if history else float("nan")
    print(f"trained {ablation.label} for {len(history)} epochs (final loss {last:.5f}) -> {out}")


def cmd_eval(a):
    manifest = load_manifest(a.manifest)
    model = EnergyRegressor.load(a.model)
    report = evaluate(model, manifest, a.split.upper(), _load_generator(a.gan_ckpt),
                      a.dilate, a.close)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    write_ablation_csv([AblationRow(model.ablation, report)], out / "report.csv")
    _provenance(out / "provenance.json", "eval", vars(a))
    print(f"{report.label}: MAE {report.mae_kcal:.2f} kCal, MAPE {report.mape_percent:.2f}%")


def cmd_ablate(a):
    manifest = load_manifest(a.manifest)
    configs = default_ablation_configs()
    if a.only:
        wanted = set(a.only.split(","))
        configs = [c for c in configs if c.key in wanted]
    rows = run_ablation(manifest, configs, _training_config(a), _load_generator(a.gan_ckpt),
                        a.reduced_backbone, a.hidden, a.weights, a.dilate, a.close)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(rows, out / "ablation.csv")
    write_ablation_json(rows, out / "ablation.json")
    for i, row in enumerate(rows, start=1):
        write_loss_history(row.history, out / f"row{i}_loss.csv")
    _provenance(out / "provenance.json", "ablate", vars(a))
    for row in rows:
        if row.report:
            print(f"{row.config.label:>22}  MAE {row.report.mae_kcal:8.2f}  "
                  f"MAPE {row.report.mape_percent:8.2f}")
        else:
            print(f"{row.config.label:>22}  FAILED  {row.error}")
    if any(row.error for row in rows):
        return 1


def cmd_stats(a):
    manifest = load_manifest(a.manifest)
    stats = distribution_stats(manifest.records, a.bins)
    written = export_stats(stats, a.out, render=not a.no_plot)
    _provenance(Path(a.out) / "provenance.json", "stats", vars(a))
    print(f"mean {stats.mean_kcal:.2f} kCal, std {stats.std_kcal:.2f}, "
          f"outliers {stats.outlier_fraction:.3%}; wrote {', '.join(map(str, written.values()))}")


# -- argument parsing ------------------------------------------------------

def _add_training_flags(p):
    d = TrainingConfig()
    p.add_argument("--manifest", required=True)
    p.add_argument("--gan-ckpt", help="generator checkpoint (needed for the density stream)")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.initial_lr)
    p.add_argument("--lr-decay", type=float, default=d.lr_decay)
    p.add_argument("--decay-every", type=int, default=d.decay_every_epochs)
    p.add_argument("--output-scale", type=float, default=d.output_scale)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--reduced-backbone", action="store_true")
    p.add_argument("--hidden", type=int, default=4096, help="regression head width")
    p.add_argument("--weights", help="VGG-16 weights file (else $FOODENERGY_VGG16_WEIGHTS)")
    _add_morphology_flags(p)


def _add_morphology_flags(p):
    p.add_argument("--dilate", type=int, default=5, metavar="K")
    p.add_argument("--close", type=int, default=5, metavar="K")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foodenergy", description=__doc__)
    parser.add_argument("--config", help="JSON or YAML file with per-subcommand defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dropout-fraction", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("curate", help="validate, filter and split a dataset into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--schema", choices=["simple", "nutrition5k"], default="simple")
    p.add_argument("--exclude", help="file of dish ids to exclude")
    p.add_argument("--max-ingredients", type=int, default=3,
                   help="keep dishes with fewer ingredients than this")
    p.add_argument("--min-kcal", type=float, default=10.0)
    p.add_argument("--require-depth", action="store_true")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--strata", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="manifest JSON path")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("build-gt", help="build ground-truth energy density maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scale-scope", choices=["train", "all"], default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_gt)

    g = GanConfig()
    p = sub.add_parser("train-gan", help="train the RGB -> density map generator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=g.epochs)
    p.add_argument("--side", type=int, default=g.image_side)
    p.add_argument("--l1-weight", type=float, default=g.l1_weight)
    p.add_argument("--lr", type=float, default=g.learning_rate)
    p.add_argument("--ngf", type=int, default=g.ngf)
    p.add_argument("--ndf", type=int, default=g.ndf)
    p.add_argument("--batch-size", type=int, default=g.batch_size)
    p.add_argument("--seed", type=int, default=g.seed)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("infer-gan", help="write generated density maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["all", "train", "test"], default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer_gan)

    p = sub.add_parser("train", help="train the energy regressor")
    _add_training_flags(p)
    p.add_argument("--streams", default="density,depth")
    p.add_argument("--norm", default="layer_group",
                   choices=["none", "zscore", "layer", "layer_group"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained regressor")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--gan-ckpt")
    p.add_argument("--split", choices=["train", "test"], default="test")
    _add_morphology_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the stream/normalization comparison table")
    _add_training_flags(p)
    p.add_argument("--only", help="comma-separated row keys, e.g. density+depth/layer_group")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stats", help="energy distribution summary and histogram")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)
    return parser


def _read_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml
        return yaml.safe_load(text) or {}
    return json.loads(text)


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        section = _read_config(args.config).get(args.command, {})
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = [k for k in section if k.replace("-", "_") not in known]
        if unknown:
            parser.error(f"unknown keys in config section {args.command!r}: {unknown}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in section.items()})
        # flags given on the command line still win
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except Exception as exc:
        if args.verbose:
            logger.exception("command failed")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
