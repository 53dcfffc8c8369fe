"""The ``esi`` command line: simulate | train | eval | localize.

Experiments are driven by a strict JSON config (unknown keys rejected).
Every command is deterministic under a fixed seed. Exit codes: 0 success,
2 validation, 3 data/IO, 4 numerical.
"""

import argparse
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import model as fm
from . import metrics as mx
from .errors import (
    ConfigError,
    DataError,
    NumericalError,
    ParameterError,
)
from .geometry import (
    build_lead_field,
    build_synthetic_source_space,
    load_lead_field,
    load_source_space,
    save_lead_field,
    save_source_space,
)
from .nmm import (
    SimulationConfig,
    generate_dataset,
    load_manifest,
    load_sample,
)
from .plotting import topography_svg
from .sloreta import sloreta_solve
from .tensorio import load_tensor, save_tensor

EXIT_VALIDATION = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_GRID_CELL = {
    "type": "object",
    "additionalProperties": False,
    "required": ["snr_db", "n_sources", "extent"],
    "properties": {
        "snr_db": {"type": ["number", "string"]},
        "n_sources": {"type": "integer", "minimum": 1},
        "extent": {"type": "integer", "minimum": 1},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "geometry", "simulation", "model", "training",
                 "evaluation", "paths"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_regions", "k_neighbors", "n_channels"],
            "properties": {
                "n_regions": {"type": "integer", "minimum": 8},
                "k_neighbors": {"type": "integer", "minimum": 1},
                "n_channels": {"type": "integer", "minimum": 2},
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_timepoints", "sample_rate", "grid",
                         "n_samples_per_cell"],
            "properties": {
                "n_timepoints": {"type": "integer", "minimum": 32},
                "sample_rate": {"type": "number", "minimum": 100},
                "preset": {"enum": ["alpha", "spike"]},
                "grid": {"type": "array", "minItems": 1, "items": _GRID_CELL},
                "n_samples_per_cell": {"type": "integer", "minimum": 1},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "patch_len": {"type": "integer", "minimum": 2},
                "overlap": {"type": "integer", "minimum": 0},
                "tau": {"type": "number", "exclusiveMinimum": 0},
                "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                "n_blocks": {"type": "integer", "minimum": 1},
                "attention_dim": {"type": "integer", "minimum": 1},
                "mlp_hidden": {"type": "integer", "minimum": 1},
                "gru_hidden": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "use_spectral": {"type": "boolean"},
                "use_temporal": {"type": "boolean"},
                "use_patch": {"type": "boolean"},
                "spectral_reweight": {"type": "boolean"},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "plateau_patience": {"type": "integer", "minimum": 1},
                "lr_floor": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sloreta_lambda": {"type": "number", "minimum": 0},
                "threshold": {"type": "number", "exclusiveMinimum": 0,
                              "maximum": 1},
            },
        },
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "required": ["workdir"],
            "properties": {"workdir": {"type": "string"}},
        },
    },
}


def load_config(path, seed_override=None):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise DataError(f"config not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"config invalid at {list(err.absolute_path)}: "
                          f"{err.message}") from err
    if seed_override is not None:
        doc["seed"] = seed_override
    return doc


def _model_config(doc):
    geo, sim = doc["geometry"], doc["simulation"]
    return fm.FairConfig(n_channels=geo["n_channels"],
                         n_regions=geo["n_regions"],
                         n_timepoints=sim["n_timepoints"],
                         **doc["model"])


def _build_geometry(doc):
    geo = doc["geometry"]
    space = build_synthetic_source_space(geo["n_regions"], geo["k_neighbors"],
                                         seed=doc["seed"])
    lf = build_lead_field(space, geo["n_channels"], seed=doc["seed"] + 1)
    return space, lf


def _workdir(doc, out):
    return Path(out) if out else Path(doc["paths"]["workdir"])


def cmd_simulate(doc, out):
    out_dir = _workdir(doc, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    space, lf = _build_geometry(doc)
    save_source_space(space, out_dir / "space.json")
    save_lead_field(lf, out_dir / "leadfield.esit")
    sim = doc["simulation"]
    grid = []
    for cell in sim["grid"]:
        snr = float("inf") if cell["snr_db"] == "inf" else float(cell["snr_db"])
        grid.append(SimulationConfig(
            snr_db=snr, n_sources=cell["n_sources"], extent=cell["extent"],
            n_timepoints=sim["n_timepoints"], sample_rate=sim["sample_rate"],
            seed=0, preset=sim.get("preset", "alpha")))
    manifest = generate_dataset(space, lf, grid, sim["n_samples_per_cell"],
                                out_dir, seed_base=doc["seed"] * 100003)
    for i, cell in enumerate(sim["grid"]):
        print(f"cell {i} {cell}: {sim['n_samples_per_cell']} samples")
    print(f"manifest: {manifest}")
    return manifest


def cmd_train(doc, manifest_path, out):
    out_dir = _workdir(doc, out)
    entries = load_manifest(manifest_path)
    cfg = _model_config(doc)
    training = doc.get("training", {})
    result = fm.train(
        entries, cfg,
        epochs=training.get("epochs", 30),
        seed=doc["seed"],
        out_dir=out_dir,
        plateau_patience=training.get("plateau_patience", 3),
        lr_floor=training.get("lr_floor", 1e-6),
    )
    print(f"best val loss: {result.best_val:.6e}")
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"log: {result.log_path}")
    return result


def cmd_train_resume(doc, manifest_path, out, checkpoint):
    out_dir = _workdir(doc, out)
    entries = load_manifest(manifest_path)
    params, cfg, epoch, adam_state = fm.load_checkpoint(checkpoint)
    training = doc.get("training", {})
    result = fm.train(
        entries, cfg,
        epochs=training.get("epochs", 30),
        seed=doc["seed"],
        out_dir=out_dir,
        start_epoch=epoch or 0,
        params=params,
        adam_state=adam_state,
        plateau_patience=training.get("plateau_patience", 3),
        lr_floor=training.get("lr_floor", 1e-6),
    )
    print(f"resumed at epoch {epoch}; best val loss: {result.best_val:.6e}")
    return result


def _eval_solver(name, entries, doc, space, lf, checkpoint):
    evaluation = doc.get("evaluation", {})
    threshold = evaluation.get("threshold", mx.DEFAULT_THRESHOLD)
    if name == "fair":
        if not checkpoint:
            raise ParameterError("fair solver needs --checkpoint")
        params, cfg, _, _ = fm.load_checkpoint(checkpoint)
    reports = []
    for e in entries:
        if e["split"] != "test":
            continue
        sample = load_sample(e["path"])
        if name == "fair":
            s_hat = fm.forward(sample.X, params, cfg).data
        else:
            s_hat = sloreta_solve(lf, sample.X,
                                  evaluation.get("sloreta_lambda", 0.05))
        reports.append(mx.evaluate(s_hat, sample, space, threshold))
    if not reports:
        raise DataError("manifest has no test samples")
    return reports


def cmd_eval(doc, manifest_path, out, solvers, checkpoint):
    out_dir = _workdir(doc, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(manifest_path)
    entries = load_manifest(manifest_path)
    space = load_source_space(manifest_path.parent / "space.json")
    lf = load_lead_field(manifest_path.parent / "leadfield.esit")
    summaries = {}
    paths = []
    for name in solvers:
        reports = _eval_solver(name, entries, doc, space, lf, checkpoint)
        csv_path = out_dir / f"eval_{name}.csv"
        mx.write_report_csv(reports, csv_path)
        summaries[name] = mx.aggregate(reports)
        paths.append(csv_path)
    summary_path = out_dir / "eval_summary.json"
    mx.write_summary_json(summaries, summary_path)
    paths.append(summary_path)
    for name, summary in summaries.items():
        le = summary["le_mm"]["mean"]
        print(f"{name}: precision {summary['precision']['mean']:.2f}% "
              f"recall {summary['recall']['mean']:.2f}% "
              f"LE {'n/a' if le is None else f'{le:.2f}'} mm "
              f"nMSE {summary['nmse']['mean']:.4f}")
    return paths


def cmd_localize(doc, checkpoint, fragment_path, out):
    out_dir = _workdir(doc, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, cfg, _, _ = fm.load_checkpoint(checkpoint)
    fragment = load_tensor(fragment_path).astype(np.float64)
    if fragment.shape != (cfg.n_channels, cfg.n_timepoints):
        raise ParameterError(
            f"fragment is {fragment.shape}, checkpoint expects "
            f"({cfg.n_channels}, {cfg.n_timepoints})"
        )
    s_hat = fm.forward(fragment, params, cfg).data
    est_path = out_dir / "estimate.esit"
    save_tensor(s_hat, est_path)
    workdir = Path(doc["paths"]["workdir"])
    space = load_source_space(workdir / "space.json")
    svg_path = out_dir / "estimate.svg"
    svg_path.write_text(topography_svg(space, s_hat))
    print(f"estimate: {est_path}")
    print(f"topography: {svg_path}")
    return est_path, svg_path


def build_parser():
    parser = argparse.ArgumentParser(
        prog="esi",
        description="Simulate paired source/scalp data, train the learned "
                    "solver, and evaluate against sLORETA.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "train", "eval", "localize"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        if name in ("train", "eval"):
            p.add_argument("--manifest", default=None)
        if name in ("train", "eval", "localize"):
            p.add_argument("--checkpoint", default=None)
        if name == "eval":
            p.add_argument("--solver", choices=["fair", "sloreta", "both"],
                           default="fair")
        if name == "localize":
            p.add_argument("--fragment", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        doc = load_config(args.config, seed_override=args.seed)
        workdir = Path(doc["paths"]["workdir"])
        if args.command == "simulate":
            cmd_simulate(doc, args.out)
        elif args.command == "train":
            manifest = args.manifest or workdir / "manifest.json"
            if args.checkpoint:
                cmd_train_resume(doc, manifest, args.out, args.checkpoint)
            else:
                cmd_train(doc, manifest, args.out)
        elif args.command == "eval":
            manifest = args.manifest or workdir / "manifest.json"
            solvers = ["fair", "sloreta"] if args.solver == "both" else [args.solver]
            cmd_eval(doc, manifest, args.out, solvers, args.checkpoint)
        elif args.command == "localize":
            cmd_localize(doc, args.checkpoint, args.fragment, args.out)
    except (ConfigError, ParameterError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DataError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
