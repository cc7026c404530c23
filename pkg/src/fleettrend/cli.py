"""Command-line entry point.

Every command prints one JSON document on stdout; logs go to stderr.  Exit
codes: 0 success, 2 invalid input or configuration, 3 numeric failure.

A run configuration is a TOML file whose sections mirror the modules::

    format_version = "1"
    [data]
    fleet = "fleet.csv"
    [graph]
    mode = "spatial"        # or "correlation"
    epsilon = 0.5
    [model]
    k = 1
    window_sizes = [365]    # defaults to one year of samples per term
    [loss]
    lambda1 = 5.0
    [train]
    epochs = 500
    n_workers = 1
    [out]
    dir = "run"

Command-line flags override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import fleet_graph as fg
from .gae_array import (
    CheckpointError,
    ConfigError,
    DecompositionModel,
    ModelConfig,
    ShapeError,
    load_checkpoint,
    save_checkpoint,
)
from .objective import LossWeights, TooShortError, total_loss
from .para_trainer import (
    SplitError,
    TrainConfig,
    TrainingDiverged,
    WorkerFailure,
    benchmark_speedup,
    train_parallel,
    train_serial,
)
from .synth_fleet import CASES, DegradationSpec, SpecError, generate_fleet, paper_defaults, write_fleet
from .trend_outputs import MetricError, global_plr, mape, plr_report, scaled_ed

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

log = logging.getLogger("fleettrend")

FORMAT_VERSION = "1"
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

INVALID_ERRORS = (ConfigError, SpecError, fg.FleetError, CheckpointError, MetricError, ShapeError,
                  SplitError, TooShortError, OSError, tomllib.TOMLDecodeError, ValueError)
NUMERIC_ERRORS = (TrainingDiverged, FloatingPointError, WorkerFailure)

SECTIONS = {
    "data": {"fleet", "rdp", "value_column"},
    "graph": {"mode", "epsilon", "metric", "path"},
    "model": {f.name for f in fields(ModelConfig)} - {"series_len", "branch_lengths"},
    "loss": {f.name for f in fields(LossWeights)},
    "train": {f.name for f in fields(TrainConfig)} - {"weights"},
    "out": {"dir"},
}


class CliError(Exception):
    """Invalid usage detected by the command layer itself."""


# -- configuration -----------------------------------------------------------


def load_config(path) -> dict:
    """Read a run configuration, rejecting unknown sections and keys."""
    if path is None:
        return {name: {} for name in SECTIONS}
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file {path} does not exist")
    with path.open("rb") as fh:
        raw = tomllib.load(fh)
    version = str(raw.pop("format_version", FORMAT_VERSION))
    if version != FORMAT_VERSION:
        raise CliError(f"config format_version {version!r} is not supported")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise CliError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    out = {}
    for name, allowed in SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise CliError(f"[{name}] must be a table")
        bad = set(section) - allowed
        if bad:
            raise CliError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
        out[name] = dict(section)
    base = path.parent
    for key in ("fleet", "rdp"):
        if key in out["data"]:
            out["data"][key] = str((base / out["data"][key]).resolve())
    if "path" in out["graph"]:
        out["graph"]["path"] = str((base / out["graph"]["path"]).resolve())
    return out


def _override(section: dict, **values) -> dict:
    section = dict(section)
    section.update({k: v for k, v in values.items() if v is not None})
    return section


def _require_file(path, what: str) -> Path:
    if path is None:
        raise CliError(f"no {what} given")
    path = Path(path)
    if not path.exists():
        raise CliError(f"{what} {path} does not exist")
    return path


def _out_dir(args, cfg, default: str) -> Path:
    out = Path(args.out or cfg["out"].get("dir") or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def _load_series(path, value_column="power") -> fg.FleetSeries:
    return fg.load_fleet_csv(_require_file(path, "fleet file"), value_column=value_column)


def _graph_for(series: fg.FleetSeries, gcfg: dict) -> tuple[fg.FleetGraph, dict]:
    if gcfg.get("path"):
        return fg.read_graph(_require_file(gcfg["path"], "graph file"))
    mode = gcfg.get("mode", "spatial")
    eps = float(gcfg.get("epsilon", 0.5))
    if mode == "spatial":
        if series.locations is None:
            raise CliError("spatial graph needs lat/lon columns; use --mode correlation")
        graph = fg.build_spatial_adjacency(series.locations, eps, gcfg.get("metric", "euclidean"))
    elif mode == "correlation":
        graph = fg.build_correlation_adjacency(series, eps)
    else:
        raise CliError(f"graph mode must be 'spatial' or 'correlation', got {mode!r}")
    return graph, {"n_nodes": graph.n_nodes, "epsilon": eps, "mode": mode}


def _build_configs(cfg: dict, series: fg.FleetSeries, seed: int | None):
    mcfg = dict(cfg["model"])
    if "window_sizes" not in mcfg:
        k = int(mcfg.get("k", 1))
        mcfg["window_sizes"] = [series.samples_per_year] * k
    if seed is not None:
        mcfg["seed"] = seed
    mcfg["window_sizes"] = tuple(mcfg["window_sizes"])
    model_cfg = ModelConfig(series_len=series.n_samples, **mcfg)
    lcfg = dict(cfg["loss"])
    lcfg.setdefault("segment_window", model_cfg.window_sizes)
    weights = LossWeights(**lcfg)
    tcfg = dict(cfg["train"])
    if seed is not None:
        tcfg["seed"] = seed
    for key in ("betas", "split", "slice_windows"):
        if tcfg.get(key) is not None:
            tcfg[key] = tuple(tcfg[key])
    train_cfg = TrainConfig(weights=weights, **tcfg)
    return model_cfg, train_cfg


# -- commands ----------------------------------------------------------------


def cmd_generate(args, cfg) -> int:
    spec = paper_defaults(args.case) if args.case else DegradationSpec()
    updates = {}
    if args.rate:
        updates["annual_rate"] = args.rate[0] if len(args.rate) == 1 else tuple(args.rate)
    for name in ("breakpoint_years", "seasonal_amplitude", "noise_sd", "n_clusters",
                 "geo_jitter", "rate_jitter"):
        value = getattr(args, name)
        if value is not None:
            updates[name] = value
    spec = replace(spec, seed=args.seed if args.seed is not None else 0, **updates)
    series, rdp = generate_fleet(spec, args.nodes, args.years, args.samples_per_year)
    out = _out_dir(args, cfg, ".")
    fleet_path, rdp_path = write_fleet(series, rdp, out / f"{args.name}.csv")
    _emit({
        "fleet": str(fleet_path),
        "rdp": str(rdp_path),
        "case": spec.validate().case,
        "annual_rate": list(spec.rates()),
        "breakpoint_years": spec.breakpoint_years,
        "n_nodes": series.n_nodes,
        "n_samples": series.n_samples,
        "samples_per_year": series.samples_per_year,
        "seed": spec.seed,
    })
    return EXIT_OK


def cmd_build_graph(args, cfg) -> int:
    data = _override(cfg["data"], fleet=args.data)
    gcfg = _override(cfg["graph"], mode=args.mode, epsilon=args.epsilon, metric=args.metric)
    gcfg.pop("path", None)
    series = _load_series(data.get("fleet"), data.get("value_column", "power"))
    graph, meta = _graph_for(series, gcfg)
    out = _out_dir(args, cfg, ".")
    edges, sidecar = fg.write_graph(graph, out / "graph.txt", meta["epsilon"], meta["mode"])
    degree = graph.adjacency.sum(axis=1)
    _emit({"graph": str(edges), "meta": str(sidecar), "n_nodes": graph.n_nodes,
           "n_edges": graph.n_edges, "isolated_nodes": int((degree == 0).sum()), **meta})
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    data = _override(cfg["data"], fleet=args.data)
    gcfg = _override(cfg["graph"], path=args.graph)
    cfg = dict(cfg)
    cfg["train"] = _override(cfg["train"], n_workers=args.workers, epochs=args.epochs)
    series = _load_series(data.get("fleet"), data.get("value_column", "power"))
    graph, gmeta = _graph_for(series, gcfg)
    model_cfg, train_cfg = _build_configs(cfg, series, args.seed)
    out = _out_dir(args, cfg, "run")
    log.info("training %d branches on %d nodes x %d samples", model_cfg.n_branches,
             series.n_nodes, series.n_samples)
    timing = None
    if args.serial:
        model, records = train_serial(series.values, graph, model_cfg, train_cfg)
    else:
        model, records, timing = train_parallel(series.values, graph, model_cfg, train_cfg)
    ckpt = out / "checkpoint"
    ckpt.mkdir(parents=True, exist_ok=True)
    fg.write_graph(graph, ckpt / "graph.txt", gmeta["epsilon"], gmeta["mode"])
    save_checkpoint(model, ckpt, extra={
        "graph_file": "graph.txt",
        "node_ids": list(series.node_ids),
        "train": _train_summary(train_cfg, args.serial),
    })
    with (out / "train_log.jsonl").open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if timing is not None:
        (out / "timing.json").write_text(json.dumps(timing.as_dict(), indent=2), encoding="utf-8")
    d = model.decompose(series.values, graph)
    final = total_loss(model.target(series.values), _to_output_units(d, model), train_cfg.weights)
    _emit({"checkpoint": str(ckpt), "log": str(out / "train_log.jsonl"),
           "timing": str(out / "timing.json") if timing else None,
           "loss": final.record(), "epochs": train_cfg.epochs,
           "schedule": "serial" if args.serial else "parallel"})
    return EXIT_OK


def _to_output_units(d, model: DecompositionModel):
    from .gae_array import Decomposition

    return Decomposition((d.h_a - model.offset) / model.scale, [h / model.scale for h in d.h_f])


def _train_summary(cfg: TrainConfig, serial: bool) -> dict:
    return {"epochs": cfg.epochs, "learning_rate": cfg.learning_rate, "seed": cfg.seed,
            "n_workers": cfg.n_workers, "node_batch_size": cfg.node_batch_size,
            "serial": bool(serial), "weights": cfg.weights.as_dict()}


def cmd_decompose(args, cfg) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint directory")
    if not (ckpt / "meta.json").exists() and (ckpt / "checkpoint").is_dir():
        ckpt = ckpt / "checkpoint"  # a training run directory
    model = load_checkpoint(ckpt)
    data = _override(cfg["data"], fleet=args.data)
    series = _load_series(data.get("fleet"), data.get("value_column", "power"))
    if args.graph:
        graph, _ = fg.read_graph(_require_file(args.graph, "graph file"))
    else:
        graph, _ = fg.read_graph(_require_file(ckpt / "graph.txt", "checkpoint graph"))
    if graph.n_nodes != series.n_nodes:
        raise CliError(f"graph has {graph.n_nodes} nodes, data has {series.n_nodes}")
    d = model.decompose(series.values, graph)
    out = _out_dir(args, cfg, "decomposition")
    files = [fg.write_fleet_csv(series.with_values(d.h_a), out / "h_a.csv", "h_a")]
    for q, h in enumerate(d.h_f, start=1):
        files.append(fg.write_fleet_csv(series.with_values(h), out / f"h_f_{q}.csv", f"h_f_{q}"))
    payload = {"files": [str(f) for f in files], "n_nodes": series.n_nodes,
               "n_samples": series.n_samples, "k": d.k}
    if args.verify:
        terms = [fg.load_fleet_csv(f, f.stem).values for f in files]
        resid = series.values - sum(terms)
        payload["reconstruction_error"] = float(np.mean(resid**2))
    _emit(payload)
    return EXIT_OK


def _summary(values: np.ndarray) -> dict:
    return {"mean": float(values.mean()), "min": float(values.min()),
            "max": float(values.max()), "std": float(values.std())}


def cmd_plr(args, cfg) -> int:
    column = args.column or "h_a"
    series = fg.load_fleet_csv(_require_file(args.edp, "EDP file"), column)
    spy = args.samples_per_year or series.samples_per_year
    from .gae_array import Decomposition

    report = plr_report(Decomposition(series.values, []), spy)
    payload = json.loads(report.to_json(series.node_ids))
    payload["samples_per_year"] = spy
    if args.out:
        out = _out_dir(args, cfg, ".")
        (out / "plr.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
        fg.write_fleet_csv(series.with_values(report.edp), out / "edp.csv", "edp")
    _emit(payload)
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    edp = fg.load_fleet_csv(_require_file(args.edp, "EDP file"), args.edp_column)
    rdp = fg.load_fleet_csv(_require_file(args.rdp, "RDP file"), args.rdp_column)
    if edp.values.shape != rdp.values.shape:
        raise MetricError(f"shape mismatch: EDP {edp.values.shape} vs RDP {rdp.values.shape}")
    spy = args.samples_per_year or edp.samples_per_year
    payload = {"mape": mape(edp.values, rdp.values), "ed": scaled_ed(edp.values, rdp.values)}
    if edp.n_samples > spy:
        plr = np.array([global_plr(row, spy) for row in edp.values])
        true = np.array([global_plr(row, spy) for row in rdp.values])
        payload["per_node_plr_summary"] = _summary(plr)
        payload["plr_abs_error_summary"] = _summary(np.abs(plr - true))
    _emit(payload)
    return EXIT_OK


def cmd_benchmark(args, cfg) -> int:
    counts = [int(x) for x in args.workers.split(",")]
    if args.preset == "compute":
        series, _ = generate_fleet(paper_defaults("linear"), 50, 1024 / 256 - 1 / 256, 256)
        cfg = dict(cfg)
        cfg["model"] = _override(cfg["model"], k=3, window_sizes=[256, 128, 64])
        graph = fg.build_spatial_adjacency(series.locations, 0.5)
    else:
        data = _override(cfg["data"], fleet=args.data)
        series = _load_series(data.get("fleet"), data.get("value_column", "power"))
        graph, _ = _graph_for(series, _override(cfg["graph"], path=args.graph))
    cfg["train"] = _override(cfg["train"], epochs=args.epochs)
    model_cfg, train_cfg = _build_configs(cfg, series, args.seed)
    report = benchmark_speedup(series.values, graph, model_cfg, train_cfg, counts)
    out = _out_dir(args, cfg, "benchmark")
    (out / "speedup.csv").write_text(report.table(), encoding="utf-8")
    sys.stderr.write(report.table())
    _emit({"table": str(out / "speedup.csv"), "rows": report.rows, "flags": report.flags})
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int, help="master seed for every random choice")
    p.add_argument("--out", help="output directory")
    p.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fleettrend", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic fleet and its true aging pattern")
    _shared(p)
    p.add_argument("--case", default="linear", help=f"one of {', '.join(CASES)}")
    p.add_argument("--nodes", type=int, default=20)
    p.add_argument("--years", type=float, default=3.0)
    p.add_argument("--samples-per-year", type=int, default=365)
    p.add_argument("--rate", type=float, nargs="+", help="annual rate(s) in %%/year")
    p.add_argument("--breakpoint-years", type=float)
    p.add_argument("--seasonal-amplitude", type=float)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--n-clusters", type=int)
    p.add_argument("--geo-jitter", type=float)
    p.add_argument("--rate-jitter", type=float)
    p.add_argument("--name", default="fleet", help="output file stem")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build-graph", help="threshold a spatial or correlation kernel")
    _shared(p)
    p.add_argument("--data", help="fleet CSV")
    p.add_argument("--mode", choices=("spatial", "correlation"))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--metric", choices=("euclidean", "haversine"))
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train the branch array and write a checkpoint")
    _shared(p)
    p.add_argument("--data", help="fleet CSV")
    p.add_argument("--graph", help="edge list written by build-graph")
    p.add_argument("--serial", action="store_true", help="full-batch serial optimization")
    p.add_argument("--workers", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decompose", help="emit aging and fluctuation terms")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="fleet CSV")
    p.add_argument("--graph", help="edge list (defaults to the checkpoint's graph)")
    p.add_argument("--verify", action="store_true", help="report RE of the written terms")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("plr", help="per-node and fleet PLR from an aging-term CSV")
    _shared(p)
    p.add_argument("--edp", required=True)
    p.add_argument("--column", help="value column (default h_a)")
    p.add_argument("--samples-per-year", type=int)
    p.set_defaults(func=cmd_plr)

    p = sub.add_parser("evaluate", help="MAPE and rescaled ED of an EDP against the truth")
    _shared(p)
    p.add_argument("--edp", required=True)
    p.add_argument("--rdp", required=True)
    p.add_argument("--edp-column", default="h_a")
    p.add_argument("--rdp-column", default="rdp")
    p.add_argument("--samples-per-year", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="per-epoch time and speedup over worker counts")
    _shared(p)
    p.add_argument("--data", help="fleet CSV")
    p.add_argument("--graph", help="edge list")
    p.add_argument("--preset", choices=("compute",),
                   help="synthetic 50-node, 1024-sample, k=3 workload instead of --data")
    p.add_argument("--workers", default="1,2,4")
    p.add_argument("--epochs", type=int, default=5)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except NUMERIC_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_NUMERIC
    except (CliError, *INVALID_ERRORS) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
