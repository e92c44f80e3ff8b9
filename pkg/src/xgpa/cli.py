"""Command-line entry point: generate, train, forecast, explain, evaluate, bench."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .bench import COMPONENTS, benchmark_scaling
from .checkpoint import check_dataset, encode, load_checkpoint
from .data import SyntheticSpec, TrafficDataset, WindowSpec, generate_synthetic, load_csv, make_windows, write_csv
from .errors import ConfigError, ContractError, DivergenceError, FormatError, IngestionError
from .model import XGPAConfig, XGPAModel, extract_explanation
from .spatial import TrafficGraph
from .svg import explanation_svg
from .train import evaluate_mae, ha_forecast, predict, predict_windows, train, window_targets

log = logging.getLogger("xgpa")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    """Bad command-line input."""


def dump_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_files(*paths: Path) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.read_bytes())
    return h.hexdigest()


def manifest(config: dict[str, Any], seed: int, **extra) -> dict[str, Any]:
    return {"tool": "xgpa", "version": __version__, "seed": seed, "config": config, **extra}


def write_table(path: Path, header: list[str], rows: list[list[Any]], meta: dict[str, Any]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    dump_json(meta, path.with_suffix(".manifest.json"))


# --- run configuration -----------------------------------------------------------


@dataclass
class RunConfig:
    data: dict[str, Any]
    case: str = "case4"
    model: dict[str, Any] = field(default_factory=dict)
    split: list[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    seed: int = 0
    out: str | None = None
    max_eval_windows: int | None = None
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = sorted(set(raw) - {"data", "case", "model", "split", "seed", "out", "max_eval_windows"})
        if unknown:
            raise ConfigError(f"{path}: unknown fields {unknown}")
        if "data" not in raw:
            raise ConfigError(f"{path}: missing 'data' section")
        return cls(**raw, base_dir=path.parent)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    def to_dict(self) -> dict[str, Any]:
        return {
            "data": self.data,
            "case": self.case,
            "model": self.model,
            "split": self.split,
            "seed": self.seed,
            "out": self.out,
            "max_eval_windows": self.max_eval_windows,
        }

    def load_data(self) -> tuple[TrafficGraph, TrafficDataset]:
        d = self.data
        if "speeds" in d or "graph" in d:
            if "speeds" not in d or "graph" not in d:
                raise ConfigError("data needs both 'speeds' and 'graph' paths")
            graph, ds = load_csv(self.resolve(d["speeds"]), self.resolve(d["graph"]))
        elif "synthetic" in d:
            spec = d["synthetic"]
            if isinstance(spec, str):
                spec = read_spec(self.resolve(spec))
            else:
                spec = SyntheticSpec.from_dict(spec)
            graph, ds = generate_synthetic(spec)
        else:
            raise ConfigError("data must give 'speeds'+'graph' paths or a 'synthetic' spec")
        return graph, ds.with_split(tuple(self.split))

    def model_config(self, dataset: TrafficDataset) -> XGPAConfig:
        spec = WindowSpec.for_case(self.case, dataset.resolution_min)
        fields = {**self.model, "input_len": spec.input_len, "horizon": spec.horizon, "case": self.case, "seed": self.seed}
        return XGPAConfig.from_dict(fields)


def read_spec(path: Path) -> SyntheticSpec:
    if not path.is_file():
        raise FileNotFoundError(f"spec file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: spec must be a JSON object")
    return SyntheticSpec.from_dict(raw)


def out_dir(args, fallback: str | None = None) -> Path:
    path = Path(args.out or fallback or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- data + checkpoint plumbing shared by forecast/explain/evaluate -------------------


def load_inputs(args) -> tuple[XGPAModel, TrafficGraph, TrafficDataset, WindowSpec, dict[str, Any]]:
    ck = Path(args.checkpoint)
    if not ck.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ck}")
    if args.speeds or args.graph:
        if not (args.speeds and args.graph):
            raise UsageError("--speeds and --graph must be given together")
        graph, ds = load_csv(args.speeds, args.graph)
        source = {"speeds": str(args.speeds), "graph": str(args.graph)}
        split = (0.7, 0.1, 0.2)
    elif args.config:
        run = RunConfig.load(args.config)
        graph, ds = run.load_data()
        source = run.data
        split = tuple(run.split)
    else:
        raise UsageError("give --speeds/--graph or a --config with a data section")
    ds = ds.with_split(split)
    model = load_checkpoint(ck, ds)
    if list(graph.node_ids) != list(ds.node_ids):
        raise IngestionError("graph and speeds node ids differ")
    c = model.config
    if c.case:
        spec = WindowSpec.for_case(c.case, ds.resolution_min)
    else:
        spec = WindowSpec("custom", c.input_len, c.horizon)
    if (spec.input_len, spec.horizon) != (c.input_len, c.horizon):
        raise ContractError(
            f"{c.case} windows at {ds.resolution_min}-minute resolution have L={spec.input_len}, Q={spec.horizon}; "
            f"checkpoint expects L={c.input_len}, Q={c.horizon}"
        )
    meta = {"checkpoint_sha256": sha256_files(ck), "data": source, "model": c.to_dict()}
    return model, graph, ds, spec, meta


def origin_index(ds: TrafficDataset, spec: WindowSpec, at: str) -> int:
    try:
        origin = ds.index_at(at)
    except ValueError as exc:
        raise UsageError(f"--at: {exc}") from None
    if origin - spec.lookback < 0:
        raise UsageError(f"--at {at}: needs {spec.lookback} steps of history, only {max(origin, 0)} available")
    if origin > ds.num_steps:
        raise UsageError(f"--at {at} lies beyond the end of the data")
    return origin


# --- commands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    if not args.spec and not args.config:
        raise UsageError("generate needs --spec PATH")
    spec = read_spec(Path(args.spec or args.config))
    if args.seed is not None:
        spec.seed = args.seed
        spec.validate()
    out = out_dir(args)
    graph, ds = generate_synthetic(spec)
    sp, gp = out / "speeds.csv", out / "graph.csv"
    write_csv(graph, ds, sp, gp)
    dump_json(
        manifest(spec.to_dict(), spec.seed, files={"speeds": sp.name, "graph": gp.name}, content_sha256=sha256_files(sp, gp)),
        out / "provenance.json",
    )
    log.info("wrote %s and %s (%d nodes, %d steps)", sp, gp, ds.num_nodes, ds.num_steps)
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("train needs --config PATH")
    run = RunConfig.load(args.config)
    if args.seed is not None:
        run.seed = args.seed
    out = out_dir(args, str(run.resolve(run.out)) if run.out else None)
    graph, ds = run.load_data()
    cfg = run.model_config(ds)
    model = XGPAModel(cfg)
    spec = WindowSpec.for_case(run.case, ds.resolution_min)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = train(model, ds, graph, spec, max_eval_windows=run.max_eval_windows)
    for w in caught:
        log.warning("%s", w.message)
    for e in report.epochs:
        log.info("epoch %d train %.4f val %.4f (%.1fs)", e.epoch, e.train_loss, e.val_mae, e.wall_time)
    (out / "model.xgpa").write_bytes(encode(model))
    resolved = {**run.to_dict(), "model": cfg.to_dict()}
    dump_json({**report.to_dict(include_timing=False), "manifest": manifest(resolved, run.seed)}, out / "report.json")
    dump_json(resolved, out / "config.resolved.json")
    log.info("best epoch %d, validation MAE %.4f", report.best_epoch, report.best_val_mae)
    return EXIT_OK


def cmd_forecast(args) -> int:
    model, graph, ds, spec, meta = load_inputs(args)
    origin = origin_index(ds, spec, args.at)
    pred = predict(model, ds, origin - spec.lookback, graph, spec)
    rows = []
    for n, nid in enumerate(ds.node_ids):
        for h in range(spec.horizon):
            rows.append([nid, h + 1, ds.timestamp(origin + h).isoformat(), repr(float(pred[n, h, 0]))])
    out = out_dir(args)
    write_table(
        out / "forecast.csv",
        ["node_id", "horizon_step", "timestamp", "predicted_mph"],
        rows,
        manifest(meta, model.config.seed, at=args.at),
    )
    return EXIT_OK


def cmd_explain(args) -> int:
    model, graph, ds, spec, meta = load_inputs(args)
    if args.node not in ds.node_ids:
        raise UsageError(f"unknown node id {args.node!r}")
    origin = origin_index(ds, spec, args.at)
    step = args.step - 1
    if not 0 <= step < spec.horizon:
        raise UsageError(f"--step must lie in 1..{spec.horizon}")
    mean, std = model.norm_mean, model.norm_std
    if mean is None:
        mean, std = ds.normalization()
    x = (ds.speeds[:, spec.input_indices(origin)][..., None] - mean[:, None, :]) / std[:, None, :]
    _, grid, _ = model(x, graph, retain=True)
    node = ds.node_ids.index(args.node)
    exp = extract_explanation(model, grid, graph, node, step)
    doc = exp.to_dict(ds.node_ids)
    times = spec.input_indices(origin)
    for cell in doc["cells"]:
        for row in cell["importances"]:
            row["timestamp"] = ds.timestamp(int(times[row["step"]])).isoformat()
    doc["at"] = args.at
    doc["target_timestamp"] = ds.timestamp(origin + step).isoformat()
    doc["manifest"] = manifest(meta, model.config.seed)
    out = out_dir(args)
    dump_json(doc, out / "explanation.json")
    (out / "explanation.svg").write_text(explanation_svg(doc, ds.node_ids, ds.resolution_min))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, graph, ds, spec, meta = load_inputs(args)
    if args.case and args.case != (model.config.case or args.case):
        raise UsageError(f"checkpoint was trained for {model.config.case}, not {args.case}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        windows = make_windows(ds, spec, args.split)
    if len(windows) == 0:
        raise UsageError(f"{args.split} split has no {spec.case} windows")
    targets = window_targets(windows)
    doc = {
        "case": spec.case,
        "split": args.split,
        "windows": len(windows),
        "model": evaluate_mae(predict_windows(model, graph, windows), targets, ds.resolution_min).to_dict(),
        "ha": evaluate_mae(ha_forecast(ds, spec, args.split), targets, ds.resolution_min).to_dict(),
        "manifest": manifest(meta, model.config.seed),
    }
    dump_json(doc, out_dir(args) / "evaluation.json")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        lengths = [int(v) for v in args.lengths.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--lengths must be comma-separated integers, got {args.lengths!r}") from None
    comps = COMPONENTS if args.component == "all" else (args.component,)
    rows, slopes = [], {}
    for comp in comps:
        res = benchmark_scaling(comp, lengths, repeats=args.repeats, seed=args.seed or 0)
        rows += [[comp, n, f"{t:.6e}"] for n, t in res.rows()]
        slopes[comp] = res.slope
        log.info("%s slope %.3f", comp, res.slope)
    write_table(
        out_dir(args) / "bench.csv",
        ["component", "L", "seconds"],
        rows,
        manifest({"lengths": lengths, "components": list(comps), "repeats": args.repeats}, args.seed or 0, loglog_slopes=slopes),
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override the seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--verbose", action="store_true")

    def data_args(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--speeds", help="speeds CSV (with --graph)")
        p.add_argument("--graph", help="graph CSV (with --speeds)")

    parser = argparse.ArgumentParser(prog="xgpa", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", parents=[common], help="write synthetic speeds and graph CSVs")
    p.add_argument("--spec", help="synthetic spec JSON")
    p.set_defaults(func=cmd_generate)
    p = sub.add_parser("train", parents=[common], help="train a model from a run config")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("forecast", parents=[common], help="forecast every node from a timestamp")
    data_args(p)
    p.add_argument("--at", required=True, help="first forecast timestamp (ISO-8601)")
    p.set_defaults(func=cmd_forecast)
    p = sub.add_parser("explain", parents=[common], help="export attention-based explanations")
    data_args(p)
    p.add_argument("--at", required=True, help="first forecast timestamp (ISO-8601)")
    p.add_argument("--node", required=True, help="target node id")
    p.add_argument("--step", type=int, default=1, help="horizon step, 1-based")
    p.set_defaults(func=cmd_explain)
    p = sub.add_parser("evaluate", parents=[common], help="per-horizon MAE against HA")
    data_args(p)
    p.add_argument("--case", choices=["case1", "case2", "case3", "case4"])
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("bench", parents=[common], help="attention scaling benchmark")
    p.add_argument("--lengths", default="256,512,1024,2048,4096,8192")
    p.add_argument("--component", default="all", choices=["all", *COMPONENTS])
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ContractError, FormatError, IngestionError, FileNotFoundError, KeyError, IndexError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
