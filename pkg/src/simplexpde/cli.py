"""Command-line entry point.

Subcommands::

    gen         --benchmark {voronoi,vessel} --count N --seed S --out DIR
    train       --data DIR --config FILE --out DIR
    simulate    --params FILE --baseline FILE --schedule FILE --config FILE --out DIR
    eval        --params FILE --data DIR --out report.csv [--config FILE]
    sweep       --axis NAME --values CSV --config FILE --out DIR
    ablate      --data DIR --config FILE --out DIR
    export-png  --field FILE --out FILE

Config files are JSON objects with optional sections ``train`` (training
settings), ``solver`` (time stepping), ``treatment`` (``{"channels": [...]}``
for simulate) and ``data`` (for sweep: either ``{"dir": DIR}`` or
``{"benchmark": NAME, "count": N, "seed": S, "generator": {...}}``).

On failure the last line on stderr is a single JSON object
``{"error": <kind>, "message": <text>}`` and the exit status is non-zero.
``ADT_THREADS`` caps the number of folds trained in parallel.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .field import AdtfError, DomainError, argmax_labels, read_adtf, read_adtf_array
from .operators import TreatmentContext, load_params, schedule_from_json
from .solver import SolverConfig, StabilityError, rollout
from .synth import GENERATORS, generate_dataset, read_dataset, write_dataset
from .training import (SOLVER_AXES, TRAIN_AXES, TrainConfig, ablation_csv, ablation_run, build_model, evaluate,
                       save_result, sensitivity_sweep, train)

# Okabe-Ito colours, indexed by class and cycled for K > 8.
PALETTE = (
    (0, 0, 0), (230, 159, 0), (86, 180, 233), (0, 158, 115),
    (240, 228, 66), (0, 114, 178), (213, 94, 0), (204, 121, 167),
)


class CliError(Exception):
    pass


def _load_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise CliError(f"{path}: expected a JSON object")
    return doc


def _configs(path):
    doc = _load_json(path) if path else {}
    try:
        train_cfg = TrainConfig.from_json(doc.get("train", {}))
        solver = SolverConfig(**doc.get("solver", {}))
    except TypeError as exc:
        raise CliError(f"bad config: {exc}") from None
    return doc, train_cfg, solver


def _load_model(path) -> ad.ParamSet:
    path = Path(path)
    directory = path if path.is_dir() else path.parent
    doc = _load_json(directory / "params.json")
    if doc.get("format") != "paramset":
        raise CliError(f"{path}: not a trained parameter set")
    return ad.ParamSet.load(directory)


def cmd_gen(a):
    pairs = generate_dataset(a.benchmark, a.count, a.seed)
    cls, _ = GENERATORS[a.benchmark]
    write_dataset(pairs, a.out, {"benchmark": a.benchmark, "seed": a.seed,
                                 "generator_config": cls().__dict__})
    return {"pairs": len(pairs), "out": str(a.out)}


def cmd_train(a):
    _, cfg, solver = _configs(a.config)
    pairs = read_dataset(a.data)
    _, res = train(pairs, cfg, solver)
    save_result(res, a.out)
    return res.headline()


def cmd_simulate(a):
    doc, _, solver = _configs(a.config)
    p0 = read_adtf(a.baseline)
    path = Path(a.params)
    head = _load_json(path if path.suffix == ".json" else path / "params.json")
    if head.get("format") == "pde-params":
        params, net = load_params(path), None
    else:
        ps = _load_model(path)
        params, net = build_model(ps.values(), ps.meta)
    ctx = TreatmentContext(tuple(doc.get("treatment", {}).get("channels", [0.0] * len(np.atleast_1d(params.kill_rates)))))
    schedule = schedule_from_json(_load_json(a.schedule), Path(a.schedule).parent, p0.grid) if a.schedule else None
    traj = rollout(p0, params, ctx, schedule, solver, net)
    traj.save(a.out)
    return {"snapshots": len(traj.states), "events_applied": len(traj.events)}


def cmd_eval(a):
    _, _, solver = _configs(a.config)
    ps = _load_model(a.params)
    pairs = read_dataset(a.data)
    rep = evaluate(ps, pairs, solver)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    rep.to_csv(a.out)
    return rep.headline()


def _dataset_from(doc):
    data = doc.get("data")
    if not data:
        raise CliError("sweep config needs a 'data' section")
    if "dir" in data:
        pairs = read_dataset(data["dir"])
        return pairs, None
    bench = data.get("benchmark", "voronoi")
    if bench not in GENERATORS:
        raise CliError(f"unknown benchmark {bench!r}")
    cls, _ = GENERATORS[bench]
    gcfg = cls(**data.get("generator", {}))
    count, seed = int(data.get("count", 200)), int(data.get("seed", 0))

    def resample(size):
        return generate_dataset(bench, count, seed, replace(gcfg, size=size))

    return generate_dataset(bench, count, seed, gcfg), resample


def _parse_values(axis, text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--values must be comma-separated numbers, got {text!r}") from None
    if axis in ("jacobi_iters", "resolution"):
        vals = [int(v) for v in vals]
    return vals


def cmd_sweep(a):
    if a.axis not in SOLVER_AXES + TRAIN_AXES:
        raise CliError(f"unknown axis {a.axis!r}; choose from {', '.join(SOLVER_AXES + TRAIN_AXES)}")
    doc, cfg, solver = _configs(a.config)
    pairs, resample = _dataset_from(doc)
    table = sensitivity_sweep(a.axis, _parse_values(a.axis, a.values), pairs, cfg, solver, resample=resample)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / f"sweep_{a.axis}.csv")
    return {"rows": len(table.rows), "csv": str(out / f"sweep_{a.axis}.csv")}


def cmd_ablate(a):
    _, cfg, solver = _configs(a.config)
    pairs = read_dataset(a.data)
    rows = ablation_run(pairs, cfg, solver)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(ablation_csv(rows))
    for r in rows:
        save_result(r["result"], out / r["value"])
    return {"rows": len(rows), "csv": str(out / "ablation.csv")}


def labels_to_rgb(labels: np.ndarray) -> np.ndarray:
    pal = np.asarray(PALETTE, dtype=np.uint8)
    return pal[labels % len(pal)]


def cmd_export_png(a):
    from PIL import Image

    vals = read_adtf_array(a.field)
    rgb = labels_to_rgb(argmax_labels(vals, axis=0))
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(a.out, format="PNG")
    return {"out": str(a.out), "classes": int(vals.shape[0])}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="simplexpde", description="Simplex-field anatomy simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--benchmark", choices=sorted(GENERATORS), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="cross-validated training")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("simulate", help="roll out one baseline field")
    p.add_argument("--params", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--schedule")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("eval", help="score trained parameters on a dataset")
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="sensitivity sweep over one axis")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="the four toggle combinations")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("export-png", help="argmax colour image of a field")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_png)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = args.fn(args)
    except (CliError, DomainError, AdtfError, StabilityError, KeyError, OSError) as exc:
        kind = type(exc).__name__
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(summary, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
