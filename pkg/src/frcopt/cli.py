"""Command-line front end.

Subcommands: optimize (train a design and export all artifacts), extract
(re-trace fibers from a checkpoint), sweep (grid of volume budgets),
benchmark (per-phase timing over mesh sizes), validate-config.

Exit codes: 0 success (optimize: converged), 2 optimize hit the epoch cap
without meeting the weight-update tolerance, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import artifacts, fea, fibers, problems, training


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _load_config(args) -> dict:
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    else:
        raw = {}
    cfg = problems.validate_config(raw)
    for item in args.override or []:
        if "=" not in item:
            raise problems.ConfigError([f"override {item!r}: expected key=value"])
        key, value = item.split("=", 1)
        problems.apply_override(cfg, key, value)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "max_epochs", None) is not None:
        cfg["schedule"]["max_epochs"] = args.max_epochs
    if args.out is not None:
        cfg["out_dir"] = args.out
    cfg["out_dir"] = os.environ.get("FRCOPT_OUT", cfg["out_dir"])
    return problems.validate_config(cfg)


def cmd_optimize(args) -> int:
    cfg = _load_config(args)
    problem = problems.build_problem(cfg)
    _say(args, f"optimize {cfg['problem']}: {problem.grid.nelx}x"
               f"{problem.grid.nely} mesh, seed {cfg['seed']}, "
               f"max {cfg['schedule']['max_epochs']} epochs")
    t0 = time.perf_counter()
    result = training.run(problem)
    wall = time.perf_counter() - t0
    summary = artifacts.export_run(cfg["out_dir"], cfg, problem, result, wall)
    _say(args, f"finished in {wall:.1f}s after {summary['epochs']} epochs "
               f"(converged={summary['converged']}): J={summary['J']:.5g}, "
               f"g_m={summary['g_m']:+.4f}, g_f={summary['g_f']:+.4f}")
    _say(args, f"artifacts in {cfg['out_dir']}")
    return 0 if summary["converged"] else 2


def cmd_extract(args) -> int:
    weights, emb, net, grid, name = artifacts.load_checkpoint(args.checkpoint)
    params = fibers.ExtractionParams(thickness=args.thickness, step=args.step,
                                     void_threshold=args.void_threshold)
    query = artifacts.make_field_query(weights, emb, net)
    tracks = fibers.extract_fibers(query, grid, params)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    writer = artifacts.RunWriter(out)
    artifacts.write_fiber_svg(tracks, grid, writer.stage("fibers.svg"))
    artifacts.write_polylines(tracks, writer.stage("fibers.txt"))
    writer.commit()
    total = sum(t.length for t in tracks)
    _say(args, f"{name}: {len(tracks)} tracks, total length {total:.1f} mm, "
               f"thickness {args.thickness} -> {out}/fibers.svg")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    vms = _parse_floats(args.vm) if args.vm else [cfg["constraints"]["V_m"]]
    rfs = _parse_floats(args.rf) if args.rf else [cfg["constraints"]["r_f"]]
    vms, rfs = _dedupe(args, "V_m", vms), _dedupe(args, "r_f", rfs)
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    rows = []
    for ci, vm in enumerate(vms):
        for cj, rf in enumerate(rfs):
            cell = json.loads(json.dumps(cfg))
            cell["constraints"]["V_m"] = vm
            cell["constraints"]["r_f"] = rf
            cell["out_dir"] = os.path.join(out, f"vm{vm:g}_rf{rf:g}")
            if args.vary_seed:
                cell["seed"] = cfg["seed"] + ci * len(rfs) + cj
            _say(args, f"cell V_m={vm:g} r_f={rf:g} seed={cell['seed']} ...")
            try:
                problem = problems.build_problem(cell)
                t0 = time.perf_counter()
                result = training.run(problem)
                wall = time.perf_counter() - t0
                summary = artifacts.export_run(cell["out_dir"], cell, problem,
                                               result, wall)
                rows.append([vm, rf, cell["seed"], summary["J"],
                             summary["g_m"], summary["g_f"],
                             summary["epochs"], summary["converged"], "ok"])
            except Exception as err:  # keep sweeping, record the failure
                rows.append([vm, rf, cell["seed"], "", "", "", "", "",
                             f"error: {err}"])
                print(f"cell V_m={vm:g} r_f={rf:g} failed: {err}",
                      file=sys.stderr)
    path = os.path.join(out, "sweep.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["V_m", "r_f", "seed", "J", "g_m", "g_f", "epochs",
                    "converged", "status"])
        w.writerows(rows)
    _say(args, f"sweep table -> {path}")
    return 0


def cmd_benchmark(args) -> int:
    sizes = []
    for item in args.elements.split(","):
        if "x" in item:
            nelx, nely = (int(v) for v in item.split("x"))
        else:
            n = int(item)
            nely = max(1, int(round(np.sqrt(n / 2.0))))
            nelx = max(1, n // nely)
        sizes.append((nelx, nely))
    out = args.out or "runs/benchmark"
    os.makedirs(out, exist_ok=True)
    rows = []
    for nelx, nely in sizes:
        cfg = problems.validate_config({
            "problem": "tip_cantilever",
            "mesh": {"nelx": nelx, "nely": nely, "h": 1.0},
            "schedule": {"max_epochs": args.iters, "dw_tol": 0.0},
            "seed": args.seed if args.seed is not None else 7,
        })
        problem = problems.build_problem(cfg)
        t0 = time.perf_counter()
        result = training.run(problem)
        total = time.perf_counter() - t0
        ph = result.phase_seconds
        rows.append([nelx * nely, nelx, nely, f"{ph['forward']:.3f}",
                     f"{ph['assembly']:.3f}", f"{ph['solve_loss']:.3f}",
                     f"{ph['backward']:.3f}", f"{ph['step']:.3f}",
                     f"{total:.3f}", f"{1e3 * total / max(1, args.iters):.2f}"])
        _say(args, f"{nelx * nely:>6} elems: total {total:.2f}s "
                   f"(fwd {ph['forward']:.2f} asm {ph['assembly']:.2f} "
                   f"solve {ph['solve_loss']:.2f} bwd {ph['backward']:.2f} "
                   f"step {ph['step']:.2f})")
    path = os.path.join(out, "benchmark.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["elements", "nelx", "nely", "forward_s", "assembly_s",
                    "solve_loss_s", "backward_s", "step_s", "total_s",
                    "per_iter_ms"])
        w.writerows(rows)
    _say(args, f"timing table -> {path}")
    return 0


def cmd_validate(args) -> int:
    cfg = _load_config(args)
    _say(args, f"configuration OK: problem={cfg['problem']}, "
               f"mesh {cfg['mesh']['nelx']}x{cfg['mesh']['nely']}")
    if args.print:
        print(problems.serialize_config(cfg), end="")
    return 0


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def _dedupe(args, name, values):
    seen, out = set(), []
    for v in values:
        if v in seen:
            _say(args, f"warning: duplicate {name}={v:g} dropped")
            continue
        seen.add(v)
        out.append(v)
    return out


def _add_common(p, max_epochs=True):
    p.add_argument("--config", help="path to a JSON configuration file")
    p.add_argument("--seed", type=int, help="override the RNG seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="set one config entry (repeatable); dotted keys "
                        "address nested tables")
    if max_epochs:
        p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="frcopt",
        description="Fiber-reinforced composite topology optimization with "
                    "a coordinate neural field")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="train a design and export artifacts")
    _add_common(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("extract", help="trace fibers from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--thickness", type=float, default=0.1)
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--void-threshold", type=float, default=0.5,
                   dest="void_threshold")
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("sweep", help="grid of volume-budget runs")
    _add_common(p)
    p.add_argument("--vm", help="comma list of matrix volume fractions")
    p.add_argument("--rf", help="comma list of fiber fractions")
    p.add_argument("--vary-seed", action="store_true", dest="vary_seed",
                   help="use an independent seed per cell")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("benchmark", help="per-phase timing over mesh sizes")
    p.add_argument("--elements", default="200,800,1800,3200",
                   help="comma list: element counts or NELXxNELY meshes")
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("validate-config", help="check a configuration file")
    _add_common(p, max_epochs=False)
    p.add_argument("--print", action="store_true",
                   help="dump the merged configuration")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except problems.ConfigError as err:
        print(str(err), file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
