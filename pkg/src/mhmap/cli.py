"""Command line front end: ``mhmap {simulate,estimate,sweep,bench,mesh}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .errors import ConfigError, MHMapError, ParseError
from .fem import MARKER_NAMES, make_lshape_mesh, read_mesh, write_mesh


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file overriding the defaults")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a single config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--filter", choices=("standard", "fast", "both"))
    common.add_argument("--runs", type=int)
    common.add_argument("--workers", type=int)

    p = argparse.ArgumentParser(prog="mhmap", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="truth field at the sampling points (truth.csv)")
    sub.add_parser("estimate", parents=[common], help="Monte Carlo RMSE of one or both filters (rmse.csv)")
    sw = sub.add_parser("sweep", parents=[common], help="average RMSE over a parameter grid (sweep.csv)")
    sw.add_argument("--axis", required=True, choices=sorted(ex.SWEEP_GRIDS))
    sw.add_argument("--values", help="comma separated grid replacing the default one")
    sub.add_parser("bench", parents=[common], help="timing of both filters (bench.csv)")
    me = sub.add_parser("mesh", help="generate or inspect a mesh")
    me.add_argument("--h", type=float, help="target edge length (default: the estimator mesh)")
    me.add_argument("--divisions", help="four comma separated segment counts instead of --h")
    me.add_argument("--input", help="inspect this mesh file instead of generating one")
    me.add_argument("--output", help="write the mesh here")
    return p


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig()
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}", "config") from None
        cfg = ex.ExperimentConfig.from_text(text, cfg)
    if args.set:
        cfg = ex.ExperimentConfig.from_text("\n".join(args.set), cfg)
    changes = {k: v for k, v in (("seed", args.seed), ("filter", args.filter), ("runs", args.runs),
                                 ("workers", args.workers)) if v is not None}
    return cfg.replace(**changes)


def _write_truth(path, cfg):
    setup = ex.build_setup(cfg)
    rng = ex.run_seed(cfg.seed, 0)
    states = setup.truth_states if setup.truth_states is not None else ex.simulate_truth(setup, cfg, rng)
    g = setup.grid
    vals = (g.truth_C @ states.T).T + g.truth_D @ setup.gamma_truth
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("time_s," + ",".join(f"p{i}" for i in range(g.size)) + "\n")
        for j, row in enumerate(vals):
            fh.write(f"{(j + 1) * cfg.est_dt:.6g}," + ",".join(f"{v:.10e}" for v in row) + "\n")
    with open(Path(path).with_name("points.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("point,x,y\n")
        for i, (x, y) in enumerate(g.points):
            fh.write(f"p{i},{x:.10g},{y:.10g}\n")


def _mesh(args) -> int:
    if args.input:
        mesh = read_mesh(args.input)
    elif args.h is not None:
        mesh = make_lshape_mesh(args.h)
    else:
        spec = args.divisions or ex.ExperimentConfig.est_divisions
        mesh = make_lshape_mesh(divisions=ex.ExperimentConfig(est_divisions=spec).divisions)
    counts = {name: int(np.sum(mesh.markers == code)) for code, name in MARKER_NAMES.items()}
    print(f"vertices {mesh.n_vertices} triangles {mesh.n_triangles} free {mesh.n_free} area {mesh.area:.6f}")
    print(" ".join(f"{k} {v}" for k, v in counts.items()))
    if args.output:
        write_mesh(mesh, args.output)
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "mesh":
            return _mesh(args)
        cfg = _config(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        extra = {}
        if args.command == "simulate":
            _write_truth(out / "truth.csv", cfg)
        elif args.command == "estimate":
            res = ex.monte_carlo(cfg)
            names = cfg.filters
            for name in names:
                fname = "rmse.csv" if len(names) == 1 else f"rmse_{name}.csv"
                ex.write_rmse_csv(out / fname, res, name)
                extra[f"average_rmse_{name}"] = repr(res.average_rmse(name))
            if "fast" in names and cfg.calibrate:
                extra["xi_calibrated"] = repr(ex.calibrate_weights(cfg))
        elif args.command == "sweep":
            values = None
            if args.values:
                try:
                    values = [float(v) for v in args.values.split(",")]
                except ValueError:
                    raise ConfigError(f"bad --values {args.values!r}", "values") from None
            rows = ex.sweep(cfg, args.axis, values)
            ex.write_sweep_csv(out / "sweep.csv", rows)
        elif args.command == "bench":
            rows = ex.bench(cfg, max(5, min(cfg.runs, 5)))
            ex.write_bench_csv(out / "bench.csv", rows)
            for r in rows:
                print(f"{r.filter:9s} optimization {r.optimization_s:.4f} s  total {r.total_s:.4f} s  "
                      f"({100 * r.fraction:.1f}% optimization)")
        ex.write_manifest(out / "manifest.txt", cfg, " ".join(["mhmap", args.command]), extra)
        return 0
    except ConfigError as exc:
        print(f"mhmap: config error: {exc} (key: {exc.key})", file=sys.stderr)
        return 2
    except ParseError as exc:
        print(f"mhmap: parse error: {exc}", file=sys.stderr)
        return 2
    except MHMapError as exc:
        print(f"mhmap: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
