"""Command line interface.

Exit codes: 0 success, 1 data or model error, 2 usage error.
"""

from __future__ import annotations

import argparse
import functools
import json
import os
import platform
import sys
import time
import warnings

import numpy as np

from . import __version__
from .core import CostSpec
from .rng import ALGORITHM


class UsageError(Exception):
    pass


def parse_range(text: str) -> list:
    """``a,b,c`` or ``start:stop:step`` (stop included within step/2)."""
    text = text.strip()
    try:
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            if step <= 0:
                raise UsageError("range step must be positive")
            count = int(np.floor((stop - start) / step + 0.5)) + 1
            return [round(start + i * step, 12) for i in range(max(count, 0))]
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise UsageError(f"bad value list {text!r}: {exc}") from None


def default_seed() -> int:
    raw = os.environ.get("OTRECT_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"OTRECT_SEED must be an integer, got {raw!r}") from None


def cost_spec(args) -> CostSpec:
    if args.r >= 1 and not args.convex_comparison:
        raise UsageError("r >= 1 needs --convex-comparison")
    if args.r <= 0:
        raise UsageError("r must be positive")
    return CostSpec(args.r, convex_comparison=args.r >= 1)


def versions() -> dict:
    import joblib
    import scipy
    import sklearn

    return {"otrect": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "joblib": joblib.__version__}


def write_metadata(path, args, wall_time, extra=None):
    config = {k: v for k, v in vars(args).items() if k != "func"}
    meta = {"format_version": 1, "command": args.command, "config": config,
            "versions": versions(), "rng": ALGORITHM, "wall_time": wall_time}
    meta.update(extra or {})
    with open(f"{path}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, default=str)


# -- commands ------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .sim import run_table

    t0 = time.perf_counter()
    levels = parse_range(args.levels)
    cost_spec(args)
    estimators = args.estimators.split(",") if args.estimators else None
    table = run_table(args.task, levels, estimators, args.trials, args.n, args.seed,
                      args.delta, args.r, n_jobs=args.jobs)
    print(table.format())
    if args.out:
        table.to_csv(args.out)
        write_metadata(args.out, args, time.perf_counter() - t0,
                       {"table_config": table.config, "failed_trials": table.n_failed})
    if table.n_failed:
        print(f"warning: {table.n_failed} failed trials", file=sys.stderr)
    return 0


def _holdout(chain, fit, trials, frac, seed):
    from .ivs import mape
    from .rng import spawn

    scores = []
    for rng in spawn(seed, trials):
        idx = rng.permutation(len(chain))
        n_test = max(1, int(round(frac * len(chain))))
        model = fit(chain.subset(idx[n_test:]))
        scores.append(mape(model, chain.subset(idx[:n_test])))
    return scores


def cmd_fit_surface(args) -> int:
    from . import ivs
    from .estimators import FitConfig
    from .modelsel import IVS_GRID, CvPlan, cross_validate_delta, ivs_task

    t0 = time.perf_counter()
    h = parse_range(args.h)
    if len(h) != 3:
        raise UsageError("--h needs three bandwidths")
    spec = cost_spec(args)
    chain = ivs.read_chain_csv(args.input)
    cfg = FitConfig(step_size=args.step, rel_tol=args.tol, max_iters=args.max_iter,
                    tol_mode="relative")
    delta = args.delta
    extra = {}
    if args.cv:
        if args.model != "robust":
            raise UsageError("--cv applies to --model robust")
        fit_fn, score_fn = ivs_task(h, spec, cfg)
        res = cross_validate_delta(fit_fn, chain, CvPlan(IVS_GRID, seed=args.seed,
                                                         metric="mape"),
                                   score_fn, n_jobs=args.jobs, refit=False)
        delta = res.delta_star
        extra["cv_table"] = res.table
        extra["cv_failures"] = res.failures

    def fit(c):
        if args.model == "ks":
            return ivs.fit_ks(c, h)
        if args.model == "2sks":
            return ivs.fit_2sks(c, h)
        return ivs.fit_robust(c, h, spec, delta, cfg, args.basis, args.adaptive)

    model = fit(chain)
    metrics = {"mape_in_sample": ivs.mape(model, chain),
               "surface_gradient": ivs.surface_gradient(model)}
    if args.holdout:
        scores = _holdout(chain, fit, args.trials, args.holdout, args.seed)
        metrics["mape_holdout"] = float(np.mean(scores))
        metrics["mape_holdout_trials"] = scores
    if args.model == "robust":
        metrics["delta_used"] = delta
    print(json.dumps(metrics, indent=2))
    if args.out:
        ivs.write_surface_json(model, args.out, metrics=metrics, seed=args.seed)
        write_metadata(args.out, args, time.perf_counter() - t0,
                       {**extra, "model_meta": model.meta})
    return 0


def cmd_sweep(args) -> int:
    from .modelsel import sweep
    from .sim import sweep_trial

    t0 = time.perf_counter()
    values = parse_range(args.values)
    if args.axis == "r" and max(values) >= 1 and not args.convex_comparison:
        raise UsageError("r values >= 1 need --convex-comparison")
    if args.axis == "delta":
        cost_spec(args)
    fn = functools.partial(sweep_trial, task=args.task, axis=args.axis,
                           level=args.level, delta=args.delta, r=args.r, n=args.n)
    res = sweep(args.axis, values, fn, args.trials, args.seed, args.jobs,
                config=dict(task=args.task, level=args.level))
    for v, m, s in res.points:
        print(f"{v:10.4g}  {m:.4f}  {s:.4f}")
    if args.out:
        res.to_csv(args.out)
        write_metadata(args.out, args, time.perf_counter() - t0)
    return 0


def cmd_curve(args) -> int:
    from .sim import THREE_POINT, count_cusps, objective_curve

    t0 = time.perf_counter()
    spec = cost_spec(args)
    if args.example != "three-point":
        raise UsageError(f"unknown example {args.example!r}")
    grid = parse_range(f"{args.lo}:{args.hi}:{args.step}")
    curve = objective_curve(THREE_POINT, grid, spec, args.delta)
    cusps = count_cusps(curve)
    print(f"downward cusps: {cusps}")
    if args.out:
        np.savetxt(args.out, curve, delimiter=",", header="theta,objective", comments="",
                   fmt="%.17g")
        write_metadata(args.out, args, time.perf_counter() - t0, {"cusps": cusps})
    return 0


def cmd_evolve(args) -> int:
    from .sim import ContaminationModel, evolution_export, write_snapshots

    t0 = time.perf_counter()
    spec = cost_spec(args)
    kind = "mean_mixture" if args.task == "mean" else "regression_shift"
    model = ContaminationModel(kind, args.level, args.n, args.seed)
    rows = evolution_export(args.task, model, parse_range(args.deltas), spec)
    moved = {}
    for row in rows:
        moved[row["delta"]] = moved.get(row["delta"], 0.0) + row["mass"] * row["moved"]
    for d, m in moved.items():
        print(f"delta={d:g}  moved mass={m:.4f}")
    if args.out:
        write_snapshots(rows, args.out)
        write_metadata(args.out, args, time.perf_counter() - t0)
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otrect", description="Outlier rectification "
                                "estimators with concave transport cost.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, delta):
        sp.add_argument("--delta", type=float, default=delta, help="transport budget")
        sp.add_argument("--r", type=float, default=0.5, help="cost exponent")
        sp.add_argument("--convex-comparison", action="store_true",
                        help="allow r >= 1")
        sp.add_argument("--seed", type=int, default=None,
                        help="master seed (default: $OTRECT_SEED or 0)")
        sp.add_argument("--out", default=None, help="output file")

    sp = sub.add_parser("simulate", help="contamination tables")
    common(sp, None)
    sp.add_argument("--task", choices=["mean", "lad"], required=True)
    sp.add_argument("--levels", default="0.2,0.3,0.4,0.45,0.49")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--estimators", default=None)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit-surface", help="implied volatility surface")
    common(sp, 0.01)
    sp.add_argument("--model", choices=["ks", "2sks", "robust"], default="robust")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--h", default="0.35,0.10,0.50")
    sp.add_argument("--basis", choices=["normalized", "raw"], default="normalized")
    sp.add_argument("--adaptive", action="store_true", help="per-iteration budget")
    sp.add_argument("--cv", action="store_true", help="choose delta by cross-validation")
    sp.add_argument("--holdout", type=float, default=0.0, help="test fraction")
    sp.add_argument("--trials", type=int, default=5)
    sp.add_argument("--step", type=float, default=0.1)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--max-iter", type=int, default=2000)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_fit_surface)

    sp = sub.add_parser("sweep", help="sensitivity in delta or r")
    common(sp, 1.0)
    sp.add_argument("--axis", choices=["delta", "r"], required=True)
    sp.add_argument("--values", required=True, help="list or start:stop:step")
    sp.add_argument("--task", choices=["mean", "lad"], default="mean")
    sp.add_argument("--level", type=float, default=0.45)
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("curve", help="objective along a parameter grid")
    common(sp, 0.7)
    sp.add_argument("--example", default="three-point")
    sp.add_argument("--lo", type=float, default=-2.0)
    sp.add_argument("--hi", type=float, default=2.0)
    sp.add_argument("--step", type=float, default=1e-3)
    sp.set_defaults(func=cmd_curve)

    sp = sub.add_parser("evolve", help="rectified distribution snapshots")
    common(sp, None)
    sp.add_argument("--task", choices=["mean", "lad"], default="lad")
    sp.add_argument("--deltas", default="0,0.5,1,1.5")
    sp.add_argument("--level", type=float, default=0.45)
    sp.add_argument("--n", type=int, default=200)
    sp.set_defaults(func=cmd_evolve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.seed is None:
            args.seed = default_seed()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=UserWarning)
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
