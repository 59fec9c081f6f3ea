"""Contamination models and the Monte-Carlo harness for the comparison tables."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from .core import CostSpec, as_points
from .dual import mean_objective
from .estimators import (
    FitConfig,
    baselines_mean,
    baselines_regression,
    fit_lad,
    fit_mean,
)
from .rng import ALGORITHM, child_seeds, make_rng

MEAN_DEFAULTS = dict(clean_loc=0.0, outlier_loc=25.0, scale=2.0)
REGRESSION_DEFAULTS = dict(slope=-0.8, intercept=0.1, shift=10.0, x_scale=2.0,
                           outlier_x_loc=4.0, noise=0.2)
MEAN_ESTIMATORS = ("ours", "mean", "median", "trimmed_mean")
LAD_ESTIMATORS = ("ours", "ols", "lad", "huber")


@dataclass(frozen=True)
class ContaminationModel:
    """``kind`` is ``"mean_mixture"`` or ``"regression_shift"``; scales are
    standard deviations."""

    kind: str
    corruption_level: float
    n: int = 1000
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("mean_mixture", "regression_shift"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if not 0 <= self.corruption_level < 1:
            raise ValueError("corruption level must lie in [0, 1)")
        if self.n < 1:
            raise ValueError("n must be positive")
        for key in ("scale", "x_scale", "noise"):
            if key in self.params and not self.params[key] > 0:
                raise ValueError(f"{key} must be positive")

    def settings(self) -> dict:
        base = MEAN_DEFAULTS if self.kind == "mean_mixture" else REGRESSION_DEFAULTS
        return {**base, **self.params}


def generate(model: ContaminationModel):
    """Draw a sample. Returns ``(samples, clean_mask)``; regression samples
    are ``(X, y)`` with ``X`` of shape ``(n, 1)``."""
    p = model.settings()
    rng = make_rng(model.seed)
    n = model.n
    clean = rng.random(n) >= model.corruption_level
    if model.kind == "mean_mixture":
        z = rng.normal(0.0, p["scale"], n) + np.where(clean, p["clean_loc"],
                                                       p["outlier_loc"])
        return z[:, None], clean
    x = rng.normal(0.0, p["x_scale"], n) + np.where(clean, 0.0, p["outlier_x_loc"])
    w = rng.standard_normal(n)
    y = p["intercept"] + p["slope"] * x + p["noise"] * w + np.where(clean, 0.0, p["shift"])
    return (x[:, None], y), clean


@dataclass
class TrialReport:
    estimator: str
    clean_loss: float
    pct_rectified: float
    seed: int
    wall_time: float
    level: float = 0.0
    error: Optional[str] = None


def clean_loss(task: str, samples, clean, estimate) -> float:
    """Mean absolute deviation (mean task) or mean absolute residual (LAD)
    of the estimate on the clean points."""
    if task == "mean":
        Z = as_points(samples)[clean]
        return float(np.mean(np.linalg.norm(Z - np.atleast_1d(estimate), axis=1)))
    coef, b = estimate
    X, y = samples
    return float(np.mean(np.abs(y[clean] - X[clean] @ np.atleast_1d(coef) - b)))


def _estimate(task, name, samples, level, spec, delta, cfg, fit_seed):
    """Returns ``(estimate, pct_rectified)``."""
    if task == "mean":
        if name == "ours":
            res = fit_mean(samples, spec, delta, cfg)
            return res.theta_hat, res.pct_rectified
        if name == "trimmed_mean":
            return baselines_mean(samples, "trimmed_mean", level), np.nan
        return baselines_mean(samples, name), np.nan
    X, y = samples
    if name == "ours":
        lad_cfg = replace(cfg or FitConfig.for_lad(), seed=fit_seed)
        res = fit_lad(samples, spec, delta, lad_cfg)
        return (res.theta_hat, res.intercept), res.pct_rectified
    return baselines_regression(X, y, name), np.nan


def run_trial(task: str, level: float, estimators: Sequence[str], n: int, seed,
              spec: CostSpec, delta: float, cfg: Optional[FitConfig] = None,
              params: Optional[dict] = None) -> list:
    """One dataset, every estimator. ``seed`` drives data and restarts."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    data_ss, fit_ss = ss.spawn(2)
    kind = "mean_mixture" if task == "mean" else "regression_shift"
    samples, clean = generate(ContaminationModel(kind, level, n, data_ss, params or {}))
    fit_seed = int(fit_ss.generate_state(1)[0])
    label = int(ss.generate_state(1)[0])
    reports = []
    for name in estimators:
        t0 = time.perf_counter()
        try:
            est, pct = _estimate(task, name, samples, level, spec, delta, cfg, fit_seed)
            loss, err = clean_loss(task, samples, clean, est), None
        except Exception as exc:
            loss, pct, err = np.nan, np.nan, f"{type(exc).__name__}: {exc}"
        reports.append(TrialReport(name, loss, pct, label, time.perf_counter() - t0,
                                   level, err))
    return reports


@dataclass
class TableResult:
    task: str
    rows: list
    reports: list
    config: dict

    def to_csv(self, path):
        cols = ["task", "level", "estimator", "mean_loss", "two_std", "pct_rectified",
                "n_trials", "n", "seed", "n_failed"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: row[k] for k in cols})

    def format(self) -> str:
        levels = sorted({row["level"] for row in self.rows})
        names = list(dict.fromkeys(row["estimator"] for row in self.rows))
        cell = {(row["level"], row["estimator"]): row for row in self.rows}
        head = f"{'estimator':<14}" + "".join(f"{lv:>18.0%}" for lv in levels)
        lines = [head]
        for name in names:
            vals = []
            for lv in levels:
                row = cell[(lv, name)]
                vals.append(f"{row['mean_loss']:>9.3f}±{row['two_std']:<7.3f}")
            lines.append(f"{name:<14}" + " ".join(f"{v:>17}" for v in vals))
        if "ours" in names:
            pct = [cell[(lv, "ours")]["pct_rectified"] for lv in levels]
            lines.append(f"{'%rectified':<14}" + "".join(f"{p:>18.2%}" for p in pct))
        return "\n".join(lines)

    @property
    def n_failed(self) -> int:
        return sum(row["n_failed"] for row in self.rows)


def run_table(task: str, levels: Sequence[float], estimators: Optional[Sequence[str]] = None,
              n_trials: int = 100, n: int = 1000, seed=0, delta: Optional[float] = None,
              r: float = 0.5, cfg: Optional[FitConfig] = None, n_jobs: int = 1,
              params: Optional[dict] = None) -> TableResult:
    """Mean clean loss and two standard deviations per level and estimator.

    Defaults: budget 0.5 for the mean task and 1.5 for LAD. Trial ``t`` at
    level ``j`` gets its own spawned seed, so cells are reproducible
    individually and independent of ``n_jobs``.
    """
    if task not in ("mean", "lad"):
        raise ValueError(f"unknown task {task!r}")
    estimators = tuple(estimators or (MEAN_ESTIMATORS if task == "mean" else LAD_ESTIMATORS))
    delta = (0.5 if task == "mean" else 1.5) if delta is None else delta
    spec = CostSpec.for_exponent(r)
    level_seeds = child_seeds(seed, len(levels))
    jobs = [(lv, ts) for lv, ls in zip(levels, level_seeds) for ts in ls.spawn(n_trials)]
    out = Parallel(n_jobs=n_jobs)(
        delayed(run_trial)(task, lv, estimators, n, ts, spec, delta, cfg, params)
        for lv, ts in jobs)
    reports = [rep for trial in out for rep in trial]
    rows = []
    for lv in levels:
        for name in estimators:
            reps = [rp for rp in reports if rp.level == lv and rp.estimator == name]
            ok = [rp for rp in reps if rp.error is None]
            loss = np.array([rp.clean_loss for rp in ok])
            pct = np.array([rp.pct_rectified for rp in ok])
            rows.append(dict(
                task=task, level=lv, estimator=name,
                mean_loss=float(loss.mean()) if ok else np.nan,
                two_std=float(2 * loss.std()) if ok else np.nan,
                pct_rectified=float(pct.mean()) if name == "ours" and ok else np.nan,
                n_trials=len(ok), n=n, seed=seed if isinstance(seed, int) else None,
                n_failed=len(reps) - len(ok)))
    config = dict(task=task, levels=list(levels), estimators=list(estimators),
                  n_trials=n_trials, n=n, seed=seed, delta=delta, r=r, rng=ALGORITHM,
                  params=ContaminationModel(
                      "mean_mixture" if task == "mean" else "regression_shift", 0.0,
                      params=params or {}).settings(),
                  scale_convention="standard deviation",
                  trimmed_mean="proportion cut from each tail = corruption level")
    return TableResult(task, rows, reports, config)


# -- figures -------------------------------------------------------------------


def evolution_export(task: str, model: ContaminationModel, delta_list: Sequence[float],
                     spec: CostSpec, cfg: Optional[FitConfig] = None) -> list:
    """Fit at each budget and dump the rectified distribution.

    Rows are dicts with keys ``delta, idx, orig, rect, mass, moved``; ``orig``
    and ``rect`` are coordinate tuples (``(x..., y)`` for regression).
    """
    samples, _ = generate(model)
    rows = []
    for d in delta_list:
        if task == "mean":
            res = fit_mean(samples, spec, d, cfg)
        else:
            res = fit_lad(samples, spec, d, cfg)
        dist = res.rectified
        for idx, orig, pt, mass, moved in zip(dist.source, dist.origin, dist.points,
                                              dist.mass, dist.moved):
            rows.append(dict(delta=float(d), idx=int(idx), orig=tuple(map(float, orig)),
                             rect=tuple(map(float, pt)), mass=float(mass),
                             moved=bool(moved)))
    return rows


def write_snapshots(rows: list, path):
    dim = len(rows[0]["orig"]) if rows else 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "idx"] + [f"orig{j}" for j in range(dim)]
                   + [f"rect{j}" for j in range(dim)] + ["mass", "moved"])
        for row in rows:
            w.writerow([row["delta"], row["idx"], *map(repr, row["orig"]),
                        *map(repr, row["rect"]), repr(row["mass"]), int(row["moved"])])


THREE_POINT = np.array([-1.0, 0.0, 1.0])


def objective_curve(data, theta_range, spec: CostSpec, delta: float) -> np.ndarray:
    """``(m, 2)`` array of ``theta`` and the rectified mean objective, 1-D data."""
    data = as_points(data)
    if data.shape[1] != 1:
        raise ValueError("objective_curve needs 1-D data")
    thetas = np.asarray(theta_range, dtype=float)
    vals = [mean_objective(data, np.array([t]), spec, delta).objective for t in thetas]
    return np.column_stack([thetas, vals])


def count_cusps(curve, min_jump: float = 0.1, direction: str = "down") -> int:
    """Count kinks in a sampled curve.

    A kink is a run of grid points whose second difference exceeds
    ``min_jump`` times the grid step, i.e. the slope jumps by at least
    ``min_jump``. ``direction="down"`` counts V-shaped kinks (slope jumps
    up), ``"up"`` counts peaked ones.
    """
    curve = np.asarray(curve, dtype=float)
    step = np.diff(curve[:, 0]).mean()
    d2 = np.diff(curve[:, 1], 2)
    sign = 1.0 if direction == "down" else -1.0
    hit = sign * d2 > min_jump * step
    return int(np.sum(hit[1:] & ~hit[:-1]) + hit[0]) if hit.size else 0


def sweep_trial(value: float, seed, task: str = "mean", axis: str = "delta",
                level: float = 0.45, delta: float = 1.0, r: float = 0.5, n: int = 1000,
                estimator: str = "ours") -> float:
    """Clean loss of one estimator on one dataset, with ``axis`` set to ``value``."""
    if axis == "delta":
        delta = value
    else:
        r = value
    spec = CostSpec(r, convex_comparison=r >= 1)
    (rep,) = run_trial(task, level, [estimator], n, seed, spec, delta)
    if rep.error is not None:
        raise RuntimeError(rep.error)
    return rep.clean_loss
