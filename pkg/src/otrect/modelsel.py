"""Budget selection by cross-validation, and one-dimensional sensitivity sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.model_selection import ShuffleSplit

from .core import CostSpec, as_points, check_budget
from .rng import child_seeds

# Grid used for implied volatility surfaces
IVS_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 2.0, 5.0, 10.0)


@dataclass(frozen=True)
class CvPlan:
    grid: tuple
    n_splits: int = 5
    split_frac: float = 0.8
    metric: str = "loss"
    seed: int = 0
    tie_rtol: float = 1e-3

    def __post_init__(self):
        if len(self.grid) == 0:
            raise ValueError("delta grid must be nonempty")
        for d in self.grid:
            check_budget(d)
        if not 0 < self.split_frac < 1:
            raise ValueError("split_frac must lie in (0, 1)")
        if self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")
        if self.tie_rtol < 0:
            raise ValueError("tie_rtol must be nonnegative")


@dataclass
class CvResult:
    delta_star: float
    table: list
    model: object = None
    failures: list = field(default_factory=list)


def n_rows(data) -> int:
    if isinstance(data, tuple):
        return len(data[1])
    return len(data)


def take(data, idx):
    """Row subset of an array, an ``(X, y)`` pair or an option chain."""
    if isinstance(data, tuple):
        return tuple(np.asarray(part)[idx] for part in data)
    if hasattr(data, "subset"):
        return data.subset(idx)
    return np.asarray(data)[idx]


def split_indices(n: int, plan: CvPlan) -> list:
    ss = ShuffleSplit(n_splits=plan.n_splits, train_size=plan.split_frac,
                      random_state=plan.seed)
    return list(ss.split(np.arange(n)))


def _cell(fit_fn, score_fn, data, train, test, delta):
    try:
        model = fit_fn(take(data, train), delta)
        return float(score_fn(model, take(data, test))), None
    except Exception as exc:  # failed cells are recorded, not fatal
        return np.nan, f"{type(exc).__name__}: {exc}"


def cross_validate_delta(fit_fn: Callable, data, plan: CvPlan,
                         score_fn: Optional[Callable] = None, n_jobs: int = 1,
                         refit: bool = True) -> CvResult:
    """Pick the budget with the lowest average holdout metric.

    ``fit_fn(train, delta)`` returns a model and ``score_fn(model, test)``
    a number to minimize. Averages within ``plan.tie_rtol`` (relative) of
    the best count as ties, and ties go to the smaller budget. A failed
    (split, budget) cell is left out of that budget's average; a budget
    failing on every split is dropped.
    """
    if score_fn is None:
        raise ValueError("score_fn is required")
    grid = sorted(float(d) for d in plan.grid)
    if len(grid) == 1:
        model = fit_fn(data, grid[0]) if refit else None
        return CvResult(grid[0], [dict(delta=grid[0], mean_metric=np.nan,
                                       std_metric=np.nan, n_ok=0)], model)
    splits = split_indices(n_rows(data), plan)
    cells = [(j, s) for j in range(len(grid)) for s in range(len(splits))]
    out = Parallel(n_jobs=n_jobs)(
        delayed(_cell)(fit_fn, score_fn, data, splits[s][0], splits[s][1], grid[j])
        for j, s in cells)
    scores = np.full((len(grid), len(splits)), np.nan)
    failures = []
    for (j, s), (val, err) in zip(cells, out):
        scores[j, s] = val
        if err is not None:
            failures.append(dict(delta=grid[j], split=s, error=err))
    table = []
    for j, d in enumerate(grid):
        ok = ~np.isnan(scores[j])
        row = dict(delta=d, n_ok=int(ok.sum()),
                   mean_metric=float(scores[j, ok].mean()) if ok.any() else np.nan,
                   std_metric=float(scores[j, ok].std()) if ok.any() else np.nan)
        table.append(row)
    valid = [row for row in table if row["n_ok"] > 0]
    if not valid:
        raise RuntimeError("every cross-validation cell failed")
    low = min(row["mean_metric"] for row in valid)
    # grid is ascending, so the first near-minimal row has the smaller budget
    best = next(row for row in valid
                if row["mean_metric"] <= low + plan.tie_rtol * abs(low))
    model = fit_fn(data, best["delta"]) if refit else None
    return CvResult(best["delta"], table, model, failures)


# -- ready-made task adapters --------------------------------------------------


def mean_task(spec: CostSpec = CostSpec(0.5), cfg=None, metric: str = "loss"):
    """``(fit_fn, score_fn)`` for location estimation, scored by holdout MAD.

    With ``metric="clean_loss"`` the data is a ``(samples, clean_mask)`` pair
    and only the clean holdout points are scored.
    """
    from .estimators import fit_mean

    if metric not in ("loss", "clean_loss"):
        raise ValueError(f"unknown metric {metric!r}")

    def fit_fn(train, delta):
        if metric == "clean_loss":
            train = train[0]
        return fit_mean(train, spec, delta, cfg).theta_hat

    def score_fn(theta, test):
        if metric == "clean_loss":
            test = as_points(test[0])[test[1]]
        return float(np.mean(np.linalg.norm(as_points(test) - theta, axis=1)))

    return fit_fn, score_fn


def lad_task(spec: CostSpec = CostSpec(0.5), cfg=None, metric: str = "loss"):
    """``(fit_fn, score_fn)`` for LAD regression, scored by holdout absolute residual.

    With ``metric="clean_loss"`` the data is ``(X, y, clean_mask)``.
    """
    from .estimators import fit_lad

    if metric not in ("loss", "clean_loss"):
        raise ValueError(f"unknown metric {metric!r}")

    def fit_fn(train, delta):
        res = fit_lad(train[:2], spec, delta, cfg)
        return res.theta_hat, res.intercept

    def score_fn(model, test):
        coef, b = model
        X, y = test[:2]
        if metric == "clean_loss":
            X, y = np.asarray(X)[test[2]], np.asarray(y)[test[2]]
        X = np.asarray(X, dtype=float).reshape(len(y), -1)
        return float(np.mean(np.abs(y - X @ coef - b)))

    return fit_fn, score_fn


def ivs_task(h=None, spec: CostSpec = CostSpec(0.5), cfg=None):
    """``(fit_fn, score_fn)`` for robust surfaces, scored by holdout MAPE."""
    from . import ivs

    h = ivs.DEFAULT_BANDWIDTHS if h is None else h

    def fit_fn(train, delta):
        return ivs.fit_robust(train, h, spec, delta, cfg)

    return fit_fn, ivs.mape


# -- sweeps --------------------------------------------------------------------


@dataclass
class SweepResult:
    axis: str
    points: list
    config: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.axis, "mean_metric", "std_metric"])
            for value, mean, std in self.points:
                w.writerow([repr(value), repr(mean), repr(std)])


def sweep(axis: str, values: Sequence[float], trial_fn: Callable, n_trials: int,
          seed=0, n_jobs: int = 1, config: Optional[dict] = None) -> SweepResult:
    """Run ``trial_fn(value, seed)`` for every value and trial.

    Trial ``t`` uses the same child seed at every value, so values are
    compared on identical data.
    """
    if axis not in ("delta", "r"):
        raise ValueError(f"unknown axis {axis!r}")
    values = sorted(float(v) for v in values)
    if not values:
        raise ValueError("values must be nonempty")
    seeds = [int(s.generate_state(1)[0]) for s in child_seeds(seed, n_trials)]
    out = Parallel(n_jobs=n_jobs)(
        delayed(trial_fn)(v, s) for v in values for s in seeds)
    res = np.asarray(out, dtype=float).reshape(len(values), n_trials)
    points = [(v, float(row.mean()), float(row.std())) for v, row in zip(values, res)]
    return SweepResult(axis, points, dict(config or {}, n_trials=n_trials, seed=seed))
