"""Fitting loops for the rectified estimator, plus classical baselines.

Every fit alternates two steps. Given the current parameter, sort samples by
loss and solve the inner problem exactly (``dual.solve_dual``). Then take a
subgradient step using only the atoms the solution leaves in place, i.e. the
ones judged clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy.optimize import linprog
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import CostSpec, as_points, check_budget, check_weights, dual_norm, norm
from .dual import (
    RectifiedDistribution,
    active_indices,
    build_profile,
    rectified_distribution,
    solve_dual,
)
from .rng import spawn


@dataclass(frozen=True)
class FitConfig:
    """Settings for the subgradient loop.

    ``init`` is one of ``"median"``, ``"zero"``, ``"gaussian"`` or an
    explicit starting vector. ``batch_size=None`` means full batch.
    The loop stops once the objective changes by less than ``rel_tol``
    between iterations; with ``tol_mode="relative"`` the change is divided
    by ``max(1, |f|)`` first.
    """

    step_size: float = 1e-2
    max_iters: int = 1000
    rel_tol: float = 1e-6
    n_restarts: int = 1
    init: Union[str, Sequence[float], np.ndarray] = "median"
    batch_size: Optional[int] = None
    seed: int = 0
    tol_mode: str = "absolute"

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.tol_mode not in ("absolute", "relative"):
            raise ValueError(f"unknown tol_mode {self.tol_mode!r}")

    @classmethod
    def for_mean(cls, **kw) -> "FitConfig":
        """lr 1e-2, up to 2000 iterations, tol 1e-6, median start."""
        return cls(**{**dict(max_iters=2000, init="median"), **kw})

    @classmethod
    def for_lad(cls, **kw) -> "FitConfig":
        """lr 1e-2, up to 1000 iterations, tol 1e-6, N(0,1) slopes, 10 restarts."""
        return cls(**{**dict(max_iters=1000, init="gaussian", n_restarts=10), **kw})


@dataclass
class FitResult:
    theta_hat: np.ndarray
    final_objective: float
    trace: np.ndarray
    rectified: Optional[RectifiedDistribution]
    detected_outlier_indices: np.ndarray
    pct_rectified: float
    n_iter: int
    converged: bool
    intercept: float = 0.0
    required_budget: float = 0.0
    restarts: list = field(default_factory=list)


# -- losses -------------------------------------------------------------------


class RectifiableLoss:
    """Per-sample loss with a subgradient, the interface ``fit_generic`` drives.

    Subclasses implement ``losses`` and ``subgradient``. ``transport_scale``
    is the distance a point has to travel per unit of loss removed
    (1 for location problems, ``||(theta, -1)||`` for linear residuals); the
    budget is multiplied by its ``r``-th power.
    """

    n_samples: int

    def losses(self, theta, idx) -> np.ndarray:
        raise NotImplementedError

    def subgradient(self, theta, idx, coef) -> np.ndarray:
        """``sum_j coef[j] * d/dtheta loss(theta, sample idx[j])``."""
        raise NotImplementedError

    def transport_scale(self, theta) -> float:
        return 1.0

    def rectify(self, theta, spec, delta, weights) -> Optional[RectifiedDistribution]:
        return None


class LocationLoss(RectifiableLoss):
    """``||theta - z_i||`` for location estimation."""

    def __init__(self, Z):
        self.Z = as_points(Z)
        self.n_samples = self.Z.shape[0]

    def losses(self, theta, idx):
        return norm(self.Z[idx] - theta)

    def subgradient(self, theta, idx, coef):
        diff = theta - self.Z[idx]
        dist = norm(diff)
        safe = np.where(dist > 0, dist, 1.0)
        # zero at coincident points
        unit = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0)
        return coef @ unit

    def rectify(self, theta, spec, delta, weights):
        return rectified_distribution(self.Z, theta, "mean", spec, delta, weights)


class AbsoluteLoss(RectifiableLoss):
    """``|y_i - D_i theta|`` for a design matrix ``D``.

    ``n_penalized`` leading coordinates of ``theta`` enter the transport
    scale ``||(theta[:n_penalized], -1)||``; trailing ones (an intercept)
    do not.
    """

    def __init__(self, D, y, n_penalized=None):
        self.D = np.asarray(D, dtype=float)
        self.y = np.asarray(y, dtype=float).ravel()
        self.n_samples = self.D.shape[0]
        self.n_penalized = self.D.shape[1] if n_penalized is None else n_penalized

    def signed(self, theta, idx):
        return self.D[idx] @ theta - self.y[idx]

    def losses(self, theta, idx):
        return np.abs(self.signed(theta, idx))

    def subgradient(self, theta, idx, coef):
        return (coef * np.sign(self.signed(theta, idx))) @ self.D[idx]

    def transport_scale(self, theta):
        return float(dual_norm(np.append(theta[: self.n_penalized], -1.0)))

    def rectify(self, theta, spec, delta, weights):
        k = self.n_penalized
        X = self.D[:, :k]
        offset = self.D[:, k:] @ theta[k:] if k < self.D.shape[1] else 0.0
        intercept = 0.0
        if k < self.D.shape[1] and np.allclose(self.D[:, k:], 1.0):
            intercept = float(np.sum(theta[k:]))
        elif k < self.D.shape[1]:
            # non-constant unpenalized columns: fold them into the response
            return rectified_distribution(
                (X, self.y - offset), theta[:k], "regression", spec, delta, weights
            )
        return rectified_distribution(
            (X, self.y), theta[:k], "regression", spec, delta, weights, intercept
        )


# -- core loop ---------------------------------------------------------------


def _descend(loss: RectifiableLoss, theta0, spec: CostSpec, delta: float,
             cfg: FitConfig, weights, rng):
    n = loss.n_samples
    theta = np.array(theta0, dtype=float)
    full = cfg.batch_size is None or cfg.batch_size >= n
    all_idx = np.arange(n)
    trace = []
    best_obj, best_theta = np.inf, theta.copy()
    prev = None
    converged = False
    relative = cfg.tol_mode == "relative"
    for _ in range(cfg.max_iters):
        if full:
            idx, w = all_idx, weights
        else:
            idx = np.sort(rng.choice(n, size=cfg.batch_size, replace=False))
            w = weights[idx] / weights[idx].sum()
        x = loss.losses(theta, idx)
        if np.any(x < 0):
            raise ValueError("loss function returned negative values")
        profile = build_profile(x, w, spec.r)
        sol = solve_dual(profile, _budget(delta, loss, theta, x, w, spec))
        obj = sol.objective
        trace.append(obj)
        if obj < best_obj:
            best_obj, best_theta = obj, theta.copy()
        scale = max(1.0, abs(prev)) if relative and prev is not None else 1.0
        if prev is not None and abs(obj - prev) < cfg.rel_tol * scale:
            converged = True
            break
        prev = obj
        act = active_indices(profile, sol)
        if act.size == 0:
            # every atom rectified: zero subgradient, the iterate is stationary
            converged = True
            break
        theta = theta - cfg.step_size * loss.subgradient(theta, idx[act], w[act])
    final = best_theta if full else theta
    return final, np.asarray(trace), converged


def _budget(delta, loss, theta, x, w, spec):
    if callable(delta):
        # per-iteration rule, returns the raw budget before transport scaling
        delta = check_budget(delta(theta, x, w))
    return delta * loss.transport_scale(theta) ** spec.r


def _summarize(loss, theta, spec, delta, weights, trace, converged, intercept=0.0):
    x = loss.losses(theta, np.arange(loss.n_samples))
    profile = build_profile(x, weights, spec.r)
    sol = solve_dual(profile, _budget(delta, loss, theta, x, weights, spec))
    if callable(delta):
        delta = sol.delta_effective / loss.transport_scale(theta) ** spec.r
    moved = _moved_mass(profile, sol)
    if sol.level is not None:
        # convex regime: only atoms cut all the way to zero count as removed
        fully = profile.perm[profile.values <= sol.level]
    elif sol.trivial:
        fully = profile.perm
    else:
        fully = profile.perm[sol.knot + 1:]
    return FitResult(
        theta_hat=theta,
        final_objective=sol.objective,
        trace=trace,
        rectified=loss.rectify(theta, spec, delta, weights),
        detected_outlier_indices=np.sort(fully),
        pct_rectified=moved,
        n_iter=len(trace),
        converged=converged,
        intercept=intercept,
        required_budget=profile.total_pow / loss.transport_scale(theta) ** spec.r,
    )


def _moved_mass(profile, sol) -> float:
    a, x = profile.weights, profile.values
    if sol.trivial:
        return float(a[x > 0].sum())
    if sol.level is not None:
        return float(a[x > 0].sum())
    k = sol.knot
    if k >= profile.n:
        return 0.0
    return float(a[k + 1:].sum() + (1.0 - sol.eta) * a[k])


def _init_theta(init, dim, rng, median=None, n_penalized=None):
    if isinstance(init, str):
        if init == "zero":
            return np.zeros(dim)
        if init == "median":
            if median is None:
                raise ValueError("median init is not available for this loss")
            return np.asarray(median, dtype=float).copy()
        if init == "gaussian":
            theta = np.zeros(dim)
            k = dim if n_penalized is None else n_penalized
            theta[:k] = rng.standard_normal(k)
            return theta
        raise ValueError(f"unknown init {init!r}")
    theta = np.asarray(init, dtype=float).ravel()
    if theta.shape[0] != dim:
        raise ValueError(f"init has dimension {theta.shape[0]}, expected {dim}")
    return theta.copy()


def fit_generic(loss: RectifiableLoss, spec: CostSpec, delta: float, cfg: FitConfig,
                weights=None, dim: Optional[int] = None, median=None) -> FitResult:
    """Mini-batch rectified subgradient descent on a pluggable loss.

    Each iteration samples ``cfg.batch_size`` points without replacement
    (full batch when unset), solves the knot problem on the batch and
    steps on the atoms left in place. Heuristic: no optimality guarantee.
    ``delta`` may also be a callable ``(theta, losses, weights) -> budget``
    evaluated every iteration.
    """
    if not callable(delta):
        delta = check_budget(delta)
    n = loss.n_samples
    if n == 0:
        raise ValueError("empty data")
    w = check_weights(weights, n)
    if dim is None:
        dim = getattr(loss, "D", np.empty((0, 1))).shape[1]
    streams = spawn(cfg.seed, cfg.n_restarts)
    runs = []
    for rng in streams:
        theta0 = _init_theta(cfg.init, dim, rng, median,
                             getattr(loss, "n_penalized", None))
        theta, trace, conv = _descend(loss, theta0, spec, delta, cfg, w, rng)
        runs.append(_summarize(loss, theta, spec, delta, w, trace, conv))
    # ties (typically several restarts at objective 0) go to the parameter
    # that needs the least budget to be fully rectified
    best = min(runs, key=lambda res: (res.final_objective, res.required_budget))
    best.restarts = [res.final_objective for res in runs]
    return best


def fit_mean(data, spec: CostSpec, delta: float, cfg: Optional[FitConfig] = None,
             weights=None) -> FitResult:
    """Rectified location estimate. ``delta=0`` gives the spatial median."""
    cfg = FitConfig.for_mean() if cfg is None else cfg
    Z = as_points(data)
    loss = LocationLoss(Z)
    return fit_generic(loss, spec, delta, replace(cfg, batch_size=None), weights,
                       dim=Z.shape[1], median=np.median(Z, axis=0))


def _regression_design(X, fit_intercept):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("regression needs at least one sample and one feature")
    D = np.column_stack([X, np.ones(X.shape[0])]) if fit_intercept else X
    return X, D


def fit_lad(data, spec: CostSpec, delta: float, cfg: Optional[FitConfig] = None,
            weights=None, fit_intercept: bool = True) -> FitResult:
    """Rectified LAD regression on ``data = (X, y)``.

    Best of ``cfg.n_restarts`` runs by final rectified objective.
    ``theta_hat`` holds the slopes; the intercept is reported separately.
    """
    cfg = FitConfig.for_lad() if cfg is None else cfg
    X, y = data
    X, D = _regression_design(X, fit_intercept)
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != X.shape[0]:
        raise ValueError("X and y have different numbers of rows")
    d = X.shape[1]
    loss = AbsoluteLoss(D, y, n_penalized=d)
    median = np.zeros(D.shape[1])
    if fit_intercept:
        median[-1] = np.median(y)
    res = fit_generic(loss, spec, delta, replace(cfg, batch_size=None), weights,
                      dim=D.shape[1], median=median)
    if fit_intercept:
        res.intercept = float(res.theta_hat[-1])
        res.theta_hat = res.theta_hat[:-1]
    return res


# -- baselines ----------------------------------------------------------------


class RankDeficientError(ValueError):
    pass


def trimmed_mean(x, proportiontocut: float, side: str = "both") -> float:
    """Mean after dropping ``proportiontocut`` of the sample from each
    trimmed tail (``side`` in ``both``, ``upper``, ``lower``)."""
    x = np.sort(np.asarray(x, dtype=float).ravel())
    n = x.shape[0]
    limit = 0.5 if side == "both" else 1.0
    if not 0 <= proportiontocut < limit:
        raise ValueError(f"proportiontocut must be in [0, {limit})")
    cut = int(proportiontocut * n)
    if side == "both":
        kept = x[cut: n - cut]
    elif side == "upper":
        kept = x[: n - cut]
    elif side == "lower":
        kept = x[cut:]
    else:
        raise ValueError(f"unknown side {side!r}")
    return float(kept.mean())


def baselines_mean(data, method: str = "median", pct: float = 0.0,
                   side: str = "both") -> np.ndarray:
    """Classical location estimates per coordinate.

    For ``trimmed_mean``, ``pct`` is the fraction cut from each trimmed
    tail, so ``pct=0.45, side="both"`` keeps the middle 10%.
    """
    Z = as_points(data)
    if method == "mean":
        return Z.mean(axis=0)
    if method == "median":
        return np.median(Z, axis=0)
    if method == "trimmed_mean":
        if pct >= 1:
            raise ValueError("trim fraction must be < 1")
        return np.array([trimmed_mean(Z[:, j], pct, side) for j in range(Z.shape[1])])
    raise ValueError(f"unknown method {method!r}")


def _ols(D, y):
    if np.linalg.matrix_rank(D) < D.shape[1]:
        raise RankDeficientError("design matrix is rank deficient")
    return np.linalg.solve(D.T @ D, D.T @ y)


def _lad_lp(D, y):
    n, p = D.shape
    c = np.concatenate([np.zeros(p), np.ones(2 * n)])
    A = np.hstack([D, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=A, b_eq=y, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"LAD linear program failed: {res.message}")
    return res.x[:p]


def _huber_irls(D, y, threshold, tol=1e-8, max_iter=500):
    beta = _ols(D, y)
    for _ in range(max_iter):
        res = y - D @ beta
        scale = np.median(np.abs(res - np.median(res))) / 0.6744897501960817
        if scale <= 0:
            break
        a = np.abs(res) / scale
        w = np.where(a <= threshold, 1.0, threshold / np.maximum(a, 1e-300))
        Dw = D * w[:, None]
        new = np.linalg.solve(D.T @ Dw, Dw.T @ y)
        done = np.linalg.norm(new - beta) <= tol * max(1.0, np.linalg.norm(beta))
        beta = new
        if done:
            break
    return beta


def baselines_regression(X, y, method: str = "ols", threshold: float = 1.5,
                         fit_intercept: bool = True, lad_solver: str = "lp",
                         cfg: Optional[FitConfig] = None):
    """OLS, LAD or Huber fit. Returns ``(coef, intercept)``.

    ``lad_solver="lp"`` solves LAD exactly as a linear program;
    ``"subgradient"`` runs the rectified loop with zero budget (and the
    same restarts/initialisation as :func:`fit_lad`).
    Huber uses iteratively reweighted least squares with a MAD scale.
    """
    X, D = _regression_design(X, fit_intercept)
    y = np.asarray(y, dtype=float).ravel()
    if method == "ols":
        beta = _ols(D, y)
    elif method == "lad":
        if lad_solver == "lp":
            beta = _lad_lp(D, y)
        elif lad_solver == "subgradient":
            res = fit_lad((X, y), CostSpec(0.5), 0.0, cfg, fit_intercept=fit_intercept)
            return res.theta_hat, res.intercept
        else:
            raise ValueError(f"unknown lad_solver {lad_solver!r}")
    elif method == "huber":
        beta = _huber_irls(D, y, threshold)
    else:
        raise ValueError(f"unknown method {method!r}")
    if fit_intercept:
        return beta[:-1], float(beta[-1])
    return beta, 0.0


# -- scikit-learn style wrappers --------------------------------------------


class RectifiedMean(BaseEstimator):
    """Location estimator with optimal-transport outlier rectification.

    Parameters
    ----------
    delta : float
        Transport budget.
    r : float
        Cost exponent; ``r >= 1`` switches to the convex comparison regime.
    step_size, max_iter, tol :
        Subgradient loop settings.
    init : {"median", "zero"} or array
        Starting point.

    Attributes
    ----------
    location_ : ndarray of shape (n_features,)
    objective_ : float
        Rectified mean absolute deviation at ``location_``.
    rectified_ : RectifiedDistribution
    outlier_indices_ : ndarray
        Samples moved entirely onto the estimate.
    pct_rectified_ : float
        Fraction of mass transported.
    """

    def __init__(self, delta=0.5, r=0.5, step_size=1e-2, max_iter=2000, tol=1e-6,
                 init="median"):
        self.delta = delta
        self.r = r
        self.step_size = step_size
        self.max_iter = max_iter
        self.tol = tol
        self.init = init

    def fit(self, X, y=None, sample_weight=None):
        X = check_array(X, ensure_2d=False)
        cfg = FitConfig(step_size=self.step_size, max_iters=self.max_iter,
                        rel_tol=self.tol, init=self.init)
        res = fit_mean(X, CostSpec(self.r, convex_comparison=self.r >= 1),
                       self.delta, cfg, sample_weight)
        self.location_ = res.theta_hat
        self.objective_ = res.final_objective
        self.trace_ = res.trace
        self.rectified_ = res.rectified
        self.outlier_indices_ = res.detected_outlier_indices
        self.pct_rectified_ = res.pct_rectified
        self.n_iter_ = res.n_iter
        return self

    def score_samples(self, X):
        """Distance of each sample to the fitted location."""
        check_is_fitted(self, "location_")
        return norm(as_points(check_array(X, ensure_2d=False)) - self.location_)

    def score(self, X, y=None):
        return -float(np.mean(self.score_samples(X)))


class RectifiedLADRegressor(RegressorMixin, BaseEstimator):
    """Least-absolute-deviation regression with outlier rectification.

    Parameters
    ----------
    delta : float
        Transport budget; scaled internally by ``||(coef, -1)||**r``.
    r : float
        Cost exponent.
    step_size, max_iter, tol, n_restarts :
        Subgradient loop settings; the best restart by rectified objective
        is kept.
    init : {"gaussian", "zero", "median"} or array
    fit_intercept : bool
    random_state : int
    """

    def __init__(self, delta=1.5, r=0.5, step_size=1e-2, max_iter=1000, tol=1e-6,
                 n_restarts=10, init="gaussian", fit_intercept=True, random_state=0):
        self.delta = delta
        self.r = r
        self.step_size = step_size
        self.max_iter = max_iter
        self.tol = tol
        self.n_restarts = n_restarts
        self.init = init
        self.fit_intercept = fit_intercept
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, y_numeric=True)
        cfg = FitConfig(step_size=self.step_size, max_iters=self.max_iter,
                        rel_tol=self.tol, n_restarts=self.n_restarts, init=self.init,
                        seed=self.random_state)
        res = fit_lad((X, y), CostSpec(self.r, convex_comparison=self.r >= 1),
                      self.delta, cfg, sample_weight, self.fit_intercept)
        self.coef_ = res.theta_hat
        self.intercept_ = res.intercept
        self.objective_ = res.final_objective
        self.trace_ = res.trace
        self.rectified_ = res.rectified
        self.outlier_indices_ = res.detected_outlier_indices
        self.pct_rectified_ = res.pct_rectified
        self.n_iter_ = res.n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return X @ self.coef_ + self.intercept_
