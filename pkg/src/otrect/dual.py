"""Exact solvers for the inner (rectification) problem.

For a fixed parameter the inner problem

    min_{Q : D_c(Q, P_n) <= delta}  E_Q[loss]

reduces, after strong duality, to a one-dimensional concave piecewise-linear
maximisation over the multiplier ``lam``:

    max_{lam >= 0}  sum_i a_i min(x_i, lam x_i**r) - lam delta

where ``x_i`` are the loss magnitudes and ``a_i`` the sample weights. The
maximiser is a knot ``lam = x_k**(1-r)``: every atom above the knot is moved
all the way onto a zero-loss position, the knot atom is split, the rest stay
put.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    CostSpec,
    absolute_residuals,
    as_points,
    check_budget,
    check_weights,
    dual_norm,
    norm,
)


@dataclass(frozen=True)
class SortedLossProfile:
    """Loss magnitudes sorted ascending with suffix sums of ``a_i x_i**r``.

    ``pow_suffix`` has length ``n + 1``; entry ``k`` is
    ``sum_{i >= k} a_i x_i**r`` and the trailing entry is 0.
    ``perm[k]`` is the original index of the ``k``-th smallest residual.
    """

    values: np.ndarray
    weights: np.ndarray
    pow_suffix: np.ndarray
    perm: np.ndarray
    r: float

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def total_pow(self) -> float:
        return float(self.pow_suffix[0])


@dataclass(frozen=True)
class DualSolution:
    """Optimal multiplier and the induced split of the sorted atoms.

    Indices are 0-based positions in the sorted profile. ``knot`` is
    ``None`` when the budget covers every atom (objective 0) and equals ``n``
    when the budget is zero. For ``r > 1`` the budget is spread by
    water-filling: every atom's loss is cut by up to ``level`` and ``knot``
    is the first sorted position whose loss exceeds ``level``.
    """

    lambda_star: float
    knot: Optional[int]
    eta: float
    objective: float
    delta_effective: float
    level: Optional[float] = None

    @property
    def trivial(self) -> bool:
        return self.knot is None


def build_profile(residuals, weights=None, r: float = 0.5) -> SortedLossProfile:
    """Stable ascending sort of ``residuals`` plus the suffix sums."""
    x = np.asarray(residuals, dtype=float).ravel()
    if np.any(~np.isfinite(x)) or np.any(x < 0):
        raise ValueError("residuals must be finite and non-negative")
    w = check_weights(weights, x.shape[0])
    perm = np.argsort(x, kind="stable")
    xs, ws = x[perm], w[perm]
    suffix = np.zeros(xs.shape[0] + 1)
    suffix[:-1] = np.cumsum((ws * xs**r)[::-1])[::-1]
    return SortedLossProfile(values=xs, weights=ws, pow_suffix=suffix, perm=perm, r=r)


def solve_dual(profile: SortedLossProfile, delta_eff: float) -> DualSolution:
    """Maximise the dual over ``lam`` in ``O(n)`` given the sorted profile."""
    delta = check_budget(delta_eff)
    x, a, S, r = profile.values, profile.weights, profile.pow_suffix, profile.r
    n = x.shape[0]
    if delta == 0.0:
        top = x[-1] if n else 0.0
        lam = top ** (1 - r) if top > 0 else 0.0
        return DualSolution(lam, n, 1.0, float(a @ x), 0.0)
    if S[0] <= delta:
        return DualSolution(0.0, None, 0.0, 0.0, delta)
    if r > 1:
        return _water_fill(profile, delta)
    # S is non-increasing so the indices with S_k >= delta form a prefix
    k = int(np.count_nonzero(S[:n] >= delta)) - 1
    mu = (delta - S[k + 1]) / (a[k] * x[k] ** r)
    eta = 1.0 - mu
    value = float(a[:k] @ x[:k]) + eta * a[k] * x[k]
    return DualSolution(x[k] ** (1 - r), k, eta, max(value, 0.0), delta)


def _water_fill(profile: SortedLossProfile, delta: float) -> DualSolution:
    # convex cost: cut every loss by min(x_i, c) with sum a_i min(x_i, c)**r = delta
    x, a, r = profile.values, profile.weights, profile.r
    n = x.shape[0]
    below = np.concatenate([[0.0], np.cumsum(a * x**r)])  # sum_{i<j} a_i x_i^r
    tail_w = np.concatenate([np.cumsum(a[::-1])[::-1], [0.0]])  # sum_{i>=j} a_i
    # budget used when the level sits at x_j is below[j] + x_j**r tail_w[j]
    used = below[:n] + x**r * tail_w[:n]
    j = int(np.searchsorted(used, delta, side="right"))
    level = ((delta - below[j]) / tail_w[j]) ** (1.0 / r)
    value = float(a[j:] @ (x[j:] - level))
    lam = 1.0 / (r * level ** (r - 1)) if level > 0 else np.inf
    return DualSolution(lam, j, 1.0, max(value, 0.0), delta, level=level)


def dual_value(profile: SortedLossProfile, delta_eff: float, lam) -> np.ndarray:
    """Dual objective at one or many ``lam`` values (vectorised)."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    x, a, r = profile.values, profile.weights, profile.r
    inner = np.minimum(x[None, :], lam[:, None] * x[None, :] ** r)
    return inner @ a - lam * delta_eff


def active_indices(profile: SortedLossProfile, sol: DualSolution) -> np.ndarray:
    """Original indices of atoms that keep positive loss under ``Q*``.

    These are the atoms a subgradient step is taken on: for ``r <= 1`` the
    atoms up to and including the knot, for ``r > 1`` the atoms above the
    water level.
    """
    if sol.trivial:
        return profile.perm[:0]
    if sol.level is not None:
        return profile.perm[sol.knot:]
    return profile.perm[: sol.knot + 1]


def enumerate_knots_oracle(profile: SortedLossProfile, delta_eff: float) -> DualSolution:
    """Brute-force reference for :func:`solve_dual` (``r <= 1`` only).

    Evaluates the dual at every candidate multiplier ``{0} U {x_i**(1-r)}``
    on the raw profile arrays, takes the best, and reconstructs the knot
    by spending the budget top-down on the atoms priced at that multiplier.
    Shares no code with :func:`solve_dual`.
    """
    r = profile.r
    if not 0 < r <= 1:
        raise ValueError("oracle covers 0 < r <= 1")
    delta = float(delta_eff)
    x = np.array(profile.values, dtype=float)
    a = np.array(profile.weights, dtype=float)
    n = len(x)
    total_loss = sum(ai * xi for ai, xi in zip(a, x))
    if delta == 0.0:
        lam = max(x) ** (1 - r) if n and max(x) > 0 else 0.0
        return DualSolution(lam, n, 1.0, total_loss, 0.0)

    candidates = [0.0] + [xi ** (1 - r) for xi in x if xi > 0]
    best_lam, best_val = 0.0, 0.0
    for lam in candidates:
        val = sum(ai * min(xi, lam * xi**r) for ai, xi in zip(a, x)) - lam * delta
        # ties go to the larger multiplier
        if val > best_val + 1e-13 or (abs(val - best_val) <= 1e-13 and lam > best_lam):
            best_lam, best_val = lam, val
    if best_lam == 0.0 or best_val <= 0.0:
        return DualSolution(0.0, None, 0.0, 0.0, delta)

    price = [xi ** (1 - r) if xi > 0 else 0.0 for xi in x]
    tol = 1e-12 * best_lam
    moved = [i for i in range(n) if price[i] > best_lam + tol]
    tied = [i for i in range(n) if abs(price[i] - best_lam) <= tol]
    remaining = delta - sum(a[i] * x[i] ** r for i in moved)
    knot, eta = tied[-1], 1.0
    for i in reversed(tied):
        cost = a[i] * x[i] ** r
        knot = i
        if cost > 0 and remaining <= cost:
            eta = 1.0 - remaining / cost
            break
        remaining -= cost
        eta = 0.0
    return DualSolution(best_lam, knot, eta, best_val, delta)


# -- task wrappers ---------------------------------------------------------


def regression_budget(delta: float, coef, r: float) -> float:
    """Effective budget ``delta * ||(coef, -1)||**r``."""
    coef = np.atleast_1d(np.asarray(coef, dtype=float))
    return check_budget(delta) * float(dual_norm(np.append(coef, -1.0))) ** r


def mean_profile(data, theta, spec: CostSpec, weights=None) -> SortedLossProfile:
    return build_profile(absolute_residuals(data, theta, task="mean"), weights, spec.r)


def lad_profile(data, theta, spec: CostSpec, weights=None,
                intercept: float = 0.0) -> SortedLossProfile:
    X, y = data
    y = np.asarray(y, dtype=float) - intercept
    return build_profile(absolute_residuals((X, y), theta, task="regression"),
                         weights, spec.r)


def mean_objective(data, theta, spec: CostSpec, delta: float,
                   weights=None) -> DualSolution:
    """Inner minimum for location estimation at ``theta``."""
    return solve_dual(mean_profile(data, theta, spec, weights), check_budget(delta))


def lad_objective(data, theta, spec: CostSpec, delta: float, weights=None,
                  intercept: float = 0.0) -> DualSolution:
    """Inner minimum for LAD regression at coefficients ``theta``.

    ``data`` is ``(X, y)``. The budget is rescaled by ``||(theta, -1)||**r``;
    an intercept shifts the residuals but is not part of the norm because
    it is not a coordinate of the transported points.
    """
    profile = lad_profile(data, theta, spec, weights, intercept)
    return solve_dual(profile, regression_budget(delta, theta, spec.r))


# -- rectified distribution -------------------------------------------------


@dataclass(frozen=True)
class RectifiedDistribution:
    """Weighted atoms of the optimal rectified distribution ``Q*``.

    Row ``j`` of ``points`` carries ``mass[j]``; it came from sample
    ``source[j]`` originally at ``origin[j]``. ``moved[j]`` marks atoms that
    were transported.
    """

    points: np.ndarray
    mass: np.ndarray
    source: np.ndarray
    origin: np.ndarray
    moved: np.ndarray
    r: float
    meta: dict = field(default_factory=dict)

    def transport_cost(self) -> float:
        return float(self.mass @ norm(self.points - self.origin) ** self.r)

    @property
    def moved_mass(self) -> float:
        return float(self.mass[self.moved].sum())

    def fully_moved_sources(self) -> np.ndarray:
        """Original indices whose whole mass was transported."""
        kept = set(self.source[~self.moved].tolist())
        return np.array(sorted(set(self.source[self.moved].tolist()) - kept), dtype=int)

    def support(self, decimals: int = 12):
        """Merge atoms sitting on the same point; returns ``(points, mass)``."""
        keys = np.round(self.points, decimals)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        mass = np.zeros(uniq.shape[0])
        np.add.at(mass, inv.ravel(), self.mass)
        return uniq, mass


def _movement(profile: SortedLossProfile, sol: DualSolution) -> np.ndarray:
    """Loss reduction per original sample (same order as the input)."""
    x = profile.values
    n = x.shape[0]
    cut = np.zeros(n)
    if sol.trivial:
        cut[:] = x
    elif sol.level is not None:
        cut = np.minimum(x, sol.level)
    elif sol.knot < n:
        cut[sol.knot + 1:] = x[sol.knot + 1:]
    out = np.empty(n)
    out[profile.perm] = cut
    return out


def rectified_distribution(data, theta, task: str, spec: CostSpec, delta: float,
                           weights=None, intercept: float = 0.0) -> RectifiedDistribution:
    """Build ``Q*`` at ``theta``.

    Mean task: moved atoms land on ``theta``. Regression task: moved atoms
    are pushed along the normal of the hyperplane ``y = theta^T x + b``,
    which is the cheapest way in l2 to cut the residual. For ``r <= 1`` at
    most one atom (the knot) is split; everything else either stays or
    lands at zero loss.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if task == "mean":
        z = as_points(data)
        profile = mean_profile(z, theta, spec, weights)
        sol = solve_dual(profile, check_budget(delta))
        diff = theta - z
        dist = norm(diff)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(dist[:, None] > 0, diff / dist[:, None], 0.0)
    elif task == "regression":
        X, y = data
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float).ravel()
        z = np.column_stack([X, y])
        profile = lad_profile((X, y), theta, spec, weights, intercept)
        sol = solve_dual(profile, regression_budget(delta, theta, spec.r))
        normal = np.append(theta, -1.0)
        scale = float(dual_norm(normal))
        signed = X @ theta + intercept - y
        # reducing |residual| by u costs a move of u / ||normal|| along -sign * normal
        unit = -np.sign(signed)[:, None] * normal[None, :] / scale
    else:
        raise ValueError(f"unknown task {task!r}")

    w = check_weights(weights, z.shape[0])
    cut = _movement(profile, sol)
    step = cut if task == "mean" else cut / scale
    new = z + step[:, None] * unit

    rows_p, rows_m, rows_s, rows_o, rows_mv = [], [], [], [], []
    knot_src = None
    if not sol.trivial and sol.level is None and sol.knot < profile.n:
        knot_src = int(profile.perm[sol.knot])
    for i in range(z.shape[0]):
        if i == knot_src:
            target = z[i] + (profile.values[sol.knot] if task == "mean"
                             else profile.values[sol.knot] / scale) * unit[i]
            rows_p += [z[i], target]
            rows_m += [sol.eta * w[i], (1.0 - sol.eta) * w[i]]
            rows_s += [i, i]
            rows_o += [z[i], z[i]]
            rows_mv += [False, True]
        else:
            rows_p.append(new[i])
            rows_m.append(w[i])
            rows_s.append(i)
            rows_o.append(z[i])
            rows_mv.append(bool(cut[i] > 0))
    return RectifiedDistribution(
        points=np.array(rows_p),
        mass=np.array(rows_m),
        source=np.array(rows_s, dtype=int),
        origin=np.array(rows_o),
        moved=np.array(rows_mv, dtype=bool),
        r=spec.r,
        meta={"task": task, "objective": sol.objective,
              "delta_effective": sol.delta_effective, "knot": sol.knot,
              "eta": sol.eta},
    )


def expected_loss(dist: RectifiedDistribution, theta, task: str,
                  intercept: float = 0.0) -> float:
    """``E_Q[loss(theta, Z)]`` over a rectified distribution."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if task == "mean":
        loss = norm(dist.points - theta)
    else:
        X, y = dist.points[:, :-1], dist.points[:, -1]
        loss = np.abs(y - X @ theta - intercept)
    return float(dist.mass @ loss)


# -- squared loss, r = 1/2 ---------------------------------------------------


@dataclass(frozen=True)
class SquaredLossRectification:
    """Optimal single-atom move for squared loss with ``r = 1/2``.

    ``displacement`` is the transport distance ``||Delta||``; ``objective``
    is ``K(displacement)``.
    """

    displacement: float
    beta_plus: Optional[float]
    regime: str
    objective: float


def squared_loss_objective(d, ztilde_dot: float, theta_norm: float, lam: float):
    """``K(d) = (|t| - ||theta|| d)**2 + lam * sqrt(d)``."""
    d = np.asarray(d, dtype=float)
    return (abs(ztilde_dot) - theta_norm * d) ** 2 + lam * np.sqrt(d)


def squared_loss_rectify(ztilde_dot: float, theta_norm: float, lam: float,
                         tol: float = 1e-12) -> SquaredLossRectification:
    """Minimise ``K`` over ``d in [0, |t| / ||theta||]``.

    With ``beta = sqrt(d)`` the stationarity condition is the cubic
    ``g(beta) = B**2 beta**3 + lam / 4 - A B beta = 0`` (``A = |t|``,
    ``B = ||theta||``). If ``g`` is non-negative at its own minimiser the
    cost is too steep to move the atom at all. Otherwise ``K`` rises up to
    the small root, falls to the large root ``beta_+`` and rises again, so
    the answer is whichever of ``0`` and ``beta_+**2`` is lower.
    """
    if theta_norm <= 0:
        raise ValueError("theta_norm must be positive")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    A, B = abs(float(ztilde_dot)), float(theta_norm)
    if A == 0.0:
        return SquaredLossRectification(0.0, None, "no-move", 0.0)

    def g(beta):
        return B * B * beta**3 + lam / 4.0 - A * B * beta

    beta_star = np.sqrt(A / (3.0 * B))
    if g(beta_star) >= 0:
        return SquaredLossRectification(0.0, None, "no-move", A * A)
    # g(beta_star) < 0 and g(sqrt(A/B)) = lam/4 >= 0 bracket the large root
    lo, hi = beta_star, np.sqrt(A / B)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if abs(gm) <= tol or hi - lo <= tol * max(1.0, hi):
            break
        if gm < 0:
            lo = mid
        else:
            hi = mid
    beta_plus = 0.5 * (lo + hi)
    d_plus = min(beta_plus**2, A / B)
    k0 = A * A
    k_plus = float(squared_loss_objective(d_plus, A, B, lam))
    if k_plus < k0:
        return SquaredLossRectification(d_plus, beta_plus, "long-haul", k_plus)
    # the far minimum exists but staying put is cheaper
    return SquaredLossRectification(0.0, beta_plus, "no-move", k0)
