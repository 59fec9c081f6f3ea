"""Transport cost, residuals and the scalar concave minimisation identity."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class ConvexCostWarning(UserWarning):
    """Raised when a cost exponent r >= 1 is used outside comparison mode."""


@dataclass(frozen=True)
class CostSpec:
    """Transport cost ``c(z, z') = ||z - z'||_2 ** r``.

    Parameters
    ----------
    r : float
        Exponent. ``0 < r < 1`` is the concave regime the estimator is built
        for. ``r >= 1`` is only meant for comparison runs and requires
        ``convex_comparison=True``.
    norm : str
        Ground norm. Only ``"euclidean"`` is supported.
    convex_comparison : bool
        Opt-in flag that allows ``r >= 1``.
    """

    r: float = 0.5
    norm: str = "euclidean"
    convex_comparison: bool = False

    def __post_init__(self):
        if not np.isfinite(self.r) or self.r <= 0:
            raise ValueError(f"cost exponent must be positive, got r={self.r}")
        if self.norm != "euclidean":
            raise ValueError(f"unsupported norm {self.norm!r}")
        if self.r >= 1 and not self.convex_comparison:
            raise ValueError(
                f"r={self.r} is not concave; pass convex_comparison=True for "
                "comparison studies"
            )

    @property
    def concave(self) -> bool:
        return self.r < 1

    @classmethod
    def for_exponent(cls, r: float) -> "CostSpec":
        """Build a spec, switching on comparison mode when ``r >= 1``."""
        if r >= 1:
            warnings.warn(
                f"r={r} uses the convex comparison regime", ConvexCostWarning,
                stacklevel=2,
            )
        return cls(r=float(r), convex_comparison=r >= 1)


def check_budget(delta) -> float:
    delta = float(delta)
    if not np.isfinite(delta) or delta < 0:
        raise ValueError(f"budget delta must be finite and >= 0, got {delta}")
    return delta


def norm(v, axis=-1):
    # single place to swap the ground norm; l2 is self-dual
    return np.linalg.norm(v, axis=axis)


def dual_norm(v, axis=-1):
    return np.linalg.norm(v, axis=axis)


def transport_cost(a, b, spec: CostSpec) -> float:
    """Return ``||a - b|| ** r``."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(norm(a - b) ** spec.r)


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def check_weights(weights, n: int) -> np.ndarray:
    """Validate sample weights; ``None`` means uniform. Returns normalised copy."""
    if weights is None:
        return uniform_weights(n)
    w = np.asarray(weights, dtype=float).ravel()
    if w.shape[0] != n:
        raise ValueError(f"expected {n} weights, got {w.shape[0]}")
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must have positive total mass")
    return w / total


def as_points(data) -> np.ndarray:
    """Coerce mean-task data to an ``(n, d)`` float array."""
    z = np.asarray(data, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("data must be a non-empty 1-D or 2-D array")
    return z


def absolute_residuals(data, theta, task: str = "mean") -> np.ndarray:
    """Per-sample loss magnitudes, order preserved.

    For ``task="mean"`` ``data`` is an ``(n, d)`` array of points and the
    result is ``||theta - z_i||``. For ``task="regression"`` ``data`` is a
    pair ``(X, y)`` and the result is ``|y_i - theta^T x_i|``.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if task == "mean":
        z = as_points(data)
        if z.shape[1] != theta.shape[0]:
            raise ValueError(
                f"theta has dimension {theta.shape[0]}, data has {z.shape[1]}"
            )
        return norm(z - theta)
    if task == "regression":
        X, y = data
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        if X.shape[1] != theta.shape[0]:
            raise ValueError(
                f"theta has dimension {theta.shape[0]}, X has {X.shape[1]} columns"
            )
        return np.abs(y - X @ theta)
    raise ValueError(f"unknown task {task!r}")


def concave_endpoint_min(a: float, b: float, lam: float, r: float) -> float:
    """Closed-form ``min_{x in [0, a/b]} a - b x + lam x**r`` for ``0 < r < 1``.

    The objective is concave in ``x``, so the minimum sits at an endpoint:
    ``min(a, lam * a**r / b**r)``.
    """
    if not 0 < r < 1:
        raise ValueError(f"closed form needs 0 < r < 1, got r={r}")
    if a <= 0 or b <= 0 or lam <= 0:
        raise ValueError("a, b and lam must be positive")
    return min(a, lam * a**r / b**r)
