"""Implied volatility surface fitting with kernel smoothers.

Quotes are mapped to features ``(log tau, u(delta), call)`` and compared
with an anisotropic Gaussian kernel. Three fits are provided: a vega
weighted Nadaraya-Watson smoother (``fit_ks``), the same smoother after a
Tukey-fence filter on implied vols (``fit_2sks``), and a rectified kernel
LAD fit (``fit_robust``).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm as normal
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import CostSpec
from .estimators import AbsoluteLoss, FitConfig, FitResult, fit_generic
from .rng import ALGORITHM, make_rng

DEFAULT_BANDWIDTHS = (0.35, 0.10, 0.50)
MAPE_OFFSET = 0.01
FORMAT_VERSION = 1
QUANTILE_RULE = "linear interpolation (type 7)"


@dataclass(frozen=True)
class OptionQuote:
    tau_days: float
    delta_bs: float
    is_call: bool
    iv: float
    vega: float = 1.0

    def __post_init__(self):
        if not self.tau_days > 0:
            raise ValueError(f"tau_days must be positive, got {self.tau_days}")
        if not -1 <= self.delta_bs <= 1:
            raise ValueError(f"delta must lie in [-1, 1], got {self.delta_bs}")
        if not self.iv > 0:
            raise ValueError(f"iv must be positive, got {self.iv}")
        if not self.vega >= 0:
            raise ValueError(f"vega must be non-negative, got {self.vega}")


@dataclass
class OptionChain:
    """Column-oriented view of a list of quotes."""

    tau_days: np.ndarray
    delta: np.ndarray
    is_call: np.ndarray
    iv: np.ndarray
    vega: np.ndarray

    def __len__(self):
        return self.iv.shape[0]

    def subset(self, idx) -> "OptionChain":
        return OptionChain(self.tau_days[idx], self.delta[idx], self.is_call[idx],
                           self.iv[idx], self.vega[idx])

    def quotes(self) -> list:
        return [OptionQuote(float(t), float(d), bool(c), float(v), float(w))
                for t, d, c, v, w in zip(self.tau_days, self.delta, self.is_call,
                                         self.iv, self.vega)]

    @classmethod
    def from_quotes(cls, quotes: Sequence[OptionQuote]) -> "OptionChain":
        if len(quotes) == 0:
            return cls(*(np.empty(0) for _ in range(5)))
        cols = np.array([(q.tau_days, q.delta_bs, q.is_call, q.iv, q.vega)
                         for q in quotes], dtype=float)
        return cls(cols[:, 0], cols[:, 1], cols[:, 2].astype(bool), cols[:, 3],
                   cols[:, 4])


def as_chain(chain) -> OptionChain:
    if isinstance(chain, OptionChain):
        return chain
    return OptionChain.from_quotes(list(chain))


def u(x):
    """Fold put deltas onto calls: ``x`` for ``x >= 0``, ``1 + x`` otherwise."""
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, x, 1.0 + x)


def featurize(q) -> np.ndarray:
    """``(log tau, u(delta), call)`` for one quote, or an ``(n, 3)`` array for a chain."""
    if isinstance(q, OptionQuote):
        return featurize(OptionChain.from_quotes([q]))[0]
    c = as_chain(q)
    if np.any(c.tau_days <= 0):
        raise ValueError("tau_days must be positive")
    return np.column_stack([np.log(c.tau_days), u(c.delta), c.is_call.astype(float)])


def _check_bandwidths(h) -> np.ndarray:
    h = np.asarray(h, dtype=float).ravel()
    if h.shape != (3,) or np.any(~(h > 0)):
        raise ValueError(f"bandwidths must be three positive numbers, got {h}")
    return h


def kernel(a, b, h) -> float:
    """``exp(-sum(((a - b) / (2 h))**2))``."""
    h = _check_bandwidths(h)
    z = (np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) / (2 * h)
    return float(np.exp(-np.sum(z**2)))


def kernel_matrix(A, B, h) -> np.ndarray:
    h = _check_bandwidths(h)
    A = np.atleast_2d(A) / (2 * h)
    B = np.atleast_2d(B) / (2 * h)
    sq = (A**2).sum(1)[:, None] + (B**2).sum(1)[None, :] - 2 * A @ B.T
    return np.exp(-np.maximum(sq, 0.0))


@dataclass
class KernelModel:
    """Fitted kernel surface.

    ``basis="normalized"`` predicts ``sum_j theta_j K(x, x_j) v_j / sum_l
    K(x, x_l) v_l``; with ``theta`` equal to the training vols this is the
    Nadaraya-Watson smoother. ``basis="raw"`` predicts ``sum_j theta_j K(x, x_j)``.
    """

    bandwidths: np.ndarray
    train_features: np.ndarray
    theta: np.ndarray
    vegas: np.ndarray
    basis: str = "normalized"
    meta: dict = field(default_factory=dict)
    fit_result: Optional[FitResult] = None

    def design(self, features) -> np.ndarray:
        K = kernel_matrix(features, self.train_features, self.bandwidths)
        if self.basis == "raw":
            return K
        Kv = K * self.vegas
        denom = Kv.sum(1, keepdims=True)
        # far from every training point fall back to the nearest one
        far = denom[:, 0] <= 1e-300
        if np.any(far):
            scaled = self.train_features / (2 * self.bandwidths)
            q = np.atleast_2d(features)[far] / (2 * self.bandwidths)
            nearest = np.argmin(((q[:, None, :] - scaled[None]) ** 2).sum(-1), axis=1)
            Kv[far] = 0.0
            Kv[np.flatnonzero(far), nearest] = 1.0
            denom[far] = 1.0
        return Kv / denom

    def predict(self, features) -> np.ndarray:
        return self.design(np.atleast_2d(features)) @ self.theta

    def predict_chain(self, chain) -> np.ndarray:
        return self.predict(featurize(as_chain(chain)))


def _vega_weights(vega, meta):
    v = np.asarray(vega, dtype=float)
    if v.sum() <= 0:
        meta["zero_vega_fallback"] = True
        return np.full(v.shape[0], 1.0 / v.shape[0])
    return v / v.sum()


def fit_ks(chain, h=DEFAULT_BANDWIDTHS) -> KernelModel:
    """Vega-weighted Nadaraya-Watson smoother of implied vols."""
    c = as_chain(chain)
    if len(c) == 0:
        raise ValueError("empty option chain")
    meta = {"model": "ks"}
    w = _vega_weights(c.vega, meta)
    if meta.get("zero_vega_fallback"):
        warnings.warn("all vegas are zero, using unweighted average", RuntimeWarning,
                      stacklevel=2)
    return KernelModel(_check_bandwidths(h), featurize(c), c.iv.copy(), w, "normalized",
                       meta)


def fit_ks_least_squares(chain, h=DEFAULT_BANDWIDTHS, ridge: float = 1e-6) -> KernelModel:
    """Variant benchmark: vega-weighted kernel least squares in the raw basis."""
    c = as_chain(chain)
    F = featurize(c)
    K = kernel_matrix(F, F, h)
    meta = {"model": "ks_ls"}
    w = _vega_weights(c.vega, meta)
    Kw = K * w[:, None]
    rho = ridge * np.trace(K) / K.shape[0]
    theta = np.linalg.solve(K.T @ Kw + rho * np.eye(K.shape[0]), Kw.T @ c.iv)
    return KernelModel(_check_bandwidths(h), F, theta, w, "raw", meta)


def tukey_fence(iv, k: float = 1.5):
    q25, q75 = np.percentile(iv, [25, 75])
    iqr = q75 - q25
    return q25 - k * iqr, q75 + k * iqr


def fit_2sks(chain, h=DEFAULT_BANDWIDTHS) -> KernelModel:
    """Drop quotes outside the Tukey fence on IV, then smooth the rest."""
    c = as_chain(chain)
    if len(c) < 4:
        model = fit_ks(c, h)
        model.meta.update(model="2sks", passthrough=True, removed=[])
        return model
    lo, hi = tukey_fence(c.iv)
    keep = (c.iv >= lo) & (c.iv <= hi)
    if not keep.any():
        raise ValueError("Tukey fence removed every quote")
    model = fit_ks(c.subset(keep), h)
    model.meta.update(model="2sks", passthrough=False, fence=[float(lo), float(hi)],
                      removed=np.flatnonzero(~keep).tolist(), quantile_rule=QUANTILE_RULE)
    return model


def _ridge_init(K, target, ridge=1e-6):
    n = K.shape[0]
    rho = ridge * np.trace(K) / n
    return np.linalg.solve(K.T @ K + rho * np.eye(n), K.T @ target)


def adaptive_budget(r: float):
    """Per-iteration rule: half the current weighted loss over ``||theta||**r``."""

    def rule(theta, losses, weights):
        scale = np.linalg.norm(theta) ** r
        return float(weights @ losses) / (2 * scale) if scale > 0 else 0.0

    return rule


def fit_robust(chain, h=DEFAULT_BANDWIDTHS, spec: Optional[CostSpec] = None,
               delta: float = 0.01, cfg: Optional[FitConfig] = None,
               basis: str = "normalized", adaptive: bool = False) -> KernelModel:
    """Rectified vega-weighted kernel LAD.

    Minimizes the rectified version of ``sum_i v_i |y_i - theta^T phi_i|``
    where ``phi_i`` is the kernel design row of quote ``i``. Starts from the
    KS benchmark: exactly (``theta = y``) in the normalized basis, by ridge
    projection in the raw basis.

    Parameters
    ----------
    spec : CostSpec, default r=0.5
    delta : float
        Budget, scaled every iteration by ``||(theta, -1)||**r``.
    cfg : FitConfig, optional
        Defaults to step 0.1, relative tolerance 1e-5, 2000 iterations.
    basis : {"normalized", "raw"}
    adaptive : bool
        Replace the fixed budget by ``loss / (2 ||theta||**r)`` each iteration.
    """
    c = as_chain(chain)
    if len(c) == 0:
        raise ValueError("empty option chain")
    spec = CostSpec(0.5) if spec is None else spec
    if cfg is None:
        cfg = FitConfig(step_size=1e-1, rel_tol=1e-5, max_iters=2000, tol_mode="relative")
    if basis not in ("normalized", "raw"):
        raise ValueError(f"unknown basis {basis!r}")
    base = fit_ks(c, h)
    base.basis = basis
    F = base.train_features
    if basis == "normalized":
        Phi = base.design(F)
        theta0 = c.iv.copy()
    else:
        Phi = kernel_matrix(F, F, base.bandwidths)
        theta0 = _ridge_init(Phi, fit_ks(c, h).predict(F))
    loss = AbsoluteLoss(Phi, c.iv)
    budget = adaptive_budget(spec.r) if adaptive else delta
    res = fit_generic(loss, spec, budget, replace(cfg, init=theta0, batch_size=None),
                      weights=base.vegas, dim=len(c))
    meta = {"model": "robust", "delta": None if adaptive else float(delta),
            "adaptive": adaptive, "r": spec.r, "basis": basis,
            "n_iter": res.n_iter, "pct_rectified": res.pct_rectified}
    return KernelModel(base.bandwidths, F, res.theta_hat, base.vegas, basis, meta, res)


def mape(model: KernelModel, test, c: float = MAPE_OFFSET) -> float:
    """Mean of ``|S(x) - y| / (|y| + c)`` over the test quotes."""
    t = as_chain(test)
    if len(t) == 0:
        raise ValueError("empty test set")
    pred = model.predict_chain(t)
    return float(np.mean(np.abs(pred - t.iv) / (np.abs(t.iv) + c)))


@dataclass(frozen=True)
class SurfaceGrid:
    taus: tuple = (10, 30, 60, 91, 122, 152, 182, 273, 365, 547, 730)
    deltas: tuple = tuple(round(-1.0 + 0.05 * m, 10) for m in range(41) if m != 20)

    def features(self) -> np.ndarray:
        """``(len(taus) * len(deltas), 3)`` features, tau-major."""
        T, D = np.meshgrid(np.asarray(self.taus, float), np.asarray(self.deltas, float),
                           indexing="ij")
        T, D = T.ravel(), D.ravel()
        return np.column_stack([np.log(T), u(D), (D > 0).astype(float)])

    @property
    def shape(self):
        return len(self.taus), len(self.deltas)


def surface_values(model: KernelModel, grid: SurfaceGrid = SurfaceGrid()) -> np.ndarray:
    return model.predict(grid.features()).reshape(grid.shape)


def surface_gradient(model, grid: SurfaceGrid = SurfaceGrid()) -> float:
    """Averaged squared forward differences of the surface over the grid.

    ``model`` may be a fitted model or an array of grid values.
    """
    S = np.asarray(model) if isinstance(model, np.ndarray) else surface_values(model, grid)
    dt = S[1:, :-1] - S[:-1, :-1]
    dd = S[:-1, 1:] - S[:-1, :-1]
    return float(np.sum(dt**2 + dd**2) / 2)


# -- synthetic chains --------------------------------------------------------


def true_iv(tau_days, delta):
    """Smooth smile and term structure used by the generator."""
    m = u(delta) - 0.5
    tau = np.asarray(tau_days, dtype=float) / 365.0
    level = 0.18 + 0.06 * np.exp(-tau / 0.4)
    return level - 0.08 * m + (0.25 * np.exp(-tau) + 0.1) * m**2


def bs_vega_shape(tau_days, delta):
    """Black-Scholes vega up to the spot factor, as a function of delta."""
    d1 = normal.ppf(np.clip(u(delta), 1e-3, 1 - 1e-3))
    return np.sqrt(np.asarray(tau_days, dtype=float) / 365.0) * normal.pdf(d1)


@dataclass
class SyntheticChain:
    chain: OptionChain
    truth: np.ndarray
    outliers: np.ndarray
    seed: int


def generate_chain(seed, n_quotes: int = 80, outlier_frac: float = 0.1,
                   outlier_scale: float = 5.0, noise: float = 0.01,
                   n_expiries: int = 8) -> SyntheticChain:
    """Sample a chain on a few expiries in [7, 730] days with contaminated vols."""
    if not 0 <= outlier_frac < 1:
        raise ValueError("outlier_frac must lie in [0, 1)")
    rng = make_rng(seed)
    expiries = np.unique(np.round(np.exp(rng.uniform(np.log(7), np.log(730),
                                                     n_expiries))))
    tau = rng.choice(expiries, size=n_quotes)
    mag = rng.uniform(0.02, 0.98, size=n_quotes)
    call = rng.random(n_quotes) < 0.5
    delta = np.where(call, mag, -mag)
    truth = true_iv(tau, delta)
    iv = truth * (1 + noise * rng.standard_normal(n_quotes))
    n_out = int(round(outlier_frac * n_quotes))
    outliers = np.sort(rng.choice(n_quotes, size=n_out, replace=False))
    iv[outliers] = truth[outliers] * outlier_scale
    vega = bs_vega_shape(tau, delta)
    return SyntheticChain(OptionChain(tau, delta, call, iv, vega), truth, outliers,
                          seed if isinstance(seed, int) else -1)


# -- file formats --------------------------------------------------------------

CSV_HEADER = ["tau_days", "delta", "is_call", "iv", "vega"]


class ChainFormatError(ValueError):
    pass


def read_chain_csv(path) -> OptionChain:
    """Strictly parse ``tau_days,delta,is_call,iv,vega``; errors name the row."""
    quotes = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise ChainFormatError(f"row 1: expected header {','.join(CSV_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ChainFormatError(f"row {row_no}: expected 5 fields, got {len(row)}")
            try:
                tau, dlt, call, iv, vega = (float(v) for v in row)
            except ValueError as exc:
                raise ChainFormatError(f"row {row_no}: {exc}") from None
            if call not in (0.0, 1.0):
                raise ChainFormatError(f"row {row_no}: is_call must be 0 or 1")
            try:
                quotes.append(OptionQuote(tau, dlt, bool(call), iv, vega))
            except ValueError as exc:
                raise ChainFormatError(f"row {row_no}: {exc}") from None
    if not quotes:
        raise ChainFormatError("no quotes in file")
    return OptionChain.from_quotes(quotes)


def write_chain_csv(chain, path):
    c = as_chain(chain)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for t, d, k, v, g in zip(c.tau_days, c.delta, c.is_call, c.iv, c.vega):
            w.writerow([repr(float(t)), repr(float(d)), int(k), repr(float(v)),
                        repr(float(g))])


def surface_record(model: KernelModel, grid: SurfaceGrid = SurfaceGrid(),
                   metrics: Optional[dict] = None, seed=None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model": model.meta.get("model"),
        "taus": list(grid.taus),
        "deltas": list(grid.deltas),
        "values": surface_values(model, grid).ravel().tolist(),
        "h": model.bandwidths.tolist(),
        "delta": model.meta.get("delta"),
        "r": model.meta.get("r"),
        "seed": seed,
        "rng": ALGORITHM,
        "metrics": metrics or {},
        "meta": {k: v for k, v in model.meta.items() if k not in ("delta", "r")},
    }


def write_surface_json(model, path, grid: SurfaceGrid = SurfaceGrid(), metrics=None,
                       seed=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(surface_record(model, grid, metrics, seed), fh, indent=2)


# -- estimator wrapper -------------------------------------------------------


class KernelSurfaceRegressor(RegressorMixin, BaseEstimator):
    """Implied volatility surface as a scikit-learn regressor.

    ``X`` has columns ``tau_days, delta, is_call``; ``y`` is implied vol and
    ``sample_weight`` the vegas.

    Parameters
    ----------
    method : {"robust", "ks", "2sks"}
    bandwidths : tuple of 3 floats
    delta : float
        Budget for ``method="robust"``.
    r : float
    """

    def __init__(self, method="robust", bandwidths=DEFAULT_BANDWIDTHS, delta=0.01, r=0.5,
                 step_size=0.1, max_iter=2000, tol=1e-5):
        self.method = method
        self.bandwidths = bandwidths
        self.delta = delta
        self.r = r
        self.step_size = step_size
        self.max_iter = max_iter
        self.tol = tol

    def _chain(self, X, y=None, w=None):
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        iv = np.ones(n) if y is None else np.asarray(y, dtype=float)
        vega = np.ones(n) if w is None else np.asarray(w, dtype=float)
        return OptionChain(X[:, 0], X[:, 1], X[:, 2] > 0.5, iv, vega)

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[1] != 3:
            raise ValueError("X must have columns tau_days, delta, is_call")
        chain = self._chain(X, y, sample_weight)
        if self.method == "ks":
            self.model_ = fit_ks(chain, self.bandwidths)
        elif self.method == "2sks":
            self.model_ = fit_2sks(chain, self.bandwidths)
        elif self.method == "robust":
            cfg = FitConfig(step_size=self.step_size, max_iters=self.max_iter,
                            rel_tol=self.tol, tol_mode="relative")
            self.model_ = fit_robust(chain, self.bandwidths,
                                     CostSpec.for_exponent(self.r), self.delta, cfg)
        else:
            raise ValueError(f"unknown method {self.method!r}")
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        return self.model_.predict_chain(self._chain(X))
