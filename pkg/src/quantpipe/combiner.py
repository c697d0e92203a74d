"""Linear factor combination with rolling retraining, permutation importance
and style-exposure decomposition."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dsl import FactorMatrix
from .errors import AlignmentError, ConfigError, FitError
from .metrics import WeightSeries, _fmt, information_coefficient, SplitPlan

LAMBDA_GRID = (0.0, 0.01, 0.1, 1.0, 10.0)


@dataclass(frozen=True, eq=False)
class CombinerModel:
    """Ridge model on standardized factors.

    ``coef`` and ``intercept`` live in standardized space (where the penalty
    applies); ``raw_coef``/``raw_intercept`` express the same map on raw factor values.
    """

    factor_ids: tuple[str, ...]
    coef: np.ndarray
    intercept: float
    lam: float
    fit_window: range
    means: np.ndarray
    stds: np.ndarray

    @property
    def raw_coef(self) -> np.ndarray:
        return self.coef / self.stds

    @property
    def raw_intercept(self) -> float:
        return float(self.intercept - np.sum(self.coef * self.means / self.stds))

    def to_csv(self) -> str:
        head = ["intercept"] + list(self.factor_ids) + ["lambda"]
        row = [_fmt(self.intercept)] + [_fmt(c) for c in self.coef] + [_fmt(self.lam)]
        return ",".join(head) + "\n" + ",".join(row) + "\n"


def _stack(factors: Sequence[FactorMatrix]) -> tuple[np.ndarray, np.ndarray]:
    if not factors:
        raise ConfigError("need at least one factor")
    shape = factors[0].values.shape
    for f in factors[1:]:
        if f.values.shape != shape or f.instruments != factors[0].instruments:
            raise AlignmentError("factor surfaces are not aligned")
    x = np.stack([f.values for f in factors], axis=-1)
    m = np.stack([f.mask for f in factors], axis=-1).all(axis=-1)
    return x, m


def _rows(dates, n_dates: int) -> np.ndarray:
    if dates is None:
        return np.arange(n_dates)
    if isinstance(dates, slice):
        return np.arange(n_dates)[dates]
    return np.asarray([d for d in dates if 0 <= d < n_dates], dtype=np.int64)


def fit(factors: Sequence[FactorMatrix], fwd: FactorMatrix, window=None, lam: float = 0.0,
        factor_ids: Sequence[str] | None = None) -> CombinerModel:
    """Closed-form ridge on pooled (date, instrument) rows of ``window`` (date indices)."""
    if lam < 0:
        raise ConfigError("ridge lambda must be >= 0")
    x, m = _stack(factors)
    if fwd.values.shape != m.shape:
        raise AlignmentError("forward returns are not aligned with the factors")
    rows = _rows(window, m.shape[0])
    sel = np.zeros(m.shape, dtype=bool)
    sel[rows] = True
    sel &= m & fwd.mask
    X = x[sel]
    y = fwd.values[sel]
    k = X.shape[1]
    n = X.shape[0]
    if n < k + 2:
        raise FitError(f"{n} usable rows for {k} factor(s); need at least {k + 2}")
    means = X.mean(axis=0)
    stds = X.std(axis=0, ddof=1)
    stds = np.where(stds > 0, stds, 1.0)
    Z = (X - means) / stds
    ybar = float(y.mean())
    yc = y - ybar
    A = Z.T @ Z / n + lam * np.eye(k)
    b = Z.T @ yc / n
    if lam > 0:
        coef = np.linalg.solve(A, b)
    else:
        coef = np.linalg.lstsq(Z, yc, rcond=None)[0]
    ids = tuple(factor_ids) if factor_ids is not None else tuple(f"f{j}" for j in range(k))
    if len(ids) != k:
        raise ConfigError("factor_ids length differs from the number of factors")
    win = range(int(rows.min()), int(rows.max()) + 1) if rows.size else range(0)
    return CombinerModel(ids, coef, ybar, float(lam), win, means, stds)


def predict_surface(model: CombinerModel, factors: Sequence[FactorMatrix],
                    factor_ids: Sequence[str] | None = None) -> FactorMatrix:
    if factor_ids is not None and tuple(factor_ids) != model.factor_ids:
        raise ConfigError(f"factor ids {tuple(factor_ids)} do not match the model's {model.factor_ids}")
    if len(factors) != len(model.factor_ids):
        raise ConfigError("number of factors differs from the model")
    x, m = _stack(factors)
    z = (np.where(m[..., None], x, 0.0) - model.means) / model.stds
    score = model.intercept + z @ model.coef
    return FactorMatrix(factors[0].dates, factors[0].instruments, score, m)


def predict(model: CombinerModel, factors: Sequence[FactorMatrix], t: int,
            factor_ids: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Score cross-section at date index ``t`` as ``(values, mask)``."""
    sub = [FactorMatrix(f.dates[t:t + 1], f.instruments, f.values[t:t + 1], f.mask[t:t + 1]) for f in factors]
    s = predict_surface(model, sub, factor_ids)
    return s.values[0], s.mask[0]


def mean_ic(scores: FactorMatrix, fwd: FactorMatrix, rows=None, method: str = "spearman") -> float:
    ic = information_coefficient(scores, fwd, method)
    if rows is not None:
        ic = ic[rows]
    ic = ic[np.isfinite(ic)]
    return float(ic.mean()) if ic.size else float("nan")


def rolling_fit_predict(factors: Sequence[FactorMatrix], fwd: FactorMatrix, plan: SplitPlan,
                        lambdas: Sequence[float] = LAMBDA_GRID, horizon: int | None = None,
                        factor_ids: Sequence[str] | None = None) -> FactorMatrix:
    """Per window: pick lambda by validation IC, fit on train, score the test block.

    Rows whose forward return would not be known before the next block starts
    are purged (a label at date t needs the price at t + horizon). Windows that
    run past the available dates are clipped or skipped.
    """
    h = horizon if horizon is not None else getattr(fwd, "horizon", 1)
    T, N = fwd.values.shape
    out = np.full((T, N), np.nan)
    outm = np.zeros((T, N), dtype=bool)
    filled = np.zeros(T, dtype=bool)
    for w in plan.windows:
        test = [t for t in w.test if t < T]
        if not test or w.valid.stop > T:
            continue
        if filled[test].any():
            raise ConfigError("split plan has overlapping test blocks")
        train = [t for t in w.train if t + h <= w.valid.start]
        valid = [t for t in w.valid if t + h <= w.test.start]
        best_lam, best_ic = lambdas[0], -math.inf
        if len(lambdas) > 1 and valid:
            for lam in lambdas:
                mdl = fit(factors, fwd, train, lam, factor_ids)
                ic = mean_ic(predict_surface(mdl, factors), fwd, valid)
                if math.isfinite(ic) and ic > best_ic:
                    best_lam, best_ic = lam, ic
        mdl = fit(factors, fwd, train, best_lam, factor_ids)
        s = predict_surface(mdl, factors)
        out[test] = s.values[test]
        outm[test] = s.mask[test]
        filled[test] = True
    return FactorMatrix(fwd.dates, fwd.instruments, out, outm)


# -- explanation ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ImportanceReport:
    factor_ids: tuple[str, ...]
    mean_drop: np.ndarray
    std_drop: np.ndarray
    drops: np.ndarray  # (factors, repetitions)
    baseline: float
    repetitions: int
    seed: int

    def to_csv(self) -> str:
        lines = ["factor_id,mean_drop,std_drop"]
        for fid, m, s in zip(self.factor_ids, self.mean_drop, self.std_drop):
            lines.append(f"{fid},{_fmt(m)},{_fmt(s)}")
        return "\n".join(lines) + "\n"


def shuffle_within_dates(f: FactorMatrix, rng: np.random.Generator) -> FactorMatrix:
    """Permute each date's observed values among that date's observed cells."""
    v = np.array(f.values)
    for t in range(v.shape[0]):
        idx = np.nonzero(f.mask[t])[0]
        if idx.size > 1:
            v[t, idx] = v[t, idx[rng.permutation(idx.size)]]
    return f.with_values(v, f.mask)


def permutation_importance(model: CombinerModel, factors: Sequence[FactorMatrix], fwd: FactorMatrix,
                           K: int = 5, seed: int = 0, dates=None,
                           method: str = "spearman") -> ImportanceReport:
    """Drop in mean IC of the model's predictions when one factor is shuffled cross-sectionally."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    rows = None if dates is None else _rows(dates, fwd.values.shape[0])
    base = mean_ic(predict_surface(model, factors), fwd, rows, method)
    k = len(factors)
    drops = np.zeros((k, K))
    for j in range(k):
        for rep in range(K):
            rng = np.random.default_rng([seed, j, rep])
            shuffled = list(factors)
            shuffled[j] = shuffle_within_dates(factors[j], rng)
            drops[j, rep] = base - mean_ic(predict_surface(model, shuffled), fwd, rows, method)
    std = drops.std(axis=1, ddof=1) if K > 1 else np.zeros(k)
    return ImportanceReport(model.factor_ids, drops.mean(axis=1), std, drops, base, K, seed)


@dataclass(frozen=True, eq=False)
class ExposureResult:
    dates: np.ndarray
    exposures: np.ndarray  # (dates, styles)
    r2: float  # NaN when the regression is undefined


def exposure_decomposition(weights: WeightSeries, styles: Sequence[FactorMatrix],
                           portfolio_returns: np.ndarray | None = None) -> ExposureResult:
    """Per-date style exposures sum_i w_i * style(t, i), plus the R^2 of returns on exposures."""
    T = len(weights.dates)
    J = len(styles)
    expo = np.zeros((T, J))
    for j, s in enumerate(styles):
        if tuple(s.instruments) != tuple(weights.instruments):
            raise AlignmentError("style surface instruments differ from the weights")
        pos = {d: k for k, d in enumerate(s.dates)}
        try:
            idx = np.array([pos[d] for d in weights.dates], dtype=np.int64)
        except KeyError as e:
            raise AlignmentError(f"style surface lacks date {e}") from None
        vals = np.where(s.mask[idx], s.values[idx], 0.0) if T else np.zeros((0, len(s.instruments)))
        expo[:, j] = (weights.weights * vals).sum(axis=1)
    return ExposureResult(weights.dates, expo, _r2(expo, portfolio_returns))


def _r2(x: np.ndarray, y) -> float:
    if y is None or x.shape[1] == 0:
        return float("nan")
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != x.shape[0] or x.shape[0] < x.shape[1] + 2:
        return float("nan")
    yc = y - y.mean()
    sst = float(yc @ yc)
    if sst <= 0:
        return float("nan")
    A = np.column_stack([np.ones(x.shape[0]), x])
    if np.linalg.matrix_rank(A) < A.shape[1]:
        return float("nan")
    beta = np.linalg.lstsq(A, y, rcond=None)[0]
    resid = y - A @ beta
    return float(1.0 - (resid @ resid) / sst)
