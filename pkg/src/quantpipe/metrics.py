"""Factor evaluation: forward returns, IC, long-short backtest statistics,
turnover, redundancy and forward-validation splits."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .dsl.matrix import FactorMatrix
from .errors import AlignmentError, ConfigError, DegenerateVarianceError
from .panel import PanelFrame

PERIODS_PER_YEAR = 252


@dataclass(frozen=True, eq=False)
class ForwardReturns(FactorMatrix):
    """Cell (t, i) is price(t + horizon) / price(t) - 1. For evaluation only."""

    horizon: int = 1


def forward_returns(panel: PanelFrame, price_field: str = "close", horizon: int = 1) -> ForwardReturns:
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    p, m = panel.field(price_field)
    T, N = p.shape
    v = np.full((T, N), np.nan)
    ok = np.zeros((T, N), dtype=bool)
    if T > horizon:
        ok[:-horizon] = m[:-horizon] & m[horizon:] & (p[:-horizon] != 0)
        with np.errstate(all="ignore"):
            v[:-horizon] = p[horizon:] / p[:-horizon] - 1.0
    ok &= np.isfinite(v)
    return ForwardReturns(panel.dates, panel.instruments, v, ok, horizon)


def make_forward_returns(like: FactorMatrix, values: np.ndarray, horizon: int = 1,
                         mask: np.ndarray | None = None) -> ForwardReturns:
    """Wrap a precomputed return surface (synthetic experiments); the last ``horizon`` dates are masked."""
    values = np.asarray(values, dtype=np.float64)
    m = np.isfinite(values) if mask is None else np.asarray(mask, dtype=bool) & np.isfinite(values)
    m = m.copy()
    m[max(len(like.dates) - horizon, 0):] = False
    return ForwardReturns(like.dates, like.instruments, values, m, horizon)


def _check_aligned(a: FactorMatrix, b: FactorMatrix) -> None:
    if a.values.shape != b.values.shape or tuple(a.instruments) != tuple(b.instruments) \
            or not np.array_equal(a.dates, b.dates):
        raise AlignmentError("surfaces are not aligned on dates and instruments")


# -- information coefficient -------------------------------------------------

def _rowwise_pearson(x: np.ndarray, y: np.ndarray, m: np.ndarray, min_obs: int = 3) -> np.ndarray:
    n = m.sum(axis=1)
    with np.errstate(all="ignore"):
        xm = np.where(m, x, 0.0).sum(axis=1) / n
        ym = np.where(m, y, 0.0).sum(axis=1) / n
        dx = np.where(m, x - xm[:, None], 0.0)
        dy = np.where(m, y - ym[:, None], 0.0)
        sxx = (dx * dx).sum(axis=1)
        syy = (dy * dy).sum(axis=1)
        sxy = (dx * dy).sum(axis=1)
        scale_x = np.where(m, x * x, 0.0).sum(axis=1)
        scale_y = np.where(m, y * y, 0.0).sum(axis=1)
        ok = (n >= min_obs) & (sxx > 1e-24 * scale_x) & (syy > 1e-24 * scale_y) & (sxx > 0) & (syy > 0)
        r = sxy / np.sqrt(sxx * syy)
    return np.where(ok, np.clip(r, -1.0, 1.0), np.nan)


def information_coefficient(factor: FactorMatrix, fwd: FactorMatrix, method: str = "spearman") -> np.ndarray:
    """Per-date cross-sectional correlation; NaN where fewer than 3 joint observations or no spread."""
    _check_aligned(factor, fwd)
    joint = factor.mask & fwd.mask
    if method == "spearman":
        # raw average ranks (1..n); centring them is exact, so IC(-f) == -IC(f) bit for bit
        x = rankdata(np.where(joint, factor.values, np.inf), axis=1, method="average")
        y = rankdata(np.where(joint, fwd.values, np.inf), axis=1, method="average")
    elif method == "pearson":
        x, y = factor.values, fwd.values
    else:
        raise ConfigError(f"unknown IC method {method!r}")
    return _rowwise_pearson(x, y, joint)


def fundamental_law_ir(ic: float, breadth: float) -> float:
    """IR = IC * sqrt(breadth)."""
    if breadth < 0:
        raise ConfigError("breadth must be >= 0")
    return ic * math.sqrt(breadth)


def breadth(rebalances_per_year: float, n_instruments: int | None = None, mode: str = "rebalances") -> float:
    """Independent decisions per year: rebalance count, or rebalances x instruments."""
    if mode == "rebalances":
        return float(rebalances_per_year)
    if mode == "decisions":
        if n_instruments is None:
            raise ConfigError("mode 'decisions' needs n_instruments")
        return float(rebalances_per_year) * n_instruments
    raise ConfigError(f"unknown breadth mode {mode!r}")


# -- portfolio-style metrics ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class WeightSeries:
    dates: np.ndarray
    instruments: tuple[str, ...]
    weights: np.ndarray  # (len(dates), len(instruments))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("date,instrument,weight\n")
        for t, d in enumerate(self.dates):
            for i, inst in enumerate(self.instruments):
                w = float(self.weights[t, i])
                if w != 0.0:
                    buf.write(f"{d},{inst},{w!r}\n")
        return buf.getvalue()


def turnover(weights) -> np.ndarray:
    """0.5 * sum |w_t - w_{t-1}| per date; the first date is compared against an empty book."""
    w = weights.weights if isinstance(weights, WeightSeries) else np.asarray(weights, dtype=np.float64)
    if w.shape[0] == 0:
        return np.zeros(0)
    prev = np.vstack([np.zeros((1, w.shape[1])), w[:-1]])
    # correctly rounded sums, so the value does not depend on summation order
    return np.array([0.5 * math.fsum(row) for row in np.abs(w - prev)])


def sharpe(returns, periods_per_year: int = PERIODS_PER_YEAR) -> float:
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        raise DegenerateVarianceError("sharpe needs at least 2 observations")
    if np.all(r == r[0]):
        raise DegenerateVarianceError("constant return series")
    sd = r.std(ddof=1)
    if not sd > 0:
        raise DegenerateVarianceError("zero return variance")
    return float(r.mean() / sd * math.sqrt(periods_per_year))


def max_drawdown(returns) -> float:
    """Largest 1 - E(u)/E(t), t <= u, over the compounded equity curve starting at 1."""
    r = np.asarray(returns, dtype=np.float64)
    if r.size == 0:
        return 0.0
    equity = np.concatenate([[1.0], np.cumprod(1.0 + r)])
    peak = np.maximum.accumulate(equity)
    return float(np.max(1.0 - equity / peak))


def longshort_weights(scores: np.ndarray, evaluable: np.ndarray, q: float,
                      id_rank: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Equal-weight long the top ceil(q*n) and short the bottom ceil(q*n) per row.

    Ties are broken by instrument identifier order (``id_rank``; column order by
    default). Returns ``(weights, traded)``; untraded rows are all-zero.
    """
    if not 0.0 < q <= 0.5:
        raise ConfigError("q must lie in (0, 0.5]")
    T, N = scores.shape
    weights = np.zeros((T, N))
    if T == 0 or N == 0:
        return weights, np.zeros(T, dtype=bool)
    n = evaluable.sum(axis=1)
    key = np.where(evaluable, scores, np.inf)
    hi = np.where(evaluable, scores, -np.inf).max(axis=1)
    lo = key.min(axis=1)
    traded = (n >= 2) & (hi > lo)
    k = np.minimum(np.maximum(np.ceil(q * n - 1e-9), 1), n // 2).astype(np.int64)
    if id_rank is None:
        id_rank = np.arange(N)
    order = np.lexsort((np.broadcast_to(id_rank, (T, N)), key), axis=-1)
    pos = np.arange(N)[None, :]
    kk = np.maximum(k, 1)[:, None]
    with np.errstate(divide="ignore"):
        long_sel = (pos >= (n[:, None] - k[:, None])) & (pos < n[:, None])
        short_sel = pos < k[:, None]
        vals = np.where(long_sel, 1.0 / kk, np.where(short_sel, -1.0 / kk, 0.0))
    vals[~traded] = 0.0
    np.put_along_axis(weights, order, vals, axis=1)
    return weights, traded


@dataclass(frozen=True, eq=False)
class LongShortResult:
    returns: np.ndarray  # per date; 0 on skipped dates (flat book)
    weights: WeightSeries
    turnover: np.ndarray
    traded: np.ndarray  # bool per date
    skipped: tuple[int, ...]


def quantile_longshort_returns(factor: FactorMatrix, fwd: FactorMatrix, q: float = 0.1,
                               cost_rate: float = 0.0) -> LongShortResult:
    _check_aligned(factor, fwd)
    evaluable = factor.mask & fwd.mask
    id_rank = np.argsort(np.argsort(np.array(factor.instruments, dtype=object), kind="stable"), kind="stable")
    w, traded = longshort_weights(factor.values, evaluable, q, id_rank)
    to = turnover(w)
    gross = (w * np.where(fwd.mask, fwd.values, 0.0)).sum(axis=1)
    ret = gross - cost_rate * to
    skipped = tuple(int(t) for t in np.nonzero(~traded)[0])
    return LongShortResult(ret, WeightSeries(factor.dates, factor.instruments, w), to, traded, skipped)


def redundancy(candidate: FactorMatrix, base: Iterable[FactorMatrix]) -> float:
    """Max |Pearson correlation| against the base, pooled over all jointly observed cells."""
    best = 0.0
    for b in base:
        _check_aligned(candidate, b)
        c = pooled_correlation(candidate, b)
        if np.isfinite(c):
            best = max(best, abs(c))
    return best


def pooled_correlation(a: FactorMatrix, b: FactorMatrix) -> float:
    m = a.mask & b.mask
    x = a.values[m]
    y = b.values[m]
    if x.size < 2:
        return float("nan")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx <= 1e-24 * float(x @ x) or syy <= 1e-24 * float(y @ y) or sxx == 0 or syy == 0:
        return float("nan")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


# -- forward validation ----------------------------------------------------------

@dataclass(frozen=True)
class SplitWindow:
    train: range
    valid: range
    test: range


@dataclass(frozen=True)
class SplitPlan:
    windows: tuple[SplitWindow, ...]
    step: int


def forward_splits(n_dates: int, train: int, valid: int, test: int, step: int) -> SplitPlan:
    """Rolling train/validation/test windows starting at 0, step, 2*step, ..."""
    if min(train, valid, test, step) < 1:
        raise ConfigError("train, valid, test and step must all be >= 1")
    total = train + valid + test
    if total > n_dates:
        raise ConfigError(f"train+valid+test = {total} exceeds {n_dates} dates")
    windows = []
    s = 0
    while s + total <= n_dates:
        windows.append(SplitWindow(range(s, s + train), range(s + train, s + train + valid),
                                   range(s + train + valid, s + total)))
        s += step
    return SplitPlan(tuple(windows), step)


# -- factor report ------------------------------------------------------------------

REPORT_FIELDS = ("ic_mean", "ic_std", "icir", "annualized_return", "sharpe", "max_drawdown",
                 "avg_turnover", "max_abs_corr_to_base", "n_dates_evaluated")
REPORT_HEADER = ("factor_id",) + REPORT_FIELDS


@dataclass(frozen=True, eq=False)
class FactorReport:
    ic_series: np.ndarray
    ic_mean: float
    ic_std: float
    icir: float
    annualized_return: float
    sharpe: float
    max_drawdown: float
    avg_turnover: float
    max_abs_corr_to_base: float
    n_dates_evaluated: int

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}

    def csv_row(self, factor_id: str) -> str:
        return ",".join([factor_id] + [_fmt(getattr(self, k)) for k in REPORT_FIELDS])

    def ic_csv(self, dates) -> str:
        lines = ["date,ic"]
        for d, v in zip(dates, self.ic_series):
            lines.append(f"{d},{_fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if not math.isfinite(v) else repr(v)


def report_csv(rows: Sequence[tuple[str, FactorReport]]) -> str:
    lines = [",".join(REPORT_HEADER)] + [r.csv_row(fid) for fid, r in rows]
    return "\n".join(lines) + "\n"


def summarize_ic(ic: np.ndarray) -> tuple[float, float, float, int]:
    vals = ic[np.isfinite(ic)]
    n = int(vals.size)
    mean = float(vals.mean()) if n else float("nan")
    std = float(vals.std(ddof=1)) if n >= 2 else float("nan")
    icir = mean / std if n >= 2 and std > 0 else float("nan")
    return mean, std, icir, n


def portfolio_stats(returns: np.ndarray, turnover_: np.ndarray,
                    periods_per_year: int = PERIODS_PER_YEAR) -> tuple[float, float, float, float]:
    """(annualized_return, sharpe, max_drawdown, avg_turnover); NaN where undefined."""
    if returns.size == 0:
        return float("nan"), float("nan"), 0.0, float("nan")
    ann = float(returns.mean() * periods_per_year)
    try:
        sr = sharpe(returns, periods_per_year)
    except DegenerateVarianceError:
        sr = float("nan")
    return ann, sr, max_drawdown(returns), float(turnover_.mean())


def evaluate_factor(factor: FactorMatrix, fwd: FactorMatrix, *, q: float = 0.1, cost_rate: float = 0.0,
                    periods_per_year: int = PERIODS_PER_YEAR, method: str = "spearman",
                    dates: slice | None = None, base: Sequence[FactorMatrix] = ()) -> FactorReport:
    """Assemble a ``FactorReport``, optionally restricted to a date slice."""
    _check_aligned(factor, fwd)
    if dates is not None:
        factor = FactorMatrix(factor.dates[dates], factor.instruments, factor.values[dates], factor.mask[dates])
        fwd = FactorMatrix(fwd.dates[dates], fwd.instruments, fwd.values[dates], fwd.mask[dates])
        base = [FactorMatrix(b.dates[dates], b.instruments, b.values[dates], b.mask[dates]) for b in base]
    ic = information_coefficient(factor, fwd, method)
    ic_mean, ic_std, icir, n = summarize_ic(ic)
    ls = quantile_longshort_returns(factor, fwd, q, cost_rate)
    ann, sr, mdd, avg_to = portfolio_stats(ls.returns[ls.traded], ls.turnover[ls.traded], periods_per_year)
    corr = redundancy(factor, base) if base else 0.0
    return FactorReport(ic, ic_mean, ic_std, icir, ann, sr, mdd, avg_to, corr, n)
