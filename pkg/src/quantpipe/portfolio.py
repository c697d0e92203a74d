"""Covariance estimation, the constrained mean-variance program, order
splitting and the rebalance-by-rebalance backtest loop.

The program solved at every rebalance date is::

    maximize    w'r
    subject to  w' S w <= c1                  (risk cap)
                |w_i - w_prev_i| <= c2        (turnover, elementwise; or sum |.| <= c2)
                0 <= w_i <= c3                (box)
                sum(w) == 1                   (optional budget)
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence, Union

import numpy as np
from scipy.optimize import linprog

from .dsl import Expr, FactorMatrix, evaluate, parse
from .errors import ConfigError, DataError, EstimationError, InfeasibleError, InvariantError
from .metrics import (
    PERIODS_PER_YEAR,
    FactorReport,
    WeightSeries,
    forward_returns,
    information_coefficient,
    longshort_weights,
    portfolio_stats,
    summarize_ic,
)
from .panel import PanelFrame

log = logging.getLogger(__name__)

CONSTRAINT_TOL = 1e-6
MAX_ITER = 10_000
STEP_TOL = 1e-9


# -- covariance ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CovEstimate:
    matrix: np.ndarray
    lookback: int
    shrinkage: float


def estimate_covariance(returns: np.ndarray, delta: float, mask: np.ndarray | None = None) -> CovEstimate:
    """Shrink the pairwise-complete sample covariance toward a trace-preserving scaled identity.

    ``returns`` is (window, instruments); missing cells are NaN or flagged by ``mask``.
    Each pair uses the rows where both are observed, with per-pair means.
    """
    x = np.asarray(returns, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise EstimationError("covariance window needs at least 2 dates")
    if not 0.0 <= delta <= 1.0:
        raise ConfigError("shrinkage delta must lie in [0, 1]")
    m = np.isfinite(x) if mask is None else (np.asarray(mask, dtype=bool) & np.isfinite(x))
    n = x.shape[1]
    if m.all():
        s = np.cov(x, rowvar=False, ddof=1).reshape(n, n)
    else:
        s = _pairwise_cov(x, m)
    s = 0.5 * (s + s.T)
    if not m.all():
        # pairwise-complete estimates can be indefinite; clip to the PSD cone
        lam, q = np.linalg.eigh(s)
        if lam.min() < 0:
            s = (q * np.clip(lam, 0, None)) @ q.T
            s = 0.5 * (s + s.T)
    target = np.trace(s) / n if n else 0.0
    out = (1.0 - delta) * s + delta * target * np.eye(n)
    return CovEstimate(out, x.shape[0], float(delta))


def _pairwise_cov(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    xz = np.where(m, x, 0.0)
    mf = m.astype(np.float64)
    cnt = mf.T @ mf
    sx = xz.T @ mf  # sx[i, j] = sum of x_i over rows where i and j observed
    sxy = xz.T @ xz
    with np.errstate(all="ignore"):
        c = (sxy - sx * sx.T / cnt) / (cnt - 1)
    return np.where(cnt >= 2, c, 0.0)


# -- the program -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QpSpec:
    expected_returns: np.ndarray
    sigma: np.ndarray
    risk_cap: float
    turnover_cap: float
    weight_cap: float
    prev_weights: np.ndarray
    budget: bool = False
    turnover_mode: str = "elementwise"  # or "l1"

    def __post_init__(self):
        r = np.asarray(self.expected_returns, dtype=np.float64)
        s = self.sigma.matrix if isinstance(self.sigma, CovEstimate) else np.asarray(self.sigma, dtype=np.float64)
        w0 = np.asarray(self.prev_weights, dtype=np.float64)
        n = r.size
        if s.shape != (n, n) or w0.shape != (n,):
            raise ConfigError("QP dimensions disagree")
        if not self.risk_cap > 0:
            raise ConfigError("risk cap must be > 0")
        if not self.turnover_cap >= 0:
            raise ConfigError("turnover cap must be >= 0")
        if not 0 < self.weight_cap <= 1:
            raise ConfigError("weight cap must lie in (0, 1]")
        if self.turnover_mode not in ("elementwise", "l1"):
            raise ConfigError(f"unknown turnover mode {self.turnover_mode!r}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(s)) and np.all(np.isfinite(w0))):
            raise DataError("QP inputs must be finite")
        object.__setattr__(self, "expected_returns", r)
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "prev_weights", w0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.expected_returns.size
        lo = np.zeros(n)
        hi = np.full(n, float(self.weight_cap))
        if self.turnover_mode == "elementwise" and math.isfinite(self.turnover_cap):
            lo = np.maximum(lo, self.prev_weights - self.turnover_cap)
            hi = np.minimum(hi, self.prev_weights + self.turnover_cap)
        return lo, hi


def constraint_violations(w: np.ndarray, spec: QpSpec) -> dict[str, float]:
    """Amount by which ``w`` violates each constraint family (0 when satisfied)."""
    s = spec.sigma
    d = w - spec.prev_weights
    out = {
        "risk": max(0.0, float(w @ s @ w) - spec.risk_cap),
        "box": max(0.0, float(np.max(-w, initial=0.0)), float(np.max(w - spec.weight_cap, initial=0.0))),
    }
    if spec.turnover_mode == "elementwise":
        out["turnover"] = max(0.0, float(np.max(np.abs(d), initial=0.0)) - spec.turnover_cap)
    else:
        out["turnover"] = max(0.0, float(np.abs(d).sum()) - spec.turnover_cap)
    out["budget"] = abs(float(w.sum()) - 1.0) if spec.budget else 0.0
    return out


class _Feasible:
    """Exact Euclidean projection onto the polyhedral part of the feasible set."""

    def __init__(self, spec: QpSpec):
        self.spec = spec
        self.lo, self.hi = spec.bounds()
        self.l1 = spec.turnover_mode == "l1" and math.isfinite(spec.turnover_cap)
        self.budget = spec.budget
        if np.any(self.lo > self.hi + 1e-15):
            raise InfeasibleError("box and turnover bounds leave no room for some instrument", "turnover")
        self.hi = np.maximum(self.hi, self.lo)
        if self.budget and (self.lo.sum() > 1 + 1e-12 or self.hi.sum() < 1 - 1e-12):
            raise InfeasibleError("budget sum(w) = 1 is unreachable within the box", "budget")

    def _box_budget(self, v):
        lo, hi = self.lo, self.hi
        a, b = float(np.min(v - hi)), float(np.max(v - lo))
        for _ in range(200):
            mid = 0.5 * (a + b)
            if np.clip(v - mid, lo, hi).sum() > 1.0:
                a = mid
            else:
                b = mid
            if b - a <= 1e-16 * max(1.0, abs(a), abs(b)):
                break
        x = np.clip(v - 0.5 * (a + b), lo, hi)
        return _fix_sum(x, lo, hi)

    def _box_l1(self, v):
        w0 = self.spec.prev_weights
        dlo, dhi = self.lo - w0, self.hi - w0
        d = v - w0
        c2 = self.spec.turnover_cap
        x = np.clip(d, dlo, dhi)
        if np.abs(x).sum() <= c2:
            return w0 + x
        a, b = 0.0, float(np.max(np.abs(d)))
        for _ in range(200):
            mid = 0.5 * (a + b)
            x = np.clip(np.sign(d) * np.maximum(np.abs(d) - mid, 0.0), dlo, dhi)
            if np.abs(x).sum() > c2:
                a = mid
            else:
                b = mid
            if b - a <= 1e-16 * max(1.0, b):
                break
        x = np.clip(np.sign(d) * np.maximum(np.abs(d) - b, 0.0), dlo, dhi)
        return w0 + x

    def project(self, v: np.ndarray) -> np.ndarray:
        if not self.l1 and not self.budget:
            return np.clip(v, self.lo, self.hi)
        if self.budget and not self.l1:
            return self._box_budget(v)
        if self.l1 and not self.budget:
            return self._box_l1(v)
        # Dykstra between (box & budget) and (box & L1 ball)
        x = v.copy()
        p = np.zeros_like(v)
        q = np.zeros_like(v)
        for _ in range(MAX_ITER):
            y = self._box_budget(x + p)
            p = x + p - y
            x_new = self._box_l1(y + q)
            q = y + q - x_new
            if np.max(np.abs(x_new - x)) < 1e-13:
                x = x_new
                break
            x = x_new
        return self._box_budget(x)


def _fix_sum(x, lo, hi):
    """Nudge free coordinates so sum(x) == 1 up to rounding."""
    err = 1.0 - x.sum()
    if err == 0.0:
        return x
    room = (hi - x) if err > 0 else (x - lo)
    k = int(np.argmax(room))
    x = x.copy()
    x[k] = min(max(x[k] + err, lo[k]), hi[k])
    return x


def _lp(spec: QpSpec, feas: _Feasible) -> np.ndarray:
    """argmax w'r over the polyhedral part (risk cap ignored)."""
    r = spec.expected_returns
    n = r.size
    lo, hi = feas.lo, feas.hi
    if feas.l1:
        w0 = spec.prev_weights
        c = np.concatenate([-r, np.zeros(n)])
        eye = np.eye(n)
        a_ub = np.block([[eye, -eye], [-eye, -eye], [np.zeros((1, n)), np.ones((1, n))]])
        b_ub = np.concatenate([w0, -w0, [spec.turnover_cap]])
        bounds = list(zip(lo, hi)) + [(0, None)] * n
        a_eq = np.concatenate([np.ones(n), np.zeros(n)])[None, :] if spec.budget else None
    else:
        c = -r
        a_ub = b_ub = None
        bounds = list(zip(lo, hi))
        a_eq = np.ones((1, n)) if spec.budget else None
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[1.0] if spec.budget else None,
                  bounds=bounds, method="highs")
    if res.status == 2:
        raise InfeasibleError("turnover/budget/box constraints are jointly infeasible",
                              "budget" if spec.budget else "turnover")
    if res.status != 0:
        raise InvariantError(f"LP solve failed: {res.message}")
    return feas.project(res.x[:n])


def _penalized(spec: QpSpec, feas: _Feasible, nu: float, lam_max: float, x0: np.ndarray,
               tol: float) -> np.ndarray:
    """argmax w'r - nu * w'Sw over the polyhedral part, by accelerated projected gradient."""
    r, s = spec.expected_returns, spec.sigma
    if nu == 0.0:
        return _lp(spec, feas)
    step = 1.0 / (2.0 * nu * max(lam_max, 1e-300))
    x = feas.project(x0)
    y = x.copy()
    t = 1.0
    for _ in range(MAX_ITER):
        grad = r - 2.0 * nu * (s @ y)
        x_new = feas.project(y + step * grad)
        if np.max(np.abs(x_new - x)) < tol:
            x = x_new
            break
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_new
        # restart momentum when the objective direction reverses
        if (x_new - x) @ (r - 2.0 * nu * (s @ x_new)) < 0:
            t_new, mom = 1.0, 0.0
        y = x_new + mom * (x_new - x)
        x, t = x_new, t_new
    return x


def _min_risk(spec: QpSpec, feas: _Feasible, lam_max: float) -> np.ndarray:
    s = spec.sigma
    x = feas.project(np.clip(spec.prev_weights, feas.lo, feas.hi))
    if lam_max <= 0:
        return x
    step = 1.0 / (2.0 * lam_max)
    y, t = x.copy(), 1.0
    for _ in range(MAX_ITER):
        x_new = feas.project(y - step * 2.0 * (s @ y))
        if np.max(np.abs(x_new - x)) < 1e-13:
            return x_new
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + (t - 1.0) / t_new * (x_new - x)
        x, t = x_new, t_new
    return x


def _pull_inside(x: np.ndarray, anchor: np.ndarray, s: np.ndarray, cap: float) -> np.ndarray:
    """Largest step from ``anchor`` toward ``x`` that keeps w'Sw <= cap."""
    risk = lambda w: float(w @ s @ w)
    if risk(x) <= cap:
        return x
    d = x - anchor
    a = float(d @ s @ d)
    b = 2.0 * float(anchor @ s @ d)
    c = risk(anchor) - cap
    if a <= 0:
        return anchor
    theta = (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
    theta = min(max(theta, 0.0), 1.0)
    for _ in range(60):
        w = anchor + theta * d
        if risk(w) <= cap:
            return w
        theta *= 1.0 - 1e-12
    return anchor


def solve_weights(spec: QpSpec, tolerance: float = 1e-10) -> np.ndarray:
    """Maximize expected return under risk, turnover, box and optional budget constraints.

    The risk constraint is dualised: for a multiplier ``nu`` the penalised
    problem ``max w'r - nu w'Sw`` over the polyhedral constraints is solved by
    accelerated projected gradient, and ``nu`` is bisected until the risk cap
    binds. ``nu = 0`` (risk cap slack) is an LP.
    """
    s = spec.sigma
    lam = np.linalg.eigvalsh(s)
    lam_max = float(lam[-1]) if lam.size else 0.0
    if lam.size and lam[0] < -1e-10 * max(1.0, abs(lam_max)):
        raise DataError("covariance matrix is not positive semidefinite")
    feas = _Feasible(spec)
    x = _lp(spec, feas)
    anchor = _min_risk(spec, feas, lam_max)
    c1 = spec.risk_cap
    if float(anchor @ s @ anchor) > c1 * (1 + 1e-12):
        raise InfeasibleError("no weights within the box/turnover/budget limits meet the risk cap", "risk")

    risk = lambda w: float(w @ s @ w)
    if risk(x) > c1:
        r_norm = float(np.linalg.norm(spec.expected_returns))
        nu = max(r_norm / (2.0 * math.sqrt(c1 * max(lam_max, 1e-300))), 1e-300)
        x_hi = _penalized(spec, feas, nu, lam_max, anchor, tolerance)
        lo_nu, hi_nu = 0.0, nu
        while risk(x_hi) > c1:
            lo_nu, hi_nu = hi_nu, hi_nu * 4.0
            x_hi = _penalized(spec, feas, hi_nu, lam_max, x_hi, tolerance)
        x_mid = x_hi
        for _ in range(200):
            mid = 0.5 * (lo_nu + hi_nu) if lo_nu > 0 else hi_nu / 4.0
            if lo_nu == 0.0 and mid < 1e-300:
                break
            x_mid = _penalized(spec, feas, mid, lam_max, x_mid, tolerance)
            if risk(x_mid) > c1:
                lo_nu = mid
            else:
                hi_nu, x_hi = mid, x_mid
            if lo_nu > 0 and hi_nu - lo_nu <= 1e-12 * hi_nu:
                break
        x = x_hi
    x = _pull_inside(x, anchor, s, c1)
    bad = {k: v for k, v in constraint_violations(x, spec).items() if v > CONSTRAINT_TOL}
    if bad:
        raise InvariantError(f"solver output violates constraints: {bad}")
    return x


# -- order splitting -----------------------------------------------------------------

@dataclass(frozen=True)
class Twap:
    slices: int


@dataclass(frozen=True)
class Vwap:
    profile: tuple[float, ...]


def split_order(total_quantity: int, schedule: Union[Twap, Vwap]) -> list[int]:
    """Integer child orders summing exactly to the parent (largest-remainder rounding,
    ties to the earlier slice)."""
    if isinstance(schedule, Twap):
        if schedule.slices < 1:
            raise ConfigError("twap needs at least one slice")
        shares = [Fraction(1)] * schedule.slices
    else:
        prof = [Fraction(float(p)) for p in schedule.profile]
        if not prof or any(p < 0 for p in prof):
            raise DataError("volume profile must be nonnegative and nonempty")
        if sum(prof) == 0:
            raise DataError("volume profile is all zero")
        shares = prof
    total_share = sum(shares)
    exact = [Fraction(total_quantity) * s / total_share for s in shares]
    base = [math.floor(e) for e in exact]
    left = total_quantity - sum(base)
    order = sorted(range(len(exact)), key=lambda k: (-(exact[k] - base[k]), k))
    for k in order[:left]:
        base[k] += 1
    return base


# -- backtest -------------------------------------------------------------------------

@dataclass(frozen=True)
class QpTemplate:
    c1: float = 0.0004
    c2: float = 0.1
    c3: float = 0.05
    budget: bool = False
    delta: float = 0.1
    lookback: int = 60
    turnover_mode: str = "elementwise"


@dataclass(frozen=True, eq=False)
class BacktestResult:
    dates: np.ndarray
    equity: np.ndarray
    returns: np.ndarray
    weights: WeightSeries
    turnover: np.ndarray  # per rebalance date
    report: FactorReport
    skipped: tuple[str, ...]

    def equity_csv(self) -> str:
        lines = ["date,equity"] + [f"{d},{float(e)!r}" for d, e in zip(self.dates, self.equity)]
        return "\n".join(lines) + "\n"


ScoreSource = Union[str, Expr, FactorMatrix]


def _scores(source: ScoreSource, panel: PanelFrame) -> FactorMatrix:
    if isinstance(source, FactorMatrix):
        if source.values.shape != panel.shape[:2] or not np.array_equal(source.dates, panel.dates):
            raise DataError("score surface is not aligned with the panel")
        if tuple(source.instruments) != panel.instruments:
            pos = {s: k for k, s in enumerate(source.instruments)}
            try:
                idx = [pos[s] for s in panel.instruments]
            except KeyError as e:
                raise DataError(f"score surface lacks instrument {e}") from None
            source = FactorMatrix(panel.dates, panel.instruments, source.values[:, idx], source.mask[:, idx])
        return source
    expr = parse(source) if isinstance(source, str) else source
    return evaluate(expr, panel)


def rebalance_indices(n_dates: int, every: int = 1, start: int = 0) -> list[int]:
    if every < 1:
        raise ConfigError("rebalance interval must be >= 1")
    return list(range(start, n_dates, every))


def run_backtest(panel: PanelFrame, source: ScoreSource, schedule: Sequence[int] | None = None, *,
                 rule: str = "quantile", q: float = 0.1, qp: QpTemplate | None = None,
                 cost_rate: float = 0.0, price_field: str = "close",
                 periods_per_year: int = PERIODS_PER_YEAR) -> BacktestResult:
    """Walk forward through the panel, rebalancing on ``schedule`` (date indices).

    At a rebalance date t the scores and (for the optimizer) the trailing
    covariance use data up to t only. Holdings earn close-to-close returns
    from t to the next date; trading costs ``cost_rate * turnover`` are charged
    on the rebalance date.
    """
    if rule not in ("quantile", "optimizer"):
        raise ConfigError(f"unknown portfolio rule {rule!r}")
    qp = qp or QpTemplate()
    panel = panel.canonical()
    T, N, _ = panel.shape
    scores = _scores(source, panel)
    price, pmask = panel.field(price_field)
    daily = np.zeros((T, N))
    dmask = np.zeros((T, N), dtype=bool)
    if T > 1:
        dmask[1:] = pmask[1:] & pmask[:-1] & (price[:-1] != 0)
        with np.errstate(all="ignore"):
            daily[1:] = np.where(dmask[1:], price[1:] / price[:-1] - 1.0, 0.0)
    schedule = rebalance_indices(T) if schedule is None else sorted(set(int(t) for t in schedule))
    if schedule and (schedule[0] < 0 or schedule[-1] >= T):
        raise ConfigError("rebalance schedule falls outside the panel dates")
    is_rebal = np.zeros(T, dtype=bool)
    is_rebal[schedule] = True

    hold = np.zeros(N)
    equity = np.ones(T)
    rets = np.zeros(T)
    targets, tos, skipped = [], [], []
    for t in range(T):
        gross = float(hold @ daily[t]) if t > 0 else 0.0
        cost = 0.0
        if is_rebal[t]:
            new = _target(t, scores, pmask, daily, dmask, hold, rule, q, qp)
            if new is None:
                skipped.append(str(panel.dates[t]))
                new = np.zeros(N) if rule == "quantile" else hold
            to = 0.5 * float(np.abs(new - hold).sum())
            cost = cost_rate * to
            targets.append(new)
            tos.append(to)
            hold = new
        rets[t] = gross - cost
        equity[t] = (equity[t - 1] if t > 0 else 1.0) * (1.0 + rets[t])
    if skipped:
        log.info("skipped %d rebalance date(s) with no evaluable instruments", len(skipped))

    weights = WeightSeries(panel.dates[schedule], panel.instruments,
                           np.array(targets) if targets else np.zeros((0, N)))
    tos = np.array(tos)
    first = schedule[0] if schedule else T
    fwd = forward_returns(panel, price_field, 1)
    ic = information_coefficient(scores, fwd)
    ic_mean, ic_std, icir, n_ic = summarize_ic(ic)
    live = rets[first + 1:] if first + 1 < T else np.zeros(0)
    ann, sr, mdd, avg_to = portfolio_stats(live, tos, periods_per_year)
    report = FactorReport(ic, ic_mean, ic_std, icir, ann, sr, mdd, avg_to, 0.0, n_ic)
    return BacktestResult(panel.dates, equity, rets, weights, tos, report, tuple(skipped))


def _target(t, scores, pmask, daily, dmask, hold, rule, q, qp):
    ok = scores.mask[t] & pmask[t]
    if rule == "quantile":
        w, traded = longshort_weights(scores.values[t:t + 1], ok[None, :], q)
        return w[0] if traded[0] else None
    if not ok.any():
        return None
    lo = max(1, t - qp.lookback + 1)
    if t + 1 - lo < 2:
        return None
    window = np.where(dmask[lo:t + 1], daily[lo:t + 1], np.nan)
    cov = estimate_covariance(window, qp.delta)
    r = np.where(ok, scores.values[t], 0.0)
    spec = QpSpec(r, cov, qp.c1, qp.c2, qp.c3, hold, qp.budget, qp.turnover_mode)
    return solve_weights(spec)
