"""Seeded synthetic panels for experiments, tests and the demo scripts."""
from __future__ import annotations

import numpy as np

from .dsl import FactorMatrix, evaluate, parse
from .dsl.ops import zscore
from .metrics import ForwardReturns, make_forward_returns
from .panel import PanelFrame, from_arrays

PLANTED = "-ts_corr(rank(close), rank(volume), 5)"


def instrument_ids(n: int) -> tuple[str, ...]:
    width = len(str(n - 1))
    return tuple(f"S{i:0{width}d}" for i in range(n))


def business_dates(n: int, start: str = "2020-01-01") -> np.ndarray:
    return np.busday_offset(np.datetime64(start, "D"), np.arange(n), roll="forward")


def price_volume_panel(n_instruments: int, n_dates: int, seed: int,
                       n_sectors: int = 0) -> PanelFrame:
    """Geometric random-walk closes and log-normal AR(1) volumes."""
    rng = np.random.default_rng(seed)
    rets = rng.normal(0.0, 0.02, size=(n_dates, n_instruments))
    close = 100.0 * np.exp(np.cumsum(rets, axis=0))
    shock = rng.normal(0.0, 0.3, size=(n_dates, n_instruments))
    logv = np.empty_like(shock)
    logv[0] = shock[0]
    for t in range(1, n_dates):
        logv[t] = 0.7 * logv[t - 1] + shock[t]
    fields = {"close": close, "volume": 1e6 * np.exp(logv)}
    if n_sectors:
        sector = rng.integers(n_sectors, size=n_instruments).astype(np.float64)
        fields["sector"] = np.broadcast_to(sector, (n_dates, n_instruments))
    return from_arrays(business_dates(n_dates), instrument_ids(n_instruments), fields)


def planted_signal(n_instruments: int = 100, n_dates: int = 300, seed: int = 7,
                   expr: str = PLANTED, signal_to_noise: float = 3.0,
                   scale: float = 0.01) -> tuple[PanelFrame, ForwardReturns, FactorMatrix]:
    """Panel whose forward returns are ``scale * (snr * zscore(planted) + noise)``.

    Where the planted factor is undefined the return is pure noise.
    """
    panel = price_volume_panel(n_instruments, n_dates, seed)
    planted = evaluate(parse(expr), panel)
    z = zscore(_surface(planted))
    rng = np.random.default_rng([seed, 1])
    noise = rng.standard_normal((n_dates, n_instruments))
    signal = np.where(z.m, z.v, 0.0)
    fwd = make_forward_returns(planted, scale * (signal_to_noise * signal + noise), horizon=1)
    return panel, fwd, planted


def calibrated_ic_signal(n_instruments: int = 500, n_dates: int = 252, seed: int = 11,
                         weight: float = 0.1) -> tuple[FactorMatrix, ForwardReturns]:
    """Factor ``weight * r + (1 - weight) * noise`` against i.i.d. returns ``r``.

    With equal return and noise volatility the expected daily rank IC is close
    to ``weight / sqrt(weight**2 + (1 - weight)**2)``.
    """
    rng = np.random.default_rng(seed)
    r = rng.normal(0.0, 0.02, size=(n_dates, n_instruments))
    noise = rng.normal(0.0, 0.02, size=(n_dates, n_instruments))
    f = weight * r + (1.0 - weight) * noise
    fm = FactorMatrix(business_dates(n_dates), instrument_ids(n_instruments), f,
                      np.ones(f.shape, dtype=bool))
    return fm, make_forward_returns(fm, r, horizon=1, mask=np.ones(f.shape, dtype=bool))


def _surface(fm: FactorMatrix):
    from .dsl.ops import Surface
    return Surface(fm.values, fm.mask)
