"""Vectorised operator implementations over (dates x instruments) surfaces.

Every function takes and returns ``Surface`` pairs. Masked cells carry NaN in
``v`` but results are always decided by ``m``.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from ..panel import winsorize_rows, zscore_rows

DIV_EPS = 1e-12


class Surface(NamedTuple):
    v: np.ndarray
    m: np.ndarray


def finish(v: np.ndarray, m: np.ndarray) -> Surface:
    with np.errstate(invalid="ignore"):
        m = m & np.isfinite(v)
    return Surface(np.where(m, v, np.nan), m)


def _unary(x: Surface, f) -> Surface:
    with np.errstate(all="ignore"):
        return finish(f(np.where(x.m, x.v, 0.0)), x.m)


def _binary(a: Surface, b: Surface, f) -> Surface:
    m = a.m & b.m
    with np.errstate(all="ignore"):
        return finish(f(np.where(m, a.v, 0.0), np.where(m, b.v, 0.0)), m)


# -- elementwise -------------------------------------------------------------

def neg(x):
    return _unary(x, np.negative)


def abs_(x):
    return _unary(x, np.abs)


def sign(x):
    return _unary(x, np.sign)


def safe_sqrt(x):
    return _unary(x, lambda a: np.sign(a) * np.sqrt(np.abs(a)))


def safe_log(x):
    return _unary(x, lambda a: np.sign(a) * np.log1p(np.abs(a)))


def add(a, b):
    return _binary(a, b, np.add)


def sub(a, b):
    return _binary(a, b, np.subtract)


def mul(a, b):
    return _binary(a, b, np.multiply)


def safe_div(a, b):
    m = a.m & b.m & (np.abs(np.where(b.m, b.v, 0.0)) >= DIV_EPS)
    with np.errstate(all="ignore"):
        return finish(np.where(m, a.v, 0.0) / np.where(m, b.v, 1.0), m)


# -- time series ---------------------------------------------------------------
# A window value at date t uses dates t-w+1..t and exists only when all w cells
# are observed.

def _windows(x: Surface, w: int):
    T = x.v.shape[0]
    if T < w:
        return None, None
    vv = sliding_window_view(np.where(x.m, x.v, 0.0), w, axis=0)  # (T-w+1, N, w)
    full = sliding_window_view(x.m, w, axis=0).all(axis=-1)
    return vv, full


def _place(x: Surface, w: int, out: np.ndarray, ok: np.ndarray) -> Surface:
    v = np.full(x.v.shape, np.nan)
    m = np.zeros(x.m.shape, dtype=bool)
    if out is not None:
        v[w - 1:] = out
        m[w - 1:] = ok
    return finish(v, m)


def ts_mean(x, w):
    vv, full = _windows(x, w)
    if vv is None:
        return _place(x, w, None, None)
    return _place(x, w, vv.mean(axis=-1), full)


def ts_std(x, w):
    vv, full = _windows(x, w)
    if vv is None:
        return _place(x, w, None, None)
    return _place(x, w, vv.std(axis=-1, ddof=1), full)


def ts_delta(x, w):
    """Newest minus oldest value of the w-date window."""
    vv, full = _windows(x, w)
    if vv is None:
        return _place(x, w, None, None)
    return _place(x, w, vv[..., -1] - vv[..., 0], full)


def ts_max(x, w):
    vv, full = _windows(x, w)
    if vv is None:
        return _place(x, w, None, None)
    return _place(x, w, vv.max(axis=-1), full)


def ts_min(x, w):
    vv, full = _windows(x, w)
    if vv is None:
        return _place(x, w, None, None)
    return _place(x, w, vv.min(axis=-1), full)


def ts_rank(x, w):
    vv, full = _windows(x, w)
    if vv is None:
        return _place(x, w, None, None)
    last = vv[..., -1:]
    less = (vv < last).sum(axis=-1)
    equal = (vv == last).sum(axis=-1)
    r = less + (equal + 1) / 2.0
    return _place(x, w, 2.0 * (r - 1) / (w - 1) - 1.0, full)


def decay_linear(x, w):
    vv, full = _windows(x, w)
    if vv is None:
        return _place(x, w, None, None)
    weights = np.arange(1, w + 1, dtype=np.float64)
    weights /= weights.sum()
    return _place(x, w, vv @ weights, full)


def ts_corr(a, b, w):
    m = a.m & b.m
    a = Surface(a.v, m)
    b = Surface(b.v, m)
    va, full = _windows(a, w)
    if va is None:
        return _place(a, w, None, None)
    vb, _ = _windows(b, w)
    da = va - va.mean(axis=-1, keepdims=True)
    db = vb - vb.mean(axis=-1, keepdims=True)
    sab = (da * db).sum(axis=-1)
    saa = (da * da).sum(axis=-1)
    sbb = (db * db).sum(axis=-1)
    # tiny relative spread is rounding noise, not variance
    scale_a = (va * va).sum(axis=-1)
    scale_b = (vb * vb).sum(axis=-1)
    ok = full & (saa > 1e-24 * scale_a) & (sbb > 1e-24 * scale_b) & (saa > 0) & (sbb > 0)
    with np.errstate(all="ignore"):
        r = sab / np.sqrt(saa * sbb)
    return _place(a, w, np.clip(r, -1.0, 1.0), ok)


# -- cross-sectional -----------------------------------------------------------

def rank_rows(v: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Average-tie ranks mapped affinely so the smallest observed value is -1 and the largest +1."""
    if v.size == 0:
        return np.where(m, 0.0, np.nan)
    r = rankdata(np.where(m, v, np.inf), axis=1, method="average")
    n = m.sum(axis=1, keepdims=True)
    with np.errstate(all="ignore"):
        out = np.where(n > 1, 2.0 * (r - 1) / (n - 1) - 1.0, 0.0)
    return np.where(m, out, np.nan)


def rank(x):
    return finish(rank_rows(x.v, x.m), x.m)


def zscore(x):
    v, m = zscore_rows(x.v, x.m)
    return finish(v, m)


def winsorize(x, p):
    return finish(winsorize_rows(x.v, x.m, p), x.m)


# -- group -----------------------------------------------------------------------

def _group_keys(x: Surface, g: Surface):
    """Flat indices of valid cells and a dense (date, group) key per cell."""
    valid = x.m & g.m
    T, N = x.v.shape
    t_idx, i_idx = np.nonzero(valid)
    codes = g.v[t_idx, i_idx]
    _, gi = np.unique(codes, return_inverse=True)
    n_groups = int(gi.max()) + 1 if gi.size else 0
    key = t_idx * max(n_groups, 1) + gi
    return valid, t_idx, i_idx, key


def group_demean(x, g):
    valid, t_idx, i_idx, key = _group_keys(x, g)
    vals = x.v[t_idx, i_idx]
    out = np.full(x.v.shape, np.nan)
    if vals.size:
        _, k = np.unique(key, return_inverse=True)
        sums = np.bincount(k, weights=vals)
        counts = np.bincount(k)
        out[t_idx, i_idx] = vals - (sums / counts)[k]
    return finish(out, valid)


def neutralize(x, g):
    """Residual of regressing each date's cross-section on group dummies."""
    return group_demean(x, g)


def group_rank(x, g):
    valid, t_idx, i_idx, key = _group_keys(x, g)
    vals = x.v[t_idx, i_idx]
    out = np.full(x.v.shape, np.nan)
    if vals.size:
        order = np.lexsort((vals, key))
        ks, xs = key[order], vals[order]
        n = ks.size
        pos = np.arange(n)
        new_group = np.ones(n, dtype=bool)
        new_group[1:] = ks[1:] != ks[:-1]
        gstart = np.maximum.accumulate(np.where(new_group, pos, 0))
        within = pos - gstart
        gid = np.cumsum(new_group) - 1
        gsize = np.bincount(gid)[gid]
        new_run = new_group.copy()
        new_run[1:] |= xs[1:] != xs[:-1]
        rid = np.cumsum(new_run) - 1
        first_idx = np.nonzero(new_run)[0]
        last_idx = np.append(first_idx[1:] - 1, n - 1)
        run_first = within[first_idx]
        run_last = within[last_idx]
        r = (run_first[rid] + run_last[rid]) / 2.0  # 0-based average rank
        with np.errstate(all="ignore"):
            res = np.where(gsize > 1, 2.0 * r / (gsize - 1) - 1.0, 0.0)
        out[t_idx[order], i_idx[order]] = res
    return finish(out, valid)
