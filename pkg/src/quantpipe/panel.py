"""Aligned (date x instrument x field) panel with an explicit missingness mask."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .errors import (
    ConfigError,
    DataError,
    DuplicateRecordError,
    EmptyInputError,
    FieldNotFoundError,
    PanelParseError,
)

HEADER = ("date", "instrument", "field", "value")
MISSING = "NA"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelFrame:
    """Immutable panel. ``values[t, i, f]`` is meaningful only where ``mask`` is true.

    Masked-false cells hold NaN, but callers must go through the mask.
    """

    dates: np.ndarray  # datetime64[D], strictly increasing
    instruments: tuple[str, ...]
    fields: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        shape = (len(dates), len(self.instruments), len(self.fields))
        if values.shape != shape or mask.shape != shape:
            raise ValueError(f"values/mask shape must be {shape}, got {values.shape}/{mask.shape}")
        if len(dates) > 1 and not np.all(dates[1:] > dates[:-1]):
            raise ValueError("dates must be strictly increasing")
        if len(set(self.instruments)) != len(self.instruments):
            raise ValueError("duplicate instrument")
        if len(set(self.fields)) != len(self.fields):
            raise ValueError("duplicate field")
        values = np.where(mask, values, np.nan)
        object.__setattr__(self, "dates", _frozen(dates))
        object.__setattr__(self, "instruments", tuple(self.instruments))
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def field_index(self, name: str) -> int:
        try:
            return self.fields.index(name)
        except ValueError:
            raise FieldNotFoundError(f"field not found: {name!r}") from None

    def field(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Return read-only ``(values, mask)`` for one field, each of shape (dates, instruments)."""
        k = self.field_index(name)
        return self.values[:, :, k], self.mask[:, :, k]

    def replace_field(self, name: str, values: np.ndarray, mask: np.ndarray) -> "PanelFrame":
        k = self.field_index(name)
        v = np.array(self.values)
        m = np.array(self.mask)
        v[:, :, k] = values
        m[:, :, k] = mask
        return PanelFrame(self.dates, self.instruments, self.fields, v, m)

    def truncate(self, n_dates: int) -> "PanelFrame":
        """Keep only the first ``n_dates`` dates."""
        return PanelFrame(self.dates[:n_dates], self.instruments, self.fields,
                          self.values[:n_dates], self.mask[:n_dates])

    def canonical(self) -> "PanelFrame":
        """Instruments and fields in sorted order."""
        io_ = np.argsort(np.array(self.instruments, dtype=object), kind="stable")
        fo = np.argsort(np.array(self.fields, dtype=object), kind="stable")
        if np.all(io_ == np.arange(len(io_))) and np.all(fo == np.arange(len(fo))):
            return self
        v = self.values[:, io_][:, :, fo]
        m = self.mask[:, io_][:, :, fo]
        return PanelFrame(self.dates, tuple(self.instruments[i] for i in io_),
                          tuple(self.fields[j] for j in fo), v, m)

    def missing_fraction(self) -> float:
        return float(1.0 - self.mask.mean()) if self.mask.size else 0.0


def from_arrays(dates, instruments, fields: dict[str, np.ndarray]) -> PanelFrame:
    """Build a panel from per-field (dates x instruments) arrays; NaN marks missing."""
    names = tuple(fields)
    stack = np.stack([np.asarray(fields[k], dtype=np.float64) for k in names], axis=-1)
    return PanelFrame(np.asarray(dates, dtype="datetime64[D]"), tuple(instruments), names,
                      stack, np.isfinite(stack))


# -- CSV -------------------------------------------------------------------

def _parse_float(text: str, line: int) -> float | None:
    if text == MISSING:
        return None
    try:
        v = float(text)
    except ValueError:
        raise PanelParseError(f"bad value {text!r}", line) from None
    if not math.isfinite(v):
        raise PanelParseError(f"non-finite value {text!r}", line)
    return v


def load_panel(path) -> PanelFrame:
    """Read a long-format ``date,instrument,field,value`` CSV.

    Axes are the sorted union of what appears in the file; cells that never
    appear (or appear as ``NA``) are masked out.
    """
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as e:
        raise DataError(f"cannot read panel file {path}: {e.strerror or e}") from None
    return parse_panel_csv(text)


def parse_panel_csv(text: str) -> PanelFrame:
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None:
        raise EmptyInputError("empty input: no header")
    if tuple(h.strip() for h in header) != HEADER:
        raise PanelParseError(f"expected header {','.join(HEADER)}", 1)

    records: dict[tuple[str, str, str], float | None] = {}
    for lineno, row in enumerate(rows, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise PanelParseError(f"expected 4 columns, got {len(row)}", lineno)
        d, inst, fld, val = (c.strip() for c in row)
        try:
            np.datetime64(d, "D")
            if len(d) != 10:
                raise ValueError
        except ValueError:
            raise PanelParseError(f"bad ISO date {d!r}", lineno) from None
        if not inst or not fld:
            raise PanelParseError("empty instrument or field", lineno)
        key = (d, inst, fld)
        if key in records:
            raise DuplicateRecordError(f"line {lineno}: duplicate record {key}")
        records[key] = _parse_float(val, lineno)
    if not records:
        raise EmptyInputError("empty input: no data rows")

    dates = sorted({k[0] for k in records})
    insts = sorted({k[1] for k in records})
    flds = sorted({k[2] for k in records})
    di = {d: n for n, d in enumerate(dates)}
    ii = {s: n for n, s in enumerate(insts)}
    fi = {f: n for n, f in enumerate(flds)}
    values = np.full((len(dates), len(insts), len(flds)), np.nan)
    mask = np.zeros(values.shape, dtype=bool)
    for (d, inst, fld), v in records.items():
        if v is not None:
            values[di[d], ii[inst], fi[fld]] = v
            mask[di[d], ii[inst], fi[fld]] = True
    return PanelFrame(np.array(dates, dtype="datetime64[D]"), tuple(insts), tuple(flds), values, mask)


def panel_to_csv(panel: PanelFrame, emit_missing: bool = False) -> str:
    """Long-format CSV in canonical (sorted) axis order."""
    panel = panel.canonical()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    T, N, F = panel.shape
    for t in range(T):
        d = str(panel.dates[t])
        for i in range(N):
            for f in range(F):
                if panel.mask[t, i, f]:
                    w.writerow((d, panel.instruments[i], panel.fields[f], repr(float(panel.values[t, i, f]))))
                elif emit_missing:
                    w.writerow((d, panel.instruments[i], panel.fields[f], MISSING))
    return buf.getvalue()


def save_panel(panel: PanelFrame, path, emit_missing: bool = False) -> None:
    atomic_write_text(path, panel_to_csv(panel, emit_missing=emit_missing))


# -- preprocessing ---------------------------------------------------------

@dataclass(frozen=True)
class PreprocessSpec:
    impute: str = "none"  # "none" | "forward_fill"
    max_gap: int = 0
    winsorize_p: float = 0.0
    winsorize_fields: tuple[str, ...] = ()
    standardize: str = "none"  # "none" | "zscore_cross_section"
    standardize_fields: tuple[str, ...] = ()

    def __post_init__(self):
        if self.impute not in ("none", "forward_fill"):
            raise ConfigError(f"unknown impute mode {self.impute!r}")
        if self.standardize not in ("none", "zscore_cross_section"):
            raise ConfigError(f"unknown standardize mode {self.standardize!r}")
        if not 0.0 <= self.winsorize_p < 0.5:
            raise ConfigError("winsorize_p must lie in [0, 0.5)")
        if self.max_gap < 0:
            raise ConfigError("max_gap must be >= 0")


def forward_fill(panel: PanelFrame, max_gap: int) -> PanelFrame:
    """Fill each missing cell from the most recent observation at most ``max_gap`` dates back."""
    if max_gap < 0:
        raise ConfigError("max_gap must be >= 0")
    T = panel.shape[0]
    if T == 0 or max_gap == 0:
        return panel
    t_idx = np.arange(T).reshape(T, 1, 1)
    last = np.where(panel.mask, t_idx, -1)
    last = np.maximum.accumulate(last, axis=0)
    fillable = (~panel.mask) & (last >= 0) & (t_idx - last <= max_gap)
    src = np.clip(last, 0, None)
    filled = np.take_along_axis(panel.values, src, axis=0)
    values = np.where(fillable, filled, panel.values)
    return PanelFrame(panel.dates, panel.instruments, panel.fields, values, panel.mask | fillable)


def nearest_rank_bounds(sorted_rows: np.ndarray, counts: np.ndarray, p: float):
    """Per-row nearest-rank quantiles Q(p), Q(1-p) of the first ``counts`` entries.

    Q(p) is the ceil(p*n)-th order statistic (1-based, floored at the first).
    """
    n = counts.astype(np.float64)
    # the small epsilon keeps products such as 0.1*10 from rounding up a rank
    k_lo = np.maximum(np.ceil(p * n - 1e-9), 1).astype(np.int64)
    k_hi = np.maximum(np.ceil((1.0 - p) * n - 1e-9), 1).astype(np.int64)
    k_lo = np.minimum(k_lo, np.maximum(counts, 1))
    k_hi = np.minimum(k_hi, np.maximum(counts, 1))
    rows = np.arange(sorted_rows.shape[0])
    return sorted_rows[rows, k_lo - 1], sorted_rows[rows, k_hi - 1]


def winsorize_rows(values: np.ndarray, mask: np.ndarray, p: float) -> np.ndarray:
    """Clip every row's observed entries to its nearest-rank [Q(p), Q(1-p)] band."""
    if p == 0.0 or values.size == 0:
        return np.where(mask, values, np.nan)
    srt = np.sort(np.where(mask, values, np.inf), axis=1)
    counts = mask.sum(axis=1)
    lo, hi = nearest_rank_bounds(srt, counts, p)
    out = np.clip(values, lo[:, None], hi[:, None])
    return np.where(mask, out, np.nan)


def winsorize_cross_section(panel: PanelFrame, field: str, p: float) -> PanelFrame:
    if not 0.0 <= p < 0.5:
        raise ConfigError("p must lie in [0, 0.5)")
    v, m = panel.field(field)
    if p == 0.0:
        return panel
    return panel.replace_field(field, winsorize_rows(v, m, p), m)


def zscore_rows(values: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise (x - mean) / sample std; rows with < 2 observations or zero spread are masked."""
    n = mask.sum(axis=1)
    x = np.where(mask, values, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = x.sum(axis=1) / n
        dev = np.where(mask, values - mean[:, None], 0.0)
        std = np.sqrt((dev * dev).sum(axis=1) / (n - 1))
        ok = (n >= 2) & (std > 0) & np.isfinite(std)
        out = dev / np.where(ok, std, 1.0)[:, None]
    new_mask = mask & ok[:, None]
    return np.where(new_mask, out, np.nan), new_mask


def zscore_cross_section(panel: PanelFrame, field: str) -> PanelFrame:
    v, m = panel.field(field)
    out, new_mask = zscore_rows(v, m)
    return panel.replace_field(field, out, new_mask)


def preprocess(panel: PanelFrame, spec: PreprocessSpec) -> PanelFrame:
    """Apply imputation, then winsorization, then standardization."""
    if spec.impute == "forward_fill":
        panel = forward_fill(panel, spec.max_gap)
    if spec.winsorize_p > 0:
        for f in spec.winsorize_fields:
            panel = winsorize_cross_section(panel, f, spec.winsorize_p)
    if spec.standardize == "zscore_cross_section":
        for f in spec.standardize_fields:
            panel = zscore_cross_section(panel, f)
    return panel


def summarize(panel: PanelFrame) -> dict:
    return {
        "dates": panel.shape[0],
        "instruments": panel.shape[1],
        "fields": panel.shape[2],
        "first_date": str(panel.dates[0]) if len(panel.dates) else "",
        "last_date": str(panel.dates[-1]) if len(panel.dates) else "",
        "missing_fraction": panel.missing_fraction(),
    }
