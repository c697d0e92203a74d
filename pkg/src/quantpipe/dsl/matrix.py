from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class FactorMatrix:
    """A (dates x instruments) surface with its observation mask."""

    dates: np.ndarray
    instruments: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        m = np.array(self.mask, dtype=bool)
        shape = (len(self.dates), len(self.instruments))
        if v.shape != shape or m.shape != shape:
            raise ValueError(f"values/mask must have shape {shape}")
        v = np.where(m, v, np.nan)
        v.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "instruments", tuple(self.instruments))

    @property
    def shape(self):
        return self.values.shape

    def truncate(self, n_dates: int) -> "FactorMatrix":
        return FactorMatrix(self.dates[:n_dates], self.instruments,
                            self.values[:n_dates], self.mask[:n_dates])

    def with_values(self, values, mask) -> "FactorMatrix":
        return FactorMatrix(self.dates, self.instruments, values, mask)
