import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from quantpipe.panel import from_arrays
from quantpipe.synthetic import business_dates, instrument_ids

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance criteria record a verdict line here; printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def random_panel(seed, n_dates=50, n_instruments=20, missing=0.1, n_sectors=3):
    """Random close/volume/sector panel with scattered missing cells."""
    rng = np.random.default_rng(seed)
    close = 100 * np.exp(np.cumsum(rng.normal(0, 0.02, (n_dates, n_instruments)), axis=0))
    volume = np.exp(rng.normal(13, 0.5, (n_dates, n_instruments)))
    for arr in (close, volume):
        arr[rng.random(arr.shape) < missing] = np.nan
    sector = np.broadcast_to(rng.integers(n_sectors, size=n_instruments).astype(float),
                             (n_dates, n_instruments)).copy()
    return from_arrays(business_dates(n_dates), instrument_ids(n_instruments),
                       {"close": close, "volume": volume, "sector": sector})


@pytest.fixture
def panel():
    return random_panel(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
