import datetime as dt

import numpy as np
import pytest

from bandcast.dataset import SyntheticConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_panel():
    """260-day two-hour panel with AR structure and one exogenous driver."""
    return generate_synthetic(SyntheticConfig(
        n_days=260, hours=(3, 13), ar_coef=0.6, exo_coef=1.0,
        noise_scale=2.0, seed=7, start_date=dt.date(2016, 1, 1),
    ))


@pytest.fixture(scope="session")
def small_panel_csv(small_panel, tmp_path_factory):
    from bandcast.pipeline import write_panel_csv

    path = tmp_path_factory.mktemp("panel") / "prices.csv"
    write_panel_csv(small_panel, str(path))
    return path


def make_linear_stream(n, seed, slope=1.5, noise=1.0, shift_at=None, shift_by=0.0):
    """(X, y) with a lag-1-style feature; optional mean shift mid-stream."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    mu = np.zeros(n)
    if shift_at is not None:
        mu[shift_at:] = shift_by
    y = slope * x[:, 0] + mu + noise * rng.normal(size=n)
    return x, y


@pytest.fixture
def linear_stream():
    return make_linear_stream
