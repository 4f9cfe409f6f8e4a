import numpy as np
import pytest

from twoway_shrink import CellTable, is_connected


def make_random_table(
    rng,
    r,
    c,
    k_max=5,
    n_missing=0,
    sigma2=1.0,
    mu=0.0,
    effect_sd_a=1.0,
    effect_sd_b=1.0,
    noise=True,
):
    """Random connected table plus its true complete means."""
    for _ in range(200):
        counts = rng.integers(1, k_max + 1, size=(r, c))
        if n_missing:
            drop = rng.choice(r * c, size=n_missing, replace=False)
            counts.ravel()[drop] = 0
        alpha = rng.normal(0.0, effect_sd_a, r)
        beta = rng.normal(0.0, effect_sd_b, c)
        eta = mu + alpha[:, None] + beta[None, :]
        eps = rng.normal(0.0, 1.0, (r, c)) * np.sqrt(sigma2 / np.maximum(counts, 1))
        means = np.where(counts > 0, eta + (eps if noise else 0.0), np.nan)
        if (counts > 0).sum() < r + c - 1:
            continue
        table = CellTable(counts, means, sigma2)
        if is_connected(table):
            return table, eta.ravel()
    raise RuntimeError("failed to draw a connected table")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
