"""Simulated product panels for event-study checks."""

import numpy as np
import pandas as pd


def staggered_panel(seed, n_products=2000, n_periods=30, n_firms=200, effect=-0.05, heterogeneous=False, noise=0.3):
    """Panel with firm and period effects and staggered treatment.

    With ``heterogeneous`` the effect grows with event time and is larger
    for early cohorts. Returns the panel and the true effect per row.
    """
    rng = np.random.default_rng(seed)
    firm = rng.integers(0, n_firms, n_products)
    first = np.where(rng.random(n_products) < 0.6, rng.integers(5, n_periods - 5, n_products), np.inf)
    pid = np.repeat(np.arange(n_products), n_periods)
    per = np.tile(np.arange(n_periods), n_products)
    ft = first[pid]
    with np.errstate(invalid="ignore"):
        rel = per - ft
    post = np.isfinite(rel) & (rel >= 0)
    if heterogeneous:
        scale = np.where(ft < n_periods / 2, 2.0, 0.5)
        tau = np.where(post, effect * (np.where(post, rel, 0) + 1) * scale, 0.0)
    else:
        tau = np.where(post, effect, 0.0)
    y = rng.normal(size=n_firms)[firm[pid]] + 0.02 * per + rng.normal(size=n_periods)[per] + tau + noise * rng.normal(size=pid.size)
    df = pd.DataFrame(
        {"product_id": pid, "firm_id": firm[pid], "license": 0, "country": pid % 2, "period": per, "first_treat": ft, "y": y}
    )
    return df, tau


def true_dynamic_effects(df, tau, horizon):
    rel = df["period"].to_numpy() - df["first_treat"].to_numpy()
    post = np.isfinite(rel) & (rel >= 0) & (rel < horizon)
    return pd.Series(tau[post]).groupby(rel[post].astype(int)).mean()
