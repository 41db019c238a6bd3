import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from copyspace.geometry import pairwise_distances
from copyspace.panel import (
    PanelError,
    arsinh,
    arsinh_elasticity,
    cluster_cov,
    demean,
    dummy_ols,
    event_dummies,
    event_study,
    first_treatment_periods,
    imputation_event_study,
    spatial_regression,
    within_ols,
)
from panel_dgp import staggered_panel, true_dynamic_effects


class TestWithin:
    @given(st.integers(0, 2**31 - 1))
    def test_matches_dummy_ols(self, seed):
        rng = np.random.default_rng(seed)
        n = 300
        a, b, c = rng.integers(0, 25, n), rng.integers(0, 6, n), rng.integers(0, 3, n)
        x = rng.normal(size=(n, 2)) + 0.1 * a[:, None]
        y = x @ [1.0, -2.0] + rng.normal(size=25)[a] + rng.normal(size=6)[b] + rng.normal(size=n)
        fit = within_ols(y, x, [a, b, c], a, tol=1e-14)
        np.testing.assert_allclose(fit.coef.values, dummy_ols(y, x, [a, b, c]), atol=1e-8)

    def test_demean_removes_group_means(self, rng):
        g1, g2 = rng.integers(0, 10, 200), rng.integers(0, 4, 200)
        v = rng.normal(size=200)
        d = demean(v, [g1, g2])
        d = d[0] if isinstance(d, tuple) else d
        for g in (g1, g2):
            assert np.max(np.abs(pd.Series(d).groupby(g).mean())) < 1e-8

    def test_cluster_cov_single_cluster_row(self, rng):
        x = rng.normal(size=(50, 2))
        e = rng.normal(size=50)
        v = cluster_cov(x, e, np.arange(50))
        bread = np.linalg.inv(x.T @ x)
        hc = bread @ ((x * e[:, None] ** 2).T @ x) @ bread
        np.testing.assert_allclose(v, hc * 50 / 49 * 49 / 48)
        with pytest.raises(PanelError):
            cluster_cov(x, e, np.zeros(50))

    def test_absorbed_regressor_named(self, rng):
        g = rng.integers(0, 5, 100)
        x = np.column_stack([rng.normal(size=100), g.astype(float)])
        with pytest.raises(PanelError, match="flat"):
            within_ols(rng.normal(size=100), x, [g], g, names=["ok", "flat"])
        fit = within_ols(rng.normal(size=100), x, [g], g, names=["ok", "flat"], drop_degenerate=True)
        assert np.isnan(fit.coef["flat"]) and np.isfinite(fit.coef["ok"])


class TestTransforms:
    def test_arsinh(self):
        assert arsinh(0.0) == 0.0
        assert arsinh(np.sinh(2.0)) == pytest.approx(2.0)

    def test_elasticity_large_y_limit(self):
        assert arsinh_elasticity(0.01, 100, 1e9) == pytest.approx(1.0)

    def test_spatial_regression_recovers_slope(self, rng):
        n_prod, n_per = 300, 6
        pid = np.repeat(np.arange(n_prod), n_per)
        ring = rng.integers(0, 400, pid.size).astype(float)
        fe = rng.normal(size=n_prod)[pid]
        log_rev = 5 + fe - 0.05 * ring / 100 + 0.05 * rng.normal(size=pid.size)
        df = pd.DataFrame({"product_id": pid, "license": pid % 3, "country": 0, "revenue": np.sinh(log_rev), "ring_0_0.1": ring})
        fit = spatial_regression(df, ["ring_0_0.1"], outcome="revenue")
        assert fit.coef["ring_0_0.1"] == pytest.approx(-0.05, abs=0.005)


class TestTreatment:
    def test_first_treatment_brute_force(self, rng):
        n = 60
        emb = rng.normal(size=(n, 3))
        entry = rng.integers(0, 5, n)
        ids = np.arange(n)
        first = first_treatment_periods(ids, entry, emb, k=3)
        d = pairwise_distances(emb)
        for i in range(n):
            expect = np.inf
            for t in range(entry[i] + 1, 5):
                present = [j for j in range(n) if entry[j] <= t and j != i]
                near = sorted(present, key=lambda j: (d[i, j], j))[:3]
                if any(entry[j] == t for j in near):
                    expect = t
                    break
            assert first[i] == expect

    def test_event_dummies_binned(self):
        mat, labels = event_dummies(np.array([-9, -1, 0, 12, np.nan]), (-5, 9))
        assert -1 not in labels
        assert mat[0, labels.index(-5)] == 1 and mat[3, labels.index(9)] == 1
        assert mat[1].sum() == 0 and mat[4].sum() == 0


class TestEventStudy:
    def test_recovers_constant_effect(self):
        df, _ = staggered_panel(3, n_products=800, n_periods=25)
        curve = event_study(df, "y", transform=False)
        tab = curve.table.set_index("event_time")
        assert tab.loc[-1, "coef"] == 0.0
        assert np.all(np.abs(tab.loc[[-5, -4, -3, -2], "coef"]) < 0.04)
        assert np.mean(tab.loc[0:8, "coef"]) == pytest.approx(-0.05, abs=0.03)

    def test_imputation_on_heterogeneous_effects(self):
        df, tau = staggered_panel(4, n_products=800, n_periods=25, heterogeneous=True)
        truth = true_dynamic_effects(df, tau, 9)
        imp = imputation_event_study(df, "y", transform=False).table.set_index("event_time")["coef"]
        twfe = event_study(df, "y", transform=False).table.set_index("event_time")["coef"]
        err_imp = np.sqrt(np.mean((imp.loc[truth.index] - truth) ** 2))
        err_twfe = np.sqrt(np.mean((twfe.loc[truth.index] - truth) ** 2))
        assert err_imp < err_twfe
        assert err_imp < 0.03

    def test_no_treated_units(self):
        df, _ = staggered_panel(5, n_products=50, n_periods=12)
        df["first_treat"] = np.inf
        with pytest.raises(PanelError):
            event_study(df, "y")
        with pytest.raises(PanelError):
            imputation_event_study(df, "y")
