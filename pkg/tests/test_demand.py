import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_market, random_params
from copyspace.demand import (
    ConsumerDraws,
    DemandError,
    DemandParams,
    InversionError,
    Market,
    aggregate_div_by_distance,
    compute_shares,
    consumer_surplus,
    diversion_ratios,
    diversion_to_outside,
    diversion_to_outside_ratio,
    invert_shares,
    long_run_diversion,
    mean_utilities,
    own_shape_elasticities,
    price_elasticities,
    recover_xi,
    share_derivative_rho,
    share_derivatives_sd,
    share_jacobian_delta,
    share_jacobian_prices,
    share_jacobian_shape,
)


def loop_shares(market, params):
    """Explicit double sum over draws and nests."""
    lam = 1 - params.rho
    j = market.n_products
    out = np.zeros(j)
    for zi, wi in zip(market.draws.z, market.draws.weights):
        v = np.empty(j)
        for k in range(j):
            v[k] = (
                params.intercept
                + params.beta_price * market.prices[k]
                + market.x_struct[k] @ params.beta_struct
                + market.x_emb[k] @ params.beta_img_mean
                + market.xi[k]
                + sum(market.x_emb[k, l] * params.beta_img_sd[l] * zi[l] for l in range(zi.size))
            )
        nests = sorted(set(market.nest_ids.tolist()))
        dsum = {g: sum(np.exp(v[k] / lam) for k in range(j) if market.nest_ids[k] == g) for g in nests}
        denom = 1 + sum(dsum[g] ** lam for g in nests)
        for k in range(j):
            g = market.nest_ids[k]
            out[k] += wi * np.exp(v[k] / lam) / dsum[g] * dsum[g] ** lam / denom
    return out


def fd_jacobian(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.column_stack(cols)


class TestShares:
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.9))
    def test_double_sum_oracle(self, seed, rho):
        rng = np.random.default_rng(seed)
        m = random_market(rng, j=6, k=3, n_draws=7)
        p = random_params(rng, k=3, rho=rho)
        s, s0 = compute_shares(m, p)
        np.testing.assert_allclose(s, loop_shares(m, p), rtol=1e-10, atol=1e-300)
        assert s0 == pytest.approx(1 - s.sum(), abs=1e-12)
        assert np.all(s > 0) and s0 > 0

    def test_plain_logit_closed_form(self, rng):
        m = random_market(rng, j=8, k=3, draws=ConsumerDraws.single(3))
        p = random_params(rng, k=3, rho=0.0, sd_scale=0.0)
        delta = mean_utilities(m, p)
        s, s0 = compute_shares(m, p)
        np.testing.assert_allclose(s, np.exp(delta) / (1 + np.exp(delta).sum()), rtol=1e-13)

    def test_single_nest_closed_form(self, rng):
        m = random_market(rng, j=5, k=2, n_nests=1, draws=ConsumerDraws.single(2))
        p = random_params(rng, k=2, rho=0.6, sd_scale=0.0)
        d = mean_utilities(m, p)
        lam = 0.4
        dsum = np.exp(d / lam).sum()
        np.testing.assert_allclose(compute_shares(m, p)[0], np.exp(d / lam) / dsum * dsum**lam / (1 + dsum**lam), rtol=1e-12)

    def test_large_utilities_stable(self, rng):
        m = random_market(rng, j=5, k=2)
        p = random_params(rng, k=2, rho=0.5, intercept=700.0)
        s, s0 = compute_shares(m, p)
        assert np.all(np.isfinite(s)) and s.sum() == pytest.approx(1.0, abs=1e-12)
        p = p.replace(intercept=-800.0)
        s, s0 = compute_shares(m, p)
        assert np.all(np.isfinite(s)) and s0 == pytest.approx(1.0)

    def test_rho_near_one_limit(self, rng):
        m = random_market(rng, j=6, k=2, n_nests=2, draws=ConsumerDraws.single(2))
        p = random_params(rng, k=2, rho=0.999, sd_scale=0.0)
        d = mean_utilities(m, p)
        s, _ = compute_shares(m, p)
        for g in np.unique(m.nest_ids):
            cols = np.flatnonzero(m.nest_ids == g)
            top = cols[np.argmax(d[cols])]
            assert s[top] / s[cols].sum() > 0.99

    def test_empty_market(self, rng):
        m = random_market(rng, j=3, k=2).subset(np.zeros(3, bool))
        assert compute_shares(m, random_params(rng, k=2))[1] == 1.0
        assert consumer_surplus(m, random_params(rng, k=2)) == 0.0

    def test_invalid_inputs(self, rng):
        with pytest.raises(DemandError):
            DemandParams(-1, [0], [0], [0], rho=1.0)
        with pytest.raises(DemandError):
            DemandParams(-1, [0], [0], [-1])
        m = random_market(rng, j=3, k=2)
        with pytest.raises(DemandError):
            m.replace(prices=np.array([-1.0, 1, 1]))
        with pytest.raises(DemandError):
            m.replace(product_ids=np.array([1, 1, 2]))


class TestInversion:
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.8))
    def test_round_trip(self, seed, rho):
        rng = np.random.default_rng(seed)
        m = random_market(rng, j=10, k=3, n_draws=40)
        p = random_params(rng, k=3, rho=rho)
        s, _ = compute_shares(m, p)
        delta = invert_shares(s, m, p, tol=1e-12, newton=True)
        np.testing.assert_allclose(delta, mean_utilities(m, p), atol=1e-8)
        np.testing.assert_allclose(recover_xi(m, p, delta), m.xi, atol=1e-8)

    def test_contraction_only(self, rng):
        m = random_market(rng, j=10, k=3)
        p = random_params(rng, k=3, rho=0.3)
        s, _ = compute_shares(m, p)
        delta = invert_shares(s, m, p, tol=1e-12)
        np.testing.assert_allclose(compute_shares(m, p, delta=delta)[0], s, rtol=1e-11)

    def test_failure_reports_residual(self, rng):
        m = random_market(rng, j=10, k=3)
        p = random_params(rng, k=3, rho=0.3)
        s, _ = compute_shares(m, p)
        with pytest.raises(InversionError) as err:
            invert_shares(s, m, p, delta0=np.zeros(10) + 30, max_iter=2)
        assert err.value.residual > 0
        with pytest.raises(DemandError):
            invert_shares(np.full(10, 0.2), m, p)


class TestDerivatives:
    @pytest.mark.parametrize("rho", [0.0, 0.4])
    def test_price_jacobian_fd(self, rng, rho):
        m = random_market(rng, j=7, k=3)
        p = random_params(rng, k=3, rho=rho)
        jac = share_jacobian_prices(m, p)
        fd = fd_jacobian(lambda x: compute_shares(m, p, prices=x)[0], m.prices)
        np.testing.assert_allclose(jac, fd, atol=1e-9, rtol=1e-6)

    def test_delta_jacobian_fd(self, rng):
        m = random_market(rng, j=7, k=3)
        p = random_params(rng, k=3, rho=0.5)
        d = mean_utilities(m, p)
        fd = fd_jacobian(lambda x: compute_shares(m, p, delta=x)[0], d)
        np.testing.assert_allclose(share_jacobian_delta(m, p), fd, atol=1e-9, rtol=1e-6)

    def test_shape_jacobian_fd(self, rng):
        m = random_market(rng, j=6, k=3)
        p = random_params(rng, k=3, rho=0.3)

        def f(col):
            x = m.x_emb.copy()
            x[:, 1] = col
            return compute_shares(m.replace(x_emb=x), p)[0]

        np.testing.assert_allclose(share_jacobian_shape(m, p, 1), fd_jacobian(f, m.x_emb[:, 1]), atol=1e-9, rtol=1e-6)

    def test_sd_and_rho_derivatives_fd(self, rng):
        m = random_market(rng, j=6, k=3)
        p = random_params(rng, k=3, rho=0.35)
        d = mean_utilities(m, p)

        def f_sd(sd):
            return compute_shares(m, p.replace(beta_img_sd=sd), delta=d)[0]

        np.testing.assert_allclose(share_derivatives_sd(m, p, delta=d), fd_jacobian(f_sd, p.beta_img_sd), atol=1e-9, rtol=1e-6)

        def f_rho(r):
            return compute_shares(m, p.replace(rho=float(r[0])), delta=d)[0]

        fd = fd_jacobian(f_rho, [p.rho])[:, 0]
        np.testing.assert_allclose(share_derivative_rho(m, p, delta=d), fd, atol=1e-9, rtol=1e-6)

    def test_logit_elasticities_closed_form(self, rng):
        m = random_market(rng, j=6, k=2, draws=ConsumerDraws.single(2))
        p = random_params(rng, k=2, rho=0.0, sd_scale=0.0)
        s, _ = compute_shares(m, p)
        e = price_elasticities(m, p)
        a = p.beta_price
        np.testing.assert_allclose(np.diag(e), a * m.prices * (1 - s), rtol=1e-12)
        off = ~np.eye(6, dtype=bool)
        np.testing.assert_allclose(e[off], (-a * m.prices[None, :] * s[None, :] * np.ones((6, 1)))[off], rtol=1e-12)
        el = own_shape_elasticities(m, p, 0)
        np.testing.assert_allclose(el, p.beta_img_mean[0] * m.x_emb[:, 0] * (1 - s), rtol=1e-12)

    def test_nested_logit_elasticities_closed_form(self, rng):
        m = random_market(rng, j=6, k=2, draws=ConsumerDraws.single(2))
        p = random_params(rng, k=2, rho=0.4, sd_scale=0.0)
        s, _ = compute_shares(m, p)
        e = price_elasticities(m, p)
        a, rho = p.beta_price, p.rho
        for j in range(6):
            sg = s[m.nest_ids == m.nest_ids[j]].sum()
            sjg = s[j] / sg
            own = a * m.prices[j] / (1 - rho) * (1 - rho * sjg - (1 - rho) * s[j])
            assert e[j, j] == pytest.approx(own, rel=1e-12)
            for k in range(6):
                if k == j:
                    continue
                same = m.nest_ids[k] == m.nest_ids[j]
                cross = -a * m.prices[k] * (s[k] + rho / (1 - rho) * (s[k] / sg) * same)
                assert e[j, k] == pytest.approx(cross, rel=1e-12)


class TestDiversion:
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.8))
    def test_adding_up(self, seed, rho):
        rng = np.random.default_rng(seed)
        m = random_market(rng, j=8, k=3, n_draws=30)
        p = random_params(rng, k=3, rho=rho)
        div = diversion_ratios(m, p)
        total = div.sum(axis=1) + diversion_to_outside_ratio(m, p)
        np.testing.assert_allclose(total, 1.0, atol=1e-10)
        assert np.all(np.diag(div) == 0)
        assert np.all(div[~np.eye(8, dtype=bool)] > 0)
        np.testing.assert_allclose(diversion_ratios(m, p, paper_sign=True), -div)

    def test_logit_diversion_is_share_ratio(self, rng):
        m = random_market(rng, j=5, k=2, draws=ConsumerDraws.single(2))
        p = random_params(rng, k=2, sd_scale=0.0, rho=0.0)
        s, _ = compute_shares(m, p)
        div = diversion_ratios(m, p)
        for j in range(5):
            for k in range(5):
                if j != k:
                    assert div[j, k] == pytest.approx(s[k] / (1 - s[j]), rel=1e-12)

    def test_outside_table(self, rng):
        m = random_market(rng, j=12, k=3)
        m = m.replace(x_full=np.abs(rng.normal(size=(12, 5))))
        tab = diversion_to_outside(m, random_params(rng, k=3))
        assert list(tab.columns) == ["product_id", "div_outside", "dist_nearest_1", "dist_nearest_5", "dist_nearest_10"]
        assert np.all(tab.dist_nearest_1 <= tab.dist_nearest_5)

    def test_long_run_diversion(self, rng):
        m = random_market(rng, j=6, k=2)
        p = random_params(rng, k=2, rho=0.3)
        lr = long_run_diversion(m, p, m.product_ids[2])
        assert np.isnan(lr[2])
        s, s0 = compute_shares(m, p)
        s0_minus = compute_shares(m.without(m.product_ids[2]), p)[1]
        assert np.nansum(lr) + (s0_minus - s0) / s[2] == pytest.approx(1.0, abs=1e-12)

    def test_aggregate_curve(self, rng):
        markets = [random_market(rng, j=10, k=2, n_draws=20) for _ in range(3)]
        markets = [m.replace(x_emb=rng.uniform(0, 0.5, (10, 2))) for m in markets]
        p = random_params(rng, k=2, rho=0.4)
        curve = aggregate_div_by_distance(markets, p, bin_width=0.1, d_max=1.0)
        assert list(curve.columns) == ["d", "div", "n_markets"]
        assert np.all(curve["div"] > 0)
        assert curve.n_markets.max() <= 3


class TestConsumerSurplus:
    def test_logit_closed_form(self, rng):
        m = random_market(rng, j=5, k=2, draws=ConsumerDraws.single(2))
        p = random_params(rng, k=2, rho=0.0, sd_scale=0.0)
        d = mean_utilities(m, p)
        cs = np.log1p(np.exp(d).sum()) / -p.beta_price
        assert consumer_surplus(m, p) == pytest.approx(cs, rel=1e-13)
        assert consumer_surplus(m, p, mode="paper_literal") == pytest.approx(cs, rel=1e-13)

    def test_monotone_in_products_and_prices(self, rng):
        m = random_market(rng, j=8, k=3)
        p = random_params(rng, k=3, rho=0.4)
        base = consumer_surplus(m, p)
        assert consumer_surplus(m.without(m.product_ids[0]), p) < base
        assert consumer_surplus(m, p, prices=m.prices * 1.1) < base

    def test_price_derivative_is_minus_share(self, rng):
        m = random_market(rng, j=6, k=3)
        p = random_params(rng, k=3, rho=0.4)
        s, _ = compute_shares(m, p)
        fd = fd_jacobian(lambda x: np.array([consumer_surplus(m, p, prices=x)]), m.prices)[0]
        np.testing.assert_allclose(fd, -s, rtol=1e-6)

    def test_errors(self, rng):
        m = random_market(rng, j=3, k=2)
        with pytest.raises(DemandError):
            consumer_surplus(m, random_params(rng, k=2, beta_price=0.1))
        with pytest.raises(DemandError):
            consumer_surplus(m, random_params(rng, k=2), mode="bad")


def test_market_editing(rng):
    m = random_market(rng, j=4, k=2)
    prod = m.product(1)
    m2 = m.without(prod.id).append(prod)
    assert m2.n_products == 4 and m2.index_of(prod.id) == 3
    with pytest.raises(KeyError):
        m.index_of(999)
    d = ConsumerDraws.halton(16, 3, 1)
    np.testing.assert_array_equal(d.z, ConsumerDraws.halton(16, 3, 1).z)
    with pytest.raises(DemandError):
        ConsumerDraws(np.zeros((2, 1)), np.array([0.5, 0.6]))
    assert isinstance(m, Market)
