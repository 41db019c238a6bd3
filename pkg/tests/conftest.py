import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from copyspace.demand import ConsumerDraws, DemandParams, Market

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_params(rng, k=6, rho=0.3, n_struct=1, sd_scale=1.0, beta_price=-0.2, intercept=-2.0):
    return DemandParams(
        beta_price=beta_price,
        beta_struct=rng.normal(size=n_struct) * 0.2,
        beta_img_mean=rng.normal(size=k),
        beta_img_sd=np.abs(rng.normal(size=k)) * sd_scale,
        rho=rho,
        intercept=intercept,
    )


def random_market(rng, j=12, k=6, n_nests=3, n_firms=4, n_draws=64, market_size=1000.0, draws=None, price_range=(5.0, 20.0)):
    draws = ConsumerDraws.halton(n_draws, k, int(rng.integers(0, 2**31))) if draws is None else draws
    return Market(
        market_id=0,
        product_ids=np.arange(j),
        firm_ids=rng.integers(0, n_firms, j),
        nest_ids=rng.integers(0, n_nests, j),
        prices=rng.uniform(*price_range, j),
        x_struct=rng.uniform(0, 2, (j, 1)),
        x_emb=0.3 * rng.normal(size=(j, k)),
        xi=0.5 * rng.normal(size=j),
        market_size=market_size,
        draws=draws,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda t: t[0]):
            terminalreporter.write_line(line)
