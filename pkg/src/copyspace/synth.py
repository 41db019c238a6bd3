"""Synthetic marketplaces.

Embeddings come from a low-dimensional latent cluster structure mapped onto
a cap of the unit sphere. Prices solve the Bertrand first-order conditions
under the true demand and cost parameters, and observed shares are the
model shares at those prices, so re-estimating on a generated dataset checks
the estimators against known truth.
"""

import logging
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
import pandas as pd

from copyspace import rng as rngmod
from copyspace.demand import ConsumerDraws, DemandParams, Market, compute_shares
from copyspace.geometry import fit_pca, normalize
from copyspace.supply import CostParams, equilibrium_prices, fixed_costs

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------- embeddings


@dataclass(frozen=True)
class EmbeddingModel:
    """Latent-to-sphere map: ``normalize(center + scale * A u + noise * eps)``."""

    center: np.ndarray  # (d,) unit vector
    basis: np.ndarray  # (d, q) orthonormal columns, orthogonal to center
    cluster_centers: np.ndarray  # (C, q)
    scale: float
    cluster_sd: float
    noise: float

    @classmethod
    def draw(cls, rng, dim=128, latent_dim=6, n_clusters=8, scale=0.12, cluster_sd=0.6, noise=0.004):
        if latent_dim >= dim:
            raise ConfigError("latent dimension must be below the embedding dimension")
        q, _ = np.linalg.qr(rng.standard_normal((dim, latent_dim + 1)))
        center = q[:, 0] * np.sign(q[0, 0])
        basis = q[:, 1:]
        centers = rng.standard_normal((n_clusters, latent_dim))
        return cls(center, basis, centers, scale, cluster_sd, noise)

    @property
    def dim(self):
        return self.center.size

    def latent(self, rng, n, clusters=None):
        if clusters is None:
            clusters = rng.integers(0, self.cluster_centers.shape[0], size=n)
        u = self.cluster_centers[clusters] + self.cluster_sd * rng.standard_normal((n, self.basis.shape[1]))
        return u, clusters

    def embed(self, u, rng):
        raw = self.center[None, :] + self.scale * u @ self.basis.T
        raw = raw + self.noise * rng.standard_normal(raw.shape)
        return normalize(raw)

    def sample(self, rng, n, clusters=None):
        u, c = self.latent(rng, n, clusters)
        return self.embed(u, rng), u, c


# ------------------------------------------------------- simple logit DGP


def logit_iv_dgp(n_markets, n_products, beta_price=-0.15, seed=0, xi_sd=1.0, shifter_sd=1.0, cost_xi_loading=0.5):
    """Plain-logit markets with endogenous Bertrand prices.

    Marginal cost loads on a per-market cost shifter and on ``xi`` (a shared
    shock), so OLS of ``ln(s/s0)`` on price is biased toward zero. Products
    are single-product firms with one structured attribute and two
    embedding coordinates.

    Returns ``(markets, shifter)`` with ``shifter`` aligned to stacked rows.
    """
    rng = rngmod.stream(seed, "logit_iv_dgp")
    params = DemandParams(beta_price=beta_price, beta_struct=np.array([0.3]), beta_img_mean=np.array([1.0, -0.5]), beta_img_sd=np.zeros(2), intercept=-1.0)
    draws = ConsumerDraws.single(2)
    markets, shifter = [], []
    for t in range(n_markets):
        w = shifter_sd * rng.standard_normal()
        xs = rng.uniform(0, 2, size=(n_products, 1))
        xe = 0.5 * rng.standard_normal((n_products, 2))
        xi = xi_sd * rng.standard_normal(n_products)
        mc = 10.0 + 3.0 * w + 1.0 * xs[:, 0] + cost_xi_loading * 3.0 * xi + rng.standard_normal(n_products)
        mc = np.maximum(mc, 0.5)
        m = Market(t, np.arange(n_products), np.arange(n_products), np.zeros(n_products, dtype=int), mc + 5.0, xs, xe, xi, 1.0, draws, mc=mc)
        p = equilibrium_prices(m, params)
        s, _ = compute_shares(m, params, prices=p)
        markets.append(m.replace(prices=p, shares=s))
        shifter.append(np.full(n_products, w))
    return markets, np.concatenate(shifter), params


# ------------------------------------------------------------ RCNL DGP


@dataclass
class DemandDgpConfig:
    n_markets: int = 20
    n_products: int = 200
    pool_size: int = 300
    n_firms: int = 40
    n_nests: int = 6
    k: int = 6
    n_draws: int = 100
    beta_price: float = -0.156
    rho: float = 0.317
    intercept: float = -2.0
    beta_struct: float = 0.2
    beta_img_mean: tuple = (2.0, -1.5, 1.0, 0.5, -0.5, 0.3)
    beta_img_sd: tuple = (4.0, 3.0, 0.0, 0.0, 0.0, 0.0)
    emb_sd: float = 0.15
    xi_sd: float = 0.5
    mc_base: float = 20.0
    mc_shifter: float = 4.0
    mc_xi: float = 2.0
    mc_noise: float = 2.0


def rcnl_dgp(cfg: DemandDgpConfig, seed):
    """Markets drawn from a product pool with RCNL demand and Bertrand prices.

    Each market picks ``n_products`` of the pool, so characteristics of the
    choice set (and hence the differentiation instruments) vary by market.
    Returns ``(markets, shifter, params)``.
    """
    rng = rngmod.stream(seed, "rcnl_dgp")
    k = cfg.k
    params = DemandParams(
        beta_price=cfg.beta_price,
        beta_struct=np.array([cfg.beta_struct]),
        beta_img_mean=np.asarray(cfg.beta_img_mean[:k], dtype=float),
        beta_img_sd=np.asarray(cfg.beta_img_sd[:k], dtype=float),
        rho=cfg.rho,
        intercept=cfg.intercept,
    )
    pool_x = cfg.emb_sd * rng.standard_normal((cfg.pool_size, k))
    pool_struct = rng.uniform(0, 3, size=(cfg.pool_size, 1))
    pool_firm = rng.integers(0, cfg.n_firms, size=cfg.pool_size)
    pool_nest = rng.integers(0, cfg.n_nests, size=cfg.pool_size)
    draws = ConsumerDraws.halton(cfg.n_draws, k, rngmod.substream_seed(seed, "rcnl_draws"))
    markets, shifter = [], []
    for t in range(cfg.n_markets):
        pick = np.sort(rng.choice(cfg.pool_size, size=cfg.n_products, replace=False))
        w = rng.standard_normal()
        xi = cfg.xi_sd * rng.standard_normal(cfg.n_products)
        mc = cfg.mc_base + cfg.mc_shifter * w + pool_struct[pick, 0] + cfg.mc_xi * xi + cfg.mc_noise * rng.standard_normal(cfg.n_products)
        mc = np.maximum(mc, 1.0)
        m = Market(
            t,
            pick,
            pool_firm[pick],
            pool_nest[pick],
            mc + 8.0,
            pool_struct[pick],
            pool_x[pick],
            xi,
            1.0,
            draws,
            mc=mc,
        )
        p = equilibrium_prices(m, params)
        s, _ = compute_shares(m, params, prices=p)
        markets.append(m.replace(prices=p, shares=s))
        shifter.append(np.full(cfg.n_products, w))
    return markets, np.concatenate(shifter), params


# ------------------------------------------------------- cost-slope DGP


@dataclass
class CostSlopeDgp:
    """Entrants whose marginal profit equals the fixed-cost gradient.

    Incumbent clouds differ by period in size, location and spread while
    entrants come from a fixed distribution, so period-level incumbent sums
    shift the distance regressors. With ``endogenous=True`` the slope shock
    is a signed local-density term (incumbents just above minus just below
    the entrant), demeaned within period so period-level instruments stay
    valid.
    """

    n_entrants: int = 2000
    n_periods: int = 400
    k: int = 6
    eta: tuple = (1000.0, 0.2, 0.4, -0.2)
    noise_sd: float = 2.0
    endogenous: bool = False
    nu_loading: float = 0.1
    n_incumbents: tuple = (100, 400)
    incumbent_shift_sd: float = 0.5
    incumbent_sd: tuple = (0.03, 0.4)
    entrant_sd: float = 0.2


def cost_slope_dgp(cfg: CostSlopeDgp, seed, instruments=True):
    """Simulated entrant panel for slope regressions.

    Returns a dict with ``marginal_profit`` (N, K), ``regressors``
    (N, K, 4), ``instruments`` (N, K, L) or None, ``period`` and the true
    ``eta`` (K, 4).
    """
    rng = rngmod.stream(seed, "cost_slope_dgp")
    k = cfg.k
    eta = np.broadcast_to(np.asarray(cfg.eta, dtype=float), (k, 4))
    periods = np.sort(rng.integers(0, cfg.n_periods, size=cfg.n_entrants))
    inc = []
    for _ in range(cfg.n_periods):
        n_t = int(rng.integers(cfg.n_incumbents[0], cfg.n_incumbents[1] + 1))
        m_t = cfg.incumbent_shift_sd * rng.standard_normal(k)
        s_t = rng.uniform(*cfg.incumbent_sd, size=k)
        inc.append(m_t + s_t * rng.standard_normal((n_t, k)))
    sd = np.vstack(inc).std(axis=0, ddof=1)
    x = cfg.entrant_sd * rng.standard_normal((cfg.n_entrants, k))
    n = cfg.n_entrants
    reg = np.zeros((n, k, 4))
    reg[:, :, 0] = 1.0
    asym = np.zeros((n, k))
    ivs = np.zeros((n, k, 4 * k - 1)) if instruments else None
    for t in np.unique(periods):
        rows = np.flatnonzero(periods == t)
        diff = x[rows][:, None, :] - inc[t][None, :, :]
        sgn = np.sign(diff)
        d = np.abs(diff)
        reg[rows, :, 1] = sgn.sum(1)
        reg[rows, :, 2] = (2 * d * sgn).sum(1)
        reg[rows, :, 3] = (3 * d**2 * sgn).sum(1)
        near = d < 0.5 * sd
        asym[rows] = np.sum(near & (diff < 0), axis=1) - np.sum(near & (diff > 0), axis=1)
        if instruments:
            sums = np.concatenate([inc[t].sum(0), (inc[t] ** 2).sum(0), (inc[t] ** 3).sum(0)])
            local = near.sum(1).astype(float)
            for ell in range(k):
                ivs[rows, ell, : 3 * k] = sums
                ivs[rows, ell, 3 * k :] = np.delete(local, ell, axis=1)
    mp = np.einsum("nkp,kp->nk", reg, eta) + cfg.noise_sd * rng.standard_normal((n, k))
    if cfg.endogenous:
        dev = asym - pd.DataFrame(asym).groupby(periods).transform("mean").to_numpy()
        mp = mp + cfg.nu_loading * dev
    return {"marginal_profit": mp, "regressors": reg, "instruments": ivs, "period": periods, "eta": eta, "x": x}


# ------------------------------------------------------ full marketplace

DEFAULT_DEMAND = {
    "beta_price": -0.156,
    "beta_struct": [0.3],
    "beta_img_mean": [4.0, -3.0, 2.0, 1.0, -1.0, 0.5],
    "beta_img_sd": [4.0, 3.0, 0.0, 0.0, 0.0, 0.0],
    "rho": 0.317,
    "intercept": 1.0,
}

DEFAULT_COST = {
    "eta": [[0.0, 60.0, 0.0, 0.0]] * 6,
    "nu_intercept_mean": 0.0,
    "nu_intercept_sd": 500.0,
    "nu_slope_sd": [0.0] * 6,
}


@dataclass
class SyntheticConfig:
    """Everything needed to regenerate a synthetic marketplace bit for bit."""

    seed: int
    n_firms: int = 20
    n_products: int = 150
    n_periods: int = 8
    n_countries: int = 3
    embedding_dim: int = 64
    reduced_dim: int = 6
    demand: dict = field(default_factory=lambda: dict(DEFAULT_DEMAND))
    cost: dict = field(default_factory=lambda: dict(DEFAULT_COST))
    market_sizes: tuple = (200000.0, 100000.0, 50000.0)
    n_draws: int = 50
    n_nests: int = 5
    n_clusters: int = 6
    latent_dim: int = 6
    emb_scale: float = 0.12
    cluster_sd: float = 0.6
    emb_noise: float = 0.001
    initial_share: float = 0.5
    copy_share: float = 0.4
    copy_sd: float = 0.05
    n_location_trials: int = 20
    n_global_trials: int = 0
    global_search_copiers_only: bool = False
    trial_sd: float = 0.15
    xi_sd: float = 0.5
    xi_market_sd: float = 0.2
    mc_base: float = 15.0
    mc_struct: float = 1.0
    mc_shifter: float = 3.0
    mc_xi: float = 1.0
    mc_noise: float = 1.0
    exchange_sd: float = 1.0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.seed is None or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        for name in ("n_firms", "n_products", "n_periods", "n_countries", "embedding_dim", "reduced_dim", "n_draws", "n_nests", "n_clusters", "latent_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        self.market_sizes = tuple(float(m) for m in np.atleast_1d(self.market_sizes))
        if len(self.market_sizes) == 1 and self.n_countries > 1:
            self.market_sizes = self.market_sizes * self.n_countries
        if len(self.market_sizes) != self.n_countries:
            raise ConfigError("market_sizes needs one entry per country")
        if any(m <= 0 for m in self.market_sizes):
            raise ConfigError("market sizes must be positive")
        if self.reduced_dim > self.embedding_dim:
            raise ConfigError("reduced_dim cannot exceed embedding_dim")
        if self.latent_dim >= self.embedding_dim:
            raise ConfigError("latent_dim must be below embedding_dim")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {self.schema_version}")
        if not 0 <= self.n_global_trials <= self.n_location_trials:
            raise ConfigError("n_global_trials must lie in [0, n_location_trials]")
        if not 0.0 <= self.copy_share <= 1.0 or not 0.0 < self.initial_share <= 1.0:
            raise ConfigError("copy_share must lie in [0, 1] and initial_share in (0, 1]")
        p = self.demand_params()
        if p.k != self.reduced_dim:
            raise ConfigError("demand embedding coefficients must have reduced_dim entries")
        if self.cost_params().k != self.reduced_dim:
            raise ConfigError("cost coefficients must have reduced_dim rows")

    def demand_params(self):
        return DemandParams.from_dict(self.demand)

    def cost_params(self):
        return CostParams.from_dict(self.cost)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
        if "seed" not in d:
            raise ConfigError("config needs an explicit seed")
        return cls(**d)


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    params: DemandParams
    cost: CostParams
    reducer: object
    products: pd.DataFrame  # one row per product
    embeddings: np.ndarray  # (N, d) full embeddings, rows aligned with products
    markets: dict  # (country, period) -> Market
    panel: pd.DataFrame  # product x country x period
    entrants: pd.DataFrame  # one row per post-initial entrant
    shifter: dict  # (country, period) -> (J,) cost shifter aligned with the market

    def market_list(self):
        keys = sorted(self.markets)
        return [self.markets[k] for k in keys], np.concatenate([self.shifter[k] for k in keys])

    def snapshot(self, period=None):
        """Country markets of one period (default: the last)."""
        period = self.config.n_periods - 1 if period is None else period
        return [self.markets[(c, period)] for c in range(self.config.n_countries)]


def _entry_periods(cfg, rng):
    n = cfg.n_products
    n0 = max(1, int(round(cfg.initial_share * n))) if cfg.n_periods > 1 else n
    later = np.sort(rng.integers(1, cfg.n_periods, size=n - n0)) if cfg.n_periods > 1 else np.zeros(0, dtype=int)
    return np.concatenate([np.zeros(n0, dtype=int), later])


def _period_markets(cfg, t, present, state, params, draws, rng):
    markets, shifters = {}, {}
    for c in range(cfg.n_countries):
        idx = np.flatnonzero(present)
        xi = state["xi"][idx] + cfg.xi_market_sd * rng.standard_normal(idx.size)
        rate = state["rates"][:, t]
        shift = rate[state["home"][state["firm"][idx]]] - rate[c]
        mc = cfg.mc_base + cfg.mc_struct * state["x_struct"][idx, 0] + cfg.mc_shifter * shift + cfg.mc_xi * state["xi"][idx] + cfg.mc_noise * rng.standard_normal(idx.size)
        mc = np.maximum(mc, 1.0)
        m = Market(
            market_id=f"c{c}_t{t}",
            product_ids=idx.copy(),
            firm_ids=state["firm"][idx],
            nest_ids=state["nest"][idx],
            prices=mc + 5.0,
            x_struct=state["x_struct"][idx],
            x_emb=state["x_red"][idx],
            xi=xi,
            market_size=cfg.market_sizes[c],
            draws=draws,
            mc=mc,
            x_full=state["x_full"][idx],
            entry_period=state["entry"][idx],
            country=c,
            period=t,
        )
        p = equilibrium_prices(m, params)
        s, _ = compute_shares(m, params, prices=p)
        markets[(c, t)] = m.replace(prices=p, shares=s)
        shifters[(c, t)] = shift
    return markets, shifters


def _place_entrant(cfg, j, state, prev, params, cost, model, reducer, rng):
    """Choose entrant ``j``'s location among trial points around a seed."""
    from copyspace.policy import _candidate_delta, candidate_profits

    present = np.flatnonzero(state["placed"])
    m0 = prev[(0, state["t"] - 1)]
    copier = bool(rng.random() < cfg.copy_share and present.size)
    if copier:
        popular = m0.shares / m0.shares.sum()
        target = m0.product_ids[rng.choice(m0.n_products, p=popular)]
        seed_u = state["u"][target] + cfg.copy_sd * rng.standard_normal(cfg.latent_dim)
        nest = state["nest"][target]
        cluster = state["cluster"][target]
    else:
        u, cl = model.latent(rng, 1)
        seed_u, cluster = u[0], int(cl[0])
        nest = cluster % cfg.n_nests
    n_global = cfg.n_global_trials if (copier or not cfg.global_search_copiers_only) else 0
    anchors = [np.repeat(seed_u[None, :], cfg.n_location_trials - n_global, axis=0)]
    if n_global and present.size:
        anchors.append(state["u"][rng.choice(present, size=n_global)])
    trials = np.vstack([seed_u] + [a + cfg.trial_sd * rng.standard_normal(a.shape) for a in anchors])
    full = model.embed(trials, rng)
    red = reducer.transform(full)
    firm = state["firm"][j]
    xs = state["x_struct"][j]
    value = np.zeros(trials.shape[0])
    for c in range(cfg.n_countries):
        m = prev[(c, state["t"] - 1)]
        own = m.firm_ids == firm
        mc = cfg.mc_base + cfg.mc_struct * xs[0]
        markup = float(np.mean(m.prices - m.mc))
        delta = _candidate_delta(params, mc + markup, xs, 0.0, red)
        gain = candidate_profits(m, params, m.prices, firm, red, delta, nest, markup)
        base = float(np.sum(((m.prices - m.mc) * m.shares * m.market_size)[own]))
        value += gain - base
    nu = cost.draw_nu(rng)
    fc = fixed_costs(red, state["x_red"][present], cost, nu)
    best = int(np.argmax(value - fc))
    state["u"][j] = trials[best]
    state["x_full"][j] = full[best]
    state["x_red"][j] = red[best]
    state["nest"][j] = nest
    state["cluster"][j] = cluster
    return {"product_id": j, "firm_id": firm, "entry_period": state["t"], "copier": copier, "fixed_cost": float(fc[best]), "gross_profit": float(value[best]), "nu0": float(nu[0]), **{f"x{l}": float(red[best, l]) for l in range(red.shape[1])}}


def generate_market(config: SyntheticConfig):
    """Simulate a marketplace: products, entry, prices, shares and a panel.

    Incumbents (entry period 0) sit at draws from the latent cluster model.
    Each later entrant starts from a seed location (a perturbed copy of a
    share-weighted popular product with probability ``copy_share``, else a
    fresh draw) and picks, among trial points around it, the one with the
    highest expected portfolio profit net of its true fixed cost, at the
    previous period's prices. Every (country, period) market is then solved
    for Bertrand prices and model shares.
    """
    from copyspace.geometry import ring_count_matrix
    from copyspace.panel import first_treatment_periods

    cfg = config
    params = cfg.demand_params()
    cost = cfg.cost_params()
    rng_emb = rngmod.stream(cfg.seed, "synthetic_embeddings")
    rng_prod = rngmod.stream(cfg.seed, "synthetic_products")
    rng_mkt = rngmod.stream(cfg.seed, "synthetic_markets")
    rng_entry = rngmod.stream(cfg.seed, "synthetic_entry")
    model = EmbeddingModel.draw(rng_emb, cfg.embedding_dim, cfg.latent_dim, cfg.n_clusters, cfg.emb_scale, cfg.cluster_sd, cfg.emb_noise)
    corpus = model.sample(rng_emb, max(500, 4 * cfg.embedding_dim))[0]
    reducer = fit_pca(corpus, cfg.reduced_dim)
    draws = ConsumerDraws.halton(cfg.n_draws, cfg.reduced_dim, rngmod.substream_seed(cfg.seed, "synthetic_draws"))

    n = cfg.n_products
    entry = _entry_periods(cfg, rng_prod)
    u, clusters = model.latent(rng_prod, n)
    state = {
        "entry": entry,
        "firm": rng_prod.integers(0, cfg.n_firms, size=n),
        "home": rng_prod.integers(0, cfg.n_countries, size=cfg.n_firms),
        "x_struct": rng_prod.uniform(0.0, 2.0, size=(n, 1)),
        "xi": cfg.xi_sd * rng_prod.standard_normal(n),
        "rates": cfg.exchange_sd * np.cumsum(rng_prod.standard_normal((cfg.n_countries, cfg.n_periods)), axis=1) / np.sqrt(cfg.n_periods),
        "u": u,
        "cluster": clusters,
        "nest": clusters % cfg.n_nests,
        "x_full": np.zeros((n, cfg.embedding_dim)),
        "x_red": np.zeros((n, cfg.reduced_dim)),
        "placed": entry == 0,
    }
    init = entry == 0
    state["x_full"][init] = model.embed(u[init], rng_prod)
    state["x_red"][init] = reducer.transform(state["x_full"][init])

    markets, shifters, entrant_rows = {}, {}, []
    for t in range(cfg.n_periods):
        state["t"] = t
        if t > 0:
            for j in np.flatnonzero(entry == t):
                entrant_rows.append(_place_entrant(cfg, j, state, markets, params, cost, model, reducer, rng_entry))
                state["placed"][j] = True
        mk, sh = _period_markets(cfg, t, entry <= t, state, params, draws, rng_mkt)
        markets.update(mk)
        shifters.update(sh)

    products = pd.DataFrame(
        {
            "product_id": np.arange(n),
            "firm_id": state["firm"],
            "nest_id": state["nest"],
            "entry_period": entry,
            "x_struct": state["x_struct"][:, 0],
            "xi": state["xi"],
            "home_country": state["home"][state["firm"]],
        }
    )
    for l in range(cfg.reduced_dim):
        products[f"x{l}"] = state["x_red"][:, l]
    panel = _build_panel(cfg, markets, shifters, state, ring_count_matrix, first_treatment_periods)
    entrants = pd.DataFrame(entrant_rows)
    return SyntheticDataset(cfg, params, cost, reducer, products, state["x_full"], markets, panel, entrants, shifters)


PANEL_RINGS = ((0.0, 0.1), (0.1, 0.2), (0.2, 0.3))


def _build_panel(cfg, markets, shifters, state, ring_count_matrix, first_treatment_periods):
    first = first_treatment_periods(np.arange(cfg.n_products), state["entry"], state["x_full"], k=5)
    frames = []
    for (c, t), m in sorted(markets.items()):
        rings = ring_count_matrix(m.x_full, PANEL_RINGS)
        q = m.shares * m.market_size
        df = pd.DataFrame(
            {
                "product_id": m.product_ids,
                "firm_id": m.firm_ids,
                "license": m.nest_ids,
                "country": c,
                "period": t,
                "entry_period": m.entry_period,
                "price": m.prices,
                "list_price": m.prices,
                "share": m.shares,
                "quantity": q,
                "revenue": q * m.prices,
                "mc": m.mc,
                "xi": m.xi,
                "cost_shifter": shifters[(c, t)],
                "first_treat": first[m.product_ids],
            }
        )
        for r, (lo, hi) in enumerate(PANEL_RINGS):
            df[f"ring_{lo:g}_{hi:g}"] = rings[:, r]
        frames.append(df)
    return pd.concat(frames, ignore_index=True)
