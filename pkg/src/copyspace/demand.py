"""Random-coefficient nested-logit demand.

Utility of consumer ``i`` for product ``j``::

    V_ij = delta_j + sum_l x_jl * sd_l * z_il
    delta_j = b_price p_j + b_struct . x_struct_j + b_img . x_emb_j + xi_j + intercept

Products are grouped in nests with nesting parameter ``rho``; the outside
option has utility 0. Every log-sum is evaluated with max subtraction, so the
kernels are safe for utilities far from zero.
"""

from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from scipy.stats import norm, qmc

from copyspace.geometry import pairwise_distances


class DemandError(ValueError):
    pass


class InversionError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (last sup-norm residual {residual:.3e})")
        self.residual = residual


def _vec(x):
    return np.atleast_1d(np.asarray(x, dtype=float)).copy()


@dataclass(frozen=True)
class DemandParams:
    beta_price: float
    beta_struct: np.ndarray
    beta_img_mean: np.ndarray
    beta_img_sd: np.ndarray
    rho: float = 0.0
    intercept: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "beta_struct", _vec(self.beta_struct))
        object.__setattr__(self, "beta_img_mean", _vec(self.beta_img_mean))
        object.__setattr__(self, "beta_img_sd", _vec(self.beta_img_sd))
        if not 0.0 <= self.rho < 1.0:
            raise DemandError(f"rho must lie in [0, 1), got {self.rho}")
        if np.any(self.beta_img_sd < 0):
            raise DemandError("beta_img_sd must be nonnegative")
        if self.beta_img_mean.shape != self.beta_img_sd.shape:
            raise DemandError("beta_img_mean and beta_img_sd must have the same length")

    @property
    def k(self):
        return self.beta_img_mean.size

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {
            "beta_price": float(self.beta_price),
            "beta_struct": self.beta_struct.tolist(),
            "beta_img_mean": self.beta_img_mean.tolist(),
            "beta_img_sd": self.beta_img_sd.tolist(),
            "rho": float(self.rho),
            "intercept": float(self.intercept),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass(frozen=True)
class ConsumerDraws:
    """Standard-normal taste draws with quadrature weights."""

    z: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (z.shape[0],):
            raise DemandError("one weight per draw is required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DemandError("weights must be nonnegative and sum to 1")
        z.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "weights", w)

    @property
    def n_draws(self):
        return self.z.shape[0]

    @classmethod
    def halton(cls, n_draws, k, seed):
        """Scrambled Halton points pushed through the normal inverse CDF."""
        u = qmc.Halton(d=k, scramble=True, seed=seed).random(n_draws)
        u = np.clip(u, 1e-12, 1 - 1e-12)
        return cls(norm.ppf(u), np.full(n_draws, 1.0 / n_draws))

    @classmethod
    def normal(cls, n_draws, k, seed):
        z = np.random.default_rng(seed).standard_normal((n_draws, k))
        return cls(z, np.full(n_draws, 1.0 / n_draws))

    @classmethod
    def single(cls, k):
        """One draw at zero: the model collapses to fixed coefficients."""
        return cls(np.zeros((1, k)), np.ones(1))


@dataclass(frozen=True)
class Product:
    id: object
    firm_id: object
    nest_id: object
    x_struct: np.ndarray
    x_emb: np.ndarray
    price: float
    xi: float = 0.0
    mc: float = np.nan
    x_full: Optional[np.ndarray] = None


_ROW_FIELDS = ("product_ids", "firm_ids", "nest_ids", "prices", "x_struct", "x_emb", "xi", "mc", "x_full", "shares", "entry_period")


@dataclass(frozen=True)
class Market:
    """One (country, period) choice set.

    Row-aligned arrays describe the products; ``draws`` is shared read-only
    across markets of a run so counterfactuals reuse the same consumers.
    """

    market_id: object
    product_ids: np.ndarray
    firm_ids: np.ndarray
    nest_ids: np.ndarray
    prices: np.ndarray
    x_struct: np.ndarray
    x_emb: np.ndarray
    xi: np.ndarray
    market_size: float
    draws: ConsumerDraws
    mc: Optional[np.ndarray] = None
    x_full: Optional[np.ndarray] = None
    shares: Optional[np.ndarray] = None
    entry_period: Optional[np.ndarray] = None
    country: object = None
    period: object = None

    def __post_init__(self):
        j = len(np.asarray(self.product_ids))
        for name in _ROW_FIELDS:
            val = getattr(self, name)
            if val is None:
                continue
            arr = np.asarray(val)
            if name in ("x_struct", "x_emb", "x_full"):
                arr = np.asarray(val, dtype=float)
                if arr.ndim == 1:
                    arr = arr.reshape(j, -1) if j else arr.reshape(0, 0)
            elif name in ("prices", "xi", "mc", "shares"):
                arr = np.asarray(val, dtype=float).reshape(j)
            if arr.shape[0] != j:
                raise DemandError(f"{name} has {arr.shape[0]} rows, expected {j}")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if j and len(np.unique(self.product_ids)) != j:
            raise DemandError("product ids must be unique within a market")
        if self.market_size <= 0:
            raise DemandError("market size must be positive")
        if np.any(self.prices < 0):
            raise DemandError("prices must be nonnegative")

    @property
    def n_products(self):
        return len(self.product_ids)

    def replace(self, **changes):
        return replace(self, **changes)

    def index_of(self, product_id):
        hits = np.flatnonzero(self.product_ids == product_id)
        if hits.size == 0:
            raise KeyError(f"product {product_id!r} not in market {self.market_id!r}")
        return int(hits[0])

    def subset(self, keep):
        """Market restricted to a boolean mask or index array."""
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        changes = {}
        for name in _ROW_FIELDS:
            val = getattr(self, name)
            if val is not None:
                changes[name] = val[keep]
        return replace(self, **changes)

    def without(self, product_ids):
        drop = np.isin(self.product_ids, np.atleast_1d(np.asarray(product_ids, dtype=self.product_ids.dtype)))
        return self.subset(~drop)

    def append(self, product: Product, entry_period=None):
        """Market with one more product row."""
        changes = {
            "product_ids": np.append(self.product_ids, product.id),
            "firm_ids": np.append(self.firm_ids, product.firm_id),
            "nest_ids": np.append(self.nest_ids, product.nest_id),
            "prices": np.append(self.prices, product.price),
            "x_struct": np.vstack([self.x_struct, np.reshape(product.x_struct, (1, -1))]),
            "x_emb": np.vstack([self.x_emb, np.reshape(product.x_emb, (1, -1))]),
            "xi": np.append(self.xi, product.xi),
        }
        if self.mc is not None:
            changes["mc"] = np.append(self.mc, product.mc)
        if self.x_full is not None:
            if product.x_full is None:
                raise DemandError("market stores full embeddings; product has none")
            changes["x_full"] = np.vstack([self.x_full, np.reshape(product.x_full, (1, -1))])
        if self.shares is not None:
            changes["shares"] = np.append(self.shares, np.nan)
        if self.entry_period is not None:
            changes["entry_period"] = np.append(self.entry_period, entry_period)
        return replace(self, **changes)

    def product(self, i):
        return Product(
            id=self.product_ids[i],
            firm_id=self.firm_ids[i],
            nest_id=self.nest_ids[i],
            x_struct=self.x_struct[i],
            x_emb=self.x_emb[i],
            price=float(self.prices[i]),
            xi=float(self.xi[i]),
            mc=float(self.mc[i]) if self.mc is not None else np.nan,
            x_full=None if self.x_full is None else self.x_full[i],
        )


# ------------------------------------------------------------ core kernel


def mean_utility(product: Product, params: DemandParams):
    """Non-random part of utility for a single product."""
    return float(
        params.intercept
        + params.beta_price * product.price
        + np.dot(params.beta_struct, np.atleast_1d(product.x_struct))
        + np.dot(params.beta_img_mean, np.atleast_1d(product.x_emb))
        + product.xi
    )


def mean_utilities(market: Market, params: DemandParams, prices=None, xi=None):
    p = market.prices if prices is None else np.asarray(prices, dtype=float)
    xi = market.xi if xi is None else np.asarray(xi, dtype=float)
    return linear_utilities(market, params, prices=p) + xi


def linear_utilities(market: Market, params: DemandParams, prices=None):
    """Mean utility without the demand shock."""
    p = market.prices if prices is None else np.asarray(prices, dtype=float)
    return (
        params.intercept
        + params.beta_price * p
        + market.x_struct @ params.beta_struct
        + market.x_emb @ params.beta_img_mean
    )


def taste_deviations(market: Market, params: DemandParams):
    """(R, J) random part of utility, ``sum_l x_jl sd_l z_il``."""
    return market.draws.z @ (market.x_emb * params.beta_img_sd).T


class DrawProbs(NamedTuple):
    s: np.ndarray  # (R, J) choice probabilities
    s_cond: np.ndarray  # (R, J) within-nest probabilities
    s0: np.ndarray  # (R,) outside option
    log_d: np.ndarray  # (R, G) log of within-nest sums of exp(V / (1 - rho))
    inclusive: np.ndarray  # (R, G) inclusive values
    log_denom: np.ndarray  # (R,) log(1 + sum_g exp I_g)
    codes: np.ndarray  # (J,) nest index of each product
    v: np.ndarray  # (R, J) utilities


def nest_codes(nest_ids):
    uniq, codes = np.unique(np.asarray(nest_ids), return_inverse=True)
    return codes.reshape(-1), len(uniq)


def draw_probabilities(v, codes, n_nests, rho):
    """Per-draw nested-logit probabilities from an (R, J) utility matrix."""
    lam = 1.0 - rho
    r = v.shape[0]
    u = v / lam
    log_d = np.full((r, n_nests), -np.inf)
    for g in range(n_nests):
        cols = codes == g
        if np.any(cols):
            log_d[:, g] = logsumexp(u[:, cols], axis=1)
    inclusive = lam * log_d
    log_denom = np.logaddexp(0.0, logsumexp(inclusive, axis=1)) if n_nests else np.zeros(r)
    log_cond = u - log_d[:, codes]
    log_s = log_cond + inclusive[:, codes] - log_denom[:, None]
    return DrawProbs(np.exp(log_s), np.exp(log_cond), np.exp(-log_denom), log_d, inclusive, log_denom, codes, v)


def market_probabilities(market: Market, params: DemandParams, delta=None, prices=None):
    if delta is None:
        delta = mean_utilities(market, params, prices=prices)
    v = np.asarray(delta, dtype=float)[None, :] + taste_deviations(market, params)
    codes, g = nest_codes(market.nest_ids)
    return draw_probabilities(v, codes, g, params.rho)


def compute_shares(market: Market, params: DemandParams, delta=None, prices=None):
    """Market shares and the outside share, averaged over consumer draws."""
    if market.n_products == 0:
        return np.zeros(0), 1.0
    w = market.draws.weights
    probs = market_probabilities(market, params, delta=delta, prices=prices)
    return w @ probs.s, float(w @ probs.s0)


# ---------------------------------------------------------------- inversion


def invert_shares(observed, market: Market, params: DemandParams, delta0=None, tol=1e-12, max_iter=5000, newton=False):
    """Mean utilities that reproduce ``observed`` shares.

    Damped contraction ``delta += (1 - rho) (log s_obs - log s(delta))``,
    stopped when the sup norm of the log-share residual drops below ``tol``.
    With ``newton=True`` the iterate is polished by Newton steps once the
    residual is below 1e-6.
    """
    s_obs = np.asarray(observed, dtype=float)
    if np.any(s_obs <= 0) or s_obs.sum() >= 1:
        raise DemandError("observed shares must be strictly positive and sum below one")
    log_obs = np.log(s_obs)
    lam = 1.0 - params.rho
    mu = taste_deviations(market, params)
    codes, g = nest_codes(market.nest_ids)
    w = market.draws.weights
    if delta0 is None:
        delta = log_obs - np.log1p(-s_obs.sum())
    else:
        delta = np.array(delta0, dtype=float)
    resid = np.inf
    for _ in range(max_iter):
        probs = draw_probabilities(delta[None, :] + mu, codes, g, params.rho)
        s = w @ probs.s
        if np.any(s <= 0):
            raise InversionError("predicted share underflowed", resid)
        diff = log_obs - np.log(s)
        resid = float(np.max(np.abs(diff)))
        if not np.isfinite(resid):
            raise InversionError("non-finite residual", resid)
        if resid < tol:
            return delta
        if newton and resid < 1e-6:
            jac = _dsdv(probs, w, params.rho)
            delta = delta + np.linalg.solve(jac, s_obs - s)
        else:
            delta = delta + lam * diff
    raise InversionError(f"share inversion did not converge in {max_iter} iterations", resid)


def recover_xi(market: Market, params: DemandParams, delta):
    return np.asarray(delta) - linear_utilities(market, params)


# --------------------------------------------------------------- derivatives


def _dsdv(probs: DrawProbs, wv, rho):
    """Draw-weighted ``d s_j / d V_k`` with weights ``wv`` per draw.

    Per draw the derivative is
    ``s_j [1{j=k}/(1-rho) - rho/(1-rho) s_k|g 1{g(j)=g(k)} - s_k]``.
    """
    lam = 1.0 - rho
    s = probs.s
    ws = s * wv[:, None]
    out = np.diag(ws.sum(axis=0) / lam)
    out -= ws.T @ s
    if rho:
        same = probs.codes[:, None] == probs.codes[None, :]
        out -= (rho / lam) * (ws.T @ probs.s_cond) * same
    return out


def price_jacobian_parts(market: Market, params: DemandParams, prices=None):
    """Split ``ds/dp = diag(lambda) - gamma`` for the markup fixed point.

    Returns ``(shares, lambda, gamma)`` with ``lambda`` the diagonal vector.
    """
    probs = market_probabilities(market, params, prices=prices)
    w = market.draws.weights
    lam = 1.0 - params.rho
    s = probs.s
    ws = s * w[:, None]
    diag = params.beta_price * ws.sum(axis=0) / lam
    gamma = params.beta_price * (ws.T @ s)
    if params.rho:
        same = probs.codes[:, None] == probs.codes[None, :]
        gamma += params.beta_price * (params.rho / lam) * (ws.T @ probs.s_cond) * same
    return w @ s, diag, gamma


def share_jacobian_delta(market: Market, params: DemandParams, delta=None):
    probs = market_probabilities(market, params, delta=delta)
    return _dsdv(probs, market.draws.weights, params.rho)


def share_jacobian_prices(market: Market, params: DemandParams, prices=None):
    """``J[j, k] = d s_j / d p_k``."""
    probs = market_probabilities(market, params, prices=prices)
    return params.beta_price * _dsdv(probs, market.draws.weights, params.rho)


def share_jacobian_shape(market: Market, params: DemandParams, ell, prices=None):
    """``J[j, k] = d s_j / d x_emb[k, ell]`` (mean plus random taste)."""
    probs = market_probabilities(market, params, prices=prices)
    slope = params.beta_img_mean[ell] + params.beta_img_sd[ell] * market.draws.z[:, ell]
    return _dsdv(probs, market.draws.weights * slope, params.rho)


def share_derivatives_sd(market: Market, params: DemandParams, delta=None):
    """(J, K) derivatives of shares with respect to each random-coefficient sd."""
    probs = market_probabilities(market, params, delta=delta)
    lam = 1.0 - params.rho
    s, sc, codes = probs.s, probs.s_cond, probs.codes
    x = market.x_emb
    z = market.draws.z
    w = market.draws.weights
    xbar = s @ x  # (R, K)
    n_nests = probs.log_d.shape[1]
    out = np.empty((market.n_products, x.shape[1]))
    for ell in range(x.shape[1]):
        inner = x[None, :, ell] / lam - xbar[:, ell][:, None]
        if params.rho:
            nest_bar = np.zeros((s.shape[0], n_nests))
            for g in range(n_nests):
                cols = codes == g
                nest_bar[:, g] = sc[:, cols] @ x[cols, ell]
            inner = inner - (params.rho / lam) * nest_bar[:, codes]
        out[:, ell] = (w * z[:, ell]) @ (s * inner)
    return out


def share_derivative_rho(market: Market, params: DemandParams, delta=None):
    """(J,) derivative of shares with respect to ``rho`` at fixed utilities."""
    probs = market_probabilities(market, params, delta=delta)
    lam = 1.0 - params.rho
    s, sc, codes, v = probs.s, probs.s_cond, probs.codes, probs.v
    n_nests = probs.log_d.shape[1]
    vbar = np.zeros_like(probs.log_d)
    for g in range(n_nests):
        cols = codes == g
        vbar[:, g] = np.sum(sc[:, cols] * v[:, cols], axis=1)
    nest_share = np.exp(probs.inclusive - probs.log_denom[:, None])
    # d I_g / d lambda = log D_g - vbar_g / lambda
    di = probs.log_d - vbar / lam
    dlog = (-v + vbar[:, codes]) / lam**2 + di[:, codes] - np.sum(nest_share * di, axis=1)[:, None]
    return -(market.draws.weights @ (s * dlog))


# ---------------------------------------------------- substitution patterns


def _positive_shares(s):
    if np.any(s <= 0):
        raise DemandError("zero predicted share")
    return s


def price_elasticities(market: Market, params: DemandParams):
    """``E[j, k] = (d s_j / d p_k) p_k / s_j``."""
    s, _ = compute_shares(market, params)
    _positive_shares(s)
    jac = share_jacobian_prices(market, params)
    return jac * market.prices[None, :] / s[:, None]


elasticities = price_elasticities


def own_shape_elasticities(market: Market, params: DemandParams, ell):
    s, _ = compute_shares(market, params)
    _positive_shares(s)
    jac = share_jacobian_shape(market, params, ell)
    return np.diag(jac) * market.x_emb[:, ell] / s


def diversion_ratios(market: Market, params: DemandParams, paper_sign=False):
    """``D[j, j'] = (d s_j' / d p_j) / (-d s_j / d p_j)``; diagonal is zero.

    ``paper_sign=True`` divides by ``+d s_j / d p_j`` instead, which makes
    the ratios negative.
    """
    jac = share_jacobian_prices(market, params)
    own = np.diag(jac).copy()
    div = jac.T / (own[:, None] if paper_sign else -own[:, None])
    np.fill_diagonal(div, 0.0)
    return div


def diversion_to_outside_ratio(market: Market, params: DemandParams):
    jac = share_jacobian_prices(market, params)
    ds0 = -jac.sum(axis=0)
    return ds0 / -np.diag(jac)


def diversion_to_outside(market: Market, params: DemandParams):
    """Diversion to the outside good next to nearest-rival distance covariates."""
    ratio = diversion_to_outside_ratio(market, params)
    emb = market.x_full if market.x_full is not None else market.x_emb
    j = market.n_products
    cols = {"product_id": market.product_ids, "div_outside": ratio}
    if j > 1:
        d = pairwise_distances(emb)
        np.fill_diagonal(d, np.inf)
        d.sort(axis=1)
        for n in (1, 5, 10):
            m = min(n, j - 1)
            cols[f"dist_nearest_{n}"] = d[:, :m].mean(axis=1)
    else:
        for n in (1, 5, 10):
            cols[f"dist_nearest_{n}"] = np.full(j, np.nan)
    return pd.DataFrame(cols)


def long_run_diversion(market: Market, params: DemandParams, product_id):
    """Share captured by each rival when ``product_id`` is withdrawn.

    Returns an array aligned with the market rows; the withdrawn product's
    slot is NaN.
    """
    j = market.index_of(product_id)
    s, _ = compute_shares(market, params)
    reduced = market.subset(np.arange(market.n_products) != j)
    s_minus, _ = compute_shares(reduced, params)
    out = np.full(market.n_products, np.nan)
    others = np.arange(market.n_products) != j
    out[others] = (s_minus - s[others]) / s[j]
    return out


def aggregate_div_by_distance(markets, params: DemandParams, bin_width=0.02, d_max=1.0, paper_sign=False):
    """Mean diversion to rivals inside radial bands ``d <= dist < d + width``.

    Within a market each focal product contributes the mean diversion to its
    rivals in the band; focal products with no rival in the band are skipped.
    The curve averages the per-market values over markets where the band is
    populated.
    """
    n_bins = int(round(d_max / bin_width))
    lows = np.arange(n_bins) * bin_width
    acc = np.zeros(n_bins)
    cnt = np.zeros(n_bins, dtype=int)
    for m in markets:
        if m.n_products < 2:
            continue
        emb = m.x_full if m.x_full is not None else m.x_emb
        div = diversion_ratios(m, params, paper_sign=paper_sign)
        dist = pairwise_distances(emb)
        np.fill_diagonal(dist, np.nan)
        with np.errstate(invalid="ignore"):
            for b, lo in enumerate(lows):
                band = (dist >= lo) & (dist < lo + bin_width)
                n_in = band.sum(axis=1)
                has = n_in > 0
                if not np.any(has):
                    continue
                per_focal = np.where(band, div, 0.0).sum(axis=1)[has] / n_in[has]
                acc[b] += per_focal.mean()
                cnt[b] += 1
    keep = cnt > 0
    return pd.DataFrame({"d": lows[keep], "div": acc[keep] / cnt[keep], "n_markets": cnt[keep]})


# ----------------------------------------------------------------- welfare


def consumer_surplus(market: Market, params: DemandParams, mode="nested", prices=None):
    """Expected consumer surplus per consumer, in currency.

    ``nested`` uses the nested log-sum ``ln(1 + sum_g exp I_g)``;
    ``paper_literal`` uses the flat ``ln(1 + sum_j exp V_j)``.
    """
    if params.beta_price >= 0:
        raise DemandError("consumer surplus requires a negative price coefficient")
    if market.n_products == 0:
        return 0.0
    w = market.draws.weights
    if mode == "nested":
        logsum = market_probabilities(market, params, prices=prices).log_denom
    elif mode == "paper_literal":
        v = mean_utilities(market, params, prices=prices)[None, :] + taste_deviations(market, params)
        logsum = np.logaddexp(0.0, logsumexp(v, axis=1))
    else:
        raise DemandError(f"unknown consumer-surplus mode {mode!r}")
    return float(w @ logsum) / -params.beta_price
