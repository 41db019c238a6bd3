"""Supply side: Bertrand pricing, marginal costs, fixed costs and entry.

Fixed cost of developing product ``k`` against incumbents ``j``::

    F = nu_0 + sum_l [(eta0_l + nu_l) x_kl
                      + sum_j (eta1_l d + eta2_l d^2 + eta3_l d^3)],
    d = |x_kl - x_jl|

Distances are per embedding dimension. The gradient uses ``sign(0) = 0``.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from copyspace.demand import (
    DemandError,
    Market,
    compute_shares,
    price_jacobian_parts,
    share_jacobian_prices,
)

log = logging.getLogger(__name__)


class PricingError(RuntimeError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class SlopeEstimationError(ValueError):
    pass


def ownership_matrix(firm_ids):
    f = np.asarray(firm_ids)
    return f[:, None] == f[None, :]


def _firms(market, ownership):
    return market.firm_ids if ownership is None else np.asarray(ownership)


def foc_residual(market: Market, params, prices=None, ownership=None, mc=None):
    """``s_k + sum_j Omega[k, j] (d s_j / d p_k)(p_j - mc_j)`` for every ``k``."""
    p = market.prices if prices is None else np.asarray(prices, dtype=float)
    mc = market.mc if mc is None else np.asarray(mc, dtype=float)
    s, _ = compute_shares(market, params, prices=p)
    jac = share_jacobian_prices(market, params, prices=p)
    omega = ownership_matrix(_firms(market, ownership))
    return s + (omega * jac.T) @ (p - mc)


def recover_marginal_costs(market: Market, params, ownership=None):
    """``mc = p + (Omega * J')^{-1} s`` at observed prices."""
    if market.n_products == 0:
        return np.zeros(0)
    s, _ = compute_shares(market, params)
    jac = share_jacobian_prices(market, params)
    omega = ownership_matrix(_firms(market, ownership))
    try:
        return market.prices + np.linalg.solve(omega * jac.T, s)
    except np.linalg.LinAlgError as exc:
        raise PricingError("ownership-masked share Jacobian is singular") from exc


def equilibrium_prices(market: Market, params, ownership=None, tol=1e-10, max_iter=10000, p0=None, mc=None):
    """Solve the multiproduct Bertrand FOCs by the markup (zeta) fixed point.

    ``p <- mc + zeta(p)`` with ``zeta = Lambda^{-1} (Omega * Gamma)' (p - mc)
    - Lambda^{-1} s``, starting from observed prices unless ``p0`` is given.
    """
    if params.beta_price >= 0:
        raise DemandError("pricing requires a negative price coefficient")
    mc = market.mc if mc is None else np.asarray(mc, dtype=float)
    if mc is None or np.any(~np.isfinite(mc)):
        raise PricingError("marginal costs are not set")
    if market.n_products == 0:
        return np.zeros(0)
    omega = ownership_matrix(_firms(market, ownership))
    p = np.array(market.prices if p0 is None else p0, dtype=float)
    trace = []
    for it in range(max_iter):
        s, lam, gamma = price_jacobian_parts(market, params, prices=p)
        markup = p - mc
        zeta = ((omega * gamma.T) @ markup - s) / lam
        p_new = mc + zeta
        step = float(np.max(np.abs(p_new - p)))
        trace.append(step)
        p = p_new
        if not np.all(np.isfinite(p)):
            raise PricingError("price iteration diverged", trace[-20:])
        if step < tol:
            return p
    raise PricingError(f"price fixed point did not converge in {max_iter} iterations", trace[-20:])


def with_equilibrium_prices(market: Market, params, ownership=None, **kw):
    return market.replace(prices=equilibrium_prices(market, params, ownership=ownership, **kw))


def product_variable_profits(market: Market, params, prices=None):
    """``s_j M (p_j - mc_j)`` for every row."""
    p = market.prices if prices is None else np.asarray(prices, dtype=float)
    s, _ = compute_shares(market, params, prices=p)
    return s * market.market_size * (p - market.mc)


def variable_profit(markets, params, firm, prices=None):
    """Firm variable profit summed over country markets.

    Summing ``s_jc M_c (p - mc)`` over countries equals ``s_j M (p - mc)``
    with the size-weighted share ``s_j = sum_c s_jc M_c / M``.
    """
    if isinstance(markets, Market):
        markets = [markets]
    total = 0.0
    for i, m in enumerate(markets):
        p = None if prices is None else prices[i]
        mask = m.firm_ids == firm
        if np.any(mask):
            total += float(product_variable_profits(m, params, prices=p)[mask].sum())
    return total


# -------------------------------------------------------------- fixed cost


@dataclass(frozen=True)
class CostParams:
    """Per-dimension polynomial coefficients of the fixed-cost function.

    ``eta`` has shape (K, 4): columns are eta0..eta3.
    """

    eta: np.ndarray
    nu_intercept_mean: float = 0.0
    nu_intercept_sd: float = 0.0
    nu_slope_sd: np.ndarray = field(default=None)

    def __post_init__(self):
        eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        if eta.shape[1] != 4:
            raise ValueError("eta must have four columns (eta0..eta3)")
        object.__setattr__(self, "eta", eta)
        sd = np.zeros(eta.shape[0]) if self.nu_slope_sd is None else np.broadcast_to(np.asarray(self.nu_slope_sd, dtype=float), (eta.shape[0],)).copy()
        if np.any(sd < 0):
            raise ValueError("nu_slope_sd must be nonnegative")
        object.__setattr__(self, "nu_slope_sd", sd)

    @property
    def k(self):
        return self.eta.shape[0]

    def draw_nu(self, rng, n=None):
        """Cost shocks ``(nu_0, nu_1..nu_K)``; shape (K+1,) or (n, K+1)."""
        size = 1 if n is None else n
        nu0 = self.nu_intercept_mean + self.nu_intercept_sd * rng.standard_normal(size)
        nus = rng.standard_normal((size, self.k)) * self.nu_slope_sd
        out = np.column_stack([nu0, nus])
        return out[0] if n is None else out

    def to_dict(self):
        return {
            "eta": self.eta.tolist(),
            "nu_intercept_mean": self.nu_intercept_mean,
            "nu_intercept_sd": self.nu_intercept_sd,
            "nu_slope_sd": self.nu_slope_sd.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["eta"]), d.get("nu_intercept_mean", 0.0), d.get("nu_intercept_sd", 0.0), d.get("nu_slope_sd"))


def fixed_cost(x_k, incumbents, cost: CostParams, nu=None):
    """Fixed cost of a candidate at reduced location ``x_k``.

    ``incumbents`` is an (n, K) array of incumbent locations (the candidate
    itself must not be included); ``nu`` is ``(nu_0, nu_1, ..., nu_K)``.
    """
    x_k = np.asarray(x_k, dtype=float)
    inc = np.asarray(incumbents, dtype=float).reshape(-1, x_k.size)
    nu = np.zeros(cost.k + 1) if nu is None else np.asarray(nu, dtype=float)
    d = np.abs(x_k[None, :] - inc)
    eta = cost.eta
    poly = eta[:, 1] * d.sum(0) + eta[:, 2] * (d**2).sum(0) + eta[:, 3] * (d**3).sum(0)
    return float(nu[0] + np.sum((eta[:, 0] + nu[1:]) * x_k + poly))


def fixed_costs(points, incumbents, cost: CostParams, nu=None):
    """Vectorized ``fixed_cost`` for many candidate points (rows)."""
    pts = np.asarray(points, dtype=float)
    inc = np.asarray(incumbents, dtype=float)
    n = pts.shape[0]
    nu = np.zeros((n, cost.k + 1)) if nu is None else np.broadcast_to(np.asarray(nu, dtype=float), (n, cost.k + 1))
    out = nu[:, 0] + pts @ cost.eta[:, 0] + np.sum(nu[:, 1:] * pts, axis=1)
    for ell in range(cost.k):
        d = np.abs(pts[:, ell][:, None] - inc[None, :, ell])
        out += cost.eta[ell, 1] * d.sum(1) + cost.eta[ell, 2] * (d**2).sum(1) + cost.eta[ell, 3] * (d**3).sum(1)
    return out


def cost_gradient_regressors(x_k, incumbents):
    """Regressors of ``dF/dx_kl`` on (eta0, eta1, eta2, eta3).

    Returns ``(reg, n_ties)`` where ``reg`` is (K, 4) with columns
    ``[1, sum sign, sum 2 d sign, sum 3 d^2 sign]`` and ``n_ties`` counts
    incumbents with ``x_jl == x_kl`` (sign taken as 0) per dimension.
    """
    x_k = np.asarray(x_k, dtype=float)
    inc = np.asarray(incumbents, dtype=float).reshape(-1, x_k.size)
    diff = x_k[None, :] - inc
    sgn = np.sign(diff)
    d = np.abs(diff)
    reg = np.column_stack([np.ones(x_k.size), sgn.sum(0), (2 * d * sgn).sum(0), (3 * d**2 * sgn).sum(0)])
    return reg, (diff == 0).sum(0)


def cost_gradient(x_k, incumbents, cost: CostParams, nu=None):
    reg, _ = cost_gradient_regressors(x_k, incumbents)
    nu = np.zeros(cost.k + 1) if nu is None else np.asarray(nu, dtype=float)
    return np.sum(reg * cost.eta, axis=1) + nu[1:]


def cost_ivs(incumbents, x_k=None, sd=None, ell=None, local_scale=0.5):
    """BLP-type instruments for the slope regression of dimension ``ell``.

    Sums of incumbents' locations, squares and cubes in every dimension, plus
    (when ``x_k``/``sd``/``ell`` are given) counts of incumbents within
    ``local_scale * sd`` of the entrant in each *other* dimension.
    """
    inc = np.asarray(incumbents, dtype=float)
    parts = [inc.sum(0), (inc**2).sum(0), (inc**3).sum(0)]
    if x_k is not None and ell is not None:
        sd = np.asarray(sd, dtype=float)
        d = np.abs(np.asarray(x_k)[None, :] - inc)
        local = (d < local_scale * sd[None, :]).sum(0).astype(float)
        parts.append(np.delete(local, ell))
    return np.concatenate(parts)


# ------------------------------------------------- expected marginal profit


@dataclass(frozen=True)
class MarginalProfit:
    mean: np.ndarray  # (K,)
    se: np.ndarray  # (K,) Monte Carlo standard error over shock draws
    draws: np.ndarray  # (S, K) draw-level values


def expected_marginal_profit(product_id, markets, params, xi_draws, h=1e-4, firm=None):
    """Forward-difference expected marginal variable profit of moving ``product_id``.

    For each demand-shock draw the candidate's shock is set in every country
    market, the reduced coordinate ``l`` is bumped by ``h``, and the firm's
    portfolio profit change is summed over countries with prices held fixed.
    ``xi_draws`` is (S,) or (S, n_markets). Output is in currency per unit
    of embedding.
    """
    if isinstance(markets, Market):
        markets = [markets]
    xi_draws = np.asarray(xi_draws, dtype=float)
    if xi_draws.ndim == 1:
        xi_draws = np.repeat(xi_draws[:, None], len(markets), axis=1)
    if xi_draws.shape[0] == 0:
        raise ValueError("need at least one shock draw")
    if h <= 0:
        raise ValueError("step h must be positive")
    k_dim = markets[0].x_emb.shape[1]
    vals = np.zeros((xi_draws.shape[0], k_dim))
    for c, m in enumerate(markets):
        kidx = m.index_of(product_id)
        f = m.firm_ids[kidx] if firm is None else firm
        port = m.firm_ids == f
        margin = (m.prices - m.mc)[port]
        for s_i, xi_val in enumerate(xi_draws[:, c]):
            xi = m.xi.copy()
            xi[kidx] = xi_val
            base_m = m.replace(xi=xi)
            base, _ = compute_shares(base_m, params)
            for ell in range(k_dim):
                x = m.x_emb.copy()
                x[kidx, ell] += h
                bumped, s0 = compute_shares(base_m.replace(x_emb=x), params)
                if np.any(bumped <= 0) or s0 <= 0:
                    log.warning("step h=%g pushes shares out of (0, 1)", h)
                vals[s_i, ell] += m.market_size * np.sum(margin * (bumped[port] - base[port])) / h
    se = vals.std(axis=0, ddof=1) / np.sqrt(vals.shape[0]) if vals.shape[0] > 1 else np.full(k_dim, np.nan)
    return MarginalProfit(vals.mean(axis=0), se, vals)


# ------------------------------------------------------ slope estimation


@dataclass
class SlopeFit:
    coef: np.ndarray  # (K, 4)
    se: np.ndarray  # (K, 4)
    wald_f: np.ndarray  # (K,)
    wald_p: np.ndarray  # (K,)
    r2: np.ndarray  # (K,)
    n_obs: int
    mode: str
    n_ties: Optional[np.ndarray] = None

    def to_cost_params(self, **kw):
        return CostParams(self.coef, **kw)

    def to_dict(self):
        return {
            "mode": self.mode,
            "n_obs": self.n_obs,
            "coef": self.coef.tolist(),
            "se": self.se.tolist(),
            "wald_f": self.wald_f.tolist(),
            "wald_p": self.wald_p.tolist(),
            "r2": self.r2.tolist(),
        }


def _robust_fit(y, x, z=None):
    """OLS (``z is None``) or 2SLS with HC1 covariance."""
    n, p = x.shape
    if z is None:
        xhat = x
    else:
        zz = np.linalg.lstsq(z, x, rcond=None)[0]
        xhat = z @ zz
    a = xhat.T @ xhat
    if np.linalg.matrix_rank(a) < p:
        raise SlopeEstimationError("slope regressors have no independent variation (are entrants isolated?)")
    a_inv = np.linalg.inv(a)
    b = a_inv @ (xhat.T @ y)
    e = y - x @ b
    meat = (xhat * e[:, None] ** 2).T @ xhat
    v = a_inv @ meat @ a_inv * n / (n - p)
    r2 = 1.0 - np.sum(e**2) / np.sum((y - y.mean()) ** 2)
    return b, v, r2


def wald_test(b, v, rows, n, p):
    r = np.zeros((len(rows), len(b)))
    r[np.arange(len(rows)), rows] = 1.0
    rb = r @ b
    stat = float(rb @ np.linalg.solve(r @ v @ r.T, rb)) / len(rows)
    return stat, float(stats.f.sf(stat, len(rows), n - p))


def estimate_cost_slopes(marginal_profit, regressors, mode="ols", instruments=None, n_ties=None):
    """Regress expected marginal profits on the fixed-cost gradient regressors.

    Parameters
    ----------
    marginal_profit : (N, K) array
        Expected marginal variable profit of each entrant per dimension.
    regressors : (N, K, 4) array
        Output of :func:`cost_gradient_regressors` stacked over entrants.
    mode : {"ols", "iv"}
    instruments : (N, K, L) array, required for ``mode="iv"``
        Excluded instruments per dimension; the constant is added here.

    Returns
    -------
    SlopeFit with robust (HC1) standard errors and the joint Wald test of
    ``eta1 = eta2 = eta3 = 0`` per dimension.
    """
    y_all = np.asarray(marginal_profit, dtype=float)
    reg = np.asarray(regressors, dtype=float)
    n, k = y_all.shape
    if n <= 4:
        raise SlopeEstimationError(f"{n} entrants cannot identify 4 slope coefficients")
    if mode == "iv" and instruments is None:
        raise SlopeEstimationError("IV mode needs instruments")
    coef = np.zeros((k, 4))
    se = np.zeros((k, 4))
    wf, wp, r2 = np.zeros(k), np.zeros(k), np.zeros(k)
    for ell in range(k):
        x = reg[:, ell, :]
        if np.allclose(x[:, 1:], 0.0):
            raise SlopeEstimationError(f"dimension {ell}: distance regressors are all zero, eta1-eta3 unidentified")
        z = None
        if mode == "iv":
            z = np.column_stack([np.ones(n), np.asarray(instruments, dtype=float)[:, ell, :]])
        b, v, r2[ell] = _robust_fit(y_all[:, ell], x, z)
        coef[ell], se[ell] = b, np.sqrt(np.diag(v))
        wf[ell], wp[ell] = wald_test(b, v, [1, 2, 3], n, 4)
    return SlopeFit(coef, se, wf, wp, r2, n, mode, n_ties)


# ------------------------------------------------------------ entry bound


@dataclass(frozen=True)
class EntryBound:
    product_id: object
    upper_bound: float
    n_shock_draws: int
    profit_with: float = np.nan
    profit_without: float = np.nan


def entry_bound(product_id, markets, params, xi_pool, n_shocks=30, rng=None, ownership=None, tol=1e-10):
    """Revealed-profit upper bound on the fixed cost of ``product_id``.

    Averages the firm's portfolio variable profit at re-solved equilibrium
    prices over ``n_shocks`` shocks drawn from ``xi_pool`` and subtracts the
    portfolio profit without the product.
    """
    if isinstance(markets, Market):
        markets = [markets]
    if n_shocks < 1:
        raise ValueError("n_shocks must be >= 1")
    rng = np.random.default_rng(rng)
    pool = np.asarray(xi_pool, dtype=float)
    if pool.size == 0:
        raise ValueError("empty shock pool")
    shocks = pool[rng.integers(0, pool.shape[0], size=n_shocks)]
    if shocks.ndim == 1:
        shocks = np.repeat(shocks[:, None], len(markets), axis=1)
    firm = markets[0].firm_ids[markets[0].index_of(product_id)]
    with_profit = np.zeros(n_shocks)
    for s_i in range(n_shocks):
        for c, m in enumerate(markets):
            xi = m.xi.copy()
            xi[m.index_of(product_id)] = shocks[s_i, c]
            mm = m.replace(xi=xi)
            try:
                p = equilibrium_prices(mm, params, ownership=ownership, tol=tol)
            except PricingError as exc:
                raise PricingError(f"pricing failed on shock draw {s_i}", exc.trace) from exc
            with_profit[s_i] += variable_profit(mm, params, firm, prices=[p])
    without = 0.0
    for m in markets:
        mm = m.without(product_id)
        own = None if ownership is None else np.asarray(ownership)[m.product_ids != product_id]
        p = equilibrium_prices(mm, params, ownership=own, tol=tol)
        without += variable_profit(mm, params, firm, prices=[p])
    ub = float(with_profit.mean() - without)
    return EntryBound(product_id, ub, n_shocks, float(with_profit.mean()), float(without))
