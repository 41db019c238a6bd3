"""Copyright counterfactuals: removal, relocation and sequential entry.

A protection radius ``d_bar`` forbids a new product from locating closer than
``d_bar`` to any product of another firm. Markets passed in are the country
views of one period's product set (same product rows in every market).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from copyspace import rng as rngmod
from copyspace.demand import DemandParams, Market, consumer_surplus, linear_utilities, taste_deviations
from copyspace.supply import CostParams, PricingError, equilibrium_prices, fixed_costs, product_variable_profits

log = logging.getLogger(__name__)

RESPONSE_MODES = ("remove", "remove_random", "relocate", "endogenous_entry")


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    d_bar: float = 0.0
    response_mode: str = "remove"
    distance_space: str = "full"
    start_period: int = 0
    cs_mode: str = "nested"
    price_tol: float = 1e-10

    def __post_init__(self):
        if not 0.0 <= self.d_bar <= 2.0:
            raise PolicyError("d_bar must lie in [0, 2]")
        if self.response_mode not in RESPONSE_MODES:
            raise PolicyError(f"unknown response mode {self.response_mode!r}")
        if self.distance_space not in ("full", "reduced"):
            raise PolicyError("distance_space must be 'full' or 'reduced'")

    def replace(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class ScenarioCost:
    """Cost regime for counterfactual entry.

    ``factual`` keeps the estimated function; ``assistant`` lowers the
    intercept by ``shift_C`` and truncates costs at zero; ``substitute``
    drops every slope and draws location costs from a flat distribution
    whose mean and variance match the assistant regime at the same level.
    ``intercept_level`` names a level from ``level_shifts`` and, when set,
    overrides ``shift_C``.
    """

    kind: str = "factual"
    shift_C: Optional[float] = None
    intercept_level: Optional[str] = None
    level_shifts: Optional[dict] = None

    def __post_init__(self):
        if self.kind not in ("factual", "assistant", "substitute"):
            raise PolicyError(f"unknown scenario {self.kind!r}")
        if self.kind == "assistant" and self.shift_C is None and self.intercept_level is None:
            raise PolicyError("the assistant scenario needs shift_C or an intercept level")
        if self.shift_C is not None and self.shift_C < 0:
            raise PolicyError("shift_C must be nonnegative")

    def shift(self):
        if self.intercept_level is not None:
            levels = self.level_shifts or {}
            if self.intercept_level not in levels:
                raise PolicyError(f"unknown intercept level {self.intercept_level!r}")
            return float(levels[self.intercept_level])
        return float(self.shift_C or 0.0)


@dataclass
class CostFunction:
    """Location fixed costs under a scenario.

    ``__call__(points, incumbents, nu)`` returns one cost per row of
    ``points`` (reduced coordinates). ``flat_mean``/``flat_sd`` are set for
    the substitute regime, where costs ignore location.
    """

    params: CostParams
    scenario: ScenarioCost
    shift: float = 0.0
    flat_mean: Optional[float] = None
    flat_sd: Optional[float] = None

    def __call__(self, points, incumbents, nu=None, rng=None):
        points = np.asarray(points, dtype=float)
        if self.scenario.kind == "substitute":
            if rng is None:
                raise PolicyError("substitute costs are random; pass an rng")
            draws = self.flat_mean + self.flat_sd * rng.standard_normal(points.shape[0])
            return np.maximum(draws, 0.0)
        f = fixed_costs(points, incumbents, self.params, nu)
        if self.scenario.kind == "assistant":
            return np.maximum(f - self.shift, 0.0)
        return f


def scenario_cost_fn(base: CostParams, scenario: ScenarioCost, reference=None):
    """Cost function for ``scenario`` built from the estimated ``base``.

    ``reference`` is an optional ``(points, incumbents, nu)`` triple used to
    calibrate the substitute regime's mean and variance to the assistant
    regime at the same level (truncated at zero, as in that regime).
    """
    if scenario.kind == "factual":
        return CostFunction(base, scenario)
    shift = scenario.shift()
    if scenario.kind == "assistant":
        return CostFunction(base, scenario, shift=shift)
    flat = CostParams(np.zeros_like(base.eta), base.nu_intercept_mean, base.nu_intercept_sd, np.zeros(base.k))
    if reference is not None:
        pts, inc, nu = reference
        ref = np.maximum(fixed_costs(pts, inc, base, nu) - shift, 0.0)
        mean, sd = float(ref.mean()), float(ref.std(ddof=1))
    else:
        mean, sd = base.nu_intercept_mean - shift, base.nu_intercept_sd
    return CostFunction(flat, scenario, shift=shift, flat_mean=mean, flat_sd=sd)


@dataclass
class WelfareReport:
    cs_aggregate: float
    cs_average: float
    ps_aggregate: float
    ps_average: float
    sw_aggregate: float
    sw_average: float
    n_entrants: int
    fixed_cost_total: float
    cs_decomposition: tuple  # (price_channel, variety_channel) of the CS loss
    n_products: int = 0
    n_firms: int = 0
    cs_change: float = 0.0
    removed: tuple = ()
    flagged: tuple = ()
    metadata: dict = field(default_factory=dict)

    def metrics(self):
        return {
            "cs_aggregate": self.cs_aggregate,
            "cs_average": self.cs_average,
            "ps_aggregate": self.ps_aggregate,
            "ps_average": self.ps_average,
            "sw_aggregate": self.sw_aggregate,
            "sw_average": self.sw_average,
            "n_entrants": float(self.n_entrants),
            "fixed_cost_total": self.fixed_cost_total,
            "cs_change": self.cs_change,
            "cs_price_channel": self.cs_decomposition[0],
            "cs_variety_channel": self.cs_decomposition[1],
            "n_products": float(self.n_products),
        }

    def to_dict(self):
        d = self.metrics()
        d["removed"] = [str(x) for x in self.removed]
        d["flagged"] = [str(x) for x in self.flagged]
        d["metadata"] = self.metadata
        return d


AVERAGING_NOTE = "cs_average and sw_average divide by final product count; ps_average divides by firm count"


# --------------------------------------------------------------- helpers


def _check_aligned(markets):
    ids = markets[0].product_ids
    for m in markets[1:]:
        if m.n_products != ids.size or np.any(m.product_ids != ids):
            raise PolicyError("country markets must list the same products in the same order")


def _positions(market: Market, space):
    if space == "full":
        if market.x_full is None:
            raise PolicyError("full-dimension embeddings are required for distance_space='full'")
        return market.x_full
    return market.x_emb


def _solve_prices(markets, params, tol, p0=None):
    out = []
    for i, m in enumerate(markets):
        try:
            out.append(equilibrium_prices(m, params, tol=tol, p0=None if p0 is None else p0[i]))
        except PricingError as exc:
            raise PricingError(f"market {m.market_id!r}: {exc}", exc.trace) from exc
    return out


def _cs_total(markets, params, prices, mode):
    return float(sum(consumer_surplus(m, params, mode=mode, prices=p) * m.market_size for m, p in zip(markets, prices)))


def _ps_total(markets, params, prices):
    return float(sum(product_variable_profits(m, params, prices=p).sum() for m, p in zip(markets, prices)))


def _firm_profit(market, params, firm, prices):
    mask = market.firm_ids == firm
    if not np.any(mask):
        return 0.0
    return float(product_variable_profits(market, params, prices=prices)[mask].sum())


def _report(markets, params, prices, cfg, base_cs, fixed_cost_total=0.0, n_entrants=0, decomposition=(0.0, 0.0), **extra):
    cs = _cs_total(markets, params, prices, cfg.cs_mode)
    ps = _ps_total(markets, params, prices) - fixed_cost_total
    n_products = markets[0].n_products
    n_firms = len(np.unique(markets[0].firm_ids)) if n_products else 0
    sw = cs + ps
    meta = {"averaging": AVERAGING_NOTE, "cs_mode": cfg.cs_mode, "policy": cfg.to_dict()}
    meta.update(extra.pop("metadata", {}))
    return WelfareReport(
        cs_aggregate=cs,
        cs_average=cs / n_products if n_products else 0.0,
        ps_aggregate=ps,
        ps_average=ps / n_firms if n_firms else 0.0,
        sw_aggregate=sw,
        sw_average=sw / n_products if n_products else 0.0,
        n_entrants=n_entrants,
        fixed_cost_total=fixed_cost_total,
        cs_decomposition=tuple(decomposition),
        n_products=n_products,
        n_firms=n_firms,
        cs_change=cs - base_cs,
        metadata=meta,
        **extra,
    )


def baseline(markets, params, cfg: PolicyConfig):
    """Equilibrium prices and welfare with every product present."""
    _check_aligned(markets)
    prices = _solve_prices(markets, params, cfg.price_tol, p0=[m.prices for m in markets])
    cs = _cs_total(markets, params, prices, cfg.cs_mode)
    return prices, _report(markets, params, prices, cfg, cs)


# ------------------------------------------------------------ infringers


def find_infringers(product_ids, entry_periods, firm_ids, positions, d_bar, start_period=0):
    """Entrants within ``d_bar`` of an earlier rival, resolved in entry order.

    Products are processed by (entry period, id). An entrant on or after
    ``start_period`` is an infringer when some surviving earlier product of
    another firm lies strictly closer than ``d_bar``; infringers do not
    protect later entrants.
    """
    ids = np.asarray(product_ids)
    entry = np.asarray(entry_periods)
    firms = np.asarray(firm_ids)
    pos = np.asarray(positions, dtype=float)
    if d_bar <= 0:
        return set()
    order = np.lexsort((ids, entry))
    survivors = []
    flagged = set()
    for i in order:
        if entry[i] >= start_period and survivors:
            surv = np.asarray(survivors)
            rival = surv[firms[surv] != firms[i]]
            if rival.size:
                d = cdist(pos[i : i + 1], pos[rival])[0]
                if np.any(d < d_bar):
                    flagged.add(ids[i].item() if hasattr(ids[i], "item") else ids[i])
                    continue
        survivors.append(i)
    return flagged


def _infringers_for(markets, cfg):
    m = markets[0]
    if m.entry_period is None:
        raise PolicyError("entry periods are required")
    return find_infringers(m.product_ids, m.entry_period, m.firm_ids, _positions(m, cfg.distance_space), cfg.d_bar, cfg.start_period)


def _ordered(markets, ids):
    m = markets[0]
    idx = [m.index_of(i) for i in ids]
    order = np.lexsort((m.product_ids[idx], m.entry_period[idx]))
    return [m.product_ids[idx[k]] for k in order]


# --------------------------------------------------------------- removal


def run_removal(policy: PolicyConfig, markets, params: DemandParams, random_seed=None):
    """Remove infringers (or as many random post-start entrants) and re-solve.

    The CS loss is split into a variety channel (products removed, prices
    held at baseline) and a price channel (the rest).
    """
    markets = list(markets)
    _check_aligned(markets)
    base_prices, base = baseline(markets, params, policy)
    flagged = _infringers_for(markets, policy)
    if policy.response_mode == "remove_random":
        m = markets[0]
        pool = m.product_ids[m.entry_period >= policy.start_period]
        gen = rngmod.stream(0 if random_seed is None else random_seed, "random_removal")
        removed = set(gen.choice(pool, size=len(flagged), replace=False).tolist()) if flagged else set()
    elif policy.response_mode == "remove":
        removed = flagged
    else:
        raise PolicyError("run_removal handles 'remove' and 'remove_random'")
    if not removed:
        return replace(base, flagged=tuple(sorted(flagged)), metadata={**base.metadata, "n_baseline_products": markets[0].n_products})
    keep = ~np.isin(markets[0].product_ids, list(removed))
    cf = [m.subset(keep) for m in markets]
    fixed_prices = [p[keep] for p in base_prices]
    cs_fixed = _cs_total(cf, params, fixed_prices, policy.cs_mode)
    prices = _solve_prices(cf, params, policy.price_tol, p0=fixed_prices)
    cs_new = _cs_total(cf, params, prices, policy.cs_mode)
    variety = base.cs_aggregate - cs_fixed
    price = cs_fixed - cs_new
    return _report(
        cf,
        params,
        prices,
        policy,
        base.cs_aggregate,
        decomposition=(price, variety),
        removed=tuple(_ordered(markets, removed)),
        flagged=tuple(sorted(flagged)),
        metadata={"n_baseline_products": markets[0].n_products},
    )


# ------------------------------------------------------ candidate profits


class CandidateSet(NamedTuple):
    full: Optional[np.ndarray]  # (C, d) unit vectors
    reduced: np.ndarray  # (C, K)

    def positions(self, space):
        if space == "full":
            if self.full is None:
                raise PolicyError("candidate set has no full-dimension embeddings")
            return self.full
        return self.reduced


def make_candidates(full_points, reducer=None):
    full = np.asarray(full_points, dtype=float)
    reduced = full if reducer is None else reducer.transform(full)
    return CandidateSet(full, reduced)


def candidate_profits(market: Market, params: DemandParams, prices, firm, cand_emb, cand_delta, cand_nest, cand_margin, cand_is_own=True):
    """Firm portfolio variable profit with one extra product at each candidate.

    The market (already excluding any product being moved) is held at
    ``prices``. For candidate ``c`` the new product has reduced embedding
    ``cand_emb[c]``, mean utility ``cand_delta[c]`` (price, attributes and
    shock included), nest ``cand_nest[c]`` and margin ``cand_margin``.
    Returns a (C,) array in currency.
    """
    cand_emb = np.atleast_2d(np.asarray(cand_emb, dtype=float))
    n_cand = cand_emb.shape[0]
    cand_delta = np.broadcast_to(np.asarray(cand_delta, dtype=float), (n_cand,))
    cand_nest = np.broadcast_to(np.asarray(cand_nest), (n_cand,))
    lam = 1.0 - params.rho
    w = market.draws.weights
    z = market.draws.z
    r = z.shape[0]
    u_c = (cand_delta[None, :] + z @ (cand_emb * params.beta_img_sd).T) / lam  # (R, C)
    nest_all, codes_all = np.unique(np.concatenate([np.asarray(market.nest_ids, dtype=object), np.asarray(cand_nest, dtype=object)]).astype(str), return_inverse=True)
    codes = codes_all[: market.n_products]
    cand_codes = codes_all[market.n_products :]
    g_count = len(nest_all)
    if market.n_products:
        v = (linear_utilities(market, params, prices=prices) + market.xi)[None, :] + taste_deviations(market, params)
        u = v / lam
        margin = (np.asarray(prices) - market.mc) * (market.firm_ids == firm)
    else:
        u = np.zeros((r, 0))
        margin = np.zeros(0)
    log_d = np.full((r, g_count), -np.inf)
    q = np.zeros((r, g_count))
    for g in range(g_count):
        cols = codes == g
        if np.any(cols):
            log_d[:, g] = logsumexp(u[:, cols], axis=1)
            q[:, g] = np.exp(u[:, cols] - log_d[:, g][:, None]) @ margin[cols]
    lam_l = lam * log_d
    # log of sum_g exp(lam L_g) excluding each nest in turn
    others = np.empty((r, g_count))
    for g in range(g_count):
        rest = np.delete(lam_l, g, axis=1)
        others[:, g] = logsumexp(rest, axis=1) if rest.shape[1] else -np.inf
    l_new = np.logaddexp(log_d[:, cand_codes], u_c)  # (R, C)
    log_den = np.logaddexp(0.0, np.logaddexp(others[:, cand_codes], lam * l_new))
    # nests other than the candidate's keep their within-nest sums
    tot = np.zeros((r, n_cand))
    for g in range(g_count):
        term = np.exp(lam_l[:, g][:, None] - log_den) * q[:, g][:, None]
        tot += np.where(cand_codes[None, :] == g, 0.0, term)
    q_c = q[:, cand_codes]
    with np.errstate(invalid="ignore"):
        ratio = np.where(np.isfinite(log_d[:, cand_codes]), np.exp(log_d[:, cand_codes] - l_new), 0.0)
    own = cand_margin * np.exp(u_c - l_new) if cand_is_own else 0.0
    tot += np.exp(lam * l_new - log_den) * (q_c * ratio + own)
    return market.market_size * (w @ tot)


def _candidate_delta(params, price, x_struct, xi, cand_emb, intercept=True):
    base = params.beta_price * price + float(np.dot(params.beta_struct, x_struct)) + xi
    if intercept:
        base += params.intercept
    return base + cand_emb @ params.beta_img_mean


def _new_product_id(ids, counter):
    """Fresh id of the same kind as ``ids`` (integers continue past the max)."""
    if np.issubdtype(np.asarray(ids).dtype, np.integer):
        return int(np.max(ids)) + 1 if len(ids) else 0
    return f"entrant_{counter}"


def _min_rival_distance(cand_pos, pos, firms, firm):
    rival = firms != firm
    if not np.any(rival):
        return np.full(cand_pos.shape[0], np.inf)
    return cdist(cand_pos, pos[rival]).min(axis=1)


# ------------------------------------------------------------- relocation


def run_relocation(policy: PolicyConfig, markets, params: DemandParams, candidates: CandidateSet, cost: Optional[CostFunction] = None, nu=None, return_markets=False):
    """Move each infringer, in entry order, to its best feasible candidate.

    Feasible means at least ``d_bar`` from every product of another firm.
    The objective is the firm's expected portfolio variable profit at
    current prices, net of the location's fixed cost when ``cost`` is
    given. Infringers without a feasible candidate go to the candidate with
    the largest minimum rival distance and are flagged. With
    ``return_markets`` the relocated markets are returned alongside.
    """
    markets = list(markets)
    _check_aligned(markets)
    base_prices, base = baseline(markets, params, policy)
    flagged = _infringers_for(markets, policy)
    if not flagged:
        report = replace(base, metadata={**base.metadata, "relocated": [], "parked": []})
        return (report, markets) if return_markets else report
    cand_pos = candidates.positions(policy.distance_space)
    cur = list(markets)
    prices = [p.copy() for p in base_prices]
    parked = []
    moves = []
    for pid in _ordered(markets, flagged):
        m0 = cur[0]
        j = m0.index_of(pid)
        firm = m0.firm_ids[j]
        pos = _positions(m0, policy.distance_space)
        others = np.arange(m0.n_products) != j
        dmin = _min_rival_distance(cand_pos, pos[others], m0.firm_ids[others], firm)
        feasible = dmin >= policy.d_bar
        if not np.any(feasible):
            choice = int(np.argmax(dmin))
            parked.append(pid)
        else:
            value = np.zeros(cand_pos.shape[0])
            for c_idx, m in enumerate(cur):
                mm = m.subset(others)
                pm = prices[c_idx][others]
                delta = _candidate_delta(params, prices[c_idx][j], m.x_struct[j], m.xi[j], candidates.reduced)
                value += candidate_profits(mm, params, pm, firm, candidates.reduced, delta, m.nest_ids[j], prices[c_idx][j] - m.mc[j])
            if cost is not None:
                value -= cost(candidates.reduced, m0.x_emb[others], nu)
            value[~feasible] = -np.inf
            choice = int(np.argmax(value))
        moves.append((pid, choice))
        new_cur = []
        for m in cur:
            xe = m.x_emb.copy()
            xe[j] = candidates.reduced[choice]
            changes = {"x_emb": xe}
            if m.x_full is not None and candidates.full is not None:
                xf = m.x_full.copy()
                xf[j] = candidates.full[choice]
                changes["x_full"] = xf
            new_cur.append(m.replace(**changes))
        cur = new_cur
    fixed_cs = _cs_total(cur, params, prices, policy.cs_mode)
    new_prices = _solve_prices(cur, params, policy.price_tol, p0=prices)
    cs_new = _cs_total(cur, params, new_prices, policy.cs_mode)
    report = _report(
        cur,
        params,
        new_prices,
        policy,
        base.cs_aggregate,
        decomposition=(fixed_cs - cs_new, base.cs_aggregate - fixed_cs),
        flagged=tuple(sorted(flagged)),
        metadata={"relocated": [(str(p), int(c)) for p, c in moves], "parked": [str(p) for p in parked]},
    )
    return (report, cur) if return_markets else report


# ------------------------------------------------------------ entry game


def run_entry_game(policy: PolicyConfig, markets, params: DemandParams, cost_fn: CostFunction, firms: Sequence, candidates: CandidateSet, rng, xi_value=None, nu=None, return_markets=False):
    """Sequential entry of ``firms`` into the candidate locations.

    Each firm, in order, evaluates every feasible candidate: the gain in its
    expected portfolio variable profit (rival prices at current values, the
    entrant priced at the firm's average price) minus the location's fixed
    cost. It enters at the best candidate when the net value is positive.
    Prices are re-solved once after all decisions. Location fixed costs are
    computed once against the starting product set and shared across
    firms.

    Returns a :class:`WelfareReport` (and the final markets when
    ``return_markets`` is set).
    """
    markets = list(markets)
    _check_aligned(markets)
    base_prices, base = baseline(markets, params, policy)
    m0 = markets[0]
    if xi_value is None:
        late = m0.entry_period >= policy.start_period if m0.entry_period is not None else np.ones(m0.n_products, bool)
        xi_value = float(np.mean(m0.xi[late])) if np.any(late) else float(np.mean(m0.xi))
    cand_pos = candidates.positions(policy.distance_space)
    loc_cost = cost_fn(candidates.reduced, m0.x_emb, nu, rng=rng)
    cur = list(markets)
    prices = [p.copy() for p in base_prices]
    entries = []
    fixed_total = 0.0
    next_id = 0
    for firm in firms:
        m0 = cur[0]
        pos = _positions(m0, policy.distance_space)
        dmin = _min_rival_distance(cand_pos, pos, m0.firm_ids, firm)
        feasible = dmin >= policy.d_bar
        if not np.any(feasible):
            continue
        nearest = np.argmin(cdist(cand_pos, pos), axis=1)
        cand_nest = m0.nest_ids[nearest]
        own = m0.firm_ids == firm
        gain = np.zeros(cand_pos.shape[0])
        attrs = []
        for c_idx, m in enumerate(cur):
            sel = own if np.any(own) else np.ones(m.n_products, bool)
            price = float(np.mean(prices[c_idx][sel]))
            mc = float(np.mean(m.mc[sel]))
            xs = m.x_struct[sel].mean(axis=0)
            attrs.append((price, mc, xs))
            delta = _candidate_delta(params, price, xs, xi_value, candidates.reduced)
            with_entry = candidate_profits(m, params, prices[c_idx], firm, candidates.reduced, delta, cand_nest, price - mc)
            gain += with_entry - _firm_profit(m, params, firm, prices[c_idx])
        net = gain - loc_cost
        net[~feasible] = -np.inf
        best = int(np.argmax(net))
        if not net[best] > 0:
            continue
        if dmin[best] < policy.d_bar:
            raise AssertionError("entry location violates the protection radius")
        new_id = _new_product_id(m0.product_ids, next_id)
        next_id += 1
        new_cur = []
        for c_idx, m in enumerate(cur):
            price, mc, xs = attrs[c_idx]
            changes = {
                "product_ids": np.append(m.product_ids, new_id),
                "firm_ids": np.append(m.firm_ids, firm),
                "nest_ids": np.append(m.nest_ids, cand_nest[best]),
                "prices": np.append(prices[c_idx], price),
                "x_struct": np.vstack([m.x_struct, xs]),
                "x_emb": np.vstack([m.x_emb, candidates.reduced[best]]),
                "xi": np.append(m.xi, xi_value),
                "mc": np.append(m.mc, mc),
            }
            if m.x_full is not None:
                full = candidates.full[best] if candidates.full is not None else np.full(m.x_full.shape[1], np.nan)
                changes["x_full"] = np.vstack([m.x_full, full])
            if m.shares is not None:
                changes["shares"] = np.append(m.shares, np.nan)
            if m.entry_period is not None:
                changes["entry_period"] = np.append(m.entry_period, np.max(m.entry_period) + 1)
            new_cur.append(m.replace(**changes))
            prices[c_idx] = np.append(prices[c_idx], price)
        cur = new_cur
        fixed_total += float(loc_cost[best])
        entries.append({"firm": firm, "candidate": best, "net": float(net[best]), "fixed_cost": float(loc_cost[best]), "min_rival_distance": float(dmin[best])})
    fixed_cs = _cs_total(cur, params, prices, policy.cs_mode)
    new_prices = _solve_prices(cur, params, policy.price_tol, p0=prices)
    cs_new = _cs_total(cur, params, new_prices, policy.cs_mode)
    report = _report(
        cur,
        params,
        new_prices,
        policy,
        base.cs_aggregate,
        fixed_cost_total=fixed_total,
        n_entrants=len(entries),
        decomposition=(fixed_cs - cs_new, base.cs_aggregate - fixed_cs),
        metadata={"entries": entries, "scenario": cost_fn.scenario.kind, "shift": cost_fn.shift, "xi_value": xi_value},
    )
    return (report, cur) if return_markets else report


# ---------------------------------------------------------------- heatmap


def _heatmap_cell(run_cell, master_seed, cell, d_bar, level):
    gen = rngmod.stream(master_seed, "heatmap_cell", cell)
    try:
        report = run_cell(float(d_bar), level, gen)
    except Exception as exc:
        raise PolicyError(f"heatmap cell (d_bar={d_bar}, cost_level={level}) failed: {exc}") from exc
    return report.metrics()


def welfare_heatmap(d_bars, cost_levels, run_cell, master_seed, n_workers=1):
    """Run ``run_cell(d_bar, cost_level, rng)`` on every grid cell.

    Each cell gets its own stream derived from ``(master_seed, cell index)``,
    so the table does not depend on ``n_workers``. With more than one worker
    the cells run in a process pool and ``run_cell`` must be picklable.
    Returns a long-form DataFrame with columns d_bar, cost_level, metric,
    value.
    """
    if not len(d_bars) or not len(cost_levels):
        raise PolicyError("heatmap grid is empty")
    cells = [(level, d_bar) for level in cost_levels for d_bar in d_bars]
    args = [(run_cell, master_seed, i, d, lv) for i, (lv, d) in enumerate(cells)]
    if n_workers is None or n_workers <= 1 or len(cells) == 1:
        results = [_heatmap_cell(*a) for a in args]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(int(n_workers), len(cells))) as pool:
            results = list(pool.map(_heatmap_cell, *zip(*args)))
    rows = []
    for (level, d_bar), metrics in zip(cells, results):
        for k, v in metrics.items():
            rows.append({"d_bar": float(d_bar), "cost_level": level, "metric": k, "value": float(v)})
    return pd.DataFrame(rows)
