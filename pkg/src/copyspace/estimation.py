"""Demand estimation: instruments, fixed-coefficient 2SLS and RCNL GMM.

Linear parameters are ordered ``[const, struct..., emb..., price]``. The
nonlinear parameters are the random-coefficient standard deviations on the
selected embedding dimensions and the nesting parameter ``rho``.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, optimize, stats
from scipy.special import expit, logit

from copyspace.demand import (
    DemandError,
    DemandParams,
    InversionError,
    Market,
    compute_shares,
    invert_shares,
    share_derivative_rho,
    share_derivatives_sd,
    share_jacobian_delta,
)

log = logging.getLogger(__name__)


class EstimationError(ValueError):
    pass


class CollinearityError(EstimationError):
    def __init__(self, columns):
        super().__init__("collinear columns: " + ", ".join(map(str, columns)))
        self.columns = list(columns)


# ------------------------------------------------------------ stacking


def linear_names(n_struct, n_emb):
    return ["const"] + [f"struct_{i}" for i in range(n_struct)] + [f"emb_{i}" for i in range(n_emb)] + ["price"]


@dataclass(frozen=True)
class StackedSample:
    """Product-market rows of a list of markets, in market order."""

    x_exog: np.ndarray  # (N, 1 + S + K)
    price: np.ndarray  # (N,)
    shares: np.ndarray  # (N,)
    outside: np.ndarray  # (N,) outside share of the row's market
    market_index: np.ndarray  # (N,)
    product_ids: np.ndarray
    firm_ids: np.ndarray
    names: list

    @property
    def x(self):
        return np.column_stack([self.x_exog, self.price])

    @property
    def n(self):
        return self.price.size

    def slices(self):
        bounds = np.flatnonzero(np.diff(self.market_index)) + 1
        starts = np.concatenate([[0], bounds])
        stops = np.concatenate([bounds, [self.n]])
        return [slice(a, b) for a, b in zip(starts, stops)]


def stack_markets(markets: Sequence[Market], require_shares=True):
    rows = []
    for t, m in enumerate(markets):
        if require_shares:
            if m.shares is None:
                raise EstimationError(f"market {m.market_id!r} has no observed shares")
            if np.any(m.shares <= 0) or m.shares.sum() >= 1:
                raise EstimationError(f"market {m.market_id!r}: shares must be positive and sum below one")
        rows.append(m)
    if not rows:
        raise EstimationError("empty estimation sample")
    n_struct = rows[0].x_struct.shape[1]
    n_emb = rows[0].x_emb.shape[1]
    x_exog = np.vstack([np.column_stack([np.ones(m.n_products), m.x_struct, m.x_emb]) for m in rows])
    shares = np.concatenate([m.shares if m.shares is not None else np.full(m.n_products, np.nan) for m in rows])
    outside = np.concatenate([np.full(m.n_products, 1.0 - (m.shares.sum() if m.shares is not None else np.nan)) for m in rows])
    return StackedSample(
        x_exog=x_exog,
        price=np.concatenate([m.prices for m in rows]),
        shares=shares,
        outside=outside,
        market_index=np.concatenate([np.full(m.n_products, t) for t, m in enumerate(rows)]),
        product_ids=np.concatenate([m.product_ids for m in rows]),
        firm_ids=np.concatenate([m.firm_ids for m in rows]),
        names=linear_names(n_struct, n_emb),
    )


# ---------------------------------------------------------- instruments


def embedding_sd(markets):
    """Per-dimension sample sd of reduced embeddings over all product-market rows."""
    x = np.vstack([m.x_emb for m in markets])
    return x.std(axis=0, ddof=1)


def build_differentiation_ivs(markets, sd=None):
    """Counts of local competitors per embedding dimension.

    A rival ``j'`` is local to ``j`` in dimension ``l`` when
    ``|x_j'l - x_jl| < sd_l`` (strict). Returns ``(own, rival)`` arrays of
    shape (N, K): same-firm and other-firm counts.
    """
    sd = embedding_sd(markets) if sd is None else np.asarray(sd, dtype=float)
    own, rival = [], []
    for m in markets:
        x = m.x_emb
        close = np.abs(x[:, None, :] - x[None, :, :]) < sd[None, None, :]
        same = m.firm_ids[:, None] == m.firm_ids[None, :]
        np.fill_diagonal(same, False)
        other = m.firm_ids[:, None] != m.firm_ids[None, :]
        own.append(np.einsum("ij,ijk->ik", same.astype(float), close))
        rival.append(np.einsum("ij,ijk->ik", other.astype(float), close))
    k = markets[0].x_emb.shape[1]
    return np.vstack(own).reshape(-1, k), np.vstack(rival).reshape(-1, k)


def build_blp_ivs(markets):
    """Characteristic sums over own-firm and rival products plus nest counts."""
    out = []
    for m in markets:
        x = np.column_stack([m.x_struct, m.x_emb])
        same = m.firm_ids[:, None] == m.firm_ids[None, :]
        same_nest = m.nest_ids[:, None] == m.nest_ids[None, :]
        own_sum = same.astype(float) @ x - x
        rival_sum = x.sum(axis=0)[None, :] - own_sum - x
        n_own = same.sum(axis=1) - 1.0
        n_nest = same_nest.sum(axis=1) - 1.0
        n_nest_own = (same & same_nest).sum(axis=1) - 1.0
        out.append(np.column_stack([own_sum, rival_sum, n_own, n_nest, n_nest_own]))
    return np.vstack(out)


def blp_iv_names(n_struct, n_emb):
    base = [f"struct_{i}" for i in range(n_struct)] + [f"emb_{i}" for i in range(n_emb)]
    return [f"own_sum_{b}" for b in base] + [f"rival_sum_{b}" for b in base] + ["n_own", "n_nest", "n_nest_own"]


@dataclass
class InstrumentSet:
    """Excluded instruments aligned with stacked product-market rows."""

    exchange_rate_iv: np.ndarray
    blp_ivs: np.ndarray
    diff_ivs_own: np.ndarray
    diff_ivs_rival: np.ndarray
    optimal_ivs: Optional[np.ndarray] = None
    blp_names: Optional[list] = None

    def __post_init__(self):
        n = np.asarray(self.exchange_rate_iv).shape[0]
        self.exchange_rate_iv = np.asarray(self.exchange_rate_iv, dtype=float).reshape(n, -1)
        for name in ("blp_ivs", "diff_ivs_own", "diff_ivs_rival", "optimal_ivs"):
            val = getattr(self, name)
            if val is None:
                continue
            arr = np.asarray(val, dtype=float).reshape(n, -1)
            if not np.all(np.isfinite(arr)):
                raise EstimationError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        if not np.all(np.isfinite(self.exchange_rate_iv)):
            raise EstimationError("exchange_rate_iv has non-finite entries")

    @property
    def n(self):
        return self.exchange_rate_iv.shape[0]

    def excluded(self, which=("exchange_rate", "blp", "diff_own", "diff_rival")):
        """Excluded-instrument matrix and column names."""
        blocks, names = [], []
        k = self.diff_ivs_own.shape[1]
        for w in which:
            if w == "exchange_rate":
                blocks.append(self.exchange_rate_iv)
                names += [f"exchange_rate_{i}" for i in range(self.exchange_rate_iv.shape[1])]
            elif w == "blp":
                blocks.append(self.blp_ivs)
                names += self.blp_names or [f"blp_{i}" for i in range(self.blp_ivs.shape[1])]
            elif w == "diff_own":
                blocks.append(self.diff_ivs_own)
                names += [f"diff_own_{i}" for i in range(k)]
            elif w == "diff_rival":
                blocks.append(self.diff_ivs_rival)
                names += [f"diff_rival_{i}" for i in range(k)]
            elif w == "optimal":
                if self.optimal_ivs is None:
                    raise EstimationError("optimal instruments have not been built")
                blocks.append(self.optimal_ivs)
                names += [f"optimal_{i}" for i in range(self.optimal_ivs.shape[1])]
            else:
                raise EstimationError(f"unknown instrument block {w!r}")
        return np.column_stack(blocks), names


def build_instruments(markets, cost_shifter, sd=None):
    """All instrument blocks for ``markets``; ``cost_shifter`` is per row."""
    own, rival = build_differentiation_ivs(markets, sd=sd)
    k = markets[0].x_emb.shape[1]
    return InstrumentSet(
        exchange_rate_iv=np.asarray(cost_shifter, dtype=float),
        blp_ivs=build_blp_ivs(markets),
        diff_ivs_own=own,
        diff_ivs_rival=rival,
        blp_names=blp_iv_names(markets[0].x_struct.shape[1], k),
    )


def collinear_columns(a, names=None, tol=1e-10):
    """Names of columns that are linear combinations of earlier columns."""
    a = np.asarray(a, dtype=float)
    names = list(range(a.shape[1])) if names is None else list(names)
    scale = np.linalg.norm(a, axis=0)
    zero = scale == 0
    a = a / np.where(zero, 1.0, scale)
    bad = [names[i] for i in np.flatnonzero(zero)]
    keep = []
    for i in np.flatnonzero(~zero):
        trial = a[:, keep + [i]]
        if np.linalg.matrix_rank(trial, tol=tol * np.sqrt(a.shape[0])) < len(keep) + 1:
            bad.append(names[i])
        else:
            keep.append(i)
    return bad


def prune_collinear(z, names, protected=0):
    """Drop instrument columns that add no rank; the first ``protected`` stay.

    The protected block is projected out first, so redundancy is always
    resolved by dropping later columns.
    """
    z = np.asarray(z, dtype=float)
    names = list(names)
    scale = np.maximum(np.linalg.norm(z, axis=0), 1e-300)
    zn = z / scale
    bad = collinear_columns(z[:, :protected], names[:protected]) if protected else []
    if bad:
        raise CollinearityError(bad)
    rest = zn[:, protected:]
    if protected:
        q, _ = np.linalg.qr(zn[:, :protected])
        rest = rest - q @ (q.T @ rest)
    keep_rest = []
    if rest.shape[1]:
        _, r, piv = linalg.qr(rest, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        rank = int(np.sum(diag > 1e-10 * np.sqrt(z.shape[0])))
        keep_rest = sorted(piv[:rank].tolist())
    keep = list(range(protected)) + [protected + i for i in keep_rest]
    dropped = [names[i] for i in range(z.shape[1]) if i not in keep]
    if dropped:
        log.info("dropping collinear instruments: %s", ", ".join(map(str, dropped)))
    return z[:, keep], [names[i] for i in keep]


# ----------------------------------------------------------------- 2SLS


@dataclass
class TslsResult:
    coef: pd.Series
    se: pd.Series
    cov: np.ndarray
    residuals: np.ndarray
    first_stage_F: dict
    cragg_donald_F: float
    n_obs: int
    objective: float


def _sandwich(xhat, e, bread, cluster=None):
    n, p = xhat.shape
    if cluster is None:
        meat = (xhat * e[:, None] ** 2).T @ xhat
        return bread @ meat @ bread * n / (n - p)
    codes, uniq = pd.factorize(np.asarray(cluster))
    g = len(uniq)
    scores = np.zeros((g, p))
    np.add.at(scores, codes, xhat * e[:, None])
    meat = scores.T @ scores
    return bread @ meat @ bread * g / (g - 1) * (n - 1) / (n - p)


def first_stage_f(x_endog, x_exog, z_excl):
    """Conventional F for excluded instruments, one per endogenous column."""
    n = x_exog.shape[0]
    full = np.column_stack([x_exog, z_excl])
    out = []
    for col in np.atleast_2d(x_endog.T):
        e_r = col - x_exog @ np.linalg.lstsq(x_exog, col, rcond=None)[0]
        e_u = col - full @ np.linalg.lstsq(full, col, rcond=None)[0]
        q = z_excl.shape[1]
        df = n - full.shape[1]
        out.append(((e_r @ e_r - e_u @ e_u) / q) / (e_u @ e_u / df))
    return out


def cragg_donald(x_endog, x_exog, z_excl):
    """Minimum-eigenvalue Cragg-Donald statistic."""
    n = x_exog.shape[0]
    x_endog = np.asarray(x_endog, dtype=float).reshape(n, -1)

    def resid(a, b):
        return a - b @ np.linalg.lstsq(b, a, rcond=None)[0]

    y_t = resid(x_endog, x_exog)
    z_t = resid(z_excl, x_exog)
    fit = z_t @ np.linalg.lstsq(z_t, y_t, rcond=None)[0]
    v = y_t - fit
    l_ex = z_excl.shape[1]
    sigma = v.T @ v / (n - x_exog.shape[1] - l_ex)
    root = np.linalg.inv(linalg.sqrtm(sigma).real)
    g = root.T @ (fit.T @ fit) @ root / l_ex
    return float(np.min(np.linalg.eigvalsh((g + g.T) / 2)))


def tsls(y, x_exog, x_endog, z_excl, names_exog=None, names_endog=None, cluster=None):
    """Two-stage least squares with robust (or clustered) standard errors.

    Raises
    ------
    CollinearityError
        When the second-stage design is rank deficient; the message names the
        offending columns.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    x_exog = np.asarray(x_exog, dtype=float).reshape(n, -1)
    x_endog = np.asarray(x_endog, dtype=float).reshape(n, -1)
    z_excl = np.asarray(z_excl, dtype=float).reshape(n, -1)
    names_exog = names_exog or [f"x{i}" for i in range(x_exog.shape[1])]
    names_endog = names_endog or [f"endog{i}" for i in range(x_endog.shape[1])]
    names = list(names_exog) + list(names_endog)
    x = np.column_stack([x_exog, x_endog])
    bad = collinear_columns(x, names)
    if bad:
        raise CollinearityError(bad)
    z = np.column_stack([x_exog, z_excl])
    if z.shape[1] < x.shape[1]:
        raise EstimationError("fewer instruments than regressors")
    zbad = collinear_columns(z, list(names_exog) + [f"iv{i}" for i in range(z_excl.shape[1])])
    if zbad:
        raise CollinearityError(zbad)
    xhat = z @ np.linalg.lstsq(z, x, rcond=None)[0]
    bread = np.linalg.inv(xhat.T @ xhat)
    b = bread @ (xhat.T @ y)
    e = y - x @ b
    cov = _sandwich(xhat, e, bread, cluster)
    zinv = np.linalg.inv(z.T @ z / n)
    g = z.T @ e / n
    obj = float(n * g @ zinv @ g)
    fs = dict(zip(names_endog, first_stage_f(x_endog, x_exog, z_excl))) if x_endog.shape[1] else {}
    cd = cragg_donald(x_endog, x_exog, z_excl) if x_endog.shape[1] else np.nan
    return TslsResult(pd.Series(b, index=names), pd.Series(np.sqrt(np.diag(cov)), index=names), cov, e, fs, cd, n, obj)


def ols(y, x, names=None, cluster=None):
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float).reshape(y.size, -1)
    names = names or [f"x{i}" for i in range(x.shape[1])]
    bad = collinear_columns(x, names)
    if bad:
        raise CollinearityError(bad)
    bread = np.linalg.inv(x.T @ x)
    b = bread @ (x.T @ y)
    e = y - x @ b
    cov = _sandwich(x, e, bread, cluster)
    return TslsResult(pd.Series(b, index=names), pd.Series(np.sqrt(np.diag(cov)), index=names), cov, e, {}, np.nan, y.size, 0.0)


# ------------------------------------------------------------ results


@dataclass
class GmmResult:
    params: DemandParams
    se: pd.Series
    objective: float
    first_stage_F: float
    cragg_donald_F: float
    n_obs: int = 0
    converged: bool = True
    n_evals: int = 0
    metadata: dict = field(default_factory=dict)

    def table(self):
        """Coefficient table with robust standard errors."""
        p = self.params
        est = {"const": p.intercept, "price": p.beta_price, "rho": p.rho}
        for i, b in enumerate(p.beta_struct):
            est[f"struct_{i}"] = b
        for i, b in enumerate(p.beta_img_mean):
            est[f"emb_{i}"] = b
        for i, b in enumerate(p.beta_img_sd):
            est[f"sd_{i}"] = b
        df = pd.DataFrame({"estimate": pd.Series(est)})
        df["se"] = self.se.reindex(df.index)
        return df

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "se": {k: (None if not np.isfinite(v) else float(v)) for k, v in self.se.items()},
            "objective": self.objective,
            "first_stage_F": self.first_stage_F,
            "cragg_donald_F": self.cragg_donald_F,
            "n_obs": self.n_obs,
            "converged": self.converged,
            "n_evals": self.n_evals,
            "metadata": self.metadata,
        }


def _params_from_linear(beta, n_struct, n_emb, sd=None, rho=0.0):
    return DemandParams(
        beta_price=float(beta[-1]),
        beta_struct=np.asarray(beta[1 : 1 + n_struct]),
        beta_img_mean=np.asarray(beta[1 + n_struct : 1 + n_struct + n_emb]),
        beta_img_sd=np.zeros(n_emb) if sd is None else np.asarray(sd, dtype=float),
        rho=float(rho),
        intercept=float(beta[0]),
    )


def ols_fixed_coef(markets):
    """Plain-logit OLS of ``ln(s_j / s_0)`` on price and characteristics."""
    data = stack_markets(markets)
    y = np.log(data.shares) - np.log(data.outside)
    res = ols(y, data.x, data.names)
    n_struct = markets[0].x_struct.shape[1]
    n_emb = markets[0].x_emb.shape[1]
    return GmmResult(_params_from_linear(res.coef.values, n_struct, n_emb), res.se, 0.0, np.nan, np.nan, data.n, metadata={"estimator": "ols"})


def tsls_fixed_coef(markets, instruments, which=("exchange_rate", "blp", "diff_own", "diff_rival"), cluster=None):
    """Fixed-coefficient logit by 2SLS with price as the endogenous regressor."""
    data = stack_markets(markets)
    y = np.log(data.shares) - np.log(data.outside)
    if isinstance(instruments, InstrumentSet):
        z, znames = instruments.excluded(which)
    else:
        z = np.asarray(instruments, dtype=float).reshape(data.n, -1)
        znames = [f"iv{i}" for i in range(z.shape[1])]
    if z.shape[0] != data.n:
        raise EstimationError("instrument rows do not match the sample")
    zfull, _ = prune_collinear(np.column_stack([data.x_exog, z]), data.names[:-1] + znames, protected=data.x_exog.shape[1])
    z_excl = zfull[:, data.x_exog.shape[1] :]
    res = tsls(y, data.x_exog, data.price, z_excl, data.names[:-1], ["price"], cluster=cluster)
    n_struct = markets[0].x_struct.shape[1]
    n_emb = markets[0].x_emb.shape[1]
    return GmmResult(
        _params_from_linear(res.coef.values, n_struct, n_emb),
        res.se,
        res.objective,
        float(res.first_stage_F["price"]),
        res.cragg_donald_F,
        data.n,
        metadata={"estimator": "2sls", "n_instruments": z_excl.shape[1]},
    )


# ------------------------------------------------------------ RCNL GMM


@dataclass
class GmmConfig:
    """Settings for :func:`gmm_rcnl`.

    ``rc_dims`` selects the embedding dimensions that carry a random
    coefficient (default: all). ``method`` is ``"nelder-mead"`` (default)
    or ``"bfgs"`` (analytic gradient of the concentrated objective).
    ``weighting`` is ``"two_step"`` or ``"identity"``. ``optimal_ivs`` is
    ``"replace"`` (exactly identified second stage), ``"augment"`` (append to
    the first-stage set) or ``None`` (single stage only).
    """

    rc_dims: Optional[Sequence[int]] = None
    estimate_rho: bool = True
    sd0: object = 0.5
    rho0: float = 0.2
    method: str = "nelder-mead"
    weighting: str = "two_step"
    optimal_ivs: Optional[str] = "replace"
    tol: float = 1e-6
    max_iter: int = 2000
    inversion_tol: float = 1e-12
    newton: bool = True
    cluster: str = "product"
    which_ivs: Sequence[str] = ("exchange_rate", "blp", "diff_own", "diff_rival")
    log_sd_bounds: tuple = (np.log(1e-4), np.log(50.0))
    logit_rho_bounds: tuple = (-9.0, 5.0)

    def to_dict(self):
        d = dict(self.__dict__)
        d["rc_dims"] = None if self.rc_dims is None else list(map(int, self.rc_dims))
        d["sd0"] = np.asarray(self.sd0, dtype=float).tolist()
        d["which_ivs"] = list(self.which_ivs)
        d["log_sd_bounds"] = list(map(float, self.log_sd_bounds))
        d["logit_rho_bounds"] = list(map(float, self.logit_rho_bounds))
        return d


class _Problem:
    """Concentrated GMM objective with hot-started share inversions."""

    def __init__(self, markets, data: StackedSample, z, config: GmmConfig, template: DemandParams):
        self.markets = list(markets)
        self.data = data
        self.z = z
        self.cfg = config
        self.template = template
        self.k = markets[0].x_emb.shape[1]
        self.rc = np.arange(self.k) if config.rc_dims is None else np.asarray(config.rc_dims, dtype=int)
        self.slices = data.slices()
        self.delta = [np.log(m.shares) - np.log1p(-m.shares.sum()) for m in self.markets]
        self.n_evals = 0
        self.last_good = None
        self.set_weight(np.linalg.inv(z.T @ z / data.n))

    # parameter maps
    def unpack(self, u):
        u = np.asarray(u, dtype=float)
        sd = np.zeros(self.k)
        sd[self.rc] = np.exp(u[: self.rc.size])
        rho = float(expit(u[self.rc.size])) if self.cfg.estimate_rho else 0.0
        return sd, rho

    def pack(self, sd, rho):
        sd = np.broadcast_to(np.asarray(sd, dtype=float), (self.k,))
        u = list(np.log(np.maximum(sd[self.rc], 1e-4)))
        if self.cfg.estimate_rho:
            u.append(float(logit(min(max(rho, 1e-4), 0.99))))
        return np.asarray(u)

    def bounds(self):
        b = [self.cfg.log_sd_bounds] * self.rc.size
        if self.cfg.estimate_rho:
            b.append(self.cfg.logit_rho_bounds)
        return b

    def params(self, sd, rho):
        return self.template.replace(beta_img_sd=sd, rho=rho)

    def set_weight(self, w):
        self.w = w
        zx = self.z.T @ self.data.x
        self.zx = zx
        a = zx.T @ w @ zx
        if np.linalg.matrix_rank(a) < a.shape[0]:
            raise CollinearityError(collinear_columns(self.data.x, self.data.names) or ["instrument projection"])
        self.proj = np.linalg.solve(a, zx.T @ w)

    # core
    def deltas(self, sd, rho):
        params = self.params(sd, rho)
        out = []
        for t, m in enumerate(self.markets):
            try:
                d = invert_shares(m.shares, m, params, delta0=self.delta[t], tol=self.cfg.inversion_tol, newton=self.cfg.newton)
            except InversionError:
                # retry from the logit start before giving up
                d = invert_shares(m.shares, m, params, tol=self.cfg.inversion_tol, newton=self.cfg.newton)
            out.append(d)
        return out

    def evaluate(self, u):
        sd, rho = self.unpack(u)
        self.n_evals += 1
        try:
            ds = self.deltas(sd, rho)
        except (InversionError, DemandError, np.linalg.LinAlgError) as exc:
            log.info("inversion failed at sd=%s rho=%.4f: %s", sd[self.rc], rho, exc)
            return np.inf, None, None
        self.delta = ds
        delta = np.concatenate(ds)
        beta = self.proj @ (self.z.T @ delta)
        xi = delta - self.data.x @ beta
        g = self.z.T @ xi / self.data.n
        return float(self.data.n * g @ self.w @ g), beta, xi

    def objective(self, u):
        return self.evaluate(u)[0]

    def ddelta(self, sd, rho, deltas=None):
        """(N, n_theta2) derivative of mean utilities in the natural parameters."""
        params = self.params(sd, rho)
        deltas = self.delta if deltas is None else deltas
        blocks = []
        for m, d in zip(self.markets, deltas):
            jac = share_jacobian_delta(m, params, delta=d)
            ds = share_derivatives_sd(m, params, delta=d)[:, self.rc]
            if self.cfg.estimate_rho:
                ds = np.column_stack([ds, share_derivative_rho(m, params, delta=d)])
            blocks.append(-np.linalg.solve(jac, ds))
        return np.vstack(blocks)

    def gradient(self, u):
        u = np.asarray(u, dtype=float)
        val, beta, xi = self.evaluate(u)
        if not np.isfinite(val):
            # finite penalty pulling back toward the last good point so the
            # line search can backtrack
            if self.last_good is None:
                return val, np.zeros(u.size)
            u0, f0 = self.last_good
            gap = u - u0
            return f0 + 1e6 * (1.0 + gap @ gap), 2e6 * gap
        self.last_good = (u.copy(), val)
        sd, rho = self.unpack(u)
        dd = self.ddelta(sd, rho)
        g = self.z.T @ xi / self.data.n
        grad_nat = 2.0 * (self.z.T @ dd).T @ self.w @ g
        chain = list(sd[self.rc])
        if self.cfg.estimate_rho:
            chain.append(rho * (1 - rho))
        return val, grad_nat * np.asarray(chain)

    def cluster_codes(self):
        if self.cfg.cluster == "product":
            return pd.factorize(self.data.product_ids)[0]
        if self.cfg.cluster == "market":
            return self.data.market_index
        if self.cfg.cluster in (None, "none"):
            return np.arange(self.data.n)
        raise EstimationError(f"unknown cluster level {self.cfg.cluster!r}")

    def moment_cov(self, xi):
        codes = self.cluster_codes()
        scores = np.zeros((codes.max() + 1, self.z.shape[1]))
        np.add.at(scores, codes, self.z * xi[:, None])
        return scores.T @ scores / self.data.n


def _minimize(problem: _Problem, u0, cfg: GmmConfig):
    if u0.size == 0:
        return u0, True
    if cfg.method == "nelder-mead":
        res = optimize.minimize(
            problem.objective,
            u0,
            method="Nelder-Mead",
            bounds=problem.bounds(),
            options={"fatol": cfg.tol, "xatol": 1e-6, "maxiter": cfg.max_iter, "maxfev": cfg.max_iter * 2, "adaptive": u0.size > 3},
        )
    elif cfg.method == "bfgs":
        res = optimize.minimize(problem.gradient, u0, jac=True, method="L-BFGS-B", bounds=problem.bounds(), options={"ftol": cfg.tol * 1e-3, "gtol": 1e-8, "maxiter": cfg.max_iter})
    else:
        raise EstimationError(f"unknown optimizer {cfg.method!r}")
    if not res.success:
        log.warning("outer optimizer: %s", res.message)
    return np.asarray(res.x), bool(res.success)


def gmm_rcnl(markets, instruments, config: Optional[GmmConfig] = None):
    """Nested fixed-point GMM for the random-coefficient nested logit.

    Parameters
    ----------
    markets : list of Market
        Markets with observed ``shares``.
    instruments : InstrumentSet or (N, L) array
        Excluded instruments for the first stage. Exogenous characteristics
        are always included.
    config : GmmConfig

    Returns
    -------
    GmmResult
        Estimates, clustered sandwich standard errors, the objective at the
        optimum and price first-stage diagnostics.
    """
    cfg = config or GmmConfig()
    data = stack_markets(markets)
    n_struct = markets[0].x_struct.shape[1]
    k = markets[0].x_emb.shape[1]
    if isinstance(instruments, InstrumentSet):
        z_ex, znames = instruments.excluded(cfg.which_ivs)
    else:
        z_ex = np.asarray(instruments, dtype=float).reshape(data.n, -1)
        znames = [f"iv{i}" for i in range(z_ex.shape[1])]
    z1, znames = prune_collinear(np.column_stack([data.x_exog, z_ex]), data.names[:-1] + znames, protected=data.x_exog.shape[1])
    fs = first_stage_f(data.price, data.x_exog, z1[:, data.x_exog.shape[1] :])[0]
    cd = cragg_donald(data.price, data.x_exog, z1[:, data.x_exog.shape[1] :])

    template = _params_from_linear(np.zeros(data.x.shape[1]), n_struct, k)
    problem = _Problem(markets, data, z1, cfg, template)
    if z1.shape[1] < data.x.shape[1] + problem.rc.size + int(cfg.estimate_rho):
        raise EstimationError("model is under-identified: too few instruments")
    sd0 = np.broadcast_to(np.asarray(cfg.sd0, dtype=float), (k,))
    u0 = problem.pack(sd0, cfg.rho0)
    if cfg.weighting == "identity":
        problem.set_weight(np.eye(z1.shape[1]))
    elif cfg.weighting != "two_step":
        raise EstimationError(f"unknown weighting {cfg.weighting!r}")

    u1, ok1 = _minimize(problem, u0, cfg)
    val1, beta1, xi1 = problem.evaluate(u1)
    if not np.isfinite(val1):
        raise EstimationError("objective is infinite at the first-stage optimum")
    stages = [{"objective": val1, "n_instruments": z1.shape[1]}]
    u_hat, ok, beta, xi = u1, ok1, beta1, xi1

    if cfg.optimal_ivs is not None:
        sd1, rho1 = problem.unpack(u1)
        z2 = _optimal_instruments(problem, beta1, sd1, rho1, cfg.optimal_ivs)
        p2 = _Problem(markets, data, z2, cfg, template)
        p2.delta = problem.delta
        if cfg.weighting == "two_step":
            p2.set_weight(np.linalg.pinv(p2.moment_cov(xi1)))
        else:
            p2.set_weight(np.eye(z2.shape[1]))
        u_hat, ok = _minimize(p2, u1, cfg)
        val, beta, xi = p2.evaluate(u_hat)
        if not np.isfinite(val):
            raise EstimationError("objective is infinite at the second-stage optimum")
        stages.append({"objective": val, "n_instruments": z2.shape[1]})
        problem.n_evals += p2.n_evals
        problem_final = p2
    else:
        if cfg.weighting == "two_step":
            problem.set_weight(np.linalg.pinv(problem.moment_cov(xi1)))
            u_hat, ok = _minimize(problem, u1, cfg)
            val, beta, xi = problem.evaluate(u_hat)
            stages.append({"objective": val, "n_instruments": z1.shape[1]})
        problem_final = problem

    sd_hat, rho_hat = problem_final.unpack(u_hat)
    params = _params_from_linear(beta, n_struct, k, sd_hat, rho_hat)
    se = _gmm_se(problem_final, xi, sd_hat, rho_hat)
    return GmmResult(
        params=params,
        se=se,
        objective=max(float(stages[-1]["objective"]), 0.0),
        first_stage_F=float(fs),
        cragg_donald_F=float(cd),
        n_obs=data.n,
        converged=ok,
        n_evals=problem.n_evals,
        metadata={
            "optimizer": cfg.method,
            "weighting": cfg.weighting,
            "clustering": cfg.cluster,
            "optimal_ivs": cfg.optimal_ivs,
            "stages": stages,
            "rc_dims": problem.rc.tolist(),
            "instruments": znames,
        },
    )


def _optimal_instruments(problem: _Problem, beta, sd, rho, mode):
    """Expected-Jacobian instruments at ``xi = 0`` and first-stage estimates."""
    data = problem.data
    z1 = problem.z
    p_hat = z1 @ np.linalg.lstsq(z1, data.price, rcond=None)[0]
    x0 = np.column_stack([data.x_exog, p_hat])
    delta0 = x0 @ beta
    deltas = [delta0[s] for s in problem.slices]
    dd = problem.ddelta(sd, rho, deltas=deltas)
    if mode == "replace":
        return np.column_stack([data.x_exog, p_hat, dd])
    if mode == "augment":
        z, _ = prune_collinear(np.column_stack([z1, dd]), list(range(z1.shape[1] + dd.shape[1])), protected=data.x_exog.shape[1])
        return z
    raise EstimationError(f"unknown optimal_ivs mode {mode!r}")


def _gmm_se(problem: _Problem, xi, sd, rho):
    data = problem.data
    n = data.n
    dd = problem.ddelta(sd, rho)
    jac = np.column_stack([-data.x, dd])
    g_mat = problem.z.T @ jac / n
    s = problem.moment_cov(xi)
    w = problem.w
    bread = np.linalg.pinv(g_mat.T @ w @ g_mat)
    cov = bread @ g_mat.T @ w @ s @ w @ g_mat @ bread / n
    names = data.names + [f"sd_{i}" for i in problem.rc] + (["rho"] if problem.cfg.estimate_rho else [])
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return pd.Series(se, index=names)
