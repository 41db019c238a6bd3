"""Reduced-form panel evidence: spatial regressions and event studies.

Fixed effects are absorbed by alternating projections (cycling group means),
so no dummy matrices are built. Standard errors are clustered sandwiches with
the finite-cluster correction ``G/(G-1) (N-1)/(N-k)``, where ``k`` counts the
slope regressors only (absorbed effects are treated as nested in clusters).
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from copyspace.geometry import pairwise_distances

log = logging.getLogger(__name__)

DEMEAN_TOL = 1e-10
DEMEAN_MAX_ITER = 500


class PanelError(ValueError):
    pass


def _codes(groups):
    out = []
    for g in groups:
        codes, _ = pd.factorize(np.asarray(g), sort=True)
        if np.any(codes < 0):
            raise PanelError("fixed-effect group contains missing values")
        out.append(codes)
    return out


def _group_mean(values, codes):
    n_groups = codes.max() + 1
    counts = np.bincount(codes, minlength=n_groups).astype(float)
    sums = np.zeros((n_groups, values.shape[1]))
    np.add.at(sums, codes, values)
    return sums / counts[:, None]


def demean(values, groups, tol=DEMEAN_TOL, max_iter=DEMEAN_MAX_ITER):
    """Residuals of ``values`` after projecting out every fixed-effect group.

    Parameters
    ----------
    values : (N,) or (N, p) array
    groups : sequence of (N,) label arrays, one per fixed-effect dimension

    Returns
    -------
    (demeaned, n_cycles)
    """
    v = np.array(values, dtype=float)
    squeeze = v.ndim == 1
    v = v.reshape(v.shape[0], -1)
    codes = _codes(groups)
    if not codes:
        return (v[:, 0] if squeeze else v), 0
    for it in range(1, max_iter + 1):
        change = 0.0
        for c in codes:
            m = _group_mean(v, c)[c]
            v -= m
            change = max(change, float(np.max(np.abs(m))) if m.size else 0.0)
        if change < tol:
            return (v[:, 0] if squeeze else v), it
        if len(codes) == 1:
            return (v[:, 0] if squeeze else v), it
    log.warning("demeaning hit %d cycles without reaching tol %g", max_iter, tol)
    return (v[:, 0] if squeeze else v), max_iter


def cluster_cov(x, e, clusters, bread=None, k=None):
    """Cluster-robust sandwich with the ``G/(G-1) (N-1)/(N-k)`` correction."""
    n, p = x.shape
    k = p if k is None else k
    bread = np.linalg.inv(x.T @ x) if bread is None else bread
    codes, uniq = pd.factorize(np.asarray(clusters))
    g = len(uniq)
    if g < 2:
        raise PanelError("need at least two clusters")
    scores = np.zeros((g, p))
    np.add.at(scores, codes, x * e[:, None])
    meat = scores.T @ scores
    return bread @ meat @ bread * (g / (g - 1)) * ((n - 1) / (n - k))


@dataclass
class PanelFit:
    coef: pd.Series
    se: pd.Series
    cov: np.ndarray
    n_obs: int
    n_clusters: int
    residuals: np.ndarray
    n_cycles: int = 0

    def table(self, level=0.95):
        z = stats.norm.ppf(0.5 + level / 2)
        return pd.DataFrame(
            {
                "coef": self.coef,
                "se": self.se,
                "ci_lo": self.coef - z * self.se,
                "ci_hi": self.coef + z * self.se,
            }
        )


def within_ols(y, x, fe, clusters, names=None, tol=DEMEAN_TOL, max_iter=DEMEAN_MAX_ITER, drop_degenerate=False):
    """OLS of ``y`` on ``x`` with absorbed fixed effects and clustered SEs.

    With ``drop_degenerate`` set, regressors without variation after
    demeaning (or collinear with earlier ones) are dropped with a log entry
    and reported as NaN instead of raising.

    Raises
    ------
    PanelError
        When a regressor has no variation left after demeaning (or is
        collinear with others); the message names the column.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float).reshape(y.size, -1)
    names = list(names) if names is not None else [f"x{i}" for i in range(x.shape[1])]
    both, cycles = demean(np.column_stack([y, x]), fe, tol=tol, max_iter=max_iter)
    yd, xd = both[:, 0], both[:, 1:]
    scale = np.maximum(np.abs(x).max(axis=0), 1.0)
    flat_idx = [i for i in range(xd.shape[1]) if np.max(np.abs(xd[:, i])) < 1e-9 * scale[i]]
    if flat_idx and not drop_degenerate:
        raise PanelError("no variation after absorbing fixed effects: " + ", ".join(names[i] for i in flat_idx))
    cand = [i for i in range(xd.shape[1]) if i not in flat_idx]
    keep, bad = cand, []
    gram = xd[:, cand].T @ xd[:, cand]
    if cand and np.linalg.matrix_rank(gram / np.maximum(np.diag(gram), 1e-300)[:, None]) < len(cand):
        keep = []
        for i in cand:
            trial = xd[:, keep + [i]]
            if np.linalg.matrix_rank(trial / np.linalg.norm(trial, axis=0)) < len(keep) + 1:
                bad.append(i)
            else:
                keep.append(i)
        if not drop_degenerate:
            raise PanelError("collinear after absorbing fixed effects: " + ", ".join(names[i] for i in bad))
    if flat_idx or bad:
        log.info("dropping unidentified regressors: %s", ", ".join(names[i] for i in sorted(flat_idx + bad)))
    if not keep:
        raise PanelError("no identified regressors after absorbing fixed effects")
    xk = xd[:, keep]
    bread = np.linalg.inv(xk.T @ xk)
    b = bread @ (xk.T @ yd)
    e = yd - xk @ b
    cov_k = cluster_cov(xk, e, clusters, bread=bread)
    g = len(pd.unique(np.asarray(clusters)))
    p = xd.shape[1]
    coef = np.full(p, np.nan)
    coef[keep] = b
    cov = np.full((p, p), np.nan)
    cov[np.ix_(keep, keep)] = cov_k
    return PanelFit(pd.Series(coef, index=names), pd.Series(np.sqrt(np.diag(cov)), index=names), cov, y.size, g, e, cycles)


def dummy_ols(y, x, fe):
    """Explicit-dummy OLS slopes (small-instance oracle for :func:`within_ols`)."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float).reshape(y.size, -1)
    blocks = [x, np.ones((y.size, 1))]
    for g in _codes(fe):
        d = np.zeros((y.size, g.max() + 1))
        d[np.arange(y.size), g] = 1.0
        blocks.append(d[:, 1:])
    design = np.column_stack(blocks)
    b = np.linalg.lstsq(design, y, rcond=None)[0]
    return b[: x.shape[1]]


# ---------------------------------------------------------- transforms


def arsinh(v):
    return np.arcsinh(np.asarray(v, dtype=float))


def arsinh_elasticity(gamma, ring_count, y):
    """Back out an elasticity from an arsinh semi-elasticity.

    ``gamma * R * sqrt(1 + 1 / y^2)`` with ``R`` the ring count the
    coefficient multiplies and ``y`` the outcome level.
    """
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore"):
        return np.asarray(gamma) * np.asarray(ring_count) * np.sqrt(1.0 + 1.0 / y**2)


OUTCOME_TRANSFORMS = {"revenue": arsinh, "quantity": arsinh, "list_price": np.log}


def transform_outcome(df, outcome):
    if outcome not in OUTCOME_TRANSFORMS:
        raise PanelError(f"unknown outcome {outcome!r}; choose from {sorted(OUTCOME_TRANSFORMS)}")
    vals = df[outcome].to_numpy(dtype=float)
    if outcome == "list_price" and np.any(vals <= 0):
        raise PanelError("list prices must be positive for the log transform")
    return OUTCOME_TRANSFORMS[outcome](vals)


# ---------------------------------------------------- spatial regression


def spatial_regression(panel: pd.DataFrame, ring_cols: Sequence[str], outcome="revenue", fe=("product_id", "license", "country"), cluster="product_id"):
    """Regress a transformed outcome on ring counts per 100 products.

    Returns a :class:`PanelFit` whose coefficients are semi-elasticities for
    an additional 100 competitors in each ring.
    """
    y = transform_outcome(panel, outcome)
    x = panel[list(ring_cols)].to_numpy(dtype=float) / 100.0
    groups = [panel[c].to_numpy() for c in fe]
    return within_ols(y, x, groups, panel[cluster].to_numpy(), names=list(ring_cols))


# ------------------------------------------------------- treatment timing


def first_treatment_periods(product_ids, entry_periods, embeddings, k=5):
    """First period in which a new entrant joins each product's k-nearest set.

    For every period with entry, each earlier product's ``k`` nearest rivals
    among products present at that period are recomputed (ties to the
    smaller id); the product is treated when the set contains a product
    entering that period. Returns a float array, ``inf`` for never treated.
    """
    ids = np.asarray(product_ids)
    entry = np.asarray(entry_periods)
    emb = np.asarray(embeddings, dtype=float)
    first = np.full(ids.size, np.inf)
    order_ids = np.argsort(np.argsort(ids, kind="stable"), kind="stable")
    for t in np.unique(entry):
        present = np.flatnonzero(entry <= t)
        new = entry[present] == t
        if not np.any(new) or np.all(new):
            continue
        d = pairwise_distances(emb[present])
        np.fill_diagonal(d, np.inf)
        rank = order_ids[present]
        for row, i in enumerate(present):
            if new[row] or np.isfinite(first[i]):
                continue
            nk = np.lexsort((rank, d[row]))[: min(k, present.size - 1)]
            if np.any(new[nk]):
                first[i] = t
    return first


def event_time(period, first_treat):
    """``t - T_j`` (NaN for never-treated rows)."""
    first = np.asarray(first_treat, dtype=float)
    with np.errstate(invalid="ignore"):
        return np.where(np.isfinite(first), np.asarray(period, dtype=float) - first, np.nan)


def event_dummies(rel_time, window=(-5, 9), omit=-1):
    """Event-time indicators with binned endpoints; never-treated rows are zero.

    Returns ``(matrix, labels)`` where ``labels`` lists the event times kept.
    """
    lo, hi = window
    rel = np.asarray(rel_time, dtype=float)
    binned = np.clip(rel, lo, hi)
    labels = [s for s in range(lo, hi + 1) if s != omit]
    mat = np.zeros((rel.size, len(labels)))
    for c, s in enumerate(labels):
        with np.errstate(invalid="ignore"):
            mat[:, c] = binned == s
    return mat, labels


@dataclass
class EventCurve:
    table: pd.DataFrame  # columns: event_time, coef, se, ci_lo, ci_hi
    fit: object = None

    def coef(self, s):
        return float(self.table.set_index("event_time").loc[s, "coef"])


def event_study(panel: pd.DataFrame, outcome, first_treat_col="first_treat", period_col="period", fe=("firm_id", "license", "country", "period"), cluster="firm_id", window=(-5, 9), transform=True):
    """Dynamic difference-in-differences with ``beta_{-1} = 0``.

    ``outcome`` is transformed with arsinh/log when it is one of the standard
    outcome columns and ``transform`` is set; otherwise used as is.
    """
    first = panel[first_treat_col].to_numpy(dtype=float)
    if not np.any(np.isfinite(first)):
        raise PanelError("no treated units: event-study coefficients are undefined")
    y = transform_outcome(panel, outcome) if (transform and outcome in OUTCOME_TRANSFORMS) else panel[outcome].to_numpy(dtype=float)
    rel = event_time(panel[period_col].to_numpy(), first)
    mat, labels = event_dummies(rel, window)
    names = [f"s{s}" for s in labels]
    fit = within_ols(y, mat, [panel[c].to_numpy() for c in fe], panel[cluster].to_numpy(), names=names, drop_degenerate=True)
    z = stats.norm.ppf(0.975)
    rows = [{"event_time": s, "coef": fit.coef[f"s{s}"], "se": fit.se[f"s{s}"]} for s in labels]
    rows.append({"event_time": -1, "coef": 0.0, "se": 0.0})
    tab = pd.DataFrame(rows).sort_values("event_time").reset_index(drop=True)
    tab["ci_lo"] = tab["coef"] - z * tab["se"]
    tab["ci_hi"] = tab["coef"] + z * tab["se"]
    return EventCurve(tab, fit)


# --------------------------------------------------- imputation estimator


def fit_additive_effects(y, groups, tol=DEMEAN_TOL, max_iter=DEMEAN_MAX_ITER):
    """Backfit ``y = mu + sum_g alpha_g[code]``; returns ``(mu, alphas, codes_uniques)``."""
    y = np.asarray(y, dtype=float)
    levels = []
    codes = []
    for g in groups:
        c, u = pd.factorize(np.asarray(g), sort=True)
        codes.append(c)
        levels.append(u)
    mu = float(y.mean())
    alphas = [np.zeros(len(u)) for u in levels]
    resid = y - mu
    for _ in range(max_iter):
        change = 0.0
        for gi, c in enumerate(codes):
            resid += alphas[gi][c]
            sums = np.bincount(c, weights=resid, minlength=len(levels[gi]))
            cnt = np.bincount(c, minlength=len(levels[gi]))
            new = sums / cnt
            change = max(change, float(np.max(np.abs(new - alphas[gi]))))
            alphas[gi] = new
            resid -= new[c]
        if change < tol:
            break
    return mu, alphas, levels


def imputation_event_study(panel: pd.DataFrame, outcome, first_treat_col="first_treat", period_col="period", fe=("firm_id", "license", "country", "period"), horizon=9, transform=True):
    """Imputation estimator of dynamic effects.

    Fixed effects are fit on untreated rows only (never treated, or before
    treatment). Treated rows get imputed untreated outcomes; the effect at
    event time ``s`` is the mean of actual minus imputed (``s >= horizon``
    pooled into ``horizon``). Treated rows whose effect levels never appear
    untreated are dropped with a log entry.
    """
    first = panel[first_treat_col].to_numpy(dtype=float)
    if not np.any(np.isfinite(first)):
        raise PanelError("no treated units")
    y = transform_outcome(panel, outcome) if (transform and outcome in OUTCOME_TRANSFORMS) else panel[outcome].to_numpy(dtype=float)
    period = panel[period_col].to_numpy(dtype=float)
    rel = event_time(period, first)
    treated = np.isfinite(rel) & (rel >= 0)
    untreated = ~treated
    if untreated.sum() < 2:
        raise PanelError("not enough untreated observations to fit fixed effects")
    groups = [panel[c].to_numpy() for c in fe]
    mu, alphas, levels = fit_additive_effects(y[untreated], [g[untreated] for g in groups])
    idx = np.flatnonzero(treated)
    imputed = np.full(idx.size, mu)
    ok = np.ones(idx.size, dtype=bool)
    for g, a, lv in zip(groups, alphas, levels):
        pos = pd.Index(lv).get_indexer(g[idx])
        ok &= pos >= 0
        imputed += np.where(pos >= 0, a[np.maximum(pos, 0)], 0.0)
    if not np.all(ok):
        log.info("dropping %d treated rows with unidentified fixed effects", int((~ok).sum()))
    tau = y[idx][ok] - imputed[ok]
    s = np.minimum(rel[idx][ok], horizon).astype(int)
    tab = pd.DataFrame({"event_time": s, "tau": tau}).groupby("event_time")["tau"].agg(["mean", "count"]).reset_index()
    tab = tab.rename(columns={"mean": "coef", "count": "n_obs"})
    return EventCurve(tab)
