"""Geometry of the visual characteristics space.

Embeddings are stored as rows of a float64 array. Full-dimension embeddings
live on the unit sphere; reduced embeddings are PCA scores.
"""

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import cdist

UNIT_NORM_TOL = 1e-9


class GeometryError(ValueError):
    pass


def as_embeddings(values, unit=True):
    """Validate a (n, d) embedding array; ``unit`` enforces the sphere invariant."""
    arr = np.array(values, dtype=float, copy=True)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise GeometryError(f"expected a 2-d array of embeddings, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("embeddings contain non-finite entries")
    if unit and arr.shape[0]:
        norms = np.linalg.norm(arr, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
        if bad.size:
            raise GeometryError(f"{bad.size} embeddings are not unit length (first row {bad[0]})")
    arr.setflags(write=False)
    return arr


def normalize(values):
    arr = np.asarray(values, dtype=float)
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise GeometryError("cannot normalize a zero vector")
    return arr / norms


def distance(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise GeometryError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def pairwise_distances(x, y=None, block=1024):
    """Exact Euclidean distances, evaluated in row blocks to bound memory."""
    x = np.asarray(x, dtype=float)
    y = x if y is None else np.asarray(y, dtype=float)
    if x.shape[1] != y.shape[1]:
        raise GeometryError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    out = np.empty((x.shape[0], y.shape[0]))
    for start in range(0, x.shape[0], block):
        stop = min(start + block, x.shape[0])
        out[start:stop] = cdist(x[start:stop], y)
    return out


class DistanceCache:
    """Per-snapshot distance matrix, computed on first use.

    Caches are values owned by the caller; nothing here is global.
    """

    def __init__(self, embeddings):
        self.embeddings = np.asarray(embeddings, dtype=float)
        self._matrix = None

    @property
    def matrix(self):
        if self._matrix is None:
            self._matrix = pairwise_distances(self.embeddings)
            self._matrix.setflags(write=False)
        return self._matrix


def distance_range(embeddings):
    """(min, max) off-diagonal pairwise distance."""
    d = pairwise_distances(embeddings)
    iu = np.triu_indices(d.shape[0], k=1)
    if iu[0].size == 0:
        raise GeometryError("need at least two embeddings")
    vals = d[iu]
    return float(vals.min()), float(vals.max())


def check_distance_range(embeddings, lo=0.0002, hi=0.9563):
    """True when every pairwise distance lies inside ``[lo, hi]``."""
    dmin, dmax = distance_range(embeddings)
    return lo <= dmin and dmax <= hi


# --------------------------------------------------------------------- PCA


@dataclass(frozen=True)
class PcaReducer:
    """Mean-centering plus projection on the leading principal directions.

    Attributes
    ----------
    mean : (d,) array
    components : (K, d) array with orthonormal rows
    eigenvalues : (K,) array, nonincreasing sample-covariance eigenvalues
    total_variance : float
        Trace of the sample covariance, used for the explained share.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    total_variance: float

    def __post_init__(self):
        comps = np.asarray(self.components, dtype=float)
        if comps.ndim != 2 or comps.shape[1] != np.asarray(self.mean).shape[0]:
            raise GeometryError("components and mean disagree on dimension")
        gram = comps @ comps.T
        if not np.allclose(gram, np.eye(comps.shape[0]), atol=1e-8):
            raise GeometryError("components are not orthonormal")
        ev = np.asarray(self.eigenvalues, dtype=float)
        if np.any(np.diff(ev) > 1e-12 * max(1.0, float(ev[0]) if ev.size else 1.0)):
            raise GeometryError("eigenvalues must be nonincreasing")

    @property
    def dim(self):
        return self.components.shape[1]

    @property
    def k(self):
        return self.components.shape[0]

    @property
    def explained_variance_share(self):
        return float(np.clip(self.eigenvalues.sum() / self.total_variance, 0.0, 1.0))

    def transform(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise GeometryError(f"dimension mismatch: {x.shape[-1]} vs {self.dim}")
        return (x - self.mean) @ self.components.T

    def inverse_transform(self, scores):
        return np.asarray(scores, dtype=float) @ self.components + self.mean

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "total_variance": float(self.total_variance),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            mean=np.asarray(d["mean"], dtype=float),
            components=np.asarray(d["components"], dtype=float),
            eigenvalues=np.asarray(d["eigenvalues"], dtype=float),
            total_variance=float(d["total_variance"]),
        )


def fit_pca(corpus, k):
    """Fit a ``k``-component PCA on the rows of ``corpus``.

    Signs are fixed so that the largest-magnitude loading of each component is
    positive, which makes the fit deterministic across LAPACK builds.
    """
    x = np.asarray(corpus, dtype=float)
    n, d = x.shape
    if not 1 <= k <= d:
        raise GeometryError(f"need 1 <= k <= {d}, got {k}")
    if n <= k:
        raise GeometryError(f"corpus size {n} must exceed k={k}")
    mean = x.mean(axis=0)
    centered = x - mean
    total = float(np.sum(centered**2) / (n - 1))
    if total <= 0.0:
        raise GeometryError("degenerate corpus: zero variance")
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    eig = sing**2 / (n - 1)
    comps = vt[:k].copy()
    flip = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)])
    comps *= flip[:, None]
    return PcaReducer(mean=mean, components=comps, eigenvalues=eig[:k].copy(), total_variance=total)


def reduce(reducer, e):
    return reducer.transform(e)


# ------------------------------------------------------- radial statistics


@dataclass(frozen=True)
class RadialCount:
    product_id: object
    ring_lo: float
    ring_hi: float
    count: int


def _check_rings(rings):
    rings = [(float(lo), float(hi)) for lo, hi in rings]
    for lo, hi in rings:
        if lo < 0 or hi <= lo:
            raise GeometryError(f"invalid ring ({lo}, {hi})")
    ordered = sorted(rings)
    for (_, hi), (lo2, _) in zip(ordered, ordered[1:]):
        if lo2 < hi:
            raise GeometryError("rings overlap")
    return rings


def _focal_index(ids, focal):
    hits = np.flatnonzero(np.asarray(ids) == focal)
    if hits.size == 0:
        raise KeyError(f"unknown product id {focal!r}")
    return int(hits[0])


def radial_counts(focal, ids, embeddings, rings):
    """Competitors strictly inside each ring ``lo < ||x_j' - x_j|| < hi``."""
    rings = _check_rings(rings)
    idx = _focal_index(ids, focal)
    emb = np.asarray(embeddings, dtype=float)
    d = cdist(emb[idx : idx + 1], emb)[0]
    d[idx] = np.nan  # the focal product never counts itself
    out = []
    for lo, hi in rings:
        with np.errstate(invalid="ignore"):
            c = int(np.sum((d > lo) & (d < hi)))
        out.append(RadialCount(focal, lo, hi, c))
    return out


def ring_count_matrix(embeddings, rings, others=None, block=1024):
    """Counts for every row of ``embeddings`` against ``others`` (default: itself).

    Returns an (n, len(rings)) integer array. When ``others`` is omitted the
    focal product is excluded from its own counts.
    """
    rings = _check_rings(rings)
    emb = np.asarray(embeddings, dtype=float)
    ref = emb if others is None else np.asarray(others, dtype=float)
    out = np.zeros((emb.shape[0], len(rings)), dtype=np.int64)
    for start in range(0, emb.shape[0], block):
        stop = min(start + block, emb.shape[0])
        d = cdist(emb[start:stop], ref)
        if others is None:
            d[np.arange(stop - start), np.arange(start, stop)] = np.nan
        with np.errstate(invalid="ignore"):
            for r, (lo, hi) in enumerate(rings):
                out[start:stop, r] = np.sum((d > lo) & (d < hi), axis=1)
    return out


class Neighbors(NamedTuple):
    ids: list
    distances: np.ndarray
    complete: bool  # False when fewer than k rivals exist


def nearest_k(focal, ids, embeddings, k):
    """The ``k`` closest rivals, ascending; ties go to the smaller product id."""
    if k < 1:
        raise GeometryError("k must be >= 1")
    ids = np.asarray(ids)
    idx = _focal_index(ids, focal)
    emb = np.asarray(embeddings, dtype=float)
    d = cdist(emb[idx : idx + 1], emb)[0]
    mask = np.ones(len(ids), dtype=bool)
    mask[idx] = False
    cand = np.flatnonzero(mask)
    order = np.lexsort((ids[cand], d[cand]))
    chosen = cand[order[:k]]
    return Neighbors(ids[chosen].tolist(), d[chosen], len(cand) >= k)


def nearest_k_sets(embeddings, k, ids=None):
    """Sets of k-nearest row indices for every row (brute force, exact)."""
    emb = np.asarray(embeddings, dtype=float)
    n = emb.shape[0]
    ids = np.arange(n) if ids is None else np.asarray(ids)
    d = pairwise_distances(emb)
    np.fill_diagonal(d, np.inf)
    out = []
    for i in range(n):
        order = np.lexsort((ids, d[i]))
        out.append(frozenset(order[: min(k, n - 1)].tolist()))
    return out


# ------------------------------------------------------ location generator


class PerturbedLocations(NamedTuple):
    points: np.ndarray  # (n, d), unit length unless renormalize=False
    raw: np.ndarray  # seed + noise before renormalization
    seed_index: np.ndarray
    c_level: np.ndarray


def perturb_locations(seeds, c_levels, n_per_level, rng_seed, renormalize=True):
    """Candidate locations from Gaussian perturbation of sampled seeds.

    Each output is a uniformly sampled seed plus noise with per-dimension
    standard deviation ``sd_l / sqrt(c)``, where ``sd_l`` is the sample
    standard deviation of dimension ``l`` across the seed corpus.
    """
    seeds = np.asarray(seeds, dtype=float)
    if seeds.ndim != 2 or seeds.shape[0] == 0:
        raise GeometryError("empty seed corpus")
    c_levels = np.asarray(c_levels, dtype=float)
    if np.any(c_levels <= 0):
        raise GeometryError("c_levels must be positive")
    rng = np.random.default_rng(rng_seed)
    sd = seeds.std(axis=0, ddof=1) if seeds.shape[0] > 1 else np.zeros(seeds.shape[1])
    levels = np.repeat(c_levels, n_per_level)
    pick = rng.integers(0, seeds.shape[0], size=levels.size)
    noise = rng.standard_normal((levels.size, seeds.shape[1])) * sd / np.sqrt(levels)[:, None]
    raw = seeds[pick] + noise
    points = normalize(raw) if renormalize else raw.copy()
    return PerturbedLocations(points, raw, pick, levels)
