"""Chi-square similarity, K-NN retrieval and the K-NN similarity Gaussian.

A query histogram is compared with its K nearest training histograms.  The
pairwise chi-square distances among those K neighbours define a 1-D Gaussian
``N(mu, sigma2)``; the query's own K distances are then scored under it and
the log-probabilities summed into ``L`` (``L <= 0``, more negative means more
anomalous).

Distances inside :func:`knn_retrieve`, :func:`fit_gaussian` and
:func:`joint_score` are computed in units of the greatest common divisor of
the counts involved.  Chi-square is homogeneous of degree one, so this changes
nothing mathematically, but it makes the decision pipeline exactly invariant
when every count is multiplied by the same integer: each term ``d^2 / (s*g)``
is then the same rational number and rounds to the same double.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import reduce

import numpy as np
from scipy.special import log_ndtr

from ._validation import check_histograms
from .exceptions import DegenerateK, PoolTooSmall

SIGMA2_MIN = 1e-6
P_MIN = 1e-12
DEFAULT_K = 20
TAILS = ("upper", "two-sided")
# Float chi-square sums carry a relative error of a few N*eps; distances closer
# than this are re-ranked with exact rational arithmetic.
TIE_RTOL = 1e-12


def chi2_terms_sum(a: np.ndarray, b: np.ndarray, unit: float = 1.0) -> np.ndarray:
    """Half-sum of ``(a-b)^2 / ((a+b) * unit)`` over the last axis.

    Broadcasts like ``a - b``.  Bins empty in both histograms contribute 0.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    d = (a - b).astype(np.float64)
    # a + b == 0 implies a - b == 0, so flooring the denominator at 1 zeroes those terms
    s = np.maximum(a + b, 1).astype(np.float64)
    if unit != 1.0:
        s *= unit
    d *= d
    d /= s
    return 0.5 * d.sum(axis=-1)


def chi2(H_p, H_q) -> float:
    """Chi-square distance between two histograms (0 means identical)."""
    hp, hq = check_histograms(H_p, H_q)
    if hp.shape != hq.shape:
        raise ValueError(f"histogram shapes differ: {hp.shape} vs {hq.shape}")
    return float(chi2_terms_sum(hp, hq))


def chi2_matrix(A, B, unit: float = 1.0) -> np.ndarray:
    """All chi-square distances between the rows of ``A`` and ``B``."""
    A, B = check_histograms(A, B)
    return chi2_terms_sum(A[:, None, :], B[None, :, :], unit)


def count_unit(*arrays) -> float:
    """Greatest common divisor of all counts (1 if they are all zero)."""
    g = reduce(np.gcd, (np.gcd.reduce(np.asarray(a, dtype=np.int64).ravel()) for a in arrays), 0)
    return float(g) if g > 0 else 1.0


def chi2_exact(a, b) -> Fraction:
    """Chi-square distance as an exact rational."""
    total = Fraction(0)
    for x, y in zip(np.asarray(a).tolist(), np.asarray(b).tolist()):
        if x + y:
            total += Fraction((x - y) * (x - y), x + y)
    return total / 2


def rank_exact(query, pool, dist, K: int) -> np.ndarray:
    """First ``K`` pool indices in exact ``(distance, index)`` order.

    ``dist`` holds the float distances; only clusters of near-equal values
    holding more than one distinct histogram are re-sorted exactly.
    """
    order = np.argsort(dist, kind="stable")
    d = dist[order]
    near = np.diff(d) <= TIE_RTOL * np.abs(d[1:])
    n, i = len(d), 0
    while i < min(K, n):
        j = i
        while j + 1 < n and near[j]:
            j += 1
        if j > i:
            seg = order[i : j + 1]
            rows = pool[seg]
            if (rows != rows[0]).any():
                keys = {}
                for r, idx in zip(rows, seg.tolist()):
                    keys.setdefault(r.tobytes(), (r, []))[1].append(idx)
                exact = {}
                for r, members in keys.values():
                    e = chi2_exact(query, r)
                    for idx in members:
                        exact[idx] = e
                order[i : j + 1] = sorted(seg.tolist(), key=lambda k: (exact[k], k))
        i = j + 1
    return order[:K]


def boundary_ties(sorted_dist: np.ndarray, K: int) -> np.ndarray:
    """Rows of a row-sorted distance matrix whose K-th and (K+1)-th entries are
    near-equal while the surrounding cluster holds unequal floats, i.e. rows
    where float ordering may pick a different neighbour set than exact ordering."""
    B, P = sorted_dist.shape
    if P <= K:
        return np.zeros(B, dtype=bool)
    ref = sorted_dist[:, K - 1 : K]
    with np.errstate(invalid="ignore"):
        near = np.abs(sorted_dist - ref) <= TIE_RTOL * np.abs(ref)
    return near[:, K] & (near & (sorted_dist != ref)).any(axis=1)


def knn_retrieve(query, pool, K: int) -> np.ndarray:
    """Indices of the ``K`` pool histograms closest to ``query``.

    Ordered by ascending distance; ties go to the lower pool index.  Ties are
    decided on exact distances, not on their rounded float values.
    """
    q, P = check_histograms(query, pool)
    P = np.atleast_2d(P)
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if len(P) < K:
        raise PoolTooSmall(f"pool of {len(P)} histograms is smaller than K={K}")
    dist = chi2_terms_sum(q[None, :], P, count_unit(q, P))
    return rank_exact(q, P, dist, K)


@dataclass(frozen=True)
class KnnGaussian:
    """Gaussian over the pairwise neighbour distances.

    ``loc`` and ``var`` are expressed in units of ``unit`` (see module
    docstring); :attr:`mu` and :attr:`sigma2` give raw chi-square units.
    """

    loc: float
    var: float
    K: int
    unit: float = 1.0

    @property
    def mu(self) -> float:
        return self.loc * self.unit

    @property
    def sigma2(self) -> float:
        return self.var * self.unit * self.unit


def pair_moments(values: np.ndarray, axis=-1):
    """Mean and population variance, the variance taken around the mean."""
    mu = values.mean(axis=axis, keepdims=True)
    var = ((values - mu) ** 2).mean(axis=axis)
    return np.squeeze(mu, axis=axis), var


def gaussian_from_similarities(similarities, K: int, sigma2_min: float = SIGMA2_MIN,
                               unit: float = 1.0) -> KnnGaussian:
    """Fit from the ``K(K-1)/2`` pairwise distances, given in ``unit`` units."""
    values = np.asarray(similarities, dtype=np.float64)
    if values.size != K * (K - 1) // 2:
        raise ValueError(f"expected {K * (K - 1) // 2} pairwise values for K={K}, got {values.size}")
    mu, var = pair_moments(values)
    return KnnGaussian(float(mu), max(float(var), sigma2_min), K, unit)


def fit_gaussian(neighbors, sigma2_min: float = SIGMA2_MIN) -> KnnGaussian:
    """Mean and variance of the chi-square distances between all neighbour pairs.

    The variance floor ``sigma2_min`` applies in count-gcd units.
    """
    (Hn,) = check_histograms(neighbors)
    Hn = np.atleast_2d(Hn)
    K = len(Hn)
    if K < 2:
        raise DegenerateK(f"need at least 2 neighbours, got {K}")
    unit = count_unit(Hn)
    i, j = np.triu_indices(K, k=1)
    pairs = chi2_terms_sum(Hn[i], Hn[j], unit)
    return gaussian_from_similarities(pairs, K, sigma2_min, unit)


def log_tail_probability(z, p_min: float = P_MIN, tail: str = "upper") -> np.ndarray:
    """``log p`` for standardized distances ``z``.

    ``upper``: p = P(Z >= z) for z > 0 and 1 otherwise.  ``two-sided``:
    p = P(|Z| >= |z|).  p is floored at ``p_min``; with ``p_min = 0`` the log
    tail is exact (and finite) however large ``z`` gets.
    """
    z = np.asarray(z, dtype=np.float64)
    if tail == "upper":
        logp = np.where(z > 0.0, log_ndtr(-z), 0.0)
    elif tail == "two-sided":
        logp = np.minimum(np.log(2.0) + log_ndtr(-np.abs(z)), 0.0)
    else:
        raise ValueError(f"tail must be one of {TAILS}, got {tail!r}")
    if p_min > 0:
        logp = np.maximum(logp, np.log(p_min))
    return logp


def standardize(s, mu, sd) -> np.ndarray:
    """``(s - mu) / sd``, with differences within rounding noise of ``mu`` set to 0.

    The upper tail jumps from p = 1 (``s <= mu``) to p = 1/2 just above, so a
    distance that equals the mean must not land on either side by rounding.
    """
    s = np.asarray(s, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    d = s - mu
    d = np.where(np.abs(d) <= TIE_RTOL * np.abs(mu), 0.0, d)
    return d / sd


def standardized_scores(query, neighbors, g: KnnGaussian) -> np.ndarray:
    """``(chi2(query, neighbor_k) - mu) / sigma`` for each neighbour."""
    q, Hn = check_histograms(query, neighbors)
    s = chi2_terms_sum(q[None, :], np.atleast_2d(Hn), g.unit)
    return standardize(s, g.loc, np.sqrt(g.var))


def joint_score(query, neighbors, g: KnnGaussian, p_min: float = P_MIN,
                tail: str = "upper") -> float:
    """Sum of log-probabilities of the query-to-neighbour distances under ``g``."""
    z = standardized_scores(query, neighbors, g)
    return float(log_tail_probability(z, p_min, tail).sum())


def is_anomalous(score: float, T_p: float) -> bool:
    return bool(score < T_p)


@dataclass(frozen=True)
class QueryResult:
    L: float
    neighbors: np.ndarray
    gaussian: KnnGaussian
    z: np.ndarray


def score_query(query, pool, K: int = DEFAULT_K, sigma2_min: float = SIGMA2_MIN,
                p_min: float = P_MIN, tail: str = "upper") -> QueryResult:
    """Retrieve, fit and score in one call."""
    idx = knn_retrieve(query, pool, K)
    neighbors = np.atleast_2d(np.asarray(pool))[idx]
    g = fit_gaussian(neighbors, sigma2_min)
    z = standardized_scores(query, neighbors, g)
    L = float(log_tail_probability(z, p_min, tail).sum())
    return QueryResult(L, idx, g, z)
