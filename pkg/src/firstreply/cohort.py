"""Matched cohorts: user pairs inside a community, and hateful/control community pairs."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import DELETED_AUTHORS, FirstPostEvent, Post, recompute_engagement, time_order

logger = logging.getLogger(__name__)

USER_FEATURES = ("account_age", "nest_level", "valence", "word_count")
SUBMISSION_FEATURES = ("account_age", "valence", "word_count")
DEFAULT_POOL_CAP = 30_000
CANDIDATE_SIZE_BOUNDS = (10_000, 2_000_000)
RIDGE_FACTOR = 1e-6


class MatchingError(RuntimeError):
    pass


@dataclass
class CommunityProfile:
    community: str
    size: int
    p90_return: float
    ban_date: Optional[int] = None

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"{self.community}: size must be >= 1")
        if self.p90_return < 0:
            raise ValueError(f"{self.community}: p90_return must be >= 0")

    def features(self) -> np.ndarray:
        return np.array([math.log10(self.size), math.log10(1.0 + self.p90_return)])


@dataclass
class Pair:
    treated: FirstPostEvent
    control: FirstPostEvent
    distance: float


@dataclass
class MatchedPairs:
    pairs: list[Pair]
    features: tuple[str, ...]
    cov: Optional[np.ndarray] = None
    unmatched: list[FirstPostEvent] = field(default_factory=list)
    community: str = ""
    kind: str = ""
    skipped: Optional[str] = None

    @property
    def treated(self) -> list[FirstPostEvent]:
        return [p.treated for p in self.pairs]

    @property
    def control(self) -> list[FirstPostEvent]:
        return [p.control for p in self.pairs]


# --------------------------------------------------------------------------
# Return times and the simulated ban
# --------------------------------------------------------------------------


def nearest_rank(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest value."""
    if not len(values):
        raise ValueError("no values")
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered) - 1e-12))
    return ordered[rank - 1]


def return_deltas(events: Iterable[FirstPostEvent], posts: Iterable[Post]) -> list[int]:
    """Seconds from each newcomer's first post to their second post (any thread)."""
    times: dict[tuple[str, str], list[tuple[int, str]]] = defaultdict(list)
    for post in posts:
        times[(post.community, post.author)].append((post.created_at, post.id))
    deltas = []
    for ev in events:
        mine = sorted(times.get((ev.community, ev.user), ()))
        if len(mine) >= 2:
            deltas.append(mine[1][0] - ev.first_post_time)
    return deltas


def author_return_deltas(posts: Iterable[Post]) -> list[int]:
    """Return deltas for every author in ``posts`` (equivalent to ``return_deltas``
    over the full set of first-post events)."""
    first: dict[tuple[str, str], int] = {}
    deltas: dict[tuple[str, str], int] = {}
    for post in sorted(posts, key=time_order):
        if post.author in DELETED_AUTHORS:
            continue
        key = (post.community, post.author)
        t0 = first.get(key)
        if t0 is None:
            first[key] = post.created_at
        elif key not in deltas:
            deltas[key] = post.created_at - t0
    return list(deltas.values())


def p90_return_time(
    events: Optional[Sequence[FirstPostEvent]], posts: Sequence[Post]
) -> float:
    """Nearest-rank 90th percentile of first-to-second post times.

    With ``events=None`` every author in ``posts`` counts as a newcomer.
    """
    deltas = author_return_deltas(posts) if events is None else return_deltas(events, posts)
    if not deltas:
        logger.warning("no returning newcomers; p90 return time set to 0")
        return 0.0
    if len(deltas) < 10:
        logger.warning("only %d returning newcomers; p90 return time is unstable", len(deltas))
    return float(nearest_rank(deltas, 0.9))


def apply_simulated_ban(
    events: Sequence[FirstPostEvent],
    ban_date: int,
    p90: float,
    posts: Optional[Sequence[Post]] = None,
) -> list[FirstPostEvent]:
    """Truncate a control community at a (simulated) ban date.

    Newcomers arriving later than ``ban_date - p90`` are dropped since they had
    too little time to return. With ``posts`` given, the survivors' engagement
    is re-evaluated with the ban date as cutoff.
    """
    window_end = ban_date - p90
    kept = [ev for ev in events if ev.first_post_time <= ban_date and ev.first_post_time <= window_end]
    if posts is not None:
        kept = recompute_engagement(kept, posts, ban_date)
    return kept


# --------------------------------------------------------------------------
# Distances and matching
# --------------------------------------------------------------------------


def mahalanobis(x, y, cov_inv) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    cov_inv = np.asarray(cov_inv, dtype=float)
    if x.shape != y.shape or cov_inv.shape != (x.size, x.size):
        raise ValueError(f"dimension mismatch: {x.shape}, {y.shape}, {cov_inv.shape}")
    d = x - y
    return math.sqrt(max(0.0, float(d @ cov_inv @ d)))


def ridge_covariance(features: np.ndarray) -> np.ndarray:
    """Sample covariance plus a ridge of ``1e-6`` in standardized units.

    Each diagonal entry gets ``1e-6 * var_j``, i.e. ``1e-6 * trace / d`` of the
    correlation matrix, so a feature measured in seconds cannot drown the
    others. A constant feature falls back to ``1e-6 * trace / d`` of the
    covariance; it then adds nothing to any distance.
    """
    cov = np.atleast_2d(np.cov(features, rowvar=False))
    var = np.diag(cov).copy()
    var[var <= 0] = np.trace(cov) / cov.shape[0]
    return cov + np.diag(RIDGE_FACTOR * var)


def _whitener(cov: np.ndarray) -> np.ndarray:
    """W with W.T @ W = inv(cov); conditioning is judged on the correlation matrix."""
    sd = np.sqrt(np.diag(cov))
    if not np.all(sd > 0):
        raise MatchingError("covariance is singular even after the ridge (every feature is constant)")
    corr = cov / np.outer(sd, sd)
    try:
        chol = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise MatchingError("covariance is singular even after the ridge") from None
    if np.linalg.cond(corr) > 1e12:
        raise MatchingError("covariance is singular even after the ridge")
    return np.linalg.inv(chol) / sd


def feature_matrix(events: Sequence[FirstPostEvent], features: Sequence[str]) -> np.ndarray:
    return np.array([[getattr(ev, f) for f in features] for ev in events], dtype=float).reshape(
        len(events), len(features)
    )


_DENSE_LIMIT = 4_000_000  # distance-matrix entries held at once


def _greedy(
    t_feats: np.ndarray, c_feats: np.ndarray, order: np.ndarray, whiten: np.ndarray
) -> list[tuple[int, int, float]]:
    zt = t_feats @ whiten.T
    zc = c_feats @ whiten.T
    n_c = len(zc)
    out = []
    if len(zt) * n_c <= _DENSE_LIMIT:
        # same arithmetic as the row-wise scan below, done once up front
        # summing dimension by dimension keeps the row scan's addition order
        dist = (zt[:, 0, None] - zc[None, :, 0]) ** 2
        for d in range(1, zt.shape[1]):
            dist += (zt[:, d, None] - zc[None, :, d]) ** 2
        taken = np.zeros(n_c)
        row = np.empty(n_c)
        for i in order.tolist():
            if len(out) == n_c:
                break
            np.add(dist[i], taken, out=row)
            j = int(row.argmin())  # first minimum = smallest user id (controls are id-sorted)
            out.append((i, j, math.sqrt(row[j])))
            taken[j] = np.inf
        return out
    available = np.ones(n_c, dtype=bool)
    for i in order:
        if len(out) == n_c:
            break
        d2 = ((zc - zt[i]) ** 2).sum(axis=1)
        d2[~available] = np.inf
        j = int(np.argmin(d2))
        available[j] = False
        out.append((int(i), j, math.sqrt(d2[j])))
    return out


def match_users(
    treated: Sequence[FirstPostEvent],
    control: Sequence[FirstPostEvent],
    features: Sequence[str] = USER_FEATURES,
    pool_cap: int = DEFAULT_POOL_CAP,
    seed: int = 0,
) -> MatchedPairs:
    """Greedy Mahalanobis nearest-neighbour matching without replacement.

    Treated users are visited in a seeded shuffle; each takes the closest
    still-available control (ties to the smaller user id). Once controls run
    out, the remaining treated users are reported as unmatched.
    """
    features = tuple(features)
    treated = sorted(treated, key=lambda e: e.user)
    control = sorted(control, key=lambda e: e.user)
    rng = np.random.default_rng(seed)
    if len(treated) + len(control) > pool_cap:
        pool = treated + control
        keep = np.sort(rng.choice(len(pool), size=pool_cap, replace=False))
        n_t = len(treated)
        treated = [pool[k] for k in keep if k < n_t]
        control = [pool[k] for k in keep if k >= n_t]
    community = treated[0].community if treated else (control[0].community if control else "")
    kind = treated[0].kind if treated else (control[0].kind if control else "")
    if len(treated) < 2 or len(control) < 2:
        return MatchedPairs(
            [], features, None, list(treated), community, kind,
            skipped=f"too few events (treated={len(treated)}, control={len(control)})",
        )
    t_feats = feature_matrix(treated, features)
    c_feats = feature_matrix(control, features)
    cov = ridge_covariance(np.vstack([t_feats, c_feats]))
    whiten = _whitener(cov)
    order = rng.permutation(len(treated))
    matched = _greedy(t_feats, c_feats, order, whiten)
    pairs = [Pair(treated[i], control[j], d) for i, j, d in matched]
    used = {i for i, _, _ in matched}
    unmatched = [treated[i] for i in order if i not in used]
    return MatchedPairs(pairs, features, cov, unmatched, community, kind)


def features_for(kind: str) -> tuple[str, ...]:
    # nest level is constant (0) for submissions and would make the covariance singular
    return SUBMISSION_FEATURES if kind == "submission" else USER_FEATURES


def match_community(
    events: Sequence[FirstPostEvent], seed: int = 0, pool_cap: int = DEFAULT_POOL_CAP
) -> dict[str, MatchedPairs]:
    """Match comment-first and submission-first newcomers in separate pools.

    Events with a missing covariate are left out of both pools.
    """
    result = {}
    for kind in ("comment", "submission"):
        pool = [ev for ev in events if ev.kind == kind and ev.complete]
        treated = [ev for ev in pool if ev.treated]
        control = [ev for ev in pool if not ev.treated]
        mp = match_users(treated, control, features_for(kind), pool_cap, seed)
        mp.kind = kind
        if events:
            mp.community = events[0].community
        result[kind] = mp
    return result


def standardized_mean_differences(
    treated: np.ndarray, control: np.ndarray, scale: Optional[np.ndarray] = None
) -> np.ndarray:
    """|mean difference| per column over ``scale`` (default: pooled SD of the inputs)."""
    treated = np.asarray(treated, dtype=float)
    control = np.asarray(control, dtype=float)
    if scale is None:
        scale = np.sqrt((treated.var(axis=0, ddof=1) + control.var(axis=0, ddof=1)) / 2)
    diff = np.abs(treated.mean(axis=0) - control.mean(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(scale > 0, diff / scale, 0.0)


# --------------------------------------------------------------------------
# Community matching
# --------------------------------------------------------------------------


def filter_candidates(
    candidates: Iterable[CommunityProfile], bounds: tuple[int, int] = CANDIDATE_SIZE_BOUNDS
) -> list[CommunityProfile]:
    low, high = bounds
    return [c for c in candidates if low < c.size < high]


def match_communities(
    hateful: Sequence[CommunityProfile], candidates: Sequence[CommunityProfile]
) -> list[tuple[CommunityProfile, CommunityProfile, float]]:
    """Pair each hateful community with its nearest unused candidate.

    Features are (log10 size, log10(1 + p90 return seconds)); hateful
    communities are visited from largest to smallest.
    """
    if len(candidates) < len(hateful):
        raise MatchingError(
            f"{len(candidates)} candidate communities for {len(hateful)} hateful ones"
        )
    if not hateful:
        return []
    hateful = sorted(hateful, key=lambda c: (-c.size, c.community))
    candidates = sorted(candidates, key=lambda c: c.community)
    h_feats = np.array([c.features() for c in hateful])
    c_feats = np.array([c.features() for c in candidates])
    cov = ridge_covariance(np.vstack([h_feats, c_feats]))
    whiten = _whitener(cov)
    matched = _greedy(h_feats, c_feats, np.arange(len(hateful)), whiten)
    return [(hateful[i], candidates[j], d) for i, j, d in matched]
