"""In-memory analysis steps shared by the command line stages and the acceptance checks."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .cohort import (
    CommunityProfile,
    MatchedPairs,
    apply_simulated_ban,
    filter_candidates,
    match_communities,
    match_community,
    p90_return_time,
)
from .corpus import (
    FirstPostEvent,
    Post,
    ReplyFeatures,
    ThreadIndex,
    build_thread_index,
    gc_paused,
    extract_first_posts,
    filter_bots,
    group_by_community,
    time_order,
)
from .lexicon import (
    DEFAULT_LAMBDA,
    DEFAULT_MIN_COUNT,
    AnnotationError,
    AnnotationSheet,
    HateLexicon,
    SageError,
    SageModel,
    aggregate_annotations,
    classify_community,
    count_tokens,
    fit_sage,
    substitute_hate_words,
    top_distinctive_words,
)
from .scoring import AttributeScorer, ScoreCache, SentimentLexicon, default_lexicon, score_texts, sentiment
from .stats.ratios import ErrResult, err

logger = logging.getLogger(__name__)


@dataclass
class Community:
    name: str
    posts: list[Post]
    index: ThreadIndex
    data_end: int
    valence_memo: dict[str, float] = field(default_factory=dict, repr=False)

    @property
    def authors(self) -> int:
        return len({p.author for p in self.posts})


@gc_paused
def build_communities(
    posts: Iterable[Post], bot_patterns: Sequence[str] = (), blocklist: Sequence[str] = ()
) -> dict[str, Community]:
    """Bot-filter, then split by community and index threads."""
    kept = filter_bots(posts, bot_patterns, blocklist)
    out = {}
    for name, cposts in group_by_community(kept).items():
        cposts.sort(key=time_order)
        out[name] = Community(name, cposts, build_thread_index(cposts), cposts[-1].created_at)
    return out


def first_post_events(
    comm: Community,
    cutoff: Optional[int] = None,
    scorer: Optional[AttributeScorer] = None,
    lexicon: Optional[SentimentLexicon] = None,
    cache: Optional[ScoreCache] = None,
    scores: Optional[Mapping[str, tuple[float, float, float]]] = None,
) -> list[FirstPostEvent]:
    """Events with first replies scored.

    Replies are scored with ``scorer`` (sentiment from ``lexicon``) unless a
    precomputed ``scores`` map is given; replies missing from that map stay
    unscored.
    """
    lexicon = lexicon or default_lexicon()
    cutoff = comm.data_end if cutoff is None else cutoff
    memo = comm.valence_memo

    def valence(text: str) -> float:
        v = memo.get(text)
        if v is None:
            v = memo[text] = sentiment(text, lexicon)
        return v

    events = extract_first_posts(comm.posts, comm.index, comm.name, cutoff, valence=valence)
    if scores is None:
        if scorer is None:
            return events
        by_id = {p.id: p for p in comm.posts}
        ids = [ev.reply_id for ev in events if ev.reply_id is not None]
        values = score_texts([by_id[i].body for i in ids], scorer, lexicon, cache)
        scores = dict(zip(ids, values))
    return attach_scores(events, scores)


def attach_scores(
    events: Sequence[FirstPostEvent], scores: Mapping[str, tuple[float, float, float]]
) -> list[FirstPostEvent]:
    """Fill in first-reply features in place (events are fresh from extraction)."""
    for ev in events:
        if ev.reply_id is not None and ev.reply_id in scores:
            s, t, a = scores[ev.reply_id]
            ev.first_reply = ReplyFeatures(float(s), float(t), float(a))
            ev.reply_scored = True
    return list(events)


def community_profile(
    comm: Community, size: Optional[int] = None, ban_date: Optional[int] = None
) -> CommunityProfile:
    p90 = p90_return_time(None, comm.posts)
    return CommunityProfile(comm.name, int(size or comm.authors), p90, ban_date)


def _err_or_undefined(mp: MatchedPairs, community: str, kind: str) -> ErrResult:
    if not mp.pairs:
        return ErrResult(community, kind, math.nan, math.nan, math.nan, 0, 0)
    return err(mp, community, kind)


@dataclass
class CommunityAnalysis:
    community: str
    type: str
    events: list[FirstPostEvent]
    pairs: dict[str, MatchedPairs]
    errs: dict[str, ErrResult]
    profile: CommunityProfile
    matched_to: Optional[str] = None
    ban_date: Optional[int] = None


@dataclass
class Analysis:
    communities: dict[str, CommunityAnalysis]
    community_pairs: list[tuple[CommunityProfile, CommunityProfile, float]]
    notes: list[str] = field(default_factory=list)

    def errs(self, ctype: str, kind: str) -> list[ErrResult]:
        return [
            ca.errs[kind] for ca in self.communities.values() if ca.type == ctype and kind in ca.errs
        ]

    def mean_err(self, ctype: str, kind: str) -> float:
        vals = [r.err for r in self.errs(ctype, kind) if r.defined]
        return float(np.mean(vals)) if vals else math.nan


@gc_paused
def analyze(
    communities: Mapping[str, Community],
    hateful: Sequence[str],
    candidates: Sequence[str],
    ban_dates: Mapping[str, int],
    scorer: Optional[AttributeScorer] = None,
    lexicon: Optional[SentimentLexicon] = None,
    cache: Optional[ScoreCache] = None,
    sizes: Optional[Mapping[str, int]] = None,
    size_bounds: tuple[float, float] = (0, math.inf),
    seed: int = 0,
    pool_cap: int = 30_000,
    scores: Optional[Mapping[str, tuple[float, float, float]]] = None,
    workers: int = 1,
) -> Analysis:
    """Profiles, community matching, simulated bans, user matching and ERRs.

    ``scores`` (reply id to sentiment, toxicity, attack) replaces live
    scoring. Community pairs are processed on ``workers`` threads; results
    do not depend on the count.
    """
    sizes = sizes or {}
    notes: list[str] = []
    missing = [h for h in hateful if h not in communities]
    if missing:
        raise KeyError(f"hateful communities absent from the archive: {', '.join(missing)}")

    profiles: dict[str, CommunityProfile] = {}
    for name in sorted(set(hateful) | set(candidates)):
        if name not in communities:
            notes.append(f"candidate {name} absent from the archive; skipped")
            continue
        profiles[name] = community_profile(communities[name], sizes.get(name), ban_dates.get(name))

    hate_profiles = [profiles[h] for h in hateful]
    cand_profiles = filter_candidates(
        [profiles[c] for c in candidates if c in profiles and c not in hateful], size_bounds
    )
    pairs = match_communities(hate_profiles, cand_profiles)

    def finish(name, ctype, events, matched_to=None, ban=None):
        mp = match_community(events, seed=seed, pool_cap=pool_cap)
        errs = {kind: _err_or_undefined(m, name, kind) for kind, m in mp.items()}
        return CommunityAnalysis(name, ctype, events, mp, errs, profiles[name], matched_to, ban)

    def run_pair(pair):
        h, c, _ = pair
        ban = h.ban_date if h.ban_date is not None else communities[h.community].data_end
        evs = first_post_events(communities[h.community], ban, scorer, lexicon, cache, scores)
        hate = finish(h.community, "hateful", evs, c.community, ban)
        # simulated ban: replies and returns only count up to the matched ban date
        evs = first_post_events(communities[c.community], ban, scorer, lexicon, cache, scores)
        evs = apply_simulated_ban(evs, ban, h.p90_return)
        return hate, finish(c.community, "nonhateful", evs, h.community, ban)

    results: dict[str, CommunityAnalysis] = {}
    for hate, control in map_ordered(run_pair, pairs, workers):
        results[hate.community] = hate
        results[control.community] = control
    return Analysis(results, pairs, notes)


def map_ordered(fn, items, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, on a thread pool when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# Detection
# --------------------------------------------------------------------------


@dataclass
class Detection:
    top_words: dict[str, list[str]]
    hate_words: set[str]
    kappa: float
    hate_counts: dict[str, int]
    hateful: list[str]
    skipped: dict[str, str] = field(default_factory=dict)
    unannotated: list[str] = field(default_factory=list)
    models: dict[str, SageModel] = field(default_factory=dict, repr=False)


def detect_hateful(
    communities: Mapping[str, Community],
    banned: Sequence[str],
    sheet: Optional[AnnotationSheet],
    background: Optional[Sequence[str]] = None,
    lam: float = DEFAULT_LAMBDA,
    min_count: int = DEFAULT_MIN_COUNT,
    top_k: int = 100,
    min_users: int = 3000,
    workers: int = 1,
) -> Detection:
    """SAGE word lists for banned communities, then annotation-based classification.

    The background corpus pools the ``background`` communities (default: every
    community not in ``banned``). Banned communities with ``min_users`` or fewer
    authors, or absent from the archive, are skipped. Words missing from the
    annotation sheet count as not hateful.
    """
    banned = sorted(set(banned))
    skipped = {}
    targets = []
    for name in banned:
        if name not in communities:
            skipped[name] = "absent from the archive"
        elif communities[name].authors <= min_users:
            skipped[name] = f"{communities[name].authors} authors (need more than {min_users})"
        else:
            targets.append(name)
    if background is None:
        background = [c for c in communities if c not in set(banned)]
    bg_names = sorted(c for c in background if c in communities)
    if not bg_names:
        raise SageError("no background communities available")
    bg_counts = count_tokens(p.body for c in bg_names for p in communities[c].posts)

    def fit_one(name):
        target = count_tokens(p.body for p in communities[name].posts)
        model = fit_sage(target, bg_counts, lam=lam, min_count=min_count)
        return model, top_distinctive_words(model, top_k) if model.eta.any() else []

    fitted = dict(zip(targets, map_ordered(fit_one, targets, workers)))
    top = {name: words for name, (_, words) in fitted.items()}
    if sheet is None:
        raise AnnotationError("an annotation sheet is required to classify communities")
    hate_words, kappa = aggregate_annotations(sheet)
    listed = sorted({w for words in top.values() for w in words})
    unannotated = [w for w in listed if w not in sheet.ratings]
    counts = {name: sum(1 for w in words if w in hate_words) for name, words in top.items()}
    hateful = [name for name in targets if classify_community(counts[name])]
    return Detection(
        top, hate_words, kappa, counts, hateful, skipped, unannotated,
        {name: m for name, (m, _) in fitted.items()},
    )


# --------------------------------------------------------------------------
# Substitution sensitivity
# --------------------------------------------------------------------------

ATTRIBUTE_NAMES = ("sentiment", "toxicity", "attack")


@dataclass
class SubstitutionRow:
    community: str
    type: str
    n_replies: int
    n_with_hate: int
    original: tuple[float, float, float]
    substituted: tuple[float, float, float]

    @property
    def shift(self) -> tuple[float, float, float]:
        return tuple(b - a for a, b in zip(self.original, self.substituted))


def substitution_rows(
    replies: Mapping[str, Sequence[str]],
    types: Mapping[str, str],
    hate_lexicon: HateLexicon,
    scorer: AttributeScorer,
    lexicon: Optional[SentimentLexicon] = None,
    cache: Optional[ScoreCache] = None,
) -> list[SubstitutionRow]:
    """Per-community mean reply attributes before and after hate-word substitution.

    Means run over every reply, including those without hate words.
    """
    rows = []
    for name in sorted(replies):
        texts = list(replies[name])
        if not texts:
            continue
        swapped = [substitute_hate_words(t, hate_lexicon) for t in texts]
        before = np.array(score_texts(texts, scorer, lexicon, cache))
        after = np.array(score_texts(swapped, scorer, lexicon, cache))
        n_hate = sum(1 for a, b in zip(texts, swapped) if a != b)
        rows.append(
            SubstitutionRow(
                name, types.get(name, ""), len(texts), n_hate,
                tuple(before.mean(axis=0).tolist()), tuple(after.mean(axis=0).tolist()),
            )
        )
    return rows


def substitution_summary(rows: Sequence[SubstitutionRow], gap: Optional[Mapping[str, float]] = None) -> dict:
    """Mean shift of hateful communities against the hateful/non-hateful gap.

    ``gap`` defaults to the difference of mean original attributes between
    hateful and non-hateful rows.
    """
    hate = [r for r in rows if r.type == "hateful"]
    benign = [r for r in rows if r.type == "nonhateful"]
    out = {}
    for k, name in enumerate(ATTRIBUTE_NAMES):
        shift = float(np.mean([r.shift[k] for r in hate])) if hate else math.nan
        if gap is not None:
            g = float(gap[name])
        elif hate and benign:
            g = float(np.mean([r.original[k] for r in hate]) - np.mean([r.original[k] for r in benign]))
        else:
            g = math.nan
        ratio = abs(shift) / abs(g) if g else math.nan
        out[name] = {"mean_shift": shift, "gap": g, "shift_over_gap": ratio}
    return out
