"""Synthetic archives with planted engagement effects.

Reply bodies are templated token sequences. Their stub toxicity/attack scores
and lexicon sentiment land close to planted values drawn from per-type
distributions. Engagement is then drawn from the true random-intercept
logistic model, using the features the pipeline will actually measure. A
truth ledger records every planted quantity so pipeline outputs can be
checked against it.
"""

from __future__ import annotations

import bisect
import itertools
import json
import math
import random
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps
from scipy.special import expit

from .corpus import FirstPostEvent, Post, ReplyFeatures, gc_paused, time_order, write_archive
from .lexicon import HateLexicon
from .scoring import (
    NORMALIZATION_ALPHA,
    StubLexicons,
    default_lexicon,
    default_stub_lexicons,
    score_attributes_stub,
    sentiment,
)

KINDS = ("comment", "submission")
TYPES = ("hateful", "nonhateful")
COMMENT_SHARE = 0.78
DAY = 86_400
START = 1_420_070_400  # 2015-01-01 UTC

# Coefficients (intercept, reply, x sentiment, x toxicity, x attack) and
# random-intercept variances per (kind, type).
TABLE_BETA = {
    ("comment", "hateful"): (0.085, 0.09, 0.11, -0.05, -0.35),
    ("comment", "nonhateful"): (0.13, 0.104, 0.060, 0.018, -0.168),
    ("submission", "hateful"): (-0.435, 0.366, -0.015, 0.161, -0.255),
    ("submission", "nonhateful"): (-0.155, 0.228, 0.060, 0.038, -0.206),
}
TABLE_SIGMA2 = {
    ("comment", "hateful"): 0.16,
    ("comment", "nonhateful"): 0.15,
    ("submission", "hateful"): 0.24,
    ("submission", "nonhateful"): 0.38,
}

# Invented, inoffensive stand-ins for hate vocabulary.
FAKE_HATE_WORDS = {
    "grumkin": "neighbour",
    "vorlash": "member",
    "skreeb": "person",
    "drubbler": "resident",
    "quenthar": "visitor",
    "blorvik": "citizen",
    "snarfle": "colleague",
    "tibbron": "stranger",
}

_FILLER = (
    "the this about thread post topic today week question point idea reason there here "
    "then with from into over after before which would could maybe also some other same "
    "anyone people time place thing where what when story read update number first second"
).split()
_REPLY_FILLER = ("about", "that")
_TOXIC_TOKEN = "garbage"
_INSULT_TOKEN = "idiot"
_SECOND_PERSON = "you"
_POS_WORDS = ("great", "good", "nice", "fine")
_NEG_WORDS = ("terrible", "bad", "wrong", "poor")
_POOL = 24
_SYLLABLES = "ka ze ri mo tu vel dra shin pol gar nex ul om bre fi yo".split()


class SynthError(ValueError):
    pass


@dataclass
class FeatureLaw:
    """Reply feature distribution: truncated normal sentiment, Beta toxicity/attack."""

    sentiment_mean: float
    sentiment_sd: float
    toxicity_ab: tuple[float, float]
    attack_ab: tuple[float, float]

    def validate(self, label: str) -> None:
        if not self.sentiment_sd > 0:
            raise SynthError(f"{label}: sentiment sd must be positive")
        for name in ("toxicity_ab", "attack_ab"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise SynthError(f"{label}: Beta parameters for {name} must be positive")

    def _sentiment_law(self):
        lo = (-1.0 - self.sentiment_mean) / self.sentiment_sd
        hi = (1.0 - self.sentiment_mean) / self.sentiment_sd
        return sps.truncnorm(lo, hi, loc=self.sentiment_mean, scale=self.sentiment_sd)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """(n, 3) array of planted (sentiment, toxicity, attack)."""
        s = self._sentiment_law().rvs(size=n, random_state=rng)
        t = rng.beta(*self.toxicity_ab, size=n)
        a = rng.beta(*self.attack_ab, size=n)
        return np.column_stack([s, t, a])

    def moments(self) -> dict[str, tuple[float, float]]:
        law = self._sentiment_law()
        out = {"sentiment": (float(law.mean()), float(law.std()))}
        for name, (a, b) in (("toxicity", self.toxicity_ab), ("attack", self.attack_ab)):
            d = sps.beta(a, b)
            out[name] = (float(d.mean()), float(d.std()))
        return out


HOSTILE = FeatureLaw(-0.1, 0.5, (0.3, 0.3), (0.3, 0.3))
BENIGN = FeatureLaw(0.2, 0.4, (0.5, 3.0), (0.5, 4.0))
# scores pile up near 0 and 1, so the 0.7 cut loses little information;
# used for the model-level checks
POLARIZED = FeatureLaw(-0.1, 0.5, (0.1, 0.1), (0.1, 0.1))


@dataclass
class CommunitySpec:
    name: str
    type: str
    users: int
    ban_date: Optional[int] = None


@dataclass
class SynthParams:
    communities: list[CommunitySpec]
    reply_prob: dict[str, float] = field(default_factory=lambda: {"comment": 0.6, "submission": 0.6})
    features: dict[str, FeatureLaw] = field(
        default_factory=lambda: {"hateful": HOSTILE, "nonhateful": BENIGN}
    )
    beta: dict[tuple[str, str], tuple[float, ...]] = field(default_factory=lambda: dict(TABLE_BETA))
    sigma2: dict[tuple[str, str], float] = field(default_factory=lambda: dict(TABLE_SIGMA2))
    hate_rate: float = 0.08
    seed: int = 0
    start: int = START
    span_days: int = 365
    bot_rate: float = 0.03
    self_reply_rate: float = 0.02
    missing_age_rate: float = 0.01

    def validate(self) -> None:
        if not self.communities:
            raise SynthError("no communities requested")
        names = [c.name for c in self.communities]
        if len(set(names)) != len(names):
            raise SynthError("community names must be unique")
        for c in self.communities:
            if c.type not in TYPES:
                raise SynthError(f"{c.name}: unknown community type {c.type!r}")
            if c.users < 1:
                raise SynthError(f"{c.name}: user count must be >= 1 (got {c.users})")
        probs = {"hate_rate": self.hate_rate, "bot_rate": self.bot_rate,
                 "self_reply_rate": self.self_reply_rate, "missing_age_rate": self.missing_age_rate}
        probs.update({f"reply_prob[{k}]": v for k, v in self.reply_prob.items()})
        for label, p in probs.items():
            if not 0.0 <= p <= 1.0:
                raise SynthError(f"{label} must lie in [0, 1] (got {p})")
        for kind in KINDS:
            if kind not in self.reply_prob:
                raise SynthError(f"reply probability for {kind!r} missing")
        for t in {c.type for c in self.communities}:
            if t not in self.features:
                raise SynthError(f"no feature law for type {t!r}")
            self.features[t].validate(t)
            for kind in KINDS:
                if (kind, t) not in self.beta or (kind, t) not in self.sigma2:
                    raise SynthError(f"no true coefficients for ({kind}, {t})")
                if len(self.beta[(kind, t)]) != 5:
                    raise SynthError("beta needs 5 entries")
                if self.sigma2[(kind, t)] < 0:
                    raise SynthError("sigma2 must be non-negative")
        if self.span_days < 2:
            raise SynthError("span_days must be at least 2")

    @property
    def default_ban(self) -> int:
        return self.start + self.span_days * DAY

    @classmethod
    def standard(
        cls, n_hateful: int = 10, n_nonhateful: int = 10, users: int = 2000, seed: int = 0, **kwargs
    ) -> "SynthParams":
        """Hateful communities banned at the end of the span; controls run 60 days longer."""
        start = kwargs.get("start", START)
        span = kwargs.get("span_days", 365)
        ban = start + span * DAY
        comms = [CommunitySpec(f"hcomm{i:02d}", "hateful", users, ban) for i in range(n_hateful)]
        comms += [CommunitySpec(f"ncomm{i:02d}", "nonhateful", users, None) for i in range(n_nonhateful)]
        return cls(communities=comms, seed=seed, **kwargs)

    def to_dict(self) -> dict:
        return {
            "communities": [asdict(c) for c in self.communities],
            "reply_prob": dict(self.reply_prob),
            "features": {k: asdict(v) for k, v in sorted(self.features.items())},
            "beta": {f"{k}/{t}": list(v) for (k, t), v in sorted(self.beta.items())},
            "sigma2": {f"{k}/{t}": v for (k, t), v in sorted(self.sigma2.items())},
            "hate_rate": self.hate_rate,
            "seed": self.seed,
            "start": self.start,
            "span_days": self.span_days,
            "bot_rate": self.bot_rate,
            "self_reply_rate": self.self_reply_rate,
            "missing_age_rate": self.missing_age_rate,
        }


def community_rng(seed: int, name: str, stream: int = 0) -> np.random.Generator:
    """Independent stream per (seed, community) so communities can be generated in any order."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8")), stream])


# --------------------------------------------------------------------------
# Text templates
# --------------------------------------------------------------------------


def synth_stub_lexicons(hate_weight: float = 1.0) -> StubLexicons:
    """Default stub lexicons plus the invented hate words as toxic patterns."""
    return default_stub_lexicons().with_toxic(dict.fromkeys(FAKE_HATE_WORDS, hate_weight))


def synth_hate_lexicon() -> HateLexicon:
    return HateLexicon(dict(FAKE_HATE_WORDS), dict.fromkeys(FAKE_HATE_WORDS, "synthetic"))


def _count_for(p: float, bias: float, weight: float = 0.5, cap: int = 12) -> int:
    p = min(max(p, 1e-9), 1 - 1e-9)
    return int(min(cap, max(0, round((math.log(p / (1 - p)) - bias) / weight))))


@lru_cache(maxsize=4096)
def _sentiment_words(target: float) -> tuple[str, ...]:
    """Greedy word choice whose summed valence approximates the raw score for ``target``."""
    valence = default_lexicon().valence
    target = min(max(target, -0.999), 0.999)
    raw = target * math.sqrt(NORMALIZATION_ALPHA) / math.sqrt(1 - target * target)
    pool = _POS_WORDS if raw > 0 else _NEG_WORDS
    words: list[str] = []
    remaining = raw
    for _ in range(8):
        best = min(pool, key=lambda w: abs(remaining - valence[w]))
        if abs(remaining - valence[best]) >= abs(remaining):
            break
        words.append(best)
        remaining -= valence[best]
    return tuple(words)


class _Templates:
    def __init__(self, stub: StubLexicons):
        lex = default_lexicon()
        self.valence = lex.valence
        self.bias = stub.bias
        self.stub = stub
        self._memo: dict[str, tuple[float, float, float]] = {}
        self._bodies: dict[tuple, str] = {}

    def reply_body(self, s: float, t: float, a: float) -> str:
        return self.body_for(round(s, 3), _count_for(t, self.bias), _count_for(a, self.bias))

    def counts(self, p: np.ndarray) -> np.ndarray:
        """Vectorised ``_count_for`` (numpy and Python both round half to even)."""
        p = np.clip(p, 1e-9, 1 - 1e-9)
        return np.clip(np.round((np.log(p / (1 - p)) - self.bias) / 0.5), 0, 12).astype(int)

    def body_for(self, s: float, n_t: int, n_a: int) -> str:
        key = (s, n_t, n_a)
        body = self._bodies.get(key)
        if body is None:
            tokens = list(_REPLY_FILLER) + list(_sentiment_words(s)) + [_TOXIC_TOKEN] * n_t
            if n_a:
                tokens += [_SECOND_PERSON] + [_INSULT_TOKEN] * n_a
            body = self._bodies[key] = " ".join(tokens)
        return body

    def measure(self, body: str) -> tuple[float, float, float]:
        hit = self._memo.get(body)
        if hit is None:
            scores = score_attributes_stub(body, self.stub)
            hit = (sentiment(body), scores.toxicity, scores.attack)
            self._memo[body] = hit
        return hit


def _topic_words(rng: np.random.Generator, n: int) -> list[str]:
    out: set[str] = set()
    while len(out) < n:
        k = int(rng.integers(2, 4))
        out.add("".join(rng.choice(_SYLLABLES, size=k)))
    return sorted(out - set(FAKE_HATE_WORDS))


# --------------------------------------------------------------------------
# Generation
# --------------------------------------------------------------------------


@dataclass
class _Builder:
    prefix: str
    community: str
    posts: list[Post] = field(default_factory=list)
    counter: int = 0

    def add(self, author, created, parent, link, body, author_created=None) -> Post:
        self.counter += 1
        pid = f"{self.prefix}{self.counter:06d}"
        post = Post(pid, author, self.community, created, parent, link or pid, body, author_created)
        self.posts.append(post)
        return post


def _maybe_hate(rnd: random.Random, words: list[str], rate: float, hate_words: Sequence[str]) -> list[str]:
    if rate > 0 and rnd.random() < rate:
        words.insert(rnd.randrange(len(words) + 1), rnd.choice(hate_words))
    return words


def generate_community(params: SynthParams, spec: CommunitySpec, index: int, templates: _Templates):
    """Posts and truth records for one community."""
    rng = community_rng(params.seed, spec.name)
    hateful = spec.type == "hateful"
    law = params.features[spec.type]
    hate_rate = params.hate_rate if hateful else 0.0
    hate_words = sorted(FAKE_HATE_WORDS)
    end = spec.ban_date if spec.ban_date is not None else params.default_ban + 60 * DAY
    start = params.start
    b = _Builder(f"c{index:03d}", spec.name)
    topics = _topic_words(rng, 12)
    # per-item draws use a stdlib generator seeded from the community stream (much
    # cheaper per call than numpy scalars); bulk draws stay in numpy
    rnd = random.Random(int(rng.integers(2**63)))
    unif = rnd.random

    def below(k: int) -> int:
        # int(k * U) is several times cheaper than randrange
        return int(k * unif())
    vocab = list(_FILLER) + topics
    # topic words make up about a sixth of the tokens
    weights = [1.0] * len(_FILLER) + [len(_FILLER) / (5.0 * len(topics))] * len(topics)
    cum = list(itertools.accumulate(weights))
    pools: dict[int, list[str]] = {}

    def text(n_words: int, extra: Sequence[str] = ()) -> str:
        # bodies are drawn from a small per-length pool of random token strings
        pool = pools.get(n_words)
        if pool is None:
            pool = pools[n_words] = [
                " ".join(rnd.choices(vocab, cum_weights=cum, k=n_words + 2)) for _ in range(_POOL)
            ]
        body = pool[below(_POOL)]
        for w in extra:
            body = f"{w} {body}" if unif() < 0.5 else f"{body} {w}"
        if hate_rate and unif() < hate_rate:
            w = hate_words[below(len(hate_words))]
            body = f"{w} {body}" if unif() < 0.5 else f"{body} {w}"
        return body

    # veterans open the first threads; their own first posts are submissions
    n_vets = max(5, spec.users // 50)
    vets = [f"{spec.name}-v{j:03d}" for j in range(n_vets)]
    vet_birth = start - 400 * DAY
    n_threads = max(20, spec.users // 8)
    thread_times = np.sort(rng.uniform(start, end - 3600, size=n_threads)).astype(np.int64)
    thread_times[:n_vets] = start + 60 * np.arange(1, n_vets + 1)
    thread_times.sort()
    threads = []
    for j, ts in enumerate(thread_times.tolist()):
        author = vets[j % n_vets] if j < n_vets else vets[below(n_vets)]
        threads.append(b.add(author, ts, None, None, text(8), vet_birth))

    # newcomer draws, vectorised
    n = spec.users
    arrival = np.sort(rng.uniform(start + DAY, end - 3600, size=n)).astype(np.int64)
    is_comment = rng.random(n) < COMMENT_SHARE
    n_words = 3 + rng.poisson(12, size=n)
    age_days = 1 + rng.exponential(400, size=n)
    age_missing = rng.random(n) < params.missing_age_rate
    log_age = np.log(age_days)
    z_words = (n_words - n_words.mean()) / max(n_words.std(), 1e-9)
    z_age = (log_age - log_age.mean()) / max(log_age.std(), 1e-9)
    base = np.where(is_comment, params.reply_prob["comment"], params.reply_prob["submission"])
    with np.errstate(divide="ignore"):
        logit_base = np.log(base) - np.log1p(-base)
    # replies lean towards longer posts from older accounts, so matching has work to do
    p_reply = np.where((base > 0) & (base < 1), expit(logit_base + 0.3 * z_words + 0.2 * z_age), base)
    gets_reply = rng.random(n) < p_reply
    reply_delay = 60 + rng.exponential(3 * 3600, size=n)
    planted = law.sample(rng, n)
    s_key = np.round(planted[:, 0], 3).tolist()
    n_tox = templates.counts(planted[:, 1]).tolist()
    n_att = templates.counts(planted[:, 2]).tolist()
    bot_first = rng.random(n) < params.bot_rate
    self_reply = rng.random(n) < params.self_reply_rate
    level2 = rng.random(n) < 0.3
    has_valence = rng.random(n) < 0.5
    return_delay = 60 + rng.exponential(5 * DAY, size=n)
    engage_u = rng.random(n)
    u = {
        kind: float(rng.normal(0.0, math.sqrt(params.sigma2[(kind, spec.type)])))
        for kind in KINDS
    }

    valence_words = sorted(templates.valence)
    times_l = thread_times.tolist()
    arrival, is_comment, n_words, age_days = arrival.tolist(), is_comment.tolist(), n_words.tolist(), age_days.tolist()
    age_missing, gets_reply, reply_delay = age_missing.tolist(), gets_reply.tolist(), reply_delay.tolist()
    planted_l, bot_first, self_reply, level2 = planted.tolist(), bot_first.tolist(), self_reply.tolist(), level2.tolist()
    has_valence, return_delay, engage_u = has_valence.tolist(), return_delay.tolist(), engage_u.tolist()
    truth_users = []
    n_treated = {k: 0 for k in KINDS}
    for i in range(n):
        user = f"{spec.name}-n{i:05d}"
        kind = "comment" if is_comment[i] else "submission"
        t0 = int(arrival[i])
        born = None if age_missing[i] else int(t0 - age_days[i] * DAY)
        extra = [valence_words[below(len(valence_words))]] if has_valence[i] else []
        body = text(int(n_words[i]) - 2, extra)
        k = bisect.bisect_left(times_l, t0)
        if kind == "comment":
            root = threads[below(k)] if k else threads[0]
            parent = root
            if level2[i]:
                when = max(root.created_at + 1, t0 - 60 - below(3540))
                parent = b.add(vets[below(n_vets)], when, root.id, root.id, text(6), vet_birth)
            first = b.add(user, max(t0, parent.created_at + 1), parent.id, root.id, body, born)
        else:
            first = b.add(user, t0, None, None, body, born)
        t0 = first.created_at

        if bot_first[i]:
            b.add("AutoModerator", t0 + 30, first.id, first.link_id, "your post is awaiting review", None)
        if self_reply[i]:
            b.add(user, t0 + 45, first.id, first.link_id, text(4), born)

        treated = bool(gets_reply[i]) and t0 + reply_delay[i] <= end
        realized = None
        if treated:
            n_treated[kind] += 1
            rbody = templates.body_for(s_key[i], n_tox[i], n_att[i])
            rbody = " ".join(_maybe_hate(rnd, rbody.split(), hate_rate, hate_words))
            realized = templates.measure(rbody)
            replier = vets[below(n_vets)]
            b.add(replier, t0 + int(reply_delay[i]), first.id, first.link_id, rbody, vet_birth)

        beta = params.beta[(kind, spec.type)]
        eta = beta[0] + u[kind]
        if realized is not None:
            eta += beta[1] + beta[2] * realized[0] + beta[3] * realized[1] + beta[4] * realized[2]
        p_engaged = float(expit(eta))
        drawn = bool(engage_u[i] < p_engaged)
        back = t0 + int(return_delay[i])
        observed = False
        if drawn and back <= end:
            kk = bisect.bisect_left(times_l, back)
            j = below(kk) if kk else -1
            if j >= 0 and threads[j].id == first.link_id:
                j = j - 1 if j > 0 else (1 if kk > 1 else -1)
            if j >= 0:
                other = threads[j]
                b.add(user, back, other.id, other.id, text(3 + below(12)), born)
                observed = True

        truth_users.append(
            {
                "user": user,
                "kind": kind,
                "arrival": t0,
                "treated": treated,
                "planted": planted_l[i] if treated else None,
                "realized": list(realized) if realized is not None else None,
                "p_engaged": p_engaged,
                "engaged_drawn": drawn,
                "engaged_observed": observed,
            }
        )

    b.posts.sort(key=time_order)
    truth = {
        "community": spec.name,
        "type": spec.type,
        "users": n,
        "ban_date": spec.ban_date,
        "data_end": end,
        "u": u,
        "topic_words": topics,
        "n_treated": n_treated,
        "true_err": _true_err(truth_users),
        "expected_err": _expected_err(truth_users, params.beta, spec.type, u),
        "newcomers": truth_users,
    }
    return b.posts, truth


def _true_err(users) -> dict[str, Optional[float]]:
    out = {}
    for kind in KINDS:
        t = [u["engaged_observed"] for u in users if u["kind"] == kind and u["treated"]]
        c = [u["engaged_observed"] for u in users if u["kind"] == kind and not u["treated"]]
        if not t or not c or not any(c):
            out[kind] = None
        else:
            out[kind] = (sum(t) / len(t)) / (sum(c) / len(c))
    return out


def _expected_err(users, betas, ctype, u) -> dict[str, Optional[float]]:
    """Ratio of mean model probabilities, treated over untreated (ignores truncation)."""
    out = {}
    for kind in KINDS:
        t = [x["p_engaged"] for x in users if x["kind"] == kind and x["treated"]]
        if not t:
            out[kind] = None
            continue
        p0 = float(expit(betas[(kind, ctype)][0] + u[kind]))
        out[kind] = float(np.mean(t)) / p0
    return out


@dataclass
class SynthCorpus:
    posts: list[Post]
    truth: dict
    params: SynthParams

    def community_types(self) -> dict[str, str]:
        return {c.name: c.type for c in self.params.communities}


@gc_paused
def generate_corpus(params: SynthParams, hate_weight: float = 1.0) -> SynthCorpus:
    """Archive plus truth ledger. Same params (including seed) give the same output."""
    params.validate()
    templates = _Templates(synth_stub_lexicons(hate_weight))
    posts: list[Post] = []
    communities = {}
    for index, spec in enumerate(params.communities):
        cposts, truth = generate_community(params, spec, index, templates)
        posts.extend(cposts)
        communities[spec.name] = truth
    posts.sort(key=time_order)
    truth = {
        "params": params.to_dict(),
        "hate_words": sorted(FAKE_HATE_WORDS),
        "communities": communities,
    }
    return SynthCorpus(posts, truth, params)


# --------------------------------------------------------------------------
# Direct event generation (no text), for model-level checks
# --------------------------------------------------------------------------


def generate_events(
    beta: Sequence[float],
    sigma2: float,
    n_groups: int,
    n_per_group: int,
    law: FeatureLaw = POLARIZED,
    reply_prob: float = 0.8,
    seed: int = 0,
    kind: str = "comment",
) -> tuple[list[FirstPostEvent], np.ndarray]:
    """Events drawn straight from the random-intercept model; returns ``(events, u)``."""
    if n_groups < 1 or n_per_group < 1:
        raise SynthError("need at least one group and one user per group")
    if not 0.0 <= reply_prob <= 1.0:
        raise SynthError("reply_prob must lie in [0, 1]")
    if sigma2 < 0:
        raise SynthError("sigma2 must be non-negative")
    law.validate("law")
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta, dtype=float)
    u = rng.normal(0.0, math.sqrt(sigma2), size=n_groups)
    n = n_groups * n_per_group
    codes = np.repeat(np.arange(n_groups), n_per_group)
    treated = rng.random(n) < reply_prob
    feats = law.sample(rng, n)
    eta = beta[0] + u[codes] + treated * (beta[1] + feats @ beta[2:])
    engaged = rng.random(n) < expit(eta)
    events = []
    for i in range(n):
        g = int(codes[i])
        events.append(
            FirstPostEvent(
                user=f"u{i:07d}",
                community=f"g{g:03d}",
                kind=kind,
                post_id=f"p{i:07d}",
                first_post_time=i,
                thread_root=f"p{i:07d}",
                account_age=None,
                nest_level=1 if kind == "comment" else 0,
                valence=0.0,
                word_count=0,
                treated=bool(treated[i]),
                first_reply=ReplyFeatures(*map(float, feats[i])) if treated[i] else None,
                engaged=bool(engaged[i]),
            )
        )
    return events, u


# --------------------------------------------------------------------------
# Companion files
# --------------------------------------------------------------------------


def annotation_rows(candidate_words: Sequence[str], raters: int = 3, seed: int = 0) -> dict[str, list[int]]:
    """Ratings for a word list: invented hate words score high, everything else low.

    Borderline words and rater noise keep the agreement moderate (Fleiss'
    kappa near 0.5) rather than perfect.
    """
    rng = np.random.default_rng([int(seed), 7])
    rows = {}
    for word in sorted(set(candidate_words)):
        if word in FAKE_HATE_WORDS:
            rs = [2] * raters
            if raters > 2:
                rs[int(rng.integers(raters))] = int(rng.choice([1, 2]))
        elif rng.random() < 0.15:
            # borderline word: raters split between "not" and "sometimes"
            rs = [int(rng.choice([0, 1, 1, 1])) for _ in range(raters)]
        else:
            rs = [int(rng.random() < 0.05) for _ in range(raters)]
        if word not in FAKE_HATE_WORDS and sum(rs) >= 4:
            rs = [1] + [0] * (raters - 1)
        rows[word] = rs
    return rows


def write_companions(corpus: SynthCorpus, outdir: str | Path) -> dict[str, Path]:
    """Write the archive and everything a pipeline run needs next to it."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "archive": out / "archive.jsonl",
        "truth": out / "truth.json",
        "bans": out / "bans.tsv",
        "candidates": out / "candidates.tsv",
        "annotations": out / "annotations.csv",
        "hate_lexicon": out / "hate_lexicon.tsv",
        "stub_lexicons": out / "stub_lexicons.json",
        "config": out / "pipeline.toml",
    }
    write_archive(corpus.posts, paths["archive"])
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump(corpus.truth, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(paths["bans"], "w", encoding="utf-8") as fh:
        fh.write("community\tban_date\n")
        for c in corpus.params.communities:
            if c.ban_date is not None:
                fh.write(f"{c.name}\t{c.ban_date}\n")
    with open(paths["candidates"], "w", encoding="utf-8") as fh:
        fh.write("community\tsize\n")
        for c in corpus.params.communities:
            if c.type == "nonhateful":
                fh.write(f"{c.name}\t{c.users}\n")
    vocab = set(FAKE_HATE_WORDS)
    for truth in corpus.truth["communities"].values():
        vocab.update(truth["topic_words"])
    vocab.update(_FILLER)
    vocab.update(_POS_WORDS + _NEG_WORDS + (_TOXIC_TOKEN, _INSULT_TOKEN, _SECOND_PERSON) + _REPLY_FILLER)
    vocab.update(w for w in default_lexicon().valence if w.isalpha())
    rows = annotation_rows(sorted(vocab), seed=corpus.params.seed)
    with open(paths["annotations"], "w", encoding="utf-8") as fh:
        fh.write("word,rater1,rater2,rater3\n")
        for word, rs in rows.items():
            fh.write(word + "," + ",".join(map(str, rs)) + "\n")
    synth_hate_lexicon().to_tsv(paths["hate_lexicon"])
    synth_stub_lexicons().to_json(paths["stub_lexicons"])
    paths["config"].write_text(
        "\n".join(
            [
                "# generated alongside a synthetic archive",
                'archives = ["archive.jsonl"]',
                'bans = "bans.tsv"',
                'candidates = "candidates.tsv"',
                'annotations = "annotations.csv"',
                'hate_lexicon = "hate_lexicon.tsv"',
                'stub_lexicons = "stub_lexicons.json"',
                'scorer = "stub"',
                "detect_min_users = 0",
                "candidate_min_size = 1",
                "candidate_max_size = 100000000",
                f"matching_seed = {corpus.params.seed}",
                "simulation_seed = 0",
                "replications = 20",
                'output = "out"',
                "",
            ]
        ),
        encoding="utf-8",
    )
    return paths
