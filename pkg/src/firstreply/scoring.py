"""Text scoring: rule-based sentiment valence and toxicity / attack probabilities.

Attribute probabilities come from either a remote scoring service speaking the
Perspective ``comments:analyze`` JSON dialect, or an offline stub that squashes
weighted pattern hits through a logistic. Downstream code only sees
:class:`AttributeScores` and never needs to know which one produced them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import string
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

# rule constants of the published valence-aware sentiment rule set
NEGATION_SCALAR = -0.74
CAPS_SCALAR = 1.733
EXCLAMATION_BOOST = 0.292
MAX_EXCLAMATIONS = 3
NORMALIZATION_ALPHA = 15.0
BOOST_INCREMENT = 0.293
BOOST_DECAY = (1.0, 0.95, 0.9)

DEFAULT_BOOSTERS = {
    **dict.fromkeys(
        "absolutely amazingly completely considerably decidedly deeply effing enormously "
        "entirely especially exceptionally extremely fabulously flipping fully greatly "
        "highly hugely incredibly intensely majorly more most particularly purely quite "
        "really remarkably so substantially thoroughly totally tremendously truly "
        "unbelievably unusually utterly very".split(),
        BOOST_INCREMENT,
    ),
    **dict.fromkeys(
        "almost barely hardly kinda less little marginally occasionally partly scarcely "
        "slightly somewhat sorta".split(),
        -BOOST_INCREMENT,
    ),
}

DEFAULT_NEGATIONS = frozenset(
    "aint arent cannot cant couldnt darent didnt doesnt dont hadnt hasnt havent isnt "
    "mightnt mustnt neither neednt never none nope nor not nothing nowhere oughtnt shant "
    "shouldnt uhuh wasnt werent without wont wouldnt rarely seldom despite".split()
)

ATTRIBUTES = ("TOXICITY", "ATTACK_ON_COMMENTER")
API_KEY_ENV = "PERSPECTIVE_API_KEY"

_PUNCT = string.punctuation
_HAS_PUNCT = re.compile("[" + re.escape(_PUNCT) + "]")


# --------------------------------------------------------------------------
# Sentiment
# --------------------------------------------------------------------------


@dataclass
class SentimentLexicon:
    valence: dict[str, float]
    boosters: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_BOOSTERS))
    negations: frozenset = DEFAULT_NEGATIONS

    @classmethod
    def from_tsv(cls, path: str | Path, **kwargs) -> "SentimentLexicon":
        with open(path, encoding="utf-8") as fh:
            return cls(_read_valence(fh), **kwargs)

    def negated(self) -> "SentimentLexicon":
        """Copy with every valence sign-flipped (used to check odd symmetry)."""
        return SentimentLexicon({w: -v for w, v in self.valence.items()}, self.boosters, self.negations)


def _read_valence(lines: Iterable[str]) -> dict[str, float]:
    valence = {}
    for line in lines:
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        valence[parts[0].lower()] = float(parts[1])
    return valence


@lru_cache(maxsize=1)
def default_lexicon() -> SentimentLexicon:
    text = resources.files("firstreply.data").joinpath("sentiment_lexicon.tsv").read_text("utf-8")
    return SentimentLexicon(_read_valence(text.splitlines()))


def _is_negation(word: str, negations) -> bool:
    return word in negations or "n't" in word


def normalize(score: float, alpha: float = NORMALIZATION_ALPHA) -> float:
    value = score / math.sqrt(score * score + alpha)
    return max(-1.0, min(1.0, value))


def sentiment(text: str, lexicon: Optional[SentimentLexicon] = None) -> float:
    """Compound valence in [-1, 1]; 0 for empty or valence-free text.

    Word valences are summed after negation (x -0.74 per negator among the
    three preceding words), boosters (+-0.293 towards the word's sign, decaying
    with distance), emphasis caps (x1.733 when the text mixes case) and
    trailing exclamation marks (+0.292 magnitude each, at most three, to the
    nearest preceding valenced word).
    """
    if lexicon is None:
        lexicon = default_lexicon()
    raw = text.split()
    if not raw:
        return 0.0
    if _HAS_PUNCT.search(text) is None:
        cores = raw
        lowers = text.lower().split()
    else:
        cores = [tok.strip(_PUNCT) for tok in raw]
        lowers = [c.lower() for c in cores]
    val_table = lexicon.valence
    hits = [i for i, low in enumerate(lowers) if low in val_table]
    if not hits:
        return 0.0
    mixed_case = False
    if text != text.lower():
        cased = [c for c in cores if any(ch.isalpha() for ch in c)]
        n_caps = sum(1 for c in cased if c.isupper())
        mixed_case = 0 < n_caps < len(cased)
    has_bang = "!" in text

    scores: list[float] = []
    last_valenced = None
    # without exclamation marks only the valenced positions matter
    for i in range(len(lowers)) if has_bang else hits:
        low = lowers[i]
        v = val_table.get(low)
        if v is not None and low not in lexicon.boosters:
            if mixed_case and cores[i].isupper():
                v *= CAPS_SCALAR
            for j in range(1, 4):
                if i - j < 0:
                    break
                prev = lowers[i - j]
                boost = lexicon.boosters.get(prev)
                if boost is not None and v != 0:
                    v += math.copysign(1.0, v) * boost * BOOST_DECAY[j - 1]
                if _is_negation(prev, lexicon.negations):
                    v *= NEGATION_SCALAR
            scores.append(v)
            last_valenced = len(scores) - 1
        if not has_bang:
            continue
        bangs = len(raw[i]) - len(raw[i].rstrip(_PUNCT))
        if bangs and last_valenced is not None:
            n = min(raw[i][len(raw[i]) - bangs:].count("!"), MAX_EXCLAMATIONS)
            if n:
                s = scores[last_valenced]
                scores[last_valenced] = s + math.copysign(EXCLAMATION_BOOST * n, s)
    if not scores:
        return 0.0
    return normalize(math.fsum(scores))


# --------------------------------------------------------------------------
# Attribute scores
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttributeScores:
    toxicity: float
    attack: float

    def __post_init__(self):
        for name in ("toxicity", "attack"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} score is not finite: {value}")
            object.__setattr__(self, name, min(1.0, max(0.0, float(value))))


def threshold_mode(scores: AttributeScores, threshold: float = 0.7) -> tuple[bool, bool]:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return scores.toxicity >= threshold, scores.attack >= threshold


class AttributeScorer(Protocol):
    def score(self, text: str) -> AttributeScores: ...


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _phrase_pattern(phrases: Iterable[str]) -> Optional[re.Pattern]:
    phrases = sorted(phrases, key=lambda p: (-len(p), p))
    if not phrases:
        return None
    alts = "|".join(r"\s+".join(map(re.escape, p.split())) for p in phrases)
    return re.compile(rf"(?<!\w)(?:{alts})(?!\w)", re.IGNORECASE)


@dataclass
class StubLexicons:
    toxic: dict[str, float]
    insult: dict[str, float]
    second_person: frozenset = frozenset({"you", "your", "youre", "you're", "yours", "yourself", "u", "ur"})
    baseline: float = 0.05
    undirected_attack_factor: float = 0.3

    def __post_init__(self):
        self.toxic = {" ".join(k.lower().split()): float(v) for k, v in self.toxic.items()}
        self.insult = {" ".join(k.lower().split()): float(v) for k, v in self.insult.items()}
        if any(w < 0 for w in [*self.toxic.values(), *self.insult.values()]):
            raise ValueError("stub pattern weights must be non-negative")
        self.second_person = frozenset(w.lower() for w in self.second_person)
        self._toxic_re = _phrase_pattern(self.toxic)
        self._insult_re = _phrase_pattern(self.insult)
        self.bias = _logit(self.baseline)

    @classmethod
    def from_json(cls, path: str | Path) -> "StubLexicons":
        with open(path, encoding="utf-8") as fh:
            return cls._from_dict(json.load(fh))

    @classmethod
    def _from_dict(cls, data: Mapping) -> "StubLexicons":
        kwargs = {k: data[k] for k in ("baseline", "undirected_attack_factor") if k in data}
        if "second_person" in data:
            kwargs["second_person"] = frozenset(data["second_person"])
        return cls(toxic=dict(data["toxic"]), insult=dict(data["insult"]), **kwargs)

    def to_json(self, path: str | Path) -> None:
        data = {
            "baseline": self.baseline,
            "undirected_attack_factor": self.undirected_attack_factor,
            "second_person": sorted(self.second_person),
            "toxic": dict(sorted(self.toxic.items())),
            "insult": dict(sorted(self.insult.items())),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def with_toxic(self, extra: Mapping[str, float]) -> "StubLexicons":
        return StubLexicons(
            {**self.toxic, **extra},
            dict(self.insult),
            self.second_person,
            self.baseline,
            self.undirected_attack_factor,
        )

    def toxic_weight(self, text: str) -> float:
        if self._toxic_re is None:
            return 0.0
        table = self.toxic
        return math.fsum(table[" ".join(m.lower().split())] for m in self._toxic_re.findall(text))

    def insult_weight(self, text: str) -> float:
        if self._insult_re is None:
            return 0.0
        table = self.insult
        return math.fsum(table[" ".join(m.lower().split())] for m in self._insult_re.findall(text))

    def is_directed(self, text: str) -> bool:
        return any(tok.strip(_PUNCT).lower() in self.second_person for tok in text.split())


@lru_cache(maxsize=1)
def default_stub_lexicons() -> StubLexicons:
    text = resources.files("firstreply.data").joinpath("stub_lexicons.json").read_text("utf-8")
    return StubLexicons._from_dict(json.loads(text))


def score_attributes_stub(text: str, lexicons: Optional[StubLexicons] = None) -> AttributeScores:
    """Deterministic offline surrogate for toxicity and attack probabilities.

    toxicity = sigmoid(bias + sum of toxic-pattern weights)
    attack   = sigmoid(bias + f * sum of insult-pattern weights), with f = 1 when
               a second-person pronoun is present and the undirected factor otherwise.
    """
    lex = lexicons or default_stub_lexicons()
    tox = lex.bias + lex.toxic_weight(text)
    insult = lex.insult_weight(text)
    if insult:
        insult *= 1.0 if lex.is_directed(text) else lex.undirected_attack_factor
    return AttributeScores(_sigmoid(tox), _sigmoid(lex.bias + insult))


class StubScorer:
    def __init__(self, lexicons: Optional[StubLexicons] = None):
        self.lexicons = lexicons or default_stub_lexicons()

    def score(self, text: str) -> AttributeScores:
        return score_attributes_stub(text, self.lexicons)


# --------------------------------------------------------------------------
# Remote scorer
# --------------------------------------------------------------------------


class ScorerError(RuntimeError):
    pass


class ScorerAuthError(ScorerError):
    """Credentials rejected or quota exhausted; rerun with the stub scorer."""

    def __init__(self, detail: str):
        super().__init__(f"{detail}; check {API_KEY_ENV} or rerun with scorer = \"stub\"")


class ScorerTransportError(ScorerError):
    pass


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class ScoreCache:
    """Append-only store of ``sha256<TAB>toxicity<TAB>attack<TAB>sentiment`` lines."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._data: dict[str, tuple[float, float, float]] = {}
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    parts = line.rstrip("\n").split("\t")
                    if len(parts) == 4:
                        self._data[parts[0]] = (float(parts[1]), float(parts[2]), float(parts[3]))

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def get(self, key: str) -> Optional[tuple[float, float, float]]:
        return self._data.get(key)

    def put(self, key: str, toxicity: float, attack: float, sentiment_value: float) -> None:
        with self._lock:
            if key in self._data:
                return
            self._data[key] = (toxicity, attack, sentiment_value)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(f"{key}\t{toxicity!r}\t{attack!r}\t{sentiment_value!r}\n")


class RateLimiter:
    def __init__(self, rate: float, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.interval = 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        with self._lock:
            now = self._clock()
            slot = max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            self._sleep(slot - now)


class RemoteScorer:
    """Client for a ``comments:analyze``-style attribute scoring endpoint.

    Identical texts are only ever sent once: results are cached by content
    hash, in memory and (optionally) in an append-only cache file.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: Optional[str] = None,
        rate_limit: float = 1.0,
        cache: Optional[ScoreCache] = None,
        client: Optional[httpx.Client] = None,
        max_attempts: int = 3,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.cache = cache if cache is not None else ScoreCache()
        self.client = client or httpx.Client(timeout=30.0)
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._sleep = sleep
        self.limiter = RateLimiter(rate_limit, sleep=sleep)
        self.requests_sent = 0

    def _payload(self, text: str) -> dict:
        return {
            "comment": {"text": text},
            "requestedAttributes": {name: {} for name in ATTRIBUTES},
            "doNotStore": True,
        }

    @staticmethod
    def parse_response(data: Mapping) -> AttributeScores:
        try:
            attrs = data["attributeScores"]
            tox = attrs["TOXICITY"]["summaryScore"]["value"]
            att = attrs["ATTACK_ON_COMMENTER"]["summaryScore"]["value"]
        except (KeyError, TypeError) as exc:
            raise ScorerError(f"unexpected response layout: missing {exc}") from None
        return AttributeScores(float(tox), float(att))

    def _request(self, text: str) -> AttributeScores:
        params = {"key": self.api_key} if self.api_key else None
        last = "no attempt made"
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            self.limiter.wait()
            self.requests_sent += 1
            try:
                resp = self.client.post(self.endpoint, json=self._payload(text), params=params)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code in (401, 403):
                raise ScorerAuthError(f"scoring service refused credentials (HTTP {resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise ScorerError(f"scoring request rejected: HTTP {resp.status_code} {resp.text[:200]}")
            return self.parse_response(resp.json())
        if last == "HTTP 429":
            raise ScorerAuthError("scoring quota exhausted (HTTP 429 after retries)")
        raise ScorerTransportError(f"scoring failed after {self.max_attempts} attempts: {last}")

    def score(self, text: str) -> AttributeScores:
        if not text.strip():
            return AttributeScores(0.0, 0.0)
        key = text_hash(text)
        hit = self.cache.get(key)
        if hit is not None:
            return AttributeScores(hit[0], hit[1])
        result = self._request(text)
        self.cache.put(key, result.toxicity, result.attack, sentiment(text))
        return result


def score_attributes_remote(
    text: str,
    endpoint: str,
    credentials: Optional[str] = None,
    rate_limit: float = 1.0,
    **kwargs,
) -> AttributeScores:
    return RemoteScorer(endpoint, credentials, rate_limit, **kwargs).score(text)


# --------------------------------------------------------------------------
# Batch scoring
# --------------------------------------------------------------------------


def score_texts(
    texts: Sequence[str],
    scorer: AttributeScorer,
    lexicon: Optional[SentimentLexicon] = None,
    cache: Optional[ScoreCache] = None,
    window: int = 1,
) -> list[tuple[float, float, float]]:
    """Score texts as ``(sentiment, toxicity, attack)``, in input order.

    Up to ``window`` requests run concurrently; results (and cache appends)
    are consumed in input order so the output never depends on completion
    order. Empty texts score ``(0, 0, 0)``.
    """
    lexicon = lexicon or default_lexicon()
    cache = cache if cache is not None else ScoreCache()
    keys = [text_hash(t) for t in texts]
    todo: dict[str, str] = {}
    for key, text in zip(keys, texts):
        if text.strip() and key not in cache and key not in todo:
            todo[key] = text

    def work(text: str) -> AttributeScores:
        return scorer.score(text)

    if todo:
        items = list(todo.items())
        if window > 1:
            with ThreadPoolExecutor(max_workers=window) as pool:
                results = pool.map(work, [t for _, t in items])
                for (key, text), res in zip(items, results):
                    cache.put(key, res.toxicity, res.attack, sentiment(text, lexicon))
        else:
            for key, text in items:
                res = work(text)
                cache.put(key, res.toxicity, res.attack, sentiment(text, lexicon))

    out = []
    for key, text in zip(keys, texts):
        if not text.strip():
            out.append((0.0, 0.0, 0.0))
        else:
            tox, att, sent = cache.get(key)
            out.append((sent, tox, att))
    return out
