"""Distinctive vocabulary (SAGE), annotation aggregation and hate-word substitution."""

from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

HATE_SCORE_THRESHOLD = 4
HATEFUL_COMMUNITY_MIN_WORDS = 5  # strictly more than this many
DEFAULT_MIN_COUNT = 10
DEFAULT_SMOOTHING = 0.1
DEFAULT_LAMBDA = 1.0

_TOKEN = re.compile(r"[^\W_]+")


class SageError(RuntimeError):
    pass


class AnnotationError(ValueError):
    pass


class LexiconError(ValueError):
    pass


def sage_tokens(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop tokens shorter than 2."""
    return [t for t in _TOKEN.findall(text.lower()) if len(t) >= 2]


def count_tokens(texts: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for text in texts:
        counts.update(sage_tokens(text))
    return counts


# --------------------------------------------------------------------------
# SAGE
# --------------------------------------------------------------------------


@dataclass
class SageModel:
    vocabulary: list[str]
    m: np.ndarray
    eta: np.ndarray
    lam: float
    objective_trace: list[float] = field(default_factory=list, repr=False)
    converged: bool = True

    def deviations(self) -> dict[str, float]:
        return dict(zip(self.vocabulary, self.eta.tolist()))


def sage_objective(eta, counts, m, lam) -> float:
    """Negative penalized log-likelihood of the target counts."""
    z = m + eta
    zmax = z.max()
    lse = zmax + math.log(np.exp(z - zmax).sum())
    return float(-counts @ z + counts.sum() * lse + lam * np.abs(eta).sum())


def _soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def fit_sage(
    target_counts: Mapping[str, int],
    background_counts: Mapping[str, int],
    lam: float = DEFAULT_LAMBDA,
    min_count: int = DEFAULT_MIN_COUNT,
    smoothing: float = DEFAULT_SMOOTHING,
    tol: float = 1e-8,
    patience: int = 3,
    max_iter: int = 100_000,
) -> SageModel:
    """Fit sparse log-frequency deviations of a target corpus from a background.

    Minimises ``-c.(m+eta) + C*logsumexp(m+eta) + lam*|eta|_1`` by proximal
    gradient with backtracking, so the objective never increases between
    iterations. Stops once the decrease stays below ``tol`` for ``patience``
    consecutive iterations.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if not target_counts or sum(target_counts.values()) <= 0:
        raise SageError("empty target corpus")
    if not background_counts or sum(background_counts.values()) <= 0:
        raise SageError("empty background corpus")

    vocab = sorted(w for w, c in target_counts.items() if c >= min_count)
    if not vocab:
        raise SageError(f"no target word reaches min_count={min_count}")
    c = np.array([target_counts[w] for w in vocab], dtype=float)
    b = np.array([background_counts.get(w, 0) for w in vocab], dtype=float) + smoothing
    m = np.log(b) - math.log(b.sum())
    total = c.sum()

    eta = np.zeros(len(vocab))
    obj = sage_objective(eta, c, m, lam)
    if not math.isfinite(obj):
        raise SageError("non-finite objective at start")
    trace = [obj]
    step = 2.0 / total  # 1/L: the logsumexp Hessian has norm <= 1/2
    quiet = 0
    converged = False
    for _ in range(max_iter):
        z = m + eta
        zmax = z.max()
        p = np.exp(z - zmax)
        lse = zmax + math.log(p.sum())
        p /= p.sum()
        smooth = -c @ z + total * lse
        grad = -c + total * p
        t = min(step * 2.0, 1e6 / total)
        while True:
            cand = _soft_threshold(eta - t * grad, t * lam)
            delta = cand - eta
            zc = m + cand
            zcmax = zc.max()
            cand_smooth = -c @ zc + total * (zcmax + math.log(np.exp(zc - zcmax).sum()))
            bound = smooth + grad @ delta + (delta @ delta) / (2 * t)
            if cand_smooth <= bound + 1e-12 * abs(bound) or t <= 2.0 / total:
                break
            t *= 0.5
        cand_obj = float(cand_smooth + lam * np.abs(cand).sum())
        if not math.isfinite(cand_obj):
            raise SageError("non-finite objective during fit")
        if cand_obj > obj:
            # rounding at the optimum; keep the current point
            cand, cand_obj = eta, obj
        step = t
        decrease = obj - cand_obj
        eta, obj = cand, cand_obj
        trace.append(obj)
        quiet = quiet + 1 if decrease < tol else 0
        if quiet >= patience:
            converged = True
            break
    return SageModel(vocab, m, eta, lam, trace, converged)


def top_distinctive_words(model: SageModel, k: int) -> list[str]:
    """Up to ``k`` positive-deviation words, largest first, ties alphabetical."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(
        ((w, e) for w, e in zip(model.vocabulary, model.eta) if e > 0),
        key=lambda we: (-we[1], we[0]),
    )
    return [w for w, _ in ranked[:k]]


def write_sage_report(model: SageModel, path: str | Path) -> None:
    order = sorted(range(len(model.vocabulary)), key=lambda i: (-model.eta[i], model.vocabulary[i]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["word", "eta"])
        for i in order:
            writer.writerow([model.vocabulary[i], repr(float(model.eta[i]))])


# --------------------------------------------------------------------------
# Annotations
# --------------------------------------------------------------------------


@dataclass
class AnnotationSheet:
    ratings: dict[str, list[int]]

    def __post_init__(self):
        lengths = {len(r) for r in self.ratings.values()}
        if len(lengths) > 1:
            raise AnnotationError(f"ragged rating vectors (lengths {sorted(lengths)})")
        if lengths and lengths.pop() < 2:
            raise AnnotationError("at least two annotators are required")
        for word, rs in self.ratings.items():
            if any(r not in (0, 1, 2) for r in rs):
                raise AnnotationError(f"rating outside {{0,1,2}} for {word!r}")

    @classmethod
    def from_csv(cls, path: str | Path) -> "AnnotationSheet":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0].strip().lower() != "word":
                raise AnnotationError("annotation sheet must start with a 'word' column")
            ratings = {}
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise AnnotationError(f"ragged row for {row[0]!r}")
                ratings[row[0]] = [int(x) for x in row[1:]]
        return cls(ratings)


def fleiss_kappa(table: np.ndarray) -> float:
    """Fleiss' kappa from an items x categories table of rater counts."""
    table = np.asarray(table, dtype=float)
    n_items = table.shape[0]
    raters = table.sum(axis=1)
    if n_items == 0 or not np.all(raters == raters[0]):
        raise AnnotationError("every item needs the same number of ratings")
    n = raters[0]
    p_cat = table.sum(axis=0) / (n_items * n)
    p_item = ((table**2).sum(axis=1) - n) / (n * (n - 1))
    p_bar = p_item.mean()
    p_e = (p_cat**2).sum()
    if p_e >= 1.0:
        # one category used by everyone: agreement is perfect but chance-level
        return 1.0
    return float((p_bar - p_e) / (1.0 - p_e))


def aggregate_annotations(sheet: AnnotationSheet) -> tuple[set[str], float]:
    """Words whose summed ratings reach the hate threshold, plus Fleiss' kappa."""
    hate = {w for w, rs in sheet.ratings.items() if sum(rs) >= HATE_SCORE_THRESHOLD}
    words = sorted(sheet.ratings)
    table = np.zeros((len(words), 3))
    for i, w in enumerate(words):
        for r in sheet.ratings[w]:
            table[i, r] += 1
    kappa = fleiss_kappa(table) if words else float("nan")
    return hate, kappa


def classify_community(hate_word_count: int) -> bool:
    if hate_word_count < 0:
        raise ValueError("count must be non-negative")
    return hate_word_count > HATEFUL_COMMUNITY_MIN_WORDS


# --------------------------------------------------------------------------
# Hate lexicon and substitution
# --------------------------------------------------------------------------


@dataclass
class HateLexicon:
    replacements: dict[str, str]
    notes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.replacements = {w.lower(): r for w, r in self.replacements.items()}
        for word, rep in self.replacements.items():
            if not rep.strip():
                raise LexiconError(f"empty replacement for {word!r}")
            clash = [t for t in re.findall(r"\w+", rep.lower()) if t in self.replacements]
            if clash:
                raise LexiconError(f"replacement for {word!r} contains lexicon word {clash[0]!r}")
        self._pattern = None

    def check_disjoint(self, vocabulary: Iterable[str]) -> None:
        """Raise if any replacement token carries sentiment in ``vocabulary``."""
        vocab = {v.lower() for v in vocabulary}
        for word, rep in self.replacements.items():
            bad = [t for t in re.findall(r"\w+", rep.lower()) if t in vocab]
            if bad:
                raise LexiconError(
                    f"replacement for {word!r} uses sentiment-bearing token {bad[0]!r}"
                )

    @property
    def pattern(self) -> Optional[re.Pattern]:
        if self._pattern is None and self.replacements:
            words = sorted(self.replacements, key=lambda w: (-len(w), w))
            alternation = "|".join(re.escape(w) for w in words)
            self._pattern = re.compile(rf"(?<!\w)(?:{alternation})(?!\w)", re.IGNORECASE)
        return self._pattern

    @classmethod
    def from_tsv(cls, path: str | Path) -> "HateLexicon":
        reps, notes = {}, {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) < 2:
                    raise LexiconError(f"bad lexicon line: {line!r}")
                reps[parts[0]] = parts[1]
                notes[parts[0].lower()] = parts[2] if len(parts) > 2 else ""
        return cls(reps, notes)

    def to_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for word in sorted(self.replacements):
                fh.write(f"{word}\t{self.replacements[word]}\t{self.notes.get(word, '')}\n")


def substitute_hate_words(text: str, lexicon: HateLexicon) -> str:
    """Replace whole-token lexicon words (any case) by their neutral phrase."""
    pattern = lexicon.pattern
    if pattern is None:
        return text
    return pattern.sub(lambda m: lexicon.replacements[m.group(0).lower()], text)


def contains_hate_word(text: str, lexicon: HateLexicon) -> bool:
    pattern = lexicon.pattern
    return bool(pattern and pattern.search(text))
