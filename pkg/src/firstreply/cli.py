"""Command line pipeline: ingest, detect, score, cohort, stats, simulate, report.

Every stage reads its predecessors' artifacts from the output directory and
records what it read and wrote in ``manifest.json``. Stages refuse to run on
artifacts produced under a different configuration.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import synth as synth_mod
from .cohort import MatchedPairs, MatchingError, Pair, feature_matrix, standardized_mean_differences
from .corpus import (
    DataIntegrityError,
    FirstPostEvent,
    IngestionError,
    filter_bots,
    load_name_list,
    read_archive,
    write_archive,
)
from .lexicon import (
    AnnotationError,
    AnnotationSheet,
    HateLexicon,
    LexiconError,
    SageError,
    substitute_hate_words,
)
from .pipeline import (
    ATTRIBUTE_NAMES,
    SubstitutionRow,
    analyze,
    build_communities,
    detect_hateful,
    first_post_events,
    map_ordered,
    substitution_summary,
)
from .scoring import (
    API_KEY_ENV,
    RemoteScorer,
    ScoreCache,
    ScorerError,
    SentimentLexicon,
    StubLexicons,
    StubScorer,
    default_lexicon,
    default_stub_lexicons,
    score_texts,
)
from .simulate import (
    SimulationError,
    dominance_applies,
    simulate_community,
    write_growth_curves,
    write_summary,
)
from .stats import (
    COLUMNS,
    EngagementModel,
    ModelFitError,
    UndefinedStatistic,
    design_matrix,
    err,
    fit_mixed_logistic,
    spearman,
    vif,
    wilcoxon_signed_rank,
)

logger = logging.getLogger("firstreply")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


class ConfigMismatchError(ConfigError):
    pass


class MissingArtifactError(RuntimeError):
    def __init__(self, artifact: str, stage: str, producer: str):
        super().__init__(
            f"stage {stage!r} needs {artifact!r} (written by {producer!r}), which is missing; "
            f"run {producer!r} first"
        )
        self.artifact = artifact


class StaleArtifactError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Key:
    name: str
    type: str  # path | paths | str | int | float
    default: Any
    help: str
    hashed: bool = True  # execution-only keys do not enter the config hash
    choices: Optional[tuple] = None


KEYS = (
    Key("archives", "paths", None, "archive files (NDJSON, optionally .gz)"),
    Key("bot_patterns", "path", None, "author-name substrings marking bots (default: packaged list)"),
    Key("bot_blocklist", "path", None, "exact author names to drop after manual review"),
    Key("bans", "path", None, "TSV community<TAB>ban_date of banned communities"),
    Key("candidates", "path", None, "TSV community<TAB>size of candidate control communities"),
    Key("annotations", "path", None, "CSV word,rater1,rater2,... with 0/1/2 ratings"),
    Key("hate_lexicon", "path", None, "TSV hate word<TAB>neutral replacement"),
    Key("sentiment_lexicon", "path", None, "TSV word<TAB>valence (default: packaged lexicon)"),
    Key("stub_lexicons", "path", None, "JSON pattern weights for the offline scorer (default: packaged)"),
    Key("scorer", "str", "stub", "attribute scorer", choices=("stub", "remote")),
    Key("scorer_endpoint", "str", "", "scoring service URL (remote scorer)"),
    Key("scorer_key_env", "str", API_KEY_ENV, "environment variable holding the scoring credential"),
    Key("rate_limit", "float", 1.0, "scoring requests per second (remote scorer)"),
    Key("score_cache", "path", None, "append-only score cache file", hashed=False),
    Key("sage_lambda", "float", 1.0, "SAGE L1 penalty"),
    Key("sage_min_count", "int", 10, "minimum target count for a word to enter SAGE"),
    Key("sage_top_k", "int", 100, "distinctive words kept per banned community"),
    Key("detect_min_users", "int", 3000, "banned communities need more authors than this"),
    Key("candidate_min_size", "int", 10_000, "candidate size lower bound (exclusive)"),
    Key("candidate_max_size", "int", 2_000_000, "candidate size upper bound (exclusive)"),
    Key("matching_seed", "int", 0, "seed for pool subsampling and treated visiting order"),
    Key("pool_cap", "int", 30_000, "largest matching pool before subsampling"),
    Key("threshold", "float", 0.7, "cutoff for the threshold-mode model refit"),
    Key("simulation_seed", "int", 0, "first simulation seed; replication r uses seed + r"),
    Key("replications", "int", 100, "simulation replications per community"),
    Key("curve_replications", "int", 1, "replications whose full growth curves are written"),
    Key("output", "path", "out", "output directory", hashed=False),
    Key("workers", "int", 1, "worker threads (results do not depend on it)", hashed=False),
    Key("synth_dir", "path", "synth", "synth: directory for the generated archive and companions"),
    Key("synth_seed", "int", 0, "synth: generator seed"),
    Key("synth_hateful", "int", 10, "synth: number of hateful communities"),
    Key("synth_nonhateful", "int", 10, "synth: number of non-hateful communities"),
    Key("synth_users", "int", 2000, "synth: newcomers per community"),
    Key("synth_hate_rate", "float", 0.08, "synth: share of hateful-community posts with a hate word"),
)
KEY_BY_NAME = {k.name: k for k in KEYS}


def _coerce(key: Key, value, base: Path):
    try:
        if value is None:
            return None
        if key.type == "path":
            if not isinstance(value, str):
                raise TypeError
            return str(base / value) if not Path(value).is_absolute() else value
        if key.type == "paths":
            if isinstance(value, str):
                value = [value]
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise TypeError
            return [str(base / v) if not Path(v).is_absolute() else v for v in value]
        if key.type == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if key.type == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if not isinstance(value, str):
            raise TypeError
        if key.choices and value not in key.choices:
            raise ConfigError(f"{key.name} must be one of {', '.join(key.choices)} (got {value!r})")
        return value
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{key.name}: expected {key.type}, got {value!r}") from None


@dataclass
class Config:
    values: dict[str, Any]
    raw: dict[str, Any]  # as written, for hashing and the manifest

    def __getitem__(self, name):
        return self.values[name]

    @property
    def hash(self) -> str:
        payload = {k: v for k, v in sorted(self.raw.items()) if KEY_BY_NAME[k].hashed}
        return _sha_bytes(json.dumps(payload, sort_keys=True).encode("utf-8"))

    @property
    def out(self) -> Path:
        return Path(self.values["output"])


def load_config(path: Optional[str], overrides: dict[str, Any]) -> Config:
    """Defaults, then the TOML file, then command line flags.

    Relative paths resolve against the config file's directory (file keys) or
    the working directory (flags).
    """
    raw: dict[str, Any] = {k.name: k.default for k in KEYS}
    values: dict[str, Any] = {}
    cwd = Path.cwd()
    file_base = cwd
    from_file: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        try:
            with open(p, "rb") as fh:
                from_file = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
        unknown = sorted(set(from_file) - set(KEY_BY_NAME))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        file_base = p.resolve().parent
    for key in KEYS:
        if key.name in overrides and overrides[key.name] is not None:
            raw[key.name] = overrides[key.name]
            values[key.name] = _coerce(key, overrides[key.name], cwd)
        elif key.name in from_file:
            raw[key.name] = from_file[key.name]
            values[key.name] = _coerce(key, from_file[key.name], file_base)
        else:
            values[key.name] = _coerce(key, key.default, file_base)
    for name in ("workers", "replications", "curve_replications", "sage_top_k", "pool_cap"):
        if values[name] < 1:
            raise ConfigError(f"{name} must be >= 1")
    if not 0.0 < values["threshold"] < 1.0:
        raise ConfigError("threshold must lie in (0, 1)")
    if values["sage_lambda"] < 0:
        raise ConfigError("sage_lambda must be >= 0")
    if values["rate_limit"] <= 0:
        raise ConfigError("rate_limit must be > 0")
    return Config(values, raw)


def _require(cfg: Config, *names: str) -> None:
    for name in names:
        value = cfg[name]
        if value is None or value == []:
            raise ConfigError(f"config key {name!r} is required for this stage")
        for p in value if isinstance(value, list) else [value]:
            if not Path(p).exists():
                raise ConfigError(f"{name}: {p} does not exist")


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------


def _sha_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


STAGES = ("ingest", "detect", "score", "cohort", "stats", "simulate", "report")
REQUIRES = {
    "ingest": (),
    "detect": ("ingest",),
    "score": ("ingest",),
    "cohort": ("ingest", "detect", "score"),
    "stats": ("cohort",),
    "simulate": ("cohort", "stats"),
    "report": ("detect", "score", "cohort", "stats", "simulate"),
}


# the artifact named when a predecessor never ran
PRIMARY_ARTIFACT = {
    "ingest": "posts.jsonl",
    "detect": "detection.csv",
    "score": "reply_scores.csv",
    "cohort": "events.jsonl",
    "stats": "models.json",
    "simulate": "growth_summary.csv",
}


def _downstream(stage: str) -> set[str]:
    out: set[str] = set()
    frontier = {stage}
    while frontier:
        nxt = {s for s, reqs in REQUIRES.items() if frontier & set(reqs)} - out
        out |= nxt
        frontier = nxt
    return out


class Manifest:
    def __init__(self, out: Path):
        self.path = out / MANIFEST
        self.data = {"stages": {}}
        if self.path.exists():
            try:
                self.data = json.loads(self.path.read_text("utf-8"))
            except json.JSONDecodeError as exc:
                raise StaleArtifactError(f"{self.path} is corrupt: {exc}") from None

    def check_predecessors(self, stage: str, cfg: Config) -> None:
        stages = self.data["stages"]
        for pred in REQUIRES[stage]:
            entry = stages.get(pred)
            if entry is None:
                raise MissingArtifactError(PRIMARY_ARTIFACT[pred], stage, pred)
            if entry["config_hash"] != cfg.hash:
                raise ConfigMismatchError(
                    f"stage {stage!r}: artifacts of {pred!r} were produced under config "
                    f"{entry['config_hash'][:12]}, current config is {cfg.hash[:12]}; "
                    f"re-run {pred!r} (or 'all') with the current config"
                )
            for rel, digest in entry["outputs"].items():
                p = self.path.parent / rel
                if not p.exists():
                    raise MissingArtifactError(rel, stage, pred)
                if sha256_file(p) != digest:
                    raise StaleArtifactError(
                        f"{rel} changed after {pred!r} wrote it; re-run {pred!r}"
                    )

    def record(self, stage: str, cfg: Config, inputs: dict[str, str], outputs: Sequence[str], seed=None):
        stages = self.data["stages"]
        for later in _downstream(stage):
            stages.pop(later, None)
        out = self.path.parent
        stages[stage] = {
            "config_hash": cfg.hash,
            "seed": seed,
            "inputs": {name: sha256_file(p) for name, p in sorted(inputs.items())},
            "outputs": {rel: sha256_file(out / rel) for rel in sorted(outputs)},
        }
        self.data["config"] = {k: v for k, v in sorted(cfg.raw.items()) if KEY_BY_NAME[k].hashed}
        self.data["config_hash"] = cfg.hash
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Small file helpers
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def read_table(path: str, columns: int = 2) -> list[list[str]]:
    """TSV rows with an optional header line (skipped when its second field is not numeric)."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < columns:
                raise DataIntegrityError(f"{path}:{n + 1}: expected {columns} tab-separated fields")
            rows.append(parts)
    if rows:
        try:
            float(rows[0][1])
        except ValueError:
            rows = rows[1:]
    return rows


def _ban_table(cfg: Config) -> dict[str, int]:
    try:
        return {r[0]: int(float(r[1])) for r in read_table(cfg["bans"])}
    except ValueError as exc:
        raise DataIntegrityError(f"bad ban date in {cfg['bans']}: {exc}") from None


def _candidate_table(cfg: Config) -> dict[str, int]:
    try:
        return {r[0]: int(float(r[1])) for r in read_table(cfg["candidates"])}
    except ValueError as exc:
        raise DataIntegrityError(f"bad size in {cfg['candidates']}: {exc}") from None


def _sentiment_lexicon(cfg: Config) -> SentimentLexicon:
    if cfg["sentiment_lexicon"]:
        return SentimentLexicon.from_tsv(cfg["sentiment_lexicon"])
    return default_lexicon()


def _scorer(cfg: Config):
    if cfg["scorer"] == "stub":
        lex = StubLexicons.from_json(cfg["stub_lexicons"]) if cfg["stub_lexicons"] else default_stub_lexicons()
        return StubScorer(lex)
    import os

    if not cfg["scorer_endpoint"]:
        raise ConfigError("scorer = 'remote' needs scorer_endpoint")
    credentials = os.environ.get(cfg["scorer_key_env"])
    return RemoteScorer(cfg["scorer_endpoint"], credentials, cfg["rate_limit"])


def _cache(cfg: Config) -> ScoreCache:
    return ScoreCache(cfg["score_cache"]) if cfg["score_cache"] else ScoreCache()


def _load_posts(cfg: Config):
    return read_archive(cfg.out / "posts.jsonl").posts


def _load_communities(cfg: Config):
    # posts.jsonl is already bot-filtered
    return build_communities(_load_posts(cfg))


def _read_scores(path: Path) -> dict[str, tuple[float, float, float]]:
    out = {}
    for row in read_csv(path):
        out[row["post_id"]] = (float(row["sentiment"]), float(row["toxicity"]), float(row["attack"]))
    return out


def _read_events(path: Path) -> list[tuple[str, FirstPostEvent]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            out.append((rec.pop("community_type"), FirstPostEvent.from_record(rec)))
    return out


def _nan_none(x):
    return None if isinstance(x, float) and math.isnan(x) else x


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def stage_ingest(cfg: Config, man: Manifest) -> list[str]:
    _require(cfg, "archives")
    posts, lines, malformed = [], 0, 0
    for path in cfg["archives"]:
        parsed = read_archive(path)
        posts.extend(parsed.posts)
        lines += parsed.lines
        malformed += parsed.malformed
    if not posts:
        raise IngestionError("the archives contain no usable posts")
    ids = [p.id for p in posts]
    if len(set(ids)) != len(ids):
        raise DataIntegrityError("duplicate post ids across archives")
    patterns = load_name_list(cfg["bot_patterns"]) if cfg["bot_patterns"] else _packaged_bot_patterns()
    blocklist = load_name_list(cfg["bot_blocklist"]) if cfg["bot_blocklist"] else []
    kept = filter_bots(posts, patterns, blocklist)
    kept.sort(key=lambda p: (p.community, p.created_at, p.id))
    out = cfg.out
    write_archive(kept, out / "posts.jsonl")
    per = {}
    for p in kept:
        per.setdefault(p.community, set()).add(p.author)
    counts = {}
    for p in kept:
        counts[p.community] = counts.get(p.community, 0) + 1
    write_json(
        out / "ingest.json",
        {
            "lines": lines,
            "malformed": malformed,
            "posts": len(posts),
            "kept": len(kept),
            "bot_posts_removed": len(posts) - len(kept),
            "communities": {c: {"posts": counts[c], "authors": len(per[c])} for c in sorted(per)},
        },
    )
    inputs = {f"archive[{i}]": p for i, p in enumerate(cfg["archives"])}
    for name in ("bot_patterns", "bot_blocklist"):
        if cfg[name]:
            inputs[name] = cfg[name]
    outputs = ["posts.jsonl", "ingest.json"]
    man.record("ingest", cfg, inputs, outputs)
    return outputs


def _packaged_bot_patterns() -> list[str]:
    from importlib import resources

    text = resources.files("firstreply.data").joinpath("bot_patterns.txt").read_text("utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


def stage_detect(cfg: Config, man: Manifest) -> list[str]:
    _require(cfg, "bans", "annotations")
    comms = _load_communities(cfg)
    bans = _ban_table(cfg)
    sheet = AnnotationSheet.from_csv(cfg["annotations"])
    background = None
    if cfg["candidates"]:
        background = [c for c in _candidate_table(cfg) if c not in bans]
    det = detect_hateful(
        comms, sorted(bans), sheet, background,
        lam=cfg["sage_lambda"], min_count=cfg["sage_min_count"], top_k=cfg["sage_top_k"],
        min_users=cfg["detect_min_users"], workers=cfg["workers"],
    )
    out = cfg.out
    rows = []
    for name in sorted(det.top_words):
        eta = det.models[name].deviations()
        for rank, w in enumerate(det.top_words[name], start=1):
            rows.append((name, rank, w, float(eta[w]), w in det.hate_words))
    write_csv(out / "sage_top_words.csv", ["community", "rank", "word", "eta", "hate_word"], rows)
    rows = []
    for name in sorted(bans):
        if name in det.skipped:
            rows.append((name, "", "", False, det.skipped[name]))
        else:
            rows.append((name, comms[name].authors, det.hate_counts[name], name in det.hateful, ""))
    write_csv(out / "detection.csv", ["community", "authors", "hate_word_count", "hateful", "note"], rows)
    write_json(
        out / "detection.json",
        {
            "fleiss_kappa": _nan_none(det.kappa),
            "hate_words": sorted(det.hate_words),
            "unannotated_words": det.unannotated,
            "hateful": det.hateful,
            "skipped": det.skipped,
            "sage_lambda": cfg["sage_lambda"],
            "sage_top_k": cfg["sage_top_k"],
        },
    )
    outputs = ["sage_top_words.csv", "detection.csv", "detection.json"]
    inputs = {"bans": cfg["bans"], "annotations": cfg["annotations"]}
    if cfg["candidates"]:
        inputs["candidates"] = cfg["candidates"]
    man.record("detect", cfg, inputs, outputs)
    return outputs


def stage_score(cfg: Config, man: Manifest) -> list[str]:
    comms = _load_communities(cfg)
    lexicon = _sentiment_lexicon(cfg)
    scorer = _scorer(cfg)
    cache = _cache(cfg)
    hate_lex = HateLexicon.from_tsv(cfg["hate_lexicon"]) if cfg["hate_lexicon"] else None
    if hate_lex is not None:
        hate_lex.check_disjoint(lexicon.valence)
    rows, sub_rows = [], []
    for name in sorted(comms):
        comm = comms[name]
        events = first_post_events(comm, None, None, lexicon)
        by_id = {p.id: p for p in comm.posts}
        ids = [ev.reply_id for ev in events if ev.reply_id is not None]
        texts = [by_id[i].body for i in ids]
        scores = score_texts(texts, scorer, lexicon, cache, window=cfg["workers"])
        for i, (s, t, a) in zip(ids, scores):
            rows.append((i, name, s, t, a))
        if hate_lex is not None:
            changed = [(i, substitute_hate_words(x, hate_lex)) for i, x in zip(ids, texts)]
            changed = [(i, x) for (i, x), orig in zip(changed, texts) if x != orig]
            swapped = score_texts([x for _, x in changed], scorer, lexicon, cache, window=cfg["workers"])
            for (i, _), (s, t, a) in zip(changed, swapped):
                sub_rows.append((i, name, s, t, a))
    header = ["post_id", "community", "sentiment", "toxicity", "attack"]
    write_csv(cfg.out / "reply_scores.csv", header, rows)
    write_csv(cfg.out / "substituted_scores.csv", header, sub_rows)
    outputs = ["reply_scores.csv", "substituted_scores.csv"]
    inputs = {}
    for name in ("hate_lexicon", "sentiment_lexicon", "stub_lexicons"):
        if cfg[name]:
            inputs[name] = cfg[name]
    man.record("score", cfg, inputs, outputs)
    return outputs


def stage_cohort(cfg: Config, man: Manifest) -> list[str]:
    _require(cfg, "bans", "candidates")
    out = cfg.out
    comms = _load_communities(cfg)
    bans = _ban_table(cfg)
    sizes = _candidate_table(cfg)
    hateful = [r["community"] for r in read_csv(out / "detection.csv") if r["hateful"] == "true"]
    if not hateful:
        raise DataIntegrityError("detection classified no community as hateful; nothing to analyze")
    candidates = [c for c in sorted(sizes) if c not in bans]
    scores = _read_scores(out / "reply_scores.csv")
    try:
        analysis = analyze(
            comms, hateful, candidates, bans, lexicon=_sentiment_lexicon(cfg), sizes=sizes,
            size_bounds=(cfg["candidate_min_size"], cfg["candidate_max_size"]),
            seed=cfg["matching_seed"], pool_cap=cfg["pool_cap"], scores=scores, workers=cfg["workers"],
        )
    except KeyError as exc:
        raise DataIntegrityError(str(exc)) from None
    write_csv(
        out / "community_pairs.csv",
        ["hateful", "control", "distance", "ban_date", "hateful_size", "control_size",
         "hateful_p90_return", "control_p90_return"],
        [
            (h.community, c.community, d, analysis.communities[h.community].ban_date,
             h.size, c.size, h.p90_return, c.p90_return)
            for h, c, d in analysis.community_pairs
        ],
    )
    names = sorted(analysis.communities)
    with open(out / "events.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for name in names:
            ca = analysis.communities[name]
            for ev in sorted(ca.events, key=lambda e: e.user):
                rec = ev.to_record()
                rec["community_type"] = ca.type
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    pair_rows, balance_rows, skipped = [], [], {}
    for name in names:
        ca = analysis.communities[name]
        for kind in ("comment", "submission"):
            mp = ca.pairs[kind]
            if mp.skipped:
                skipped[f"{name}/{kind}"] = mp.skipped
            for p in mp.pairs:
                pair_rows.append((name, kind, p.treated.user, p.control.user, p.distance))
            if mp.pairs:
                balance_rows.extend(_balance(ca.events, mp, name, kind))
    write_csv(out / "pairs.csv", ["community", "kind", "treated_user", "control_user", "distance"], pair_rows)
    write_csv(
        out / "balance.csv",
        ["community", "kind", "feature", "smd_before", "smd_after"],
        balance_rows,
    )
    write_json(
        out / "cohort.json",
        {
            "communities": {
                n: {"type": analysis.communities[n].type, "matched_to": analysis.communities[n].matched_to,
                    "ban_date": analysis.communities[n].ban_date}
                for n in names
            },
            "skipped_pools": skipped,
            "notes": analysis.notes,
            "matching_seed": cfg["matching_seed"],
        },
    )
    outputs = ["community_pairs.csv", "events.jsonl", "pairs.csv", "balance.csv", "cohort.json"]
    man.record("cohort", cfg, {"bans": cfg["bans"], "candidates": cfg["candidates"]}, outputs,
               seed=cfg["matching_seed"])
    return outputs


def _balance(events, mp: MatchedPairs, name: str, kind: str):
    pool = [e for e in events if e.kind == kind and e.complete]
    t_all = feature_matrix([e for e in pool if e.treated], mp.features)
    c_all = feature_matrix([e for e in pool if not e.treated], mp.features)
    scale = np.sqrt((t_all.var(axis=0, ddof=1) + c_all.var(axis=0, ddof=1)) / 2)
    before = standardized_mean_differences(t_all, c_all, scale)
    after = standardized_mean_differences(
        feature_matrix(mp.treated, mp.features), feature_matrix(mp.control, mp.features), scale
    )
    return [(name, kind, f, float(b), float(a)) for f, b, a in zip(mp.features, before, after)]


def _matched_pairs(events_by_comm, pair_rows) -> dict[tuple[str, str], MatchedPairs]:
    lookup = {(c, ev.user): ev for c, evs in events_by_comm.items() for ev in evs}
    out: dict[tuple[str, str], MatchedPairs] = {}
    for row in pair_rows:
        key = (row["community"], row["kind"])
        mp = out.setdefault(key, MatchedPairs([], (), community=key[0], kind=key[1]))
        mp.pairs.append(
            Pair(lookup[(key[0], row["treated_user"])], lookup[(key[0], row["control_user"])],
                 float(row["distance"]))
        )
    return out


def stage_stats(cfg: Config, man: Manifest) -> list[str]:
    out = cfg.out
    typed = _read_events(out / "events.jsonl")
    cohort = json.loads((out / "cohort.json").read_text("utf-8"))
    info = cohort["communities"]
    events_by_comm: dict[str, list[FirstPostEvent]] = {}
    for _, ev in typed:
        events_by_comm.setdefault(ev.community, []).append(ev)
    matched = _matched_pairs(events_by_comm, read_csv(out / "pairs.csv"))

    # ERR table
    err_rows, errs = [], {}
    for name in sorted(info):
        for kind in ("comment", "submission"):
            mp = matched.get((name, kind))
            if mp is None or not mp.pairs:
                errs[(name, kind)] = math.nan
                err_rows.append((name, info[name]["type"], kind, math.nan, "", "", 0, 0, False))
                continue
            r = err(mp)
            errs[(name, kind)] = r.err if r.defined else math.nan
            err_rows.append(
                (name, info[name]["type"], kind, r.err, r.p_treated, r.p_control, r.n_treated, r.n_control, r.defined)
            )
    write_csv(
        out / "err.csv",
        ["community", "type", "kind", "err", "p_treated", "p_control", "n_treated", "n_control", "defined"],
        err_rows,
    )

    # paired tests: hateful ERR minus its matched control's ERR
    tests = {}
    for kind in ("comment", "submission"):
        diffs, used = [], []
        for name in sorted(info):
            if info[name]["type"] != "hateful":
                continue
            ctrl = info[name]["matched_to"]
            a, b = errs.get((name, kind), math.nan), errs.get((ctrl, kind), math.nan)
            if math.isfinite(a) and math.isfinite(b):
                diffs.append(a - b)
                used.append([name, ctrl])
        res = wilcoxon_signed_rank(diffs) if diffs else None
        tests[kind] = {
            "pairs": used,
            "n": len(diffs),
            "T": res.statistic if res else None,
            "p_value": res.p_value if res else None,
            "method": res.method if res else "no pairs",
            "p_exact": res.p_exact if res else None,
            "p_normal": res.p_normal if res else None,
            "mean_err_hateful": _mean([errs[(n, kind)] for n, _ in used]),
            "mean_err_nonhateful": _mean([errs[(c, kind)] for _, c in used]),
        }
    write_json(out / "paired_tests.json", tests)

    # correlations of ERR with mean first-reply attributes of matched treated users
    corr_rows = []
    for kind in ("comment", "submission"):
        xs = {a: [] for a in ATTRIBUTE_NAMES}
        ys = []
        for name in sorted(info):
            mp = matched.get((name, kind))
            e = errs.get((name, kind), math.nan)
            if mp is None or not mp.pairs or not math.isfinite(e):
                continue
            feats = np.array(
                [[p.treated.first_reply.sentiment, p.treated.first_reply.toxicity, p.treated.first_reply.attack]
                 for p in mp.pairs if p.treated.first_reply is not None]
            )
            if len(feats) == 0:
                continue
            ys.append(e)
            for k, a in enumerate(ATTRIBUTE_NAMES):
                xs[a].append(float(feats[:, k].mean()))
        for a in ATTRIBUTE_NAMES:
            try:
                r = spearman(xs[a], ys)
                corr_rows.append((kind, a, r.statistic, r.p_value, r.n, ""))
            except (ValueError, UndefinedStatistic) as exc:
                corr_rows.append((kind, a, math.nan, math.nan, len(ys), str(exc)))
    write_csv(out / "correlations.csv", ["kind", "attribute", "rho", "p_value", "n", "note"], corr_rows)

    # engagement models, continuous and threshold mode, plus VIFs
    by_cell: dict[tuple[str, str], list[FirstPostEvent]] = {}
    for ctype, ev in typed:
        by_cell.setdefault((ev.kind, ctype), []).append(ev)
    cells = sorted(by_cell)

    def fit(cell):
        kind, ctype = cell
        evs = by_cell[cell]
        model = fit_mixed_logistic(evs, kind, ctype)
        # the threshold refit is a sensitivity check: rare indicators can separate
        # the outcome, which is reported rather than fatal
        try:
            refit = fit_mixed_logistic(evs, kind, ctype, threshold=cfg["threshold"]).to_dict()
        except ModelFitError as exc:
            refit = {"kind": kind, "community_type": ctype, "error": str(exc),
                     "feature_mode": f"threshold>={cfg['threshold']:g}"}
        return model, refit

    fits = map_ordered(fit, cells, cfg["workers"])
    models, thresholded, vif_rows = [], [], []
    for cell, (m, mt) in zip(cells, fits):
        d = m.to_dict()
        d["dominance_applies"] = dominance_applies(m)
        models.append(d)
        thresholded.append(mt)
        X, _, _, _ = design_matrix(by_cell[cell])
        for col, v in zip(COLUMNS[1:], vif(X)):
            vif_rows.append((cell[0], cell[1], col, v))
    write_json(out / "models.json", models)
    write_json(out / "models_threshold.json", thresholded)
    write_csv(out / "vif.csv", ["kind", "type", "column", "vif"], vif_rows)
    outputs = ["err.csv", "paired_tests.json", "correlations.csv", "models.json", "models_threshold.json", "vif.csv"]
    man.record("stats", cfg, {}, outputs)
    return outputs


def _mean(values) -> Optional[float]:
    vals = [v for v in values if math.isfinite(v)]
    return float(np.mean(vals)) if vals else None


def stage_simulate(cfg: Config, man: Manifest) -> list[str]:
    out = cfg.out
    typed = _read_events(out / "events.jsonl")
    models_raw = json.loads((out / "models.json").read_text("utf-8"))
    models: dict[str, dict[str, EngagementModel]] = {}
    for d in models_raw:
        models.setdefault(d["community_type"], {})[d["kind"]] = EngagementModel.from_dict(d)
    by_comm: dict[str, tuple[str, list[FirstPostEvent]]] = {}
    for ctype, ev in typed:
        by_comm.setdefault(ev.community, (ctype, []))[1].append(ev)
    seeds = list(range(cfg["simulation_seed"], cfg["simulation_seed"] + cfg["replications"]))
    names = sorted(by_comm)

    def run(name):
        ctype, evs = by_comm[name]
        if ctype not in models:
            raise SimulationError(f"no fitted models for community type {ctype!r}")
        # a kind without a fitted model (no events of that kind) cannot occur here
        return simulate_community(models[ctype], evs, seeds, name, ctype, keep_curves=True)

    summaries = map_ordered(run, names, cfg["workers"])
    keep = cfg["curve_replications"]
    curves = [c for s in summaries for pair in s.curves[:keep] for c in pair]
    write_growth_curves(curves, out / "growth_curves.csv")
    write_summary(summaries, out / "growth_summary.csv")
    write_json(
        out / "simulation.json",
        {
            "seeds": [seeds[0], seeds[-1]],
            "replications": len(seeds),
            "curves_written_per_community": min(keep, len(seeds)),
            "dominance_applies": {
                f"{ctype}/{kind}": dominance_applies(m)
                for ctype, ms in sorted(models.items()) for kind, m in sorted(ms.items())
            },
            "mean_percent_increase": {s.community: _nan_none(s.mean_increase) for s in summaries},
        },
    )
    outputs = ["growth_curves.csv", "growth_summary.csv", "simulation.json"]
    man.record("simulate", cfg, {}, outputs, seed=cfg["simulation_seed"])
    return outputs


def stage_report(cfg: Config, man: Manifest) -> list[str]:
    out = cfg.out
    rep = out / "report"
    rep.mkdir(exist_ok=True)
    outputs = []

    def copy(name, target=None):
        target = target or name
        shutil.copyfile(out / name, rep / target)
        outputs.append(f"report/{target}")

    copy("err.csv", "err_table.csv")
    copy("paired_tests.json")
    copy("correlations.csv")
    copy("growth_curves.csv")
    copy("growth_summary.csv")

    info = json.loads((out / "cohort.json").read_text("utf-8"))["communities"]
    err_rows = read_csv(out / "err.csv")
    means = {}
    for ctype in ("hateful", "nonhateful"):
        for kind in ("comment", "submission"):
            vals = [float(r["err"]) for r in err_rows
                    if r["type"] == ctype and r["kind"] == kind and r["defined"] == "true"]
            means[f"{ctype}/{kind}"] = _mean(vals)

    models = json.loads((out / "models.json").read_text("utf-8"))
    thresholded = json.loads((out / "models_threshold.json").read_text("utf-8"))
    vif_rows = read_csv(out / "vif.csv")
    for m, mt in zip(models, thresholded):
        if "error" in mt:
            m["threshold_refit"] = {"error": mt["error"], "feature_mode": mt["feature_mode"]}
            m["threshold_signs_agree"] = None
        else:
            m["threshold_refit"] = {"beta": mt["beta"], "se": mt["se"], "sigma2": mt["sigma2"],
                                    "feature_mode": mt["feature_mode"]}
            m["threshold_signs_agree"] = bool(np.all(np.sign(m["beta"]) == np.sign(mt["beta"])))
        m["vif"] = {r["column"]: float(r["vif"]) for r in vif_rows
                    if r["kind"] == m["kind"] and r["type"] == m["community_type"]}
        if not m["dominance_applies"]:
            m["notes"].append(
                "coefficient signs do not guarantee the nicer scenario raises every probability"
            )
    write_json(rep / "model_report.json", {"models": models, "mean_err": means})
    outputs.append("report/model_report.json")

    # growth: mean percent increase by community type
    summary = read_csv(out / "growth_summary.csv")
    by_type: dict[str, list[float]] = {}
    for r in summary:
        v = float(r["percent_increase"])
        if math.isfinite(v):
            by_type.setdefault(r["type"], []).append(v)

    # substitution sensitivity over each analyzed community's first replies
    orig = read_csv(out / "reply_scores.csv")
    swapped = {r["post_id"]: r for r in read_csv(out / "substituted_scores.csv")}
    sub_rows = []
    grouped: dict[str, list[dict]] = {}
    for r in orig:
        if r["community"] in info:
            grouped.setdefault(r["community"], []).append(r)
    for name in sorted(grouped):
        rs = grouped[name]
        before = np.array([[float(r[a]) for a in ATTRIBUTE_NAMES] for r in rs])
        after = np.array([[float(swapped.get(r["post_id"], r)[a]) for a in ATTRIBUTE_NAMES] for r in rs])
        n_hate = sum(1 for r in rs if r["post_id"] in swapped)
        sub_rows.append(
            SubstitutionRow(name, info[name]["type"], len(rs), n_hate,
                            tuple(before.mean(axis=0).tolist()), tuple(after.mean(axis=0).tolist()))
        )
    write_csv(
        rep / "substitution_sensitivity.csv",
        ["community", "type", "n_replies", "n_with_hate"]
        + [f"{a}_{w}" for w in ("original", "substituted", "shift") for a in ATTRIBUTE_NAMES],
        [(r.community, r.type, r.n_replies, r.n_with_hate, *r.original, *r.substituted, *r.shift)
         for r in sub_rows],
    )
    outputs.append("report/substitution_sensitivity.csv")
    sub_summary = substitution_summary(sub_rows)

    detection = json.loads((out / "detection.json").read_text("utf-8"))
    tests = json.loads((out / "paired_tests.json").read_text("utf-8"))
    write_json(
        rep / "summary.json",
        {
            "hateful_communities": detection["hateful"],
            "fleiss_kappa": detection["fleiss_kappa"],
            "mean_err": means,
            "paired_tests": {k: {"T": v["T"], "p_value": v["p_value"], "method": v["method"], "n": v["n"]}
                             for k, v in tests.items()},
            "mean_percent_increase": {t: _mean(v) for t, v in sorted(by_type.items())},
            "substitution": sub_summary,
        },
    )
    outputs.append("report/summary.json")
    man.record("report", cfg, {}, outputs)
    return outputs


def stage_synth(cfg: Config) -> list[str]:
    params = synth_mod.SynthParams.standard(
        n_hateful=cfg["synth_hateful"], n_nonhateful=cfg["synth_nonhateful"],
        users=cfg["synth_users"], seed=cfg["synth_seed"], hate_rate=cfg["synth_hate_rate"],
    )
    corpus = synth_mod.generate_corpus(params)
    paths = synth_mod.write_companions(corpus, cfg["synth_dir"])
    root = Path(cfg["synth_dir"])
    files = sorted(p.name for p in paths.values())
    write_json(root / MANIFEST, {"stage": "synth", "seed": cfg["synth_seed"],
                                 "outputs": {f: sha256_file(root / f) for f in files}})
    return files


STAGE_FUNCS: dict[str, Callable[[Config, Manifest], list[str]]] = {
    "ingest": stage_ingest,
    "detect": stage_detect,
    "score": stage_score,
    "cohort": stage_cohort,
    "stats": stage_stats,
    "simulate": stage_simulate,
    "report": stage_report,
}


def run_stage(stage: str, cfg: Config) -> list[str]:
    if stage == "synth":
        return stage_synth(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    names = STAGES if stage == "all" else (stage,)
    written = []
    for name in names:
        man = Manifest(cfg.out)
        man.check_predecessors(name, cfg)
        logger.info("stage %s", name)
        written.extend(STAGE_FUNCS[name](cfg, man))
    return written


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

EXIT_FOR = (
    (ConfigError, EXIT_CONFIG),
    (ModelFitError, EXIT_MODEL),
    (
        (MissingArtifactError, StaleArtifactError, IngestionError, DataIntegrityError, AnnotationError,
         LexiconError, SageError, MatchingError, ScorerError, SimulationError, synth_mod.SynthError,
         OSError, json.JSONDecodeError),
        EXIT_DATA,
    ),
)


def _keys_epilog() -> str:
    lines = ["configuration keys (TOML file or --flag; flags win):"]
    for k in KEYS:
        default = "" if k.default is None else f" [default: {k.default}]"
        choices = f" {{{','.join(k.choices)}}}" if k.choices else ""
        lines.append(f"  {k.name:<20} {k.type}{choices}  {k.help}{default}")
    lines.append("")
    lines.append("exit codes: 0 ok, 2 config error, 3 data error, 4 convergence/identifiability error")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    group = common.add_argument_group("configuration keys")
    for k in KEYS:
        flag = "--" + k.name.replace("_", "-")
        kwargs: dict[str, Any] = {"dest": k.name, "default": None, "help": k.help}
        if k.type == "paths":
            kwargs["nargs"] = "+"
        elif k.type == "int":
            kwargs["type"] = int
        elif k.type == "float":
            kwargs["type"] = float
        if k.choices:
            kwargs["choices"] = k.choices
        if k.default is not None:
            kwargs["help"] += f" (default: {k.default})"
        group.add_argument(flag, **kwargs)
    parser = argparse.ArgumentParser(
        prog="firstreply",
        description="Newcomer first-reply analysis pipeline.",
        epilog=_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "ingest": "parse archives, drop bot accounts",
        "detect": "SAGE word lists and annotation-based hateful classification",
        "score": "score first replies (and their hate-word-substituted versions)",
        "cohort": "community matching, simulated bans, user matching",
        "stats": "ERRs, paired tests, correlations, engagement models, VIFs",
        "simulate": "counterfactual growth simulation",
        "report": "assemble report tables",
        "synth": "generate a synthetic archive with companion files and a config",
        "all": "run ingest through report",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text,
                       epilog=_keys_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {k.name: getattr(args, k.name) for k in KEYS}
    try:
        cfg = load_config(args.config, overrides)
        written = run_stage(args.command, cfg)
    except Exception as exc:
        for types, code in EXIT_FOR:
            if isinstance(exc, types):
                print(f"firstreply {args.command}: error: {exc}", file=sys.stderr)
                return code
        raise
    for rel in written:
        print(rel)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
