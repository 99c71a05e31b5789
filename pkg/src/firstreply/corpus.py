"""Post archives, thread reconstruction and newcomer first-post events.

Archives are newline-delimited JSON records in the Pushshift layout
(``subreddit``, ``created_utc``, ``parent_id``, ``link_id`` ...). Reddit
fullname prefixes (``t1_``, ``t3_``) are stripped so ids, parents and thread
roots share one namespace.
"""

from __future__ import annotations

import functools
import gc
import gzip
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from operator import attrgetter
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Optional, Sequence

logger = logging.getLogger(__name__)

DELETED_AUTHORS = frozenset({"", "[deleted]", "[removed]"})
DELETED_BODIES = frozenset({"", "[deleted]", "[removed]"})
MAX_MALFORMED_FRACTION = 0.5

# canonical post order: time, then id
time_order = attrgetter("created_at", "id")


def gc_paused(fn):
    """Run ``fn`` with the cyclic collector off.

    Bulk builders allocate hundreds of thousands of acyclic records; repeated
    generation-2 sweeps over them cost a quarter of the runtime for nothing.
    """

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        was_enabled = gc.isenabled()
        gc.disable()
        try:
            return fn(*args, **kwargs)
        finally:
            if was_enabled:
                gc.enable()

    return wrapper


class IngestionError(RuntimeError):
    """The archive could not be read, or does not look like the expected schema."""


class DataIntegrityError(RuntimeError):
    """The corpus is internally inconsistent (e.g. a parent cycle)."""


class Post(NamedTuple):
    id: str
    author: str
    community: str
    created_at: int
    parent_id: Optional[str]
    link_id: str
    body: str
    author_created_at: Optional[int] = None

    @property
    def is_submission(self) -> bool:
        return self.parent_id is None

    @property
    def is_deleted(self) -> bool:
        return self.body.strip() in DELETED_BODIES

    def to_record(self) -> dict:
        record = {
            "id": self.id,
            "author": self.author,
            "subreddit": self.community,
            "created_utc": self.created_at,
            "link_id": self.link_id,
            "body": self.body,
        }
        if self.parent_id is not None:
            record["parent_id"] = self.parent_id
        if self.author_created_at is not None:
            record["author_created_utc"] = self.author_created_at
        return record


@dataclass
class ParsedArchive:
    posts: list[Post]
    malformed: int = 0
    lines: int = 0


def _strip_fullname(value) -> Optional[str]:
    if value is None:
        return None
    value = str(value)
    if len(value) > 3 and value[0] == "t" and value[1].isdigit() and value[2] == "_":
        return value[3:]
    return value


def _as_time(value) -> Optional[int]:
    if value is None or value == "":
        return None
    return int(float(value))


def post_from_record(record: Mapping) -> Post:
    """Map one archive record to a :class:`Post`; raises ``ValueError`` if unusable."""
    if not isinstance(record, Mapping):
        raise ValueError("record is not an object")
    try:
        post_id = _strip_fullname(record["id"])
        author = record["author"]
        community = record["subreddit"]
        created = _as_time(record["created_utc"])
    except KeyError as exc:
        raise ValueError(f"missing field {exc}") from None
    if not post_id or author is None or not community or created is None or created <= 0:
        raise ValueError("empty required field")
    parent = _strip_fullname(record.get("parent_id"))
    link = _strip_fullname(record.get("link_id"))
    if parent is None:
        link = post_id
    elif link is None:
        raise ValueError("comment without link_id")
    body = record.get("body")
    if body is None:
        title = record.get("title") or ""
        selftext = record.get("selftext") or ""
        body = f"{title}\n{selftext}".strip()
    return Post(
        id=post_id,
        author=str(author),
        community=str(community),
        created_at=created,
        parent_id=parent,
        link_id=link,
        body=str(body),
        author_created_at=_as_time(record.get("author_created_utc")),
    )


@gc_paused
def parse_archive(lines: Iterable[str | bytes]) -> ParsedArchive:
    """Parse newline-delimited records, counting (not raising on) malformed lines.

    Blank lines are skipped. More than half the non-blank lines being malformed
    is treated as a schema mismatch and raises :class:`IngestionError`.
    """
    parsed = ParsedArchive(posts=[])
    try:
        for raw in lines:
            if isinstance(raw, bytes):
                raw = raw.decode("utf-8")
            raw = raw.strip()
            if not raw:
                continue
            parsed.lines += 1
            try:
                parsed.posts.append(post_from_record(json.loads(raw)))
            except (ValueError, TypeError):
                parsed.malformed += 1
    except (OSError, UnicodeDecodeError, EOFError) as exc:
        raise IngestionError(f"failed reading archive stream: {exc}") from exc
    if parsed.lines and parsed.malformed / parsed.lines > MAX_MALFORMED_FRACTION:
        raise IngestionError(
            f"{parsed.malformed} of {parsed.lines} lines are malformed; "
            "the archive probably uses a different schema"
        )
    if parsed.malformed:
        logger.warning("skipped %d malformed lines of %d", parsed.malformed, parsed.lines)
    return parsed


def open_archive(path: str | Path) -> io.TextIOBase:
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def read_archive(path: str | Path) -> ParsedArchive:
    try:
        with open_archive(path) as fh:
            return parse_archive(fh)
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc


def write_archive(posts: Iterable[Post], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for post in posts:
            fh.write(json.dumps(post.to_record(), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def load_name_list(path: str | Path) -> list[str]:
    """Read a one-entry-per-line file, ignoring blanks and ``#`` comments."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                entries.append(line)
    return entries


# --------------------------------------------------------------------------
# Threads
# --------------------------------------------------------------------------


@dataclass
class ThreadIndex:
    level: dict[str, int] = field(default_factory=dict)
    children: dict[str, list[str]] = field(default_factory=dict)
    root: dict[str, str] = field(default_factory=dict)
    orphans: set[str] = field(default_factory=set)


@gc_paused
def build_thread_index(posts: Sequence[Post]) -> ThreadIndex:
    """Assign nest levels by walking parent chains.

    Submissions sit at level 0 and a top-level comment at 1. A comment whose
    parent is absent from the corpus is kept as an orphan at level 1.
    """
    by_id = {p.id: p for p in posts}
    ordered = sorted(posts, key=time_order)
    index = ThreadIndex()
    children = index.children
    for post in ordered:
        children[post.id] = []
        index.root[post.id] = post.id if post.parent_id is None else post.link_id
    # appending in time order leaves every child list sorted by (created_at, id)
    for post in ordered:
        if post.parent_id is not None and post.parent_id in by_id:
            children[post.parent_id].append(post.id)

    level = index.level
    for post in ordered:
        if post.id in level:
            continue
        # fast path: parents normally precede their replies
        if post.parent_id is None:
            level[post.id] = 0
            continue
        parent_level = level.get(post.parent_id)
        if parent_level is not None:
            level[post.id] = parent_level + 1
            continue
        chain = []
        on_chain = set()
        cur = post
        while True:
            if cur.id in level:
                base = level[cur.id]
                break
            if cur.id in on_chain:
                cycle = chain[chain.index(cur.id):] + [cur.id]
                raise DataIntegrityError("parent cycle: " + " -> ".join(cycle))
            chain.append(cur.id)
            on_chain.add(cur.id)
            if cur.parent_id is None:
                base = -1
                break
            parent = by_id.get(cur.parent_id)
            if parent is None:
                index.orphans.add(cur.id)
                base = 0
                break
            cur = parent
        for offset, post_id in enumerate(reversed(chain), start=1):
            level[post_id] = base + offset
    return index


def filter_bots(
    posts: Iterable[Post],
    substring_patterns: Iterable[str] = (),
    blocklist: Iterable[str] = (),
) -> list[Post]:
    """Drop every post whose author matches a pattern (case-insensitive substring)
    or is on the blocklist.

    Substring matching over-matches (``"abbott"`` contains ``"bot"``); the
    blocklist review is what catches the remaining automated accounts.
    """
    patterns = [p.lower() for p in substring_patterns if p]
    blocked = {b.lower() for b in blocklist}
    if not patterns and not blocked:
        return list(posts)
    cache: dict[str, bool] = {}
    kept = []
    for post in posts:
        is_bot = cache.get(post.author)
        if is_bot is None:
            name = post.author.lower()
            is_bot = name in blocked or any(p in name for p in patterns)
            cache[post.author] = is_bot
        if not is_bot:
            kept.append(post)
    return kept


# --------------------------------------------------------------------------
# First-post events
# --------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ReplyFeatures:
    sentiment: float
    toxicity: float
    attack: float


@dataclass(slots=True)
class FirstPostEvent:
    user: str
    community: str
    kind: str  # "comment" | "submission"
    post_id: str
    first_post_time: int
    thread_root: str
    account_age: Optional[float]
    nest_level: int
    valence: float
    word_count: int
    treated: bool
    first_reply: Optional[ReplyFeatures]
    engaged: bool
    reply_scored: bool = True
    reply_id: Optional[str] = None

    @property
    def complete(self) -> bool:
        return self.account_age is not None

    def covariates(self) -> dict[str, float]:
        return {
            "account_age": self.account_age,
            "nest_level": self.nest_level,
            "valence": self.valence,
            "word_count": self.word_count,
        }

    def to_record(self) -> dict:
        rec = {
            "user": self.user,
            "community": self.community,
            "kind": self.kind,
            "post_id": self.post_id,
            "first_post_time": self.first_post_time,
            "thread_root": self.thread_root,
            "account_age": self.account_age,
            "nest_level": self.nest_level,
            "valence": self.valence,
            "word_count": self.word_count,
            "treated": self.treated,
            "engaged": self.engaged,
            "reply_scored": self.reply_scored,
            "reply_id": self.reply_id,
            "first_reply": None,
        }
        if self.first_reply is not None:
            r = self.first_reply
            rec["first_reply"] = [r.sentiment, r.toxicity, r.attack]
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "FirstPostEvent":
        reply = rec.get("first_reply")
        return cls(
            user=rec["user"],
            community=rec["community"],
            kind=rec["kind"],
            post_id=rec["post_id"],
            first_post_time=int(rec["first_post_time"]),
            thread_root=rec["thread_root"],
            account_age=rec["account_age"],
            nest_level=int(rec["nest_level"]),
            valence=float(rec["valence"]),
            word_count=int(rec["word_count"]),
            treated=bool(rec["treated"]),
            first_reply=ReplyFeatures(*reply) if reply is not None else None,
            engaged=bool(rec["engaged"]),
            reply_scored=bool(rec.get("reply_scored", True)),
            reply_id=rec.get("reply_id"),
        )


def word_count(text: str) -> int:
    return len(text.split())


def engagement_outcome(user: str, event_post: Post, posts: Iterable[Post], cutoff: int) -> bool:
    """True iff ``user`` posted again, in a different thread, by ``cutoff``."""
    root = event_post.link_id
    start = event_post.created_at
    for post in posts:
        if (
            post.author == user
            and post.community == event_post.community
            and start < post.created_at <= cutoff
            and post.link_id != root
        ):
            return True
    return False


def _engaged_from_history(history: Sequence[Post], first: Post, cutoff: int) -> bool:
    # history is sorted by (created_at, id)
    for post in history:
        if post.created_at > cutoff:
            return False
        if post.created_at > first.created_at and post.link_id != first.link_id:
            return True
    return False


@gc_paused
def extract_first_posts(
    posts: Sequence[Post],
    index: ThreadIndex,
    community: str,
    cutoff: int,
    scores: Optional[Mapping[str, tuple[float, float, float]]] = None,
    valence: Optional[Callable[[str], float]] = None,
) -> list[FirstPostEvent]:
    """One event per author: their earliest post in ``community`` at or before ``cutoff``.

    ``scores`` maps post id to ``(sentiment, toxicity, attack)``. The first-post
    valence is taken from it when present, else from ``valence(body)``; deleted
    bodies get valence 0. A treated event whose earliest reply has no score
    carries zero reply features and ``reply_scored=False``.
    """
    scores = scores or {}
    by_id = {p.id: p for p in posts}
    history: dict[str, list[Post]] = defaultdict(list)
    # one sort up front (linear when already ordered) keeps every history ordered
    for post in sorted(posts, key=time_order):
        if post.community != community or post.author in DELETED_AUTHORS:
            continue
        if post.created_at <= cutoff:
            history[post.author].append(post)

    events = []
    for user in sorted(history):
        mine = history[user]
        first = mine[0]

        if first.is_deleted:
            val = 0.0
        elif first.id in scores:
            val = float(scores[first.id][0])
        elif valence is not None:
            val = float(valence(first.body))
        else:
            val = 0.0

        reply = None
        for child_id in index.children.get(first.id, ()):
            child = by_id[child_id]
            if child.author != user and child.created_at <= cutoff:
                reply = child
                break
        features = None
        scored = True
        if reply is not None:
            if reply.id in scores:
                features = ReplyFeatures(*map(float, scores[reply.id]))
            else:
                features = ReplyFeatures(0.0, 0.0, 0.0)
                scored = False

        age = None
        if first.author_created_at is not None:
            age = float(max(0, first.created_at - first.author_created_at))

        events.append(
            FirstPostEvent(
                user=user,
                community=community,
                kind="submission" if first.is_submission else "comment",
                post_id=first.id,
                first_post_time=first.created_at,
                thread_root=first.link_id,
                account_age=age,
                nest_level=index.level.get(first.id, 0 if first.is_submission else 1),
                valence=val,
                word_count=0 if first.is_deleted else word_count(first.body),
                treated=reply is not None,
                first_reply=features,
                engaged=_engaged_from_history(mine, first, cutoff),
                reply_scored=scored,
                reply_id=reply.id if reply is not None else None,
            )
        )
    return events


def recompute_engagement(
    events: Iterable[FirstPostEvent], posts: Sequence[Post], cutoff: int
) -> list[FirstPostEvent]:
    """Return copies of ``events`` with ``engaged`` re-evaluated at a new cutoff."""
    history: dict[tuple[str, str], list[Post]] = defaultdict(list)
    for post in posts:
        history[(post.community, post.author)].append(post)
    for mine in history.values():
        mine.sort(key=time_order)
    by_id = {p.id: p for p in posts}
    out = []
    for ev in events:
        first = by_id[ev.post_id]
        engaged = _engaged_from_history(history[(ev.community, ev.user)], first, cutoff)
        out.append(replace(ev, engaged=engaged))
    return out


def group_by_community(posts: Iterable[Post]) -> dict[str, list[Post]]:
    groups: dict[str, list[Post]] = defaultdict(list)
    for post in posts:
        groups[post.community].append(post)
    return dict(sorted(groups.items()))
