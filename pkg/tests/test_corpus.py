import gzip
import json
import random

import pytest
from hypothesis import given, strategies as st

from conftest import make_post
from firstreply.corpus import (
    DataIntegrityError,
    IngestionError,
    build_thread_index,
    engagement_outcome,
    extract_first_posts,
    filter_bots,
    load_name_list,
    parse_archive,
    read_archive,
    recompute_engagement,
    write_archive,
)


def rec(pid, author="a", t=100, parent=None, link=None, body="x", sub="c", **extra):
    r = {"id": pid, "author": author, "subreddit": sub, "created_utc": t, "body": body, **extra}
    if parent is not None:
        r["parent_id"] = parent
    if link is not None:
        r["link_id"] = link
    return json.dumps(r)


# ---------------------------------------------------------------- parsing

def test_submission_without_parent_roots_itself():
    posts = parse_archive([rec("s1")]).posts
    assert len(posts) == 1
    assert posts[0].parent_id is None and posts[0].link_id == "s1"


def test_empty_stream():
    parsed = parse_archive([])
    assert parsed.posts == [] and parsed.malformed == 0


def test_truncated_line_counted():
    lines = [rec("s1"), rec("c1", parent="t3_s1", link="t3_s1"), rec("c2", parent="c1", link="s1"),
             rec("c3")[:-7]]
    parsed = parse_archive(lines)
    assert [p.id for p in parsed.posts] == ["s1", "c1", "c2"]
    assert parsed.malformed == 1


def test_fullname_prefixes_stripped_and_fields_mapped():
    p = parse_archive([rec("t1_c1", author="bob", t=5, parent="t1_c0", link="t3_s0",
                           author_created_utc=2)]).posts[0]
    assert (p.id, p.parent_id, p.link_id, p.community, p.created_at, p.author_created_at) == (
        "c1", "c0", "s0", "c", 5, 2)


def test_mostly_malformed_is_fatal():
    with pytest.raises(IngestionError):
        parse_archive([rec("s1"), "{", "not json"])


def test_stream_failure_is_fatal():
    def broken():
        yield rec("s1")
        raise OSError("disk gone")

    with pytest.raises(IngestionError):
        parse_archive(broken())


def test_roundtrip_plain_and_gzip(tmp_path):
    posts = [make_post("s1", "a", 10), make_post("c1", "b", 11, parent="s1", link="s1", body="hi")]
    plain = tmp_path / "a.jsonl"
    write_archive(posts, plain)
    assert read_archive(plain).posts == posts
    gz = tmp_path / "a.jsonl.gz"
    with gzip.open(gz, "wb") as fh:
        fh.write(plain.read_bytes())
    assert read_archive(gz).posts == posts


def test_name_list_skips_comments(tmp_path):
    f = tmp_path / "bots.txt"
    f.write_text("# header\nbot\n\n  automoderator \n")
    assert load_name_list(f) == ["bot", "automoderator"]


# ---------------------------------------------------------------- threads

def test_levels_by_definition():
    posts = [make_post("S", "a", 1), make_post("A", "b", 2, parent="S", link="S"),
             make_post("B", "c", 3, parent="A", link="S")]
    idx = build_thread_index(posts)
    assert idx.level == {"S": 0, "A": 1, "B": 2}
    assert idx.children["S"] == ["A"] and idx.children["A"] == ["B"]


def test_lone_submission():
    idx = build_thread_index([make_post("S", "a", 1)])
    assert idx.level == {"S": 0} and idx.children["S"] == []


def test_orphan_comment_gets_level_one():
    posts = [make_post("S", "a", 1), make_post("X", "b", 2, parent="gone", link="S"),
             make_post("Y", "c", 3, parent="X", link="S")]
    idx = build_thread_index(posts)
    assert idx.orphans == {"X"}
    assert idx.level["X"] == 1 and idx.level["Y"] == 2


def test_cycle_is_fatal():
    posts = [make_post("A", "a", 1, parent="B", link="S"), make_post("B", "b", 2, parent="A", link="S")]
    with pytest.raises(DataIntegrityError, match="cycle"):
        build_thread_index(posts)


@st.composite
def forests(draw):
    n = draw(st.integers(1, 30))
    posts = []
    for i in range(n):
        pid = f"p{i:02d}"
        t = draw(st.integers(1, 50))
        if i == 0 or draw(st.booleans()):
            posts.append(make_post(pid, f"u{i % 5}", t))
        else:
            parent = posts[draw(st.integers(0, i - 1))]
            posts.append(make_post(pid, f"u{i % 5}", t, parent=parent.id, link=parent.link_id))
    return posts


@given(forests(), st.randoms())
def test_thread_index_order_independent(posts, rnd):
    ref = build_thread_index(posts)
    shuffled = posts[:]
    rnd.shuffle(shuffled)
    other = build_thread_index(shuffled)
    assert other.level == ref.level
    assert {k: sorted(v) for k, v in other.children.items()} == {k: sorted(v) for k, v in ref.children.items()}


@given(forests())
def test_thread_index_consistency(posts):
    idx = build_thread_index(posts)
    by_id = {p.id: p for p in posts}
    for p in posts:
        if p.parent_id is None:
            assert idx.level[p.id] == 0
        else:
            assert idx.level[p.id] == idx.level[p.parent_id] + 1
    for parent, kids in idx.children.items():
        for k in kids:
            assert by_id[k].parent_id == parent
    for p in posts:
        if p.parent_id is not None:
            assert p.id in idx.children[p.parent_id]


# ---------------------------------------------------------------- bots

def test_bot_filter_substring_and_blocklist():
    posts = [make_post("1", "NewsBot", 1), make_post("2", "abbott", 2), make_post("3", "alice", 3),
             make_post("4", "Spammer", 4)]
    kept = filter_bots(posts, ["bot"], {"spammer"})
    assert [p.author for p in kept] == ["alice"]


def test_bot_filter_identity():
    posts = [make_post("1", "NewsBot", 1)]
    assert filter_bots(posts, [], set()) == posts


# ---------------------------------------------------------------- events

def events_for(posts, cutoff=10**9, scores=None):
    return extract_first_posts(posts, build_thread_index(posts), "c", cutoff, scores)


def test_self_reply_is_not_treatment():
    posts = [make_post("S", "x", 1), make_post("A", "u", 10, parent="S", link="S"),
             make_post("B", "u", 20, parent="A", link="S")]
    ev = {e.user: e for e in events_for(posts)}["u"]
    assert not ev.treated and ev.first_reply is None and not ev.engaged


def test_reply_then_other_thread():
    posts = [make_post("S", "x", 1), make_post("T", "x", 2),
             make_post("A", "u", 10, parent="S", link="S"),
             make_post("R", "v", 15, parent="A", link="S"),
             make_post("B", "u", 30, parent="T", link="T")]
    ev = {e.user: e for e in events_for(posts, cutoff=30, scores={"R": (0.1, 0.2, 0.3)})}["u"]
    assert ev.treated and ev.engaged
    assert (ev.first_reply.sentiment, ev.first_reply.toxicity, ev.first_reply.attack) == (0.1, 0.2, 0.3)


def five_user_fixture():
    return [
        make_post("S1", "a", 10, acct=0),
        make_post("S2", "b", 12, acct=2),
        make_post("c1", "c", 14, parent="S1", link="S1", body="one two three"),
        make_post("c2", "a", 15, parent="c1", link="S1"),
        make_post("c3", "b", 16, parent="c1", link="S1"),
        make_post("c4", "d", 17, parent="S2", link="S2", body=""),
        make_post("c5", "d", 18, parent="c4", link="S2"),
        make_post("c6", "c", 20, parent="S2", link="S2"),
        make_post("S3", "e", 22),
        make_post("c7", "b", 23, parent="S3", link="S3"),
        make_post("S4", "a", 30),
    ]


def test_five_user_fixture_matches_hand_enumeration():
    evs = {e.user: e for e in events_for(five_user_fixture(), cutoff=25)}
    # user: (kind, post, treated, reply id, engaged, nest, words)
    truth = {
        "a": ("submission", "S1", True, "c1", False, 0, 2),
        "b": ("submission", "S2", True, "c4", True, 0, 2),
        "c": ("comment", "c1", True, "c2", True, 1, 3),
        "d": ("comment", "c4", False, None, False, 1, 0),
        "e": ("submission", "S3", True, "c7", False, 0, 2),
    }
    assert set(evs) == set(truth)
    for user, (kind, pid, treated, rid, engaged, nest, words) in truth.items():
        e = evs[user]
        assert (e.kind, e.post_id, e.treated, e.reply_id, e.engaged, e.nest_level, e.word_count) == (
            kind, pid, treated, rid, engaged, nest, words), user
    # c2 (by a) comes before c3 (by b): earliest reply wins
    assert evs["c"].reply_id == "c2"
    # first reply without a score: zero features, flagged
    assert evs["a"].first_reply is not None and not evs["a"].reply_scored
    assert evs["a"].account_age == 10.0 and evs["b"].account_age == 10.0


def test_tie_broken_by_post_id():
    posts = [make_post("S2", "u", 5), make_post("S1", "u", 5)]
    assert events_for(posts)[0].post_id == "S1"


def test_missing_account_age_marked():
    p = make_post("S", "u", 5)._replace(author_created_at=None)
    ev = events_for([p])[0]
    assert ev.account_age is None and not ev.complete


def test_engagement_truth_table():
    base = [make_post("R1", "z", 1), make_post("R2", "z", 2), make_post("R3", "z", 3)]
    cutoff = 100
    cases = {
        "same_thread_only": ([("R1", 10), ("R1", 20)], False),
        "other_thread": ([("R1", 10), ("R2", 20)], True),
        "other_thread_after_cutoff": ([("R1", 10), ("R2", 150)], False),
        "at_cutoff": ([("R1", 10), ("R2", 100)], True),
        "single_post": ([("R1", 10)], False),
        "same_then_other": ([("R1", 10), ("R1", 11), ("R3", 50)], True),
        "other_community": ([("R1", 10), ("X", 20)], False),
        "same_time_other_thread": ([("R1", 10), ("R2", 10)], False),
        "own_submission": ([("R1", 10), (None, 30)], True),
        "late_then_early": ([("R1", 10), ("R2", 101), ("R1", 40)], False),
    }
    posts = list(base)
    for user, (seq, _) in cases.items():
        for k, (root, t) in enumerate(seq):
            pid = f"{user}-{k}"
            if root is None:
                posts.append(make_post(pid, user, t))
            elif root == "X":
                posts.append(make_post(pid, user, t, parent="Q", link="Q", community="other"))
            else:
                posts.append(make_post(pid, user, t, parent=root, link=root))
    evs = {e.user: e for e in events_for(posts, cutoff)}
    for user, (_, expected) in cases.items():
        first = next(p for p in posts if p.id == f"{user}-0")
        assert engagement_outcome(user, first, posts, cutoff) is expected, user
        assert evs[user].engaged is expected, user


@st.composite
def activity(draw):
    n_users = draw(st.integers(1, 8))
    roots = [make_post(f"R{i}", "host", i + 1) for i in range(3)]
    posts = list(roots)
    for u in range(n_users):
        for k in range(draw(st.integers(1, 4))):
            root = draw(st.sampled_from(roots))
            t = draw(st.integers(5, 60))
            parent = draw(st.sampled_from([p for p in posts if p.link_id == root.id]))
            posts.append(make_post(f"u{u}-{k}", f"u{u}", t, parent=parent.id, link=root.id))
    return posts


@given(activity(), st.integers(5, 60), st.integers(0, 30))
def test_event_properties(posts, cutoff, drop):
    evs = events_for(posts, cutoff)
    users = {p.author for p in posts if p.created_at <= cutoff}
    assert len(evs) == len(users)
    assert len({e.user for e in evs}) == len(evs)
    for e in evs:
        assert e.treated == (e.first_reply is not None)
    # lowering the cutoff never turns a non-engaged user into an engaged one
    lower = recompute_engagement(evs, posts, cutoff - drop)
    for before, after in zip(evs, lower):
        assert not (after.engaged and not before.engaged)


def test_recompute_matches_fresh_extraction():
    posts = five_user_fixture()
    evs = events_for(posts, cutoff=10**9)
    again = recompute_engagement(evs, posts, 25)
    fresh = {e.user: e.engaged for e in events_for(posts, cutoff=25)}
    assert {e.user: e.engaged for e in again} == fresh


def test_shuffled_input_same_events():
    posts = five_user_fixture()
    shuffled = posts[:]
    random.Random(3).shuffle(shuffled)
    assert events_for(shuffled, 25) == events_for(posts, 25)
