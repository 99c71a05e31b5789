import csv
import json
import math

import numpy as np
import pytest

from firstreply.corpus import read_archive, write_archive
from firstreply.lexicon import AnnotationSheet, HateLexicon, aggregate_annotations, contains_hate_word
from firstreply.pipeline import analyze, build_communities
from firstreply.scoring import StubScorer
from firstreply.synth import (
    BENIGN,
    FAKE_HATE_WORDS,
    HOSTILE,
    POLARIZED,
    CommunitySpec,
    SynthError,
    SynthParams,
    generate_corpus,
    generate_events,
    synth_hate_lexicon,
    synth_stub_lexicons,
    write_companions,
)


def small(seed=0, users=300, **kw):
    return SynthParams.standard(2, 2, users, seed=seed, **kw)


def test_same_seed_byte_identical(tmp_path):
    write_archive(generate_corpus(small(4)).posts, tmp_path / "a.jsonl")
    write_archive(generate_corpus(small(4)).posts, tmp_path / "b.jsonl")
    write_archive(generate_corpus(small(5)).posts, tmp_path / "c.jsonl")
    a, b, c = ((tmp_path / n).read_bytes() for n in ("a.jsonl", "b.jsonl", "c.jsonl"))
    assert a == b and a != c


def test_community_order_does_not_matter():
    p = small(2)
    q = small(2)
    q.communities = list(reversed(q.communities))
    by = lambda posts: sorted((x.community, x.author, x.created_at, x.body) for x in posts)
    assert by(generate_corpus(p).posts) == by(generate_corpus(q).posts)


@pytest.mark.parametrize("law", [HOSTILE, BENIGN, POLARIZED])
def test_feature_law_moments(law):
    x = law.sample(np.random.default_rng(0), 20_000)
    for k, name in enumerate(("sentiment", "toxicity", "attack")):
        mean, sd = law.moments()[name]
        assert abs(x[:, k].mean() - mean) <= 3 * sd / math.sqrt(len(x))
        assert abs(x[:, k].std() - sd) <= 3 * sd / math.sqrt(2 * len(x)) * 1.5


def test_ledger_fidelity_of_planted_features():
    params = SynthParams.standard(5, 0, 4000, seed=1)
    corpus = generate_corpus(params)
    planted = np.array([u["planted"] for c in corpus.truth["communities"].values()
                        for u in c["newcomers"] if u["treated"]])
    assert len(planted) >= 10_000
    for k, name in enumerate(("sentiment", "toxicity", "attack")):
        mean, sd = HOSTILE.moments()[name]
        assert abs(planted[:, k].mean() - mean) <= 3 * sd / math.sqrt(len(planted))


def test_comment_share_and_hate_rate():
    corpus = generate_corpus(SynthParams.standard(2, 2, 3000, seed=3))
    users = [u for c in corpus.truth["communities"].values() for u in c["newcomers"]]
    share = np.mean([u["kind"] == "comment" for u in users])
    assert abs(share - 0.78) <= 3 * math.sqrt(0.78 * 0.22 / len(users))
    lex = synth_hate_lexicon()
    types = corpus.community_types()
    rate = {t: np.mean([contains_hate_word(p.body, lex) for p in corpus.posts if types[p.community] == t])
            for t in ("hateful", "nonhateful")}
    assert rate["nonhateful"] == 0.0
    assert 0.06 <= rate["hateful"] <= 0.10


def test_no_replies_means_undefined_err():
    params = small(1, reply_prob={"comment": 0.0, "submission": 0.0}, bot_rate=0.0, self_reply_rate=0.0)
    corpus = generate_corpus(params)
    for truth in corpus.truth["communities"].values():
        assert truth["true_err"] == {"comment": None, "submission": None}
        assert not any(u["treated"] for u in truth["newcomers"])
    comms = build_communities(corpus.posts, ["bot", "automoderator"])
    types = corpus.community_types()
    hate = sorted(n for n, t in types.items() if t == "hateful")
    cands = sorted(n for n, t in types.items() if t == "nonhateful")
    bans = {c.name: c.ban_date for c in params.communities if c.ban_date}
    res = analyze(comms, hate, cands, bans, scorer=StubScorer(synth_stub_lexicons()))
    for ca in res.communities.values():
        # veterans open the threads newcomers comment in, so only newcomers are reply-free
        newcomers = [e for e in ca.events if "-n" in e.user]
        assert newcomers and not any(e.treated for e in newcomers)
        assert not ca.errs["comment"].defined


def test_null_effect_err_near_one():
    zero = {(k, t): (0.0,) * 5 for k in ("comment", "submission") for t in ("hateful", "nonhateful")}
    s0 = {key: 0.0 for key in zero}
    params = SynthParams.standard(2, 2, 4000, seed=0, beta=zero, sigma2=s0)
    corpus = generate_corpus(params)
    comms = build_communities(corpus.posts, ["bot", "automoderator"])
    types = corpus.community_types()
    hate = sorted(n for n, t in types.items() if t == "hateful")
    cands = sorted(n for n, t in types.items() if t == "nonhateful")
    bans = {c.name: c.ban_date for c in params.communities if c.ban_date}
    res = analyze(comms, hate, cands, bans, scorer=StubScorer(synth_stub_lexicons()))
    for ca in res.communities.values():
        users = corpus.truth["communities"][ca.community]["newcomers"]
        assert np.mean([u["p_engaged"] for u in users]) == pytest.approx(0.5)
        r = ca.errs["comment"]
        assert 0.9 <= r.err <= 1.1, (ca.community, r.err)


def test_invalid_params():
    with pytest.raises(SynthError):
        generate_corpus(SynthParams([CommunitySpec("x", "hateful", 0)]))
    with pytest.raises(SynthError):
        generate_corpus(SynthParams([CommunitySpec("x", "weird", 10)]))
    with pytest.raises(SynthError):
        generate_corpus(SynthParams([CommunitySpec("x", "hateful", 10)], hate_rate=1.5))
    with pytest.raises(SynthError):
        generate_corpus(SynthParams([]))
    with pytest.raises(SynthError):
        generate_events((0,) * 5, -1.0, 2, 2)


def test_generate_events_shapes():
    evs, u = generate_events((0.1, 0.2, 0.3, -0.1, -0.2), 0.2, 4, 50, seed=2)
    assert len(evs) == 200 and len(u) == 4
    assert {e.community for e in evs} == {f"g{i:03d}" for i in range(4)}
    assert all((e.first_reply is None) == (not e.treated) for e in evs)


def test_companions(tmp_path):
    corpus = generate_corpus(small(0))
    paths = write_companions(corpus, tmp_path)
    assert len(read_archive(paths["archive"]).posts) == len(corpus.posts)
    truth = json.loads(paths["truth"].read_text())
    assert truth["hate_words"] == sorted(FAKE_HATE_WORDS)
    sheet = AnnotationSheet.from_csv(paths["annotations"])
    hate, kappa = aggregate_annotations(sheet)
    assert hate == set(FAKE_HATE_WORDS)
    assert 0.3 <= kappa <= 0.8
    assert HateLexicon.from_tsv(paths["hate_lexicon"]).replacements == synth_hate_lexicon().replacements
    with open(paths["bans"]) as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    assert rows[0] == ["community", "ban_date"] and len(rows) == 3
    assert "detect_min_users = 0" in paths["config"].read_text()
