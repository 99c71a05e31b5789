"""The nine acceptance criteria, each at its stated tolerance.

Every test records a "C<n> PASS|FAIL ..." line before asserting; conftest
prints the lines in a summary section at the end of the run.
"""

import math
import time

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE, make_event
from firstreply import cli
from firstreply.cohort import USER_FEATURES, feature_matrix, match_users, standardized_mean_differences
from firstreply import lexicon
from firstreply.pipeline import analyze, build_communities, first_post_events, substitution_rows
from firstreply.scoring import ScoreCache, StubScorer
from firstreply.simulate import Scenario, dominance_applies, simulate_community, simulate_growth
from firstreply.stats import EngagementModel, design_matrix, fit_mixed_logistic, laplace_loglik
from firstreply.stats import wilcoxon_signed_rank
from firstreply.stats.mixed import _Groups
from firstreply.synth import (
    BENIGN,
    HOSTILE,
    TABLE_BETA,
    SynthParams,
    generate_corpus,
    generate_events,
    synth_hate_lexicon,
    synth_stub_lexicons,
)

pytestmark = pytest.mark.acceptance

BOTS = ["bot", "automoderator"]
C2_BETA = (0.085, 0.09, 0.11, -0.05, -0.35)
C2_SIGMA2 = 0.16


def record(n, ok, detail):
    ACCEPTANCE.append(f"C{n} {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def run_pipeline(corpus, seed=0, workers=1):
    comms = build_communities(corpus.posts, BOTS)
    types = corpus.community_types()
    hate = sorted(n for n, t in types.items() if t == "hateful")
    cands = sorted(n for n, t in types.items() if t == "nonhateful")
    bans = {c.name: c.ban_date for c in corpus.params.communities if c.ban_date}
    return analyze(comms, hate, cands, bans, scorer=StubScorer(synth_stub_lexicons()),
                   cache=ScoreCache(), seed=seed, workers=workers)


# ---------------------------------------------------------------- C1

def test_c1_planted_err_recovery():
    wins, worst, t_all = 0, 0.0, time.perf_counter()
    for seed in range(100):
        corpus = generate_corpus(SynthParams.standard(10, 10, 2000, seed=seed))
        t0 = time.perf_counter()
        a = run_pipeline(corpus, seed=seed)
        worst = max(worst, time.perf_counter() - t0)
        wins += a.mean_err("hateful", "comment") < a.mean_err("nonhateful", "comment")
    total = time.perf_counter() - t_all
    ok = wins >= 95 and worst < 300
    record(1, ok, f"hateful comment-ERR below non-hateful in {wins}/100 seeds (need 95); "
                  f"slowest pipeline run {worst:.1f}s (limit 300s); 100 seeds incl. generation {total:.0f}s")
    assert ok


# ---------------------------------------------------------------- C2

@pytest.fixture(scope="module")
def c2_fit():
    events, u = generate_events(C2_BETA, C2_SIGMA2, 25, 4000, seed=0)
    return events, fit_mixed_logistic(events, "comment", "hateful")


def test_c2_mixed_model_recovery(c2_fit):
    events, m = c2_fit
    z = np.abs(m.beta - np.array(C2_BETA)) / m.se
    rel = abs(m.sigma2 - C2_SIGMA2) / C2_SIGMA2

    X, y, codes, groups = design_matrix(events)
    g = _Groups(np.asarray(codes), len(groups))

    def f(theta):
        return laplace_loglik(X, y, g, len(groups), theta[:5], math.exp(theta[5]))[0]

    theta = np.append(m.beta, math.log(m.sigma2))
    h = 1e-5
    grad = []
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        grad.append((f(theta + e) - f(theta - e)) / (2 * h))
    gmax = float(np.max(np.abs(grad)))

    one, _ = generate_events(C2_BETA, 0.0, 1, 5000, seed=1)
    m1 = fit_mixed_logistic(one, sigma2=0.0)
    X1, y1, _, _ = design_matrix(one)
    ref, _ = oracles.irls(X1, y1)
    irls_gap = float(np.max(np.abs(m1.beta - ref)))

    ok = bool(np.all(z <= 3)) and rel <= 0.5 and gmax < 1e-3 and irls_gap <= 1e-6
    record(2, ok, f"max |beta-truth|/SE {z.max():.2f} (<=3); sigma2 {m.sigma2:.3f} rel err {rel:.1%} (<=50%); "
                  f"max |grad| {gmax:.1e} (<1e-3); single-group vs IRLS {irls_gap:.1e} (<=1e-6)")
    assert ok


# ---------------------------------------------------------------- C3

def wilcoxon_fixture(n_cases=200, seed=0):
    """Short diff vectors with ties, zeros and both signs."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_cases):
        n = int(rng.integers(1, 11))
        if i % 3 == 0:
            d = rng.normal(0.3, 1.0, n)
        else:
            d = rng.integers(-4, 5, n) * 0.5
        cases.append(d)
    return cases


def test_c3_wilcoxon_oracles():
    worst = 0.0
    for d in wilcoxon_fixture():
        if not np.any(d != 0):
            continue
        _, p = oracles.wilcoxon_enumeration(d)
        worst = max(worst, abs(wilcoxon_signed_rank(d).p_value - p))
    rng = np.random.default_rng(25)
    d = rng.normal(0.35, 1.0, 25)
    r = wilcoxon_signed_rank(d)
    p_perm = oracles.wilcoxon_permutation(d, 10**6, rng)
    gap = abs(r.p_normal - p_perm)
    ok = worst <= 1e-12 and gap <= 0.02
    record(3, ok, f"200-case exact vs enumeration max gap {worst:.1e} (<=1e-12); "
                  f"n=25 normal p {r.p_normal:.4f} vs permutation {p_perm:.4f}, gap {gap:.4f} (<=0.02)")
    assert ok


# ---------------------------------------------------------------- C4

DAY = 86_400


def planted_pool(rng, n_treated, n_control, shift=0.5):
    """Pool where treated users sit ``shift`` SD higher on every covariate."""
    events = []
    for arm, n in (("t", n_treated), ("c", n_control)):
        z = rng.normal(shift if arm == "t" else 0.0, 1.0, (n, 4))
        for i in range(n):
            events.append(make_event(
                f"{arm}{i:04d}", treated=arm == "t", engaged=bool(rng.random() < 0.5),
                age=float(max(0.0, (400 + 150 * z[i, 0]) * DAY)),
                nest=int(max(1, round(3 + z[i, 1]))),
                valence=float(np.clip(0.25 * z[i, 2], -1, 1)),
                words=int(max(0, round(20 + 6 * z[i, 3]))),
                reply=(0.1, 0.2, 0.3),
            ))
    return events


def test_c4_matching_optimality():
    rng = np.random.default_rng(2024)
    violations, worsened, pairs = 0, 0, 0
    for i in range(100):
        n_t = int(rng.integers(20, 201))
        n_c = int(rng.integers(2 * n_t, 601)) if 2 * n_t < 600 else 600
        pool = planted_pool(rng, n_t, n_c)
        treated = sorted((e for e in pool if e.treated), key=lambda e: e.user)
        control = sorted((e for e in pool if not e.treated), key=lambda e: e.user)
        mp = match_users(treated, control, USER_FEATURES, seed=i)
        tX, cX = feature_matrix(treated, USER_FEATURES), feature_matrix(control, USER_FEATURES)
        cov = oracles.ridge_cov(np.vstack([tX, cX]))
        got = [(p.treated.user, p.control.user, p.distance) for p in mp.pairs]
        violations += oracles.check_greedy(got, tX, cX, [e.user for e in treated],
                                           [e.user for e in control], cov)
        scale = np.sqrt((tX.var(axis=0, ddof=1) + cX.var(axis=0, ddof=1)) / 2)
        before = standardized_mean_differences(tX, cX, scale)
        after = standardized_mean_differences(feature_matrix(mp.treated, USER_FEATURES),
                                              feature_matrix(mp.control, USER_FEATURES), scale)
        worsened += int(np.sum(after > before))
        pairs += len(mp.pairs)
    ok = violations == 0 and worsened == 0
    record(4, ok, f"100 pools, {pairs} pairs: {violations} pairs differ from exhaustive scan; "
                  f"{worsened} covariate SMDs worsened")
    assert ok


# ---------------------------------------------------------------- C5

SAGE_CASES = [
    ((4, 1, 1, 1), (1, 1, 1, 1), 0.1),
    ((2, 2, 1, 5), (3, 1, 3, 1), 0.2),
    ((5, 3, 2, 1), (2, 2, 2, 2), 0.3),
    ((3, 1, 2, 4), (2, 3, 1, 4), 0.5),
]


def test_c5_sage_oracle(_sage_monotone):
    words = ["w1", "w2", "w3", "w4"]
    worst, inside = 0.0, True
    for target, bg, lam in SAGE_CASES:
        model = lexicon.fit_sage(dict(zip(words, target)), dict(zip(words, bg)), lam=lam, min_count=0)
        c = np.array([target[words.index(w)] for w in model.vocabulary], float)
        obj = oracles.sage_objective(model.eta, c, model.m, lam)
        grid_obj, grid_eta = oracles.sage_grid_min(c, model.m, lam)
        # the grid only certifies optima strictly inside its window
        inside &= bool(np.all(np.abs(grid_eta) < 2.0))
        worst = max(worst, abs(grid_obj - obj))

    rng = np.random.default_rng(1)
    vocab = [f"w{i}" for i in range(60)]
    target = {w: int(x) for w, x in zip(vocab, rng.poisson(30, 60) + rng.integers(0, 40, 60))}
    bg = {w: int(x) for w, x in zip(vocab, rng.poisson(300, 60))}
    nnz = [int(np.count_nonzero(lexicon.fit_sage(target, bg, lam=lam).eta)) for lam in (0.1, 1.0, 10.0)]

    # the autouse fixture asserts monotone traces for every fit in every test
    fits = list(_sage_monotone)
    monotone = all(all(b <= a for a, b in zip(m.objective_trace, m.objective_trace[1:])) for m in fits)
    ok = worst <= 1e-4 and inside and monotone and nnz[0] >= nnz[1] >= nnz[2]
    record(5, ok, f"4-word grid gap max {worst:.1e} (<=1e-4); objective non-increasing in {len(fits)} fits "
                  f"here and enforced suite-wide; nonzeros at lambda 0.1/1/10: {nnz}")
    assert ok


# ---------------------------------------------------------------- C6

@pytest.fixture(scope="module")
def c6_setup():
    corpus = generate_corpus(SynthParams.standard(10, 10, 2000, seed=0))
    a = run_pipeline(corpus)
    events = {name: ca.events for name, ca in a.communities.items()}
    types = {name: ca.type for name, ca in a.communities.items()}
    models = {}
    for ctype in ("hateful", "nonhateful"):
        for kind in ("comment", "submission"):
            evs = [e for n, es in events.items() if types[n] == ctype for e in es if e.kind == kind]
            models[(ctype, kind)] = fit_mixed_logistic(evs, kind, ctype)
    return corpus, events, types, models


def test_c6_counterfactual_dominance(c6_setup):
    corpus, events, types, models = c6_setup
    # a model with the stated signs: hateful comment coefficients, every
    # community's intercept from the generating ledger
    truth = corpus.truth["communities"]
    dom = EngagementModel("comment", "hateful", np.array(C2_BETA), np.zeros(5), 0.0,
                          {n: truth[n]["u"]["comment"] for n in truth}, True)
    assert dominance_applies(dom)
    seeds = range(100)
    held = 0
    for s in seeds:
        ok_seed = True
        for name, evs in events.items():
            d = simulate_growth(dom, evs, Scenario.DEFAULT, s, name)
            n = simulate_growth(dom, evs, Scenario.NICER, s, name)
            ok_seed &= n.final >= d.final
        held += ok_seed

    inc = {}
    for name, evs in events.items():
        ms = {k: models[(types[name], k)] for k in ("comment", "submission")}
        inc[name] = simulate_community(ms, evs, seeds, name, types[name], keep_curves=False).mean_increase
    hate = float(np.mean([v for n, v in inc.items() if types[n] == "hateful"]))
    benign = float(np.mean([v for n, v in inc.items() if types[n] == "nonhateful"]))
    ok = held == 100 and hate > benign
    record(6, ok, f"nicer >= default in {held}/100 CRN seeds over {len(events)} communities; "
                  f"mean percent increase hateful {hate:.2f}% vs non-hateful {benign:.2f}%")
    assert ok


# ---------------------------------------------------------------- C7

def test_c7_substitution_sensitivity():
    hostile, benign = HOSTILE.moments(), BENIGN.moments()
    gap = {k: hostile[k][0] - benign[k][0] for k in ("sentiment", "toxicity", "attack")}
    worst = {k: 0.0 for k in gap}
    injected = []
    for seed in range(3):
        corpus = generate_corpus(SynthParams.standard(5, 5, 2000, seed=seed, hate_rate=0.08))
        comms = build_communities(corpus.posts, BOTS)
        types = corpus.community_types()
        replies = {}
        for name, comm in comms.items():
            by_id = {p.id: p for p in comm.posts}
            evs = first_post_events(comm)
            replies[name] = [by_id[e.reply_id].body for e in evs if e.reply_id is not None]
        rows = substitution_rows(replies, types, synth_hate_lexicon(), StubScorer(synth_stub_lexicons()))
        hate_rows = [r for r in rows if r.type == "hateful"]
        injected.append(sum(r.n_with_hate for r in hate_rows) / sum(r.n_replies for r in hate_rows))
        for k, name in enumerate(gap):
            shift = float(np.mean([r.shift[k] for r in hate_rows]))
            worst[name] = max(worst[name], abs(shift) / abs(gap[name]))
    ok = all(v < 0.2 for v in worst.values())
    record(7, ok, "largest |shift|/gap over 3 corpora: "
                  + ", ".join(f"{k} {v:.3f}" for k, v in worst.items())
                  + f" (<0.2); hate-word share of hateful replies {np.mean(injected):.3f}")
    assert ok


# ---------------------------------------------------------------- C8

def test_c8_determinism(tmp_path):
    synth = tmp_path / "s"
    assert cli.main(["synth", "--synth-dir", str(synth), "--synth-hateful", "3", "--synth-nonhateful", "3",
                     "--synth-users", "600", "--synth-seed", "8"]) == 0
    cfg = str(synth / "pipeline.toml")
    trees = []
    for workers in (1, 3):
        out = tmp_path / f"out{workers}"
        assert cli.main(["all", "--config", cfg, "--output", str(out), "--workers", str(workers),
                         "--replications", "10"]) == 0
        trees.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    # an identical second run with one worker
    out = tmp_path / "again"
    assert cli.main(["all", "--config", cfg, "--output", str(out), "--replications", "10"]) == 0
    trees.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    differ = sorted(k for k in trees[0] if any(t.get(k) != trees[0][k] for t in trees[1:]))
    same_files = all(set(t) == set(trees[0]) for t in trees)
    ok = same_files and not differ
    record(8, ok, f"{len(trees[0])} files byte-identical across repeat run and workers 1 vs 3"
           if ok else f"differing files: {differ}")
    assert ok


# ---------------------------------------------------------------- C9

def test_c9_threshold_sign_preservation():
    preserved, failed = 0, 0
    for seed in range(100):
        events, _ = generate_events(C2_BETA, C2_SIGMA2, 25, 4000, seed=seed)
        cont = fit_mixed_logistic(events, "comment", "hateful")
        try:
            thr = fit_mixed_logistic(events, "comment", "hateful", threshold=0.7)
        except Exception:
            failed += 1
            continue
        preserved += bool(np.all(np.sign(thr.beta) == np.sign(cont.beta)))
    ok = preserved >= 90 and failed == 0
    record(9, ok, f"threshold refit completed in {100 - failed}/100 seeds; "
                  f"all coefficient signs preserved in {preserved}/100 (need 90)")
    assert ok
