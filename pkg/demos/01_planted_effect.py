"""Plant reply effects in a synthetic archive and recover them with the pipeline.

Hateful communities get hostile first replies, non-hateful ones get benign
replies. Comment-first newcomers who get a hostile reply come back less
often, so the matched ERR in hateful communities should sit below the
non-hateful one.
"""

import time

from firstreply.pipeline import analyze, build_communities
from firstreply.scoring import StubScorer
from firstreply.synth import SynthParams, generate_corpus, synth_stub_lexicons

t0 = time.perf_counter()
corpus = generate_corpus(SynthParams.standard(n_hateful=4, n_nonhateful=4, users=2000, seed=1))
print(f"{len(corpus.posts)} posts in {len(corpus.params.communities)} communities "
      f"({time.perf_counter() - t0:.1f}s)")

comms = build_communities(corpus.posts, ["bot", "automoderator"])
types = corpus.community_types()
hateful = sorted(n for n, t in types.items() if t == "hateful")
candidates = sorted(n for n, t in types.items() if t == "nonhateful")
bans = {c.name: c.ban_date for c in corpus.params.communities if c.ban_date}
result = analyze(comms, hateful, candidates, bans, scorer=StubScorer(synth_stub_lexicons()))

print("\ncommunity pairs (hateful -> matched control):")
for h, c, d in result.community_pairs:
    print(f"  {h.community} -> {c.community}  distance {d:.3f}")

print(f"\n{'community':<10} {'type':<11} {'matched ERR':>11} {'true ERR':>9} {'pairs':>6}")
for name, ca in sorted(result.communities.items()):
    r = ca.errs["comment"]
    truth = corpus.truth["communities"][name]["true_err"]["comment"]
    print(f"{name:<10} {ca.type:<11} {r.err:>11.3f} {truth:>9.3f} {r.n_treated:>6}")

for ctype in ("hateful", "nonhateful"):
    print(f"mean comment ERR, {ctype}: {result.mean_err(ctype, 'comment'):.3f}")
