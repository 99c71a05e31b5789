"""How many more newcomers would stay if every first reply were civil?

Each newcomer's continuation draw is one shared uniform, used under both
the observed replies and the "nicer" replies (toxicity and attack set to
zero, sentiment floored at zero). The difference between the curves is
then purely the reply effect, not simulation noise.
"""

import numpy as np

from firstreply.simulate import simulate_community, simulate_scenarios
from firstreply.stats import fit_mixed_logistic
from firstreply.synth import BENIGN, HOSTILE, TABLE_BETA, TABLE_SIGMA2, generate_events

beta = TABLE_BETA[("comment", "hateful")]
sigma2 = TABLE_SIGMA2[("comment", "hateful")]
for label, law in (("hostile replies", HOSTILE), ("benign replies", BENIGN)):
    events, _ = generate_events(beta, sigma2, 10, 1500, law=law, reply_prob=0.6, seed=11)
    model = fit_mixed_logistic(events, "comment", label)
    g0 = [e for e in events if e.community == "g000"]
    default, nicer = simulate_scenarios(model, g0, seed=0, community="g000")
    print(f"{label}: community g000 ends with {default.final} engaged newcomers, "
          f"{nicer.final} under nicer replies")
    incs = [simulate_community(model, [e for e in events if e.community == c], range(50), c).mean_increase
            for c in sorted({e.community for e in events})]
    print(f"  mean percent increase over 10 communities x 50 seeds: {np.mean(incs):.2f}%")
