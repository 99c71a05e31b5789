"""Greedy Mahalanobis matching on a pool where repliers differ from non-repliers.

Treated users are older, more deeply nested, more positive and wordier.
Matching pairs each with the nearest remaining control; the standardized
mean differences show how much of the imbalance is gone.
"""

import numpy as np

from firstreply.cohort import USER_FEATURES, feature_matrix, match_users, standardized_mean_differences
from firstreply.corpus import FirstPostEvent, ReplyFeatures

DAY = 86_400
rng = np.random.default_rng(0)


def pool(n, shift, arm):
    z = rng.normal(shift, 1.0, (n, 4))
    return [
        FirstPostEvent(
            user=f"{arm}{i:04d}", community="demo", kind="comment", post_id=f"{arm}p{i}",
            first_post_time=i, thread_root="r", account_age=max(0.0, (300 + 120 * z[i, 0]) * DAY),
            nest_level=int(max(1, round(2 + z[i, 1]))), valence=float(np.clip(0.3 * z[i, 2], -1, 1)),
            word_count=int(max(1, round(25 + 8 * z[i, 3]))), treated=arm == "t",
            first_reply=ReplyFeatures(0.0, 0.1, 0.1) if arm == "t" else None,
            engaged=bool(rng.random() < 0.5),
        )
        for i in range(n)
    ]


treated, control = pool(150, 0.6, "t"), pool(500, 0.0, "c")
mp = match_users(treated, control, USER_FEATURES, seed=7)
print(f"{len(mp.pairs)} pairs, {len(mp.unmatched)} treated left unmatched")

tX, cX = feature_matrix(treated, USER_FEATURES), feature_matrix(control, USER_FEATURES)
scale = np.sqrt((tX.var(axis=0, ddof=1) + cX.var(axis=0, ddof=1)) / 2)
before = standardized_mean_differences(tX, cX, scale)
after = standardized_mean_differences(
    feature_matrix(mp.treated, USER_FEATURES), feature_matrix(mp.control, USER_FEATURES), scale)
print(f"\n{'covariate':<12} {'SMD before':>10} {'SMD after':>10}")
for name, b, a in zip(USER_FEATURES, before, after):
    print(f"{name:<12} {b:>10.3f} {a:>10.3f}")

d = np.array([p.distance for p in mp.pairs])
print(f"\npair distance: median {np.median(d):.2f}, 90th percentile {np.quantile(d, 0.9):.2f}")
