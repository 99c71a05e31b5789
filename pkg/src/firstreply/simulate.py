"""Counterfactual growth simulation with common random numbers."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from scipy.special import expit

from .corpus import FirstPostEvent, ReplyFeatures
from .stats.mixed import EngagementModel


class SimulationError(RuntimeError):
    pass


class UnknownCommunityError(SimulationError):
    pass


class Scenario(str, Enum):
    DEFAULT = "default"
    NICER = "nicer"

    @property
    def transform(self) -> str:
        if self is Scenario.DEFAULT:
            return "identity"
        return "toxicity=0, attack=0, sentiment=max(sentiment, 0)"


def counterfactual_transform(reply: ReplyFeatures | tuple) -> tuple[float, float, float]:
    s = reply.sentiment if isinstance(reply, ReplyFeatures) else reply[0]
    return (max(float(s), 0.0), 0.0, 0.0)


def _reply_tuple(ev: FirstPostEvent, scenario: Scenario) -> tuple[float, float, float]:
    r = ev.first_reply
    if r is None:
        return (0.0, 0.0, 0.0)
    if scenario is Scenario.NICER:
        return counterfactual_transform(r)
    return (r.sentiment, r.toxicity, r.attack)


ModelSet = Union[EngagementModel, Mapping[str, EngagementModel]]


def _model_for(models: ModelSet, kind: str) -> EngagementModel:
    if isinstance(models, EngagementModel):
        return models
    try:
        return models[kind]
    except KeyError:
        raise SimulationError(f"no fitted model for {kind!r} first posts") from None


def _intercept(model: EngagementModel, community: str) -> float:
    try:
        return model.u[community]
    except KeyError:
        raise UnknownCommunityError(
            f"community {community!r} has no fitted random intercept "
            f"(model covers {len(model.u)} communities)"
        ) from None


def engagement_probability(
    model: EngagementModel, event: FirstPostEvent, scenario: Scenario = Scenario.DEFAULT
) -> float:
    b0, b_reply, b_s, b_t, b_a = (float(v) for v in model.beta)
    eta = b0 + _intercept(model, event.community)
    if event.treated:
        s, t, a = _reply_tuple(event, Scenario(scenario))
        eta += b_reply + b_s * s + b_t * t + b_a * a
    return float(expit(eta))


def engagement_probabilities(
    models: ModelSet, events: Sequence[FirstPostEvent], scenario: Scenario = Scenario.DEFAULT
) -> np.ndarray:
    scenario = Scenario(scenario)
    out = np.empty(len(events))
    for i, ev in enumerate(events):
        out[i] = engagement_probability(_model_for(models, ev.kind), ev, scenario)
    return out


def shared_uniform(seed: int, community: str, user: str) -> float:
    """Counter-based uniform in [0, 1) keyed by (seed, community, user)."""
    key = f"{int(seed)}\x1f{community}\x1f{user}".encode("utf-8")
    word = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")
    return (word >> 11) * 2.0**-53


def shared_uniforms(seed: int, events: Sequence[FirstPostEvent]) -> np.ndarray:
    return np.array([shared_uniform(seed, ev.community, ev.user) for ev in events])


@dataclass
class GrowthCurve:
    community: str
    scenario: str
    points: list[tuple[int, int]] = field(default_factory=list)
    seed: int = 0

    @property
    def final(self) -> int:
        return self.points[-1][1] if self.points else 0

    def rows(self) -> Iterable[tuple]:
        for ts, count in self.points:
            yield (self.community, self.scenario, ts, count, self.seed)


def canonical_order(events: Sequence[FirstPostEvent]) -> list[FirstPostEvent]:
    return sorted(events, key=lambda e: (e.first_post_time, e.user))


def _curve(community: str, scenario: Scenario, seed: int, times, engaged) -> GrowthCurve:
    counts = np.cumsum(engaged.astype(np.int64))
    points = []
    for ts, c in zip(times, counts.tolist()):
        if points and points[-1][0] == ts:
            points[-1] = (ts, c)
        else:
            points.append((ts, c))
    return GrowthCurve(community, scenario.value, points, seed)


def simulate_growth(
    models: ModelSet,
    events: Sequence[FirstPostEvent],
    scenario: Scenario = Scenario.DEFAULT,
    seed: int = 0,
    community: str | None = None,
    uniforms: np.ndarray | None = None,
) -> GrowthCurve:
    """Cumulative engaged newcomers over time under one scenario.

    Each newcomer continues iff their shared uniform falls below their
    predicted probability, so the same draw serves every scenario.
    ``models`` is one model or a mapping from first-post kind to model.
    """
    scenario = Scenario(scenario)
    events = canonical_order(events)
    if community is None:
        names = {ev.community for ev in events}
        community = names.pop() if len(names) == 1 else "*"
    if uniforms is None:
        uniforms = shared_uniforms(seed, events)
    p = engagement_probabilities(models, events, scenario)
    times = [ev.first_post_time for ev in events]
    return _curve(community, scenario, seed, times, uniforms < p)


def simulate_scenarios(
    models: ModelSet, events: Sequence[FirstPostEvent], seed: int, community: str | None = None
) -> tuple[GrowthCurve, GrowthCurve]:
    """Default and nicer curves from the same uniforms."""
    events = canonical_order(events)
    u = shared_uniforms(seed, events)
    return (
        simulate_growth(models, events, Scenario.DEFAULT, seed, community, u),
        simulate_growth(models, events, Scenario.NICER, seed, community, u),
    )


def percent_increase(default_curve: GrowthCurve, nicer_curve: GrowthCurve) -> float:
    """Percent change of the final engaged count; NaN when the default final is 0."""
    if default_curve.community != nicer_curve.community or default_curve.seed != nicer_curve.seed:
        raise SimulationError("curves must come from the same community and seed")
    if default_curve.final == 0:
        return math.nan
    return 100.0 * (nicer_curve.final - default_curve.final) / default_curve.final


def dominance_applies(model: EngagementModel) -> bool:
    """Whether the nicer scenario provably cannot lower any probability."""
    _, _, b_s, b_t, b_a = (float(v) for v in model.beta)
    return b_a <= 0 and b_t <= 0 and b_s >= 0


@dataclass
class ReplicationSummary:
    community: str
    community_type: str
    increases: list[float]
    curves: list[tuple[GrowthCurve, GrowthCurve]] = field(default_factory=list, repr=False)

    @property
    def mean_increase(self) -> float:
        vals = [v for v in self.increases if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan


def simulate_community(
    models: ModelSet,
    events: Sequence[FirstPostEvent],
    seeds: Sequence[int],
    community: str,
    community_type: str = "",
    keep_curves: bool = True,
) -> ReplicationSummary:
    """Replicate both scenarios over ``seeds``; probabilities are computed once."""
    events = canonical_order(events)
    p_def = engagement_probabilities(models, events, Scenario.DEFAULT)
    p_nice = engagement_probabilities(models, events, Scenario.NICER)
    times = [ev.first_post_time for ev in events]
    increases, curves = [], []
    for seed in seeds:
        u = shared_uniforms(seed, events)
        d = _curve(community, Scenario.DEFAULT, seed, times, u < p_def)
        n = _curve(community, Scenario.NICER, seed, times, u < p_nice)
        increases.append(percent_increase(d, n))
        if keep_curves:
            curves.append((d, n))
    return ReplicationSummary(community, community_type, increases, curves)


def write_growth_curves(curves: Iterable[GrowthCurve], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["community", "scenario", "timestamp", "cumulative_count", "seed"])
        for curve in curves:
            w.writerows(curve.rows())


def write_summary(summaries: Iterable[ReplicationSummary], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["community", "type", "seed_index", "percent_increase"])
        for s in summaries:
            for i, v in enumerate(s.increases):
                w.writerow([s.community, s.community_type, i, repr(float(v))])
