"""Engagement risk ratios."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

from ..cohort import MatchedPairs
from ..corpus import FirstPostEvent


@dataclass
class ErrResult:
    community: str
    kind: str
    p_treated: float
    p_control: float
    err: float
    n_treated: int
    n_control: int

    @property
    def defined(self) -> bool:
        return self.p_control > 0 and self.n_treated > 0

    def to_row(self) -> dict:
        return {
            "community": self.community,
            "kind": self.kind,
            "err": self.err,
            "p_treated": self.p_treated,
            "p_control": self.p_control,
            "n_treated": self.n_treated,
            "n_control": self.n_control,
        }


def risk_ratio(
    engaged_treated: int, n_treated: int, engaged_control: int, n_control: int,
    community: str = "", kind: str = "",
) -> ErrResult:
    if n_treated < 1 or n_control < 1:
        raise ValueError("both arms need at least one event")
    p_t = engaged_treated / n_treated
    p_c = engaged_control / n_control
    value = p_t / p_c if p_c > 0 else math.nan
    return ErrResult(community, kind, p_t, p_c, value, n_treated, n_control)


def err(
    pool: Union[MatchedPairs, Sequence[FirstPostEvent]], community: str = "", kind: str = ""
) -> ErrResult:
    """Engaged fraction of replied-to newcomers over that of ignored newcomers.

    ``pool`` is either matched pairs or a plain list of events split on
    ``treated``. The ratio is NaN (``defined`` is False) when no control
    engaged.
    """
    if isinstance(pool, MatchedPairs):
        treated, control = pool.treated, pool.control
        community = community or pool.community
        kind = kind or pool.kind
    else:
        treated = [e for e in pool if e.treated]
        control = [e for e in pool if not e.treated]
        if pool and not community:
            community = pool[0].community
        if pool and not kind:
            kind = pool[0].kind
    return risk_ratio(
        sum(e.engaged for e in treated), len(treated),
        sum(e.engaged for e in control), len(control),
        community, kind,
    )
