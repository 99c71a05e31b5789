"""Variance inflation factors."""

from __future__ import annotations

import math

import numpy as np


def vif(design: np.ndarray) -> list[float]:
    """VIF for every non-constant column of ``design``.

    Each column is regressed (least squares, with intercept) on the others;
    VIF = 1 / (1 - R^2), reported as ``inf`` when the column is an exact
    linear combination of the rest. Constant columns, i.e. an intercept, are
    skipped.
    """
    X = np.asarray(design, dtype=float)
    keep = [k for k in range(X.shape[1]) if np.ptp(X[:, k]) > 0]
    if len(keep) < 2:
        raise ValueError("need at least two non-intercept columns")
    X = X[:, keep]
    n = X.shape[0]
    out = []
    for k in range(X.shape[1]):
        target = X[:, k]
        others = np.column_stack([np.ones(n), np.delete(X, k, axis=1)])
        coef, *_ = np.linalg.lstsq(others, target, rcond=None)
        resid = target - others @ coef
        sst = ((target - target.mean()) ** 2).sum()
        unexplained = (resid @ resid) / sst
        out.append(math.inf if unexplained < 1e-10 else float(1.0 / unexplained))
    return out
