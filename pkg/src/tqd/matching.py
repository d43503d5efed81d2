"""Minimum-cost bipartite assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class MatchResult:
    """``assignment[r]`` is the column matched to row ``r`` or -1."""

    assignment: np.ndarray
    total_cost: float

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(r), int(c)) for r, c in enumerate(self.assignment) if c >= 0]


def hungarian_match(cost) -> MatchResult:
    """Injective minimum-total-cost assignment for any rectangular cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        bad = np.argwhere(~np.isfinite(cost))[0]
        raise ValueError(f"cost matrix has a non-finite entry at {tuple(int(i) for i in bad)}")
    assignment = np.full(cost.shape[0], -1, dtype=int)
    if cost.size == 0:
        return MatchResult(assignment, 0.0)
    rows, cols = linear_sum_assignment(cost)
    assignment[rows] = cols
    return MatchResult(assignment, float(cost[rows, cols].sum()))
