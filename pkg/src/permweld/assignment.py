"""Exact solver for the square linear assignment problem.

Shortest-augmenting-path method with dual potentials (the Jonker-Volgenant
family), O(n^3) worst case with numpy-vectorized inner scans.  All tie breaks
prefer the lowest column index, so the result is deterministic and stable
under shifting a full row of the score matrix by a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


@dataclass(frozen=True)
class Permutation:
    """A bijection on 0..n-1; ``mapping[i]`` is the column assigned to row i."""

    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        _require(m.ndim == 1, "mapping must be 1-D")
        n = m.shape[0]
        _require(bool(np.array_equal(np.sort(m), np.arange(n))),
                 "mapping is not a bijection on 0..n-1")
        m = np.ascontiguousarray(m)
        if m.flags.writeable:
            m = m.copy()
            m.flags.writeable = False
        object.__setattr__(self, "mapping", m)

    def __len__(self) -> int:
        return self.mapping.shape[0]

    @staticmethod
    def identity(n: int) -> "Permutation":
        return Permutation(np.arange(n))

    def inverse(self) -> "Permutation":
        inv = np.empty(len(self), dtype=np.int64)
        inv[self.mapping] = np.arange(len(self))
        return Permutation(inv)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.mapping, np.arange(len(self))))


def _solve_min(cost: np.ndarray) -> np.ndarray:
    """Row-to-column assignment minimizing the total cost.

    For each row a shortest augmenting path is grown in the reduced-cost
    graph; duals are updated so reduced costs stay nonnegative.  Ties on the
    next column to scan go to the lowest index (np.argmin semantics).
    """
    n = cost.shape[0]
    u = np.zeros(n)          # row potentials
    v = np.zeros(n)          # column potentials
    row_of = np.full(n, -1, dtype=np.int64)   # column -> row
    col_of = np.full(n, -1, dtype=np.int64)   # row -> column

    for cur_row in range(n):
        dist = np.full(n, np.inf)
        pred = np.full(n, cur_row, dtype=np.int64)
        remaining = np.ones(n, dtype=bool)
        scanned_cols: list[int] = []
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            rem_idx = np.flatnonzero(remaining)
            reduced = min_val + cost[i, rem_idx] - u[i] - v[rem_idx]
            better = reduced < dist[rem_idx]
            dist[rem_idx[better]] = reduced[better]
            pred[rem_idx[better]] = i
            j = rem_idx[np.argmin(dist[rem_idx])]
            min_val = dist[j]
            remaining[j] = False
            scanned_cols.append(j)
            if row_of[j] == -1:
                sink = j
            else:
                i = row_of[j]
        # Dual update keeps all reduced costs nonnegative.
        u[cur_row] += min_val
        for j in scanned_cols[:-1]:
            r = row_of[j]
            u[r] += min_val - dist[j]
            v[j] -= min_val - dist[j]
        # Augment: flip the alternating path back to cur_row.
        j = sink
        while True:
            i = pred[j]
            row_of[j] = i
            col_of[i], j = j, col_of[i]
            if i == cur_row:
                break
    return col_of


def solve_lap(score: np.ndarray, sense: str = "maximize") -> tuple[Permutation, float]:
    """Globally optimal assignment for a square score matrix.

    Returns the permutation p (row i gets column p[i]) and the objective
    ``sum_i score[i, p[i]]``.  ``sense`` selects maximization or minimization;
    the two are duals under negation and return the same permutation.
    """
    score = np.asarray(score, dtype=np.float64)
    _require(score.ndim == 2 and score.shape[0] == score.shape[1],
             f"score must be square, got shape {score.shape}")
    _require(score.shape[0] >= 1, "score must be at least 1 x 1")
    _require(bool(np.isfinite(score).all()), "score contains non-finite values")
    if sense == "maximize":
        cost = -score
    elif sense == "minimize":
        cost = score.copy()
    else:
        raise ValidationError(f"unknown sense {sense!r}")
    mapping = _solve_min(cost)
    objective = float(score[np.arange(score.shape[0]), mapping].sum())
    return Permutation(mapping), objective
