"""Optimal assignment between predictions and targets, and the
permutation-invariant reconstruction loss built on it.

The assignment solver is the classic shortest-augmenting-path formulation
with row/column potentials (worst-case cubic in n). Ties between
equal-cost assignments are broken toward the lexicographically smallest
permutation so results are reproducible; that refinement re-runs the
cubic core on shrinking subproblems and is intended for the small n this
package works with.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class Assignment:
    """Bijective mapping prediction index -> target index with its total cost."""

    permutation: tuple[int, ...]
    total_cost: float

    def __post_init__(self):
        if sorted(self.permutation) != list(range(len(self.permutation))):
            raise ValueError(f"not a permutation: {self.permutation}")


def _solve_lap(cost: np.ndarray) -> list[int]:
    """Minimum-cost perfect matching on a square matrix via the
    potentials/shortest-augmenting-path method. Returns row -> column."""
    n = cost.shape[0]
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    # match_col[j] = 1-based row matched to 1-based column j (0 = free)
    match_col = [0] * (n + 1)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = [math.inf] * (n + 1)
        way = [0] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            delta = math.inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
    row_to_col = [0] * n
    for j in range(1, n + 1):
        row_to_col[match_col[j] - 1] = j - 1
    return row_to_col


def _total(cost: np.ndarray, perm: Sequence[int]) -> float:
    # fsum gives a correctly rounded total, independent of summation order
    return math.fsum(cost[i, j] for i, j in enumerate(perm))


def hungarian(cost: np.ndarray) -> Assignment:
    """Globally minimal assignment on a square, finite cost matrix.

    Among equal-cost optima the lexicographically smallest permutation is
    returned: each row in turn is fixed to the smallest column that still
    permits an optimal completion of the remaining rows.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1] or cost.shape[0] == 0:
        raise ValueError(f"cost matrix must be square and non-empty, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    n = cost.shape[0]

    perm = [0] * n
    free_rows = list(range(n))
    free_cols = list(range(n))
    fixed: list[tuple[int, int]] = []
    while free_rows:
        i = free_rows[0]
        rest_rows = free_rows[1:]
        best_total = math.inf
        best_col = free_cols[0]
        for j in free_cols:
            rest_cols = [c for c in free_cols if c != j]
            completion: list[tuple[int, int]] = []
            if rest_rows:
                sub_perm = _solve_lap(cost[np.ix_(rest_rows, rest_cols)])
                completion = [(r, rest_cols[c]) for r, c in zip(rest_rows, sub_perm)]
            total = math.fsum(cost[r, c] for r, c in fixed + [(i, j)] + completion)
            if total < best_total:
                best_total = total
                best_col = j
        fixed.append((i, best_col))
        perm[i] = best_col
        free_rows = rest_rows
        free_cols.remove(best_col)

    return Assignment(tuple(perm), _total(cost, perm))


def mse_cost_matrix(preds: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """n x n matrix of per-pair mean squared errors over all grid cells."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ShapeError(f"shape mismatch: {preds.shape} vs {targets.shape}")
    if preds.ndim < 2:
        raise ShapeError(f"expected n grids, got shape {preds.shape}")
    n = preds.shape[0]
    flat_p = preds.reshape(n, -1)
    flat_t = targets.reshape(n, -1)
    diff = flat_p[:, None, :] - flat_t[None, :, :]
    return np.mean(diff * diff, axis=2)


def pit_mse_loss(preds, targets):
    """Permutation-invariant MSE: mean per-pair MSE under the optimal
    assignment of predictions to targets.

    ``preds`` may be an autodiff tensor of shape [n, ...]; the returned
    loss is then differentiable with respect to it (the assignment is a
    constant of the backward pass). Returns ``(loss, assignment)``.
    """
    from . import autodiff as ad

    pred_values = preds.data if isinstance(preds, ad.Tensor) else np.asarray(preds)
    target_values = np.asarray(targets.data if isinstance(targets, ad.Tensor) else targets)
    if pred_values.shape != target_values.shape:
        raise ShapeError(f"shape mismatch: {pred_values.shape} vs {target_values.shape}")

    assignment = hungarian(mse_cost_matrix(pred_values, target_values))

    if isinstance(preds, ad.Tensor):
        reordered = np.ascontiguousarray(target_values[list(assignment.permutation)])
        diff = ad.sub(preds, ad.Tensor(reordered.astype(pred_values.dtype)))
        loss = ad.mean(ad.mul(diff, diff))
        return loss, assignment
    # mean over matched pairs of per-pair MSE == mean squared error of the
    # reordered stack, since all pairs share one grid size
    return float(assignment.total_cost / pred_values.shape[0]), assignment


def match_by_score(
    targets: Sequence,
    estimates: Sequence,
    score: Callable[[object, object], float],
    maximize: bool = True,
) -> Assignment:
    """Optimal assignment of estimates to targets under a pairwise score.

    ``score(target, estimate)`` is evaluated for every pair; maximization
    negates the score matrix and reuses the minimizing solver. The returned
    permutation maps estimate index -> target index, and total_cost is the
    summed score (not negated) of the matched pairs.
    """
    if len(targets) != len(estimates):
        raise ShapeError(f"count mismatch: {len(targets)} targets vs {len(estimates)} estimates")
    n = len(targets)
    scores = np.empty((n, n), dtype=np.float64)
    for i, est in enumerate(estimates):
        for j, tgt in enumerate(targets):
            scores[i, j] = score(tgt, est)
    solved = hungarian(-scores if maximize else scores)
    return Assignment(solved.permutation, _total(scores, solved.permutation))
