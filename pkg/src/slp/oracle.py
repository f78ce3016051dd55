"""Exact reference solver for the per-slot margin maximization.

The margin problem (maximize the smallest scaling factor subject to the
exact power constraint) is scale-reducible: pin the smallest factor at 1,
minimize the quadratic form ``f^T V f`` over ``f >= 1`` on exploitable
indices with fixed indices at 1, then rescale the minimizer to meet the
power budget.  Validity rests on ``V`` being positive semidefinite with a
positive optimal value, which is asserted at runtime.

At desk scale (2K <= 16) the reduced convex program is solved exactly by
enumerating every subset of pinned-at-1 exploitable indices, solving the
free block for stationarity, and keeping KKT-valid candidates.  The result
is the ground truth the iterative solvers are measured against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .ci import SlotCoupling

__all__ = ["OracleInfeasibleError", "OracleSolution", "solve_reference", "solve_reference_batch", "verify_kkt"]


class OracleInfeasibleError(RuntimeError):
    """No KKT-valid candidate exists (numerically degenerate coupling)."""


@dataclass(frozen=True)
class OracleSolution:
    """Exact optimum of one slot's margin problem.

    ``factors`` meet the power budget; ``margin`` is the optimal value
    (the smallest exploitable factor, equal to every fixed factor).
    ``reduced`` is the scale-reduced minimizer with pinned entries at 1 and
    ``objective`` its quadratic value; ``active_set`` holds the pinned
    exploitable indices (0-based).
    """

    factors: np.ndarray
    margin: float
    active_set: np.ndarray
    kkt_ok: bool
    reduced: np.ndarray
    objective: float


def _vmat(v: SlotCoupling | np.ndarray) -> np.ndarray:
    if isinstance(v, SlotCoupling):
        return v.vmat
    return np.asarray(v, dtype=np.float64)


def _check_partition(d: int, exploit_idx: np.ndarray, fixed_idx: np.ndarray) -> np.ndarray:
    exploit_idx = np.asarray(exploit_idx, dtype=np.int64)
    fixed_idx = np.asarray(fixed_idx, dtype=np.int64)
    both = np.concatenate([exploit_idx, fixed_idx])
    if both.size != d or np.any(np.sort(both) != np.arange(d)):
        raise ValueError("exploit_idx and fixed_idx must partition the factor indices")
    mask = np.zeros(d, dtype=bool)
    mask[exploit_idx] = True
    return mask


def solve_reference(
    v: SlotCoupling | np.ndarray, exploit_idx: np.ndarray, fixed_idx: np.ndarray, p0: float = 1.0
) -> OracleSolution:
    """Exact optimum for one slot (enumeration bound: 2K <= 16)."""
    vm = _vmat(v)
    d = vm.shape[0]
    if d > 16:
        raise ValueError(f"reference solver is limited to 2K <= 16, got {d}")
    mask = _check_partition(d, exploit_idx, fixed_idx)
    reduced, objective, pinned_mask, status = backend.oracle_solve_batch(vm[None], mask[None])
    if status[0] != backend.ORACLE_OK:
        raise OracleInfeasibleError("no KKT-valid candidate; coupling matrix is degenerate")
    reduced = reduced[0]
    objective = float(objective[0])
    o_sorted = np.sort(np.asarray(exploit_idx, dtype=np.int64))
    bits = int(pinned_mask[0])
    active = np.array([o_sorted[b] for b in range(o_sorted.size) if (bits >> b) & 1], dtype=np.int64)
    margin = float(np.sqrt(p0 / objective))
    return OracleSolution(
        factors=margin * reduced,
        margin=margin,
        active_set=active,
        kkt_ok=verify_kkt(vm, reduced, exploit_idx, fixed_idx),
        reduced=reduced,
        objective=objective,
    )


def solve_reference_batch(vmat: np.ndarray, exploit_mask: np.ndarray, p0: float = 1.0):
    """Batch variant returning ``(factors, margin)`` per slot."""
    reduced, objective, _, status = backend.oracle_solve_batch(vmat, exploit_mask)
    if np.any(status != backend.ORACLE_OK):
        bad = int(np.flatnonzero(status != backend.ORACLE_OK)[0])
        raise OracleInfeasibleError(f"no KKT-valid candidate for slot {bad}")
    margin = np.sqrt(p0 / objective)
    return margin[:, None] * reduced, margin


def verify_kkt(
    v: SlotCoupling | np.ndarray,
    factors: np.ndarray,
    exploit_idx: np.ndarray,
    fixed_idx: np.ndarray,
    tol: float = 1e-8,
) -> bool:
    """KKT check of a scale-reduced point.

    Requires primal feasibility (exploitable factors >= 1, fixed factors
    equal to 1), stationarity on non-tight exploitable coordinates, and
    nonnegative multipliers (``(V f)_i >= 0``) on tight ones.  Fixed
    coordinates carry equality constraints and need no sign condition.
    """
    vm = _vmat(v)
    factors = np.asarray(factors, dtype=np.float64)
    exploit_idx = np.asarray(exploit_idx, dtype=np.int64)
    fixed_idx = np.asarray(fixed_idx, dtype=np.int64)
    q = vm @ factors
    if exploit_idx.size and np.any(factors[exploit_idx] < 1.0 - tol):
        return False
    if fixed_idx.size and np.any(np.abs(factors[fixed_idx] - 1.0) > tol):
        return False
    tight = factors[exploit_idx] <= 1.0 + tol
    if np.any(np.abs(q[exploit_idx[~tight]]) > tol):
        return False
    if np.any(q[exploit_idx[tight]] < -tol):
        return False
    return True
