"""Closed-form operation counts per transmission block.

Counts are complex multiply/add operations for a square system (as many
transmit antennas as users) over one block of ``ns`` slots, with ``r``
solver iterations where applicable.  The shared pieces are the per-block
extrapolation of the coupling matrices, the factor solve, and the
normalization plus precoder assembly.

Two baselines are included for comparison: the conventional per-slot
iterative scheme ("base-cf") and an interior-point estimate ("ipm") whose
count depends on the target accuracy ``eps``.  Both are evaluated exactly
as printed in their source expressions.
"""

from __future__ import annotations

import math

__all__ = ["FLOP_METHODS", "flops"]

FLOP_METHODS = ("zf", "cf", "sub", "net", "base-cf", "ipm")


def _extrap(k: float, ns: float) -> float:
    return 3 * k**3 + (8 * ns + 4) * k**2 + (5 * ns + 3) * k


def _norm_assemble(k: float, ns: float) -> float:
    return (9 * k**3 + 13 * k**2 + 7 * k - 1) * ns


def _iter_solve(k: float, ns: float, r: float) -> float:
    return (8 * k**2 + 5 * k + 1) * r * ns


def _sub_solve(k: float, ns: float) -> float:
    return (8 * k**2 + 4 * k) * ns


def _net_layers(k: float, ns: float, r: float) -> float:
    return (8 * k**2 + 6 * k) * r * ns


def flops(method: str, k: int, ns: int, r: int | None = None, eps: float | None = None) -> float:
    """Operation count of one scheme for a block of ``ns`` slots.

    ``r`` is required for the iterative schemes ("cf", "net", "base-cf"),
    ``eps`` (in (0, 1)) only for "ipm".
    """
    if k <= 0 or ns <= 0:
        raise ValueError("k and ns must be positive")
    if method in ("cf", "net", "base-cf"):
        if r is None or r < 0:
            raise ValueError(f"method {method!r} needs an iteration count r >= 0")
    if method == "ipm":
        if eps is None or not 0.0 < eps < 1.0:
            raise ValueError("method 'ipm' needs eps in (0, 1)")

    if method == "zf":
        return float((5 * k**3 + 2 * k**2) * ns)
    if method == "cf":
        return float(_extrap(k, ns) + _iter_solve(k, ns, r) + _norm_assemble(k, ns))
    if method == "sub":
        return float(_extrap(k, ns) + _sub_solve(k, ns) + _norm_assemble(k, ns))
    if method == "net":
        return float(_extrap(k, ns) + _net_layers(k, ns, r) + _norm_assemble(k, ns))
    if method == "base-cf":
        tail = sum(2 * i**2 + 3 * i + 1 for i in range(r + 1))
        return float((28 * k**3 + 49 * k**2 + 4 * k + tail) * ns)
    if method == "ipm":
        head = 28 * k**3 + 49 * k**2 + 4 * k
        tail = math.log((2 * k**2 + 12 * k + 2) / eps) * math.sqrt(k + 2) * (2 * k**3 + 3 * k**3 + 2 * k)
        return float((head + tail) * ns)
    raise ValueError(f"unknown method {method!r}, expected one of {FLOP_METHODS}")
