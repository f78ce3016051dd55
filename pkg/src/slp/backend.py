"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Two inner loops dominate the per-slot work of the simulator and do not
vectorize across iterations:

* the greedy coordinate solver (one scaling factor updated per iteration,
  driven by the most negative entry of ``V @ factors``), and
* the exact reference solver (enumeration of pinned subsets with a small
  dense solve and a multiplier-sign check per subset).

Both are implemented twice with identical semantics.  The backend is
chosen by the ``SLP_BACKEND`` environment variable:

* ``auto`` (default): numba when importable, else numpy;
* ``numba``: require the compiled kernels;
* ``numpy``: force the pure-numpy path.

``benchmarks/bench_backends.py`` times the two paths against each other.
Numba kernels are compiled with ``cache=True`` (first call pays the JIT
cost once per machine) and ``nogil=True`` so block-level worker threads
can overlap.  ``fastmath`` is deliberately off: termination tests and
argmin tie-breaks must follow IEEE semantics for reproducibility.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "active_backend",
    "set_backend",
    "cf_solve_batch",
    "oracle_solve_batch",
    "CF_OK",
    "CF_BAD_DIAGONAL",
    "ORACLE_OK",
    "ORACLE_NO_CANDIDATE",
]

CF_OK = 0
CF_BAD_DIAGONAL = 1
ORACLE_OK = 0
ORACLE_NO_CANDIDATE = 1

# Candidate acceptance thresholds of the reference solver (shared by both
# implementations so they accept the same candidates).
_FEAS_TOL = 1e-9
_TIE_TOL = 1e-12

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via SLP_BACKEND=numpy
    _HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------


def _cf_solve_batch_np(vmat: np.ndarray, exploit: np.ndarray, r_max: int):
    n, d, _ = vmat.shape
    factors = np.ones((n, d))
    iters = np.zeros(n, dtype=np.int64)
    status = np.zeros(n, dtype=np.int64)
    for s in range(n):
        mask = exploit[s]
        if not mask.any():
            continue
        v = vmat[s]
        om = factors[s]
        it = 0
        while it < r_max:
            q = v @ om
            q_l = np.where(mask, q, np.inf)
            k = int(np.argmin(q_l))  # first minimum, lowest index wins
            if q_l[k] >= 0.0:
                break
            if v[k, k] <= 0.0:
                status[s] = CF_BAD_DIAGONAL
                break
            om[k] = -(v[k] @ om - v[k, k] * om[k]) / v[k, k]
            it += 1
        iters[s] = it
    return factors, iters, status


def _oracle_solve_batch_np(vmat: np.ndarray, exploit: np.ndarray):
    n, d, _ = vmat.shape
    factors = np.ones((n, d))
    objective = np.zeros(n)
    pinned_mask = np.zeros(n, dtype=np.int64)
    status = np.zeros(n, dtype=np.int64)
    idx = np.arange(d)
    for s in range(n):
        v = vmat[s]
        o_idx = idx[exploit[s]]
        no = o_idx.size
        best_obj = np.inf
        best_omega = None
        best_mask = -1
        for card in range(no + 1):
            for mask in range(1 << no):
                if bin(mask).count("1") != card:
                    continue
                pinned_bits = np.array([(mask >> b) & 1 for b in range(no)], dtype=bool)
                free = o_idx[~pinned_bits]
                omega = np.ones(d)
                if free.size:
                    a = v[np.ix_(free, free)]
                    b = -(v[free].sum(axis=1) - v[np.ix_(free, free)].sum(axis=1))
                    try:
                        x = np.linalg.solve(a, b)
                    except np.linalg.LinAlgError:
                        continue
                    if not np.all(np.isfinite(x)):
                        continue
                    if np.linalg.norm(a @ x - b) > 1e-8 * (1.0 + np.linalg.norm(b)):
                        continue  # treat as singular, matching the kernel's pivot guard
                    if np.any(x < 1.0 - _FEAS_TOL):
                        continue
                    omega[free] = x
                q = v @ omega
                tight = o_idx[pinned_bits]
                if np.any(q[tight] < -_FEAS_TOL):
                    continue
                obj = float(omega @ q)
                if obj < best_obj - _TIE_TOL:
                    best_obj = obj
                    best_omega = omega
                    best_mask = mask
        if best_omega is None or best_obj <= 0.0:
            status[s] = ORACLE_NO_CANDIDATE
            continue
        factors[s] = best_omega
        objective[s] = best_obj
        pinned_mask[s] = best_mask
    return factors, objective, pinned_mask, status


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _cf_solve_batch_nb(vmat, exploit, r_max):  # pragma: no cover - compiled
        n, d, _ = vmat.shape
        factors = np.ones((n, d))
        iters = np.zeros(n, dtype=np.int64)
        status = np.zeros(n, dtype=np.int64)
        for s in range(n):
            has_o = False
            for i in range(d):
                if exploit[s, i]:
                    has_o = True
                    break
            if not has_o:
                continue
            it = 0
            while it < r_max:
                qmin = np.inf
                kmin = -1
                for i in range(d):
                    qi = 0.0
                    for j in range(d):
                        qi += vmat[s, i, j] * factors[s, j]
                    if exploit[s, i] and qi < qmin:
                        qmin = qi
                        kmin = i
                if qmin >= 0.0:
                    break
                if vmat[s, kmin, kmin] <= 0.0:
                    status[s] = CF_BAD_DIAGONAL
                    break
                num = 0.0
                for j in range(d):
                    if j != kmin:
                        num += vmat[s, kmin, j] * factors[s, j]
                factors[s, kmin] = -num / vmat[s, kmin, kmin]
                it += 1
            iters[s] = it
        return factors, iters, status

    @njit(cache=True, nogil=True)
    def _popcount(x):  # pragma: no cover - compiled
        c = 0
        while x:
            c += x & 1
            x >>= 1
        return c

    @njit(cache=True, nogil=True)
    def _solve_free(a, b, nf):  # pragma: no cover - compiled
        # Gaussian elimination with partial pivoting on the leading nf block.
        amax = 1.0
        for r in range(nf):
            for c in range(nf):
                if abs(a[r, c]) > amax:
                    amax = abs(a[r, c])
        tol = 1e-13 * amax
        for col in range(nf):
            piv = col
            pmax = abs(a[col, col])
            for r in range(col + 1, nf):
                if abs(a[r, col]) > pmax:
                    pmax = abs(a[r, col])
                    piv = r
            if pmax <= tol:
                return False
            if piv != col:
                for c in range(col, nf):
                    tmp = a[col, c]
                    a[col, c] = a[piv, c]
                    a[piv, c] = tmp
                tmp = b[col]
                b[col] = b[piv]
                b[piv] = tmp
            for r in range(col + 1, nf):
                f = a[r, col] / a[col, col]
                for c in range(col, nf):
                    a[r, c] -= f * a[col, c]
                b[r] -= f * b[col]
        for col in range(nf - 1, -1, -1):
            acc = b[col]
            for c in range(col + 1, nf):
                acc -= a[col, c] * b[c]
            b[col] = acc / a[col, col]
        return True

    @njit(cache=True, nogil=True)
    def _oracle_solve_batch_nb(vmat, exploit, feas_tol, tie_tol):  # pragma: no cover - compiled
        n, d, _ = vmat.shape
        factors = np.ones((n, d))
        objective = np.zeros(n)
        pinned_mask = np.zeros(n, dtype=np.int64)
        status = np.zeros(n, dtype=np.int64)
        o_idx = np.empty(d, dtype=np.int64)
        free = np.empty(d, dtype=np.int64)
        a = np.empty((d, d))
        b = np.empty(d)
        omega = np.empty(d)
        q = np.empty(d)
        best = np.empty(d)
        for s in range(n):
            no = 0
            for i in range(d):
                if exploit[s, i]:
                    o_idx[no] = i
                    no += 1
            best_obj = np.inf
            best_mask = -1
            found = False
            for card in range(no + 1):
                for mask in range(1 << no):
                    if _popcount(mask) != card:
                        continue
                    nf = 0
                    for bit in range(no):
                        if (mask >> bit) & 1 == 0:
                            free[nf] = o_idx[bit]
                            nf += 1
                    for i in range(d):
                        omega[i] = 1.0
                    if nf > 0:
                        for r in range(nf):
                            rhs = 0.0
                            for j in range(d):
                                rhs -= vmat[s, free[r], j]
                            for c in range(nf):
                                a[r, c] = vmat[s, free[r], free[c]]
                                rhs += vmat[s, free[r], free[c]]
                            b[r] = rhs
                        if not _solve_free(a, b, nf):
                            continue
                        ok = True
                        for r in range(nf):
                            if b[r] < 1.0 - feas_tol:
                                ok = False
                                break
                        if not ok:
                            continue
                        for r in range(nf):
                            omega[free[r]] = b[r]
                    # multiplier signs on the pinned exploitable coordinates
                    ok = True
                    obj = 0.0
                    for i in range(d):
                        qi = 0.0
                        for j in range(d):
                            qi += vmat[s, i, j] * omega[j]
                        q[i] = qi
                        obj += omega[i] * qi
                    for bit in range(no):
                        if (mask >> bit) & 1 and q[o_idx[bit]] < -feas_tol:
                            ok = False
                            break
                    if not ok:
                        continue
                    if obj < best_obj - tie_tol:
                        best_obj = obj
                        best_mask = mask
                        found = True
                        for i in range(d):
                            best[i] = omega[i]
            if not found or best_obj <= 0.0:
                status[s] = ORACLE_NO_CANDIDATE
                continue
            for i in range(d):
                factors[s, i] = best[i]
            objective[s] = best_obj
            pinned_mask[s] = best_mask
        return factors, objective, pinned_mask, status

    def _oracle_solve_batch_numba(vmat, exploit):
        return _oracle_solve_batch_nb(vmat, exploit, _FEAS_TOL, _TIE_TOL)


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_IMPL: dict[str, object] = {}
_ACTIVE: str | None = None


def _bind(name: str) -> None:
    global _ACTIVE
    if name == "numba":
        if not _HAVE_NUMBA:
            raise RuntimeError("SLP_BACKEND=numba but numba is not importable")
        _IMPL["cf"] = _cf_solve_batch_nb
        _IMPL["oracle"] = _oracle_solve_batch_numba
    elif name == "numpy":
        _IMPL["cf"] = _cf_solve_batch_np
        _IMPL["oracle"] = _oracle_solve_batch_np
    else:
        raise ValueError(f"unknown backend {name!r}")
    _ACTIVE = name


def _resolve() -> None:
    if _ACTIVE is None:
        requested = os.environ.get("SLP_BACKEND", "auto").strip().lower()
        if requested == "auto":
            _bind("numba" if _HAVE_NUMBA else "numpy")
        else:
            _bind(requested)


def active_backend() -> str:
    """Name of the kernel implementation currently in use."""
    _resolve()
    assert _ACTIVE is not None
    return _ACTIVE


def set_backend(name: str) -> str:
    """Force a backend ("numba" or "numpy"); returns the previous one."""
    previous = active_backend()
    _bind(name)
    return previous


def _as_kernel_args(vmat: np.ndarray, exploit: np.ndarray):
    vmat = np.ascontiguousarray(vmat, dtype=np.float64)
    if vmat.ndim != 3 or vmat.shape[1] != vmat.shape[2]:
        raise ValueError("vmat must be a stack of square matrices")
    exploit = np.ascontiguousarray(exploit.astype(bool))
    if exploit.shape != vmat.shape[:2]:
        raise ValueError("exploit mask shape does not match vmat")
    return vmat, exploit


def cf_solve_batch(vmat: np.ndarray, exploit: np.ndarray, r_max: int):
    """Greedy coordinate updates on a batch of coupling matrices.

    Starting from all-ones factors, each iteration recomputes
    ``q = V @ factors``, finds the most negative exploitable entry (lowest
    index on ties) and moves that factor to its exact line minimum, which
    zeroes its entry of ``q``.  Stops after ``r_max`` iterations or when no
    exploitable entry is negative.

    Returns ``(factors, iterations, status)``.
    """
    if r_max < 0:
        raise ValueError("iteration cap must be >= 0")
    vmat, exploit = _as_kernel_args(vmat, exploit)
    _resolve()
    return _IMPL["cf"](vmat, exploit, r_max)


def oracle_solve_batch(vmat: np.ndarray, exploit: np.ndarray):
    """Exact solution of the scale-reduced program on a batch.

    Minimizes ``f^T V f`` subject to ``f >= 1`` on exploitable indices and
    ``f = 1`` elsewhere, by enumerating pinned subsets of the exploitable
    set in order of increasing cardinality.  For each subset the free block
    is solved for stationarity; a candidate is kept when the free factors
    are feasible and the pinned coordinates have nonnegative multipliers.
    The minimum objective wins; ties within 1e-12 keep the earlier (hence
    smaller) pinned set.

    Returns ``(factors, objective, pinned_mask, status)`` where
    ``pinned_mask`` packs the chosen subset as bits over the exploitable
    indices in ascending order.
    """
    vmat, exploit = _as_kernel_args(vmat, exploit)
    if vmat.shape[1] > 16:
        raise ValueError("reference solver is limited to 2K <= 16")
    _resolve()
    return _IMPL["oracle"](vmat, exploit)
