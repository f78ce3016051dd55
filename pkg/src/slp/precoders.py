"""Per-slot solvers for the scaling factors and precoder assembly.

Two closed-form solvers share the coupling matrix ``V`` of a slot:

* ``cf_solve``: greedy coordinate updates, one factor per iteration, driven
  by the most negative exploitable entry of ``V @ factors``;
* ``sub_solve``: a single simultaneous update of all factors, clipped at 1,
  with fixed factors forced back to 1.

Factors start at 1 and only grow, so the per-user margins never shrink
below the all-ones baseline.  After solving, the factors are rescaled so
the transmit vector meets the power budget exactly, and the precoding
matrix is assembled from the closed-form rank-one structure
``(1/K) hinv merge diag(factors) comps recip^T``.  With all-ones factors
this collapses to plain channel inversion, which is also what the ZF
baseline computes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .channel import ChannelBlock
from .ci import SlotCoupling, SymbolSlot, extrapolate_coupling_qam, merge_matrix
from .constellation import ConstellationSpec

__all__ = [
    "DegenerateSlotError",
    "ScalingState",
    "Precoder",
    "METHODS",
    "cf_solve",
    "cf_solve_trace",
    "sub_solve",
    "normalize",
    "assemble_precoder",
    "zf_precoder",
    "precode_block",
]

METHODS = ("zf", "cf", "sub", "opt", "net")


class DegenerateSlotError(RuntimeError):
    """A slot's coupling matrix cannot support the requested operation."""


@dataclass
class ScalingState:
    """Solver output for one slot.

    ``factors`` are the raw scaling factors (all >= 1), ``qvec`` the value
    of ``V @ factors`` at termination.  ``norm_factor`` and
    ``factors_norm`` are filled by :func:`normalize`.
    """

    factors: np.ndarray
    qvec: np.ndarray
    iterations_used: int
    norm_factor: float | None = None
    factors_norm: np.ndarray | None = None


@dataclass(frozen=True)
class Precoder:
    w: np.ndarray  # (Mt, K) complex
    slot_index: int = 0


def _vmat(v: SlotCoupling | np.ndarray) -> np.ndarray:
    if isinstance(v, SlotCoupling):
        return v.vmat
    return np.asarray(v, dtype=np.float64)


def _idx_to_mask(d: int, idx: np.ndarray) -> np.ndarray:
    mask = np.zeros(d, dtype=bool)
    mask[np.asarray(idx, dtype=np.int64)] = True
    return mask


def cf_solve(v: SlotCoupling | np.ndarray, exploit_idx: np.ndarray, r_max: int) -> ScalingState:
    """Greedy coordinate solver, at most ``r_max`` single-factor updates.

    An empty exploitable set returns the all-ones factors untouched.
    """
    vm = _vmat(v)
    mask = _idx_to_mask(vm.shape[0], exploit_idx)
    factors, iters, status = backend.cf_solve_batch(vm[None], mask[None], r_max)
    if status[0] != backend.CF_OK:
        raise DegenerateSlotError("nonpositive diagonal at the selected coordinate")
    f = factors[0]
    return ScalingState(factors=f, qvec=vm @ f, iterations_used=int(iters[0]))


def cf_solve_trace(v: SlotCoupling | np.ndarray, exploit_idx: np.ndarray, r_max: int) -> list[dict]:
    """Instrumented replay of :func:`cf_solve` for invariant checks.

    Returns one record per executed iteration with the pre-update ``qvec``,
    the selected coordinate and the factors after the update.  The final
    factors equal the fast path's output exactly in exact arithmetic and to
    rounding error in practice.
    """
    vm = _vmat(v)
    d = vm.shape[0]
    mask = _idx_to_mask(d, exploit_idx)
    factors = np.ones(d)
    steps: list[dict] = []
    if not mask.any():
        return steps
    for _ in range(r_max):
        q = vm @ factors
        q_l = np.where(mask, q, np.inf)
        k = int(np.argmin(q_l))
        if q_l[k] >= 0.0:
            break
        factors[k] = -(vm[k] @ factors - vm[k, k] * factors[k]) / vm[k, k]
        steps.append({"q_before": q, "index": k, "factors": factors.copy()})
    return steps


def sub_solve(v: SlotCoupling | np.ndarray, fixed_idx: np.ndarray) -> ScalingState:
    """One-shot simultaneous update of all factors.

    From the all-ones start, each factor moves to
    ``max(-(q - diag) / (2 diag), 1)`` elementwise; fixed factors are then
    forced back to 1.
    """
    vm = _vmat(v)
    d = vm.shape[0]
    diag = np.diag(vm).copy()
    if np.any(diag <= 0.0):
        raise DegenerateSlotError("coupling matrix has a nonpositive diagonal")
    q = vm @ np.ones(d)
    factors = np.maximum(-(q - diag) / (2.0 * diag), 1.0)
    factors[np.asarray(fixed_idx, dtype=np.int64)] = 1.0
    return ScalingState(factors=factors, qvec=vm @ factors, iterations_used=1)


def normalize(v: SlotCoupling | np.ndarray, factors: np.ndarray, p0: float) -> tuple[float, np.ndarray]:
    """Rescale factors so the slot's transmit power equals ``p0`` exactly."""
    vm = _vmat(v)
    quad = float(factors @ vm @ factors)
    if quad <= 0.0:
        raise DegenerateSlotError(f"factor quadratic form is {quad!r}, cannot normalize")
    norm_factor = float(np.sqrt(quad))
    return norm_factor, np.sqrt(p0) * factors / norm_factor


def assemble_precoder(
    block: ChannelBlock, merge: np.ndarray, slot: SymbolSlot, factors_norm: np.ndarray, slot_index: int = 0
) -> Precoder:
    """Closed-form rank-one precoder from normalized scaling factors."""
    x = block.hinv @ (merge @ (factors_norm * slot.comps))
    w = np.outer(x, slot.recip) / slot.k
    return Precoder(w=w, slot_index=slot_index)


def zf_precoder(block: ChannelBlock, symbols: np.ndarray, p0: float) -> Precoder:
    """Channel inversion with per-slot power normalization."""
    f_zf = float(np.linalg.norm(block.hinv @ symbols))
    if f_zf <= 0.0:
        raise DegenerateSlotError("zero-norm inverted symbol vector")
    return Precoder(w=np.sqrt(p0) / f_zf * block.hinv)


def _zf_state(block: ChannelBlock, slot: SymbolSlot, p0: float) -> ScalingState:
    # Channel inversion scales every threshold component equally, so it is
    # the all-ones factor point of the closed-form structure.
    f_zf = float(np.linalg.norm(block.hinv @ slot.symbols))
    d = slot.comps.shape[0]
    common = np.sqrt(p0) / f_zf
    return ScalingState(
        factors=np.ones(d),
        qvec=np.zeros(d),
        iterations_used=0,
        norm_factor=f_zf,
        factors_norm=np.full(d, common),
    )


def precode_block(
    block: ChannelBlock,
    spec: ConstellationSpec,
    slots: list[SymbolSlot],
    method: str,
    r_max: int = 5,
    p0: float = 1.0,
    net_params=None,
    return_states: bool = False,
):
    """Precoders for every slot of one block with a single method.

    The block's pair-expanded inverse Gram is reused across slots; each
    slot only pays for its own coupling matrix and factor solve.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    merge = merge_matrix(block.k)
    precoders: list[Precoder] = []
    states: list[ScalingState] = []
    for i, slot in enumerate(slots):
        if slot.k != block.k:
            raise ValueError("slot user count does not match the block")
        if method == "zf":
            state = _zf_state(block, slot, p0)
            precoders.append(Precoder(w=zf_precoder(block, slot.symbols, p0).w, slot_index=i))
            states.append(state)
            continue
        coupling = extrapolate_coupling_qam(block.pair_gram, slot)
        if method == "cf":
            state = cf_solve(coupling, slot.exploit_idx, r_max)
        elif method == "sub":
            state = sub_solve(coupling, slot.fixed_idx)
        elif method == "opt":
            from .oracle import solve_reference

            sol = solve_reference(coupling, slot.exploit_idx, slot.fixed_idx, p0)
            state = ScalingState(
                factors=sol.reduced,
                qvec=coupling.vmat @ sol.reduced,
                iterations_used=0,
                norm_factor=float(np.sqrt(sol.objective)),
                factors_norm=sol.factors,
            )
        else:  # net
            from .net import forward

            if net_params is None:
                raise ValueError("method 'net' needs trained parameters")
            y_hat, trace = forward(net_params, coupling.vmat, slot.exploit_mask, p0)
            state = ScalingState(
                factors=trace["omegas"][-1][0],
                qvec=coupling.vmat @ trace["omegas"][-1][0],
                iterations_used=net_params.r,
                norm_factor=float(trace["fnor"][0]),
                factors_norm=y_hat,
            )
        if state.factors_norm is None:
            state.norm_factor, state.factors_norm = normalize(coupling, state.factors, p0)
        precoders.append(assemble_precoder(block, merge, slot, state.factors_norm, slot_index=i))
        states.append(state)
    if return_states:
        return precoders, states
    return precoders
