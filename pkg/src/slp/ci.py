"""Shared algebra for scaling-factor precoding within one transmission block.

Each user's symbol contributes two threshold components, stored
interleaved: entries ``2k`` and ``2k + 1`` (0-based) of every length-2K
vector belong to user ``k``.  A slot bundles the symbols, their stacked
components, the reciprocal symbols used by the precoder assembly, and the
exploitable/fixed index bookkeeping.

The quadratic coupling between scaling factors is
``diag(conj(comps)) @ pair_gram @ diag(comps)``; its real part drives all
solvers.  For a new slot in the same block it can be obtained two ways:
directly from the cached pair-expanded inverse Gram (valid for every
modulation), or by a diagonal congruence with the per-user symbol ratios
(valid for PSK, where the decomposition commutes with phase rotation).
Both paths are implemented; the direct one is the default everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constellation import ConstellationSpec, decompose_many

__all__ = [
    "SymbolSlot",
    "SlotBatch",
    "SlotTransform",
    "SlotCoupling",
    "merge_matrix",
    "build_slot",
    "build_slots",
    "slot_transform",
    "slot_coupling",
    "extrapolate_coupling_psk",
    "extrapolate_coupling_qam",
    "coupling_many",
]


@dataclass(frozen=True)
class SymbolSlot:
    """Symbols of one slot with their threshold decomposition."""

    symbols: np.ndarray  # (K,) complex
    comps: np.ndarray  # (2K,) complex, interleaved per user
    recip: np.ndarray  # (K,) complex, 1 / symbols
    exploit_idx: np.ndarray  # sorted 0-based indices into comps
    fixed_idx: np.ndarray  # complement of exploit_idx
    exploit_mask: np.ndarray  # (2K,) float, 1.0 on exploit_idx

    @property
    def k(self) -> int:
        return self.symbols.shape[0]


@dataclass(frozen=True)
class SlotBatch:
    """Vectorized form of many slots sharing one block."""

    symbols: np.ndarray  # (N, K) complex
    comps: np.ndarray  # (N, 2K) complex
    recip: np.ndarray  # (N, K) complex
    exploit_mask: np.ndarray  # (N, 2K) float

    def slot(self, i: int) -> SymbolSlot:
        mask = self.exploit_mask[i] > 0.5
        idx = np.arange(mask.size)
        return SymbolSlot(
            symbols=self.symbols[i],
            comps=self.comps[i],
            recip=self.recip[i],
            exploit_idx=idx[mask],
            fixed_idx=idx[~mask],
            exploit_mask=self.exploit_mask[i],
        )


@dataclass(frozen=True)
class SlotTransform:
    """Per-user complex ratios mapping one slot's symbols onto another's."""

    a_diag: np.ndarray  # (K,) complex


@dataclass(frozen=True)
class SlotCoupling:
    """Quadratic coupling of one slot's 2K scaling factors."""

    tmat: np.ndarray  # (2K, 2K) complex Hermitian PSD
    vmat: np.ndarray  # (2K, 2K) real part of tmat, symmetric PSD


def merge_matrix(k: int) -> np.ndarray:
    """(K, 2K) selector summing each user's two threshold components."""
    if k < 1:
        raise ValueError("user count must be positive")
    return np.kron(np.eye(k), np.ones((1, 2)))


def build_slots(spec: ConstellationSpec, symbols: np.ndarray) -> SlotBatch:
    """Decompose an (N, K) array of symbols into a slot batch.

    Raises for symbols that are not constellation points.
    """
    symbols = np.atleast_2d(np.asarray(symbols, dtype=np.complex128))
    dist = np.abs(symbols[..., None] - spec.points).min(axis=-1)
    if np.any(dist > 1e-9):
        bad = symbols[np.unravel_index(int(np.argmax(dist)), symbols.shape)]
        raise ValueError(f"{bad!r} is not a point of this {spec.order}-{spec.kind.upper()} constellation")
    comps, exploitable = decompose_many(spec, symbols)
    n, k = symbols.shape
    return SlotBatch(
        symbols=symbols,
        comps=comps.reshape(n, 2 * k),
        recip=1.0 / symbols,
        exploit_mask=exploitable.reshape(n, 2 * k).astype(np.float64),
    )


def build_slot(spec: ConstellationSpec, symbols: np.ndarray) -> SymbolSlot:
    """Decompose one slot's K symbols."""
    return build_slots(spec, np.asarray(symbols, dtype=np.complex128)[None, :]).slot(0)


def slot_transform(from_slot: SymbolSlot, to_slot: SymbolSlot) -> SlotTransform:
    """Elementwise symbol ratios from one slot to another."""
    if from_slot.k != to_slot.k:
        raise ValueError("slots must have the same user count")
    return SlotTransform(a_diag=to_slot.symbols / from_slot.symbols)


def _coupling_from(pair_gram: np.ndarray, comps: np.ndarray) -> SlotCoupling:
    tmat = comps.conj()[:, None] * pair_gram * comps[None, :]
    return SlotCoupling(tmat=tmat, vmat=tmat.real.copy())


def slot_coupling(pair_gram: np.ndarray, slot: SymbolSlot) -> SlotCoupling:
    """Coupling computed directly from the block's pair-expanded inverse Gram."""
    if pair_gram.shape[0] != slot.comps.shape[0]:
        raise ValueError("pair_gram dimension does not match the slot")
    return _coupling_from(pair_gram, slot.comps)


def extrapolate_coupling_psk(coupling_n: SlotCoupling, transform: SlotTransform) -> SlotCoupling:
    """Coupling of a PSK target slot via congruence with the symbol ratios.

    Valid because a PSK decomposition rotates with its symbol, so the
    target components are the reference components scaled per user.
    """
    a_pairs = np.repeat(transform.a_diag, 2)
    tmat = a_pairs.conj()[:, None] * coupling_n.tmat * a_pairs[None, :]
    return SlotCoupling(tmat=tmat, vmat=tmat.real.copy())


def extrapolate_coupling_qam(pair_gram: np.ndarray, target_slot: SymbolSlot) -> SlotCoupling:
    """Coupling of any target slot from the block-cached pair Gram.

    This is the default extrapolation path for every modulation; it needs
    no reference slot.
    """
    return slot_coupling(pair_gram, target_slot)


def coupling_many(pair_gram: np.ndarray, comps: np.ndarray) -> np.ndarray:
    """Real coupling matrices for a batch: (N, 2K) comps -> (N, 2K, 2K)."""
    tmat = comps.conj()[:, :, None] * pair_gram[None, :, :] * comps[:, None, :]
    return np.ascontiguousarray(tmat.real)
