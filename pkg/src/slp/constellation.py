"""Modulation geometry and threshold decomposition for PSK and square QAM.

Every symbol is split into two components lying on the directions of its
detection thresholds.  A per-component flag records whether pushing the
received point further out along that direction still lands inside the
correct decision region (an "exploitable" component) or whether the region
is bounded and the component must stay put (a "fixed" component).  PSK
regions are unbounded sectors, so both components are always exploitable.
For square QAM only the outermost coordinate levels are unbounded.

Gray labeling (deterministic, used for bit-error counting):

* PSK: point ``c`` (1-based) carries the reflected Gray code of ``c - 1``.
* QAM: the real and imaginary coordinate levels are indexed in ascending
  order and Gray-coded independently; the real-axis bits form the high
  half of the label, the imaginary-axis bits the low half.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConstellationSpec",
    "SymbolDecomposition",
    "make_spec",
    "psk_spec",
    "qam_spec",
    "psk_point",
    "decompose_psk",
    "decompose_qam",
    "decompose_many",
    "detect",
    "detect_many",
    "bit_distance_table",
]

# Exploitability comparisons against the outermost coordinate magnitude.
# Points are constructed exactly, so an absolute tolerance is safe.
_COORD_TOL = 1e-9


def _gray(i: int) -> int:
    return i ^ (i >> 1)


def _check_order(m: int) -> None:
    if m < 4 or (m & (m - 1)) != 0:
        raise ValueError(f"constellation order must be a power of two >= 4, got {m}")


@dataclass(frozen=True)
class ConstellationSpec:
    """Immutable description of one modulation.

    ``points`` has unit average power.  ``bit_labels[c - 1]`` is the integer
    Gray label of point ``c`` (1-based point indices throughout).
    ``max_coord`` is the largest per-axis coordinate magnitude (QAM only).
    """

    kind: str  # "psk" | "qam"
    order: int
    points: np.ndarray
    bit_labels: np.ndarray
    max_coord: float | None = None
    bits_per_symbol: int = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "bits_per_symbol", int(math.log2(self.order)))
        power = float(np.mean(np.abs(self.points) ** 2))
        if abs(power - 1.0) > 1e-12:
            raise ValueError(f"constellation not normalized: mean power {power!r}")

    def point_index(self, s: complex) -> int:
        """1-based index of an exact constellation point (1e-9 tolerance)."""
        d = np.abs(self.points - s)
        c = int(np.argmin(d))
        if d[c] > _COORD_TOL:
            raise ValueError(f"{s!r} is not a point of this {self.order}-{self.kind.upper()} constellation")
        return c + 1


@dataclass(frozen=True)
class SymbolDecomposition:
    """One symbol split along its two detection-threshold directions."""

    s_a: complex
    s_b: complex
    a_exploitable: bool
    b_exploitable: bool


def psk_point(m: int, c: int) -> complex:
    """Point ``c`` (1-based) of the M-PSK ring, offset by pi/4."""
    _check_order(m)
    if not 1 <= c <= m:
        raise ValueError(f"point index must be in 1..{m}, got {c}")
    return complex(np.exp(1j * (2.0 * np.pi * (c - 1) / m + np.pi / 4.0)))


def psk_spec(m: int) -> ConstellationSpec:
    _check_order(m)
    points = np.exp(1j * (2.0 * np.pi * np.arange(m) / m + np.pi / 4.0))
    labels = np.array([_gray(i) for i in range(m)], dtype=np.int64)
    return ConstellationSpec(kind="psk", order=m, points=points, bit_labels=labels)


def qam_spec(m: int) -> ConstellationSpec:
    """Square M-QAM on the grid {+-1, +-3, ...} scaled to unit average power."""
    _check_order(m)
    side = math.isqrt(m)
    if side * side != m:
        raise ValueError(f"QAM order must be a perfect square, got {m}")
    levels = 2.0 * np.arange(side) - (side - 1)  # ascending odd integers
    scale = 1.0 / math.sqrt(2.0 * (side * side - 1) / 3.0)  # E|s|^2 = 1
    re, im = np.meshgrid(levels, levels, indexing="ij")
    points = (re + 1j * im).ravel() * scale
    half = side.bit_length() - 1
    labels = np.array(
        [(_gray(i) << half) | _gray(j) for i in range(side) for j in range(side)],
        dtype=np.int64,
    )
    return ConstellationSpec(
        kind="qam", order=m, points=points, bit_labels=labels, max_coord=float(levels[-1] * scale)
    )


def make_spec(modulation: str) -> ConstellationSpec:
    """Build a spec from a config string such as "qpsk", "8psk" or "16qam"."""
    name = modulation.strip().lower()
    if name == "qpsk":
        return psk_spec(4)
    if name.endswith("psk"):
        return psk_spec(int(name[:-3]))
    if name.endswith("qam"):
        return qam_spec(int(name[:-3]))
    raise ValueError(f"unknown modulation {modulation!r}")


def decompose_psk(m: int, s: complex) -> SymbolDecomposition:
    """Split an M-PSK symbol along its two neighbouring sector edges."""
    _check_order(m)
    if m == 2:
        raise ValueError("BPSK has a single threshold; order 2 is unsupported")
    denom = 2.0 * math.cos(math.pi / m)
    rot = np.exp(1j * np.pi / m)
    return SymbolDecomposition(
        s_a=complex(s * rot / denom),
        s_b=complex(s / rot / denom),
        a_exploitable=True,
        b_exploitable=True,
    )


def decompose_qam(spec: ConstellationSpec, s: complex) -> SymbolDecomposition:
    """Split a QAM symbol into its real and imaginary coordinate parts."""
    if spec.kind != "qam":
        raise ValueError("decompose_qam needs a QAM spec")
    spec.point_index(s)  # raises if s is off the grid
    assert spec.max_coord is not None
    return SymbolDecomposition(
        s_a=complex(s.real),
        s_b=complex(1j * s.imag),
        a_exploitable=abs(abs(s.real) - spec.max_coord) <= _COORD_TOL,
        b_exploitable=abs(abs(s.imag) - spec.max_coord) <= _COORD_TOL,
    )


def decompose(spec: ConstellationSpec, s: complex) -> SymbolDecomposition:
    if spec.kind == "psk":
        return decompose_psk(spec.order, s)
    return decompose_qam(spec, s)


def decompose_many(spec: ConstellationSpec, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized decomposition of an array of symbols.

    Returns ``(comps, exploitable)`` where ``comps[..., 0]`` / ``[..., 1]``
    are the two threshold components and ``exploitable`` is the matching
    boolean pair.  Agrees elementwise with the scalar functions.
    """
    s = np.asarray(s, dtype=np.complex128)
    comps = np.empty(s.shape + (2,), dtype=np.complex128)
    if spec.kind == "psk":
        m = spec.order
        denom = 2.0 * math.cos(math.pi / m)
        rot = np.exp(1j * np.pi / m)
        comps[..., 0] = s * rot / denom
        comps[..., 1] = s / rot / denom
        exploitable = np.ones(s.shape + (2,), dtype=bool)
    else:
        assert spec.max_coord is not None
        comps[..., 0] = s.real
        comps[..., 1] = 1j * s.imag
        exploitable = np.empty(s.shape + (2,), dtype=bool)
        exploitable[..., 0] = np.abs(np.abs(s.real) - spec.max_coord) <= _COORD_TOL
        exploitable[..., 1] = np.abs(np.abs(s.imag) - spec.max_coord) <= _COORD_TOL
    return comps, exploitable


def detect_many(spec: ConstellationSpec, y: np.ndarray, t_ref: np.ndarray | float | None = None) -> np.ndarray:
    """Hard decisions for an array of received samples (1-based indices).

    PSK decides by phase sector; ``t_ref`` is ignored.  QAM decides by the
    nearest point of the constellation scaled by ``t_ref`` (broadcast over
    ``y``), which is the receiver-side reference for the slot's common
    scaling.  Ties go to the lowest point index.
    """
    y = np.asarray(y, dtype=np.complex128)
    if spec.kind == "psk":
        diff = np.angle(y)[..., None] - np.angle(spec.points)
        diff = np.mod(diff + np.pi, 2.0 * np.pi) - np.pi
        return np.argmin(np.abs(diff), axis=-1) + 1
    if t_ref is None:
        raise ValueError("QAM detection needs the slot scaling reference t_ref")
    t = np.asarray(t_ref, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("t_ref must be positive")
    grid = t[..., None] * spec.points
    return np.argmin(np.abs(y[..., None] - grid), axis=-1) + 1


def detect(spec: ConstellationSpec, y: complex, t_ref: float | None = None) -> int:
    """Hard decision for one received sample; see :func:`detect_many`."""
    return int(detect_many(spec, np.asarray(y), None if t_ref is None else float(t_ref)))


def bit_distance_table(spec: ConstellationSpec) -> np.ndarray:
    """(M, M) table of Hamming distances between point labels."""
    x = spec.bit_labels[:, None] ^ spec.bit_labels[None, :]
    table = np.zeros_like(x)
    while np.any(x):
        table += x & 1
        x >>= 1
    return table.astype(np.int64)
