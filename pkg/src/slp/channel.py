"""Geometric multipath MISO channel generation.

A block holds one channel matrix ``H`` (rows are the users' transposed
channel vectors), its cached Gram inverse and the pair-expanded inverse
Gram used by the per-slot solvers.  Between blocks, path gains follow a
first-order autoregression and the gridded departure angles take a lazy
random walk (stay with probability 0.8, step one grid cell either way with
probability 0.1 each, wrapping).  Within a block the channel is constant.

Complex Gaussian draws use independent real/imaginary parts with variance
``sigma2 / 2`` each.  Angle-grid values that land outside [-pi, pi) are
wrapped back into that range.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ci import merge_matrix

__all__ = [
    "ChannelConfig",
    "ChannelBlock",
    "PathState",
    "steering",
    "aod_grid",
    "evolve_gain",
    "gen_block",
    "block_from_h",
    "save_fixture",
    "load_fixture",
]

log = logging.getLogger(__name__)

# Rank-deficiency guard on H H^H; regenerate rather than regularize so the
# closed-form precoder stays exact.
_COND_LIMIT = 1e12
_MAX_REGEN = 100

_WALK_STAY = 0.8
_WALK_STEP = 0.1


@dataclass(frozen=True)
class ChannelConfig:
    """Dimensions and statistics of the generated channels.

    ``mt`` defaults to ``k`` (square system).  ``sigma2`` defaults to
    ``1 / paths`` so each user's channel has unit average energy.
    """

    k: int
    mt: int | None = None
    paths: int = 4
    n_grid: int = 64
    p: float = 0.9
    sigma2: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mt is None:
            object.__setattr__(self, "mt", self.k)
        if self.sigma2 is None:
            object.__setattr__(self, "sigma2", 1.0 / self.paths)
        if self.k < 1 or self.mt < 1 or self.paths < 1 or self.n_grid < 1:
            raise ValueError("k, mt, paths and n_grid must all be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"correlation must lie in [0, 1], got {self.p}")
        if self.sigma2 <= 0.0:
            raise ValueError("sigma2 must be positive")


@dataclass(frozen=True)
class PathState:
    """Per-path gains and angle-grid indices carried across blocks."""

    gains: np.ndarray  # (K, L) complex
    grid_idx: np.ndarray  # (K, L) int, 1-based grid cells


@dataclass(frozen=True)
class ChannelBlock:
    """One transmission block's channel and cached solver inputs."""

    h: np.ndarray  # (K, Mt) complex, row k is user k's transposed channel
    gram_inv: np.ndarray  # (K, K) inverse of H H^H, hermitized
    pair_gram: np.ndarray  # (2K, 2K) merge^T gram_inv merge
    block_index: int = 0
    regen_count: int = 0
    hinv: np.ndarray = field(init=False)  # (Mt, K) right pseudo-inverse H^H gram_inv

    def __post_init__(self) -> None:
        object.__setattr__(self, "hinv", self.h.conj().T @ self.gram_inv)

    @property
    def k(self) -> int:
        return self.h.shape[0]

    @property
    def mt(self) -> int:
        return self.h.shape[1]


def steering(mt: int, theta: float) -> np.ndarray:
    """Unit-norm ULA steering vector for a normalized departure angle."""
    if mt < 1:
        raise ValueError("antenna count must be positive")
    return np.exp(1j * theta * np.arange(mt)) / np.sqrt(mt)


def aod_grid(n: int) -> np.ndarray:
    """Centers of ``n`` uniform angle cells, wrapped into [-pi, pi)."""
    if n < 1:
        raise ValueError("grid size must be positive")
    raw = 2.0 * np.pi * np.arange(n) / n + np.pi / n
    return np.mod(raw + np.pi, 2.0 * np.pi) - np.pi


def _crandn(rng: np.random.Generator, shape: tuple[int, ...], sigma2: float) -> np.ndarray:
    scale = np.sqrt(sigma2 / 2.0)
    return rng.normal(0.0, scale, shape) + 1j * rng.normal(0.0, scale, shape)


def evolve_gain(alpha_prev: complex | np.ndarray, p: float, sigma2: float, rng: np.random.Generator):
    """One autoregressive step: ``p * alpha + noise`` with stationary variance ``sigma2``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("correlation must lie in [0, 1]")
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    alpha_prev = np.asarray(alpha_prev, dtype=np.complex128)
    eta = _crandn(rng, alpha_prev.shape, (1.0 - p * p) * sigma2)
    out = p * alpha_prev + eta
    return complex(out) if out.shape == () else out


def _walk_indices(idx: np.ndarray, n_grid: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(idx.shape)
    step = np.where(u < _WALK_STEP, -1, np.where(u < 2 * _WALK_STEP, 1, 0))
    return (idx - 1 + step) % n_grid + 1


def _assemble_h(cfg: ChannelConfig, state: PathState) -> np.ndarray:
    grid = aod_grid(cfg.n_grid)
    thetas = grid[state.grid_idx - 1]  # (K, L)
    arange = np.arange(cfg.mt)
    steer = np.exp(1j * thetas[..., None] * arange) / np.sqrt(cfg.mt)  # (K, L, Mt)
    return np.einsum("kl,klm->km", state.gains, steer)


def block_from_h(h: np.ndarray, block_index: int = 0, regen_count: int = 0) -> ChannelBlock:
    """Build the cached solver inputs for a given channel matrix.

    Raises if ``H H^H`` is numerically rank-deficient.
    """
    h = np.asarray(h, dtype=np.complex128)
    gram = h @ h.conj().T
    if np.linalg.cond(gram) > _COND_LIMIT:
        raise np.linalg.LinAlgError("channel Gram matrix is numerically rank-deficient")
    gram_inv = np.linalg.inv(gram)
    gram_inv = 0.5 * (gram_inv + gram_inv.conj().T)  # keep Hermitian to machine precision
    u = merge_matrix(h.shape[0])
    pair_gram = u.T @ gram_inv @ u
    return ChannelBlock(
        h=h, gram_inv=gram_inv, pair_gram=pair_gram, block_index=block_index, regen_count=regen_count
    )


def gen_block(
    cfg: ChannelConfig,
    prev: PathState | None = None,
    rng: np.random.Generator | None = None,
    block_index: int | None = None,
) -> tuple[ChannelBlock, PathState]:
    """Generate one channel block, fresh or evolved from ``prev``.

    Rank-deficient draws are regenerated from fresh path parameters; the
    number of retries is reported on the returned block.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if block_index is None:
        block_index = 0

    def draw_fresh() -> PathState:
        return PathState(
            gains=_crandn(rng, (cfg.k, cfg.paths), cfg.sigma2),
            grid_idx=rng.integers(1, cfg.n_grid + 1, size=(cfg.k, cfg.paths)),
        )

    if prev is None:
        state = draw_fresh()
    else:
        state = PathState(
            gains=evolve_gain(prev.gains, cfg.p, cfg.sigma2, rng),
            grid_idx=_walk_indices(prev.grid_idx, cfg.n_grid, rng),
        )

    regen = 0
    while True:
        try:
            block = block_from_h(_assemble_h(cfg, state), block_index=block_index, regen_count=regen)
            if regen:
                log.debug("block %d regenerated %d time(s)", block_index, regen)
            return block, state
        except np.linalg.LinAlgError:
            regen += 1
            if regen > _MAX_REGEN:
                raise RuntimeError(
                    f"channel generation failed: {regen} rank-deficient draws in a row "
                    f"(k={cfg.k}, paths={cfg.paths}, n_grid={cfg.n_grid})"
                ) from None
            state = draw_fresh()


def save_fixture(path: str, h: np.ndarray) -> None:
    """Write a channel matrix as text: header ``K Mt``, then ``re im`` rows."""
    h = np.asarray(h, dtype=np.complex128)
    k, mt = h.shape
    lines = [f"{k} {mt}"]
    for value in h.ravel():  # row-major
        lines.append(f"{value.real:.17g} {value.imag:.17g}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_fixture(path: str) -> np.ndarray:
    """Read a channel matrix written by :func:`save_fixture`."""
    with open(path, "r", encoding="ascii") as fh:
        tokens = fh.read().split()
    k, mt = int(tokens[0]), int(tokens[1])
    flat = np.array([float(t) for t in tokens[2:]], dtype=np.float64)
    if flat.size != 2 * k * mt:
        raise ValueError(f"fixture {path!r} has {flat.size} values, expected {2 * k * mt}")
    return (flat[0::2] + 1j * flat[1::2]).reshape(k, mt)
