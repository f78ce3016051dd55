"""Unfolded iterative solver with learned per-layer parameters.

Each of the R layers mirrors one solver iteration:

    omega_r = relu(-V @ omega_{r-1}) * mask * gain_{r-1} + skip_{r-1} * omega_{r-1}

where ``mask`` zeroes the update on fixed factor indices, ``gain_r`` is a
learned per-coordinate step vector and ``skip_r`` a learned scalar carry.
The network output is the power-normalized factor vector, so the training
loss (negated smallest exploitable output entry, averaged over the batch)
is directly comparable with the solvers' margins.  Samples whose
exploitable set is empty are excluded from the batch mean; their count is
tracked in the training history.

Gradients are exact reverse-mode: the min takes a subgradient at its
lowest-index argmin, relu' is taken as 0 at the kink, and the
normalization quotient is differentiated analytically.  Training uses
plain mini-batch ADAM with bias correction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelConfig, gen_block
from .ci import build_slots, coupling_many
from .constellation import make_spec
from .precoders import DegenerateSlotError

__all__ = [
    "NetParams",
    "AdamState",
    "TrainConfig",
    "init_params",
    "forward",
    "forward_batch",
    "loss",
    "backward",
    "backward_batch",
    "adam_step",
    "make_dataset",
    "train",
    "save_params",
    "load_params",
]

log = logging.getLogger(__name__)


@dataclass
class NetParams:
    """Learnable per-layer step gains and carry weights."""

    gain: np.ndarray  # (R, 2K)
    skip: np.ndarray  # (R,)
    modulation: str = ""

    @property
    def r(self) -> int:
        return self.gain.shape[0]

    @property
    def k(self) -> int:
        return self.gain.shape[1] // 2

    @property
    def count(self) -> int:
        return self.gain.size + self.skip.size

    def copy(self) -> "NetParams":
        return NetParams(gain=self.gain.copy(), skip=self.skip.copy(), modulation=self.modulation)


def init_params(k: int, r: int, modulation: str = "") -> NetParams:
    """Start near the identity map: small positive gains, unit carry.

    The identity point reproduces the all-ones factor baseline and keeps
    the relu branch out of its dead region at step zero.
    """
    return NetParams(gain=np.full((r, 2 * k), 0.1), skip=np.ones(r), modulation=modulation)


def forward_batch(params: NetParams, vmat: np.ndarray, mask: np.ndarray, p0: float):
    """Run the unfolded layers on a batch of slots.

    ``vmat`` is (N, 2K, 2K), ``mask`` (N, 2K).  Returns the normalized
    outputs (N, 2K) and the trace needed for the backward pass.
    """
    vmat = np.asarray(vmat, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if vmat.ndim == 2:
        vmat = vmat[None]
    if mask.ndim == 1:
        mask = mask[None]
    n, d, _ = vmat.shape
    omega = np.ones((n, d))
    omegas = [omega]
    zs = []
    for r in range(params.r):
        z = -np.einsum("nij,nj->ni", vmat, omega)
        omega = np.maximum(z, 0.0) * mask * params.gain[r] + params.skip[r] * omega
        zs.append(z)
        omegas.append(omega)
    w = np.einsum("nij,nj->ni", vmat, omega)
    quad = np.einsum("ni,ni->n", omega, w)
    if np.any(quad <= 0.0):
        raise DegenerateSlotError("network output has a nonpositive power quadratic form")
    fnor = np.sqrt(quad)
    y_hat = np.sqrt(p0) * omega / fnor[:, None]
    trace = {
        "omegas": omegas,
        "zs": zs,
        "w": w,
        "fnor": fnor,
        "vmat": vmat,
        "mask": mask,
        "p0": p0,
        "gain": params.gain,
        "skip": params.skip,
    }
    return y_hat, trace


def forward(params: NetParams, vmat: np.ndarray, mask: np.ndarray, p0: float):
    """Single-slot forward pass; returns the normalized factors and trace."""
    y_hat, trace = forward_batch(params, vmat[None], np.asarray(mask, dtype=np.float64)[None], p0)
    return y_hat[0], trace


def _masked_min(y_hat: np.ndarray, mask: np.ndarray):
    """Per-sample smallest exploitable entry and its index (-1 if no O)."""
    has_o = mask.sum(axis=1) > 0.0
    shadow = np.where(mask > 0.5, y_hat, np.inf)
    arg = np.argmin(shadow, axis=1)
    vals = shadow[np.arange(y_hat.shape[0]), arg]
    return np.where(has_o, vals, 0.0), np.where(has_o, arg, -1), has_o


def loss(y_hats: np.ndarray, masks: np.ndarray) -> float:
    """Negated mean of the smallest exploitable output entries.

    Samples with an empty exploitable set are left out of the mean.
    """
    y_hats = np.atleast_2d(np.asarray(y_hats, dtype=np.float64))
    masks = np.atleast_2d(np.asarray(masks, dtype=np.float64))
    vals, _, has_o = _masked_min(y_hats, masks)
    n_inc = int(has_o.sum())
    if n_inc == 0:
        return 0.0
    return float(-vals[has_o].sum() / n_inc)


def backward_batch(trace: dict):
    """Gradients of the batch loss with respect to the layer parameters.

    Differentiates the loss of :func:`loss` through the normalization
    quotient, the min subgradient and the masked relu layers.  Excluded
    samples contribute zero.
    """
    vmat, mask, p0 = trace["vmat"], trace["mask"], trace["p0"]
    omegas, zs, fnor = trace["omegas"], trace["zs"], trace["fnor"]
    gain, skip = trace["gain"], trace["skip"]
    n, d = mask.shape
    r_layers = len(zs)
    omega_out = omegas[-1]
    y_hat = np.sqrt(p0) * omega_out / fnor[:, None]

    _, arg, has_o = _masked_min(y_hat, mask)
    n_inc = int(has_o.sum())
    d_gain = np.zeros((r_layers, d))
    d_skip = np.zeros(r_layers)
    if n_inc == 0:
        return d_gain, d_skip

    g_y = np.zeros((n, d))
    g_y[np.arange(n)[has_o], arg[has_o]] = -1.0 / n_inc

    # through y = sqrt(p0) * omega / fnor with fnor = sqrt(omega^T V omega)
    w = trace["w"]  # V @ omega_out
    dot = np.einsum("ni,ni->n", g_y, omega_out)
    g_omega = np.sqrt(p0) / fnor[:, None] * (g_y - (dot / fnor**2)[:, None] * w)

    # through omega_r = relu(z_r) * mask * gain_{r-1} + skip_{r-1} * omega_{r-1}
    # with z_r = -V @ omega_{r-1}; relu' is 0 at the kink.
    for r in range(r_layers - 1, -1, -1):
        relu = np.maximum(zs[r], 0.0)
        alive = (zs[r] > 0.0).astype(np.float64)
        d_gain[r] = np.einsum("ni,ni->i", g_omega, relu * mask)
        d_skip[r] = float(np.einsum("ni,ni->", g_omega, omegas[r]))
        g_omega = -np.einsum("nji,nj->ni", vmat, g_omega * mask * alive * gain[r]) + skip[r] * g_omega
    return d_gain, d_skip


def backward(trace: dict, vmat: np.ndarray | None = None, mask: np.ndarray | None = None, p0: float | None = None):
    """Gradients of the single-sample loss; inputs are carried in the trace."""
    return backward_batch(trace)


@dataclass
class AdamState:
    m_gain: np.ndarray
    v_gain: np.ndarray
    m_skip: np.ndarray
    v_skip: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, params: NetParams) -> "AdamState":
        return cls(
            m_gain=np.zeros_like(params.gain),
            v_gain=np.zeros_like(params.gain),
            m_skip=np.zeros_like(params.skip),
            v_skip=np.zeros_like(params.skip),
        )


def adam_step(
    params: NetParams,
    grads: tuple[np.ndarray, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[NetParams, AdamState]:
    """One bias-corrected ADAM update; returns new params and state."""
    d_gain, d_skip = grads
    t = state.t + 1
    m_gain = beta1 * state.m_gain + (1.0 - beta1) * d_gain
    v_gain = beta2 * state.v_gain + (1.0 - beta2) * d_gain**2
    m_skip = beta1 * state.m_skip + (1.0 - beta1) * d_skip
    v_skip = beta2 * state.v_skip + (1.0 - beta2) * d_skip**2
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new = NetParams(
        gain=params.gain - lr * (m_gain / c1) / (np.sqrt(v_gain / c2) + eps),
        skip=params.skip - lr * (m_skip / c1) / (np.sqrt(v_skip / c2) + eps),
        modulation=params.modulation,
    )
    return new, AdamState(m_gain=m_gain, v_gain=v_gain, m_skip=m_skip, v_skip=v_skip, t=t)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters and the seeded dataset description."""

    modulation: str
    k: int
    r: int
    epochs: int
    lr: float = 1e-3
    batch_size: int = 64
    blocks: int = 50
    slots_per_block: int = 40
    p0: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0.0:
            raise ValueError("need epochs >= 0, batch_size >= 1 and lr > 0")


def make_dataset(modulation: str, k: int, blocks: int, slots_per_block: int, seed: int):
    """Seeded (coupling, mask) samples drawn across independent blocks."""
    spec = make_spec(modulation)
    root = np.random.SeedSequence(seed)
    vmats = []
    masks = []
    for b, child in enumerate(root.spawn(blocks)):
        rng = np.random.default_rng(child)
        block, _ = gen_block(ChannelConfig(k=k), rng=rng, block_index=b)
        sym_idx = rng.integers(0, spec.order, size=(slots_per_block, k))
        batch = build_slots(spec, spec.points[sym_idx])
        vmats.append(coupling_many(block.pair_gram, batch.comps))
        masks.append(batch.exploit_mask)
    return np.concatenate(vmats), np.concatenate(masks)


def train(cfg: TrainConfig, data: tuple[np.ndarray, np.ndarray] | None = None):
    """Mini-batch ADAM over the seeded dataset.

    Returns the trained parameters and a history dict with per-epoch mean
    loss and the number of excluded (empty exploitable set) samples seen.
    """
    if data is None:
        data = make_dataset(cfg.modulation, cfg.k, cfg.blocks, cfg.slots_per_block, cfg.seed)
    vmat_all, mask_all = data
    n = vmat_all.shape[0]
    params = init_params(cfg.k, cfg.r, cfg.modulation)
    state = AdamState.zeros(params)
    # entropy tuple keeps the shuffle stream disjoint from the dataset's
    # per-block streams, which spawn from the bare seed
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    history = {"loss": [], "excluded": []}
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        epoch_n = 0
        epoch_excluded = 0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            y_hat, trace = forward_batch(params, vmat_all[sel], mask_all[sel], cfg.p0)
            batch_loss = loss(y_hat, mask_all[sel])
            grads = backward_batch(trace)
            params, state = adam_step(params, grads, state, cfg.lr)
            epoch_loss += batch_loss * sel.size
            epoch_n += sel.size
            epoch_excluded += int((mask_all[sel].sum(axis=1) == 0).sum())
        mean_loss = epoch_loss / epoch_n
        if not np.isfinite(mean_loss):
            raise RuntimeError(f"training diverged at epoch {epoch}: loss={mean_loss!r}")
        history["loss"].append(mean_loss)
        history["excluded"].append(epoch_excluded)
    if history["excluded"] and sum(history["excluded"]):
        log.info("training excluded %d empty-exploitable samples in total", sum(history["excluded"]))
    return params, history


def save_params(path: str, params: NetParams) -> None:
    """Write parameters as text: header ``K R modulation``, one layer per line."""
    lines = [f"{params.k} {params.r} {params.modulation or '-'}"]
    for r in range(params.r):
        nums = [f"{x:.17g}" for x in params.gain[r]] + [f"{params.skip[r]:.17g}"]
        lines.append(" ".join(nums))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path: str) -> NetParams:
    """Read parameters written by :func:`save_params`."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    k_str, r_str, modulation = lines[0].split()
    k, r = int(k_str), int(r_str)
    gain = np.empty((r, 2 * k))
    skip = np.empty(r)
    for i in range(r):
        vals = [float(tok) for tok in lines[1 + i].split()]
        if len(vals) != 2 * k + 1:
            raise ValueError(f"layer {i} has {len(vals)} values, expected {2 * k + 1}")
        gain[i] = vals[: 2 * k]
        skip[i] = vals[-1]
    return NetParams(gain=gain, skip=skip, modulation="" if modulation == "-" else modulation)
