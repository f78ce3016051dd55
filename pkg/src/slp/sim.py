"""Monte Carlo BER experiments, convergence sweeps, timing and CSV output.

Blocks are independent work units: each one draws its channel, its symbol
slots and its noise from a per-block random stream spawned from the run
seed, so results are reproducible and independent of the worker count
(``SLP_THREADS`` caps the thread pool, default 1).  Within a block every
slot shares the same channel instance.  Noise realizations are shared
across methods at each SNR point, which pairs the comparisons.

SNR convention: the transmit budget ``p0`` is fixed and the per-receiver
complex noise variance is ``p0 / 10**(snr_db / 10)``.

QAM receivers get a genie scaling reference per slot: the common value of
the fixed (inner) factors after normalization, or the smallest factor when
no fixed index exists.  This isolates precoder quality from any side
channel that would carry the reference in a real system.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import backend
from .channel import ChannelConfig, gen_block
from .ci import SlotBatch, build_slots, coupling_many
from .constellation import ConstellationSpec, bit_distance_table, detect_many, make_spec
from .net import NetParams, forward_batch
from .oracle import solve_reference_batch
from .precoders import METHODS, DegenerateSlotError

__all__ = [
    "ExperimentConfig",
    "BerRecord",
    "ConvergenceRecord",
    "FlopsRecord",
    "load_config",
    "awgn",
    "run_ber",
    "run_convergence",
    "timing",
    "export_csv",
    "read_csv",
]

log = logging.getLogger(__name__)

_T_REF_FLOOR = 1e-12  # keeps a broken net output from crashing QAM detection


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: dimensions, methods, SNR grid and seeding."""

    k: int
    mt: int
    modulation: str
    methods: tuple[str, ...]
    snr_db: tuple[float, ...]
    r: int = 5
    ns: int = 2000
    blocks: int = 50
    p0: float = 1.0
    seed: int = 0
    out: str | None = None

    def __post_init__(self) -> None:
        if self.mt != self.k:
            raise ValueError(f"square systems only: mt ({self.mt}) must equal k ({self.k})")
        if self.ns < 1 or self.blocks < 1:
            raise ValueError("ns and blocks must be positive")
        if self.p0 <= 0.0:
            raise ValueError("p0 must be positive")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}, expected one of {METHODS}")
        if "opt" in self.methods and 2 * self.k > 16:
            raise ValueError("method 'opt' is limited to 2K <= 16")


@dataclass(frozen=True)
class BerRecord:
    method: str
    snr_db: float
    errors: int
    bits: int
    ber: float
    blocks_used: int


@dataclass(frozen=True)
class ConvergenceRecord:
    method: str
    r: int
    objective: float
    ber: float


@dataclass(frozen=True)
class FlopsRecord:
    method: str
    k: int
    ns: int
    r: int | None
    eps: float | None
    flops: float


_CONFIG_KEYS = {"k", "mt", "modulation", "methods", "snr_db", "r", "ns", "blocks", "p0", "seed", "out"}


def _parse_scalar(token: str):
    token = token.strip()
    if len(token) >= 2 and token[0] == token[-1] and token[0] in "'\"":
        return token[1:-1]
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    return token


def _parse_value(text: str):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        return [] if not inner else [_parse_scalar(t) for t in inner.split(",")]
    return _parse_scalar(text)


def load_config(path: str) -> ExperimentConfig:
    """Read a ``key = value`` config file.

    Recognized keys: k, mt, modulation, methods, snr_db, r, ns, blocks,
    p0, seed, out.  Lists use ``[a, b, c]``; strings may be quoted.
    Lines starting with ``#`` are comments.
    """
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip().lower()
            if key not in _CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(val)
    missing = {"k", "modulation", "methods", "snr_db"} - values.keys()
    if missing:
        raise ValueError(f"{path}: missing required keys {sorted(missing)}")
    values.setdefault("mt", values["k"])
    if isinstance(values["methods"], str):
        values["methods"] = [values["methods"]]
    if not isinstance(values["snr_db"], list):
        values["snr_db"] = [values["snr_db"]]
    return ExperimentConfig(**values)


def awgn(y: np.ndarray, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise with total variance ``sigma2``."""
    if sigma2 < 0.0:
        raise ValueError("noise variance must be nonnegative")
    y = np.asarray(y, dtype=np.complex128)
    if sigma2 == 0.0:
        return y.copy()
    scale = np.sqrt(sigma2 / 2.0)
    return y + rng.normal(0.0, scale, y.shape) + 1j * rng.normal(0.0, scale, y.shape)


def _normalize_batch(vmat: np.ndarray, factors: np.ndarray, p0: float) -> np.ndarray:
    quad = np.einsum("ni,nij,nj->n", factors, vmat, factors)
    if np.any(quad <= 0.0):
        raise DegenerateSlotError("factor quadratic form is nonpositive")
    return np.sqrt(p0) * factors / np.sqrt(quad)[:, None]


def _solve_factors(
    method: str,
    block,
    batch: SlotBatch,
    vmat: np.ndarray,
    r_max: int,
    p0: float,
    net_params: NetParams | None,
) -> np.ndarray:
    """Normalized scaling factors (N, 2K) of one block's slots."""
    exploit = batch.exploit_mask > 0.5
    if method == "zf":
        f_zf = np.linalg.norm(block.hinv @ batch.symbols.T, axis=0)
        return (np.sqrt(p0) / f_zf)[:, None] * np.ones_like(batch.exploit_mask)
    if method == "cf":
        factors, _, status = backend.cf_solve_batch(vmat, exploit, r_max)
        if np.any(status != backend.CF_OK):
            raise DegenerateSlotError("coordinate solver hit a nonpositive diagonal")
        return _normalize_batch(vmat, factors, p0)
    if method == "sub":
        diag = np.diagonal(vmat, axis1=1, axis2=2)
        q = vmat.sum(axis=2)
        factors = np.maximum(-(q - diag) / (2.0 * diag), 1.0)
        factors = np.where(exploit, factors, 1.0)
        return _normalize_batch(vmat, factors, p0)
    if method == "opt":
        factors_norm, _ = solve_reference_batch(vmat, exploit, p0)
        return factors_norm
    if method == "net":
        if net_params is None:
            raise ValueError("method 'net' needs trained parameters")
        y_hat, _ = forward_batch(net_params, vmat, batch.exploit_mask, p0)
        return y_hat
    raise ValueError(f"unknown method {method!r}")


def _t_ref(batch: SlotBatch, factors_norm: np.ndarray) -> np.ndarray:
    fixed = batch.exploit_mask < 0.5
    with_fixed = np.where(fixed, factors_norm, np.inf).min(axis=1)
    t = np.where(np.isfinite(with_fixed), with_fixed, factors_norm.min(axis=1))
    return np.maximum(t, _T_REF_FLOOR)


def _received(batch: SlotBatch, factors_norm: np.ndarray) -> np.ndarray:
    """Noiseless receive points: per-user sum of the scaled components."""
    n, d = factors_norm.shape
    return (factors_norm * batch.comps).reshape(n, d // 2, 2).sum(axis=2)


def _block_metrics(
    cfg: ExperimentConfig,
    spec: ConstellationSpec,
    seed: np.random.SeedSequence,
    block_index: int,
    r_max: int,
    net_params: NetParams | None,
):
    """Per-block bit errors (methods x SNRs) and mean per-slot margins."""
    rng = np.random.default_rng(seed)
    block, _ = gen_block(ChannelConfig(k=cfg.k, mt=cfg.mt), rng=rng, block_index=block_index)
    sym_idx = rng.integers(0, spec.order, size=(cfg.ns, cfg.k))
    batch = build_slots(spec, spec.points[sym_idx])
    vmat = coupling_many(block.pair_gram, batch.comps)
    n_snr = len(cfg.snr_db)
    scale = np.sqrt(0.5)
    noise = scale * (
        rng.normal(size=(n_snr, cfg.ns, cfg.k)) + 1j * rng.normal(size=(n_snr, cfg.ns, cfg.k))
    )
    table = bit_distance_table(spec)
    errors = np.zeros((len(cfg.methods), n_snr), dtype=np.int64)
    margins = np.zeros(len(cfg.methods))
    for mi, method in enumerate(cfg.methods):
        factors_norm = _solve_factors(method, block, batch, vmat, r_max, cfg.p0, net_params)
        margins[mi] = float(factors_norm.min(axis=1).mean())
        y0 = _received(batch, factors_norm)
        t_ref = _t_ref(batch, factors_norm) if spec.kind == "qam" else None
        for si, snr in enumerate(cfg.snr_db):
            sigma2 = cfg.p0 / 10.0 ** (snr / 10.0)
            y = y0 + np.sqrt(sigma2) * noise[si]
            if spec.kind == "qam":
                rx = detect_many(spec, y, t_ref[:, None]) - 1
            else:
                rx = detect_many(spec, y) - 1
            errors[mi, si] = int(table[sym_idx, rx].sum())
    return errors, margins, block.regen_count


def _worker_count() -> int:
    env = os.environ.get("SLP_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return 1


def _run_blocks(cfg: ExperimentConfig, r_max: int, net_params: NetParams | None):
    spec = make_spec(cfg.modulation)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.blocks)

    def work(b: int):
        return _block_metrics(cfg, spec, seeds[b], b, r_max, net_params)

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(cfg.blocks)))
    else:
        results = [work(b) for b in range(cfg.blocks)]

    errors = np.sum([res[0] for res in results], axis=0)
    margins = np.mean([res[1] for res in results], axis=0)
    regens = int(np.sum([res[2] for res in results]))
    if regens:
        log.info("regenerated %d rank-deficient channel draw(s)", regens)
    bits = cfg.blocks * cfg.ns * cfg.k * spec.bits_per_symbol
    return errors, margins, bits


def run_ber(cfg: ExperimentConfig, net_params: NetParams | None = None) -> list[BerRecord]:
    """Monte Carlo BER over the config's SNR grid, one record per (method, SNR)."""
    if "net" in cfg.methods and net_params is None:
        raise ValueError("config requests method 'net' but no parameters were given")
    errors, _, bits = _run_blocks(cfg, cfg.r, net_params)
    records = []
    for mi, method in enumerate(cfg.methods):
        for si, snr in enumerate(cfg.snr_db):
            err = int(errors[mi, si])
            records.append(
                BerRecord(
                    method=method,
                    snr_db=snr,
                    errors=err,
                    bits=bits,
                    ber=err / bits,
                    blocks_used=cfg.blocks,
                )
            )
    return records


def run_convergence(
    cfg: ExperimentConfig, r_grid: list[int], net_params: NetParams | None = None
) -> list[ConvergenceRecord]:
    """Sweep the iteration cap: mean normalized margin and BER per R.

    Methods without an iteration cap repeat their numbers across the grid.
    Uses the first SNR point of the config for the BER column.
    """
    one_snr = replace(cfg, snr_db=(cfg.snr_db[0],))
    records = []
    for r in r_grid:
        if r < 0:
            raise ValueError("iteration counts must be >= 0")
        errors, margins, bits = _run_blocks(one_snr, r, net_params)
        for mi, method in enumerate(cfg.methods):
            records.append(
                ConvergenceRecord(
                    method=method,
                    r=r,
                    objective=float(margins[mi]),
                    ber=int(errors[mi, 0]) / bits,
                )
            )
    return records


def timing(cfg: ExperimentConfig, repeats: int = 5, net_params: NetParams | None = None) -> list[dict]:
    """Median wall-clock seconds per slot for each method, with IQR.

    Times the per-block pipeline (coupling build, factor solve,
    normalization, receive points) on one warm block.  Measured, not
    asserted: absolute numbers are machine-bound.
    """
    spec = make_spec(cfg.modulation)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    block, _ = gen_block(ChannelConfig(k=cfg.k, mt=cfg.mt), rng=rng)
    sym_idx = rng.integers(0, spec.order, size=(cfg.ns, cfg.k))
    batch = build_slots(spec, spec.points[sym_idx])
    rows = []
    for method in cfg.methods:
        durations = []
        for rep in range(repeats + 1):
            start = time.perf_counter()
            vmat = coupling_many(block.pair_gram, batch.comps)
            factors_norm = _solve_factors(method, block, batch, vmat, cfg.r, cfg.p0, net_params)
            _received(batch, factors_norm)
            elapsed = time.perf_counter() - start
            if rep > 0:  # first pass warms caches and JIT
                durations.append(elapsed / cfg.ns)
        q1, q2, q3 = np.percentile(durations, [25, 50, 75])
        rows.append({"method": method, "median_s_per_slot": float(q2), "iqr_s_per_slot": float(q3 - q1)})
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def export_csv(records: list, path: str, kind: str | None = None) -> None:
    """Write records deterministically; BER and objective get 6 significant digits.

    ``kind`` ("ber" | "convergence" | "flops") selects the header for an
    empty record list.
    """
    headers = {
        "ber": "method,snr_db,errors,bits,ber",
        "convergence": "method,r,objective,ber",
        "flops": "method,k,ns,r,eps,flops",
    }
    if not records:
        if kind not in headers:
            raise ValueError("empty record list needs an explicit kind")
        rows = [headers[kind]]
    elif isinstance(records[0], BerRecord):
        rows = [headers["ber"]]
        for rec in records:
            rows.append(
                f"{rec.method},{_fmt(rec.snr_db)},{rec.errors},{rec.bits},{format(rec.ber, '.6g')}"
            )
    elif isinstance(records[0], ConvergenceRecord):
        rows = [headers["convergence"]]
        for rec in records:
            rows.append(f"{rec.method},{rec.r},{format(rec.objective, '.6g')},{format(rec.ber, '.6g')}")
    elif isinstance(records[0], FlopsRecord):
        rows = [headers["flops"]]
        for rec in records:
            rows.append(
                f"{rec.method},{rec.k},{rec.ns},{_fmt(rec.r)},{_fmt(rec.eps)},{_fmt(rec.flops)}"
            )
    else:
        raise TypeError(f"cannot export records of type {type(records[0]).__name__}")
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(rows) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write CSV to {path!r}: {exc}") from exc


def read_csv(path: str) -> list[dict]:
    """Parse a CSV written by :func:`export_csv` into row dicts."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        rows.append({key: _parse_scalar(tok) for key, tok in zip(header, line.split(","))})
    return rows
