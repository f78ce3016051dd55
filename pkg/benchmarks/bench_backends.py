"""Compare the numba kernels against the pure-numpy fallback.

Times the two hot kernels (greedy coordinate solver, exact reference
solver) on identical seeded inputs under both backends and prints a small
table.  Run from the repository root:

    python benchmarks/bench_backends.py
"""

import time

import numpy as np

from slp import backend
from slp.channel import ChannelConfig, gen_block
from slp.ci import build_slots, coupling_many
from slp.constellation import make_spec


def make_inputs(modulation: str, k: int, n_slots: int, seed: int = 0):
    spec = make_spec(modulation)
    rng = np.random.default_rng(seed)
    block, _ = gen_block(ChannelConfig(k=k), rng=rng)
    idx = rng.integers(0, spec.order, size=(n_slots, k))
    batch = build_slots(spec, spec.points[idx])
    return coupling_many(block.pair_gram, batch.comps), batch.exploit_mask > 0.5


def bench(fn, repeats: int = 5) -> float:
    fn()  # warmup (JIT compile on the numba path)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def main() -> None:
    cases = [
        ("cf qpsk k=4 r=5", "qpsk", 4, 4000, lambda v, m: backend.cf_solve_batch(v, m, 5)),
        ("cf 16qam k=8 r=10", "16qam", 8, 4000, lambda v, m: backend.cf_solve_batch(v, m, 10)),
        ("oracle qpsk k=4", "qpsk", 4, 400, backend.oracle_solve_batch),
        ("oracle 16qam k=4", "16qam", 4, 400, backend.oracle_solve_batch),
    ]
    print(f"{'kernel':<20s} {'slots':>6s} {'numba':>12s} {'numpy':>12s} {'speedup':>9s}")
    for label, mod, k, n_slots, fn in cases:
        vmats, exploit = make_inputs(mod, k, n_slots)
        results = {}
        for name in ("numba", "numpy"):
            try:
                backend.set_backend(name)
            except RuntimeError:
                results[name] = float("nan")
                continue
            results[name] = bench(lambda: fn(vmats, exploit))
        ratio = results["numpy"] / results["numba"]
        print(
            f"{label:<20s} {n_slots:>6d} {results['numba']:>10.4f} s {results['numpy']:>10.4f} s "
            f"{ratio:>8.1f}x"
        )


if __name__ == "__main__":
    main()
