"""Acceptance gate: one test per shipping criterion, stated tolerances.

Each test prints a single PASS line once its assertions hold (visible with
``pytest -s`` or in captured output).  Runtime budgets are asserted after a
one-off kernel warmup, which stands in for the per-machine JIT compile.
"""

import time

import numpy as np
import pytest

from conftest import make_batch, make_instance
from published_counts import EPS, NS, R, SIZES, TABLE, printed_tolerance, table_value
from slp import backend, ci, net, sim
from slp.channel import ChannelConfig, gen_block
from slp.constellation import make_spec
from slp.flops import flops
from slp.oracle import solve_reference_batch
from slp.precoders import cf_solve_trace, precode_block

P0 = 1.0


@pytest.fixture(scope="module", autouse=True)
def warm_kernels():
    v = np.eye(4)[None]
    mask = np.ones((1, 4), dtype=bool)
    backend.cf_solve_batch(v, mask, 1)
    backend.oracle_solve_batch(v, mask)


def _announce(n: int, text: str) -> None:
    print(f"\nACCEPTANCE {n} PASS: {text}", flush=True)


def _margins(vmats: np.ndarray, factors: np.ndarray) -> np.ndarray:
    quad = np.einsum("ni,nij,nj->n", factors, vmats, factors)
    return np.sqrt(P0) * (factors / np.sqrt(quad)[:, None]).min(axis=1)


def _sub_factors(vmats: np.ndarray, exploit: np.ndarray) -> np.ndarray:
    diag = np.diagonal(vmats, axis1=1, axis2=2)
    q = vmats.sum(axis=2)
    return np.where(exploit, np.maximum(-(q - diag) / (2.0 * diag), 1.0), 1.0)


def _ber_leq(err_a: int, err_b: int, bits: int, z: float = 1.96) -> bool:
    pa, pb = err_a / bits, err_b / bits
    slack = z * np.sqrt(pa * (1 - pa) / bits + pb * (1 - pb) / bits)
    return pa <= pb + slack


def test_criterion_1_extrapolation_exactness():
    start = time.perf_counter()
    pairs = 0
    rng = np.random.default_rng(101)
    for mod in ("qpsk", "8psk", "16qam"):
        spec = make_spec(mod)
        for k in (2, 4, 6):
            for _ in range(112):
                block, _ = gen_block(ChannelConfig(k=k), rng=rng)
                ref = ci.build_slot(spec, spec.points[rng.integers(0, spec.order, k)])
                tgt = ci.build_slot(spec, spec.points[rng.integers(0, spec.order, k)])
                direct = ci.slot_coupling(block.pair_gram, tgt)
                scale = np.linalg.norm(direct.vmat)
                via_gram = ci.extrapolate_coupling_qam(block.pair_gram, tgt)
                assert np.linalg.norm(via_gram.vmat - direct.vmat) / scale < 1e-12
                if spec.kind == "psk":
                    via_ratio = ci.extrapolate_coupling_psk(
                        ci.slot_coupling(block.pair_gram, ref), ci.slot_transform(ref, tgt)
                    )
                    assert np.linalg.norm(via_ratio.vmat - direct.vmat) / scale < 1e-12
                pairs += 1
    elapsed = time.perf_counter() - start
    assert pairs >= 1000
    assert elapsed < 10.0
    _announce(1, f"both extrapolation paths exact to 1e-12 on {pairs} pairs ({elapsed:.1f} s)")


def test_criterion_2_fixed_point_correctness():
    rng = np.random.default_rng(202)
    checked = 0
    combos = [("qpsk", 2), ("qpsk", 4), ("8psk", 3), ("16qam", 4), ("16qam", 2)]
    for mod, k in combos:
        for _ in range(100):
            _, _, slot, vmat = make_instance(mod, k, rng)
            steps = cf_solve_trace(vmat, slot.exploit_idx, 25)
            prev_margin = None
            for step in steps:
                f = step["factors"]
                assert abs((vmat @ f)[step["index"]]) < 1e-10
                assert f.min() >= 1.0
                margin = np.sqrt(P0) * f.min() / np.sqrt(f @ vmat @ f)
                if prev_margin is not None:
                    assert margin >= prev_margin - 1e-12
                prev_margin = margin
            checked += 1
    assert checked == 500
    _announce(2, "updates zero their coordinate, factors stay >= 1, margin is monotone (500 instances)")


def test_criterion_3_oracle_equivalence():
    start = time.perf_counter()
    results = {}
    for family, mods in [("psk", ("qpsk", "8psk")), ("qam", ("16qam",))]:
        rng = np.random.default_rng(303)
        within = 0
        total = 0
        for i in range(500):
            k = (2, 3, 4)[i % 3]
            mod = mods[i % len(mods)]
            _, _, slot, vmat = make_instance(mod, k, rng)
            exploit = slot.exploit_mask[None] > 0.5
            _, margin_opt = solve_reference_batch(vmat[None], exploit, P0)
            f_cf, _, _ = backend.cf_solve_batch(vmat[None], exploit, 50)
            m_cf = _margins(vmat[None], f_cf)[0]
            m_sub = _margins(vmat[None], _sub_factors(vmat[None], exploit))[0]
            assert m_cf <= margin_opt[0] + 1e-9
            assert m_sub <= m_cf + 1e-9
            within += m_cf >= 0.99 * margin_opt[0]
            total += 1
        results[family] = within / total
        assert within / total >= 0.90
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    _announce(
        3,
        f"iterative solver within 1% of the exact optimum on {results['psk']:.1%} (PSK) "
        f"and {results['qam']:.1%} (QAM) of 500 instances each ({elapsed:.1f} s)",
    )


def test_criterion_4_precoder_contracts():
    rng = np.random.default_rng(404)
    slots_checked = 0
    net_params = net.init_params(4, 5)
    for mod in ("qpsk", "16qam"):
        spec = make_spec(mod)
        for method in ("zf", "cf", "sub", "opt", "net"):
            block, _ = gen_block(ChannelConfig(k=4), rng=rng)
            slots = [ci.build_slot(spec, spec.points[rng.integers(0, spec.order, 4)]) for _ in range(100)]
            precs, states = precode_block(
                block, spec, slots, method, r_max=5, p0=P0, net_params=net_params, return_states=True
            )
            for prec, state, slot in zip(precs, states, slots):
                x = prec.w @ slot.symbols
                assert abs(np.linalg.norm(x) ** 2 - P0) < 1e-9
                rx = block.h @ x
                pairs = (state.factors_norm * slot.comps).reshape(4, 2).sum(axis=1)
                assert np.abs(rx - pairs).max() < 1e-9
                slots_checked += 1
    assert slots_checked == 1000
    _announce(4, "power budget and per-user split hold to 1e-9 for all methods (1000 slots)")


def test_criterion_5_ber_ordering():
    start = time.perf_counter()
    summaries = []
    for mod, ns, blocks in [("qpsk", 2000, 25), ("16qam", 2000, 13)]:
        cfg = sim.ExperimentConfig(
            k=4,
            mt=4,
            modulation=mod,
            methods=("opt", "cf", "sub", "zf"),
            snr_db=(30.0,),
            r=5,
            ns=ns,
            blocks=blocks,
            p0=P0,
            seed=20260810,
        )
        by = {rec.method: rec for rec in sim.run_ber(cfg)}
        bits = by["zf"].bits
        assert bits >= 4e5
        assert _ber_leq(by["opt"].errors, by["cf"].errors, bits)
        assert _ber_leq(by["cf"].errors, by["sub"].errors, bits)
        assert _ber_leq(by["sub"].errors, by["zf"].errors, bits)
        if mod == "qpsk":
            assert by["cf"].ber <= 0.5 * by["zf"].ber
        summaries.append(
            f"{mod}: " + " <= ".join(f"{m}={by[m].ber:.2e}" for m in ("opt", "cf", "sub", "zf"))
        )
    elapsed = time.perf_counter() - start
    assert elapsed < 300.0
    _announce(5, "; ".join(summaries) + f" ({elapsed:.0f} s)")


def test_criterion_6_operation_count_table():
    start = time.perf_counter()
    for method in ("zf", "sub", "net", "base-cf"):
        for k, entry in zip(SIZES, TABLE[method]):
            value = flops(method, k, NS, r=R)
            assert abs(value - float(entry)) <= printed_tolerance(entry), (method, k)
    # iterative scheme: closed form is exact; the published table runs about
    # 64,000 ops lower at every size, within 0.1% at the 8-user anchor size
    assert flops("cf", 8, NS, r=R) == 70_497_816
    assert flops("cf", 4, NS, r=R) == 13_632_268
    cf_gaps = {
        k: (flops("cf", k, NS, r=R) - table_value("cf", k)) / table_value("cf", k) for k in SIZES
    }
    assert abs(cf_gaps[8]) < 1e-3
    ipm_gaps = {
        k: (flops("ipm", k, NS, eps=EPS) - table_value("ipm", k)) / table_value("ipm", k) for k in SIZES
    }
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    _announce(
        6,
        "table reproduced for zf/sub/net/base-cf; cf formula exact, gap to table "
        + ", ".join(f"K={k}: {g:+.2%}" for k, g in cf_gaps.items())
        + "; ipm evaluated verbatim, gap "
        + ", ".join(f"K={k}: {g:+.2%}" for k, g in ipm_gaps.items()),
    )


def test_criterion_7_gradient_fidelity():
    # Central differences at step 1e-5 on a unit-scale loss carry roundoff
    # of a few 1e-12 and truncation up to ~1e-7 absolute, so the 1e-5
    # relative bound is checked where it is meaningful (entries above 1e-5)
    # and every entry, however small, must satisfy the standard combined
    # tolerance diff <= atol + rtol * scale with atol 1e-8, rtol 1e-5.
    start = time.perf_counter()
    rng = np.random.default_rng(707)
    instances = 0
    worst_rel = 0.0
    worst_abs = 0.0

    def check(an: float, fd: float):
        nonlocal worst_rel, worst_abs
        diff = abs(fd - an)
        worst_abs = max(worst_abs, diff)
        scale = max(abs(an), abs(fd))
        assert diff <= 1e-8 + 1e-5 * scale
        if scale > 1e-5:
            rel = diff / scale
            worst_rel = max(worst_rel, rel)
            assert rel < 1e-5

    for mod in ("qpsk", "16qam"):
        for k in (2, 4):
            for r in (3, 5):
                for _ in range(13):
                    _, _, slot, vmat = make_instance(mod, k, rng)
                    params = net.NetParams(
                        gain=rng.uniform(0.05, 0.5, (r, 2 * k)), skip=rng.uniform(0.8, 1.2, r)
                    )
                    _, trace = net.forward(params, vmat, slot.exploit_mask, P0)
                    d_gain, d_skip = net.backward(trace)

                    def loss_at(p):
                        y, _ = net.forward(p, vmat, slot.exploit_mask, P0)
                        return net.loss(y[None, :], slot.exploit_mask[None, :])

                    h = 1e-5
                    for i in range(r):
                        for j in range(2 * k):
                            up, dn = params.copy(), params.copy()
                            up.gain[i, j] += h
                            dn.gain[i, j] -= h
                            check(d_gain[i, j], (loss_at(up) - loss_at(dn)) / (2 * h))
                        up, dn = params.copy(), params.copy()
                        up.skip[i] += h
                        dn.skip[i] -= h
                        check(d_skip[i], (loss_at(up) - loss_at(dn)) / (2 * h))
                    instances += 1
    elapsed = time.perf_counter() - start
    assert instances >= 100
    assert elapsed < 30.0
    _announce(7, f"analytic gradients match central differences on {instances} instances "
              f"(worst rel {worst_rel:.2e}, worst abs {worst_abs:.2e}, {elapsed:.1f} s)")


def test_criterion_8_training_efficacy():
    start = time.perf_counter()
    tcfg = net.TrainConfig(
        modulation="qpsk", k=4, r=5, epochs=200, lr=1e-3, batch_size=64,
        blocks=50, slots_per_block=40, p0=P0, seed=303,
    )
    params, history = net.train(tcfg)
    assert len(history["loss"]) == 200
    cfg = sim.ExperimentConfig(
        k=4, mt=4, modulation="qpsk", methods=("cf", "net", "sub"), snr_db=(30.0,),
        r=5, ns=2000, blocks=13, p0=P0, seed=777,
    )
    by = {rec.method: rec for rec in sim.run_ber(cfg, net_params=params)}
    bits = by["net"].bits
    assert bits >= 2e5
    assert by["net"].ber <= by["sub"].ber
    p_net, p_cf = by["net"].ber, by["cf"].ber
    slack = 1.96 * np.sqrt(p_net * (1 - p_net) / bits + p_cf * (1 - p_cf) / bits)
    assert p_net >= p_cf - slack
    elapsed = time.perf_counter() - start
    assert elapsed < 600.0
    _announce(
        8,
        f"trained net ber={p_net:.2e} vs cf={p_cf:.2e}, sub={by['sub'].ber:.2e} "
        f"on {bits} held-out bits ({elapsed:.0f} s)",
    )


def test_criterion_9_convergence_plateau():
    rng = np.random.default_rng(909)
    _, _, _, batch, vmats = make_batch("8psk", 4, 600, rng)
    exploit = batch.exploit_mask > 0.5
    grid = [1, 2, 3, 5, 8, 10, 15, 20]
    margins = {}
    for r in grid:
        factors, _, _ = backend.cf_solve_batch(vmats, exploit, r)
        margins[r] = _margins(vmats, factors)
    for a, b in zip(grid, grid[1:]):
        assert np.all(margins[b] >= margins[a] - 1e-12)
    m10, m20 = margins[10].mean(), margins[20].mean()
    assert m20 - m10 <= 0.01 * m10
    _announce(
        9,
        f"margin non-decreasing in R on 600 instances; mean rises only "
        f"{(m20 - m10) / m10:.3%} from R=10 to R=20",
    )
