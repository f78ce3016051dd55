"""Command line front end.

Subcommands: ``ber``, ``convergence``, ``train``, ``flops``, ``timing``
and ``gen-channel``.  Experiment subcommands read a ``key = value`` config
file (see :func:`slp.sim.load_config`); training hyperparameters and
output paths are flags.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import channel, flops as flops_mod, net, sim

__all__ = ["main"]


def _add_config(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config file")


def _load_net(path: str | None) -> net.NetParams | None:
    return net.load_params(path) if path else None


def _cmd_ber(args) -> int:
    cfg = sim.load_config(args.config)
    records = sim.run_ber(cfg, net_params=_load_net(args.net_params))
    out = args.out or cfg.out or "ber.csv"
    sim.export_csv(records, out, kind="ber")
    for rec in records:
        print(f"{rec.method:>4s}  snr={rec.snr_db:6.1f} dB  ber={rec.ber:.6g}  ({rec.errors}/{rec.bits})")
    print(f"wrote {out}")
    return 0


def _cmd_convergence(args) -> int:
    cfg = sim.load_config(args.config)
    r_grid = [int(r) for r in args.r_grid.split(",")]
    records = sim.run_convergence(cfg, r_grid, net_params=_load_net(args.net_params))
    out = args.out or cfg.out or "convergence.csv"
    sim.export_csv(records, out, kind="convergence")
    for rec in records:
        print(f"{rec.method:>4s}  r={rec.r:3d}  objective={rec.objective:.6g}  ber={rec.ber:.6g}")
    print(f"wrote {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = sim.load_config(args.config)
    tcfg = net.TrainConfig(
        modulation=cfg.modulation,
        k=cfg.k,
        r=cfg.r,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch,
        blocks=cfg.blocks,
        slots_per_block=args.slots_per_block,
        p0=cfg.p0,
        seed=cfg.seed,
    )
    params, history = net.train(tcfg)
    net.save_params(args.params_out, params)
    if history["loss"]:
        print(f"trained {tcfg.epochs} epochs: loss {history['loss'][0]:.6g} -> {history['loss'][-1]:.6g}")
    print(f"wrote {args.params_out}")
    return 0


def _cmd_flops(args) -> int:
    value = flops_mod.flops(args.method, args.k, args.ns, r=args.r, eps=args.eps)
    print(f"{value:.10g}")
    if args.out:
        rec = sim.FlopsRecord(method=args.method, k=args.k, ns=args.ns, r=args.r, eps=args.eps, flops=value)
        sim.export_csv([rec], args.out, kind="flops")
        print(f"wrote {args.out}")
    return 0


def _cmd_timing(args) -> int:
    cfg = sim.load_config(args.config)
    rows = sim.timing(cfg, repeats=args.repeats, net_params=_load_net(args.net_params))
    print(f"{'method':>8s}  {'median s/slot':>14s}  {'IQR s/slot':>12s}")
    for row in rows:
        print(f"{row['method']:>8s}  {row['median_s_per_slot']:14.3e}  {row['iqr_s_per_slot']:12.3e}")
    return 0


def _cmd_gen_channel(args) -> int:
    cfg = channel.ChannelConfig(k=args.k, mt=args.mt, seed=args.seed)
    block, _ = channel.gen_block(cfg, rng=np.random.default_rng(args.seed))
    channel.save_fixture(args.out, block.h)
    print(f"wrote {args.out} ({block.k} x {block.mt})")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slp", description="Symbol-level precoding experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ber", help="Monte Carlo BER over an SNR grid")
    _add_config(p)
    p.add_argument("--net-params", help="parameter file for method 'net'")
    p.add_argument("--out", help="override the config's output path")
    p.set_defaults(func=_cmd_ber)

    p = sub.add_parser("convergence", help="sweep the solver iteration cap")
    _add_config(p)
    p.add_argument("--r-grid", default="1,2,3,5,8,10,15,20", help="comma-separated iteration caps")
    p.add_argument("--net-params", help="parameter file for method 'net'")
    p.add_argument("--out", help="override the config's output path")
    p.set_defaults(func=_cmd_convergence)

    p = sub.add_parser("train", help="train the unfolded solver")
    _add_config(p)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--slots-per-block", type=int, default=40)
    p.add_argument("--params-out", default="net-params.txt")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("flops", help="closed-form operation count")
    p.add_argument("--method", required=True, choices=flops_mod.FLOP_METHODS)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--ns", type=int, required=True)
    p.add_argument("--r", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--out", help="also write a flops.csv row")
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("timing", help="measure seconds per slot by method")
    _add_config(p)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--net-params", help="parameter file for method 'net'")
    p.set_defaults(func=_cmd_timing)

    p = sub.add_parser("gen-channel", help="write a channel fixture file")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--mt", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_channel)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
