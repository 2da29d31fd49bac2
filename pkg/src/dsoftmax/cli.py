"""``dsoftmax`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import math
import re
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .analysis import (
    intra_termination_point,
    pairwise_cosine_stats,
    trace_loss_curve,
    trace_termination,
)
from .bench import BENCH_KINDS, bench_loss_layer, emit_bench_csv
from .core_math import make_rng, read_matrix_snapshot, seeded_gaussian_matrix, write_matrix_snapshot
from .csvio import atomic_write_text
from .losses import LossConfig
from .param_server import ParameterServer, read_snapshot, serve_in_thread
from .sampling import as_rate
from .trainer import (
    Trainer,
    generate_synthetic_dataset,
    initial_class_weights,
    metrics_csv,
    run_sampling_sweep,
    sweep_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("dsoftmax")

_OVERRIDE = re.compile(r"^--([a-z]+\.[A-Za-z_0-9]+)=(.*)$")


class UsageError(Exception):
    pass


def _echo(text):
    sys.stderr.write(text if text.endswith("\n") else text + "\n")


def _split_overrides(extra):
    """Turn leftover ``--section.key=value`` arguments into override pairs."""
    pairs = []
    for arg in extra:
        m = _OVERRIDE.match(arg)
        if not m:
            raise cfgmod.ConfigError(f"unrecognized argument {arg!r}")
        pairs.append((m.group(1), m.group(2)))
    return pairs


def _resolve(args, extra):
    overrides = _split_overrides(extra)
    if getattr(args, "seed", None) is not None:
        overrides.append(("train.seed", str(args.seed)))
    if getattr(args, "deterministic", False):
        overrides.append(("train.deterministic", "true"))
    return cfgmod.load(getattr(args, "config", None), overrides)


def _build(values):
    tcfg = cfgmod.train_config(values)
    dp = cfgmod.data_params(values)
    shards = int(values["ps.shards"])
    if shards < 1:
        raise cfgmod.ConfigError("ps.shards: must be >= 1")
    return tcfg, dp, shards


def _dataset(dp):
    return generate_synthetic_dataset(dp["C"], dp["n"], dp["per_class"], dp["noise_sigma"], make_rng(dp["seed"]))


def _seed_comment(values):
    return [f"seed={values['train.seed']}", f"data.seed={values['data.seed']}"]


def cmd_train(args, extra):
    values = _resolve(args, extra)
    tcfg, dp, shards = _build(values)
    _echo(cfgmod.render(values))
    _echo(f"seed={tcfg.seed}")
    ds = _dataset(dp)
    store = ParameterServer(initial_class_weights(dp["C"], dp["n"], tcfg.seed), num_shards=shards)
    records = Trainer(tcfg, ds, store).run()
    out = Path(args.out)
    comments = _seed_comment(values) + [f"dataset.{k}={v}" for k, v in ds.metadata.items()]
    atomic_write_text(out / "metrics.csv", metrics_csv(records, comments))
    atomic_write_text(out / "config.txt", cfgmod.render(values))
    store.snapshot(out / "weights.dsps")
    store.close()
    last = records[-1]
    _echo(f"final: intra_cos={last.intra_cos_mean:.4f} weight_cos_mean={last.weight_cos_mean:.4f} "
          f"weight_cos_std={last.weight_cos_std:.4f} pair_acc={last.pair_accuracy:.4f}")
    return EXIT_OK


def _parse_rates(text):
    try:
        return [as_rate(r) for r in text.split(",") if r.strip()]
    except (ValueError, ZeroDivisionError) as exc:
        raise cfgmod.ConfigError(f"--rates: {exc}") from None


def cmd_sweep(args, extra):
    values = _resolve(args, extra)
    tcfg, dp, shards = _build(values)
    rates = _parse_rates(args.rates)
    _echo(cfgmod.render(values))
    _echo(f"seed={tcfg.seed}")
    ds = _dataset(dp)
    rows = run_sampling_sweep(
        tcfg, rates, ds,
        lambda: ParameterServer(initial_class_weights(dp["C"], dp["n"], tcfg.seed), num_shards=shards),
    )
    comments = _seed_comment(values) + [f"loss.kind={tcfg.loss.kind}", f"sampler.kind={tcfg.sampler}"]
    atomic_write_text(Path(args.out), sweep_csv(rows, comments))
    return EXIT_OK


def cmd_bench(args, extra):
    if extra:
        raise cfgmod.ConfigError(f"unrecognized arguments {extra}")
    kinds = [k for k in args.kinds.split(",") if k]
    for k in kinds:
        if k not in BENCH_KINDS:
            raise cfgmod.ConfigError(f"--kinds: unknown kind {k!r}; expected one of {BENCH_KINDS}")
    Ks = [int(k) for k in args.K.split(",")]
    rates = _parse_rates(args.rates)
    _echo(f"bench kinds={kinds} K={Ks} B={args.B} rates={[str(r) for r in rates]} n={args.n} reps={args.reps}")
    _echo(f"seed={args.seed}")
    results = []
    for K in Ks:
        rng = make_rng(args.seed)
        store = ParameterServer(seeded_gaussian_matrix(K, args.n, rng))
        for kind in kinds:
            for rate in rates if kind not in ("Softmax", "DSoftmax") else [as_rate(1)]:
                r = bench_loss_layer(kind, K, args.B, rate, args.reps, make_rng(args.seed + 1), store=store)
                _echo(f"{kind} K={K} rate={rate}: min {r.min_s * 1e3:.2f} ms, mean {r.mean_s * 1e3:.2f} ms")
                results.append(r)
    atomic_write_text(Path(args.out), emit_bench_csv(results, [f"seed={args.seed}", f"n={args.n}"]))
    return EXIT_OK


def _parse_masses(raw_values, log_values, flag):
    if raw_values and log_values:
        raise cfgmod.ConfigError(f"give either --{flag} or --log-{flag}, not both")
    if log_values:
        return [math.exp(float(v)) for v in log_values.split(",")]
    if raw_values:
        return [float(v) for v in raw_values.split(",")]
    return []


def _curve_cfg(args):
    try:
        return LossConfig(kind=args.kind, s=args.s, d=args.d, m1=args.m1, m2=args.m2, m3=args.m3)
    except ValueError as exc:
        raise cfgmod.ConfigError(str(exc)) from None


def _check_grid(args):
    if args.lo < -1.0 or args.hi > 1.0 or args.lo >= args.hi or args.step <= 0:
        raise cfgmod.ConfigError(f"grid [{args.lo}, {args.hi}] step {args.step} is outside [-1, 1]")


def cmd_curves(args, extra):
    if extra:
        raise cfgmod.ConfigError(f"unrecognized arguments {extra}")
    cfg = _curve_cfg(args)
    _check_grid(args)
    out = Path(args.out)
    written = []
    if args.mode == "intra":
        masses = _parse_masses(args.M, args.log_M, "M") or [None]
        for i, M in enumerate(masses):
            if M is None and cfg.kind != "DSoftmax":
                raise cfgmod.ConfigError("intra curves need --M or --log-M")
            trace = trace_loss_curve(cfg, "intra", M=M, step=args.step, lo=args.lo, hi=args.hi)
            if M is not None:
                trace.metadata["d"] = intra_termination_point(M, cfg.s)
            elif cfg.kind == "DSoftmax":
                trace.metadata["d"] = cfg.d
            path = out / f"curve_{cfg.kind}_intra_{i}.csv"
            atomic_write_text(path, trace.to_csv("z_y", "loss"))
            written.append(path)
    else:
        masses = _parse_masses(args.M_n, args.log_M_n, "M-n")
        if not masses or args.z_y is None:
            raise cfgmod.ConfigError("inter curves need --M-n/--log-M-n and --z-y")
        zys = [float(v) for v in args.z_y.split(",")]
        i = 0
        for M_n in masses:
            for zy in zys:
                trace = trace_loss_curve(cfg, "inter", M_n=M_n, z_y=zy, step=args.step, lo=args.lo, hi=args.hi)
                path = out / f"curve_{cfg.kind}_inter_{i}.csv"
                atomic_write_text(path, trace.to_csv("z_n", "loss"))
                written.append(path)
                i += 1
    for p in written:
        _echo(f"wrote {p}")
    return EXIT_OK


def cmd_termination(args, extra):
    if extra:
        raise cfgmod.ConfigError(f"unrecognized arguments {extra}")
    cfg = _curve_cfg(args)
    _check_grid(args)
    masses = _parse_masses(args.M_n, args.log_M_n, "M-n")
    if len(masses) != 1:
        raise cfgmod.ConfigError("termination needs exactly one --M-n or --log-M-n value")
    trace = trace_termination(cfg, masses[0], step=args.step, lo=args.lo, hi=args.hi)
    atomic_write_text(Path(args.out), trace.to_csv("z_y", "d_prime"))
    _echo(f"wrote {args.out}")
    return EXIT_OK


def _load_weights(path):
    raw = Path(path).read_bytes()[:5]
    if raw == b"DSPS1":
        return read_snapshot(path)[4]
    return read_matrix_snapshot(path)


def cmd_weight_stats(args, extra):
    if extra:
        raise cfgmod.ConfigError(f"unrecognized arguments {extra}")
    _echo(f"seed={args.seed}")
    rng = make_rng(args.seed)
    if args.snapshot:
        weights = _load_weights(args.snapshot)
    else:
        weights = seeded_gaussian_matrix(args.K, args.n, rng)
    stats = pairwise_cosine_stats(weights, args.pairs, rng)
    text = stats.to_csv()
    atomic_write_text(Path(args.out), f"# seed={args.seed}\n" + text)
    _echo(f"mean={stats.mean:.6f} std={stats.std:.6f} pairs={stats.pair_count}")
    return EXIT_OK


def cmd_ps_serve(args, extra):
    if extra:
        raise cfgmod.ConfigError(f"unrecognized arguments {extra}")
    if args.load:
        store = ParameterServer.from_snapshot(args.load, num_shards=args.shards)
    else:
        store = ParameterServer(seeded_gaussian_matrix(args.K, args.n, make_rng(args.seed)), num_shards=args.shards)
    _echo(f"seed={args.seed} K={store.K} n={store.n} shards={store.num_shards}")
    try:
        server, (host, port) = serve_in_thread(store, args.host, args.port)
    except OSError as exc:
        _echo(f"error: cannot bind {args.host}:{args.port}: {exc}")
        return EXIT_RUNTIME
    _echo(f"listening on {host}:{port}")
    sys.stderr.flush()
    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.wait(args.log_every):
        _echo(f"op counts: {server.log_counters()}")
    server.shutdown()
    server.server_close()
    _echo(f"final op counts: {server.log_counters()}")
    return EXIT_OK


def cmd_snapshot_tool(args, extra):
    if extra:
        raise cfgmod.ConfigError(f"unrecognized arguments {extra}")
    if args.action == "info":
        K, n, _, versions, vectors = read_snapshot(args.path)
        print(f"K={K} n={n} max_version={int(versions.max()) if K else 0} "
              f"finite={bool(np.all(np.isfinite(vectors)))}")
    elif args.action == "export":
        if not args.dest:
            raise cfgmod.ConfigError("export needs a destination path")
        write_matrix_snapshot(args.dest, read_snapshot(args.path)[4])
        _echo(f"wrote {args.dest}")
    return EXIT_OK


def _add_curve_flags(p):
    p.add_argument("--kind", default="Softmax")
    p.add_argument("--s", type=float, default=32.0)
    p.add_argument("--d", type=float, default=0.9)
    p.add_argument("--m1", type=int, default=4)
    p.add_argument("--m2", type=float, default=0.5)
    p.add_argument("--m3", type=float, default=0.35)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--lo", type=float, default=-1.0)
    p.add_argument("--hi", type=float, default=1.0)
    p.add_argument("--M-n", dest="M_n", help="comma-separated fixed negative masses")
    p.add_argument("--log-M-n", dest="log_M_n", help="same, given as natural logs")


def build_parser():
    parser = argparse.ArgumentParser(prog="dsoftmax", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("train", "train on synthetic data"), ("sweep", "train once per sampling rate")):
        p = sub.add_parser(name, help=help_text,
                           epilog="Config keys can be overridden with --section.key=value.")
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true")
        if name == "train":
            p.add_argument("--out", default="runs/train", help="output directory")
        else:
            p.add_argument("--rates", default="1,1/2,1/4,1/8,1/16")
            p.add_argument("--out", default="runs/sweep.csv")

    p = sub.add_parser("bench", help="time the loss layer")
    p.add_argument("--kinds", default="Softmax,DSoftmax,DSoftmaxK,DSoftmaxB,RandSoftmax")
    p.add_argument("--K", default="100000", help="comma-separated class counts")
    p.add_argument("--B", type=int, default=64)
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--rates", default="1,1/8,1/64")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", default="runs/bench.csv")

    p = sub.add_parser("curves", help="loss curves with a fixed negative mass")
    _add_curve_flags(p)
    p.add_argument("--mode", choices=("intra", "inter"), default="intra")
    p.add_argument("--M", help="comma-separated fixed negative masses")
    p.add_argument("--log-M", dest="log_M", help="same, given as natural logs")
    p.add_argument("--z-y", dest="z_y", help="comma-separated fixed positive cosines (inter mode)")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", default="runs/curves")

    p = sub.add_parser("termination", help="inter-class termination point against z_y")
    _add_curve_flags(p)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", default="runs/termination.csv")

    p = sub.add_parser("weight-stats", help="pairwise class-weight cosine statistics")
    p.add_argument("--K", type=int, default=10000)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--pairs", type=int, default=1_000_000)
    p.add_argument("--snapshot", help="read weights from a DSPS1 or DSFX1 file instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", default="runs/weight_stats.csv")

    p = sub.add_parser("ps-serve", help="serve class weights over TCP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7070)
    p.add_argument("--shards", type=int, default=4)
    p.add_argument("--K", type=int, default=10000)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--load", help="start from a DSPS1 snapshot")
    p.add_argument("--log-every", type=float, default=30.0, help="seconds between counter logs")

    p = sub.add_parser("snapshot-tool", help="inspect or convert weight snapshots")
    p.add_argument("action", choices=("info", "export"))
    p.add_argument("path")
    p.add_argument("dest", nargs="?")
    return parser


_COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "curves": cmd_curves,
    "termination": cmd_termination,
    "weight-stats": cmd_weight_stats,
    "ps-serve": cmd_ps_serve,
    "snapshot-tool": cmd_snapshot_tool,
}


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args, extra)
    except cfgmod.ConfigError as exc:
        _echo(f"config error: {exc}")
        return EXIT_CONFIG
    except Exception as exc:
        _echo(f"error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
