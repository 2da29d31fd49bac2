"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (printed immediately and again in
the terminal summary) and then asserts, so a failing criterion fails the run.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from dsoftmax import config as cfgmod
from dsoftmax.analysis import intra_termination_point, pairwise_cosine_stats
from dsoftmax.bench import bench_loss_layer
from dsoftmax.core_math import make_rng, seeded_gaussian_matrix
from dsoftmax.losses import (
    HYBRID_KINDS,
    LOSS_KINDS,
    ActivationBatch,
    LossConfig,
    loss_forward_backward,
    softmax_family_forward_backward,
)
from dsoftmax.param_server import InMemoryWeights, ParameterServer, PSClient, serve_in_thread
from dsoftmax.sampling import round_half_up, sample_batch_B, sample_classes_K
from dsoftmax.trainer import TrainConfig, generate_synthetic_dataset, initial_class_weights, train

from oracles import central_difference, relative_error

VERDICTS = {}


def verdict(number, title, ok, detail):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    VERDICTS[number] = line
    print(line, flush=True)
    assert ok, line


# --- shared synthetic runs (criteria 4, 5, 9) ----------------------------------

def _defaults():
    values = cfgmod.load()
    return cfgmod.train_config(values), cfgmod.data_params(values)


@pytest.fixture(scope="module")
def synthetic():
    base, dp = _defaults()
    data = generate_synthetic_dataset(dp["C"], dp["n"], dp["per_class"], dp["noise_sigma"], make_rng(dp["seed"]))
    cache = {}

    def run(name, kind, sampler="FullClasses", rate=1, inter_weight=1.0):
        if name not in cache:
            cfg = TrainConfig(
                loss=LossConfig(kind=kind, s=32, d=0.9), sampler=sampler, rate=rate,
                B=base.B, epochs=base.epochs, lr=base.lr, momentum=base.momentum, seed=base.seed,
                inter_weight=inter_weight,
            )
            t0 = time.perf_counter()
            records = train(cfg, data, InMemoryWeights(initial_class_weights(data.C, data.n, cfg.seed)))
            cache[name] = (records[-1], time.perf_counter() - t0)
        return cache[name]

    return data, run


# --- 1 -------------------------------------------------------------------------

def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for kind in LOSS_KINDS:
        for s in (1.0, 8.0, 32.0):
            cfg = LossConfig(kind=kind, s=s)
            rng = make_rng(100 * LOSS_KINDS.index(kind) + int(s))
            for _ in range(20):
                batch = ActivationBatch(rng.uniform(-0.95, 0.95, (3, 6)), rng.integers(0, 6, 3))
                out = loss_forward_backward(batch, cfg)

                def f(z, pos=batch.positive_col):
                    return loss_forward_backward(ActivationBatch(z, pos), cfg).loss.sum()

                fd = central_difference(f, batch.z, step=1e-6)
                keep = ~batch.positive_mask() if kind in HYBRID_KINDS else np.ones(fd.shape, bool)
                worst = max(worst, relative_error(out.dz[keep], fd[keep]))
                checked += 1
    elapsed = time.perf_counter() - t0
    verdict(1, "gradient oracle", worst < 1e-5 and elapsed < 10,
            f"{checked} batches, max rel err {worst:.2e} (< 1e-5), {elapsed:.1f}s (< 10s)")


# --- 2 -------------------------------------------------------------------------

def test_criterion_2_termination_math():
    s = 32.0
    d = intra_termination_point(math.exp(16), s)
    # one negative carrying all the mass: M = e^{s d}
    def grad(z_y):
        out = softmax_family_forward_backward(ActivationBatch([[z_y, d]], [0]), LossConfig(kind="Softmax", s=s))
        return out.loss[0], out.dz[0, 0]

    _, g_mid = grad(d)
    lo_loss, _ = grad(d - 4 / s)
    hi_loss, _ = grad(d + 4 / s)
    left_ok = abs(lo_loss - (s * d - s * (d - 4 / s))) < 0.02 * s * (4 / s)
    right_ok = hi_loss < 0.02
    ok = d == 0.5 and abs(g_mid + s / 2) < 1e-9 and left_ok and right_ok
    verdict(2, "termination-point math", ok,
            f"d={d!r}, grad at d={g_mid:.12f} (target {-s / 2}), "
            f"left branch err {abs(lo_loss - 4):.4f} < 0.08, right loss {hi_loss:.4f} < 0.02")


# --- 3 -------------------------------------------------------------------------

def test_criterion_3_orthogonality():
    t0 = time.perf_counter()
    rng = make_rng(0)
    weights = seeded_gaussian_matrix(10000, 256, rng)
    stats = pairwise_cosine_stats(weights, 1_000_000, rng)
    elapsed = time.perf_counter() - t0
    ok = abs(stats.mean) < 0.005 and 0.055 <= stats.std <= 0.070 and elapsed < 30
    verdict(3, "orthogonality statistics", ok,
            f"mean {stats.mean:+.5f} (|.| < 0.005), std {stats.std:.5f} in [0.055, 0.070], "
            f"{stats.pair_count} pairs, {elapsed:.1f}s (< 30s)")


# --- 4 -------------------------------------------------------------------------

def test_criterion_4_entanglement(synthetic):
    _, run = synthetic
    ds, t_ds = run("dsoftmax", "DSoftmax")
    sm, t_sm = run("softmax", "Softmax")
    gap = ds.intra_cos_mean - sm.intra_cos_mean
    ok = gap >= 0.15 and ds.intra_cos_mean > 0.8 and max(t_ds, t_sm) < 300
    verdict(4, "entanglement demonstration", ok,
            f"intra cos D-Softmax {ds.intra_cos_mean:.4f} (> 0.8) vs Softmax {sm.intra_cos_mean:.4f}, "
            f"gap {gap:.4f} (>= 0.15), runs {t_ds:.1f}s/{t_sm:.1f}s")


# --- 5 -------------------------------------------------------------------------

def test_criterion_5_inter_regularization(synthetic):
    data, run = synthetic
    bound = 3 / math.sqrt(data.n)
    intra_only, _ = run("intra_only", "DSoftmax", inter_weight=0.0)
    full, _ = run("dsoftmax", "DSoftmax")
    sub, _ = run("dsoftmax_k8", "DSoftmax", "ClassSubset", Fraction(1, 8))
    ratio = sub.weight_cos_std / full.weight_cos_std
    ok = intra_only.weight_cos_mean > bound and abs(full.weight_cos_mean) < bound and abs(ratio - 1) <= 0.2
    verdict(5, "inter term as regularizer", ok,
            f"3/sqrt(n)={bound:.3f}; intra-only weight cos mean {intra_only.weight_cos_mean:.4f} (> bound), "
            f"full {full.weight_cos_mean:+.4f} (|.| < bound), std rate 1/8 vs 1: "
            f"{sub.weight_cos_std:.4f}/{full.weight_cos_std:.4f} = {ratio:.3f} (within 20%)")


# --- 6 -------------------------------------------------------------------------

def test_criterion_6_sampling_equivalences():
    data = generate_synthetic_dataset(30, 16, 8, 0.1, make_rng(5))
    common = dict(loss=LossConfig(kind="DSoftmax"), B=16, epochs=3, seed=11, deterministic=True,
                  metrics_every=5, pair_budget=300, eval_pairs=200)
    full_store = ParameterServer(initial_class_weights(30, 16, 11))
    sub_store = ParameterServer(initial_class_weights(30, 16, 11))
    a = train(TrainConfig(**common), data, full_store)
    b = train(TrainConfig(sampler="BatchSubset", rate=1, **common), data, sub_store)
    bitwise = (full_store.to_matrix().tobytes() == sub_store.to_matrix().tobytes()
               and [r.deterministic_values() for r in a] == [r.deterministic_values() for r in b])

    rng = make_rng(6)
    K, B = 2000, 64
    clashes = 0
    for _ in range(10_000):
        labels = rng.integers(0, K, B)
        clashes += np.intersect1d(sample_classes_K(K, labels, Fraction(1, 8), rng).class_indices, labels).size

    labels = make_rng(7).integers(0, 85000, 256)
    U = np.unique(labels).size
    size_k = len(sample_classes_K(85000, labels, Fraction(1, 64), make_rng(8)))
    size_b = len(sample_batch_B(256, Fraction(1, 64), make_rng(8)))
    sizes_ok = size_b == 4 and size_k == round_half_up(Fraction(85000 - U, 64)) and 1320 <= size_k <= 1330
    verdict(6, "sampling equivalences", bitwise and clashes == 0 and sizes_ok,
            f"batch-subset rate 1 bitwise equal to full: {bitwise}; label clashes in 10000 draws: {clashes}; "
            f"|S_B|={size_b} (4), |S_K|={size_k} (~1.3K, U={U})")


# --- 7 -------------------------------------------------------------------------

def test_criterion_7_speedup():
    t0 = time.perf_counter()
    K, B = 100_000, 64
    store = ParameterServer(seeded_gaussian_matrix(K, 128, make_rng(0)))
    full = bench_loss_layer("DSoftmaxK", K, B, 1, 5, make_rng(1), store=store)
    sampled = bench_loss_layer("DSoftmaxK", K, B, Fraction(1, 64), 5, make_rng(1), store=store)
    half = bench_loss_layer("DSoftmaxK", K // 2, B, 1, 5, make_rng(1),
                            store=ParameterServer(seeded_gaussian_matrix(K // 2, 128, make_rng(0))))
    speedup = full.min_s / sampled.min_s
    scaling = full.min_s / half.min_s
    elapsed = time.perf_counter() - t0
    ok = speedup >= 10 and 1.6 <= scaling <= 2.6 and elapsed < 120
    verdict(7, "sampling speedup", ok,
            f"min time rate 1 {full.min_s * 1e3:.1f} ms vs rate 1/64 {sampled.min_s * 1e3:.1f} ms, "
            f"speedup {speedup:.1f}x (>= 10); K 50000->100000 scaling {scaling:.2f} in [1.6, 2.6]; "
            f"{elapsed:.1f}s (< 120s)")


# --- 8 -------------------------------------------------------------------------

def test_criterion_8_parameter_server_fidelity(tmp_path):
    data = generate_synthetic_dataset(40, 16, 8, 0.1, make_rng(9))
    cfg = TrainConfig(loss=LossConfig(kind="DSoftmax"), sampler="ClassSubset", rate=Fraction(1, 4),
                      B=16, epochs=3, seed=2, deterministic=True, metrics_every=10,
                      pair_budget=300, eval_pairs=200)
    ps = ParameterServer(initial_class_weights(40, 16, 2), num_shards=4)
    oracle = InMemoryWeights(initial_class_weights(40, 16, 2))
    train(cfg, data, ps)
    train(cfg, data, oracle)
    training_ok = ps.to_matrix().tobytes() == oracle.to_matrix().tobytes()

    ids = [0, 7, 13, 39]
    server, (host, port) = serve_in_thread(ps)
    try:
        with PSClient(host, port) as client:
            remote_vec, remote_ver = client.fetch_rows(ids)
    finally:
        server.shutdown()
        server.server_close()
    local_vec, local_ver = ps.fetch_rows(ids)
    socket_ok = remote_vec.tobytes() == local_vec.tobytes() and remote_ver.tobytes() == local_ver.tobytes()

    path = tmp_path / "weights.dsps"
    ps.snapshot(path)
    loaded = ParameterServer.from_snapshot(path, num_shards=2)
    all_ids = np.arange(40)
    snap_ok = (loaded.fetch_rows(all_ids)[0].tobytes() == ps.fetch_rows(all_ids)[0].tobytes()
               and loaded.fetch_rows(all_ids)[1].tolist() == ps.fetch_rows(all_ids)[1].tolist())
    verdict(8, "parameter-server fidelity", training_ok and socket_ok and snap_ok,
            f"training bitwise vs in-memory: {training_ok}; socket fetch byte-equal: {socket_ok}; "
            f"snapshot round-trip bitwise: {snap_ok}")


# --- 9 -------------------------------------------------------------------------

def test_criterion_9_rand_softmax_direction(synthetic):
    _, run = synthetic
    dk, _ = run("dsoftmax_k8", "DSoftmax", "ClassSubset", Fraction(1, 8))
    rs, _ = run("rand_softmax8", "Softmax", "RandEntangled", Fraction(1, 8))
    verdict(9, "D-Softmax-K vs Rand-Softmax", dk.pair_accuracy >= rs.pair_accuracy,
            f"pair accuracy at rate 1/8: D-Softmax-K {dk.pair_accuracy:.4f} >= Rand-Softmax {rs.pair_accuracy:.4f}")
