"""Wall-clock timing of one loss-layer forward/backward pass.

A pass covers sampling, fetching class weights from the store, cosine
activations, the loss and its gradient, and the chain rule back to features
and weights.  The encoder is not part of it.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core_math import cosine_activations, normalize_rows, seeded_gaussian_matrix
from .csvio import format_csv, parse_csv
from .losses import (
    ActivationBatch,
    LossConfig,
    chain_to_parameters,
    d_softmax_full,
    d_softmax_intra,
    softmax_family_forward_backward,
)
from .param_server import ParameterServer
from .sampling import as_rate, sample_batch_B, sample_classes_K, sample_rand_entangled

BENCH_KINDS = ("Softmax", "DSoftmax", "DSoftmaxK", "DSoftmaxB", "RandSoftmax", "RandArcFace")
CSV_COLUMNS = ("kind", "K", "B", "rate", "reps", "mean_s", "std_s", "min_s", "bytes")


@dataclass(frozen=True)
class BenchResult:
    kind: str
    K: int
    B: int
    rate: Fraction
    reps: int
    mean_s: float
    std_s: float
    min_s: float
    median_s: float
    bytes: int


def _rowwise_cos_and_grad(dz, x, w):
    """Chain a per-row gradient through ``cos(x_i, w_i)``."""
    xn = np.linalg.norm(x, axis=1)
    wn = np.linalg.norm(w, axis=1)
    xh, wh = x / xn[:, None], w / wn[:, None]
    z = np.einsum("ij,ij->i", xh, wh)
    dx = dz[:, None] * (wh - z[:, None] * xh) / xn[:, None]
    dw = dz[:, None] * (xh - z[:, None] * wh) / wn[:, None]
    return dx, dw


def loss_layer_pass(kind, features, labels, store, rate, rng, cfg=None):
    """One pass; returns ``(mean loss, rows fetched)``."""
    K = store.K
    if kind in ("Softmax", "DSoftmax"):
        cols = np.arange(K)
        w, _ = store.fetch_rows(cols)
        z = cosine_activations(features, w)
        batch = ActivationBatch(z, labels)
        c = cfg or LossConfig(kind=kind)
        out = d_softmax_full(batch, c) if kind == "DSoftmax" else softmax_family_forward_backward(batch, c)
        chain_to_parameters(out.dz, features, w)
        return out.mean, cols.size
    if kind == "DSoftmaxK":
        uniq = np.unique(labels)
        negs = sample_classes_K(K, labels, rate, rng).class_indices
        cols = np.concatenate([uniq, negs])
        w, _ = store.fetch_rows(cols)
        z = cosine_activations(features, w)
        mask = np.zeros(z.shape, dtype=bool)
        mask[:, uniq.size:] = True
        out = d_softmax_full(
            ActivationBatch(z, np.searchsorted(uniq, labels)), cfg or LossConfig(), negative_mask=mask
        )
        chain_to_parameters(out.dz, features, w)
        return out.mean, cols.size
    if kind == "DSoftmaxB":
        c = cfg or LossConfig()
        rows = sample_batch_B(labels.size, rate, rng).batch_rows
        cols = np.arange(K)
        w, _ = store.fetch_rows(cols)
        # intra term on every row touches only its own class weight
        xh = normalize_rows(features)
        wpos = w[labels]
        z_pos = np.clip(np.einsum("ij,ij->i", xh, normalize_rows(wpos)), -1.0, 1.0)
        intra, d_intra = d_softmax_intra(z_pos, c)
        _rowwise_cos_and_grad(d_intra, features, wpos)
        # inter term only on the sampled rows, against every other class
        z = cosine_activations(features[rows], w)
        neg = np.ones(z.shape, dtype=bool)
        neg[np.arange(rows.size), labels[rows]] = False
        out = d_softmax_full(ActivationBatch(z, labels[rows]), c, negative_mask=neg)
        dz = out.dz
        dz[np.arange(rows.size), labels[rows]] = 0.0
        chain_to_parameters(dz, features[rows], w)
        return float(intra.mean() + out.inter.sum() / labels.size), cols.size
    if kind in ("RandSoftmax", "RandArcFace"):
        cols = sample_rand_entangled(K, labels, rate, rng).class_indices
        w, _ = store.fetch_rows(cols)
        z = cosine_activations(features, w)
        c = cfg or LossConfig(kind="Softmax" if kind == "RandSoftmax" else "ArcFace")
        out = softmax_family_forward_backward(ActivationBatch(z, np.searchsorted(cols, labels)), c)
        chain_to_parameters(out.dz, features, w)
        return out.mean, cols.size
    raise ValueError(f"unknown bench kind {kind!r}; expected one of {BENCH_KINDS}")


def bench_loss_layer(kind, K, B, rate, reps, rng, n=128, store=None):
    """Time ``reps`` passes after one discarded warm-up pass.

    Features and class weights are drawn once from ``rng``; sampling inside
    each pass draws from the same generator.
    """
    if reps < 5:
        raise ValueError("reps must be >= 5")
    rate = as_rate(rate)
    if store is None:
        store = ParameterServer(seeded_gaussian_matrix(K, n, rng))
    features = seeded_gaussian_matrix(B, store.n, rng)
    labels = rng.integers(0, K, size=B)
    loss_layer_pass(kind, features, labels, store, rate, rng)
    times, fetched = [], 0
    for _ in range(reps):
        t0 = time.perf_counter()
        _, fetched = loss_layer_pass(kind, features, labels, store, rate, rng)
        times.append(time.perf_counter() - t0)
    return BenchResult(
        kind=kind, K=K, B=B, rate=rate, reps=reps,
        mean_s=statistics.fmean(times), std_s=statistics.pstdev(times),
        min_s=min(times), median_s=statistics.median(times),
        bytes=int(fetched) * store.n * 8,
    )


def emit_bench_csv(results, comments=()):
    results = list(results)
    if not results:
        raise ValueError("no bench results to write")
    rows = (
        [r.kind, r.K, r.B, str(r.rate), r.reps, r.mean_s, r.std_s, r.min_s, r.bytes]
        for r in results
    )
    return format_csv(CSV_COLUMNS, rows, comments)


def parse_bench_csv(text):
    """Inverse of :func:`emit_bench_csv` (median is not stored, so it is NaN)."""
    _, header, rows = parse_csv(text)
    if tuple(header) != CSV_COLUMNS:
        raise ValueError(f"unexpected bench CSV header {header}")
    out = []
    for kind, K, B, rate, reps, mean_s, std_s, min_s, nbytes in rows:
        out.append(BenchResult(
            kind=kind, K=int(K), B=int(B), rate=Fraction(rate), reps=int(reps),
            mean_s=float(mean_s), std_s=float(std_s), min_s=float(min_s),
            median_s=float("nan"), bytes=int(nbytes),
        ))
    return out
