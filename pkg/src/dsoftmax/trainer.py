"""Synthetic embedding training with any loss/sampler pairing.

Features come from a (learnable) encoder applied to noisy copies of random
class prototypes; class weights live in a weight store (the parameter
server or a plain in-memory matrix) and are fetched and updated per step.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np

from .analysis import pairwise_cosine_stats
from .core_math import cosine_activations, make_rng, normalize_rows, spawn_rngs
from .csvio import format_csv
from .losses import (
    ENTANGLED_KINDS,
    HYBRID_KINDS,
    ActivationBatch,
    LossConfig,
    chain_to_parameters,
    d_softmax_full,
    loss_forward_backward,
)
from .sampling import (
    as_rate,
    full_classes,
    sample_batch_B,
    sample_classes_K,
    sample_rand_entangled,
)

NORM_FLOOR = 1e-8

_COMPATIBLE = {
    "DSoftmax": ("FullClasses", "ClassSubset", "BatchSubset"),
    **{k: ("FullClasses", "RandEntangled") for k in ENTANGLED_KINDS + HYBRID_KINDS},
}


@dataclass
class SyntheticDataset:
    prototypes: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    noise_sigma: float
    metadata: dict = field(default_factory=dict)

    @property
    def C(self):
        return self.prototypes.shape[0]

    @property
    def n(self):
        return self.prototypes.shape[1]

    def __len__(self):
        return self.labels.size


def generate_synthetic_dataset(C, n, per_class, noise_sigma, rng):
    """``per_class`` samples of ``normalize(prototype + noise_sigma * N(0, I))`` per class."""
    if C < 2 or per_class < 2:
        raise ValueError("need C >= 2 classes and per_class >= 2 samples")
    prototypes = normalize_rows(rng.standard_normal((C, n)), "prototypes")
    labels = np.repeat(np.arange(C), per_class)
    noise = rng.standard_normal((labels.size, n))
    features = normalize_rows(prototypes[labels] + noise_sigma * noise, "samples")
    within = float(np.einsum("ij,ij->i", features, prototypes[labels]).mean())
    meta = {"C": C, "n": n, "per_class": per_class, "noise_sigma": noise_sigma,
            "mean_cos_to_prototype": within}
    return SyntheticDataset(prototypes, features, labels, noise_sigma, meta)


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: str = "FullClasses"
    rate: Fraction = Fraction(1)
    B: int = 64
    epochs: int = 30
    lr: float = 0.2
    momentum: float = 0.9
    seed: int = 0
    deterministic: bool = True
    encoder: str = "linear"
    inter_weight: float = 1.0
    metrics_every: int = 50
    pair_budget: int = 100_000
    eval_pairs: int = 4000

    def __post_init__(self):
        self.rate = as_rate(self.rate)
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.encoder not in ("identity", "linear"):
            raise ValueError(f"encoder must be 'identity' or 'linear', got {self.encoder!r}")
        allowed = _COMPATIBLE[self.loss.kind]
        if self.sampler not in allowed:
            raise ValueError(
                f"loss {self.loss.kind} cannot train with sampler {self.sampler}; "
                f"compatible samplers: {allowed}"
            )


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss: float
    intra_loss: float
    inter_loss: float
    intra_cos_mean: float
    weight_cos_mean: float
    weight_cos_std: float
    pair_accuracy: float
    step_seconds: float

    TIMING_FIELDS = ("step_seconds",)

    def deterministic_values(self):
        return tuple(getattr(self, f.name) for f in fields(self) if f.name not in self.TIMING_FIELDS)


def metrics_csv(records, comments=()):
    header = [f.name for f in fields(MetricsRecord)]
    return format_csv(header, (list(asdict(r).values()) for r in records), comments)


def evaluate_pairs(embeddings, labels, num_pairs, rng):
    """Best-threshold verification accuracy on balanced same/different pairs."""
    emb = normalize_rows(embeddings, "embeddings")
    labels = np.asarray(labels)
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if classes.size < 2:
        raise ValueError("pair evaluation needs at least two classes")
    multi = np.flatnonzero(counts >= 2)
    if multi.size == 0:
        raise ValueError("no class has two samples; cannot form positive pairs")
    members = [np.flatnonzero(inverse == c) for c in range(classes.size)]

    n_pos = num_pairs // 2
    n_neg = num_pairs - n_pos
    pc = multi[rng.integers(0, multi.size, n_pos)]
    pos_a = np.empty(n_pos, dtype=np.int64)
    pos_b = np.empty(n_pos, dtype=np.int64)
    for j, c in enumerate(pc):
        pos_a[j], pos_b[j] = rng.choice(members[c], size=2, replace=False)
    neg_a = rng.integers(0, labels.size, n_neg)
    neg_b = rng.integers(0, labels.size, n_neg)
    clash = labels[neg_a] == labels[neg_b]
    while clash.any():
        neg_b[clash] = rng.integers(0, labels.size, int(clash.sum()))
        clash = labels[neg_a] == labels[neg_b]

    a = np.concatenate([pos_a, neg_a])
    b = np.concatenate([pos_b, neg_b])
    same = np.concatenate([np.ones(n_pos, bool), np.zeros(n_neg, bool)])
    cos = np.einsum("ij,ij->i", emb[a], emb[b])
    return best_threshold_accuracy(cos, same)


def best_threshold_accuracy(scores, same):
    """Max accuracy of ``score >= t -> same`` over every threshold ``t``."""
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], same[order]
    # accept the top-j scores; only cut where the score changes
    tp = np.concatenate([[0], np.cumsum(y)])
    fp = np.concatenate([[0], np.cumsum(~y)])
    n_neg = (~y).sum()
    correct = tp + (n_neg - fp)
    cuts = np.concatenate([[True], s[1:] != s[:-1], [True]])
    return float(correct[cuts].max() / s.size)


class Trainer:
    """SGD with momentum over encoder parameters and fetched class weights."""

    def __init__(self, config, dataset, store):
        self.cfg = config
        self.data = dataset
        self.store = store
        if store.n != dataset.n:
            raise ValueError(f"store dimension {store.n} != dataset dimension {dataset.n}")
        if store.K != dataset.C:
            raise ValueError(f"store holds {store.K} classes, dataset has {dataset.C}")
        self.order_rng, self.sample_rng, enc_rng, self.eval_seed = self._streams(config.seed)
        n = dataset.n
        if config.encoder == "linear":
            self.enc_w = np.eye(n) + enc_rng.standard_normal((n, n)) / np.sqrt(n)
            self.enc_b = np.zeros(n)
        else:
            self.enc_w = None
            self.enc_b = None
        self.vel_w = np.zeros((store.K, n))
        self.vel_enc_w = None if self.enc_w is None else np.zeros_like(self.enc_w)
        self.vel_enc_b = None if self.enc_b is None else np.zeros_like(self.enc_b)
        self.step_count = 0

    @staticmethod
    def _streams(seed):
        order, sample, enc, ev = spawn_rngs(seed, 4)
        return order, sample, enc, int(ev.integers(0, 2**63))

    def encode(self, raw):
        if self.enc_w is None:
            return raw
        return raw @ self.enc_w + self.enc_b

    def layout(self, labels, sample_rng=None):
        """Columns to fetch, each row's positive column and the loss options."""
        rng = self.sample_rng if sample_rng is None else sample_rng
        cfg = self.cfg
        K = self.store.K
        kw = {}
        if cfg.sampler == "FullClasses":
            cols = full_classes(K).class_indices
            pos = labels.copy()
        elif cfg.sampler == "BatchSubset":
            cols = full_classes(K).class_indices
            pos = labels.copy()
            kw["inter_rows"] = sample_batch_B(labels.size, cfg.rate, rng).batch_rows
        elif cfg.sampler == "ClassSubset":
            uniq = np.unique(labels)
            negs = sample_classes_K(K, labels, cfg.rate, rng).class_indices
            cols = np.concatenate([uniq, negs])
            pos = np.searchsorted(uniq, labels)
            mask = np.zeros((labels.size, cols.size), dtype=bool)
            mask[:, uniq.size:] = True
            kw["negative_mask"] = mask
        elif cfg.sampler == "RandEntangled":
            cols = sample_rand_entangled(K, labels, cfg.rate, rng).class_indices
            pos = np.searchsorted(cols, labels)
        else:
            raise ValueError(f"unknown sampler {cfg.sampler!r}")
        if cfg.loss.kind == "DSoftmax" and cfg.inter_weight != 1.0:
            kw["inter_weight"] = cfg.inter_weight
        return cols, pos, kw

    def gradients(self, idx, layout=None):
        """Loss output and parameter gradients for the batch ``idx`` (no update)."""
        raw = self.data.features[idx]
        labels = self.data.labels[idx]
        cols, pos, kw = self.layout(labels) if layout is None else layout
        weights, _ = self.store.fetch_rows(cols)
        x = self.encode(raw)
        self._check_norms(x, weights)
        z = cosine_activations(x, weights)
        out = loss_forward_backward(ActivationBatch(z, pos), self.cfg.loss, **kw)
        dx, dw = chain_to_parameters(out.dz / idx.size, x, weights)
        grads = {"cols": cols, "dw": dw}
        if self.enc_w is not None:
            grads["enc_w"] = raw.T @ dx
            grads["enc_b"] = dx.sum(axis=0)
        return out, grads

    @staticmethod
    def _check_norms(x, w):
        if np.linalg.norm(x, axis=1).min() <= NORM_FLOOR or np.linalg.norm(w, axis=1).min() <= NORM_FLOOR:
            raise FloatingPointError("a feature or weight norm collapsed to zero")

    def step(self, idx):
        cfg = self.cfg
        out, g = self.gradients(idx)
        cols = g["cols"]
        vel = cfg.momentum * self.vel_w[cols] + g["dw"]
        self.vel_w[cols] = vel
        self.store.push_rows(cols, -cfg.lr * vel, parallel=not cfg.deterministic)
        if self.enc_w is not None:
            self.vel_enc_w = cfg.momentum * self.vel_enc_w + g["enc_w"]
            self.vel_enc_b = cfg.momentum * self.vel_enc_b + g["enc_b"]
            self.enc_w = self.enc_w - cfg.lr * self.vel_enc_w
            self.enc_b = self.enc_b - cfg.lr * self.vel_enc_b
        self.step_count += 1
        return out

    def batches(self):
        N = len(self.data)
        perm = self.order_rng.permutation(N)
        for start in range(0, N, self.cfg.B):
            yield perm[start:start + self.cfg.B]

    def evaluate(self, epoch, step_seconds):
        cfg = self.cfg
        W = self.store.to_matrix()
        feats = self.encode(self.data.features)
        self._check_norms(feats, W)
        labels = self.data.labels
        z = cosine_activations(feats, W)
        rows = np.arange(labels.size)
        intra_cos = float(z[rows, labels].mean())

        dissected = d_softmax_full(ActivationBatch(z, labels), cfg.loss)
        if cfg.loss.kind == "DSoftmax":
            loss = float(dissected.intra.mean() + cfg.inter_weight * dissected.inter.mean())
        else:
            loss = loss_forward_backward(ActivationBatch(z, labels), cfg.loss).mean
        stats = pairwise_cosine_stats(W, cfg.pair_budget, make_rng(self.eval_seed))
        acc = evaluate_pairs(feats, labels, cfg.eval_pairs, make_rng(self.eval_seed + 1))
        return MetricsRecord(
            step=self.step_count, epoch=epoch, loss=loss,
            intra_loss=float(dissected.intra.mean()), inter_loss=float(dissected.inter.mean()),
            intra_cos_mean=intra_cos, weight_cos_mean=stats.mean, weight_cos_std=stats.std,
            pair_accuracy=acc, step_seconds=step_seconds,
        )

    def run(self):
        records = [self.evaluate(0, 0.0)]
        elapsed, timed = 0.0, 0
        for epoch in range(1, self.cfg.epochs + 1):
            for idx in self.batches():
                t0 = time.perf_counter()
                self.step(idx)
                elapsed += time.perf_counter() - t0
                timed += 1
                if self.step_count % self.cfg.metrics_every == 0:
                    records.append(self.evaluate(epoch, elapsed / timed))
                    elapsed, timed = 0.0, 0
        if records[-1].step != self.step_count:
            records.append(self.evaluate(self.cfg.epochs, elapsed / max(timed, 1)))
        return records


def initial_class_weights(C, n, seed):
    """Gaussian class weights; drawn from their own stream so every run shares them."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 1]))).standard_normal((C, n))


def train(config, dataset, store):
    return Trainer(config, dataset, store).run()


def run_sampling_sweep(base, rates, dataset, make_store):
    """One training run per rate with identical seeds; returns ``(rate, final record)`` rows.

    ``make_store`` builds a fresh weight store for every run.
    """
    rows = []
    for rate in rates:
        cfg = TrainConfig(**{**_shallow(base), "rate": as_rate(rate)})
        records = train(cfg, dataset, make_store())
        rows.append((cfg.rate, records[-1]))
    return rows


def _shallow(cfg):
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def sweep_csv(rows, comments=()):
    names = [f.name for f in fields(MetricsRecord)]
    header = ["rate"] + names
    body = ([str(rate)] + [getattr(rec, k) for k in names] for rate, rec in rows)
    return format_csv(header, body, comments)
