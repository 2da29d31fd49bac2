"""Per-mini-batch sampling of negative classes or batch rows."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

SAMPLER_KINDS = ("FullClasses", "ClassSubset", "BatchSubset", "RandEntangled")


@dataclass(frozen=True)
class SampleSet:
    kind: str
    class_indices: np.ndarray
    batch_rows: np.ndarray
    rate: Fraction

    def __len__(self):
        if self.kind == "BatchSubset":
            return int(self.batch_rows.size)
        return int(self.class_indices.size)


def as_rate(rate):
    """Exact rational rate in (0, 1]; strings like ``"1/64"`` are accepted."""
    r = Fraction(rate) if not isinstance(rate, float) else Fraction(rate).limit_denominator(1 << 20)
    if not 0 < r <= 1:
        raise ValueError(f"sampling rate must lie in (0, 1], got {rate}")
    return r


def round_half_up(x):
    return math.floor(Fraction(x) + Fraction(1, 2))


def _unique_labels(batch_labels, K):
    labels = np.unique(np.asarray(batch_labels, dtype=np.int64))
    if labels.size and (labels[0] < 0 or labels[-1] >= K):
        raise ValueError(f"batch labels must lie in [0, {K})")
    return labels


def _sample_excluding(K, excluded, size, rng):
    """``size`` distinct ids from ``[0, K)`` minus sorted ``excluded``, sorted.

    Draws ranks in the reduced range and shifts them past the excluded ids,
    so the cost does not scale with K for small samples.
    """
    free = K - excluded.size
    if size >= free:
        mask = np.ones(K, dtype=bool)
        mask[excluded] = False
        return np.flatnonzero(mask)
    ranks = np.sort(rng.choice(free, size=size, replace=False))
    # the j-th excluded id sits at rank excluded[j] - j among survivors
    shift = np.searchsorted(excluded - np.arange(excluded.size), ranks, side="right")
    return ranks + shift


def sample_classes_K(K, batch_labels, rate, rng):
    """Uniform negatives drawn from the classes absent from the batch."""
    r = as_rate(rate)
    labels = _unique_labels(batch_labels, K)
    size = round_half_up(r * (K - labels.size))
    if size == 0:
        raise ValueError(
            f"rate {r} leaves no negative classes (K={K}, {labels.size} batch labels)"
        )
    classes = _sample_excluding(K, labels, size, rng)
    return SampleSet("ClassSubset", classes, np.zeros(0, dtype=np.int64), r)


def sample_batch_B(B, rate, rng):
    """Rows of the batch that take part in the inter-class term."""
    r = as_rate(rate)
    size = max(1, round_half_up(r * B))
    if size >= B:
        rows = np.arange(B)
    else:
        rows = np.sort(rng.choice(B, size=size, replace=False))
    return SampleSet("BatchSubset", np.zeros(0, dtype=np.int64), rows.astype(np.int64), r)


def sample_rand_entangled(K, batch_labels, rate, rng):
    """Batch labels plus uniform extras, about ``rate * K`` classes in total."""
    r = as_rate(rate)
    labels = _unique_labels(batch_labels, K)
    total = round_half_up(r * K)
    extra = max(total - labels.size, 0)
    if labels.size + extra < 2:
        raise ValueError(f"rate {r} leaves no negative classes (K={K})")
    picked = _sample_excluding(K, labels, extra, rng) if extra else np.zeros(0, dtype=np.int64)
    classes = np.union1d(labels, picked)
    return SampleSet("RandEntangled", classes, np.zeros(0, dtype=np.int64), r)


def full_classes(K):
    return SampleSet("FullClasses", np.arange(K), np.zeros(0, dtype=np.int64), Fraction(1))
