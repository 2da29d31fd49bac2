"""Termination points, loss-curve traces and class-weight similarity statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_math import normalize_rows
from .csvio import format_csv
from .losses import ENTANGLED_KINDS, margin_transform

# |dL/dz| below this fraction of s counts as "terminated"
GRAD_THRESHOLD = 0.02
HIST_BINS = 200

_CURVE_KINDS = ENTANGLED_KINDS + ("DSoftmax",)


@dataclass
class CurveTrace:
    x: np.ndarray
    y: np.ndarray
    metadata: dict = field(default_factory=dict)
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.shape != self.y.shape:
            raise ValueError("x and y must have the same length")
        if np.any(np.diff(self.x) <= 0):
            raise ValueError("x must be strictly increasing")

    def to_csv(self, x_name="x", y_name="y"):
        comments = [f"{k}={v}" for k, v in self.metadata.items()]
        if self.grad is None:
            return format_csv([x_name, y_name], zip(self.x.tolist(), self.y.tolist()), comments)
        rows = zip(self.x.tolist(), self.y.tolist(), self.grad.tolist())
        return format_csv([x_name, y_name, "grad"], rows, comments)


@dataclass
class SimilarityStats:
    mean: float
    std: float
    bin_edges: np.ndarray
    counts: np.ndarray
    pair_count: int

    def to_csv(self):
        comments = [f"mean={self.mean!r}", f"std={self.std!r}", f"pairs={self.pair_count}"]
        rows = zip(self.bin_edges[:-1].tolist(), self.bin_edges[1:].tolist(), self.counts.tolist())
        return format_csv(["bin_lo", "bin_hi", "count"], rows, comments)


def intra_termination_point(M, s):
    if not (M > 0 and s > 0):
        raise ValueError("M and s must be positive")
    return math.log(M) / s


def inter_termination_point(z_y, M_n, s):
    """``log(e^{s z_y} + M_n) / s``, evaluated without overflow."""
    if not s > 0:
        raise ValueError("s must be positive")
    if M_n < 0:
        raise ValueError("M_n must be non-negative")
    if M_n == 0:
        return float(z_y)
    return float(np.logaddexp(s * z_y, math.log(M_n))) / s


def make_grid(step=1e-3, lo=-1.0, hi=1.0):
    if lo < -1.0 or hi > 1.0 or lo >= hi:
        raise ValueError(f"grid [{lo}, {hi}] must be a proper sub-interval of [-1, 1]")
    if not step > 0:
        raise ValueError("grid step must be positive")
    count = int(round((hi - lo) / step))
    return np.linspace(lo, hi, count + 1)


def _check_kind(kind):
    if kind not in _CURVE_KINDS:
        raise ValueError(f"unsupported curve kind {kind!r}; expected one of {_CURVE_KINDS}")


def intra_curve_values(cfg, z_y, log_M):
    """Loss and dL/dz_y with the negative mass ``e^{log_M}`` held fixed."""
    _check_kind(cfg.kind)
    z_y = np.asarray(z_y, dtype=np.float64)
    if cfg.kind == "DSoftmax":
        t = cfg.log_eps - cfg.s * z_y
        dpsi = np.ones_like(z_y)
    else:
        psi, dpsi = margin_transform(z_y, cfg.kind, cfg.m1, cfg.m2, cfg.m3)
        t = log_M - cfg.s * np.asarray(psi)
    loss = np.logaddexp(0.0, t)
    grad = -cfg.s * np.exp(t - loss) * dpsi
    return loss, grad


def inter_curve_values(cfg, z_n, z_y, log_M_n):
    """Loss and dL/dz_n for one negative, with ``z_y`` and the rest ``M_n`` fixed."""
    _check_kind(cfg.kind)
    z_n = np.asarray(z_n, dtype=np.float64)
    num = np.logaddexp(cfg.s * z_n, log_M_n)
    if cfg.kind == "DSoftmax":
        t = num
    else:
        psi, _ = margin_transform(float(z_y), cfg.kind, cfg.m1, cfg.m2, cfg.m3)
        t = num - cfg.s * psi
    loss = np.logaddexp(0.0, t)
    grad = cfg.s * np.exp(cfg.s * z_n - num) * np.exp(t - loss)
    return loss, grad


def _log(value):
    return -np.inf if value == 0 else math.log(value)


def trace_loss_curve(cfg, mode="intra", *, M=None, M_n=None, z_y=None, step=1e-3, lo=-1.0, hi=1.0):
    """Loss over a cosine grid with the other quantities held fixed.

    ``mode="intra"`` varies ``z_y`` at fixed negative mass ``M``;
    ``mode="inter"`` varies one negative ``z_n`` at fixed ``z_y`` and ``M_n``.
    """
    _check_kind(cfg.kind)
    grid = make_grid(step, lo, hi)
    meta = {"kind": cfg.kind, "mode": mode, "s": cfg.s}
    if cfg.kind == "DSoftmax":
        meta["d"] = cfg.d
    if mode == "intra":
        if M is None and cfg.kind != "DSoftmax":
            raise ValueError("intra curves need a fixed M")
        log_M = _log(M) if M is not None else 0.0
        meta["M"] = M
        loss, grad = intra_curve_values(cfg, grid, log_M)
    elif mode == "inter":
        if M_n is None or (z_y is None and cfg.kind != "DSoftmax"):
            raise ValueError("inter curves need fixed M_n and z_y")
        meta.update(M_n=M_n, z_y=z_y)
        loss, grad = inter_curve_values(cfg, grid, 0.0 if z_y is None else z_y, _log(M_n))
    else:
        raise ValueError(f"mode must be 'intra' or 'inter', got {mode!r}")
    return CurveTrace(grid, loss, meta, grad)


def numeric_intra_termination(cfg, M, step=1e-3, threshold=GRAD_THRESHOLD):
    """Smallest grid ``z_y`` where ``|dL/dz_y| < threshold * s`` (1.0 if none)."""
    grid = make_grid(step)
    _, grad = intra_curve_values(cfg, grid, _log(M))
    hit = np.flatnonzero(np.abs(grad) < threshold * cfg.s)
    return float(grid[hit[0]]) if hit.size else 1.0


def numeric_inter_termination(cfg, z_y, M_n, step=1e-3, threshold=GRAD_THRESHOLD):
    """Largest grid ``z_n`` below which ``|dL/dz_n| < threshold * s``.

    The inter gradient grows with ``z_n``, so the optimisation of a negative
    stalls once ``z_n`` falls under this point.  Returns -1.0 if the gradient
    never drops below the threshold on the grid.
    """
    grid = make_grid(step)
    _, grad = inter_curve_values(cfg, grid, z_y, _log(M_n))
    above = np.flatnonzero(np.abs(grad) >= threshold * cfg.s)
    if above.size == 0:
        return 1.0
    if above[0] == 0:
        return -1.0
    return float(grid[above[0] - 1])


def trace_termination(cfg, M_n, step=1e-3, lo=-1.0, hi=1.0, threshold=GRAD_THRESHOLD):
    """Numerically located inter-class termination point d' against ``z_y``."""
    _check_kind(cfg.kind)
    zs = make_grid(step, lo, hi)
    ys = np.array([numeric_inter_termination(cfg, z, M_n, step, threshold) for z in zs])
    meta = {
        "kind": cfg.kind, "s": cfg.s, "M_n": M_n,
        "threshold": f"{threshold}*s", "grid_step": step,
    }
    return CurveTrace(zs, ys, meta)


def _sample_pairs(K, budget, rng):
    total = K * (K - 1) // 2
    if budget >= total:
        i, j = np.triu_indices(K, k=1)
        return i, j
    chosen = np.zeros(0, dtype=np.int64)
    while chosen.size < budget:
        need = budget - chosen.size
        a = rng.integers(0, K, size=need + need // 8 + 16)
        b = rng.integers(0, K, size=a.size)
        keep = a != b
        lo, hi = np.minimum(a, b)[keep], np.maximum(a, b)[keep]
        keys = lo * K + hi
        # first-seen order keeps the draw reproducible
        merged = np.concatenate([chosen, keys])
        _, first = np.unique(merged, return_index=True)
        chosen = merged[np.sort(first)][:budget]
    return chosen // K, chosen % K


def pairwise_cosine_stats(weights, pair_budget, rng, bins=HIST_BINS, chunk=1 << 16):
    """Mean, std and histogram of cosines between distinct weight rows.

    Pairs are drawn uniformly without replacement; when the budget covers
    every pair they are enumerated exhaustively.
    """
    w = normalize_rows(weights, "weights")
    K = w.shape[0]
    if K < 2:
        raise ValueError("need at least two weight rows")
    if pair_budget < 1:
        raise ValueError("pair_budget must be >= 1")
    i, j = _sample_pairs(K, int(pair_budget), rng)
    cos = np.empty(i.size)
    for start in range(0, i.size, chunk):
        sl = slice(start, start + chunk)
        cos[sl] = np.einsum("ij,ij->i", w[i[sl]], w[j[sl]])
    np.clip(cos, -1.0, 1.0, out=cos)
    counts, edges = np.histogram(cos, bins=bins, range=(-1.0, 1.0))
    return SimilarityStats(float(cos.mean()), float(cos.std()), edges, counts, int(cos.size))
