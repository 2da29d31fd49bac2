"""Softmax-family losses and the dissected (intra + inter) loss.

Every loss works on cosine activations ``z`` (rows = samples, columns =
candidate classes) and returns per-row values plus the analytic gradient
``dz``.  ``chain_to_parameters`` carries ``dz`` back to raw features and
class weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_math import COS_CLAMP, masked_log_sum_exp, row_norms

ABSENT = -1

ENTANGLED_KINDS = ("Softmax", "SphereFace", "CosFace", "ArcFace")
HYBRID_KINDS = ("HybridSoftmaxInter", "HybridArcInter")
LOSS_KINDS = ENTANGLED_KINDS + ("DSoftmax",) + HYBRID_KINDS

_CONFIG_KEYS = ("kind", "s", "d", "m1", "m2", "m3")


@dataclass(frozen=True)
class LossConfig:
    """Loss kind, scale and margins.

    ``d`` is the intra-class termination target; ``eps`` is derived from it
    and never stored independently.  Margins irrelevant to ``kind`` are kept
    but ignored.
    """

    kind: str = "DSoftmax"
    s: float = 32.0
    d: float = 0.9
    m1: int = 4
    m2: float = 0.5
    m3: float = 0.35

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if not self.s > 0:
            raise ValueError(f"loss.s must be positive, got {self.s}")
        if not 0.0 < self.d <= 1.0 and self.kind in ("DSoftmax",) + HYBRID_KINDS:
            raise ValueError(f"loss.d must lie in (0, 1], got {self.d}")
        if int(self.m1) != self.m1 or self.m1 < 1:
            raise ValueError(f"loss.m1 must be a positive integer, got {self.m1}")
        if not 0.0 <= self.m2 < math.pi / 2:
            raise ValueError(f"loss.m2 must lie in [0, pi/2), got {self.m2}")
        if not 0.0 <= self.m3 < 1.0:
            raise ValueError(f"loss.m3 must lie in [0, 1), got {self.m3}")

    @property
    def eps(self):
        return epsilon_from_d(self.d, self.s)

    @property
    def log_eps(self):
        return self.s * self.d

    def to_text(self):
        """Flat ``key=value`` lines; eps is derived and not written."""
        return "".join(f"{k}={getattr(self, k)}\n" for k in _CONFIG_KEYS)

    @classmethod
    def from_text(cls, text):
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in _CONFIG_KEYS:
                raise ValueError(f"bad loss config line: {line!r}")
            values[key] = value.strip()
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values):
        kw = {}
        for key, value in values.items():
            if key == "kind":
                kw[key] = str(value)
            elif key == "m1":
                kw[key] = int(value)
            else:
                kw[key] = float(value)
        return cls(**kw)


@dataclass
class ActivationBatch:
    """Cosine activations plus each row's positive column (``ABSENT`` if unsampled)."""

    z: np.ndarray
    positive_col: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.positive_col = np.asarray(self.positive_col, dtype=np.int64)
        if self.z.ndim != 2:
            raise ValueError("activations must be a 2-D matrix")
        if self.positive_col.shape != (self.z.shape[0],):
            raise ValueError("positive_col needs one entry per row")
        if np.any(self.z < -1.0) or np.any(self.z > 1.0) or not np.all(np.isfinite(self.z)):
            raise ValueError("activations must be finite cosines in [-1, 1]")
        present = self.positive_col != ABSENT
        if np.any(self.positive_col[present] < 0) or np.any(self.positive_col >= self.z.shape[1]):
            raise ValueError("positive_col out of range")

    @property
    def has_all_positives(self):
        return bool(np.all(self.positive_col != ABSENT))

    def positive_mask(self):
        mask = np.zeros(self.z.shape, dtype=bool)
        rows = np.flatnonzero(self.positive_col != ABSENT)
        mask[rows, self.positive_col[rows]] = True
        return mask


@dataclass
class LossOutput:
    loss: np.ndarray
    dz: np.ndarray
    intra: np.ndarray | None = None
    inter: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mean(self):
        return float(self.loss.mean())

    @property
    def total(self):
        return float(self.loss.sum())


def epsilon_from_d(d, s):
    if not s > 0:
        raise ValueError("s must be positive")
    return math.exp(s * d)


def _margin_arrays(z, kind, m1, m2, m3):
    z = np.asarray(z, dtype=np.float64)
    if kind in ("Softmax", "DSoftmax", "HybridSoftmaxInter"):
        return z.copy(), np.ones_like(z)
    if kind == "CosFace":
        return z - m3, np.ones_like(z)
    zc = np.clip(z, -COS_CLAMP, COS_CLAMP)
    theta = np.arccos(zc)
    sin_theta = np.sqrt(1.0 - zc * zc)
    if kind == "SphereFace":
        return np.cos(m1 * theta), m1 * np.sin(m1 * theta) / sin_theta
    if kind in ("ArcFace", "HybridArcInter"):
        return np.cos(theta + m2), np.sin(theta + m2) / sin_theta
    raise ValueError(f"no margin transform for kind {kind!r}")


def margin_transform(z_y, kind, m1=4, m2=0.5, m3=0.35):
    """Positive-class logit ``psi(z_y)`` and its derivative.

    SphereFace uses the plain ``cos(m1 * arccos z)`` form (non-monotonic past
    ``pi / m1``); ArcFace adds ``m2`` to the angle; CosFace subtracts ``m3``.
    Scalars in, scalars out; arrays are accepted too.
    """
    psi, dpsi = _margin_arrays(z_y, kind, m1, m2, m3)
    if np.ndim(z_y) == 0:
        return float(psi), float(dpsi)
    return psi, dpsi


def _sigmoid(t):
    return np.exp(-np.logaddexp(0.0, -t))


def _require_positives(batch):
    if not batch.has_all_positives:
        missing = int(np.flatnonzero(batch.positive_col == ABSENT)[0])
        raise ValueError(f"row {missing} has no positive column; this loss needs it")


def softmax_family_forward_backward(batch, cfg):
    """Entangled loss ``log(1 + sum_{k != y} e^{s z_k} / e^{s psi(z_y)})``."""
    _require_positives(batch)
    kind = cfg.kind
    if kind == "HybridSoftmaxInter":
        kind = "Softmax"
    elif kind == "HybridArcInter":
        kind = "ArcFace"
    if kind not in ENTANGLED_KINDS:
        raise ValueError(f"{cfg.kind!r} is not a softmax-family loss")

    z, s = batch.z, cfg.s
    rows = np.arange(z.shape[0])
    pos = batch.positive_col
    psi, dpsi = _margin_arrays(z[rows, pos], kind, cfg.m1, cfg.m2, cfg.m3)

    neg_mask = ~batch.positive_mask()
    log_m = masked_log_sum_exp(s * z, neg_mask)
    # loss = softplus(log M - s psi); total log-partition = s psi + loss
    loss = np.logaddexp(0.0, log_m - s * psi)
    log_z = s * psi + loss

    dz = np.where(neg_mask, s * np.exp(s * z - log_z[:, None]), 0.0)
    # p_y - 1 = -(1 - e^{-loss})
    dz[rows, pos] = s * np.expm1(-loss) * dpsi
    return LossOutput(loss=loss, dz=dz)


def d_softmax_intra(z_y, cfg):
    """``log(1 + eps / e^{s z_y})`` and its derivative."""
    z_y = np.asarray(z_y, dtype=np.float64)
    t = cfg.log_eps - cfg.s * z_y
    loss = np.logaddexp(0.0, t)
    dz = -cfg.s * _sigmoid(t)
    if z_y.ndim == 0:
        return float(loss), float(dz)
    return loss, dz


def d_softmax_inter(z_negs, cfg):
    """``log(1 + sum_k e^{s z_k})`` over one row's negatives."""
    z_negs = np.asarray(z_negs, dtype=np.float64).reshape(-1)
    if z_negs.size == 0:
        return 0.0, np.zeros(0)
    a = cfg.s * z_negs
    loss = float(np.logaddexp(0.0, np.logaddexp.reduce(a)))
    return loss, cfg.s * np.exp(a - loss)


def _inter_rows(z, s, neg_mask):
    log_m = masked_log_sum_exp(s * z, neg_mask)
    loss = np.logaddexp(0.0, log_m)
    dz = np.where(neg_mask, s * np.exp(s * z - loss[:, None]), 0.0)
    return loss, dz


def d_softmax_full(batch, cfg, negative_mask=None, inter_rows=None, inter_weight=1.0):
    """Dissected loss: intra term on each positive, inter term on negatives.

    ``negative_mask`` selects the columns entering each row's inter term
    (default: every column except the row's positive).  ``inter_rows``
    restricts the inter term to a subset of rows, as in batch-sampled
    training.  The positive column only ever receives the intra gradient.
    """
    _require_positives(batch)
    z, s = batch.z, cfg.s
    B = z.shape[0]
    rows = np.arange(B)
    pos = batch.positive_col
    pos_mask = batch.positive_mask()

    if negative_mask is None:
        negative_mask = ~pos_mask
    else:
        negative_mask = np.asarray(negative_mask, dtype=bool) & ~pos_mask
    if inter_rows is not None:
        keep = np.zeros(B, dtype=bool)
        keep[np.asarray(inter_rows, dtype=np.int64)] = True
        negative_mask = negative_mask & keep[:, None]

    intra, d_intra = d_softmax_intra(z[rows, pos], cfg)
    inter, dz = _inter_rows(z, s, negative_mask)
    if inter_weight != 1.0:
        inter = inter_weight * inter
        dz = inter_weight * dz
    dz[rows, pos] = d_intra
    return LossOutput(loss=intra + inter, dz=dz, intra=intra, inter=inter)


def hybrid_inter_only(batch, cfg):
    """Full Softmax/ArcFace forward plus the dissected intra term.

    The backward pass keeps only the entangled loss's gradient on negative
    columns; the positive column gets the intra gradient alone.
    """
    if cfg.kind not in HYBRID_KINDS:
        raise ValueError(f"{cfg.kind!r} is not a hybrid loss")
    full = softmax_family_forward_backward(batch, cfg)
    rows = np.arange(batch.z.shape[0])
    pos = batch.positive_col
    intra, d_intra = d_softmax_intra(batch.z[rows, pos], cfg)
    dz = full.dz.copy()
    dz[rows, pos] = d_intra
    return LossOutput(loss=full.loss + intra, dz=dz, intra=intra, inter=full.loss)


def loss_forward_backward(batch, cfg, **kw):
    """Dispatch on ``cfg.kind``."""
    if cfg.kind == "DSoftmax":
        return d_softmax_full(batch, cfg, **kw)
    if kw:
        raise TypeError(f"{cfg.kind} accepts no sampling options: {sorted(kw)}")
    if cfg.kind in HYBRID_KINDS:
        return hybrid_inter_only(batch, cfg)
    return softmax_family_forward_backward(batch, cfg)


def chain_to_parameters(dz, features, weights):
    """Back-propagate ``dz`` through ``z = cos(x, w)`` to raw ``x`` and ``w``.

    For unit vectors ``xh, wh``: ``dz/dx = (wh - z xh) / |x|`` and
    ``dz/dw = (xh - z wh) / |w|``.
    """
    dz = np.asarray(dz, dtype=np.float64)
    x = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if dz.shape != (x.shape[0], w.shape[0]) or x.shape[1] != w.shape[1]:
        raise ValueError(
            f"inconsistent shapes: dz {dz.shape}, features {x.shape}, weights {w.shape}"
        )
    x_norm = row_norms(x, "features")
    w_norm = row_norms(w, "weights")
    xh = x / x_norm[:, None]
    wh = w / w_norm[:, None]
    z = xh @ wh.T
    g = dz * z
    dx = (dz @ wh - g.sum(axis=1)[:, None] * xh) / x_norm[:, None]
    dw = (dz.T @ xh - g.sum(axis=0)[:, None] * wh) / w_norm[:, None]
    return dx, dw
