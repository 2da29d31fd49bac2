import math

import numpy as np
import pytest

from dsoftmax.analysis import (
    CurveTrace,
    inter_termination_point,
    intra_curve_values,
    intra_termination_point,
    numeric_inter_termination,
    numeric_intra_termination,
    pairwise_cosine_stats,
    trace_loss_curve,
    trace_termination,
)
from dsoftmax.core_math import make_rng, seeded_gaussian_matrix
from dsoftmax.csvio import parse_csv
from dsoftmax.losses import ActivationBatch, LossConfig, softmax_family_forward_backward

# log(84999) / 32, mpmath
TP_85K = 0.35469983658429270184


def test_intra_termination_examples():
    assert intra_termination_point(1, 32) == 0.0
    assert intra_termination_point(math.exp(16), 32) == 0.5
    assert intra_termination_point(84999, 32) == pytest.approx(TP_85K, rel=1e-14)


def test_inter_termination_examples():
    assert inter_termination_point(1.0, 0.0, 32) == 1.0
    assert inter_termination_point(-1.0, math.exp(16), 32) == pytest.approx(0.5, abs=1e-15)
    zs = np.linspace(-1, 1, 101)
    vals = [inter_termination_point(z, math.exp(8), 32) for z in zs]
    assert np.all(np.diff(vals) >= 0)


def test_softmax_curve_examples():
    cfg = LossConfig(kind="Softmax", s=32)
    trace = trace_loss_curve(cfg, "intra", M=math.exp(16))
    assert trace.x[0] == -1.0 and trace.x[-1] == 1.0
    assert trace.y[0] == pytest.approx(48.0, abs=1e-6)
    assert trace.y[-1] < 1e-6


@pytest.mark.parametrize("kind", ["Softmax", "SphereFace", "CosFace", "ArcFace", "DSoftmax"])
def test_intra_curves_nonincreasing(kind):
    trace = trace_loss_curve(LossConfig(kind=kind, s=32), "intra", M=math.exp(8))
    keep = np.ones(trace.x.size, bool)
    if kind == "SphereFace":
        # cos(4 theta) is monotone only while theta <= pi/4
        keep = trace.x >= math.cos(math.pi / 4)
    elif kind == "ArcFace":
        # cos(theta + 0.5) turns back once theta + 0.5 > pi
        keep = trace.x >= math.cos(math.pi - 0.5)
    assert np.all(np.diff(trace.y[keep]) <= 1e-12)


def test_curve_matches_loss_module():
    cfg = LossConfig(kind="ArcFace", s=32)
    z_neg = 0.3
    trace = trace_loss_curve(cfg, "intra", M=math.exp(32 * z_neg), step=0.05)
    for zy, y in zip(trace.x, trace.y):
        out = softmax_family_forward_backward(ActivationBatch([[zy, z_neg]], [0]), cfg)
        assert y == pytest.approx(out.loss[0], rel=1e-12, abs=1e-300)


def test_curve_errors():
    with pytest.raises(ValueError):
        trace_loss_curve(LossConfig(kind="HybridArcInter"), "intra", M=1.0)
    with pytest.raises(ValueError):
        trace_loss_curve(LossConfig(kind="Softmax"), "intra", M=1.0, lo=-1.5)
    with pytest.raises(ValueError):
        CurveTrace([0, 0], [1, 2])


def test_gradient_vanishing_around_d():
    s = 32.0
    cfg = LossConfig(kind="Softmax", s=s)
    for log_M in (8.0, 16.0, 24.0):
        d = log_M / s
        _, g = intra_curve_values(cfg, np.array([d - 4 / s, d, d + 4 / s]), log_M)
        assert abs(g[2]) < 0.02 * s
        assert abs(g[0]) > 0.96 * s
        assert g[1] == pytest.approx(-s / 2, abs=1e-9)


def test_numeric_intra_termination_tracks_d():
    cfg = LossConfig(kind="Softmax", s=32)
    for log_M in (8.0, 16.0, 24.0):
        d = log_M / 32
        num = numeric_intra_termination(cfg, math.exp(log_M))
        # threshold 0.02 s sits log(49)/s to the right of the kink
        assert num == pytest.approx(d + math.log(49) / 32, abs=2e-3)


def test_dsoftmax_inter_termination_flat():
    cfg = LossConfig(kind="DSoftmax", s=32)
    trace = trace_termination(cfg, math.exp(16), step=0.01)
    assert np.all(trace.y == trace.y[0])


def test_arcface_plateau_wider_than_softmax():
    s, M_n = 32.0, math.exp(16)
    for z_y in np.arange(0.2, 0.8 + 1e-9, 0.05):
        arc = numeric_inter_termination(LossConfig(kind="ArcFace", s=s, m2=0.5), z_y, M_n)
        soft = numeric_inter_termination(LossConfig(kind="Softmax", s=s), z_y, M_n)
        assert arc <= soft


def test_numeric_inter_termination_matches_closed_form():
    cfg = LossConfig(kind="Softmax", s=32)
    for z_y in (0.0, 0.5, 0.9):
        num = numeric_inter_termination(cfg, z_y, math.exp(16))
        closed = inter_termination_point(z_y, math.exp(16), 32)
        assert num == pytest.approx(closed - math.log(49) / 32, abs=2e-3)


def test_similarity_trivial_cases(rng):
    w = rng.standard_normal((1, 5))
    stats = pairwise_cosine_stats(np.vstack([w, -w]), 10, rng)
    assert stats.mean == pytest.approx(-1.0) and stats.std == pytest.approx(0.0, abs=1e-12)
    stats = pairwise_cosine_stats(np.vstack([w, w, 3 * w]), 10, rng)
    assert stats.mean == pytest.approx(1.0)
    with pytest.raises(ValueError):
        pairwise_cosine_stats(w, 1, rng)


def test_similarity_histogram_and_budget(rng):
    w = rng.standard_normal((50, 16))
    stats = pairwise_cosine_stats(w, 300, rng)
    assert stats.pair_count == 300 == stats.counts.sum()
    assert stats.bin_edges.size == 201
    full = pairwise_cosine_stats(w, 10**6, rng)
    assert full.pair_count == 50 * 49 // 2


def test_similarity_sampling_deterministic():
    w = seeded_gaussian_matrix(300, 8, make_rng(0))
    a = pairwise_cosine_stats(w, 5000, make_rng(9))
    b = pairwise_cosine_stats(w, 5000, make_rng(9))
    assert a.mean == b.mean and np.array_equal(a.counts, b.counts)


def test_csv_outputs():
    trace = trace_loss_curve(LossConfig(kind="Softmax"), "intra", M=math.exp(16), step=0.5)
    comments, header, rows = parse_csv(trace.to_csv("z_y", "loss"))
    assert header == ["z_y", "loss", "grad"] and len(rows) == 5
    assert any(c.startswith("kind=") for c in comments)
