"""Dense numerics shared by every other module.

Matrices are plain ``float64`` numpy arrays.  Helpers here validate
inputs (finite, non-degenerate rows) and provide the stable reductions the
losses rely on.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

# arccos/arcsin derivatives blow up at +-1; margin code clamps to this band
COS_CLAMP = 1.0 - 1e-9

_SNAPSHOT_MAGIC = b"DSFX1"


class DegenerateVectorError(ValueError):
    """Raised when a vector (or matrix row) has zero norm."""


def as_matrix(data, name="matrix"):
    """Return ``data`` as a finite 2-D float64 array, raising otherwise."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def _as_vector(v, name="vector"):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def l2_normalize(v):
    v = _as_vector(v)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateVectorError("cannot normalize a zero-norm vector")
    return v / norm


def row_norms(m, name="matrix"):
    """Euclidean norm of every row; errors on the first zero-norm row."""
    norms = np.linalg.norm(m, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DegenerateVectorError(f"{name} row {int(bad[0])} has zero norm")
    return norms


def normalize_rows(m, name="matrix"):
    m = as_matrix(m, name)
    return m / row_norms(m, name)[:, None]


def cosine_activations(features, weights):
    """Cosine between every feature row and every weight row.

    Returns a ``(B, S)`` matrix clamped to ``[-1, 1]``.
    """
    x = normalize_rows(features, "features")
    w = normalize_rows(weights, "weights")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"dimension mismatch: features have {x.shape[1]} columns, "
            f"weights have {w.shape[1]}"
        )
    return np.clip(x @ w.T, -1.0, 1.0)


def log_sum_exp(values):
    v = _as_vector(values, "values")
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    top = v.max()
    return float(top + np.log(np.sum(np.exp(v - top))))


def masked_log_sum_exp(values, mask):
    """Row-wise log-sum-exp over the entries where ``mask`` is True.

    Rows with no selected entry give ``-inf``.
    """
    filled = np.where(mask, values, -np.inf)
    top = filled.max(axis=1)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        total = np.log(np.exp(filled - safe_top[:, None]).sum(axis=1))
    return safe_top + total


def make_rng(seed):
    """Counter-based (Philox) generator; deterministic for a fixed seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn_rngs(seed, count):
    """Independent Philox streams derived from one seed."""
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def seeded_gaussian_matrix(rows, cols, rng):
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    return rng.standard_normal((rows, cols))


def write_matrix_snapshot(path, matrix):
    """Write ``DSFX1`` + rows (u64 LE) + cols (u64 LE) + row-major f64 LE."""
    m = as_matrix(matrix)
    rows, cols = m.shape
    payload = _SNAPSHOT_MAGIC + struct.pack("<QQ", rows, cols)
    payload += np.ascontiguousarray(m, dtype="<f8").tobytes()
    Path(path).write_bytes(payload)


def read_matrix_snapshot(path):
    raw = Path(path).read_bytes()
    head = len(_SNAPSHOT_MAGIC) + 16
    if len(raw) < head or raw[: len(_SNAPSHOT_MAGIC)] != _SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a DSFX1 matrix snapshot")
    rows, cols = struct.unpack_from("<QQ", raw, len(_SNAPSHOT_MAGIC))
    expected = head + rows * cols * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=head).astype(np.float64)
    return data.reshape(rows, cols)
