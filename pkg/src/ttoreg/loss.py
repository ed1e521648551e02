"""Similarity measures and the registration objective.

``total = similarity(fixed, moved) + lambda * smoothness(u)``; the similarity
is either mean squared error or the negated mean local normalised
cross-correlation.
"""
from dataclasses import dataclass

import numpy as np

from .field import smoothness_array, smoothness_grad

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class LossConfig:
    similarity: str = "ncc"
    ncc_window: int = 5
    lam: float = 1.0

    def __post_init__(self):
        if self.similarity not in ("ncc", "mse"):
            raise ValueError(f"similarity must be 'ncc' or 'mse', got {self.similarity!r}")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError(f"ncc_window must be odd and >= 3, got {self.ncc_window}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")

    def to_dict(self):
        return {"similarity": self.similarity, "ncc_window": self.ncc_window, "lambda": self.lam}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


def _arr(v):
    return np.asarray(getattr(v, "data", v))


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")


def mse(a, b):
    a, b = _arr(a).astype(np.float64), _arr(b).astype(np.float64)
    _check(a, b)
    return float(np.mean((a - b) ** 2))


def mse_grad(a, b):
    """d mse(a, b) / d b."""
    a, b = _arr(a).astype(np.float64), _arr(b).astype(np.float64)
    return 2.0 * (b - a) / a.size


# Clamp-padded box sums.  Along one axis: y[i] = sum_{|k|<=r} x[clamp(i + k)].

def _box1d(x, r, axis):
    n = x.shape[axis]
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r + 1, r)
    c = np.cumsum(np.pad(x, pad, mode="edge"), axis=axis)
    hi = np.take(c, np.arange(2 * r + 1, 2 * r + 1 + n), axis=axis)
    lo = np.take(c, np.arange(0, n), axis=axis)
    # the first padded sample is a spare edge copy that cancels in hi - lo
    return hi - lo


def _box1d_adjoint(g, r, axis):
    n = g.shape[axis]
    pad = [(0, 0)] * g.ndim
    pad[axis] = (1, 0)
    c = np.cumsum(np.pad(g, pad), axis=axis)
    # z[p], p in [-r, n - 1 + r]: sum of g[i] over in-range i with |i - p| <= r
    p = np.arange(-r, n + r)
    z = np.take(c, np.minimum(p + r + 1, n), axis=axis) - np.take(c, np.maximum(p - r, 0), axis=axis)
    out = np.take(z, np.arange(r, r + n), axis=axis)
    first = [slice(None)] * g.ndim
    last = [slice(None)] * g.ndim
    first[axis] = slice(0, 1)
    last[axis] = slice(n - 1, n)
    # padded positions replicate the edge voxels
    out[tuple(first)] += np.take(z, np.arange(0, r), axis=axis).sum(axis=axis, keepdims=True)
    out[tuple(last)] += np.take(z, np.arange(r + n, 2 * r + n), axis=axis).sum(axis=axis, keepdims=True)
    return out


def box_sum(x, window):
    r = window // 2
    for axis in range(3):
        x = _box1d(x, r, axis)
    return x


def box_sum_adjoint(g, window):
    r = window // 2
    for axis in (2, 1, 0):
        g = _box1d_adjoint(g, r, axis)
    return g


def _ncc_terms(a, b, window):
    n = float(window ** 3)
    sa, sb = box_sum(a, window), box_sum(b, window)
    saa, sbb, sab = box_sum(a * a, window), box_sum(b * b, window), box_sum(a * b, window)
    cross = sab - sa * sb / n
    va = np.maximum(saa - sa * sa / n, 0.0)
    vb = np.maximum(sbb - sb * sb / n, 0.0)
    valid = (va / n >= VARIANCE_FLOOR) & (vb / n >= VARIANCE_FLOOR)
    denom = np.sqrt(np.where(valid, va * vb, 1.0))
    cc = np.where(valid, cross / denom, 0.0)
    return n, sa, sb, vb, denom, cc, valid


def local_ncc(a, b, window=5):
    """Per-voxel local normalised cross-correlation map."""
    a, b = _arr(a).astype(np.float64), _arr(b).astype(np.float64)
    _check(a, b)
    return np.clip(_ncc_terms(a, b, window)[5], -1.0, 1.0)


def ncc_loss(a, b, window=5):
    """Negated mean local NCC over ``window``-edge cubes with clamp padding.

    Windows where either local variance falls below 1e-6 contribute zero.
    """
    return -float(np.mean(local_ncc(a, b, window)))


def ncc_loss_grad(a, b, window=5):
    """d ncc_loss(a, b) / d b."""
    return ncc_value_and_grad(a, b, window)[1]


def ncc_value_and_grad(a, b, window=5):
    a, b = _arr(a).astype(np.float64), _arr(b).astype(np.float64)
    _check(a, b)
    n, sa, sb, vb, denom, cc, valid = _ncc_terms(a, b, window)
    value = -float(np.mean(np.clip(cc, -1.0, 1.0)))
    g = np.where(valid, -1.0 / a.size, 0.0)
    vb_safe = np.where(valid, vb, 1.0)
    g_sab = g / denom
    g_sb = g * (-sa / (n * denom) + cc * sb / (n * vb_safe))
    g_sbb = g * (-cc / (2.0 * vb_safe))
    grad = (box_sum_adjoint(g_sb, window) + 2.0 * b * box_sum_adjoint(g_sbb, window)
            + a * box_sum_adjoint(g_sab, window))
    return value, grad


def similarity(fixed, moved, cfg):
    if cfg.similarity == "mse":
        return mse(fixed, moved)
    return ncc_loss(fixed, moved, cfg.ncc_window)


def similarity_grad(fixed, moved, cfg):
    if cfg.similarity == "mse":
        return mse_grad(fixed, moved)
    return ncc_loss_grad(fixed, moved, cfg.ncc_window)


def total_loss(fixed, moved, u, cfg):
    """Similarity of ``moved`` to ``fixed`` plus ``cfg.lam`` times smoothness of ``u``."""
    vec = np.asarray(getattr(u, "vectors", u))
    sim = similarity(fixed, moved, cfg)
    if cfg.lam == 0:
        return sim
    return sim + cfg.lam * smoothness_array(vec)


def total_loss_and_grads(fixed, moved, u, cfg):
    """Returns ``(total, sim, reg, d_moved, d_u)`` for raw arrays."""
    if cfg.similarity == "mse":
        sim, d_moved = mse(fixed, moved), mse_grad(fixed, moved)
    else:
        sim, d_moved = ncc_value_and_grad(fixed, moved, cfg.ncc_window)
    reg = smoothness_array(u)
    d_u = cfg.lam * smoothness_grad(u).astype(np.float64)
    return sim + cfg.lam * reg, sim, reg, d_moved, d_u
