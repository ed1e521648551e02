"""Displacement fields, trilinear warping, composition and smoothness.

A field is stored as a ``(nz, ny, nx, 3)`` array whose last axis holds
``(ux, uy, uz)`` in voxel units.  Warping samples the source at
``x + u(x)`` with trilinear interpolation; sample coordinates are clamped to
the volume, so clamped axes carry no gradient.

The ``*_array`` functions operate on raw channels-last arrays and expose the
adjoints used by the network's reverse pass.
"""
from dataclasses import dataclass

import numpy as np

from . import _io, kernels
from .volume import Volume


@dataclass(frozen=True, eq=False)
class DisplacementField:
    vectors: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vectors)
        if vec.ndim != 4 or vec.shape[3] != 3:
            raise ValueError(f"field must have shape (nz, ny, nx, 3), got {vec.shape}")
        vec = np.array(vec, dtype=np.float32, order="C")
        if not np.all(np.isfinite(vec)):
            raise ValueError("field contains non-finite values")
        vec.flags.writeable = False
        object.__setattr__(self, "vectors", vec)

    @property
    def dims(self):
        nz, ny, nx, _ = self.vectors.shape
        return (nx, ny, nz)

    @property
    def shape(self):
        return self.vectors.shape[:3]

    @classmethod
    def zeros(cls, shape):
        """Zero field on a grid of array shape ``(nz, ny, nx)``."""
        return cls(np.zeros(tuple(shape) + (3,), np.float32))

    def max_magnitude(self):
        return float(np.sqrt((self.vectors.astype(np.float64) ** 2).sum(axis=-1)).max())

    def __eq__(self, other):
        if not isinstance(other, DisplacementField):
            return NotImplemented
        return np.array_equal(self.vectors, other.vectors)

    __hash__ = None


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def _check_grid(shape_a, shape_b):
    if tuple(shape_a) != tuple(shape_b):
        raise ValueError(f"grid mismatch: {tuple(shape_a)} vs {tuple(shape_b)}")


def warp_array(vol, u):
    """Sample ``vol`` (nz, ny, nx, C) at ``x + u(x)``; dtype follows ``u``."""
    _check_grid(vol.shape[:3], u.shape[:3])
    if not np.isfinite(u).all():
        raise FloatingPointError("displacement field contains non-finite values")
    dt = u.dtype
    out = np.empty(vol.shape, dtype=dt)
    kernels.sample_forward(_c(vol, dt), _c(u, dt), out)
    return out


def warp_array_backward(vol, u, dout, want_dvol=True):
    """Adjoint of :func:`warp_array`: returns ``(dvol or None, du)``."""
    dt = u.dtype
    dvol = np.zeros(vol.shape, dtype=dt)
    du = np.empty(u.shape, dtype=dt)
    kernels.sample_backward(_c(vol, dt), _c(u, dt), _c(dout, dt), dvol, du, bool(want_dvol))
    return (dvol if want_dvol else None), du


def compose_arrays(u1, u2):
    """Field equivalent to warping by ``u1`` then by ``u2``."""
    return u2 + warp_array(u1, u2)


def compose_backward(u1, u2, du):
    """Gradients of :func:`compose_arrays` w.r.t. ``(u1, u2)``."""
    du1, du2_sample = warp_array_backward(u1, u2, du, want_dvol=True)
    return du1, du + du2_sample


def smoothness_array(u):
    """Mean squared forward difference, averaged over the three axes.

    For each axis the squared differences are averaged over every valid
    position and all three components; the three axis means are then averaged.
    """
    if min(u.shape[:3]) < 2:
        raise ValueError("smoothness needs at least 2 voxels along every axis")
    total = 0.0
    for axis in range(3):
        d = np.diff(u, axis=axis).astype(np.float64)
        total += np.mean(d * d)
    return total / 3.0


def smoothness_grad(u):
    g = np.zeros(u.shape, dtype=np.float64)
    for axis in range(3):
        d = np.diff(u, axis=axis).astype(np.float64)
        d *= 2.0 / (3.0 * d.size)
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        g[tuple(hi)] += d
        g[tuple(lo)] -= d
    return g.astype(u.dtype)


def warp_volume(v, u):
    """Warp an image volume by ``u`` (trilinear, clamp-to-edge)."""
    _check_grid(v.shape, u.shape)
    out = warp_array(v.data.astype(np.float32)[..., None], u.vectors)
    return Volume(out[..., 0], v.spacing)


def warp_mask(m, u):
    """Propagate a binary mask: warp the 0/1 indicator, keep values >= 0.5."""
    _check_grid(m.shape, u.shape)
    ind = warp_array(m.data.astype(np.float32)[..., None], u.vectors)[..., 0]
    return Volume.mask(ind >= 0.5, m.spacing)


def warp_structures(ss, u):
    from .volume import StructureSet
    return StructureSet([(name, warp_mask(m, u)) for name, m in ss])


def compose(u1, u2):
    """``warp(v, compose(u1, u2))`` approximates ``warp(warp(v, u1), u2)``."""
    _check_grid(u1.shape, u2.shape)
    return DisplacementField(compose_arrays(u1.vectors, u2.vectors))


def smoothness(u):
    return smoothness_array(u.vectors)


def save_field(u, path, spacing=(1.0, 1.0, 1.0)):
    return _io.write_grid(path, u.vectors, "f32le_vec3", spacing)


def load_field(path):
    arr, _, _ = _io.read_grid(path, expect=("f32le_vec3",))
    if not np.all(np.isfinite(arr)):
        raise _io.FormatError(f"{path}: field contains non-finite values")
    return DisplacementField(arr)
