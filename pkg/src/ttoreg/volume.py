"""Volumes, structure sets, intensity normalisation, resampling and file I/O.

Voxel data are held as numpy arrays of shape ``(nz, ny, nx)`` in C order, so
the flat index is ``x + nx * (y + ny * z)`` exactly as in the payload files.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _io


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar field with voxel spacing in mm.

    ``data`` is float32 for images and uint8 (values 0/1) for masks.  The
    array is made read-only on construction.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if data.dtype != np.uint8:
            data = np.ascontiguousarray(data, dtype=np.float32)
            if not np.all(np.isfinite(data)):
                raise ValueError("volume contains non-finite values")
        else:
            data = np.ascontiguousarray(data)
            if data.size and data.max() > 1:
                raise ValueError("mask values must be 0 or 1")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        if data.flags.writeable:
            data = data.copy()
            data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        """Voxel counts as ``(nx, ny, nz)``."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_mask(self):
        return self.data.dtype == np.uint8

    @classmethod
    def mask(cls, data, spacing=(1.0, 1.0, 1.0)):
        return cls(np.asarray(data).astype(bool).astype(np.uint8), spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.spacing == other.spacing and self.data.dtype == other.data.dtype
                and np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass
class StructureSet:
    """Ordered named binary masks that share dims and spacing."""

    structures: list = field(default_factory=list)

    def __post_init__(self):
        self.structures = [(str(n), m) for n, m in self.structures]
        names = [n for n, _ in self.structures]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate structure names: {names}")
        ref = None
        for name, m in self.structures:
            if not isinstance(m, Volume) or not m.is_mask:
                raise ValueError(f"structure {name!r} is not a binary mask volume")
            if ref is None:
                ref = m
            elif m.shape != ref.shape or m.spacing != ref.spacing:
                raise ValueError(f"structure {name!r} does not match the grid of the others")

    @property
    def names(self):
        return [n for n, _ in self.structures]

    def __len__(self):
        return len(self.structures)

    def __iter__(self):
        return iter(self.structures)

    def __getitem__(self, name):
        for n, m in self.structures:
            if n == name:
                return m
        raise KeyError(name)

    def check_against(self, reference):
        """Raise unless every mask shares dims and spacing with ``reference``."""
        for name, m in self.structures:
            if m.shape != reference.shape or m.spacing != reference.spacing:
                raise ValueError(f"structure {name!r} does not match the reference grid")


def save_volume(v, path):
    """Write ``v`` as ``<name>.json`` + ``<name>.raw``; returns the header path."""
    tag = "u8" if v.is_mask else "f32le"
    return _io.write_grid(path, v.data, tag, v.spacing)


def load_volume(path):
    arr, spacing, _ = _io.read_grid(path, expect=("f32le", "u8"))
    if arr.dtype != np.uint8 and not np.all(np.isfinite(arr)):
        raise _io.FormatError(f"{path}: payload contains non-finite values")
    return Volume(arr, spacing)


def save_structures(ss, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, m in ss:
        save_volume(m, d / name)
    _io.write_json(d / "structures.json", {"names": ss.names})


def load_structures(directory):
    d = Path(directory)
    names = _io.read_json(d / "structures.json")["names"]
    return StructureSet([(n, load_volume(d / n)) for n in names])


def normalize_intensity(v):
    """Map intensities linearly onto [0, 1]; a constant volume maps to zeros."""
    x = v.data.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return Volume(np.zeros_like(x, dtype=np.float32), v.spacing)
    return Volume(((x - lo) / (hi - lo)).astype(np.float32), v.spacing)


def resample(v, factor=(1, 1, 1), crop_origin=(0, 0, 0), crop_dims=None):
    """Block-mean downsample by integer ``factor`` (x, y, z), then crop.

    Trailing voxels that do not fill a whole block are dropped.  ``crop_origin``
    and ``crop_dims`` are given as (x, y, z) on the downsampled grid;
    ``crop_dims=None`` keeps the full downsampled extent.
    """
    fx, fy, fz = (int(f) for f in factor)
    if min(fx, fy, fz) < 1:
        raise ValueError(f"factors must be positive integers, got {factor}")
    nz, ny, nx = v.shape
    dz, dy, dx = nz // fz, ny // fy, nx // fx
    x = v.data[: dz * fz, : dy * fy, : dx * fx].astype(np.float64)
    x = x.reshape(dz, fz, dy, fy, dx, fx).mean(axis=(1, 3, 5))
    if crop_dims is None:
        crop_dims = (dx - crop_origin[0], dy - crop_origin[1], dz - crop_origin[2])
    ox, oy, oz = crop_origin
    cx, cy, cz = crop_dims
    if min(ox, oy, oz) < 0 or min(cx, cy, cz) < 1 or ox + cx > dx or oy + cy > dy or oz + cz > dz:
        raise ValueError(
            f"crop origin {tuple(crop_origin)} dims {tuple(crop_dims)} "
            f"outside downsampled extent {(dx, dy, dz)}"
        )
    out = x[oz:oz + cz, oy:oy + cy, ox:ox + cx]
    spacing = (v.spacing[0] * fx, v.spacing[1] * fy, v.spacing[2] * fz)
    if v.is_mask:
        return Volume.mask(out >= 0.5, spacing)
    return Volume(out.astype(np.float32), spacing)
