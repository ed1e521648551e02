"""Reproducible phantom cohorts with known smooth deformations.

Each subject has a planning image with organ masks and, per fraction, a
deformed noisy copy together with its ground-truth field and warped masks.
Fraction 1 is deformed by the subject field; every later fraction composes an
extra small drift field onto the previous one.
"""
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _io
from .field import DisplacementField, compose, load_field, save_field, warp_structures, warp_volume
from .volume import StructureSet, Volume, load_structures, load_volume, normalize_intensity, save_structures, save_volume

TEXTURE_SIGMA = 0.7
TEXTURE_CONTRAST = 0.3

# rng stream ids
_ANATOMY, _FIELD, _NOISE = 0, 1, 2


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int = 48
    n_test: int = 8
    dims: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    n_structures: int = 4
    deformation_amplitude: float = 3.0
    smoothness_sigma: float = 4.0
    drift_amplitude: float = 1.0
    noise_sigma: float = 0.02
    seed: int = 42
    ood_fraction: float = 0.25
    ood_scale: float = 2.0
    n_fractions: int = 2

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError(f"dims must be three sizes >= 4, got {self.dims}")
        if not 0 <= self.n_test <= self.n_subjects:
            raise ValueError("n_test must lie in [0, n_subjects]")
        if self.deformation_amplitude < 0 or self.drift_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("amplitudes and noise must be >= 0")
        if not self.smoothness_sigma > 0:
            raise ValueError("smoothness_sigma must be > 0")
        if not 0 <= self.ood_fraction <= 1:
            raise ValueError("ood_fraction must lie in [0, 1]")
        if self.n_fractions < 1 or self.n_structures < 0:
            raise ValueError("need n_fractions >= 1 and n_structures >= 0")

    @property
    def shape(self):
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def test_indices(self):
        return list(range(self.n_subjects - self.n_test, self.n_subjects))

    @property
    def ood_indices(self):
        k = int(round(self.ood_fraction * self.n_test))
        return self.test_indices[self.n_test - k:]

    def to_dict(self):
        d = asdict(self)
        d["dims"], d["spacing"] = list(self.dims), list(self.spacing)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _rng(spec, subject, fraction, stream):
    return np.random.default_rng([spec.seed, subject, fraction, stream])


def _ellipsoid_radius(grid, center, axes):
    return np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes)))


def _soft(r, axes, edge=1.0):
    # roughly ``edge`` voxels of transition across r == 1
    k = min(axes) / edge
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) * k, -50, 50)))


def _place_organs(spec, rng, grid, shape, center, body_axes, body, max_tries, restarts=20):
    # random sequential placement with a one-voxel gap; restart the layout on a dead end
    for _ in range(restarts):
        occupied = np.zeros(spec.shape, dtype=bool)
        organs = []
        for _ in range(spec.n_structures):
            for _ in range(max_tries):
                axes = shape * rng.uniform(0.09, 0.15, 3)
                c = center + rng.uniform(-0.8, 0.8, 3) * (body_axes - axes)
                r = _ellipsoid_radius(grid, c, axes)
                grown = r <= 1.0 + 1.0 / axes.min()
                if (r <= 1.0).any() and np.all(body[grown]) and not np.any(occupied & grown):
                    occupied |= r <= 1.0
                    organs.append((r, axes))
                    break
            else:
                break
        if len(organs) == spec.n_structures:
            return organs
    raise ValueError(f"cannot place {spec.n_structures} disjoint organs in {spec.dims}; spec too crowded")


def generate_phantom(spec, subject_index, max_tries=200):
    """Planning image in [0, 1] and its organ masks."""
    rng = _rng(spec, subject_index, 0, _ANATOMY)
    shape = np.array(spec.shape, dtype=np.float64)
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in spec.shape), indexing="ij")
    center = (shape - 1) / 2
    body_axes = shape * 0.42 * rng.uniform(0.92, 1.05, 3)
    r_body = _ellipsoid_radius(grid, center, body_axes)
    body = r_body <= 1.0

    texture = gaussian_filter(rng.standard_normal(spec.shape), TEXTURE_SIGMA)
    texture /= max(texture.std(), 1e-12)
    img = 0.05 + _soft(r_body, body_axes) * (0.3 + TEXTURE_CONTRAST * texture)

    levels = rng.permutation(np.linspace(0.55, 1.0, spec.n_structures)) if spec.n_structures else []
    organs = _place_organs(spec, rng, grid, shape, center, body_axes, body, max_tries)
    structures = []
    for j, (r, axes) in enumerate(organs):
        img = img + _soft(r, axes) * (levels[j] - 0.3)
        structures.append((f"organ{j + 1}", Volume.mask(r <= 1.0, spec.spacing)))
    return normalize_intensity(Volume(img, spec.spacing)), StructureSet(structures)


def _border_window(n):
    w = np.sin(np.pi * np.arange(n) / (n - 1))
    w[0] = w[-1] = 0.0
    return w


def generate_smooth_field(spec, subject_index, fraction_index, amplitude=None):
    """Smoothed noise field scaled to max |u| == amplitude and zero on the border.

    Fraction 1 carries the subject deformation (amplified for out-of-distribution
    subjects); later fractions give the drift applied on top of the previous one.
    """
    if amplitude is None:
        if fraction_index <= 1:
            amplitude = spec.deformation_amplitude
            if subject_index in spec.ood_indices:
                amplitude *= spec.ood_scale
        else:
            amplitude = spec.drift_amplitude
    if amplitude == 0:
        return DisplacementField.zeros(spec.shape)
    rng = _rng(spec, subject_index, fraction_index, _FIELD)
    noise = rng.standard_normal(spec.shape + (3,))
    u = np.stack([gaussian_filter(noise[..., c], spec.smoothness_sigma) for c in range(3)], axis=-1)
    nz, ny, nx = spec.shape
    window = (_border_window(nz)[:, None, None] * _border_window(ny)[None, :, None]
              * _border_window(nx)[None, None, :])
    u *= window[..., None]
    u *= amplitude / np.sqrt((u ** 2).sum(axis=-1)).max()
    return DisplacementField(u)


@dataclass
class Fraction:
    image: Volume
    field: DisplacementField
    structures: StructureSet


@dataclass
class Subject:
    index: int
    split: str
    ood: bool
    planning: Volume
    structures: StructureSet
    fractions: list = field(default_factory=list)

    @property
    def id(self):
        return subject_id(self.index)


def subject_id(index):
    return f"s{index:03d}"


def generate_subject(spec, index):
    planning, structures = generate_phantom(spec, index)
    fractions = []
    g = None
    for k in range(1, spec.n_fractions + 1):
        step = generate_smooth_field(spec, index, k)
        g = step if g is None else compose(g, step)
        img = warp_volume(planning, g).data
        if spec.noise_sigma > 0:
            img = img + spec.noise_sigma * _rng(spec, index, k, _NOISE).standard_normal(spec.shape)
        fractions.append(Fraction(Volume(img, spec.spacing), g, warp_structures(structures, g)))
    split = "test" if index in spec.test_indices else "train"
    return Subject(index, split, index in spec.ood_indices, planning, structures, fractions)


def generate_cohort(spec):
    return [generate_subject(spec, i) for i in range(spec.n_subjects)]


# -- persistence --------------------------------------------------------------

def _write_subject(subject, root):
    d = Path(root) / "subjects" / subject.id
    d.mkdir(parents=True)
    save_volume(subject.planning, d / "planning")
    save_structures(subject.structures, d / "structures")
    for k, fr in enumerate(subject.fractions, start=1):
        fd = d / f"fraction{k}"
        fd.mkdir()
        save_volume(fr.image, fd / "image")
        save_field(fr.field, fd / "field", fr.image.spacing)
        save_structures(fr.structures, fd / "structures")


def write_cohort(spec, out, subjects=None):
    """Write the cohort tree atomically: it appears complete or not at all.

    An existing directory at ``out`` is replaced only after the new tree is
    fully written.
    """
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        manifest = []
        for i in range(spec.n_subjects):
            s = subjects[i] if subjects is not None else generate_subject(spec, i)
            _write_subject(s, tmp)
            manifest.append({"id": s.id, "index": s.index, "split": s.split, "ood": s.ood,
                             "fractions": len(s.fractions)})
        _io.write_json(tmp / "cohort.json", {"spec": spec.to_dict(), "subjects": manifest})
        os.chmod(tmp, 0o755)
        if out.exists():
            old = out.with_name(f".{out.name}-old")
            os.replace(out, old)
            os.replace(tmp, out)
            shutil.rmtree(old)
        else:
            os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def read_manifest(root):
    meta = _io.read_json(Path(root) / "cohort.json")
    return CohortSpec.from_dict(meta["spec"]), meta["subjects"]


def load_subject(root, entry):
    d = Path(root) / "subjects" / entry["id"]
    fractions = []
    for k in range(1, entry["fractions"] + 1):
        fd = d / f"fraction{k}"
        fractions.append(Fraction(load_volume(fd / "image"), load_field(fd / "field"),
                                  load_structures(fd / "structures")))
    return Subject(entry["index"], entry["split"], entry["ood"], load_volume(d / "planning"),
                   load_structures(d / "structures"), fractions)


def load_cohort(root, split=None):
    """Returns ``(spec, subjects)``, optionally restricted to one split."""
    spec, entries = read_manifest(root)
    return spec, [load_subject(root, e) for e in entries if split is None or e["split"] == split]
