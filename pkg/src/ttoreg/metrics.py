"""Overlap and surface-distance scores for binary masks."""
import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

DSC_UNDEFINED = "dsc_undefined"
HD95_UNDEFINED = "hd95_undefined"


@dataclass(frozen=True)
class StructureScore:
    name: str
    dsc: float | None
    hd95: float | None
    flags: tuple = ()

    def __post_init__(self):
        if self.dsc is not None and not 0.0 <= self.dsc <= 1.0:
            raise ValueError(f"dsc out of range: {self.dsc}")
        if self.hd95 is not None and self.hd95 < 0:
            raise ValueError(f"negative hd95: {self.hd95}")


def _mask(m):
    return np.asarray(getattr(m, "data", m)).astype(bool)


def dsc(x, y):
    """2|X & Y| / (|X| + |Y|); ``None`` when both masks are empty."""
    a, b = _mask(x), _mask(y)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return None
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask):
    """Set voxels with at least one unset face neighbour; outside the grid counts as unset."""
    m = _mask(mask)
    p = np.pad(m, 1)
    interior = m.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(p, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return m & ~interior


def nearest_rank(values, q=95):
    """The ceil(q/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = max(1, (q * v.size + 99) // 100)
    return float(v[k - 1])


def _points(b, spacing):
    sx, sy, sz = spacing
    return np.argwhere(b).astype(np.float64) * np.array([sz, sy, sx])


def hd95(x, y, spacing=None):
    """Symmetric 95th-percentile boundary distance in mm; ``None`` if either mask is empty."""
    a, b = _mask(x), _mask(y)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    if spacing is None:
        spacing = getattr(x, "spacing", (1.0, 1.0, 1.0))
    if not a.any() or not b.any():
        return None
    pa, pb = _points(boundary(a), spacing), _points(boundary(b), spacing)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return max(nearest_rank(d_ab), nearest_rank(d_ba))


def score_structures(predicted, truth, spacing=None):
    if sorted(predicted.names) != sorted(truth.names):
        raise ValueError(f"structure names differ: {predicted.names} vs {truth.names}")
    scores = []
    for name, t in truth:
        p = predicted[name]
        d = dsc(p, t)
        h = hd95(p, t, spacing if spacing is not None else t.spacing)
        flags = tuple(f for f, v in ((DSC_UNDEFINED, d), (HD95_UNDEFINED, h)) if v is None)
        scores.append(StructureScore(name, d, h, flags))
    return scores


def aggregate(scores):
    """Means over defined values with the number of excluded entries."""
    scores = list(scores)
    dscs = [s.dsc for s in scores if s.dsc is not None]
    hds = [s.hd95 for s in scores if s.hd95 is not None]
    return {
        "n": len(scores),
        "dsc_mean": float(np.mean(dscs)) if dscs else None,
        "hd95_mean": float(np.mean(hds)) if hds else None,
        "dsc_excluded": len(scores) - len(dscs),
        "hd95_excluded": len(scores) - len(hds),
    }


METRIC_COLUMNS = ("subject", "structure", "dsc", "hd95_mm", "flags")


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_metrics(path, rows):
    """``rows``: iterable of ``(subject, StructureScore)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for subject, s in rows:
            w.writerow([subject, s.name, _fmt(s.dsc), _fmt(s.hd95), ";".join(s.flags)])


def read_metrics(path):
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            flags = tuple(f for f in r["flags"].split(";") if f)
            out.append((r["subject"], StructureScore(
                r["structure"],
                float(r["dsc"]) if r["dsc"] else None,
                float(r["hd95_mm"]) if r["hd95_mm"] else None,
                flags,
            )))
    return out
