"""Figures and a plain-text summary for a set of registration runs."""
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure
from matplotlib.image import imsave

from . import _io
from .field import load_field, warp_structures
from .synthetic import load_subject, read_manifest

TRUTH_RGB = (0.0, 1.0, 0.0)
PRED_RGB = (1.0, 0.0, 0.0)
BOTH_RGB = (1.0, 1.0, 0.0)
ZOOM = 8
N_BINS = 10


def _outline(mask2d):
    """Pixels of a 2D mask with an unset 4-neighbour (image border counts as unset)."""
    p = np.pad(mask2d.astype(bool), 1)
    inner = p[1:-1, 1:-1] & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask2d.astype(bool) & ~inner


def montage(image, truth, predicted, z=None):
    """Axial slice as an RGB array: grayscale image, truth outlines green, predicted red, overlap yellow."""
    img = np.asarray(image.data)
    z = img.shape[0] // 2 if z is None else z
    gray = np.clip(img[z], 0.0, 1.0)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    t = np.zeros(gray.shape, bool)
    p = np.zeros(gray.shape, bool)
    for name, m in truth:
        t |= _outline(m.data[z])
        p |= _outline(predicted[name].data[z])
    rgb[t & ~p] = TRUTH_RGB
    rgb[p & ~t] = PRED_RGB
    rgb[t & p] = BOTH_RGB
    return np.kron(rgb, np.ones((ZOOM, ZOOM, 1)))


def histogram(values, bins=N_BINS):
    if not values:
        return np.zeros(bins, int), np.linspace(0.0, 1.0, bins + 1)
    return np.histogram(values, bins=bins)


def _hist_png(values, edges, title, path):
    fig = Figure(figsize=(4, 3))
    ax = fig.add_subplot()
    ax.hist(values, bins=edges, color="0.4")
    ax.set_title(title)
    ax.set_ylabel("runs")
    fig.tight_layout()
    fig.savefig(path, dpi=80)


def render(run_sets, out):
    """Montages per run, iteration and wall-time histograms, and ``summary.txt``.

    ``run_sets`` are output directories of the tto step (each holding
    ``runs/<subject>/``).
    """
    out = Path(out)
    (out / "montages").mkdir(parents=True, exist_ok=True)
    rows = []
    for rs in run_sets:
        rs = Path(rs)
        run_dirs = sorted(d for d in (rs / "runs").iterdir() if (d / "run.json").exists()) \
            if (rs / "runs").exists() else []
        for d in run_dirs:
            meta = _io.read_json(d / "run.json")
            rows.append((rs.name, meta))
            if meta["status"] == "error" or not (d / "field.json").exists():
                continue
            entry = next(e for e in read_manifest(meta["cohort"])[1] if e["id"] == meta["subject"])
            subject = load_subject(meta["cohort"], entry)
            fr = subject.fractions[meta["fraction"] - 1]
            pred = warp_structures(subject.structures, load_field(d / "field.json"))
            name = f"{rs.name}_{meta['subject']}_fraction{meta['fraction']}.png"
            imsave(out / "montages" / name, montage(fr.image, fr.structures, pred))

    its = [m["iterations"] for _, m in rows if m.get("iterations") is not None]
    ms = [m["wall_ms"] / 1000.0 for _, m in rows if m.get("wall_ms") is not None]
    it_counts, it_edges = histogram(its)
    t_counts, t_edges = histogram(ms)
    _hist_png(its, it_edges, "iterations", out / "hist_iterations.png")
    _hist_png(ms, t_edges, "wall time (s)", out / "hist_wall_time.png")

    lines = [f"runs: {len(rows)}", "",
             f"{'set':<16}{'subject':<9}{'mode':<9}{'frac':>5}{'status':>10}{'iters':>7}{'wall_s':>9}{'best_loss':>12}"]
    for name, m in rows:
        best = m.get("best_loss")
        lines.append(f"{name:<16}{m['subject']:<9}{m['mode']:<9}{m['fraction']:>5}{m['status']:>10}"
                     f"{m.get('iterations') if m.get('iterations') is not None else '-':>7}"
                     f"{m['wall_ms'] / 1000.0 if m.get('wall_ms') is not None else float('nan'):>9.2f}"
                     f"{best if best is not None else float('nan'):>12.5f}")
    lines += ["", "iteration histogram (lower edge: count)"]
    lines += [f"  {e:10.1f}: {c}" for e, c in zip(it_edges[:-1], it_counts)]
    lines += ["", "wall-time histogram in s (lower edge: count)"]
    lines += [f"  {e:10.2f}: {c}" for e, c in zip(t_edges[:-1], t_counts)]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return {"runs": len(rows), "iteration_hist": it_counts.tolist(), "wall_hist": t_counts.tolist()}
