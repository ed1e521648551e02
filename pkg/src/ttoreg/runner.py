"""Orchestration shared by the command line and the benchmark.

Every step reads its inputs from disk and writes its outputs under one
directory, so any summary can be rebuilt from the per-run artifacts.
"""
import csv
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import _io
from .config import RunConfig, dump_config
from .field import DisplacementField, load_field, warp_structures
from .metrics import aggregate, score_structures, write_metrics
from .network import forward, load_checkpoint, save_checkpoint
from .optim import OptimizerState, TrainResult, read_trace, train_population, write_trace
from .synthetic import load_cohort, load_subject, read_manifest, write_cohort
from .tto import TTODivergence, tto_run, write_run

SUMMARY_COLUMNS = ("subject", "ood", "mode", "fraction", "status", "iterations", "converged", "capped",
                   "wall_ms", "initial_loss", "best_loss", "error")
DELTA_COLUMNS = ("subject", "ood", "fraction", "dsc_start", "dsc_result", "dsc_delta",
                 "hd95_start", "hd95_result", "hd95_delta", "flagged")
COMPARISON_COLUMNS = ("structure", "n", "dsc_start", "dsc_result", "dsc_delta",
                      "hd95_start", "hd95_result", "hd95_delta")
FLAG_DSC_GAIN = 0.05
FLAG_HD95_GAIN_MM = 2.0


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r[c] for c in columns])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v):
    return None if v in ("", None) else float(v)


# -- synth --------------------------------------------------------------------

def synth(cfg, out):
    """Write the configured cohort to ``out``; returns a short manifest summary."""
    spec = cfg.cohort
    write_cohort(spec, out)
    _, entries = read_manifest(out)
    return {
        "cohort": str(out),
        "subjects": len(entries),
        "train": sum(e["split"] == "train" for e in entries),
        "test": sum(e["split"] == "test" for e in entries),
        "ood": [e["id"] for e in entries if e["ood"]],
        "dims": list(spec.dims),
    }


# -- train --------------------------------------------------------------------

def _training_pairs(cohort):
    _, subjects = load_cohort(cohort, "train")
    return [(s.planning, s.fractions[0].image) for s in subjects]


def train(cfg, cohort, out, resume=None, on_epoch=None):
    """Population training on the training subjects' first-fraction pairs.

    Writes ``population.ckpt.*``, ``optimizer.npz`` and ``train_trace.csv``
    (one row per epoch).  ``resume`` is an earlier output directory.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    previous = None
    if resume is not None:
        resume = Path(resume)
        losses, wall = read_trace(resume / "train_trace.csv")
        previous = TrainResult(load_checkpoint(resume / "population"), losses, wall,
                               OptimizerState.load(resume / "optimizer.npz"))
        if previous.params.arch != cfg.arch:
            raise ValueError("resume checkpoint architecture differs from the configuration")
    result = train_population(_training_pairs(cohort), cfg.arch, cfg.loss, cfg.epochs, cfg.seed,
                              lr=cfg.lr, resume=previous, on_epoch=on_epoch)
    ckpt = save_checkpoint(result.params, out / "population")
    result.state.save(out / "optimizer.npz")
    write_trace(out / "train_trace.csv", result.epoch_losses, result.epoch_wall_ms)
    dump_config(cfg, out / "config.yaml")
    return ckpt, result


# -- tto ----------------------------------------------------------------------

def _tto_job(job):
    """One subject's run; returns the summary row.  Failures are recorded, not raised."""
    cfg = RunConfig.from_dict(job["cfg"])
    run_dir = Path(job["run_dir"])
    extra = {"subject": job["entry"]["id"], "ood": job["entry"]["ood"], "fraction": job["fraction"],
             "cohort": job["cohort"], "start": job["start"], "seed": job["seed"]}
    try:
        subject = load_subject(job["cohort"], job["entry"])
        k = job["fraction"]
        if not 1 <= k <= len(subject.fractions):
            raise ValueError(f"{subject.id} has no fraction {k}")
        moving, fixed = subject.planning, subject.fractions[k - 1].image
        mode = job["mode"]
        if mode == "scratch":
            run = tto_run(job["seed"], moving, fixed, cfg.loss, cfg.scratch_rule(), mode,
                          lr=cfg.lr, arch=cfg.arch)
        else:
            start = load_checkpoint(job["start"])
            run = tto_run(start, moving, fixed, cfg.loss, cfg.rule, mode, lr=cfg.lr, arch=cfg.arch)
    except TTODivergence as exc:
        write_run(exc.run, run_dir, extra)
    except Exception as exc:  # isolated per subject, reported in the summary
        run_dir.mkdir(parents=True, exist_ok=True)
        _io.write_json(run_dir / "run.json", {"mode": job["mode"], "status": "error",
                                              "error": f"{type(exc).__name__}: {exc}", **extra})
    else:
        write_run(run, run_dir, extra)
    return summary_row(run_dir)


def summary_row(run_dir):
    meta = _io.read_json(Path(run_dir) / "run.json")
    return {
        "subject": meta["subject"], "ood": meta.get("ood"), "mode": meta["mode"],
        "fraction": meta["fraction"], "status": meta["status"],
        "iterations": meta.get("iterations"), "converged": meta.get("converged"),
        "capped": meta.get("capped"), "wall_ms": meta.get("wall_ms"),
        "initial_loss": meta.get("initial_loss"), "best_loss": meta.get("best_loss"),
        "error": meta.get("error"),
    }


def summarize_runs(out):
    """Rebuild ``summary.csv`` from the run directories under ``out/runs``."""
    out = Path(out)
    rows = [summary_row(d) for d in sorted((out / "runs").iterdir()) if (d / "run.json").exists()]
    rows.sort(key=lambda r: (r["subject"], r["fraction"]))
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, rows)
    return rows


def _start_for(mode, start, entry):
    if mode == "scratch":
        return None
    if start is None:
        raise ValueError(f"{mode} mode needs --start")
    start = Path(start)
    if mode == "intra":
        # a previous tto output directory: continue from each subject's own result
        return str(start / "runs" / entry["id"] / "result.ckpt.json")
    return str(start)


def tto(cfg, cohort, out, mode, start=None, fraction=None, subjects=None):
    """Run ``mode`` on every test subject; writes ``runs/<id>/`` and ``summary.csv``."""
    if mode not in ("scratch", "inter", "intra"):
        raise ValueError(f"unknown mode {mode!r}")
    fraction = fraction if fraction is not None else (2 if mode == "intra" else 1)
    out = Path(out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    _, entries = read_manifest(cohort)
    entries = [e for e in entries if e["split"] == "test" and (subjects is None or e["id"] in subjects)]
    if mode == "inter":
        ckpt = load_checkpoint(start) if start is not None else None
        if ckpt is not None and ckpt.arch != cfg.arch:
            raise ValueError(f"checkpoint is {ckpt.arch.label()}, configuration asks for {cfg.arch.label()}")
    jobs = [{
        "cfg": cfg.to_dict(), "cohort": str(cohort), "entry": e, "mode": mode, "fraction": fraction,
        "start": _start_for(mode, start, e), "seed": cfg.seed + e["index"],
        "run_dir": str(out / "runs" / e["id"]),
    } for e in entries]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(_tto_job, jobs))
    else:
        for job in jobs:
            _tto_job(job)
    dump_config(cfg, out / "config.yaml")
    return summarize_runs(out)


# -- eval ---------------------------------------------------------------------

def _run_fields(meta, run_dir, subject, fraction):
    """Fields of the starting model and of the optimized model for one run."""
    fixed = subject.fractions[fraction - 1].image
    if meta.get("start"):
        start_u = forward(load_checkpoint(meta["start"]), subject.planning, fixed)
    else:
        start_u = DisplacementField.zeros(subject.planning.shape)
    return start_u, load_field(Path(run_dir) / "field.json")


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _delta(a, b):
    return None if a is None or b is None else b - a


def evaluate_runs(runs_out, out, cohort=None):
    """Score the start model and the optimized model of every run against the truth masks.

    Writes ``metrics_start.csv``, ``metrics_result.csv``, ``comparison.csv``
    (per-structure means and deltas), ``subject_deltas.csv`` and ``eval.json``.
    """
    runs_out, out = Path(runs_out), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    start_rows, result_rows, deltas, problems = [], [], [], []
    modes = set()
    run_dirs = sorted(d for d in (runs_out / "runs").iterdir() if (d / "run.json").exists())
    for d in run_dirs:
        meta = _io.read_json(d / "run.json")
        sid = meta["subject"]
        if meta["status"] == "error" or not (d / "field.json").exists():
            problems.append({"subject": sid, "problem": meta.get("error") or "no field"})
            continue
        modes.add(meta["mode"])
        root = cohort or meta["cohort"]
        entry = next(e for e in read_manifest(root)[1] if e["id"] == sid)
        subject = load_subject(root, entry)
        k = meta["fraction"]
        truth = subject.fractions[k - 1].structures
        start_u, result_u = _run_fields(meta, d, subject, k)
        s_scores = score_structures(warp_structures(subject.structures, start_u), truth)
        r_scores = score_structures(warp_structures(subject.structures, result_u), truth)
        start_rows += [(sid, s) for s in s_scores]
        result_rows += [(sid, s) for s in r_scores]
        a, b = aggregate(s_scores), aggregate(r_scores)
        dd, dh = _delta(a["dsc_mean"], b["dsc_mean"]), _delta(a["hd95_mean"], b["hd95_mean"])
        deltas.append({
            "subject": sid, "ood": meta.get("ood"), "fraction": k,
            "dsc_start": a["dsc_mean"], "dsc_result": b["dsc_mean"], "dsc_delta": dd,
            "hd95_start": a["hd95_mean"], "hd95_result": b["hd95_mean"], "hd95_delta": dh,
            "flagged": bool((dd is not None and dd >= FLAG_DSC_GAIN)
                            or (dh is not None and -dh >= FLAG_HD95_GAIN_MM)),
        })
    write_metrics(out / "metrics_start.csv", start_rows)
    write_metrics(out / "metrics_result.csv", result_rows)
    _write_csv(out / "subject_deltas.csv", DELTA_COLUMNS, deltas)

    comparison = []
    names = sorted({s.name for _, s in result_rows})
    for name in names + ["all"]:
        ss = [s for _, s in start_rows if name in ("all", s.name)]
        rs = [s for _, s in result_rows if name in ("all", s.name)]
        row = {"structure": name, "n": len(rs),
               "dsc_start": _mean(s.dsc for s in ss), "dsc_result": _mean(s.dsc for s in rs),
               "hd95_start": _mean(s.hd95 for s in ss), "hd95_result": _mean(s.hd95 for s in rs)}
        row["dsc_delta"] = _delta(row["dsc_start"], row["dsc_result"])
        row["hd95_delta"] = _delta(row["hd95_start"], row["hd95_result"])
        comparison.append(row)
    _write_csv(out / "comparison.csv", COMPARISON_COLUMNS, comparison)

    def cohort_mean(key, ood=None):
        return _mean(r[key] for r in deltas if ood is None or bool(r["ood"]) == ood)

    summary = {
        "runs": str(runs_out),
        "modes": sorted(modes),
        "n_runs": len(deltas),
        "problems": problems,
        "dsc_start_mean": cohort_mean("dsc_start"),
        "dsc_result_mean": cohort_mean("dsc_result"),
        "hd95_start_mean": cohort_mean("hd95_start"),
        "hd95_result_mean": cohort_mean("hd95_result"),
        "ood_dsc_delta_mean": cohort_mean("dsc_delta", ood=True),
        "in_distribution_dsc_delta_mean": cohort_mean("dsc_delta", ood=False),
        "flagged": [r["subject"] for r in deltas if r["flagged"]],
    }
    _io.write_json(out / "eval.json", summary)
    return summary


def median_iterations(rows, converged_only=False):
    its = [int(r["iterations"]) for r in rows
           if r["status"] == "ok" and (not converged_only or r["converged"] in (True, "True"))]
    return float(np.median(its)) if its else math.nan
