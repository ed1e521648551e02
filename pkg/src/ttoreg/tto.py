"""Test-time optimization: scratch, inter-subject and intra-subject refinement."""
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _io
from .field import DisplacementField, load_field, save_field
from .network import (
    DivergenceError,
    evaluate,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .optim import ConvergenceTracker, OptimizerState, adam_step, read_trace, write_trace

MODES = ("scratch", "inter", "intra")
START_TAGS = {"scratch": ("none",), "inter": ("population",), "intra": ("individualized", "fractional")}


@dataclass(eq=False)
class TTORun:
    mode: str
    start_provenance: str
    loss_trace: list
    iterations: int
    wall_ms: float
    result: object
    final_field: DisplacementField | None
    converged: bool = False
    capped: bool = False
    best_iteration: int = 0
    iter_wall_ms: list = field(default_factory=list)
    status: str = "ok"
    error: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def initial_loss(self):
        return self.loss_trace[0] if self.loss_trace else None

    @property
    def best_loss(self):
        return self.loss_trace[self.best_iteration] if self.loss_trace else None

    def best_series(self):
        return list(np.minimum.accumulate(self.loss_trace))


class TTODivergence(DivergenceError):
    """Carries the partial run of a diverged optimization in ``.run``."""

    def __init__(self, message, run):
        super().__init__(message)
        self.run = run


def tto_run(start, moving, fixed, cfg, rule, mode, lr=2e-4, arch=None):
    """Optimize a model on a single (moving, fixed) pair.

    ``start`` is a :class:`ModelParameters` for the warm modes or an integer
    seed for ``scratch`` (which then needs ``arch``).  The returned model is
    the snapshot with the lowest loss seen.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "scratch":
        if isinstance(start, (int, np.integer)):
            if arch is None:
                raise ValueError("scratch mode from a seed needs an architecture")
            start = init_params(arch, int(start))
    elif isinstance(start, (int, np.integer)):
        raise ValueError(f"{mode} mode needs a starting checkpoint, got a seed")
    if start.provenance not in START_TAGS[mode]:
        raise ValueError(f"{mode} mode cannot start from a {start.provenance!r} model")
    if arch is not None and arch != start.arch:
        raise ValueError(f"starting checkpoint is {start.arch.label()}, configuration asks for {arch.label()}")

    params = start
    state = OptimizerState.fresh(params.blob.size, lr=lr)
    tracker = ConvergenceTracker(rule)
    trace, iter_ms = [], []
    best = (np.inf, 0, params, None)
    out_tag = "fractional" if mode == "intra" else "individualized"

    def record(status="ok", error=None):
        _, best_it, best_params, best_u = best
        res = tracker.result
        return TTORun(
            mode=mode, start_provenance=start.provenance, loss_trace=list(trace),
            iterations=len(trace), wall_ms=float(sum(iter_ms)),
            result=replace(best_params, provenance=out_tag),
            final_field=None if best_u is None else DisplacementField(best_u),
            converged=res.converged, capped=res.capped, best_iteration=best_it,
            iter_wall_ms=list(iter_ms), status=status, error=error,
            meta={"lr": lr, "loss": cfg.to_dict(), "rule": rule.to_dict(), "stop_iteration": res.stop_iteration},
        )

    while True:
        t0 = time.perf_counter()
        try:
            loss, grad, u = evaluate(params, moving, fixed, cfg)
            trace.append(loss)
            if loss < best[0]:
                best = (loss, len(trace) - 1, params, u)
            done = tracker.update(loss)
            if not done:
                params, state = adam_step(params, grad, state)
        except DivergenceError as exc:
            iter_ms.append((time.perf_counter() - t0) * 1000.0)
            run = record("diverged", str(exc))
            raise TTODivergence(f"iteration {len(trace)}: {exc}", run) from exc
        iter_ms.append((time.perf_counter() - t0) * 1000.0)
        if done:
            return record()


def run_fraction_sequence(population, fractions, cfg, rule, lr=2e-4):
    """Inter-mode run on fraction 1, then intra-mode runs chained over later fractions.

    Stops at the first divergence and returns the completed runs.
    """
    if not fractions:
        raise ValueError("need at least one fraction")
    shape = np.asarray(getattr(fractions[0][0], "data", fractions[0][0])).shape
    for mov, fix in fractions:
        for img in (mov, fix):
            if np.asarray(getattr(img, "data", img)).shape != shape:
                raise ValueError("fraction pairs do not share one grid")
    runs = []
    start = population
    for k, (mov, fix) in enumerate(fractions):
        try:
            run = tto_run(start, mov, fix, cfg, rule, "inter" if k == 0 else "intra", lr=lr)
        except TTODivergence:
            break
        runs.append(run)
        start = run.result
    return runs


# -- run directories ----------------------------------------------------------

def write_run(run, directory, extra=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_trace(d / "trace.csv", run.loss_trace, run.iter_wall_ms)
    save_checkpoint(run.result, d / "result")
    if run.final_field is not None:
        save_field(run.final_field, d / "field")
    meta = {
        "mode": run.mode,
        "start_provenance": run.start_provenance,
        "status": run.status,
        "error": run.error,
        "iterations": run.iterations,
        "wall_ms": run.wall_ms,
        "converged": run.converged,
        "capped": run.capped,
        "best_iteration": run.best_iteration,
        "initial_loss": run.initial_loss,
        "best_loss": run.best_loss,
        "arch": run.result.arch.to_dict(),
        **run.meta,
        **(extra or {}),
    }
    _io.write_json(d / "run.json", meta)
    return d


def read_run(directory):
    d = Path(directory)
    meta = _io.read_json(d / "run.json")
    losses, wall = read_trace(d / "trace.csv")
    field_path = d / "field.json"
    return TTORun(
        mode=meta["mode"], start_provenance=meta["start_provenance"], loss_trace=losses,
        iterations=meta["iterations"], wall_ms=meta["wall_ms"],
        result=load_checkpoint(d / "result"),
        final_field=load_field(field_path) if field_path.exists() else None,
        converged=meta["converged"], capped=meta["capped"], best_iteration=meta["best_iteration"],
        iter_wall_ms=wall, status=meta["status"], error=meta["error"], meta=meta,
    )

