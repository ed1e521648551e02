"""Adam, the plateau convergence rule, and population training."""
import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .network import DivergenceError, init_params, loss_and_gradients


@dataclass(frozen=True, eq=False)
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.first_moment.shape != self.second_moment.shape:
            raise ValueError("moment arrays differ in length")
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")

    @classmethod
    def fresh(cls, n, lr=2e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, epsilon)

    def save(self, path):
        np.savez(path, m=self.first_moment, v=self.second_moment,
                 meta=np.array([self.step_count, self.lr, self.beta1, self.beta2, self.epsilon]))

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            step, lr, b1, b2, eps = z["meta"]
            return cls(z["m"].copy(), z["v"].copy(), int(step), float(lr), float(b1), float(b2), float(eps))


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns new ``(params, state)``.

    An all-zero gradient leaves the parameters untouched (the step is still
    counted and the moments still decay).
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.blob.shape or g.shape != state.first_moment.shape:
        raise ValueError(f"gradient length {g.size} does not match parameters {params.blob.size}")
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    new_state = replace(state, first_moment=m, second_moment=v, step_count=t)
    if not g.any():
        return params, new_state
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    theta = params.blob.astype(np.float64) - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params.with_blob(theta.astype(params.blob.dtype)), new_state


@dataclass(frozen=True)
class ConvergenceRule:
    min_delta: float = 0.005
    patience: int = 50
    max_iters: int = 2000

    def __post_init__(self):
        if not self.min_delta > 0:
            raise ValueError("min_delta must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_iters < self.patience:
            raise ValueError("max_iters must be >= patience")

    def to_dict(self):
        return {"min_delta": self.min_delta, "patience": self.patience, "max_iters": self.max_iters}


@dataclass(frozen=True)
class ConvergenceResult:
    converged: bool
    capped: bool
    stop_iteration: int | None

    @property
    def done(self):
        return self.converged or self.capped


class ConvergenceTracker:
    """Incremental plateau detector.

    A loss counts as a decrease only when it undercuts the reference loss by
    at least ``min_delta``; the reference moves only on such decreases.  The
    first loss sets the reference.
    """

    def __init__(self, rule):
        self.rule = rule
        self.best = None
        self.wait = 0
        self.n = 0
        self.result = ConvergenceResult(False, False, None)

    def update(self, loss):
        if self.result.done:
            raise RuntimeError("tracker already stopped")
        t = self.n
        self.n += 1
        if self.best is None:
            self.best = loss
        elif self.best - loss >= self.rule.min_delta:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
        if self.wait >= self.rule.patience:
            self.result = ConvergenceResult(True, False, t)
        elif self.n >= self.rule.max_iters:
            self.result = ConvergenceResult(False, True, t)
        return self.result.done


def check_convergence(loss_trace, rule):
    """Verdict for a loss trace; ``stop_iteration`` is the 0-based index where it fired."""
    if len(loss_trace) == 0:
        raise ValueError("loss trace is empty")
    tracker = ConvergenceTracker(rule)
    for loss in loss_trace:
        if tracker.update(float(loss)):
            break
    return tracker.result


# -- population training ------------------------------------------------------

@dataclass
class TrainResult:
    params: object
    epoch_losses: list = field(default_factory=list)
    epoch_wall_ms: list = field(default_factory=list)
    state: OptimizerState | None = None


def epoch_order(seed, epoch, n):
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def train_population(pairs, arch, cfg, epochs, seed, lr=2e-4, resume=None, on_epoch=None):
    """Single-pair Adam steps over ``epochs`` shuffled passes of ``pairs``.

    ``resume`` is a :class:`TrainResult` from an earlier call with the same
    seed; training continues from its epoch count and reproduces an
    uninterrupted run bit for bit.
    """
    if not pairs:
        raise ValueError("training cohort is empty")
    shape = np.asarray(getattr(pairs[0][0], "data", pairs[0][0])).shape
    for k, (mov, fix) in enumerate(pairs):
        for img in (mov, fix):
            if np.asarray(getattr(img, "data", img)).shape != shape:
                raise ValueError(f"pair {k} does not share the cohort grid {shape}")
    if resume is None:
        params = replace(init_params(arch, seed), provenance="population")
        state = OptimizerState.fresh(params.blob.size, lr=lr)
        result = TrainResult(params, [], [], state)
    else:
        result = TrainResult(resume.params, list(resume.epoch_losses),
                             list(resume.epoch_wall_ms), resume.state)
        params, state = resume.params, resume.state
    for epoch in range(len(result.epoch_losses), epochs):
        t0 = time.perf_counter()
        total = 0.0
        for k in epoch_order(seed, epoch, len(pairs)):
            mov, fix = pairs[k]
            try:
                loss, grad = loss_and_gradients(params, mov, fix, cfg)
                params, state = adam_step(params, grad, state)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, pair {k}: {exc}") from exc
            total += loss
        result.epoch_losses.append(total / len(pairs))
        result.epoch_wall_ms.append((time.perf_counter() - t0) * 1000.0)
        result.params, result.state = params, state
        if on_epoch is not None:
            on_epoch(epoch, result)
    return result


# -- traces -------------------------------------------------------------------

TRACE_COLUMNS = ("iteration", "loss", "wall_ms")


def write_trace(path, losses, wall_ms=None):
    wall_ms = wall_ms if wall_ms is not None else [0.0] * len(losses)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for i, (loss, ms) in enumerate(zip(losses, wall_ms)):
            w.writerow([i, repr(float(loss)), f"{ms:.3f}"])


def read_trace(path):
    """Returns ``(losses, wall_ms)``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["loss"]) for r in rows], [float(r["wall_ms"]) for r in rows]
