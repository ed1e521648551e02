"""Run configuration: a YAML tree plus command-line overrides."""
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import yaml

from .loss import LossConfig
from .network import ArchitectureSpec
from .optim import ConvergenceRule
from .synthetic import CohortSpec

SHIPPED = ("desk", "benchmark")


@dataclass(frozen=True)
class RunConfig:
    cohort: CohortSpec = field(default_factory=CohortSpec)
    cohort_path: str | None = None
    arch: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    rule: ConvergenceRule = field(default_factory=lambda: ConvergenceRule(max_iters=500))
    scratch_max_iters: int = 2000
    lr: float = 2e-4
    epochs: int = 50
    experiment: int | None = None
    out: str | None = None
    workers: int = 1
    seed: int = 42
    bench: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.scratch_max_iters < self.rule.patience:
            raise ValueError("scratch_max_iters must be >= patience")
        if self.experiment not in (None, 1, 2, 3):
            raise ValueError(f"experiment must be 1, 2 or 3, got {self.experiment}")

    def scratch_rule(self):
        return replace(self.rule, max_iters=self.scratch_max_iters)

    def to_dict(self):
        return {
            "seed": self.seed,
            "workers": self.workers,
            "experiment": self.experiment,
            "out": self.out,
            "cohort": {"path": self.cohort_path, **self.cohort.to_dict()},
            "architecture": self.arch.to_dict(),
            "loss": self.loss.to_dict(),
            "convergence": {**self.rule.to_dict(), "scratch_max_iters": self.scratch_max_iters},
            "optimizer": {"lr": self.lr},
            "train": {"epochs": self.epochs},
            "bench": dict(self.bench),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {"seed", "workers", "experiment", "out", "cohort", "architecture", "loss",
                            "convergence", "optimizer", "train", "bench"}
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        cohort = dict(d.get("cohort") or {})
        path = cohort.pop("path", None)
        conv = dict(d.get("convergence") or {})
        scratch_cap = conv.pop("scratch_max_iters", 2000)
        conv.setdefault("max_iters", 500)
        kw = {}
        for key in ("seed", "workers", "experiment", "out"):
            if key in d:
                kw[key] = d[key]
        return cls(
            cohort=CohortSpec.from_dict(cohort),
            cohort_path=path,
            arch=ArchitectureSpec.from_dict(d.get("architecture") or {}),
            loss=LossConfig.from_dict(d.get("loss") or {}),
            rule=ConvergenceRule(**conv),
            scratch_max_iters=int(scratch_cap),
            lr=float((d.get("optimizer") or {}).get("lr", 2e-4)),
            epochs=int((d.get("train") or {}).get("epochs", 50)),
            bench=dict(d.get("bench") or {}),
            **kw,
        )

    def override(self, **changes):
        """Apply flag values; ``None`` means "not given"."""
        changes = {k: v for k, v in changes.items() if v is not None}
        nested = {}
        if "stages" in changes:
            nested["arch"] = replace(self.arch, cascade_stages=changes.pop("stages"))
        if "kind" in changes:
            nested["arch"] = replace(nested.get("arch", self.arch), kind=changes.pop("kind"))
        if "max_iters" in changes:
            nested["rule"] = replace(self.rule, max_iters=changes.pop("max_iters"))
        if "cohort_seed" in changes:
            nested["cohort"] = replace(self.cohort, seed=changes.pop("cohort_seed"))
        known = {f.name for f in fields(self)}
        bad = set(changes) - known
        if bad:
            raise ValueError(f"unknown override(s): {sorted(bad)}")
        return replace(self, **nested, **changes)


def load_config(source=None):
    """Read a YAML file or a shipped config by name; ``None`` means the desk config."""
    source = "desk" if source is None else source
    if str(source) in SHIPPED:
        text = resources.files("ttoreg").joinpath(f"configs/{source}.yaml").read_text()
    else:
        path = Path(source)
        if not path.is_file():
            raise FileNotFoundError(f"configuration file not found: {path}")
        text = path.read_text()
    data = yaml.safe_load(text)
    if data is not None and not isinstance(data, dict):
        raise ValueError("configuration must be a mapping at the top level")
    return RunConfig.from_dict(data)


def dump_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
