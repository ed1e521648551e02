"""The three experiments at desk scale, with their pass/fail assertions.

Experiment 1 compares population and individualized models per
architecture, experiment 2 compares scratch and warm-started optimization
cost, and experiment 3 chains a second fraction onto the individualized
model.  Every number in the report is read back from the run artifacts.
"""
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _io, runner
from .synthetic import read_manifest

EXP1_DSC_MARGIN_OOD = 0.01
EXP2_RATIO = 3.0
EXP3_DSC_TOLERANCE = -0.002


@dataclass
class BenchmarkReport:
    experiments: dict = field(default_factory=dict)
    assertions: list = field(default_factory=list)
    wall_s: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.assertions) and all(a["passed"] for a in self.assertions)

    def check(self, name, passed, measured, threshold, detail=""):
        self.assertions.append({"name": name, "passed": bool(passed), "measured": measured,
                                "threshold": threshold, "detail": detail})

    def to_dict(self):
        return {"passed": self.passed, "assertions": self.assertions,
                "experiments": self.experiments, "wall_s": self.wall_s}

    def write(self, out):
        out = Path(out)
        _io.write_json(out / "benchmark.json", self.to_dict())
        (out / "summary.txt").write_text(summary_text(self))


def _fmt(v, spec=".4f"):
    return "-" if v is None or (isinstance(v, float) and np.isnan(v)) else format(v, spec)


def summary_text(report):
    lines = ["benchmark: " + ("PASS" if report.passed else "FAIL"), ""]
    e1 = report.experiments.get("1")
    if e1:
        lines += ["experiment 1: population vs individualized (test cohort means)",
                  f"  {'arch':<10}{'dsc_pop':>9}{'dsc_ind':>9}{'delta':>8}{'ood_d':>8}"
                  f"{'hd95_pop':>10}{'hd95_ind':>10}  flagged"]
        for r in e1["rows"]:
            lines.append(f"  {r['arch']:<10}{_fmt(r['dsc_population']):>9}{_fmt(r['dsc_individualized']):>9}"
                         f"{_fmt(r['dsc_delta']):>8}{_fmt(r['ood_dsc_delta']):>8}"
                         f"{_fmt(r['hd95_population'], '.2f'):>10}{_fmt(r['hd95_individualized'], '.2f'):>10}"
                         f"  {','.join(r['flagged'])}")
        lines.append("")
    e2 = report.experiments.get("2")
    if e2:
        lines += [f"experiment 2 ({e2['arch']}): scratch vs inter iterations",
                  f"  {'subject':<9}{'scratch':>8}{'inter':>7}{'scratch_s':>11}{'inter_s':>9}"]
        for r in e2["pairs"]:
            lines.append(f"  {r['subject']:<9}{r['scratch_iterations']:>8}{r['inter_iterations']:>7}"
                         f"{_fmt(r['scratch_wall_s'], '.1f'):>11}{_fmt(r['inter_wall_s'], '.1f'):>9}")
        lines += [f"  medians: scratch {_fmt(e2['median_scratch'], '.1f')}, inter {_fmt(e2['median_inter'], '.1f')},"
                  f" ratio {_fmt(e2['ratio'], '.2f')}", ""]
    e3 = report.experiments.get("3")
    if e3:
        lines += [f"experiment 3 ({e3['arch']}): fraction 2 from the fraction-1 model",
                  f"  {'subject':<9}{'inter_it':>9}{'intra_it':>9}{'dsc_before':>11}{'dsc_after':>10}"]
        for r in e3["rows"]:
            lines.append(f"  {r['subject']:<9}{r['inter_iterations']:>9}{r['intra_iterations']:>9}"
                         f"{_fmt(r['dsc_before']):>11}{_fmt(r['dsc_after']):>10}")
        lines += [f"  medians: inter {_fmt(e3['median_inter'], '.1f')}, intra {_fmt(e3['median_intra'], '.1f')};"
                  f" mean dsc {_fmt(e3['dsc_before_mean'])} -> {_fmt(e3['dsc_after_mean'])}", ""]
    lines.append("assertions")
    for a in report.assertions:
        lines.append(f"  [{'PASS' if a['passed'] else 'FAIL'}] {a['name']}: measured {a['measured']},"
                     f" threshold {a['threshold']}" + (f" ({a['detail']})" if a["detail"] else ""))
    times = ", ".join(f"{k} {v:.0f}s" for k, v in report.wall_s.items())
    lines += ["", f"wall time: {times}"]
    return "\n".join(lines) + "\n"


# -- settings -------------------------------------------------------------------

def _arch_entries(cfg):
    """Experiment-1 architectures and the experiment-2/3 architecture with their epoch budgets."""
    bench = cfg.bench
    base = cfg.arch

    def entry(d):
        arch = replace(base, kind=d.get("kind", base.kind), cascade_stages=int(d.get("stages", base.cascade_stages)))
        return arch, int(d.get("epochs", cfg.epochs))

    exp1 = [entry(d) for d in bench.get("exp1", [{}])]
    main = entry(bench.get("main", {}))
    return exp1, main


def _population(cfg, cohort, arch, epochs, root, cache):
    key = (arch.label(), epochs)
    if key not in cache:
        d = Path(root) / f"population_{arch.label()}_{epochs}ep"
        ckpt = d / "population.ckpt.json"
        if not ckpt.exists():
            runner.train(replace(cfg, arch=arch, epochs=epochs), cohort, d)
        cache[key] = ckpt
    return cache[key]


def _inter(cfg, cohort, arch, ckpt, d):
    if not (d / "summary.csv").exists():
        runner.tto(replace(cfg, arch=arch), cohort, d, "inter", start=ckpt)
    return runner.read_csv(d / "summary.csv")


def _eval(runs, d, cohort):
    if not (d / "eval.json").exists():
        runner.evaluate_runs(runs, d, cohort)
    return _io.read_json(d / "eval.json"), runner.read_csv(d / "subject_deltas.csv")


def _f(v):
    return None if v in ("", None) else float(v)


# -- experiments ----------------------------------------------------------------

def run_experiment_1(cfg, cohort, out, cache, report):
    exp1, _ = _arch_entries(cfg)
    rows = []
    for arch, epochs in exp1:
        ckpt = _population(cfg, cohort, arch, epochs, out / "models", cache)
        d = out / "exp1" / arch.label()
        _inter(cfg, cohort, arch, ckpt, d / "inter")
        ev, deltas = _eval(d / "inter", d / "eval", cohort)
        rows.append({
            "arch": arch.label(), "epochs": epochs,
            "dsc_population": ev["dsc_start_mean"], "dsc_individualized": ev["dsc_result_mean"],
            "dsc_delta": None if ev["dsc_start_mean"] is None else ev["dsc_result_mean"] - ev["dsc_start_mean"],
            "hd95_population": ev["hd95_start_mean"], "hd95_individualized": ev["hd95_result_mean"],
            "hd95_delta": None if ev["hd95_start_mean"] is None else ev["hd95_result_mean"] - ev["hd95_start_mean"],
            "ood_dsc_delta": ev["ood_dsc_delta_mean"],
            "flagged": ev["flagged"],
            "subjects": [{"subject": r["subject"], "ood": r["ood"] == "True",
                          "dsc_delta": _f(r["dsc_delta"]), "hd95_delta": _f(r["hd95_delta"])} for r in deltas],
        })
    section = {"rows": rows}
    report.experiments["1"] = section
    worst = min((r["dsc_delta"] for r in rows), default=None)
    report.check("exp1_individualized_not_worse", worst is not None and worst >= 0.0,
                 worst, ">= 0 for every architecture", "min over architectures of mean DSC delta")
    worst_ood = min((r["ood_dsc_delta"] for r in rows if r["ood_dsc_delta"] is not None), default=None)
    report.check("exp1_ood_improvement", worst_ood is not None and worst_ood >= EXP1_DSC_MARGIN_OOD,
                 worst_ood, f">= {EXP1_DSC_MARGIN_OOD}", "min over architectures of OOD mean DSC delta")
    return section


def run_experiment_2(cfg, cohort, out, cache, report):
    _, (arch, epochs) = _arch_entries(cfg)
    ckpt = _population(cfg, cohort, arch, epochs, out / "models", cache)
    d = out / "exp2" / arch.label()
    inter = {r["subject"]: r for r in _inter(cfg, cohort, arch, ckpt, d / "inter")}
    if not (d / "scratch" / "summary.csv").exists():
        runner.tto(replace(cfg, arch=arch), cohort, d / "scratch", "scratch")
    scratch = {r["subject"]: r for r in runner.read_csv(d / "scratch" / "summary.csv")}
    pairs = []
    for sid in sorted(inter):
        i, s = inter[sid], scratch.get(sid, {})
        pairs.append({
            "subject": sid,
            "inter_iterations": int(i["iterations"] or 0), "scratch_iterations": int(s.get("iterations") or 0),
            "inter_wall_s": (_f(i["wall_ms"]) or 0.0) / 1000.0,
            "scratch_wall_s": (_f(s.get("wall_ms")) or 0.0) / 1000.0,
            "inter_converged": i["converged"] == "True", "scratch_converged": s.get("converged") == "True",
            "inter_best_loss": _f(i["best_loss"]), "scratch_best_loss": _f(s.get("best_loss")),
        })
    med_i = runner.median_iterations(list(inter.values()))
    med_s = runner.median_iterations(list(scratch.values()))
    section = {"arch": arch.label(), "epochs": epochs, "pairs": pairs, "median_inter": med_i,
               "median_scratch": med_s, "ratio": med_s / med_i if med_i else None,
               "median_inter_wall_s": float(np.median([p["inter_wall_s"] for p in pairs])),
               "median_scratch_wall_s": float(np.median([p["scratch_wall_s"] for p in pairs]))}
    report.experiments["2"] = section
    report.check("exp2_warm_start_speedup", section["ratio"] is not None and section["ratio"] >= EXP2_RATIO,
                 section["ratio"], f">= {EXP2_RATIO}", "median scratch iterations / median inter iterations")
    uncapped = all(p["inter_converged"] for p in pairs) and len(pairs) > 0
    report.check("exp2_inter_converges_before_cap", uncapped,
                 sum(p["inter_converged"] for p in pairs), f"all {len(pairs)} inter runs converged",
                 f"cap {cfg.rule.max_iters} iterations")
    return section


def run_experiment_3(cfg, cohort, out, cache, report):
    _, (arch, epochs) = _arch_entries(cfg)
    ckpt = _population(cfg, cohort, arch, epochs, out / "models", cache)
    d = out / "exp2" / arch.label()
    inter = {r["subject"]: r for r in _inter(cfg, cohort, arch, ckpt, d / "inter")}
    d3 = out / "exp3" / arch.label()
    if not (d3 / "intra" / "summary.csv").exists():
        runner.tto(replace(cfg, arch=arch), cohort, d3 / "intra", "intra", start=d / "inter")
    intra = {r["subject"]: r for r in runner.read_csv(d3 / "intra" / "summary.csv")}
    ev, deltas = _eval(d3 / "intra", d3 / "eval", cohort)
    by_subject = {r["subject"]: r for r in deltas}
    rows = []
    for sid in sorted(intra):
        r = by_subject.get(sid, {})
        rows.append({"subject": sid, "inter_iterations": int(inter[sid]["iterations"] or 0),
                     "intra_iterations": int(intra[sid]["iterations"] or 0),
                     "dsc_before": _f(r.get("dsc_start")), "dsc_after": _f(r.get("dsc_result")),
                     "hd95_before": _f(r.get("hd95_start")), "hd95_after": _f(r.get("hd95_result"))})
    med_inter = runner.median_iterations(list(inter.values()))
    med_intra = runner.median_iterations(list(intra.values()))
    section = {"arch": arch.label(), "rows": rows, "median_inter": med_inter, "median_intra": med_intra,
               "dsc_before_mean": ev["dsc_start_mean"], "dsc_after_mean": ev["dsc_result_mean"],
               "hd95_before_mean": ev["hd95_start_mean"], "hd95_after_mean": ev["hd95_result_mean"]}
    report.experiments["3"] = section
    report.check("exp3_intra_not_slower", med_intra <= med_inter, med_intra,
                 f"<= {med_inter}", "median intra (fraction 2) vs median inter (fraction 1) iterations")
    change = None if ev["dsc_start_mean"] is None else ev["dsc_result_mean"] - ev["dsc_start_mean"]
    report.check("exp3_dsc_not_degraded", change is not None and change >= EXP3_DSC_TOLERANCE, change,
                 f">= {EXP3_DSC_TOLERANCE}", "cohort mean DSC after minus before intra optimization")
    return section


def _ensure_cohort(cfg, out):
    cohort = Path(cfg.cohort_path) if cfg.cohort_path else out / "cohort"
    if (cohort / "cohort.json").exists():
        spec, _ = read_manifest(cohort)
        if spec == cfg.cohort:
            return cohort
        if cfg.cohort_path:
            raise ValueError(f"cohort at {cohort} does not match the configured cohort spec")
    runner.synth(cfg, cohort)
    return cohort


def run_benchmark(cfg, out, experiments=(1, 2, 3)):
    """Run the selected experiments under ``out``; already finished steps are reused."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report = BenchmarkReport()
    t0 = time.perf_counter()
    cohort = _ensure_cohort(cfg, out)
    report.wall_s["cohort"] = time.perf_counter() - t0
    cache = {}
    steps = {1: run_experiment_1, 2: run_experiment_2, 3: run_experiment_3}
    for k in experiments:
        t = time.perf_counter()
        steps[k](cfg, cohort, out, cache, report)
        report.wall_s[f"experiment_{k}"] = time.perf_counter() - t
    report.wall_s["total"] = time.perf_counter() - t0
    report.write(out)
    return report

