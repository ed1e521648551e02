"""Command-line entry point: ``ttoreg {synth,train,tto,eval,report,bench}``.

Exit status 0 on success.  On failure one JSON line
``{"error": <kind>, "message": ..., "command": ...}`` goes to stderr and the
exit status is nonzero (1 runtime failure, 2 usage, 3 some subjects failed,
4 benchmark assertions failed).
"""
import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import runner
from .config import load_config
from .network import DivergenceError

EXIT_FAILURE, EXIT_USAGE, EXIT_PARTIAL, EXIT_ASSERT = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _error_line(kind, message, command):
    print(json.dumps({"error": kind, "message": message, "command": command}), file=sys.stderr)


def _common(p):
    p.add_argument("--config", help="YAML file or shipped config name (desk, benchmark)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)


def build_parser():
    parser = _Parser(prog="ttoreg", description="Deformable registration with test-time optimization.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a phantom cohort")
    _common(p)
    p.add_argument("--subjects", type=int, help="override the subject count")

    p = sub.add_parser("train", help="train a population model")
    _common(p)
    p.add_argument("--cohort")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--arch", choices=["plain-cnn", "encoder-decoder"])
    p.add_argument("--stages", type=int)
    p.add_argument("--resume", help="earlier train output directory")

    p = sub.add_parser("tto", help="test-time optimization over the test subjects")
    _common(p)
    p.add_argument("--cohort")
    p.add_argument("--mode", choices=["scratch", "inter", "intra"], required=True)
    p.add_argument("--start", help="population checkpoint (inter) or an earlier tto output (intra)")
    p.add_argument("--fraction", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--arch", choices=["plain-cnn", "encoder-decoder"])
    p.add_argument("--stages", type=int)

    p = sub.add_parser("eval", help="score runs against the ground-truth masks")
    _common(p)
    p.add_argument("--runs", required=True, help="tto output directory")
    p.add_argument("--cohort")

    p = sub.add_parser("report", help="montages, histograms and a summary file")
    _common(p)
    p.add_argument("--runs", nargs="*", default=[], help="tto output directories")

    p = sub.add_parser("bench", help="run the three experiments and check the assertions")
    _common(p)
    return parser


def _require(value, what):
    if value is None:
        raise UsageError(f"{what} is required (flag or configuration)")
    return value


def _cohort_path(args, cfg):
    path = Path(_require(getattr(args, "cohort", None) or cfg.cohort_path, "--cohort"))
    if not (path / "cohort.json").exists():
        raise FileNotFoundError(f"no cohort at {path} (cohort.json missing)")
    return path


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    try:
        args = parser.parse_args(argv)
        command = args.command
        cfg = load_config(args.config).override(
            seed=args.seed, workers=args.workers, out=args.out,
            epochs=getattr(args, "epochs", None), lr=getattr(args, "lr", None),
            kind=getattr(args, "arch", None), stages=getattr(args, "stages", None),
            max_iters=getattr(args, "max_iters", None))
        out = Path(_require(cfg.out, "--out"))

        if command == "synth":
            if args.subjects is not None:
                cfg = cfg.override(cohort=replace(cfg.cohort, n_subjects=args.subjects))
            if args.seed is not None:
                cfg = cfg.override(cohort_seed=args.seed)
            _emit(runner.synth(cfg, out))
        elif command == "train":
            ckpt, result = runner.train(cfg, _cohort_path(args, cfg), out, resume=args.resume)
            _emit({"checkpoint": str(ckpt), "epochs": len(result.epoch_losses),
                   "final_loss": result.epoch_losses[-1] if result.epoch_losses else None})
        elif command == "tto":
            rows = runner.tto(cfg, _cohort_path(args, cfg), out, args.mode, start=args.start,
                              fraction=args.fraction)
            failed = [r["subject"] for r in rows if r["status"] != "ok"]
            _emit({"runs": len(rows), "failed": failed,
                   "median_iterations": runner.median_iterations(rows)})
            if failed:
                _error_line("subject_failures", f"{len(failed)} run(s) failed: {', '.join(failed)}", command)
                return EXIT_PARTIAL
        elif command == "eval":
            cohort = _cohort_path(args, cfg) if (args.cohort or cfg.cohort_path) else None
            _emit(runner.evaluate_runs(args.runs, out, cohort))
        elif command == "report":
            from .report import render
            _emit(render(args.runs, out))
        elif command == "bench":
            from .benchmark import run_benchmark
            report = run_benchmark(cfg, out)
            _emit({"passed": report.passed, "assertions": {a["name"]: a["passed"] for a in report.assertions}})
            if not report.passed:
                failed = [a["name"] for a in report.assertions if not a["passed"]]
                _error_line("assertion_failed", f"failed: {', '.join(failed)}", command)
                return EXIT_ASSERT
        return 0
    except UsageError as exc:
        _error_line("usage", str(exc), command)
        return EXIT_USAGE
    except DivergenceError as exc:
        _error_line("divergence", str(exc), command)
        return EXIT_FAILURE
    except (OSError, ValueError, KeyError) as exc:
        _error_line(type(exc).__name__, str(exc), command)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
