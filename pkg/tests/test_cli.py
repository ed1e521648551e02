import json

import numpy as np
import pytest
import yaml

from ttoreg import _io
from ttoreg.benchmark import BenchmarkReport, run_benchmark, summary_text
from ttoreg.cli import main
from ttoreg.config import RunConfig, load_config
from ttoreg.metrics import read_metrics
from ttoreg.network import init_params, load_checkpoint
from ttoreg.report import histogram, montage
from ttoreg.runner import read_csv, summarize_runs
from ttoreg.volume import StructureSet, Volume

from test_synthetic import tree_digest

TINY = {
    "seed": 1,
    "cohort": {"n_subjects": 4, "n_test": 2, "dims": [8, 8, 8], "n_structures": 2,
               "deformation_amplitude": 1.0, "smoothness_sigma": 2.0, "drift_amplitude": 0.3,
               "ood_fraction": 0.5},
    "architecture": {"kind": "encoder-decoder", "filters": 4, "depth": 1},
    "loss": {"similarity": "ncc", "ncc_window": 3, "lambda": 1.0},
    "convergence": {"patience": 5, "max_iters": 30, "scratch_max_iters": 60},
    "optimizer": {"lr": 0.001},
    "train": {"epochs": 2},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    cfg = str(d / "tiny.yaml")
    assert main(["synth", "--config", cfg, "--out", str(d / "cohort")]) == 0
    assert main(["train", "--config", cfg, "--cohort", str(d / "cohort"), "--out", str(d / "train")]) == 0
    assert main(["tto", "--config", cfg, "--cohort", str(d / "cohort"), "--out", str(d / "inter"),
                 "--mode", "inter", "--start", str(d / "train" / "population.ckpt.json")]) == 0
    return d, cfg


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# -- configuration ------------------------------------------------------------

def test_shipped_configs_load():
    desk = load_config("desk")
    assert desk.cohort.dims == (32, 32, 32) and desk.cohort.n_subjects - desk.cohort.n_test == 40
    assert desk.lr == 2e-4 and desk.rule.min_delta == 0.005 and desk.rule.patience == 50
    assert load_config(None) == desk
    bench = load_config("benchmark")
    assert RunConfig.from_dict(bench.to_dict()) == bench


def test_config_rejects_unknown_keys(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 1\nbogus: 2\n")
    with pytest.raises(ValueError, match="bogus"):
        load_config(tmp_path / "c.yaml")


def test_flags_override_config():
    cfg = load_config("desk").override(seed=7, workers=None, stages=3, max_iters=99, lr=0.0)
    assert cfg.seed == 7 and cfg.workers == 1 and cfg.arch.cascade_stages == 3
    assert cfg.rule.max_iters == 99 and cfg.lr == 0.0


# -- commands -------------------------------------------------------------------

def test_synth_is_reproducible(work, tmp_path, capsys):
    d, cfg = work
    code, out, _ = run(capsys, "synth", "--config", cfg, "--out", str(tmp_path / "again"))
    assert code == 0 and json.loads(out)["subjects"] == 4
    assert tree_digest(tmp_path / "again") == tree_digest(d / "cohort")


def test_synth_unwritable_target_leaves_nothing(tmp_path, capsys):
    (tmp_path / "file").write_text("")
    code, _, err = run(capsys, "synth", "--config", "desk", "--out", str(tmp_path / "file" / "c"))
    assert code != 0 and json.loads(err.strip().splitlines()[-1])["command"] == "synth"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["file"]


def test_train_zero_epochs_is_initialization(work, tmp_path):
    d, cfg = work
    assert main(["train", "--config", cfg, "--cohort", str(d / "cohort"), "--out", str(tmp_path),
                 "--epochs", "0", "--seed", "5"]) == 0
    p = load_checkpoint(tmp_path / "population")
    assert p.blob.tobytes() == init_params(p.arch, 5).blob.tobytes()


def test_train_resume_matches_fresh(work, tmp_path):
    d, cfg = work
    cohort = str(d / "cohort")
    assert main(["train", "--config", cfg, "--cohort", cohort, "--out", str(tmp_path / "a"), "--epochs", "1"]) == 0
    assert main(["train", "--config", cfg, "--cohort", cohort, "--out", str(tmp_path / "b"),
                 "--resume", str(tmp_path / "a")]) == 0
    fresh = (d / "train" / "population.ckpt.raw").read_bytes()
    assert (tmp_path / "b" / "population.ckpt.raw").read_bytes() == fresh
    assert (tmp_path / "b" / "train_trace.csv").read_text().count("\n") == 3


def test_inter_writes_one_run_per_test_subject(work):
    d, _ = work
    rows = read_csv(d / "inter" / "summary.csv")
    assert [r["subject"] for r in rows] == ["s002", "s003"]
    assert all(r["status"] == "ok" and r["mode"] == "inter" for r in rows)
    for s in ("s002", "s003"):
        assert (d / "inter" / "runs" / s / "result.ckpt.json").exists()


def test_summary_rederivable_from_runs(work):
    d, _ = work
    before = (d / "inter" / "summary.csv").read_text()
    summarize_runs(d / "inter")
    assert (d / "inter" / "summary.csv").read_text() == before


def test_zero_learning_rate_runs_stop_after_patience(work, tmp_path, capsys):
    d, cfg = work
    code, out, _ = run(capsys, "tto", "--config", cfg, "--cohort", str(d / "cohort"), "--out", str(tmp_path),
                       "--mode", "inter", "--lr", "0", "--start", str(d / "train" / "population.ckpt.json"))
    assert code == 0
    rows = read_csv(tmp_path / "summary.csv")
    # the first evaluation sets the reference; `patience` further no-decrease steps follow
    assert {int(r["iterations"]) for r in rows} == {TINY["convergence"]["patience"] + 1}


def test_scratch_and_intra_modes(work, tmp_path):
    d, cfg = work
    cohort = str(d / "cohort")
    assert main(["tto", "--config", cfg, "--cohort", cohort, "--out", str(tmp_path / "s"), "--mode", "scratch",
                 "--workers", "2"]) == 0
    assert main(["tto", "--config", cfg, "--cohort", cohort, "--out", str(tmp_path / "i"), "--mode", "intra",
                 "--start", str(d / "inter")]) == 0
    intra = read_csv(tmp_path / "i" / "summary.csv")
    assert {r["fraction"] for r in intra} == {"2"}
    meta = _io.read_json(tmp_path / "i" / "runs" / "s002" / "run.json")
    assert meta["start_provenance"] == "individualized"
    scratch = read_csv(tmp_path / "s" / "summary.csv")
    assert len(scratch) == 2 and all(r["status"] == "ok" for r in scratch)


def test_parallel_runs_match_serial(work, tmp_path):
    d, cfg = work
    args = ["tto", "--config", cfg, "--cohort", str(d / "cohort"), "--mode", "scratch"]
    assert main(args + ["--out", str(tmp_path / "one")]) == 0
    assert main(args + ["--out", str(tmp_path / "two"), "--workers", "2"]) == 0
    for s in ("s002", "s003"):
        a = (tmp_path / "one" / "runs" / s / "result.ckpt.raw").read_bytes()
        assert a == (tmp_path / "two" / "runs" / s / "result.ckpt.raw").read_bytes()


def test_failed_subject_is_isolated(work, tmp_path, capsys):
    d, cfg = work
    bad = tmp_path / "inter"
    (bad / "runs" / "s002").mkdir(parents=True)  # no checkpoint for s002
    code, out, err = run(capsys, "tto", "--config", cfg, "--cohort", str(d / "cohort"), "--out",
                         str(tmp_path / "intra"), "--mode", "intra", "--start", str(bad))
    assert code == 3
    assert json.loads(err.strip())["error"] == "subject_failures"
    rows = read_csv(tmp_path / "intra" / "summary.csv")
    assert [r["status"] for r in rows] == ["error", "error"]


def test_eval_tables(work, tmp_path, capsys):
    d, cfg = work
    code, out, _ = run(capsys, "eval", "--config", cfg, "--runs", str(d / "inter"), "--out", str(tmp_path))
    assert code == 0
    summary = json.loads(out)
    assert summary["n_runs"] == 2 and summary["modes"] == ["inter"]
    comp = read_csv(tmp_path / "comparison.csv")
    for r in comp:
        assert float(r["dsc_delta"]) == pytest.approx(float(r["dsc_result"]) - float(r["dsc_start"]))
    assert comp[-1]["structure"] == "all"
    assert len(read_metrics(tmp_path / "metrics_result.csv")) == 4
    deltas = read_csv(tmp_path / "subject_deltas.csv")
    assert [r["ood"] for r in deltas] == ["False", "True"]


def test_eval_zero_deformation_scores_perfectly(tmp_path):
    tiny = dict(TINY, cohort=dict(TINY["cohort"], deformation_amplitude=0.0, drift_amplitude=0.0))
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(tiny))
    c = str(tmp_path / "c.yaml")
    assert main(["synth", "--config", c, "--out", str(tmp_path / "cohort")]) == 0
    assert main(["tto", "--config", c, "--cohort", str(tmp_path / "cohort"), "--out", str(tmp_path / "r"),
                 "--mode", "scratch", "--lr", "0"]) == 0
    assert main(["eval", "--config", c, "--runs", str(tmp_path / "r"), "--out", str(tmp_path / "e")]) == 0
    assert {float(r["dsc_result"]) for r in read_csv(tmp_path / "e" / "comparison.csv")} == {1.0}


def test_report_outputs(work, tmp_path, capsys):
    d, _ = work
    code, out, _ = run(capsys, "report", "--runs", str(d / "inter"), "--out", str(tmp_path))
    assert code == 0
    res = json.loads(out)
    assert res["runs"] == 2 and sum(res["iteration_hist"]) == 2 and sum(res["wall_hist"]) == 2
    assert sorted(p.name for p in (tmp_path / "montages").iterdir()) == [
        "inter_s002_fraction1.png", "inter_s003_fraction1.png"]
    assert (tmp_path / "hist_iterations.png").exists()


def test_report_empty_run_set(tmp_path, capsys):
    code, out, _ = run(capsys, "report", "--out", str(tmp_path))
    assert code == 0 and json.loads(out)["runs"] == 0
    assert (tmp_path / "summary.txt").read_text().startswith("runs: 0")


def test_montage_colours():
    img = Volume(np.full((3, 4, 4), 0.5))
    m = np.zeros((3, 4, 4), np.uint8)
    m[1, 1:3, 1:3] = 1
    truth = StructureSet([("a", Volume.mask(m))])
    shifted = np.roll(m, 1, axis=2)
    rgb = montage(img, truth, StructureSet([("a", Volume.mask(shifted))]))
    assert rgb.shape == (32, 32, 3)
    px = rgb[::8, ::8]
    assert tuple(px[1, 1]) == (0.0, 1.0, 0.0)  # truth only
    assert tuple(px[1, 2]) == (1.0, 1.0, 0.0)  # both
    assert tuple(px[1, 3]) == (1.0, 0.0, 0.0)  # prediction only
    assert tuple(px[0, 0]) == (0.5, 0.5, 0.5)


def test_histogram_counts_sum_to_runs():
    counts, _ = histogram([3, 5, 5, 9, 100])
    assert counts.sum() == 5
    assert histogram([])[0].sum() == 0


# -- errors -------------------------------------------------------------------

@pytest.mark.parametrize("argv, kind", [
    (["tto", "--out", "x", "--mode", "warp"], "usage"),
    (["tto", "--out", "x"], "usage"),
    (["train", "--config", "missing.yaml", "--out", "x"], "FileNotFoundError"),
    (["train", "--config", "desk", "--out", "x", "--cohort", "nowhere"], "FileNotFoundError"),
    (["frobnicate"], "usage"),
])
def test_errors_are_machine_readable(capsys, argv, kind):
    code, _, err = run(capsys, *argv)
    assert code != 0
    line = json.loads(err.strip().splitlines()[-1])
    assert line["error"] == kind and line["message"]


def test_inter_rejects_mismatched_checkpoint(work, tmp_path, capsys):
    d, cfg = work
    code, _, err = run(capsys, "tto", "--config", cfg, "--cohort", str(d / "cohort"), "--out", str(tmp_path),
                       "--mode", "inter", "--stages", "2", "--start", str(d / "train" / "population.ckpt.json"))
    assert code == 1 and "configuration asks for" in json.loads(err)["message"]


# -- benchmark plumbing -----------------------------------------------------------

def test_benchmark_pipeline_on_tiny_cohort(work, tmp_path):
    _, cfg_path = work
    cfg = load_config(cfg_path).override(bench={
        "exp1": [{"kind": "encoder-decoder", "stages": 1, "epochs": 2},
                 {"kind": "plain-cnn", "stages": 2, "epochs": 1}],
        "main": {"kind": "encoder-decoder", "stages": 1, "epochs": 2}})
    cfg = cfg.override(arch=cfg.arch.__class__("encoder-decoder", filters=4, n_layers=2, depth=1))
    report = run_benchmark(cfg, tmp_path)
    names = [a["name"] for a in report.assertions]
    assert names == ["exp1_individualized_not_worse", "exp1_ood_improvement", "exp2_warm_start_speedup",
                     "exp2_inter_converges_before_cap", "exp3_intra_not_slower", "exp3_dsc_not_degraded"]
    data = _io.read_json(tmp_path / "benchmark.json")
    assert data["passed"] == report.passed
    rows = data["experiments"]["1"]["rows"]
    assert [r["arch"] for r in rows] == ["encdecx1", "cnnx2"]
    for r in rows:
        assert r["dsc_delta"] == pytest.approx(r["dsc_individualized"] - r["dsc_population"])
    assert len(data["experiments"]["2"]["pairs"]) == 2 and len(data["experiments"]["3"]["rows"]) == 2
    # the experiment-1 main-arch population is shared with experiments 2 and 3
    assert len(list((tmp_path / "models").iterdir())) == 2
    assert "experiment 2" in (tmp_path / "summary.txt").read_text()
    # a rerun reuses every artifact and reproduces the report
    again = run_benchmark(cfg, tmp_path)
    assert again.experiments == report.experiments


def test_report_pass_requires_every_assertion():
    r = BenchmarkReport()
    assert not r.passed
    r.check("a", True, 1, ">= 0")
    r.check("b", False, -1, ">= 0", "detail")
    assert not r.passed
    assert "[FAIL] b: measured -1, threshold >= 0 (detail)" in summary_text(r)
