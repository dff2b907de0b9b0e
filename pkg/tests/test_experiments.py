import csv
import json

import numpy as np
import pytest

from mcvae.config import ExperimentConfig, profile_config
from mcvae.data import SyntheticSpec, generate_cohort, stratified_folds
from mcvae.experiments import (
    RunRecord,
    prepare_splits,
    read_runs,
    report,
    run_experiment,
    run_single,
    write_runs,
)

TINY_SYNTH = {"n": 60, "dims": [4, 6, 6, 6], "noise": [0.5, 1, 1, 1], "seed": 2}
TINY_TRAIN = {"max_epochs": 2, "patience": 1, "hidden": 8, "d_out": 4}


def tiny(kind, **kw):
    base = dict(kind=kind, synthetic=TINY_SYNTH, train=TINY_TRAIN, seeds=[0], n_folds=2)
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def fake_runs(path, table):
    recs = []
    for cfg_id, values in table.items():
        for i, v in enumerate(values):
            status = "failed" if np.isnan(v) else "ok"
            recs.append(RunRecord("combinations", cfg_id, i % 5, i // 5, v, 10, 1.0, 2.0, status))
    write_runs(path / "runs.csv", recs)
    (path / "experiment.json").write_text(json.dumps({"kind": "combinations", "grid": list(table)}))


def test_run_table_round_trip(tmp_path):
    recs = [RunRecord("survival", "mcvae", 1, 0, 0.6123456789012345, 12, 3.5, 2.4),
            RunRecord("survival", "mcvae", 2, 0, float("nan"), 0, 0.1, status="failed", message="x: y")]
    write_runs(tmp_path / "runs.csv", recs)
    back = read_runs(tmp_path / "runs.csv")
    assert back[0].c_index == recs[0].c_index and back[1].status == "failed"


def test_report_single_configuration(tmp_path):
    fake_runs(tmp_path, {"C": [0.6, 0.7, 0.65]})
    rep = report(tmp_path)
    assert "nothing to compare" in rep.text
    assert "C: 0.650 ± 0.041 (n=3)" in rep.text


def test_report_identical_configurations_friedman_one(tmp_path):
    vals = list(np.linspace(0.55, 0.75, 15))
    fake_runs(tmp_path, {"C": vals, "C+T": vals})
    rep = report(tmp_path)
    assert rep.statistics["friedman"]["pvalue"] == 1.0
    assert "untestable" in rep.text  # all paired differences are zero


def test_report_reproduces_mean_and_std(tmp_path):
    rng = np.random.default_rng(0)
    table = {c: list(rng.uniform(0.5, 0.8, 15)) for c in ["C", "C+T", "C+W"]}
    table["C+W"][3] = float("nan")
    fake_runs(tmp_path, table)
    rep = report(tmp_path)
    for s in rep.summaries:
        v = np.array([x for x in table[s.config_id] if not np.isnan(x)])
        assert s.mean == v.mean() and s.std == v.std() and s.n == v.size
    assert "1 failed run(s) excluded" in rep.text
    assert "incomplete block(s) dropped" in rep.text
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["mean"]) == rep.summaries[0].mean


def test_combinations_clinical_only_ignores_other_modalities():
    c = generate_cohort(SyntheticSpec(**{**TINY_SYNTH, "dims": tuple(TINY_SYNTH["dims"]),
                                         "noise": tuple(TINY_SYNTH["noise"])}))
    plan = stratified_folds(c.times, c.events, k=2, seeds=[0])[0]
    tcfg = profile_config("luad", **TINY_TRAIN)
    noisy = c.with_mask(c.mask)
    noisy.features = [x if k == 0 else x + 50.0 for k, x in enumerate(c.features)]
    a = run_single("combinations", "C", c, plan, tcfg)
    b = run_single("combinations", "C", noisy, plan, tcfg)
    assert a.status == b.status == "ok" and a.c_index == b.c_index


def test_dropout_rate_zero_is_the_no_dropout_run():
    c = generate_cohort(SyntheticSpec(n=60, dims=(4, 6, 6, 6), noise=(0.5, 1, 1, 1), seed=2))
    plan = stratified_folds(c.times, c.events, k=2, seeds=[0])[0]
    tcfg = profile_config("luad", p_drop=0.0, **TINY_TRAIN)
    assert prepare_splits("dropout-sweep", 0.0, c, plan, tcfg)[3] == tcfg
    a = run_single("dropout-sweep", 0.0, c, plan, tcfg)
    b = run_single("survival", "mcvae", c, plan, tcfg)
    assert a.c_index == b.c_index


def test_missingness_keeps_clinical_and_thins_the_rest():
    c = generate_cohort(SyntheticSpec(n=400, seed=3))
    plan = stratified_folds(c.times, c.events, k=5, seeds=[0])[0]
    tr, va, te, cfg = prepare_splits("missingness-sweep", 0.9, c, plan, profile_config("luad"))
    assert cfg.p_drop == 0.3
    for part in (tr, va, te):
        assert part.mask[:, 0].all()
    natural = c.subset(plan.test).mask[:, 1:].sum(axis=1).mean()
    assert abs(te.mask.sum(axis=1).mean() - (1 + 0.1 * natural)) < 0.1


def test_experiment_resumes_and_is_deterministic(tmp_path):
    cfg = tiny("dropout-sweep", grid=[0.0, 0.5])
    first = run_experiment(cfg, tmp_path / "a")
    assert len(first.records) == 4 and all(r.status == "ok" for r in first.records)
    assert (tmp_path / "a" / "curve.csv").exists()
    again = run_experiment(cfg, tmp_path / "a")
    # nothing retrained: timings are the stored (rounded) ones
    assert [r.wall_time for r in again.records] == [round(r.wall_time, 3) for r in first.records]
    other = run_experiment(cfg, tmp_path / "b", save_artifacts=False)
    assert [r.c_index for r in other.records] == [r.c_index for r in first.records]


def test_failed_runs_are_recorded_not_raised(tmp_path):
    cfg = tiny("combinations", grid=["C", "C+X"])
    res = run_experiment(cfg, tmp_path)
    bad = [r for r in res.records if r.config_id == "C+X"]
    assert len(bad) == 2 and all(r.status == "failed" and "ValueError" in r.message for r in bad)


def test_parallel_workers_match_serial(tmp_path):
    cfg = tiny("survival")
    serial = run_experiment(cfg, tmp_path / "s", save_artifacts=False)
    cfg.workers = 2
    par = run_experiment(cfg, tmp_path / "p", save_artifacts=False)
    assert [r.c_index for r in serial.records] == [r.c_index for r in par.records]


def test_config_validation():
    with pytest.raises(ValueError, match="unknown experiment kind"):
        ExperimentConfig(kind="bogus")
    with pytest.raises(ValueError, match="non-empty"):
        ExperimentConfig(kind="survival", grid=[])
