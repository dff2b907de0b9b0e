"""Cross-validated experiment protocols and reporting.

Each experiment trains one model per (configuration, seed, fold) on a fixed cohort
and records the test C-index. Results live in ``<out>/runs.csv``; re-running skips
triples that already completed.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import ExperimentConfig, TrainConfig
from .data import (
    Cohort,
    FoldPlan,
    RobustScaler,
    SyntheticSpec,
    combination_mask,
    generate_cohort,
    load_cohort,
    missingness_sweep_mask,
    stratified_folds,
)
from .model import save_checkpoint
from .nn import make_rng
from .survival import (
    IncompleteBlock,
    friedman_test,
    nemenyi_posthoc,
    wilcoxon_holm,
)
from .training import build_model, evaluate, train

logger = logging.getLogger(__name__)

RUN_FIELDS = ("kind", "config_id", "fold", "seed", "c_index", "epochs", "wall_time",
              "test_available", "status", "message")

# declared baselines for paired one-sided tests: (baseline config, alternative for config - baseline)
BASELINES = {
    "combinations": ("C", "less"),
    "dropout-sweep": ("0.0", "greater"),
}


@dataclass
class RunRecord:
    kind: str
    config_id: str
    fold: int
    seed: int
    c_index: float
    epochs: int
    wall_time: float
    test_available: float = math.nan
    status: str = "ok"
    message: str = ""

    def __post_init__(self):
        if self.status == "ok" and not 0.0 <= self.c_index <= 1.0:
            raise ValueError(f"C-index {self.c_index} outside [0, 1]")

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.config_id, self.seed, self.fold)


def config_label(value) -> str:
    return str(float(value)) if isinstance(value, (int, float)) else str(value)


# ---------------------------------------------------------------------------
# run table I/O


def write_runs(path: Path, records: Iterable[RunRecord]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_FIELDS)
        for r in sorted(records, key=lambda r: (r.config_id, r.seed, r.fold)):
            w.writerow([r.kind, r.config_id, r.fold, r.seed, repr(float(r.c_index)), r.epochs,
                        f"{r.wall_time:.3f}", repr(float(r.test_available)), r.status, r.message])
    tmp.replace(path)


def read_runs(path: Path) -> list[RunRecord]:
    if not path.exists():
        return []
    out = []
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RunRecord(
                row["kind"], row["config_id"], int(row["fold"]), int(row["seed"]),
                float(row["c_index"]), int(row["epochs"]), float(row["wall_time"]),
                float(row["test_available"]), row["status"], row["message"],
            ))
    return out


# ---------------------------------------------------------------------------
# single runs


def load_dataset(cfg: ExperimentConfig) -> Cohort:
    if cfg.cohort_path:
        return load_cohort(cfg.cohort_path)
    synth = dict(cfg.synthetic)
    for key in ("dims", "noise", "missing"):
        if key in synth:
            synth[key] = tuple(synth[key])
    return generate_cohort(SyntheticSpec(**synth))


def _split(cohort: Cohort, plan: FoldPlan) -> tuple[Cohort, Cohort, Cohort]:
    return cohort.subset(plan.train), cohort.subset(plan.val), cohort.subset(plan.test)


def prepare_splits(kind: str, value, cohort: Cohort, plan: FoldPlan,
                   train_cfg: TrainConfig) -> tuple[Cohort, Cohort, Cohort, TrainConfig]:
    """Apply the configuration's masking / dropout setting and robust scaling (fit on train)."""
    tr, va, te = _split(cohort, plan)
    cfg = train_cfg
    if kind == "combinations":
        tr, va, te = (combination_mask(c, str(value)) for c in (tr, va, te))
    elif kind == "dropout-sweep":
        cfg = dataclasses.replace(train_cfg, p_drop=float(value))
    elif kind == "missingness-sweep":
        cfg = dataclasses.replace(train_cfg, p_drop=0.3)
        level = float(value)
        tag = int(round(level * 1000))
        tr, va, te = (missingness_sweep_mask(c, level, make_rng(plan.seed, plan.fold, tag, i))
                      for i, c in enumerate((tr, va, te)))
    scaler = RobustScaler.fit(tr)
    return scaler.transform(tr), scaler.transform(va), scaler.transform(te), cfg


def run_single(kind: str, value, cohort: Cohort, plan: FoldPlan, train_cfg: TrainConfig,
               artifacts: Path | None = None, experiment: dict | None = None) -> RunRecord:
    config_id = config_label(value)
    start = time.perf_counter()
    try:
        tr, va, te, cfg = prepare_splits(kind, value, cohort, plan, train_cfg)
        model = build_model(cfg, cohort.dims, key=(plan.seed, plan.fold))
        log_path = None
        stem = f"{config_id}_s{plan.seed}_f{plan.fold}".replace("+", "-")
        if artifacts is not None:
            artifacts.mkdir(parents=True, exist_ok=True)
            log_path = artifacts / f"{stem}.jsonl"
            log_path.unlink(missing_ok=True)
        result = train(model, tr, va, cfg, rng=make_rng(plan.seed, plan.fold, 3), log_path=log_path)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            score = evaluate(result.model, te).c_index
        if artifacts is not None:
            save_checkpoint(artifacts / f"{stem}.npz", result.model,
                            {"kind": kind, "config_id": config_id, "seed": plan.seed, "fold": plan.fold,
                             "train": dataclasses.asdict(cfg), "experiment": experiment})
        return RunRecord(kind, config_id, plan.fold, plan.seed, score, len(result.state.history),
                         time.perf_counter() - start, float(te.mask.sum(axis=1).mean()))
    except Exception as exc:  # recorded as a gap, never aborts a sweep
        logger.warning("run %s seed=%d fold=%d failed: %s", config_id, plan.seed, plan.fold, exc)
        return RunRecord(kind, config_id, plan.fold, plan.seed, math.nan, 0,
                         time.perf_counter() - start, status="failed", message=f"{type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# protocols


@dataclass
class ExperimentResult:
    records: list[RunRecord]
    report: "Report"


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   save_artifacts: bool = True) -> ExperimentResult:
    """Train every (configuration, seed, fold) triple of ``cfg`` not already in the run table."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    cohort = load_dataset(cfg)
    plans = stratified_folds(cohort.times, cohort.events, k=cfg.n_folds, seeds=cfg.seeds)
    runs_path = out / "runs.csv"
    done = {r.key: r for r in read_runs(runs_path) if r.status == "ok" and r.kind == cfg.kind}
    records = dict(done)
    todo = [(value, plan) for value in cfg.grid for plan in plans
            if (config_label(value), plan.seed, plan.fold) not in done]
    artifacts = out / "runs" if save_artifacts else None
    manifest = cfg.to_dict()
    logger.info("%s: %d runs to do, %d already complete", cfg.kind, len(todo), len(done))

    def store(rec: RunRecord) -> None:
        records[rec.key] = rec
        write_runs(runs_path, records.values())

    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(run_single, cfg.kind, v, cohort, p, cfg.train, artifacts, manifest) for v, p in todo]
            for fut in as_completed(futures):
                store(fut.result())
    else:
        for v, p in todo:
            store(run_single(cfg.kind, v, cohort, p, cfg.train, artifacts, manifest))
    write_runs(runs_path, records.values())
    rep = report(out)
    return ExperimentResult(sorted(records.values(), key=lambda r: (r.config_id, r.seed, r.fold)), rep)


def _with_kind(cfg: ExperimentConfig, kind: str) -> ExperimentConfig:
    if cfg.kind == kind:
        return cfg
    return dataclasses.replace(cfg, kind=kind, grid=None)


def run_survival(cfg: ExperimentConfig, out_dir=None, **kw) -> ExperimentResult:
    return run_experiment(_with_kind(cfg, "survival"), out_dir, **kw)


def run_combinations(cfg: ExperimentConfig, out_dir=None, **kw) -> ExperimentResult:
    return run_experiment(_with_kind(cfg, "combinations"), out_dir, **kw)


def run_dropout_sweep(cfg: ExperimentConfig, out_dir=None, **kw) -> ExperimentResult:
    return run_experiment(_with_kind(cfg, "dropout-sweep"), out_dir, **kw)


def run_missingness_sweep(cfg: ExperimentConfig, out_dir=None, **kw) -> ExperimentResult:
    return run_experiment(_with_kind(cfg, "missingness-sweep"), out_dir, **kw)


PROTOCOLS = {
    "survival": run_survival,
    "combinations": run_combinations,
    "dropout-sweep": run_dropout_sweep,
    "missingness-sweep": run_missingness_sweep,
}


# ---------------------------------------------------------------------------
# reporting


@dataclass
class ConfigSummary:
    config_id: str
    n: int
    failed: int
    mean: float
    std: float
    mean_available: float

    def line(self) -> str:
        flag = f"  [{self.failed} failed run(s) excluded]" if self.failed else ""
        return f"{self.config_id}: {self.mean:.3f} ± {self.std:.3f} (n={self.n}){flag}"


@dataclass
class Report:
    kind: str
    summaries: list[ConfigSummary]
    statistics: dict
    text: str


def fold_matrix(records: list[RunRecord], configs: list[str]) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Blocks (seed, fold) x configurations; NaN where a run is missing or failed."""
    blocks = sorted({(r.seed, r.fold) for r in records})
    index = {b: i for i, b in enumerate(blocks)}
    mat = np.full((len(blocks), len(configs)), np.nan)
    col = {c: j for j, c in enumerate(configs)}
    for r in records:
        if r.status == "ok" and r.config_id in col:
            mat[index[(r.seed, r.fold)], col[r.config_id]] = r.c_index
    return mat, blocks


def _ordered_configs(kind: str, records: list[RunRecord], grid) -> list[str]:
    seen = {r.config_id for r in records}
    ordered = [config_label(v) for v in (grid or []) if config_label(v) in seen]
    return ordered + sorted(seen - set(ordered))


def report(results_dir: str | Path) -> Report:
    """Aggregate a results directory; write report.txt, summary.csv, stats.json and, for
    sweeps, curve.csv."""
    results_dir = Path(results_dir)
    manifest_path = results_dir / "experiment.json"
    if not (results_dir / "runs.csv").exists():
        raise FileNotFoundError(f"{results_dir}: no runs.csv")
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    records = read_runs(results_dir / "runs.csv")
    kind = manifest.get("kind") or (records[0].kind if records else "survival")
    configs = _ordered_configs(kind, records, manifest.get("grid"))

    summaries = []
    for c in configs:
        ok = [r for r in records if r.config_id == c and r.status == "ok"]
        failed = sum(1 for r in records if r.config_id == c and r.status != "ok")
        vals = np.array([r.c_index for r in ok])
        avail = np.array([r.test_available for r in ok])
        summaries.append(ConfigSummary(
            c, len(ok), failed,
            float(vals.mean()) if vals.size else math.nan,
            float(vals.std()) if vals.size else math.nan,
            float(avail.mean()) if avail.size else math.nan,
        ))

    lines = [f"experiment: {kind}", f"runs: {len(records)}", "", "C-index (mean ± std over seeds x folds):"]
    lines += ["  " + s.line() for s in summaries]
    stats: dict = {"kind": kind}
    lines += ["", "statistics:"]
    if len(configs) < 2:
        lines.append("  nothing to compare (single configuration)")
        stats["note"] = "nothing to compare"
    else:
        mat, blocks = fold_matrix(records, configs)
        complete = ~np.isnan(mat).any(axis=1)
        if complete.sum() < 2:
            lines.append("  tests skipped: fewer than 2 complete (seed, fold) blocks")
            stats["note"] = "incomplete blocks"
        else:
            if not complete.all():
                lines.append(f"  note: {int((~complete).sum())} incomplete block(s) dropped")
            block = mat[complete]
            try:
                fr = friedman_test(block)
                stats["friedman"] = {"statistic": fr.statistic, "pvalue": fr.pvalue,
                                     "average_ranks": dict(zip(configs, map(float, fr.average_ranks)))}
                lines.append(f"  Friedman chi2 = {fr.statistic:.4f}, p = {fr.pvalue:.4g} "
                             f"({block.shape[0]} blocks, {block.shape[1]} configurations)")
                if fr.pvalue < 0.05:
                    nm = nemenyi_posthoc(block)
                    stats["nemenyi"] = {"configs": configs, "pvalues": nm.pvalues.tolist(),
                                        "critical_difference": nm.critical_difference}
                    lines.append("  Nemenyi post-hoc (pairs with p < 0.05):")
                    sig = [(configs[i], configs[j], nm.pvalues[i, j])
                           for i in range(len(configs)) for j in range(i + 1, len(configs))
                           if nm.pvalues[i, j] < 0.05]
                    lines += [f"    {a} vs {b}: p = {p:.4g}" for a, b, p in sig] or ["    none"]
                else:
                    lines.append("  Friedman not significant at 0.05; post-hoc skipped")
            except IncompleteBlock as exc:
                lines.append(f"  tests skipped: {exc}")
            baseline = BASELINES.get(kind)
            if baseline and baseline[0] in configs:
                base, alt = baseline
                b = configs.index(base)
                deltas = {c: block[:, j] - block[:, b] for j, c in enumerate(configs) if j != b}
                comps = wilcoxon_holm(deltas, alternative=alt)
                stats["wilcoxon_holm"] = {"baseline": base, "alternative": alt,
                                          "results": [dataclasses.asdict(c) for c in comps]}
                lines.append(f"  one-sided Wilcoxon signed-rank vs {base} ({alt}), Holm-adjusted:")
                for comp in comps:
                    if comp.raw_p is None:
                        lines.append(f"    {comp.name}: untestable ({comp.note})")
                    else:
                        mark = " *" if comp.adjusted_p < 0.05 else ""
                        lines.append(f"    {comp.name}: raw p = {comp.raw_p:.4g}, "
                                     f"Holm p = {comp.adjusted_p:.4g}{mark}")
    text = "\n".join(lines) + "\n"

    (results_dir / "report.txt").write_text(text)
    with (results_dir / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id", "n", "failed", "mean", "std", "mean_available"])
        for s in summaries:
            w.writerow([s.config_id, s.n, s.failed, repr(s.mean), repr(s.std), repr(s.mean_available)])
    if kind in ("dropout-sweep", "missingness-sweep"):
        with (results_dir / "curve.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rate" if kind == "dropout-sweep" else "missingness", "mean", "std", "n",
                        "mean_available"])
            for s in summaries:
                w.writerow([s.config_id, repr(s.mean), repr(s.std), s.n, repr(s.mean_available)])
    (results_dir / "stats.json").write_text(json.dumps(stats, indent=2, default=float))
    return Report(kind, summaries, stats, text)
