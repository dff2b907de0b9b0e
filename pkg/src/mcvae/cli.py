"""Command-line entry point: ``mcvae <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .data import SyntheticSpec, generate_cohort, save_cohort, stratified_folds
from .experiments import PROTOCOLS, load_dataset, prepare_splits, report
from .model import save_checkpoint
from .nn import make_rng
from .training import build_model, evaluate, train

log = logging.getLogger("mcvae")


def _experiment_config(args, kind: str) -> ExperimentConfig:
    overrides = {"kind": kind}
    if getattr(args, "cohort", None):
        overrides["cohort_path"] = args.cohort
    if getattr(args, "workers", None):
        overrides["workers"] = args.workers
    if args.config:
        cfg = load_config(args.config, profile=args.profile, **overrides)
    else:
        cfg = ExperimentConfig.from_dict(overrides, profile=args.profile or "luad")
    if args.seed is not None:
        cfg.seeds = [args.seed + i for i in range(len(cfg.seeds))]
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.out:
        cfg.out_dir = args.out
    return cfg


def cmd_generate(args) -> int:
    raw = json.loads(Path(args.config).read_text()).get("synthetic", {}) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.n is not None:
        raw["n"] = args.n
    for key in ("dims", "noise", "missing"):
        if key in raw:
            raw[key] = tuple(raw[key])
    cohort = generate_cohort(SyntheticSpec(**raw))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cohort(cohort, out)
    print(f"wrote {len(cohort)} patients to {out} (censored {1 - cohort.events.mean():.3f})")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment_config(args, "survival")
    cohort = load_dataset(cfg)
    seed = cfg.seeds[0]
    plan = stratified_folds(cohort.times, cohort.events, k=cfg.n_folds, seeds=[seed])[args.fold]
    tr, va, te, tcfg = prepare_splits("survival", "mcvae", cohort, plan, cfg.train)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(tcfg, cohort.dims, key=(plan.seed, plan.fold))
    result = train(model, tr, va, tcfg, rng=make_rng(plan.seed, plan.fold, 3), log_path=out / "epochs.jsonl")
    score = evaluate(result.model, te).c_index
    save_checkpoint(out / "model.npz", result.model, {"train": dataclasses.asdict(tcfg), "seed": seed,
                                                       "fold": args.fold, "experiment": cfg.to_dict()})
    print(f"epochs={len(result.state.history)} best_epoch={result.state.best_epoch} "
          f"val_c_index={result.state.best_val:.4f} test_c_index={score:.4f}")
    return 0


def cmd_protocol(args) -> int:
    cfg = _experiment_config(args, args.command)
    result = PROTOCOLS[args.command](cfg, cfg.out_dir)
    sys.stdout.write(result.report.text)
    return 0


def cmd_report(args) -> int:
    target = args.results or args.out
    if not target:
        raise ValueError("report needs a results directory (--out DIR)")
    sys.stdout.write(report(target).text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcvae", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=False):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--profile", choices=["luad", "lusc"])
        if workers:
            p.add_argument("--workers", type=int)
            p.add_argument("--cohort", help="cohort file instead of the synthetic default")

    g = sub.add_parser("generate", help="write a synthetic cohort file")
    common(g)
    g.add_argument("-n", type=int, help="number of patients")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and evaluate a single fold")
    common(t, workers=True)
    t.add_argument("--fold", type=int, default=0)
    t.set_defaults(func=cmd_train)

    for name in PROTOCOLS:
        p = sub.add_parser(name, help=f"run the {name} protocol")
        common(p, workers=True)
        p.set_defaults(func=cmd_protocol)

    r = sub.add_parser("report", help="summarise a results directory")
    common(r)
    r.add_argument("results", nargs="?")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "generate" and not args.out:
        parser.error("generate needs --out FILE")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, IndexError) as exc:
        print(f"mcvae {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
