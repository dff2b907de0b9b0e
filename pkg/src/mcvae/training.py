"""Mini-batch training with modality dropout, KL annealing and early stopping on
validation C-index."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import TrainConfig, default_modalities
from .data import Cohort, modality_dropout_mask
from .losses import beta_schedule, model_losses
from .model import McvaeModel
from .nn import AdamW, make_rng
from .survival import c_index

logger = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    epoch: int = 0
    best_val: float = -math.inf
    best_epoch: int = -1
    best_state: dict[str, np.ndarray] | None = field(default=None, repr=False)
    since_improvement: int = 0
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def early_stop_check(state: TrainState, val_cindex: float, patience: int,
                     snapshot: Callable[[], dict[str, np.ndarray]] | None = None) -> bool:
    """Record one validation score; return True when training should stop."""
    if val_cindex > state.best_val + IMPROVEMENT_TOL:
        state.best_val = val_cindex
        state.best_epoch = state.epoch
        state.since_improvement = 0
        if snapshot is not None:
            state.best_state = snapshot()
        return False
    state.since_improvement += 1
    return state.since_improvement >= patience


def build_model(cfg: TrainConfig, dims=(16, 64, 64, 64), key: tuple[int, ...] | None = None) -> McvaeModel:
    """Fresh model; initial weights are a function of ``key`` (default: ``(cfg.seed,)``)."""
    key = (cfg.seed,) if key is None else tuple(key)
    return McvaeModel(default_modalities(tuple(dims)), d_out=cfg.d_out, hidden=cfg.hidden,
                      dropout=cfg.dropout, rng=make_rng(*key, 0))


def make_batches(events: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches with events spread as evenly as possible."""
    events = np.asarray(events).astype(bool)
    n = events.size
    n_batches = max(1, math.ceil(n / batch_size))
    ev = np.flatnonzero(events)
    ce = np.flatnonzero(~events)
    order = np.concatenate([ev[rng.permutation(ev.size)], ce[rng.permutation(ce.size)]])
    slots = np.arange(n) % n_batches
    batches = [order[slots == b] for b in range(n_batches)]
    return [b[rng.permutation(b.size)] for b in batches]


@dataclass
class EvalResult:
    risks: np.ndarray
    c_index: float


def evaluate(model: McvaeModel, cohort: Cohort) -> EvalResult:
    """Eval-mode risks under the cohort's own availability mask."""
    risks = model.risk_scores(cohort.features, cohort.mask)
    return EvalResult(risks, c_index(risks, cohort.times, cohort.events))


def _validation_score(model: McvaeModel, cohort: Cohort) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return evaluate(model, cohort).c_index


def _mean_records(records: list[dict]) -> dict:
    out: dict = {}
    for key in ("task", "recon", "kl", "contrast", "total"):
        vals = [r[key] for r in records if not math.isnan(r[key])]
        out[key] = float(np.mean(vals)) if vals else math.nan
    out["beta"] = records[-1]["beta"]
    out["weights"] = records[-1]["weights"]
    out["skipped_task_batches"] = sum(1 for r in records if math.isnan(r["task"]))
    out["batches"] = len(records)
    return out


def train_epoch(model: McvaeModel, opt: AdamW, cohort: Cohort, cfg: TrainConfig, epoch: int,
                rng: np.random.Generator) -> dict:
    model.train()
    beta = beta_schedule(epoch, cfg.warmup_epochs, cfg.beta_max)
    records = []
    for b, idx in enumerate(make_batches(cohort.events, cfg.batch_size, rng)):
        mask = modality_dropout_mask(cohort.mask[idx], cfg.p_drop, rng)
        feats = [x[idx] for x in cohort.features]
        fp = model.forward(feats, mask, rng)
        total, breakdown = model_losses(model, feats, fp, cohort.times[idx], cohort.events[idx],
                                        beta, cfg.temperature, where=f"epoch {epoch} batch {b}")
        opt.zero_grad()
        ad.backward(total)
        opt.step()
        records.append(breakdown.as_record())
    return _mean_records(records)


@dataclass
class TrainResult:
    model: McvaeModel
    state: TrainState


def train(model: McvaeModel, train_cohort: Cohort, val_cohort: Cohort, cfg: TrainConfig,
          rng: np.random.Generator | None = None,
          validate: Callable[[McvaeModel], float] | None = None,
          log_path: str | Path | None = None) -> TrainResult:
    """Fit ``model`` and restore the checkpoint with the best validation C-index."""
    if not np.asarray(train_cohort.events).any():
        raise TrainingError("training set has no events")
    rng = rng if rng is not None else make_rng(cfg.seed, 3)
    validate = validate or (lambda m: _validation_score(m, val_cohort))
    opt = AdamW(dict(model.named_parameters()), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    state = TrainState()
    log_fh = Path(log_path).open("a") if log_path else None
    try:
        for epoch in range(cfg.max_epochs):
            state.epoch = epoch
            record = train_epoch(model, opt, train_cohort, cfg, epoch, rng)
            if record["skipped_task_batches"] == record["batches"]:
                logger.warning("epoch %d: no batch contained an event", epoch)
            val = float(validate(model))
            record.update(epoch=epoch, val_c_index=val)
            state.history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            logger.debug("epoch %d total=%.4f val_c=%.4f", epoch, record["total"], val)
            if early_stop_check(state, val, cfg.patience, model.state_dict):
                state.stopped_early = True
                break
    finally:
        if log_fh:
            log_fh.close()
    if state.best_state is not None:
        model.load_state_dict(state.best_state)
    model.eval()
    return TrainResult(model, state)
