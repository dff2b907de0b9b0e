"""Cohorts: synthetic generation with a known risk oracle, delimited-file I/O,
availability masks, stratified fold plans and robust feature scaling."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .config import MODALITY_CODES, MODALITY_NAMES
from .nn import make_rng

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "mcvae-cohort/1"


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    features: tuple[np.ndarray, ...]
    mask: np.ndarray
    time: float
    event: int
    oracle: float | None = None


@dataclass
class Cohort:
    """Column-oriented set of patient records.

    Unavailable modalities hold zero rows of the right width.
    """

    ids: np.ndarray
    times: np.ndarray
    events: np.ndarray
    mask: np.ndarray
    features: list[np.ndarray]
    oracle: np.ndarray | None = None
    names: tuple[str, ...] = MODALITY_NAMES

    def __post_init__(self):
        n = len(self.ids)
        K = len(self.features)
        if len(self.names) != K:
            self.names = tuple(self.names[:K]) + tuple(f"modality{k}" for k in range(len(self.names), K))
        self.mask = np.asarray(self.mask, dtype=bool)
        self.times = np.asarray(self.times, dtype=float)
        self.events = np.asarray(self.events, dtype=np.int64)
        if self.mask.shape != (n, len(self.features)):
            raise ValueError(f"mask shape {self.mask.shape} does not match {n} patients x {len(self.features)} modalities")
        for k, x in enumerate(self.features):
            if x.shape[0] != n:
                raise ValueError(f"modality {self.names[k]}: {x.shape[0]} rows for {n} patients")
        if not self.mask[:, 0].all():
            raise ValueError("clinical modality must be available for every patient")
        if np.any(self.times <= 0):
            raise ValueError("observed times must be positive")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.features)

    def record(self, i: int) -> PatientRecord:
        return PatientRecord(
            str(self.ids[i]), tuple(x[i] for x in self.features), self.mask[i].copy(),
            float(self.times[i]), int(self.events[i]),
            None if self.oracle is None else float(self.oracle[i]),
        )

    def subset(self, idx) -> "Cohort":
        idx = np.asarray(idx)
        return Cohort(
            self.ids[idx], self.times[idx], self.events[idx], self.mask[idx],
            [x[idx] for x in self.features],
            None if self.oracle is None else self.oracle[idx], self.names,
        )

    def with_mask(self, mask: np.ndarray) -> "Cohort":
        """Copy with availability ``mask`` applied; newly masked features are zeroed."""
        mask = np.asarray(mask, dtype=bool) & self.mask
        mask[:, 0] = True
        feats = [np.where(mask[:, k:k + 1], x, 0.0) for k, x in enumerate(self.features)]
        return replace(self, mask=mask, features=feats)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SyntheticSpec:
    n: int = 600
    latent_dim: int = 8
    dims: tuple[int, ...] = (16, 64, 64, 64)
    noise: tuple[float, ...] = (0.5, 1.0, 1.5, 1.0)
    risk_norm: float = 1.5
    baseline_rate: float = 0.1
    censoring: float = 0.3
    missing: tuple[float, ...] = (0.0, 0.08, 0.03, 0.15)
    seed: int = 0
    loadings: list[np.ndarray] | None = field(default=None, repr=False)
    risk_weights: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.censoring < 1.0:
            raise ValueError(f"censoring target must be in [0, 1), got {self.censoring}")
        if len(self.dims) != len(self.noise) or len(self.dims) != len(self.missing):
            raise ValueError("dims, noise and missing must have one entry per modality")
        if self.missing[0] != 0:
            raise ValueError("clinical missingness rate must be 0")
        if any(not 0.0 <= m < 1.0 for m in self.missing):
            raise ValueError("missingness rates must lie in [0, 1)")
        if self.n < 2 or self.latent_dim < 1:
            raise ValueError("need n >= 2 and latent_dim >= 1")


def _calibrate_censoring(rates: np.ndarray, target: float) -> float:
    """Exponential censoring rate c with mean_i c / (c + rate_i) == target."""
    if target == 0.0:
        return 0.0

    def gap(log_c: float) -> float:
        c = np.exp(log_c)
        return float(np.mean(c / (c + rates))) - target

    lo, hi = np.log(rates.min()) - 30.0, np.log(rates.max()) + 30.0
    if gap(lo) > 0 or gap(hi) < 0:
        raise ValueError(f"censoring target {target} is infeasible")
    return float(np.exp(brentq(gap, lo, hi, xtol=1e-12)))


def generate_cohort(spec: SyntheticSpec | None = None, rng: np.random.Generator | None = None) -> Cohort:
    """Latent-factor cohort: u ~ N(0, I); x_k = A_k u + noise; T ~ Exp(rate0 * exp(w.u)).

    The true log-hazard w.u is kept as ``oracle``.
    """
    spec = spec or SyntheticSpec()
    rng = rng if rng is not None else make_rng(spec.seed, 1)
    d_u = spec.latent_dim
    loadings = spec.loadings
    if loadings is None:
        loadings = [rng.standard_normal((d, d_u)) / np.sqrt(d_u) for d in spec.dims]
    w = spec.risk_weights
    if w is None:
        w = rng.standard_normal(d_u)
        w = spec.risk_norm * w / np.linalg.norm(w)
    u = rng.standard_normal((spec.n, d_u))
    features = []
    for A, sigma in zip(loadings, spec.noise):
        x = u @ np.asarray(A).T
        if sigma > 0:
            x = x + sigma * rng.standard_normal(x.shape)
        features.append(x)
    eta = u @ w
    rates = spec.baseline_rate * np.exp(eta)
    event_times = rng.exponential(1.0 / rates)
    c = _calibrate_censoring(rates, spec.censoring)
    if c > 0:
        censor_times = rng.exponential(1.0 / c, size=spec.n)
    else:
        censor_times = np.full(spec.n, np.inf)
    times = np.minimum(event_times, censor_times)
    events = (event_times <= censor_times).astype(np.int64)
    mask = np.column_stack([rng.random(spec.n) >= m for m in spec.missing])
    mask[:, 0] = True
    features = [np.where(mask[:, k:k + 1], x, 0.0) for k, x in enumerate(features)]
    ids = np.array([f"P{i:05d}" for i in range(spec.n)])
    return Cohort(ids, times, events, mask, features, oracle=eta)


# ---------------------------------------------------------------------------
# delimited file format


def _columns(names: Sequence[str], dims: Sequence[int], with_oracle: bool) -> list[str]:
    cols = ["patient_id", "time", "event"] + [f"has_{n}" for n in names]
    for n, d in zip(names, dims):
        cols += [f"{n}_{j}" for j in range(d)]
    if with_oracle:
        cols.append("oracle_log_hazard")
    return cols


def save_cohort(cohort: Cohort, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        fh.write(f"# {SCHEMA_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(_columns(cohort.names, cohort.dims, cohort.oracle is not None))
        for i in range(len(cohort)):
            row = [str(cohort.ids[i]), repr(float(cohort.times[i])), str(int(cohort.events[i]))]
            row += [str(int(b)) for b in cohort.mask[i]]
            for k, x in enumerate(cohort.features):
                if cohort.mask[i, k]:
                    row += [repr(float(v)) for v in x[i]]
                else:
                    row += [""] * x.shape[1]
            if cohort.oracle is not None:
                row.append(repr(float(cohort.oracle[i])))
            writer.writerow(row)
    tmp.replace(path)


class CohortFormatError(ValueError):
    pass


def load_cohort(path: str | Path, schema: Sequence[int] | None = None) -> Cohort:
    """Read a cohort file. ``schema`` optionally pins the per-modality dimensions."""
    path = Path(path)
    with path.open(newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise CohortFormatError(f"{path}: missing schema comment line")
        version = first.lstrip("#").strip()
        if version != SCHEMA_VERSION:
            raise CohortFormatError(f"{path}: unsupported schema {version!r}")
        reader = csv.reader(fh)
        header = next(reader)
        names = [c[len("has_"):] for c in header[3:] if c.startswith("has_")]
        K = len(names)
        dims = [sum(1 for c in header if c.startswith(f"{n}_") and c[len(n) + 1:].isdigit()) for n in names]
        if schema is not None and tuple(schema) != tuple(dims):
            raise CohortFormatError(f"{path}: dimensions {dims} do not match schema {list(schema)}")
        with_oracle = header[-1] == "oracle_log_hazard"
        expected = _columns(names, dims, with_oracle)
        if header != expected:
            raise CohortFormatError(f"{path}: header does not follow the cohort layout")
        ids, times, events, masks, oracle = [], [], [], [], []
        feats: list[list[np.ndarray]] = [[] for _ in range(K)]
        for row_no, row in enumerate(reader, start=1):
            where = f"data row {row_no} (line {row_no + 2})"
            if len(row) != len(expected):
                raise CohortFormatError(f"{path}: {where} has {len(row)} fields, expected {len(expected)}")
            try:
                ids.append(row[0])
                times.append(float(row[1]))
                events.append(int(row[2]))
                flags = [int(v) for v in row[3:3 + K]]
                if any(f not in (0, 1) for f in flags) or events[-1] not in (0, 1):
                    raise ValueError("flags must be 0 or 1")
                pos = 3 + K
                for k, d in enumerate(dims):
                    block = row[pos:pos + d]
                    pos += d
                    if flags[k]:
                        if any(v == "" for v in block):
                            raise ValueError(f"presence flag set but {names[k]} block is empty")
                        feats[k].append(np.array([float(v) for v in block]))
                    else:
                        feats[k].append(np.zeros(d))
                masks.append(flags)
                if with_oracle:
                    oracle.append(float(row[pos]))
            except ValueError as exc:
                raise CohortFormatError(f"{path}: malformed {where}: {exc}") from None
    if not ids:
        raise CohortFormatError(f"{path}: no patient rows")
    features = [np.vstack(f) if f else np.zeros((0, d)) for f, d in zip(feats, dims)]
    try:
        return Cohort(np.array(ids), np.array(times), np.array(events), np.array(masks, dtype=bool),
                      features, np.array(oracle) if with_oracle else None, tuple(names))
    except ValueError as exc:
        raise CohortFormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    seed: int
    fold: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    strata: np.ndarray


def survival_strata(times, events) -> np.ndarray:
    """Label 2 = death within the median observed time, 1 = later death, 0 = censored."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(bool)
    early = e & (t <= np.median(t))
    return np.where(early, 2, np.where(e, 1, 0))


def _merge_small_strata(labels: np.ndarray, k: int) -> np.ndarray:
    labels = labels.copy()
    while True:
        values, counts = np.unique(labels, return_counts=True)
        small = values[counts < k]
        if small.size == 0 or values.size == 1:
            return labels
        s = small[0]
        others = values[values != s]
        target = others[np.argmin(np.abs(others - s))]
        warnings.warn(f"stratum {s} has fewer than {k} patients; merged into stratum {target}", stacklevel=3)
        labels[labels == s] = target


def _deal(labels: np.ndarray, members: np.ndarray, n_groups: int, rng: np.random.Generator) -> np.ndarray:
    """Assign ``members`` to groups round-robin, stratum by stratum, continuing the cycle."""
    groups = np.empty(members.size, dtype=np.int64)
    slot = 0
    sub = labels[members]
    for s in np.unique(sub):
        pos = np.flatnonzero(sub == s)
        pos = pos[rng.permutation(pos.size)]
        groups[pos] = (slot + np.arange(pos.size)) % n_groups
        slot = (slot + pos.size) % n_groups
    return groups


def stratified_folds(times, events, k: int = 5, seeds: Sequence[int] = (0, 1, 2),
                     val_groups: int = 5) -> list[FoldPlan]:
    """Per seed, k stratified test folds; validation is one in ``val_groups`` of the rest
    (64/16/20 for k = 5)."""
    n = len(times)
    if n < 2 * k:
        raise ValueError(f"stratified_folds: need at least {2 * k} patients, got {n}")
    labels = _merge_small_strata(survival_strata(times, events), k)
    plans = []
    everyone = np.arange(n)
    for seed in seeds:
        rng = make_rng(seed, 2)
        test_group = _deal(labels, everyone, k, rng)
        for f in range(k):
            test = np.flatnonzero(test_group == f)
            rest = np.flatnonzero(test_group != f)
            vg = _deal(labels, rest, val_groups, rng)
            plans.append(FoldPlan(seed, f, np.sort(rest[vg != 0]), np.sort(rest[vg == 0]), test, labels))
    return plans


# ---------------------------------------------------------------------------
# masks


def modality_dropout_mask(mask: np.ndarray, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each available non-clinical modality with probability 1 - p_drop; clinical always kept."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must be in [0, 1], got {p_drop}")
    mask = np.asarray(mask, dtype=bool)
    keep = rng.random(mask.shape) < 1.0 - p_drop
    out = mask & keep
    out[:, 0] = True
    return out


def missingness_sweep_mask(cohort: Cohort, m: float, rng: np.random.Generator) -> Cohort:
    """Copy of ``cohort`` with each available non-clinical modality masked with probability m."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"missingness level must be in [0, 1), got {m}")
    return cohort.with_mask(modality_dropout_mask(cohort.mask, m, rng))


def combination_mask(cohort: Cohort, combo: str) -> Cohort:
    """Keep only the modalities named in ``combo`` (e.g. "C+T+M")."""
    codes = [c.strip() for c in combo.split("+")]
    unknown = set(codes) - set(MODALITY_CODES)
    if unknown or "C" not in codes:
        raise ValueError(f"invalid modality combination {combo!r}")
    keep = np.array([code in codes for code in MODALITY_CODES[: len(cohort.features)]])
    return cohort.with_mask(cohort.mask & keep[None, :])


# ---------------------------------------------------------------------------
# scaling


@dataclass
class RobustScaler:
    centers: list[np.ndarray]
    scales: list[np.ndarray]

    @classmethod
    def fit(cls, cohort: Cohort) -> "RobustScaler":
        centers, scales = [], []
        for k, x in enumerate(cohort.features):
            rows = x[cohort.mask[:, k]]
            if rows.shape[0] == 0:
                centers.append(np.zeros(x.shape[1]))
                scales.append(np.ones(x.shape[1]))
                continue
            q25, med, q75 = np.percentile(rows, [25, 50, 75], axis=0)
            iqr = q75 - q25
            centers.append(med)
            scales.append(np.where(iqr > 0, iqr, 1.0))
        return cls(centers, scales)

    def transform(self, cohort: Cohort) -> Cohort:
        feats = [np.where(cohort.mask[:, k:k + 1], (x - c) / s, 0.0)
                 for k, (x, c, s) in enumerate(zip(cohort.features, self.centers, self.scales))]
        return replace(cohort, features=feats)
