"""Training objective: Cox partial likelihood, masked reconstruction, weighted KL,
cross-modal InfoNCE, KL annealing and uncertainty weighting."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOSS_TERMS = ("task", "recon", "kl", "contrast")


class NoEventBatch(ValueError):
    """The batch contains no observed event, so the partial likelihood is undefined."""


class NonFiniteLoss(FloatingPointError):
    def __init__(self, component: str, where: str = ""):
        msg = f"non-finite {component} loss"
        super().__init__(f"{msg} at {where}" if where else msg)
        self.component = component


def risk_set_matrix(times: np.ndarray) -> np.ndarray:
    """R[i, j] = t_j >= t_i (Breslow: tied times share the risk set)."""
    times = np.asarray(times, dtype=float)
    return times[None, :] >= times[:, None]


def cox_loss(log_hazards: Tensor, times: np.ndarray, events: np.ndarray) -> Tensor:
    """Negative log partial likelihood, summed over event patients."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events).astype(bool)
    if np.any(times <= 0):
        raise ValueError("cox_loss: times must be positive")
    if not events.any():
        raise NoEventBatch("cox_loss: no-event batch")
    ev = np.flatnonzero(events)
    at_risk = risk_set_matrix(times)[ev]
    offsets = np.where(at_risk, 0.0, -np.inf)
    f = ad.as_tensor(log_hazards)
    spread = ad.add(ad.broadcast(ad.reshape(f, (1, f.shape[0])), at_risk.shape), offsets)
    lse = ad.logsumexp(spread, axis=1)
    return ad.neg(ad.sum_(ad.sub(ad.take_rows(f, ev), lse)))


def reconstruction_loss(targets: Mapping[int, np.ndarray], reconstructions: Mapping[int, Tensor],
                        batch_size: int) -> Tensor:
    """sum_k sum_{available rows} ||x - x_hat||^2 / batch_size.

    ``targets[k]`` and ``reconstructions[k]`` hold only the available rows of modality k;
    masked modalities are simply absent.
    """
    total: Tensor = Tensor(0.0)
    for k, recon in reconstructions.items():
        x = np.asarray(targets[k], dtype=float)
        if x.shape != recon.shape:
            raise ad.ShapeError(f"reconstruction_loss: modality {k} target {x.shape} vs {recon.shape}")
        total = ad.add(total, ad.sum_(ad.square(ad.sub(recon, x))))
    return ad.mul(total, 1.0 / batch_size)


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """Per-row KL(N(mu, diag exp(logvar)) || N(0, I))."""
    inner = ad.sub(ad.add(ad.square(mu), ad.exp(logvar)), ad.add(logvar, 1.0))
    return ad.mul(ad.sum_(inner, axis=1), 0.5)


def kl_loss(posteriors: Mapping[int, tuple[Tensor, Tensor]], kl_logits: Tensor, batch_size: int) -> Tensor:
    """sum_k softmax(kl_logits)_k * sum_{available rows} KL_k / batch_size."""
    weights = ad.softmax(kl_logits)
    total: Tensor = Tensor(0.0)
    for k, (mu, logvar) in posteriors.items():
        total = ad.add(total, ad.mul(ad.sum_(gaussian_kl(mu, logvar)), weights[k]))
    return ad.mul(total, 1.0 / batch_size)


def contrastive_loss(embeddings: Tensor, owners: np.ndarray, temperature: float) -> Tensor:
    """Cross-modal InfoNCE over all available (patient, modality) embeddings.

    ``embeddings`` has one row per available (patient, modality); ``owners`` gives the
    patient of each row. Positives are other rows of the same patient; the denominator
    runs over every row except the anchor. Averaged over ordered positive pairs; zero
    when no patient has two available modalities.
    """
    if temperature <= 0:
        raise ValueError(f"contrastive_loss: temperature must be > 0, got {temperature}")
    owners = np.asarray(owners)
    same = owners[:, None] == owners[None, :]
    np.fill_diagonal(same, False)
    anchors, partners = np.nonzero(same)
    if anchors.size == 0:
        return Tensor(0.0)
    sim = ad.mul(ad.cosine_similarity(embeddings, embeddings), 1.0 / temperature)
    diag = np.zeros(same.shape)
    np.fill_diagonal(diag, -np.inf)
    lse = ad.logsumexp(ad.add(sim, diag), axis=1)
    pos = ad.slice_(sim, (anchors, partners))
    return ad.mul(ad.sum_(ad.sub(ad.slice_(lse, anchors), pos)), 1.0 / anchors.size)


def beta_schedule(epoch: float, warmup_epochs: int, beta_max: float = 1.0) -> float:
    """Linear KL ramp from 0 at epoch 0 to ``beta_max`` at ``warmup_epochs``."""
    if warmup_epochs < 1:
        raise ValueError("warmup_epochs must be >= 1")
    return beta_max * min(1.0, max(epoch, 0) / warmup_epochs)


@dataclass
class LossBreakdown:
    task: float
    recon: float
    kl: float
    contrast: float
    total: float
    beta: float
    weights: tuple[float, float, float, float]

    def as_record(self) -> dict:
        rec = asdict(self)
        rec["weights"] = list(self.weights)
        return rec


def total_loss(components: Sequence[Tensor | None], log_vars: Tensor) -> Tensor:
    """sum_i exp(-s_i)/2 * L_i + s_i/2 over present components (s_i = log sigma_i^2)."""
    total: Tensor = Tensor(0.0)
    for i, comp in enumerate(components):
        if comp is None:
            continue
        s = log_vars[i]
        total = ad.add(total, ad.add(ad.mul(ad.mul(ad.exp(ad.neg(s)), 0.5), comp), ad.mul(s, 0.5)))
    return total


def combine(task: Tensor | None, recon: Tensor, kl: Tensor, contrast: Tensor, beta: float,
            log_vars: Tensor, where: str = "") -> tuple[Tensor, LossBreakdown]:
    """Fold beta into the KL term, check finiteness and apply uncertainty weighting."""
    kl_scaled = ad.mul(kl, beta)
    comps = (task, recon, kl_scaled, contrast)
    for name, comp in zip(LOSS_TERMS, comps):
        if comp is not None and not np.isfinite(comp.data).all():
            raise NonFiniteLoss(name, where)
    total = total_loss(comps, log_vars)
    if not np.isfinite(total.data).all():
        raise NonFiniteLoss("total", where)
    weights = tuple(float(w) for w in 0.5 * np.exp(-log_vars.data))
    breakdown = LossBreakdown(
        task=float(task.data) if task is not None else math.nan,
        recon=float(recon.data),
        kl=float(kl_scaled.data),
        contrast=float(contrast.data),
        total=float(total.data),
        beta=float(beta),
        weights=weights,  # type: ignore[arg-type]
    )
    return total, breakdown


def model_losses(model, batch_features: Sequence[np.ndarray], pass_, times: np.ndarray,
                 events: np.ndarray, beta: float, temperature: float, where: str = ""):
    """All four terms for one forward pass of :class:`~mcvae.model.McvaeModel`."""
    n = pass_.mask.shape[0]
    try:
        task = cox_loss(pass_.log_hazard, times, events)
    except NoEventBatch:
        task = None
    targets = {k: np.asarray(batch_features[k])[pass_.latents[k].rows] for k in pass_.reconstructions}
    recon = reconstruction_loss(targets, pass_.reconstructions, n)
    posteriors = {k: (lat.mu, lat.logvar) for k, lat in enumerate(pass_.latents) if lat.available}
    kl = kl_loss(posteriors, model.kl_logits, n)
    avail = [lat for lat in pass_.latents if lat.available]
    emb = ad.concat([lat.z for lat in avail], axis=0)
    owners = np.concatenate([lat.rows for lat in avail])
    contrast = contrastive_loss(emb, owners, temperature)
    return combine(task, recon, kl, contrast, beta, model.log_vars, where)
