"""The multimodal contrastive VAE: per-modality variational encoders, availability-aware
gated fusion, reconstruction decoders and a linear log-hazard head."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModalitySpec, default_modalities
from .nn import BatchNorm, Dense, LayerNorm, Module, feature_dropout, make_rng, parameter

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
CHECKPOINT_FORMAT = "mcvae-checkpoint/1"


@dataclass
class ModalityLatent:
    """Posterior parameters for the rows of a batch where one modality is available.

    ``rows`` indexes the batch; ``mu``/``logvar``/``z`` have one row per entry of
    ``rows``. ``z_full`` is the (batch, d_out) matrix with zeros at missing rows.
    """

    rows: np.ndarray
    mu: Tensor | None
    logvar: Tensor | None
    z: Tensor | None
    z_full: Tensor

    @property
    def available(self) -> bool:
        return self.rows.size > 0


def missing_latent(d_out: int, n_rows: int = 1) -> ModalityLatent:
    return ModalityLatent(
        rows=np.zeros(0, dtype=np.intp), mu=None, logvar=None, z=None,
        z_full=Tensor(np.zeros((n_rows, d_out))),
    )


def reparameterize(mu: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
    """z = mu + exp(logvar / 2) * noise."""
    if noise.shape != mu.shape:
        raise ad.ShapeError(f"reparameterize: noise shape {noise.shape} != mean shape {mu.shape}")
    return ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), noise))


def _bn(bn: BatchNorm, h: Tensor, training: bool) -> Tensor:
    # fewer than two rows carry no batch variance; fall back to running statistics
    return bn(h, training=training and h.shape[0] >= 2)


class Encoder(Module):
    """dropout -> [dense -> BN -> ReLU -> dropout] * (depth - 1) -> mean / log-variance heads."""

    def __init__(self, spec: ModalitySpec, hidden: int, d_out: int, dropout: float,
                 rng: np.random.Generator):
        self.spec = spec
        self.dropout = dropout
        widths = [spec.dim] + [hidden] * max(spec.depth - 1, 0)
        self.dense = [Dense(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [BatchNorm(b) for b in widths[1:]]
        self.mu_head = Dense(widths[-1], d_out, rng)
        self.logvar_head = Dense(widths[-1], d_out, rng)

    def __call__(self, x: Tensor, rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.spec.dim:
            raise ad.ShapeError(
                f"encoder {self.spec.name}: input dimension {x.shape[-1]} != {self.spec.dim}"
            )
        h = feature_dropout(x, self.dropout, self.training, rng)
        for dense, bn in zip(self.dense, self.norms):
            h = ad.relu(_bn(bn, dense(h), self.training))
            h = feature_dropout(h, self.dropout, self.training, rng)
        mu = self.mu_head(h)
        logvar = ad.clip(self.logvar_head(h), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar


class Decoder(Module):
    """dense -> BN -> ReLU -> dropout -> dense, mapping the fused latent to one modality."""

    def __init__(self, spec: ModalitySpec, hidden: int, d_out: int, dropout: float,
                 rng: np.random.Generator):
        self.spec = spec
        self.dropout = dropout
        self.inner = Dense(d_out, hidden, rng)
        self.norm = BatchNorm(hidden)
        self.outer = Dense(hidden, spec.dim, rng)

    def __call__(self, z: Tensor, rng: np.random.Generator | None) -> Tensor:
        h = ad.relu(_bn(self.norm, self.inner(z), self.training))
        h = feature_dropout(h, self.dropout, self.training, rng)
        return self.outer(h)


class FusionNetwork(Module):
    """Residual block v + dropout(W2 gelu(W1 layernorm(v)))."""

    def __init__(self, d_out: int, hidden: int, dropout: float, rng: np.random.Generator):
        self.norm = LayerNorm(d_out)
        self.expand = Dense(d_out, hidden, rng)
        self.project = Dense(hidden, d_out, rng)
        self.dropout = dropout

    def __call__(self, v: Tensor, rng: np.random.Generator | None) -> Tensor:
        h = self.project(ad.gelu(self.expand(self.norm(v))))
        return ad.add(v, feature_dropout(h, self.dropout, self.training, rng))


@dataclass
class ForwardPass:
    latents: list[ModalityLatent]
    mask: np.ndarray
    aggregate: Tensor
    fused: Tensor
    log_hazard: Tensor
    reconstructions: dict[int, Tensor] = field(default_factory=dict)


class McvaeModel(Module):
    def __init__(self, modalities: Sequence[ModalitySpec] | None = None, d_out: int = 128,
                 hidden: int = 256, dropout: float = 0.0, rng: np.random.Generator | None = None):
        modalities = tuple(modalities or default_modalities())
        if modalities[0].reconstructable:
            raise ValueError("the first modality is the clinical anchor and must not be reconstructable")
        rng = rng if rng is not None else make_rng(0)
        self.modalities = modalities
        self.d_out = d_out
        self.hidden = hidden
        self.dropout = dropout
        K = len(modalities)
        self.encoders = [Encoder(m, hidden, d_out, dropout, rng) for m in modalities]
        self.gates = parameter(np.zeros(K))
        self.fusion = FusionNetwork(d_out, hidden, dropout, rng)
        self.decoders = [Decoder(m, hidden, d_out, dropout, rng) if m.reconstructable else None
                         for m in modalities]
        self.head = Dense(d_out, 1, rng, bias=False)
        self.kl_logits = parameter(np.zeros(K))
        self.log_vars = parameter(np.zeros(4))

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    def architecture(self) -> dict[str, Any]:
        return {
            "modalities": [[m.name, m.dim, m.depth, m.reconstructable] for m in self.modalities],
            "d_out": self.d_out,
            "hidden": self.hidden,
            "dropout": self.dropout,
        }

    @classmethod
    def from_architecture(cls, arch: dict[str, Any]) -> "McvaeModel":
        mods = [ModalitySpec(n, int(d), int(depth), bool(r)) for n, d, depth, r in arch["modalities"]]
        return cls(mods, d_out=int(arch["d_out"]), hidden=int(arch["hidden"]),
                   dropout=float(arch["dropout"]))

    # -- pieces ---------------------------------------------------------------

    def encode_modality(self, k: int, x, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        return self.encoders[k](ad.as_tensor(x), rng)

    def gate_weights(self) -> Tensor:
        return ad.sigmoid(self.gates)

    def fuse(self, latents: Sequence[ModalityLatent], mask: np.ndarray,
             rng: np.random.Generator | None = None, apply_network: bool = True) -> tuple[Tensor, Tensor]:
        """Return (aggregate, fused) for a batch.

        aggregate = sum_k a_k sigmoid(g_k) z_k / sum_k a_k; fused = h(aggregate).
        """
        mask = np.asarray(mask, dtype=bool)
        counts = mask.sum(axis=1)
        if np.any(counts == 0):
            raise ValueError("fuse: every row needs at least one available modality")
        gates = self.gate_weights()
        total = None
        for k, lat in enumerate(latents):
            if not lat.available:
                continue
            term = ad.mul(lat.z_full, gates[k])
            total = term if total is None else ad.add(total, term)
        aggregate = ad.mul(total, (1.0 / counts)[:, None])
        fused = self.fusion(aggregate, rng) if apply_network else aggregate
        return aggregate, fused

    def decode(self, k: int, z_fused: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        dec = self.decoders[k]
        if dec is None:
            raise ValueError(f"modality {self.modalities[k].name!r} is not reconstructed")
        return dec(z_fused, rng)

    def predict_log_hazard(self, z_fused: Tensor) -> Tensor:
        return ad.reshape(self.head(z_fused), (z_fused.shape[0],))

    # -- full pass ------------------------------------------------------------

    def forward(self, features: Sequence[np.ndarray], mask: np.ndarray,
                rng: np.random.Generator | None = None, reconstruct: bool = True) -> ForwardPass:
        """Encode available modalities, sample (train) or take the mean (eval), fuse,
        predict and optionally decode. Unavailable rows are never read."""
        mask = np.asarray(mask, dtype=bool)
        n = mask.shape[0]
        if mask.shape[1] != self.n_modalities:
            raise ad.ShapeError(f"mask has {mask.shape[1]} columns, model has {self.n_modalities} modalities")
        latents: list[ModalityLatent] = []
        for k in range(self.n_modalities):
            rows = np.flatnonzero(mask[:, k])
            if rows.size == 0:
                latents.append(missing_latent(self.d_out, n))
                continue
            x = Tensor(np.asarray(features[k], dtype=ad.DTYPE)[rows])
            mu, logvar = self.encode_modality(k, x, rng)
            if self.training:
                z = reparameterize(mu, logvar, rng.standard_normal(mu.shape))
            else:
                z = mu
            latents.append(ModalityLatent(rows, mu, logvar, z, ad.scatter_rows(z, rows, n)))
        aggregate, fused = self.fuse(latents, mask, rng)
        log_hazard = self.predict_log_hazard(fused)
        recons: dict[int, Tensor] = {}
        if reconstruct:
            for k, lat in enumerate(latents):
                if self.decoders[k] is None or not lat.available:
                    continue
                recons[k] = self.decode(k, ad.take_rows(fused, lat.rows), rng)
        return ForwardPass(latents, mask, aggregate, fused, log_hazard, recons)

    def risk_scores(self, features: Sequence[np.ndarray], mask: np.ndarray) -> np.ndarray:
        """Eval-mode log-hazards; restores the previous train/eval mode."""
        was_training = self.training
        self.eval()
        try:
            return self.forward(features, mask, reconstruct=False).log_hazard.data.copy()
        finally:
            self.train(was_training)


def save_checkpoint(path: str | Path, model: McvaeModel, config: dict[str, Any] | None = None) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "architecture": model.architecture(), "config": config or {}}
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[McvaeModel, dict[str, Any]]:
    with np.load(Path(path), allow_pickle=False) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        state = {k[len("param/"):]: archive[k] for k in archive.files if k.startswith("param/")}
    model = McvaeModel.from_architecture(meta["architecture"])
    model.load_state_dict(state)
    model.eval()
    return model, meta["config"]
