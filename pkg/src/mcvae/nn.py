"""Layer primitives and the AdamW optimizer built on :mod:`mcvae.autodiff`."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5


def make_rng(*key: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by integers such as (seed, fold)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


class Module:
    """Minimal container: parameters, buffers and child modules found by attribute walk."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: stored shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=ad.DTYPE)
        for name, buf in buffers.items():
            buf[...] = state[name]


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=ad.DTYPE), requires_grad=True, name=name)


class Dense(Module):
    """Fully connected layer, weight stored (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, activation: str | None = None):
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = parameter(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        self.bias = parameter(np.zeros(out_dim)) if bias else None
        self.activation = activation
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ad.ShapeError(
                f"Dense: input feature dimension {x.shape[-1]} != layer input dimension {self.in_dim}"
            )
        out = ad.linear(x, self.weight, self.bias)
        if self.activation == "relu":
            return ad.relu(out)
        if self.activation == "gelu":
            return ad.gelu(out)
        if self.activation == "sigmoid":
            return ad.sigmoid(out)
        return out


class BatchNorm(Module):
    def __init__(self, dim: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.scale = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool | None = None) -> Tensor:
        training = self.training if training is None else training
        if not training:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            return ad.add(ad.mul(ad.sub(x, self.running_mean), self.scale * inv), self.shift)
        n = x.shape[0]
        if n < 2:
            raise ValueError(f"BatchNorm: train mode needs a batch of at least 2 rows, got {n}")
        out, mu, var = ad.batch_norm(x, self.scale, self.shift, self.eps)
        m = self.momentum
        self.running_mean *= 1.0 - m
        self.running_mean += m * mu
        self.running_var *= 1.0 - m
        self.running_var += m * var * (n / (n - 1))
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LN_EPS):
        self.scale = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.scale, self.shift, self.eps)


def feature_dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero each entry with probability ``p``, rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must satisfy 0 <= p < 1, got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    keep = rng.random(x.shape) >= p
    return ad.mul(x, keep / (1.0 - p))


@numba.njit(cache=True)
def _sum_sq(g):
    total = 0.0
    for x in g.flat:
        total += x * x
    return total


@numba.njit(cache=True, fastmath=True)
def _adamw_kernel(p, g, m, v, lr, wd, b1, b2, eps, bc1, bc2):
    decay = 1.0 - lr * wd
    step = lr / bc1
    inv_bc2 = 1.0 / np.sqrt(bc2)
    for i in range(p.size):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        p[i] = p[i] * decay - step * m[i] / (np.sqrt(v[i]) * inv_bc2 + eps)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}; step rejected")
        self.name = name


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Parameters whose ``grad`` is None are skipped entirely (no decay, no moment update).
    """

    params: dict[str, Tensor]
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    param_steps: dict[str, int] = field(default_factory=dict)

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(_sum_sq(p.grad)):
                raise NonFiniteGradient(name)
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            t = self.param_steps.get(name, 0) + 1
            self.param_steps[name] = t
            if name not in self.exp_avg:
                self.exp_avg[name] = np.zeros_like(p.data)
                self.exp_avg_sq[name] = np.zeros_like(p.data)
            _adamw_kernel(
                p.data.reshape(-1), np.ascontiguousarray(p.grad).reshape(-1),
                self.exp_avg[name].reshape(-1), self.exp_avg_sq[name].reshape(-1),
                self.lr, self.weight_decay, self.beta1, self.beta2, self.eps,
                1.0 - self.beta1**t, 1.0 - self.beta2**t,
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
