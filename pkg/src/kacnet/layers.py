"""Parameterized building blocks, the Adam optimizer, and the weight penalty."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from kacnet import autodiff as ad
from kacnet.autodiff import Tensor
from kacnet.errors import ContractError, DimensionError, NumericError


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class FcLayer:
    """Affine map ``x @ W.T + b`` with ``W`` of shape [out, in]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None, name: str = "fc"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.weight = ad.parameter(xavier_uniform(rng, out_dim, in_dim), name=f"{name}.weight")
        self.bias = ad.parameter(np.zeros(out_dim), name=f"{name}.bias")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return fc_forward(self, x)

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield self.weight.name, self.weight
        yield self.bias.name, self.bias


def fc_forward(layer: FcLayer, x: Tensor) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(f"fc_forward[{layer.name}]: input width {x.shape[-1]} != {layer.in_dim}")
    return x @ layer.weight.T + layer.bias


class RecurrentCell:
    """Single-layer LSTM cell.

    Gate blocks are stacked in the order input, forget, candidate, output
    along the first axis of ``w_ih``/``w_hh``/``bias``.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator | None = None, name: str = "lstm"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.hidden = hidden
        w_ih = np.concatenate([xavier_uniform(rng, hidden, in_dim) for _ in range(4)])
        w_hh = np.concatenate([xavier_uniform(rng, hidden, hidden) for _ in range(4)])
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0
        self.w_ih = ad.parameter(w_ih, name=f"{name}.w_ih")
        self.w_hh = ad.parameter(w_hh, name=f"{name}.w_hh")
        self.bias = ad.parameter(bias, name=f"{name}.bias")

    @property
    def in_dim(self) -> int:
        return self.w_ih.shape[1]

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield self.w_ih.name, self.w_ih
        yield self.w_hh.name, self.w_hh
        yield self.bias.name, self.bias

    def __call__(self, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        return recurrent_step(self, x_t, h_prev, c_prev)


def recurrent_step(cell: RecurrentCell, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    x_t, h_prev, c_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    d = cell.hidden
    if x_t.shape[-1] != cell.in_dim or h_prev.shape[-1] != d or c_prev.shape != h_prev.shape:
        raise DimensionError(
            f"recurrent_step[{cell.name}]: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"for in_dim={cell.in_dim}, hidden={d}"
        )
    z = x_t @ cell.w_ih.T + h_prev @ cell.w_hh.T + cell.bias
    gates = ad.sigmoid(z)
    i = gates[..., 0:d]
    f = gates[..., d : 2 * d]
    g = ad.tanh(z[..., 2 * d : 3 * d])
    o = gates[..., 3 * d : 4 * d]
    c_t = f * c_prev + i * g
    h_t = o * ad.tanh(c_t)
    return h_t, c_t


class BatchNorm:
    """Per-feature normalization over rows with a learned scale and shift.

    Running statistics track the biased batch variance so that eval mode
    reproduces train mode exactly once the running values equal a batch's.
    """

    def __init__(self, width: int, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn"):
        self.name = name
        self.scale = ad.parameter(np.ones(width), name=f"{name}.scale")
        self.shift = ad.parameter(np.zeros(width), name=f"{name}.shift")
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield self.scale.name, self.scale
        yield self.shift.name, self.shift

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{self.name}.running_mean", self.running_mean
        yield f"{self.name}.running_var", self.running_var

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm_forward(self, x)


def batch_norm_forward(bn: BatchNorm, x: Tensor) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != bn.scale.shape[0]:
        raise DimensionError(f"batch_norm[{bn.name}]: expected [rows, {bn.scale.shape[0]}], got {x.shape}")
    if bn.training:
        if x.shape[0] < 2:
            raise ContractError(f"batch_norm[{bn.name}]: train mode needs at least 2 rows, got {x.shape[0]}")
        mu = ad.mean(x, axis=0)
        centered = x - mu
        var = ad.mean(centered * centered, axis=0)
        if ad.is_grad_enabled():
            bn.running_mean[:] = bn.momentum * bn.running_mean + (1.0 - bn.momentum) * mu.data
            bn.running_var[:] = bn.momentum * bn.running_var + (1.0 - bn.momentum) * var.data
        normed = centered * ad.power(var + bn.eps, -0.5)
    else:
        normed = (x - bn.running_mean) * (1.0 / np.sqrt(bn.running_var + bn.eps))
    return normed * bn.scale + bn.shift


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    """Apply one bias-corrected Adam update in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first[name] = m
        state.second[name] = v
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for name in grads:
            grads[name] = grads[name] * factor
    return total


def l2_regularizer(layers: Iterable[FcLayer]) -> Tensor:
    # Squared Frobenius norm of the weights only; biases are not penalized.
    total = ad.Tensor(0.0)
    for layer in layers:
        total = total + (layer.weight * layer.weight).sum()
    return total
