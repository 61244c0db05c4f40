"""Tensor primitives, optimizer and seeded RNG shared by every model.

Tensors are ``torch.Tensor``; reverse-mode differentiation uses torch's
autograd tape. The primitives here are the only math the models call, so the
finite-difference suite in the tests covers everything the models compute.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch

LN_EPS = 1e-5


class DimensionError(ValueError):
    pass


class NumericError(RuntimeError):
    """Raised when NaN/Inf reaches a layer boundary or an optimizer update."""


class FrozenParameterError(RuntimeError):
    pass


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul inner dims differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    y = matmul(x, weight.transpose(-1, -2))
    if bias is not None:
        y = y + bias
    return y


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(x, 0.0)


def layernorm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    if x.shape[-1] < 2:
        raise DimensionError("layernorm needs at least 2 features")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def causal_mask(length: int) -> torch.Tensor:
    return torch.ones(length, length, dtype=torch.bool).tril()


def softmax_causal(scores: torch.Tensor) -> torch.Tensor:
    """Row softmax over positions j <= i; masked entries come out exactly 0."""
    n = scores.shape[-1]
    if scores.shape[-2] != n:
        raise DimensionError("softmax_causal expects square score matrices")
    masked = scores.masked_fill(~causal_mask(n), float("-inf"))
    shifted = masked - masked.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    d = pred - target
    return (d * d).mean()


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over positions where ``mask`` (B x K) is true.

    Padding rows are removed by selection rather than multiplication so their
    content (even non-finite values) cannot leak into the result.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return mse(pred[mask], target[mask])


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis; 0 where either vector is zero."""
    dot = (u * v).sum(dim=-1)
    norms = torch.linalg.vector_norm(u, dim=-1) * torch.linalg.vector_norm(v, dim=-1)
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    return torch.where(norms > 0, dot / safe, torch.zeros_like(dot)).clamp(-1.0, 1.0)


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {where}")
    return x


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[int, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[int, torch.Tensor] = field(default_factory=dict)


def adam_step(params: list[torch.Tensor], grads: list[torch.Tensor | None], state: OptimizerState) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Parameters whose gradient is ``None`` are skipped entirely (no decay, no
    moment update), which is what keeps untouched task heads bit-identical.
    """
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise NumericError("non-finite gradient in optimizer step")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    lr = state.learning_rate
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is None:
                continue
            if g.shape != p.shape:
                raise DimensionError("gradient shape differs from parameter")
            key = id(p)
            m = state.exp_avg.get(key)
            if m is None:
                m = state.exp_avg[key] = torch.zeros_like(p)
                state.exp_avg_sq[key] = torch.zeros_like(p)
            v = state.exp_avg_sq[key]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if state.weight_decay:
                p.mul_(1.0 - lr * state.weight_decay)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-lr / c1)


class Adam:
    """Adam over a fixed parameter list; refuses frozen tensors."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-4, weight_decay: float = 1e-4):
        self.params: list[torch.Tensor] = []
        self.state = OptimizerState(learning_rate=lr, weight_decay=weight_decay)
        self.add(params)

    def add(self, params: Iterable[torch.Tensor]) -> None:
        for p in params:
            if not p.requires_grad:
                raise FrozenParameterError("optimizer was handed a frozen tensor")
            if any(p is q for q in self.params):
                continue
            self.params.append(p)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if not p.requires_grad and p.grad is not None:
                raise FrozenParameterError("gradient written to a frozen tensor")
        adam_step(self.params, [p.grad if p.requires_grad else None for p in self.params], self.state)


# --------------------------------------------------------------------------
# gradient verification


def finite_diff_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
    floor: float = 1e-8,
) -> float:
    """Max component-wise relative error between autograd and central differences.

    ``f`` maps a tensor shaped like ``x`` to a scalar. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``; ``indices`` restricts the comparison
    to a subset of flattened components.
    """
    if not 1e-5 <= h <= 1e-3:
        raise ValueError("finite-difference step must lie in [1e-5, 1e-3]")
    x0 = x.detach().clone()
    xg = x0.clone().requires_grad_(True)
    out = f(xg)
    # a function that ignores its input has no graph at all
    (grad,) = torch.autograd.grad(out, xg, allow_unused=True) if out.requires_grad else (None,)
    analytic = torch.zeros_like(x0) if grad is None else grad.detach()
    flat_idx = range(x0.numel()) if indices is None else list(indices)
    worst = 0.0
    with torch.no_grad():
        for i in flat_idx:
            xp = x0.clone().view(-1)
            xp[i] += h
            xm = x0.clone().view(-1)
            xm[i] -= h
            num = (f(xp.view_as(x0)) - f(xm.view_as(x0))).item() / (2 * h)
            a = analytic.view(-1)[i].item()
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# randomness


class Rng:
    """Seeded generator with named, independent child streams.

    A child is keyed by (parent key, name), so adding a consumer never shifts
    the draws another consumer sees.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = path
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed & (2**64 - 1), *path])))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self._path + (zlib.crc32(name.encode("utf-8")),))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)


def randn_param(rng: Rng, shape: tuple[int, ...], scale: float) -> torch.nn.Parameter:
    values = rng.normal(shape, scale).astype(np.float32)
    return torch.nn.Parameter(torch.from_numpy(values))


def zeros_param(shape: tuple[int, ...]) -> torch.nn.Parameter:
    return torch.nn.Parameter(torch.zeros(shape, dtype=torch.float32))


def ones_param(shape: tuple[int, ...]) -> torch.nn.Parameter:
    return torch.nn.Parameter(torch.ones(shape, dtype=torch.float32))


def attention_scale(dim: int) -> float:
    return 1.0 / math.sqrt(dim)
