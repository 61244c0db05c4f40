"""Single-task Decision Transformer.

Token layout per step t is (rtg_t, s_t, a_t); the action for step t is read
off the hidden vector at the s_t token. Windows are right-padded: positions
``>= valid_len`` hold zeros and, because attention is causal, can never
influence a valid position.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .numerics import Adam, Rng


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DTConfig:
    state_dim: int
    action_dim: int
    max_timestep: int
    action_bound: float = 1.0
    context_len: int = 20
    n_layers: int = 3
    n_heads: int = 1
    embed_dim: int = 128
    mlp_dim: int = 128
    rtg_scale: float = 1.0
    loss_positions: str = "all"

    def __post_init__(self):
        if self.context_len < 1 or self.n_layers < 1 or self.mlp_dim < 1:
            raise ConfigError("context_len, n_layers and mlp_dim must be >= 1")
        if self.embed_dim < 2 or self.embed_dim % self.n_heads:
            raise ConfigError("embed_dim must be >= 2 and divisible by n_heads")
        if self.loss_positions not in ("all", "last"):
            raise ConfigError("loss_positions must be 'all' or 'last'")


@dataclass
class WindowBatch:
    """A batch of trajectory windows (tau), right-padded to length K."""

    rtg: torch.Tensor  # B x K
    states: torch.Tensor  # B x K x state_dim
    actions: torch.Tensor  # B x K x action_dim
    timesteps: torch.Tensor  # B x K, int64
    valid_len: torch.Tensor  # B, int64

    @property
    def size(self) -> int:
        return self.rtg.shape[0]

    @property
    def context_len(self) -> int:
        return self.rtg.shape[1]

    @property
    def mask(self) -> torch.Tensor:
        pos = torch.arange(self.context_len)
        return pos[None, :] < self.valid_len[:, None]

    def last_mask(self) -> torch.Tensor:
        pos = torch.arange(self.context_len)
        return pos[None, :] == (self.valid_len[:, None] - 1)

    def to(self, dtype: torch.dtype) -> "WindowBatch":
        return WindowBatch(self.rtg.to(dtype), self.states.to(dtype), self.actions.to(dtype), self.timesteps, self.valid_len)

    def select(self, idx) -> "WindowBatch":
        return WindowBatch(self.rtg[idx], self.states[idx], self.actions[idx], self.timesteps[idx], self.valid_len[idx])

    @classmethod
    def concat(cls, batches: list["WindowBatch"]) -> "WindowBatch":
        return cls(*(torch.cat([getattr(b, f) for b in batches]) for f in ("rtg", "states", "actions", "timesteps", "valid_len")))


@dataclass
class ForwardOutput:
    pred_actions: torch.Tensor  # B x K x action_dim
    hidden: torch.Tensor  # B x K x embed_dim, final-block output at state tokens


# --------------------------------------------------------------------------
# modules


class Front(nn.Module):
    """Per-modality embeddings, timestep table and embedding layernorm."""

    def __init__(self, cfg: DTConfig, rng: Rng):
        super().__init__()
        h = cfg.embed_dim
        self.cfg = cfg
        self.rtg_w = nx.randn_param(rng, (h, 1), 0.02)
        self.rtg_b = nx.zeros_param((h,))
        self.state_w = nx.randn_param(rng, (h, cfg.state_dim), 0.02)
        self.state_b = nx.zeros_param((h,))
        self.action_w = nx.randn_param(rng, (h, cfg.action_dim), 0.02)
        self.action_b = nx.zeros_param((h,))
        self.timestep_table = nx.randn_param(rng, (cfg.max_timestep, h), 0.02)
        self.ln_gain = nx.ones_param((h,))
        self.ln_bias = nx.zeros_param((h,))

    def forward(self, batch: WindowBatch) -> torch.Tensor:
        cfg = self.cfg
        if int(batch.timesteps.max()) >= cfg.max_timestep or int(batch.timesteps.min()) < 0:
            raise ConfigError(f"timestep outside [0, {cfg.max_timestep})")
        B, K = batch.rtg.shape
        t_emb = self.timestep_table[batch.timesteps]
        r = nx.linear(batch.rtg.unsqueeze(-1) * cfg.rtg_scale, self.rtg_w, self.rtg_b) + t_emb
        s = nx.linear(batch.states, self.state_w, self.state_b) + t_emb
        a = nx.linear(batch.actions, self.action_w, self.action_b) + t_emb
        tokens = torch.stack([r, s, a], dim=2).reshape(B, 3 * K, cfg.embed_dim)
        return nx.layernorm(tokens, self.ln_gain, self.ln_bias)


class Back(nn.Module):
    """Action head: linear h -> action_dim squashed by tanh * action_bound."""

    def __init__(self, cfg: DTConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        self.weight = nx.randn_param(rng, (cfg.action_dim, cfg.embed_dim), 0.02)
        self.bias = nx.zeros_param((cfg.action_dim,))

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return torch.tanh(nx.linear(hidden, self.weight, self.bias)) * self.cfg.action_bound


class MLP(nn.Module):
    """Block MLP ``W1 relu(W0 x + b0) + b1`` with optional rank-r adapters.

    W0 is d x h and W1 is h x d. When adapters are attached the effective
    weights are ``W0 + B0 A0`` and ``W1 + B1 A1``.
    """

    def __init__(self, cfg: DTConfig, rng: Rng):
        super().__init__()
        h, d = cfg.embed_dim, cfg.mlp_dim
        self.w0 = nx.randn_param(rng, (d, h), 0.02)
        self.b0 = nx.zeros_param((d,))
        self.w1 = nx.randn_param(rng, (h, d), 0.02)
        self.b1 = nx.zeros_param((h,))
        self.lora_a0 = self.lora_b0 = self.lora_a1 = self.lora_b1 = None
        self.rank = 0

    def attach_adapters(self, rank: int) -> None:
        d, h = self.w0.shape
        if not 1 <= rank <= min(d, h):
            raise ConfigError(f"adapter rank must lie in [1, {min(d, h)}]")
        self.rank = rank
        self.lora_a0 = nx.zeros_param((rank, h))
        self.lora_b0 = nx.zeros_param((d, rank))
        self.lora_a1 = nx.zeros_param((rank, d))
        self.lora_b1 = nx.zeros_param((h, rank))

    def adapter_tensors(self) -> list[torch.nn.Parameter]:
        return [self.lora_a0, self.lora_b0, self.lora_a1, self.lora_b1] if self.rank else []

    def base_tensors(self) -> list[torch.nn.Parameter]:
        return [self.w0, self.b0, self.w1, self.b1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w0, w1 = self.w0, self.w1
        if self.rank:
            w0 = w0 + nx.matmul(self.lora_b0, self.lora_a0)
            w1 = w1 + nx.matmul(self.lora_b1, self.lora_a1)
        return nx.linear(nx.relu(nx.linear(x, w0, self.b0)), w1, self.b1)


class Block(nn.Module):
    """Pre-layernorm causal self-attention block followed by the MLP."""

    def __init__(self, cfg: DTConfig, rng: Rng):
        super().__init__()
        h = cfg.embed_dim
        self.n_heads = cfg.n_heads
        self.ln1_gain, self.ln1_bias = nx.ones_param((h,)), nx.zeros_param((h,))
        self.wq = nx.randn_param(rng, (h, h), 0.02)
        self.wk = nx.randn_param(rng, (h, h), 0.02)
        self.wv = nx.randn_param(rng, (h, h), 0.02)
        self.wo = nx.randn_param(rng, (h, h), 0.02)
        self.bo = nx.zeros_param((h,))
        self.ln2_gain, self.ln2_bias = nx.ones_param((h,)), nx.zeros_param((h,))
        self.mlp = MLP(cfg, rng)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        B, L, h = x.shape
        nh = self.n_heads
        hd = h // nh

        def split(t):
            return t.reshape(B, L, nh, hd).transpose(1, 2)

        q, k, v = split(nx.linear(x, self.wq)), split(nx.linear(x, self.wk)), split(nx.linear(x, self.wv))
        scores = nx.matmul(q, k.transpose(-1, -2)) * nx.attention_scale(hd)
        att = nx.matmul(nx.softmax_causal(scores), v)
        return nx.linear(att.transpose(1, 2).reshape(B, L, h), self.wo, self.bo)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(nx.layernorm(x, self.ln1_gain, self.ln1_bias))
        return x + self.mlp(nx.layernorm(x, self.ln2_gain, self.ln2_bias))


def build_trunk(cfg: DTConfig, rng: Rng) -> nn.ModuleList:
    return nn.ModuleList(Block(cfg, rng.child(f"block{i}")) for i in range(cfg.n_layers))


def run_dt(front: Front, blocks: nn.ModuleList, back: Back, batch: WindowBatch) -> ForwardOutput:
    """Forward pass shared by single-head models and assembled (trunk, head) pairs."""
    x = front(batch)
    for block in blocks:
        x = block(x)
    nx.check_finite(x, "transformer activations")
    B, L, h = x.shape
    hidden = x.reshape(B, L // 3, 3, h)[:, :, 1]
    return ForwardOutput(back(hidden), hidden)


class DTModel(nn.Module):
    def __init__(self, cfg: DTConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        self.front = Front(cfg, rng.child("front"))
        self.blocks = build_trunk(cfg, rng.child("trunk"))
        self.back = Back(cfg, rng.child("back"))

    def forward(self, batch: WindowBatch) -> ForwardOutput:
        return run_dt(self.front, self.blocks, self.back, batch)

    def clone(self) -> "DTModel":
        return copy.deepcopy(self)


def parameter_count(cfg: DTConfig) -> int:
    h, d, sd, ad = cfg.embed_dim, cfg.mlp_dim, cfg.state_dim, cfg.action_dim
    front = (h + h) + (h * sd + h) + (h * ad + h) + cfg.max_timestep * h + 2 * h
    block = 4 * h + 4 * h * h + h + (d * h + d + h * d + h)
    back = ad * h + ad
    return front + cfg.n_layers * block + back


# --------------------------------------------------------------------------
# training


def prediction_loss(out: ForwardOutput, batch: WindowBatch, loss_positions: str = "all") -> torch.Tensor:
    mask = batch.mask if loss_positions == "all" else batch.last_mask()
    return nx.masked_mse(out.pred_actions, batch.actions, mask)


def train_step_single(model: DTModel, batch: WindowBatch, opt: Adam, extra_loss=None) -> float:
    """One optimizer step on the action-prediction loss; returns the pre-step loss.

    ``extra_loss`` is an optional callable returning a scalar added to the
    objective (regularization penalties of the baselines).
    """
    opt.zero_grad()
    loss = prediction_loss(model(batch), batch, model.cfg.loss_positions)
    total = loss if extra_loss is None else loss + extra_loss()
    total.backward()
    opt.step()
    return float(loss.detach())


def make_optimizer(params, lr: float = 1e-4, weight_decay: float = 1e-4) -> Adam:
    return Adam([p for p in params if p.requires_grad], lr=lr, weight_decay=weight_decay)


# --------------------------------------------------------------------------
# evaluation


class RolloutError(RuntimeError):
    pass


@torch.no_grad()
def rollout(policy, task, target_return: float, n_episodes: int = 10, rng: Rng | None = None, context_len: int | None = None) -> float:
    """Mean undiscounted return of ``n_episodes`` return-conditioned episodes.

    ``policy`` maps a WindowBatch to a ForwardOutput (a DTModel or any
    assembled callable). Episodes run in lockstep as one batch; the
    return-to-go fed at step t is ``target_return`` minus rewards collected so far.
    """
    if task.horizon < 1:
        raise RolloutError("horizon must be >= 1")
    if context_len is None:
        context_len = policy.cfg.context_len
    rng = rng or Rng(0)
    K, H, E = context_len, task.horizon, n_episodes
    states = np.zeros((E, H + 1, task.state_dim))
    actions = np.zeros((E, H, task.action_dim))
    rtg = np.zeros((E, H))
    states[:, 0] = task.reset(rng, E)
    returns = np.zeros(E)
    for t in range(H):
        rtg[:, t] = target_return - returns
        start = max(0, t - K + 1)
        n = t - start + 1
        win_states = np.zeros((E, K, task.state_dim))
        win_actions = np.zeros((E, K, task.action_dim))
        win_rtg = np.zeros((E, K))
        win_ts = np.zeros((E, K), dtype=np.int64)
        win_states[:, :n] = states[:, start : t + 1]
        win_actions[:, : n - 1] = actions[:, start:t]
        win_rtg[:, :n] = rtg[:, start : t + 1]
        win_ts[:, :n] = np.arange(start, t + 1)
        batch = WindowBatch(
            torch.as_tensor(win_rtg, dtype=torch.float32),
            torch.as_tensor(win_states, dtype=torch.float32),
            torch.as_tensor(win_actions, dtype=torch.float32),
            torch.as_tensor(win_ts),
            torch.full((E,), n, dtype=torch.int64),
        )
        try:
            act = policy(batch).pred_actions[:, n - 1].double().numpy()
        except nx.NumericError as exc:
            raise RolloutError(str(exc)) from exc
        act = np.clip(act, -1.0, 1.0)
        actions[:, t] = act
        states[:, t + 1], reward = task.step(states[:, t], act)
        returns += reward
    return float(returns.mean())
