"""Point-mass task family, scripted behavior policies, offline datasets and replay buffers.

State is (x, y, vx, vy); actions are 2-D accelerations in [-1, 1]. Direction
tasks reward velocity along a heading, Velocity tasks reward matching a
target speed. All tasks in a sequence share spaces and horizon.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dt_core import ConfigError, WindowBatch
from .numerics import Rng

MAX_SPEED = 2.0
DATASET_VERSION = 1
FAMILIES = ("direction", "velocity")
QUALITIES = ("expert", "middle")


@dataclass(frozen=True)
class TaskSpec:
    family: str
    parameter: float
    horizon: int = 50
    dt: float = 0.1
    state_dim: int = 4
    action_dim: int = 2
    gamma: float = 1.0
    init_jitter: float = 0.05

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown task family {self.family!r}")

    def reset(self, rng: Rng, n: int) -> np.ndarray:
        return rng.normal((n, self.state_dim), self.init_jitter)

    def step(self, state: np.ndarray, action: np.ndarray):
        return env_step(state, action, self)


def env_step(state: np.ndarray, action: np.ndarray, task: TaskSpec):
    """Advance one step; works on a single state (4,) or a batch (n, 4)."""
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    pos, vel = state[..., :2], state[..., 2:]
    new_pos = pos + vel * task.dt
    new_vel = vel + action * task.dt
    speed = np.linalg.norm(new_vel, axis=-1, keepdims=True)
    new_vel = np.where(speed > MAX_SPEED, new_vel * (MAX_SPEED / np.maximum(speed, 1e-12)), new_vel)
    if task.family == "direction":
        heading = np.array([math.cos(task.parameter), math.sin(task.parameter)])
        reward = new_vel @ heading
    else:
        reward = -np.abs(np.linalg.norm(new_vel, axis=-1) - task.parameter)
    return np.concatenate([new_pos, new_vel], axis=-1), reward


def expert_action(state: np.ndarray, task: TaskSpec) -> np.ndarray:
    if task.family == "direction":
        return np.array([math.cos(task.parameter), math.sin(task.parameter)])
    vel = np.asarray(state, dtype=np.float64)[2:]
    speed = float(np.linalg.norm(vel))
    unit = vel / speed if speed > 1e-6 else np.array([1.0, 0.0])
    return np.clip((task.parameter - speed) * unit, -1.0, 1.0)


def scripted_policy(state, task: TaskSpec, quality: str, rng: Rng, noise: float = 0.4, random_frac: float = 0.2) -> np.ndarray:
    """Behavior policy. ``middle`` = expert + Gaussian noise, with a fraction of uniform-random steps."""
    a = expert_action(state, task)
    if quality == "expert":
        return a
    if quality != "middle":
        raise ConfigError(f"unknown quality {quality!r}")
    # draw both every step so the stream length does not depend on the knobs
    eps = rng.normal(2, 1.0)
    coin, rand = rng.random(), rng.uniform(-1.0, 1.0, 2)
    a = a + noise * eps
    if coin < random_frac:
        a = rand
    return np.clip(a, -1.0, 1.0)


@dataclass
class Trajectory:
    states: np.ndarray  # (H+1) x 4
    actions: np.ndarray  # H x 2
    rewards: np.ndarray  # H

    @property
    def returns_to_go(self) -> np.ndarray:
        return np.cumsum(self.rewards[::-1])[::-1].copy()

    @property
    def episode_return(self) -> float:
        return float(self.returns_to_go[0])

    def __len__(self) -> int:
        return len(self.rewards)

    def to_json(self) -> dict:
        return {
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Trajectory":
        return cls(np.array(obj["states"], dtype=np.float64), np.array(obj["actions"], dtype=np.float64), np.array(obj["rewards"], dtype=np.float64))


@dataclass
class OfflineDataset:
    task: TaskSpec
    quality: str
    trajectories: list[Trajectory]
    seed: int

    def __post_init__(self):
        if not self.trajectories:
            raise ConfigError("dataset must hold at least one trajectory")

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def mean_return(self) -> float:
        return float(np.mean([t.episode_return for t in self.trajectories]))

    @property
    def max_return(self) -> float:
        return max(t.episode_return for t in self.trajectories)

    def header(self) -> dict:
        return {
            "family": self.task.family,
            "parameter": self.task.parameter,
            "quality": self.quality,
            "H": self.task.horizon,
            "n_traj": len(self.trajectories),
            "seed": self.seed,
            "transitions": self.n_transitions,
            "version": DATASET_VERSION,
        }

    def save(self, path: str | Path) -> None:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(t.to_json()) for t in self.trajectories]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "OfflineDataset":
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0])
        if head.get("version") != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {head.get('version')}")
        task = TaskSpec(head["family"], head["parameter"], horizon=head["H"])
        trajs = [Trajectory.from_json(json.loads(line)) for line in lines[1:] if line]
        return cls(task, head["quality"], trajs, head["seed"])


def run_episode(task: TaskSpec, quality: str, rng: Rng) -> Trajectory:
    H = task.horizon
    states = np.zeros((H + 1, task.state_dim))
    actions = np.zeros((H, task.action_dim))
    rewards = np.zeros(H)
    states[0] = task.reset(rng, 1)[0]
    for t in range(H):
        actions[t] = scripted_policy(states[t], task, quality, rng)
        states[t + 1], rewards[t] = env_step(states[t], actions[t], task)
    return Trajectory(states, actions, rewards)


def generate_dataset(task: TaskSpec, quality: str, n_traj: int, seed: int) -> OfflineDataset:
    if n_traj < 1:
        raise ConfigError("n_traj must be >= 1")
    rng = Rng(seed).child("generate")
    return OfflineDataset(task, quality, [run_episode(task, quality, rng) for _ in range(n_traj)], seed)


def task_sequence(family: str, n_tasks: int, horizon: int = 50) -> list[TaskSpec]:
    """Evenly spaced headings, or target speeds rising to the speed limit."""
    if family == "direction":
        params = [2 * math.pi * i / n_tasks for i in range(n_tasks)]
    elif family == "velocity":
        params = [MAX_SPEED * (i + 1) / n_tasks for i in range(n_tasks)]
    else:
        raise ConfigError(f"unknown task family {family!r}")
    return [TaskSpec(family, p, horizon=horizon) for p in params]


# --------------------------------------------------------------------------
# replay buffers and window sampling


@dataclass
class ReplayBuffer:
    task_index: int
    trajectories: list[Trajectory]
    capacity: int = 1000
    source_indices: list[int] = field(default_factory=list)
    source: OfflineDataset | None = None

    def to_dataset(self) -> OfflineDataset:
        """The buffer as a dataset-format object (same task, quality and seed as its source)."""
        src = self.source
        if src is None:
            raise ValueError("buffer has no source dataset")
        return OfflineDataset(src.task, src.quality, self.trajectories, src.seed)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def nbytes(self, state_dim: int = 4, action_dim: int = 2) -> int:
        # (s, a, s', r, done) per transition, float32
        return self.n_transitions * (2 * state_dim + action_dim + 2) * 4


def build_replay_buffer(dataset: OfflineDataset, capacity: int, rng: Rng, task_index: int = 0) -> ReplayBuffer:
    """Whole trajectories drawn without replacement until the next would overflow ``capacity``."""
    horizon = min(len(t) for t in dataset.trajectories)
    if capacity < horizon:
        raise ConfigError(f"buffer capacity {capacity} cannot hold one trajectory of length {horizon}")
    chosen, total = [], 0
    for i in rng.permutation(len(dataset.trajectories)):
        n = len(dataset.trajectories[i])
        if total + n > capacity:
            break
        chosen.append(int(i))
        total += n
    return ReplayBuffer(task_index, [dataset.trajectories[i] for i in chosen], capacity, chosen, dataset)


class WindowSampler:
    """Uniform sampling over (trajectory, window-end) pairs of a dataset or buffer."""

    def __init__(self, trajectories: list[Trajectory], context_len: int):
        if not trajectories:
            raise ConfigError("cannot sample windows from an empty source")
        self.trajectories = trajectories
        self.K = context_len
        lengths = np.array([len(t) for t in trajectories])
        self.offsets = np.concatenate([[0], np.cumsum(lengths)])
        self.rtg = [t.returns_to_go for t in trajectories]

    def pair(self, flat: int) -> tuple[int, int]:
        i = int(np.searchsorted(self.offsets, flat, side="right") - 1)
        return i, int(flat - self.offsets[i])

    def sample_pairs(self, batch_size: int, rng: Rng) -> list[tuple[int, int]]:
        return [self.pair(int(f)) for f in rng.integers(0, self.offsets[-1], batch_size)]

    def windows(self, pairs: list[tuple[int, int]]) -> WindowBatch:
        K, B = self.K, len(pairs)
        sd = self.trajectories[0].states.shape[1]
        ad = self.trajectories[0].actions.shape[1]
        rtg = np.zeros((B, K))
        states = np.zeros((B, K, sd))
        actions = np.zeros((B, K, ad))
        ts = np.zeros((B, K), dtype=np.int64)
        valid = np.zeros(B, dtype=np.int64)
        for b, (i, end) in enumerate(pairs):
            traj = self.trajectories[i]
            start = max(0, end - K + 1)
            n = end - start + 1
            rtg[b, :n] = self.rtg[i][start : end + 1]
            states[b, :n] = traj.states[start : end + 1]
            actions[b, :n] = traj.actions[start : end + 1]
            ts[b, :n] = np.arange(start, end + 1)
            valid[b] = n
        return WindowBatch(
            torch.as_tensor(rtg, dtype=torch.float32),
            torch.as_tensor(states, dtype=torch.float32),
            torch.as_tensor(actions, dtype=torch.float32),
            torch.as_tensor(ts),
            torch.as_tensor(valid),
        )

    def sample(self, batch_size: int, rng: Rng) -> WindowBatch:
        return self.windows(self.sample_pairs(batch_size, rng))


def sample_windows(source: OfflineDataset | ReplayBuffer, batch_size: int, context_len: int, rng: Rng) -> WindowBatch:
    return WindowSampler(source.trajectories, context_len).sample(batch_size, rng)
