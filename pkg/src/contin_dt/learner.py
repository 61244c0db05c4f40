"""Common surface for every continual learner driven by the harness."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .dt_core import DTConfig, DTModel, ForwardOutput, WindowBatch, run_dt
from .numerics import Rng
from .tasks import OfflineDataset

StepCallback = Callable[[int], None]


@dataclass(frozen=True)
class TrainConfig:
    steps_per_task: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    invariant_checks: bool = False


class InvariantViolation(AssertionError):
    pass


class ContinualLearner:
    """A method that learns tasks 0..N-1 in order and exposes one policy per task."""

    name = "base"

    def __init__(self, cfg: DTConfig, train_cfg: TrainConfig, rng: Rng):
        self.cfg = cfg
        self.train_cfg = train_cfg
        self.rng = rng
        self.tasks_trained = 0
        self.invariant_checks_passed = 0
        # standalone per-task policies, kept for the distillation-gap metric
        self.teachers: dict[int, DTModel] = {}

    def train_task(self, n: int, dataset: OfflineDataset, callback: StepCallback | None = None) -> None:
        raise NotImplementedError

    def policy(self, j: int) -> Callable[[WindowBatch], ForwardOutput]:
        """Policy used to evaluate task ``j``; future tasks fall back to the latest one."""
        raise NotImplementedError

    def named_tensors(self) -> dict[str, torch.Tensor]:
        raise NotImplementedError

    def _check_task_order(self, n: int) -> None:
        if n != self.tasks_trained:
            raise ValueError(f"tasks must be trained in order: expected {self.tasks_trained}, got {n}")


class AssembledPolicy:
    """Callable view over live (front, trunk, back) modules; no copies are made."""

    def __init__(self, cfg: DTConfig, front, blocks, back):
        self.cfg = cfg
        self.front, self.blocks, self.back = front, blocks, back

    def __call__(self, batch: WindowBatch) -> ForwardOutput:
        return run_dt(self.front, self.blocks, self.back, batch)


def named_tensors_of(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v.detach().clone() for k, v in module.state_dict().items()}
