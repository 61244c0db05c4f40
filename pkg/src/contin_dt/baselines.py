"""Sequential fine-tuning baselines: vanilla DT, DT+EWC and DT+SI."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .dt_core import DTConfig, DTModel, make_optimizer, prediction_loss, train_step_single
from .learner import ContinualLearner, StepCallback, TrainConfig, named_tensors_of
from .numerics import Rng
from .tasks import OfflineDataset, WindowSampler


@dataclass
class ImportanceMap:
    importance: dict[str, torch.Tensor]
    anchor: dict[str, torch.Tensor]

    def __post_init__(self):
        for k, v in self.importance.items():
            if v.shape != self.anchor[k].shape or bool((v < 0).any()):
                raise ValueError(f"importance for {k} must be nonnegative and match its anchor")


def quadratic_penalty(model: DTModel, maps: list[ImportanceMap], strength: float) -> torch.Tensor:
    total = torch.zeros(())
    params = dict(model.named_parameters())
    for m in maps:
        for name, f in m.importance.items():
            d = params[name] - m.anchor[name]
            total = total + (f * d * d).sum()
    return strength * total


def ewc_penalty(model: DTModel, maps: list[ImportanceMap], strength: float) -> torch.Tensor:
    """strength * sum over tasks and parameters of F (theta - theta*)^2."""
    return quadratic_penalty(model, maps, strength)


def estimate_fisher(model: DTModel, sampler: WindowSampler, n_batches: int, batch_size: int, rng: Rng) -> dict[str, torch.Tensor]:
    """Diagonal Fisher proxy: mean squared gradient of the prediction loss."""
    fisher = {k: torch.zeros_like(p) for k, p in model.named_parameters()}
    for _ in range(n_batches):
        model.zero_grad(set_to_none=True)
        batch = sampler.sample(batch_size, rng)
        prediction_loss(model(batch), batch, model.cfg.loss_positions).backward()
        for k, p in model.named_parameters():
            if p.grad is not None:
                fisher[k] += p.grad.detach() ** 2 / n_batches
    model.zero_grad(set_to_none=True)
    return fisher


class SITracker:
    """Path-integral importance: omega += -g * dtheta each step, folded into Omega at task end."""

    def __init__(self, model: DTModel, xi: float = 1e-3):
        self.xi = xi
        self.start = self._params(model)
        self.omega = {k: torch.zeros_like(v) for k, v in self.start.items()}
        self.big_omega = {k: torch.zeros_like(v) for k, v in self.start.items()}

    @staticmethod
    def _params(model: DTModel) -> dict[str, torch.Tensor]:
        return {k: p.detach().clone() for k, p in model.named_parameters()}

    def update(self, before: dict[str, torch.Tensor], after: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None]) -> None:
        for k, g in grads.items():
            if g is not None:
                self.omega[k] += -g * (after[k] - before[k])

    def consolidate(self, model: DTModel) -> ImportanceMap:
        now = self._params(model)
        for k in self.big_omega:
            delta = now[k] - self.start[k]
            # negative path contributions are clipped so importances stay nonnegative
            self.big_omega[k] += torch.clamp_min(self.omega[k], 0.0) / (delta * delta + self.xi)
            self.omega[k].zero_()
        self.start = now
        return ImportanceMap({k: v.clone() for k, v in self.big_omega.items()}, now)


def si_penalty(model: DTModel, importance: ImportanceMap | None, strength: float) -> torch.Tensor:
    return quadratic_penalty(model, [importance] if importance else [], strength)


class VanillaDT(ContinualLearner):
    name = "vanilla"
    tracks_path = False

    def __init__(self, cfg: DTConfig, train_cfg: TrainConfig, rng: Rng):
        super().__init__(cfg, train_cfg, rng)
        self.model = DTModel(cfg, rng.child("init").child("model"))
        self.opt = make_optimizer(self.model.parameters(), train_cfg.learning_rate, train_cfg.weight_decay)

    def policy(self, j: int):
        return self.model

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return named_tensors_of(self.model)

    def penalty(self):
        return None

    def after_step(self, before, grads) -> None:
        pass

    def end_task(self, n: int, sampler: WindowSampler) -> None:
        pass

    def train_task(self, n: int, dataset: OfflineDataset, callback: StepCallback | None = None) -> None:
        self._check_task_order(n)
        tc = self.train_cfg
        sampler = WindowSampler(dataset.trajectories, self.cfg.context_len)
        data_rng = self.rng.child("data").child(f"task{n}")
        for step in range(tc.steps_per_task):
            batch = sampler.sample(tc.batch_size, data_rng)
            before = SITracker._params(self.model) if self.tracks_path else None
            train_step_single(self.model, batch, self.opt, self.penalty())
            if self.tracks_path:
                self.after_step(before, {k: p.grad for k, p in self.model.named_parameters()})
            if callback is not None:
                callback(step)
        self.end_task(n, sampler)
        self.tasks_trained += 1


class EWCDT(VanillaDT):
    name = "ewc"

    def __init__(self, cfg: DTConfig, train_cfg: TrainConfig, rng: Rng, strength: float = 100.0, fisher_batches: int = 50):
        super().__init__(cfg, train_cfg, rng)
        self.strength = strength
        self.fisher_batches = fisher_batches
        self.maps: list[ImportanceMap] = []

    def penalty(self):
        if self.strength == 0 or not self.maps:
            return None
        return lambda: ewc_penalty(self.model, self.maps, self.strength)

    def end_task(self, n: int, sampler: WindowSampler) -> None:
        fisher = estimate_fisher(self.model, sampler, self.fisher_batches, self.train_cfg.batch_size, self.rng.child("fisher").child(f"task{n}"))
        anchor = {k: p.detach().clone() for k, p in self.model.named_parameters()}
        self.maps.append(ImportanceMap(fisher, anchor))


class SIDT(VanillaDT):
    name = "si"
    tracks_path = True

    def __init__(self, cfg: DTConfig, train_cfg: TrainConfig, rng: Rng, strength: float = 1.0, xi: float = 1e-3):
        super().__init__(cfg, train_cfg, rng)
        self.strength = strength
        self.tracker = SITracker(self.model, xi)
        self.importance: ImportanceMap | None = None

    def penalty(self):
        if self.strength == 0 or self.importance is None:
            return None
        return lambda: si_penalty(self.model, self.importance, self.strength)

    def after_step(self, before, grads) -> None:
        self.tracker.update(before, SITracker._params(self.model), grads)

    def end_task(self, n: int, sampler: WindowSampler) -> None:
        self.importance = self.tracker.consolidate(self.model)
