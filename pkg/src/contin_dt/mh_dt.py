"""Multi-head Decision Transformer.

A shared transformer trunk plus one head per task (front: embeddings and
embedding layernorm; back: action linear). Each task trains a standalone
teacher whose head is copied into the student every step; the student is
optimized on action prediction, distillation towards the teacher (outputs and
hidden states) and rehearsal of the previous tasks whose hidden states are
least similar to the teacher's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .dt_core import Back, ConfigError, DTConfig, DTModel, ForwardOutput, Front, WindowBatch, build_trunk, make_optimizer, prediction_loss, run_dt, train_step_single
from .learner import AssembledPolicy, ContinualLearner, InvariantViolation, StepCallback, TrainConfig, named_tensors_of
from .numerics import Adam, Rng
from .tasks import OfflineDataset, ReplayBuffer, WindowSampler, build_replay_buffer


@dataclass(frozen=True)
class MHDTConfig:
    k_select: int = 2
    select_period: int = 10
    lambda_distill: float = 0.5
    lambda_rehearsal: float = 1.0
    buffer_capacity: int = 1000
    # False rehearses every previous task instead of the k least similar
    selective: bool = True

    def __post_init__(self):
        if self.k_select < 0 or self.select_period < 1:
            raise ConfigError("k_select must be >= 0 and select_period >= 1")
        if self.lambda_distill < 0 or self.lambda_rehearsal < 0:
            raise ConfigError("loss weights must be nonnegative")


class Head(nn.Module):
    def __init__(self, cfg: DTConfig, rng: Rng):
        super().__init__()
        self.front = Front(cfg, rng.child("front"))
        self.back = Back(cfg, rng.child("back"))


class MultiHeadDT(nn.Module):
    def __init__(self, cfg: DTConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        self.blocks = build_trunk(cfg, rng.child("trunk"))
        self.heads = nn.ModuleList()

    def add_head(self, rng: Rng) -> int:
        self.heads.append(Head(self.cfg, rng))
        return len(self.heads) - 1

    def forward(self, batch: WindowBatch, head: int) -> ForwardOutput:
        h = self.heads[head]
        return run_dt(h.front, self.blocks, h.back, batch)

    def view(self, head: int) -> AssembledPolicy:
        h = self.heads[head]
        return AssembledPolicy(self.cfg, h.front, self.blocks, h.back)

    def assemble(self, head: int) -> DTModel:
        """Standalone single-head model holding copies of (trunk, head)."""
        model = DTModel(self.cfg, Rng(0))
        model.front.load_state_dict(self.heads[head].front.state_dict())
        model.blocks.load_state_dict(self.blocks.state_dict())
        model.back.load_state_dict(self.heads[head].back.state_dict())
        return model

    def trunk_parameters(self) -> list[nn.Parameter]:
        return list(self.blocks.parameters())


def teacher_step(teacher: DTModel, batch: WindowBatch, opt: Adam) -> float:
    return train_step_single(teacher, batch, opt)


def copy_head(teacher: DTModel, pi: MultiHeadDT, n: int) -> None:
    if not 0 <= n < len(pi.heads):
        raise IndexError(f"head {n} does not exist")
    with torch.no_grad():
        for src, dst in ((teacher.front, pi.heads[n].front), (teacher.back, pi.heads[n].back)):
            for p_dst, p_src in zip(dst.parameters(), src.parameters()):
                p_dst.copy_(p_src)


def distillation_from_outputs(student: ForwardOutput, target: ForwardOutput, mask: torch.Tensor) -> torch.Tensor:
    if student.hidden.shape[-1] != target.hidden.shape[-1]:
        raise ConfigError("student and teacher hidden sizes differ")
    return nx.masked_mse(student.pred_actions, target.pred_actions.detach(), mask) + nx.masked_mse(student.hidden, target.hidden.detach(), mask)


def loss_distillation(pi: MultiHeadDT, n: int, teacher: DTModel, batch: WindowBatch) -> torch.Tensor:
    """Squared gap to the teacher on actions plus hidden states; teacher gets no gradient."""
    with torch.no_grad():
        target = teacher(batch)
    return distillation_from_outputs(pi(batch, n), target, batch.mask)


@torch.no_grad()
def similarity_scores(pi: MultiHeadDT, teacher: DTModel, batch: WindowBatch, candidates) -> list[float]:
    """C_j: mean over batch items and valid state positions of cos(H_pi_j, H_teacher)."""
    mask = batch.mask
    ref = teacher(batch).hidden[mask]
    return [float(nx.cosine_similarity(pi(batch, j).hidden[mask], ref).mean()) for j in candidates]


def select_from_scores(scores, candidates, k_select: int) -> list[int]:
    order = np.argsort(np.asarray(scores, dtype=np.float64), kind="stable")
    return [candidates[i] for i in order[:k_select]]


def select_tasks(pi: MultiHeadDT, teacher: DTModel, batch: WindowBatch, n: int, k_select: int) -> list[int]:
    """Indices of the ``k_select`` previous tasks with the lowest similarity; ties go to the lower index."""
    candidates = list(range(n))
    if not candidates or k_select == 0:
        return []
    return select_from_scores(similarity_scores(pi, teacher, batch, candidates), candidates, k_select)


def loss_rehearsal(pi: MultiHeadDT, batches: dict[int, WindowBatch]) -> torch.Tensor:
    """Mean over selected tasks of the action-cloning loss with each task's own head."""
    if not batches:
        return torch.zeros(())
    losses = [prediction_loss(pi(b, s), b) for s, b in batches.items()]
    return torch.stack(losses).mean()


def total_loss(predict, distill, rehearsal, lambda_distill: float, lambda_rehearsal: float):
    return predict + lambda_distill * distill + lambda_rehearsal * rehearsal


class MHDT(ContinualLearner):
    name = "mhdt"

    def __init__(self, cfg: DTConfig, train_cfg: TrainConfig, rng: Rng, mh_cfg: MHDTConfig | None = None):
        super().__init__(cfg, train_cfg, rng)
        self.mh_cfg = mh_cfg or MHDTConfig()
        self.pi = MultiHeadDT(cfg, rng.child("init").child("student"))
        self.opt = Adam([], lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
        self.opt.add(self.pi.trunk_parameters())
        self.buffers: dict[int, ReplayBuffer] = {}
        self.selection_history: list[tuple[int, int, list[int]]] = []

    def policy(self, j: int):
        if not self.pi.heads:
            raise IndexError("no head has been trained yet")
        return self.pi.view(min(j, len(self.pi.heads) - 1))

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return named_tensors_of(self.pi)

    def train_task(self, n: int, dataset: OfflineDataset, callback: StepCallback | None = None) -> None:
        train_task_mhdt(self, n, dataset, callback)
        self.tasks_trained += 1


def _snapshot(modules) -> list[torch.Tensor]:
    return [p.detach().clone() for m in modules for p in m.parameters()]


def _unchanged(modules, snap) -> bool:
    return all(torch.equal(p, q) for p, q in zip((p for m in modules for p in m.parameters()), snap))


def train_task_mhdt(learner: MHDT, n: int, dataset: OfflineDataset, callback: StepCallback | None = None):
    """Train task ``n``; leaves the trained student, a new replay buffer and the teacher on ``learner``."""
    learner._check_task_order(n)
    cfg, tc, mc = learner.cfg, learner.train_cfg, learner.mh_cfg
    pi = learner.pi
    rng = learner.rng
    missing = [j for j in range(n) if j not in learner.buffers]
    if missing:
        raise ConfigError(f"replay buffers missing for tasks {missing}")

    head = pi.add_head(rng.child("init").child(f"head{n}"))
    learner.opt.add(pi.heads[head].parameters())
    teacher = DTModel(cfg, rng.child("init").child(f"teacher{n}"))
    teacher_opt = make_optimizer(teacher.parameters(), tc.learning_rate, tc.weight_decay)

    data = WindowSampler(dataset.trajectories, cfg.context_len)
    teacher_rng = rng.child("data").child(f"teacher{n}")
    student_rng = rng.child("data").child(f"student{n}")
    select_rng = rng.child("selection").child(f"task{n}")
    rehearse_rng = rng.child("data").child(f"rehearsal{n}")
    samplers = {j: WindowSampler(learner.buffers[j].trajectories, cfg.context_len) for j in range(n)}
    use_rehearsal = mc.lambda_rehearsal > 0
    selected: list[int] = []

    for step in range(tc.steps_per_task):
        teacher_step(teacher, data.sample(tc.batch_size, teacher_rng), teacher_opt)
        copy_head(teacher, pi, n)
        if step % mc.select_period == 0:
            if mc.selective:
                sel_batch = data.sample(tc.batch_size, select_rng)
                selected = select_tasks(pi, teacher, sel_batch, n, mc.k_select)
            else:
                selected = list(range(n))
            learner.selection_history.append((n, step, list(selected)))

        batch = data.sample(tc.batch_size, student_rng)
        learner.opt.zero_grad()
        out = pi(batch, n)
        l_predict = prediction_loss(out, batch, cfg.loss_positions)
        if mc.lambda_distill > 0:
            with torch.no_grad():
                target = teacher(batch)
            l_distill = distillation_from_outputs(out, target, batch.mask)
        else:
            l_distill = torch.zeros(())
        if use_rehearsal and selected:
            l_rehearsal = loss_rehearsal(pi, {j: samplers[j].sample(tc.batch_size, rehearse_rng) for j in selected})
        else:
            l_rehearsal = torch.zeros(())
        loss = total_loss(l_predict, l_distill, l_rehearsal, mc.lambda_distill, mc.lambda_rehearsal)

        if tc.invariant_checks:
            trained = {n} | (set(selected) if use_rehearsal else set())
            idle = [pi.heads[j] for j in range(len(pi.heads)) if j not in trained]
            snap = _snapshot(idle)
        loss.backward()
        learner.opt.step()
        if tc.invariant_checks:
            if not _unchanged(idle, snap):
                raise InvariantViolation(f"task {n} step {step}: a non-selected head changed")
            learner.invariant_checks_passed += 1
        if callback is not None:
            callback(step)

    learner.buffers[n] = build_replay_buffer(dataset, mc.buffer_capacity, rng.child("buffer").child(f"task{n}"), task_index=n)
    learner.teachers[n] = teacher
    return pi, learner.buffers[n], teacher
