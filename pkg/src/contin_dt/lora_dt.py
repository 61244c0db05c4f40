"""LoRA Decision Transformer.

Task 0 trains every weight. Each later task trains a standalone teacher,
interpolates all non-MLP weights towards it, then trains only rank-r adapters
on the (frozen) block MLPs. One adapter set is stored per task and swapped in
to evaluate that task.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import torch

from . import checkpoint
from .dt_core import ConfigError, DTConfig, DTModel, make_optimizer, train_step_single
from .learner import ContinualLearner, InvariantViolation, StepCallback, TrainConfig, named_tensors_of
from .numerics import Adam, Rng
from .tasks import OfflineDataset, WindowSampler

ADAPTER_NAMES = ("A0", "B0", "A1", "B1")
ADAPTER_INIT_STD = 0.02


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 4
    merge_weight: float = 0.2
    teacher_fraction: float = 0.5

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if not 0.0 <= self.merge_weight <= 1.0:
            raise ConfigError("merge_weight must lie in [0, 1]")
        if not 0.0 < self.teacher_fraction < 1.0:
            raise ConfigError("teacher_fraction must lie in (0, 1)")


def memory_footprint(cfg: DTConfig, rank: int) -> int:
    """Stored numbers per task: k blocks x (A0, B0, A1, B1)."""
    return 2 * cfg.n_layers * rank * (cfg.embed_dim + cfg.mlp_dim)


def is_mlp_base(name: str) -> bool:
    return ".mlp." in name and not name.rsplit(".", 1)[-1].startswith("lora_")


def is_adapter(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("lora_")


def make_lora_model(cfg: DTConfig, rank: int, rng: Rng) -> DTModel:
    if not 1 <= rank <= min(cfg.embed_dim, cfg.mlp_dim):
        raise ConfigError(f"rank must lie in [1, {min(cfg.embed_dim, cfg.mlp_dim)}]")
    model = DTModel(cfg, rng)
    for block in model.blocks:
        block.mlp.attach_adapters(rank)
    return model


def init_adapters(model: DTModel, rng: Rng) -> None:
    """A ~ N(0, 0.02^2), B = 0: the update B A starts at exactly zero."""
    with torch.no_grad():
        for i, block in enumerate(model.blocks):
            mlp = block.mlp
            r = rng.child(f"block{i}")
            mlp.lora_a0.copy_(torch.from_numpy(r.normal(tuple(mlp.lora_a0.shape), ADAPTER_INIT_STD)))
            mlp.lora_a1.copy_(torch.from_numpy(r.normal(tuple(mlp.lora_a1.shape), ADAPTER_INIT_STD)))
            mlp.lora_b0.zero_()
            mlp.lora_b1.zero_()


def merge_weights(pi: DTModel, teacher: DTModel, weight: float) -> None:
    """theta <- (1 - w) theta + w theta_teacher for every non-MLP, non-adapter tensor."""
    src = dict(teacher.named_parameters())
    with torch.no_grad():
        for name, p in pi.named_parameters():
            if is_mlp_base(name) or is_adapter(name):
                continue
            if name not in src or src[name].shape != p.shape:
                raise ConfigError(f"teacher has no matching tensor for {name}")
            if weight == 0.0:
                continue
            if weight == 1.0:
                p.copy_(src[name])
            else:
                p.copy_((1.0 - weight) * p + weight * src[name])


def lora_mlp_forward(x: torch.Tensor, mlp) -> torch.Tensor:
    return mlp(x)


def base_fingerprint(model: DTModel) -> str:
    h = hashlib.blake2b(digest_size=8)
    for name, p in model.named_parameters():
        if is_adapter(name):
            continue
        h.update(name.encode())
        h.update(p.detach().to(torch.float32).contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class AdapterSet:
    task_index: int
    blocks: list[list[torch.Tensor]]  # per block [A0, B0, A1, B1]
    fingerprint: str = ""

    @property
    def numel(self) -> int:
        return sum(t.numel() for quad in self.blocks for t in quad)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {f"block{i}.{n}": t for i, quad in enumerate(self.blocks) for n, t in zip(ADAPTER_NAMES, quad)}

    @classmethod
    def from_named(cls, task_index: int, tensors: dict[str, torch.Tensor], fingerprint: str = "") -> "AdapterSet":
        k = len({name.split(".")[0] for name in tensors})
        return cls(task_index, [[tensors[f"block{i}.{n}"] for n in ADAPTER_NAMES] for i in range(k)], fingerprint)


def extract_adapters(model: DTModel, task_index: int) -> AdapterSet:
    quads = [[t.detach().clone() for t in block.mlp.adapter_tensors()] for block in model.blocks]
    return AdapterSet(task_index, quads, base_fingerprint(model))


@dataclass
class AdapterStore:
    sets: dict[int, AdapterSet] = field(default_factory=dict)

    def save(self, adapters: AdapterSet) -> None:
        self.sets[adapters.task_index] = adapters

    def __contains__(self, i: int) -> bool:
        return i in self.sets

    def __getitem__(self, i: int) -> AdapterSet:
        try:
            return self.sets[i]
        except KeyError:
            raise LookupError(f"no adapter set stored for task {i}") from None


def swap_adapters(model: DTModel, store: AdapterStore, i: int, check_fingerprint: bool = False) -> None:
    adapters = store[i]
    if len(adapters.blocks) != len(model.blocks):
        raise ConfigError("adapter set and model disagree on block count")
    if check_fingerprint and adapters.fingerprint and adapters.fingerprint != base_fingerprint(model):
        warnings.warn(f"adapter set for task {i} was saved against a different base model", stacklevel=2)
    with torch.no_grad():
        for block, quad in zip(model.blocks, adapters.blocks):
            for dst, src in zip(block.mlp.adapter_tensors(), quad):
                dst.copy_(src)


def set_trainable(model: DTModel, adapters_only: bool, freeze_mlp_base: bool) -> None:
    """Switch trainability; stale gradients from the previous phase are dropped."""
    for name, p in model.named_parameters():
        p.grad = None
        if adapters_only:
            p.requires_grad_(is_adapter(name))
        else:
            p.requires_grad_(not is_adapter(name) and not (freeze_mlp_base and is_mlp_base(name)))


class LoRADT(ContinualLearner):
    name = "loradt"

    def __init__(self, cfg: DTConfig, train_cfg: TrainConfig, rng: Rng, lora_cfg: LoRAConfig | None = None):
        super().__init__(cfg, train_cfg, rng)
        self.lora_cfg = lora_cfg or LoRAConfig()
        self.pi = make_lora_model(cfg, self.lora_cfg.rank, rng.child("init").child("model"))
        self.store = AdapterStore()
        self._frozen_bases: list[torch.Tensor] | None = None

    def policy(self, j: int):
        # tasks without a stored set (the one in training, or future ones) use the live adapters
        if j not in self.store:
            return self.pi
        model = self.pi.clone()
        swap_adapters(model, self.store, j)
        return model

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in named_tensors_of(self.pi).items() if not is_adapter(k)}

    def train_task(self, n: int, dataset: OfflineDataset, callback: StepCallback | None = None) -> None:
        finetune_task_lora(self, n, dataset, callback)
        self.tasks_trained += 1

    def _bases(self) -> list[torch.Tensor]:
        return [t for b in self.pi.blocks for t in b.mlp.base_tensors()]

    def check_freeze(self, where: str) -> None:
        if self._frozen_bases is not None and not all(torch.equal(a, b) for a, b in zip(self._bases(), self._frozen_bases)):
            raise InvariantViolation(f"{where}: a frozen MLP base changed")


def finetune_task_lora(learner: LoRADT, n: int, dataset: OfflineDataset, callback: StepCallback | None = None):
    """Train task ``n``. Returns the stored adapter set and the teacher (None for task 0)."""
    learner._check_task_order(n)
    cfg, tc, lc = learner.cfg, learner.train_cfg, learner.lora_cfg
    pi, rng = learner.pi, learner.rng
    data = WindowSampler(dataset.trajectories, cfg.context_len)
    checks = tc.invariant_checks
    teacher = None
    init_adapters(pi, rng.child("adapters").child(f"task{n}"))

    if n == 0:
        set_trainable(pi, adapters_only=False, freeze_mlp_base=False)
        opt = make_optimizer(pi.parameters(), tc.learning_rate, tc.weight_decay)
        data_rng = rng.child("data").child("task0")
        for step in range(tc.steps_per_task):
            train_step_single(pi, data.sample(tc.batch_size, data_rng), opt)
            if callback is not None:
                callback(step)
        learner._frozen_bases = [t.detach().clone() for t in learner._bases()]
    else:
        teacher_steps = int(round(lc.teacher_fraction * tc.steps_per_task))
        # teachers share the student's starting point so interpolation stays meaningful
        teacher = DTModel(cfg, rng.child("init").child("model"))
        teacher_opt = make_optimizer(teacher.parameters(), tc.learning_rate, tc.weight_decay)
        teacher_rng = rng.child("data").child(f"teacher{n}")
        for step in range(teacher_steps):
            train_step_single(teacher, data.sample(tc.batch_size, teacher_rng), teacher_opt)
            if callback is not None:
                callback(step)
        merge_weights(pi, teacher, lc.merge_weight)
        if checks:
            learner.check_freeze(f"task {n} merge")
        set_trainable(pi, adapters_only=True, freeze_mlp_base=True)
        opt = make_optimizer(pi.parameters(), tc.learning_rate, tc.weight_decay)
        data_rng = rng.child("data").child(f"adapter{n}")
        if checks:
            fixed = {k: p.detach().clone() for k, p in pi.named_parameters() if not is_adapter(k)}
        for step in range(teacher_steps, tc.steps_per_task):
            train_step_single(pi, data.sample(tc.batch_size, data_rng), opt)
            if checks:
                for k, p in pi.named_parameters():
                    if is_adapter(k):
                        continue
                    if p.grad is not None and bool(p.grad.any()):
                        raise InvariantViolation(f"task {n} step {step}: gradient reached {k}")
                    if not torch.equal(p, fixed[k]):
                        raise InvariantViolation(f"task {n} step {step}: non-adapter tensor {k} changed")
                learner.invariant_checks_passed += 1
            if callback is not None:
                callback(step)
        learner.teachers[n] = teacher

    set_trainable(pi, adapters_only=False, freeze_mlp_base=True)
    adapters = extract_adapters(pi, n)
    learner.store.save(adapters)
    return adapters, teacher


def save_adapter_set(path, adapters: AdapterSet, cfg: DTConfig) -> None:
    rank = adapters.blocks[0][0].shape[0]
    meta = {
        "kind": "adapter_set",
        "task_index": adapters.task_index,
        "k": len(adapters.blocks),
        "r": rank,
        "h": cfg.embed_dim,
        "d": cfg.mlp_dim,
        "fingerprint": adapters.fingerprint,
    }
    checkpoint.save(path, adapters.named_tensors(), meta)


def load_adapter_set(path, model: DTModel | None = None) -> AdapterSet:
    """Read an adapter file; warns when ``model``'s base differs from the one it was saved against."""
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "adapter_set":
        raise ValueError(f"{path} is not an adapter set")
    adapters = AdapterSet.from_named(meta["task_index"], tensors, meta.get("fingerprint", ""))
    if model is not None and adapters.fingerprint != base_fingerprint(model):
        warnings.warn(f"{path}: base-model fingerprint differs from the loaded model", stacklevel=2)
    return adapters
