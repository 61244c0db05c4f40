"""Experiment orchestration: dataset generation, training runs and run directories."""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .baselines import EWCDT, SIDT, VanillaDT
from .config import RunConfig
from .dt_core import ConfigError, DTModel, rollout
from .learner import ContinualLearner
from .lora_dt import LoRADT, memory_footprint, save_adapter_set
from .metrics import PerformanceMatrix, all_metrics, eval_rng, evaluate_all
from .mh_dt import MHDT
from .numerics import Rng
from .tasks import QUALITIES, OfflineDataset, ReplayBuffer, generate_dataset

log = logging.getLogger(__name__)

FLOAT_BYTES = 4


def dataset_path(cfg: RunConfig, n: int) -> Path:
    return Path(cfg.out_dir) / "data" / f"{cfg.family}-h{cfg.horizon}-task{n}-{cfg.quality}-n{cfg.n_traj}-s{cfg.data_seed}.jsonl"


def dataset_seed(cfg: RunConfig, n: int) -> int:
    return cfg.data_seed * 1000 + n


def generate(cfg: RunConfig) -> list[Path]:
    paths = []
    for n, task in enumerate(cfg.tasks()):
        ds = generate_dataset(task, cfg.quality, cfg.n_traj, dataset_seed(cfg, n))
        check_expert_superiority(task, cfg.n_traj, dataset_seed(cfg, n), ds)
        path = dataset_path(cfg, n)
        path.parent.mkdir(parents=True, exist_ok=True)
        ds.save(path)
        paths.append(path)
        log.info("wrote %s (%d transitions)", path, ds.n_transitions)
    return paths


def check_expert_superiority(task, n_traj: int, seed: int, made: OfflineDataset | None = None) -> None:
    """Regenerate the other quality under the same seed and require expert > middle in mean return."""
    by_quality = {made.quality: made} if made is not None else {}
    for q in QUALITIES:
        if q not in by_quality:
            by_quality[q] = generate_dataset(task, q, n_traj, seed)
    if not by_quality["expert"].mean_return > by_quality["middle"].mean_return:
        raise ConfigError(f"expert data does not beat middle data on {task}")


def load_datasets(cfg: RunConfig) -> list[OfflineDataset]:
    out = []
    for n in range(cfg.n_tasks):
        path = dataset_path(cfg, n)
        if not path.exists():
            raise FileNotFoundError(f"dataset {path} missing; run `generate` with the same config first")
        out.append(OfflineDataset.load(path))
    return out


def make_learner(cfg: RunConfig, seed: int) -> ContinualLearner:
    dt_cfg, tc, rng = cfg.dt_config(), cfg.train_config(), Rng(seed)
    if cfg.method == "mhdt":
        return MHDT(dt_cfg, tc, rng, cfg.mhdt_config())
    if cfg.method == "loradt":
        return LoRADT(dt_cfg, tc, rng, cfg.lora_config())
    if cfg.method == "ewc":
        return EWCDT(dt_cfg, tc, rng, cfg.ewc_lambda, cfg.fisher_batches)
    if cfg.method == "si":
        return SIDT(dt_cfg, tc, rng, cfg.si_c, cfg.si_xi)
    return VanillaDT(dt_cfg, tc, rng)


def buffer_bytes_per_task(cfg: RunConfig) -> int:
    """Bytes of a full replay buffer stored as (s, a, s', r, done) float32 records."""
    spec = cfg.tasks()[0]
    return cfg.buffer_capacity * (2 * spec.state_dim + spec.action_dim + 2) * FLOAT_BYTES


def adapter_bytes_per_task(cfg: RunConfig) -> int:
    return memory_footprint(cfg.dt_config(), cfg.lora_rank) * FLOAT_BYTES


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    matrix: PerformanceMatrix
    curve: list[tuple[int, int, float]] = field(default_factory=list)
    learner: ContinualLearner | None = None
    failed: str | None = None

    @property
    def metrics(self) -> dict:
        return {"method": self.config.method, "seed": self.seed, **all_metrics(self.matrix)}

    def memory(self) -> dict:
        m = self.config.method
        return {
            "buffer_bytes_per_task": buffer_bytes_per_task(self.config) if m == "mhdt" else 0,
            "adapter_bytes_per_task": adapter_bytes_per_task(self.config) if m == "loradt" else 0,
            "adapter_floats_per_task": memory_footprint(self.config.dt_config(), self.config.lora_rank) if m == "loradt" else 0,
        }

    def report(self) -> dict:
        return {
            "status": "failed" if self.failed else "complete",
            "error": self.failed,
            "method": self.config.method,
            "seed": self.seed,
            "config": self.config.replace(seeds=(self.seed,)).as_dict(),
            "curve": [{"step": s, "task": t, "return": r} for s, t, r in self.curve],
            "matrix": {
                "a": [[None if not np.isfinite(x) else float(x) for x in row] for row in self.matrix.a],
                "b_bar": [None if not np.isfinite(x) else float(x) for x in self.matrix.b_bar],
                "teacher": [None if not np.isfinite(x) else float(x) for x in self.matrix.teacher],
            },
            "metrics": self.metrics,
            "memory": self.memory(),
        }


def train_run(cfg: RunConfig, seed: int, datasets: list[OfflineDataset] | None = None, curves: bool = True) -> RunResult:
    """Train ``cfg.method`` over the task sequence and fill the performance matrix.

    Numeric failures are caught and returned as a partial, failed result.
    """
    torch.set_num_threads(1)
    datasets = datasets if datasets is not None else load_datasets(cfg)
    tasks = [d.task for d in datasets]
    targets = [d.max_return for d in datasets]
    root = Rng(seed)
    N = cfg.n_tasks
    matrix = PerformanceMatrix(N)
    result = RunResult(cfg, seed, matrix)

    baseline = DTModel(cfg.dt_config(), root.child("init").child("model"))
    matrix.b_bar[:] = evaluate_all(lambda j: baseline, tasks, targets, root, cfg.eval_episodes)

    learner = make_learner(cfg, seed)
    result.learner = learner
    global_step = 0

    def on_step(step: int) -> None:
        nonlocal global_step
        global_step += 1
        if curves and global_step % cfg.eval_interval == 0:
            row = evaluate_all(learner.policy, tasks, targets, root, cfg.eval_episodes)
            result.curve.extend((global_step, j, float(r)) for j, r in enumerate(row))

    try:
        for n, ds in enumerate(datasets):
            learner.train_task(n, ds, on_step)
            matrix.set_row(n, evaluate_all(learner.policy, tasks, targets, root, cfg.eval_episodes))
            teacher = learner.teachers.get(n)
            if teacher is not None:
                matrix.teacher[n] = rollout(teacher, tasks[n], targets[n], cfg.eval_episodes, eval_rng(root, n))
            log.info("%s seed %d task %d row %s", cfg.method, seed, n, np.round(matrix.a[n], 2))
    except (ArithmeticError, RuntimeError) as exc:
        result.failed = f"{type(exc).__name__}: {exc}"
    return result


def run_dir(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / "runs" / f"{cfg.method}-seed{seed}"


def write_run(result: RunResult, target: Path | None = None) -> Path:
    """Write a run directory atomically (staged, then renamed into place)."""
    cfg = result.config
    target = Path(target) if target else run_dir(cfg, result.seed)
    stage = target.with_name(target.name + ".partial")
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir(parents=True)
    (stage / "config.txt").write_text(cfg.replace(seeds=(result.seed,)).to_text())
    report = result.report()
    (stage / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    (stage / "metrics.json").write_text(json.dumps(result.metrics, sort_keys=True) + "\n")
    (stage / "matrix.csv").write_text(result.matrix.to_csv())
    (stage / "curve.csv").write_text("step,task,return\n" + "".join(f"{s},{t},{r!r}\n" for s, t, r in result.curve))
    learner = result.learner
    if learner is not None:
        meta = {"kind": "model", "method": cfg.method, "seed": result.seed, "tasks_trained": learner.tasks_trained}
        checkpoint.save(stage / "model.cdt", learner.named_tensors(), meta)
        if isinstance(learner, LoRADT):
            (stage / "adapters").mkdir()
            for i, adapters in sorted(learner.store.sets.items()):
                save_adapter_set(stage / "adapters" / f"task{i}.cdt", adapters, cfg.dt_config())
        if isinstance(learner, MHDT):
            (stage / "buffers").mkdir()
            for i, buf in sorted(learner.buffers.items()):
                save_buffer(stage / "buffers" / f"task{i}.jsonl", buf)
    (stage / "STATUS").write_text(report["status"] + "\n")
    if target.exists():
        shutil.rmtree(target)
    stage.rename(target)
    return target


def save_buffer(path: Path, buf: ReplayBuffer) -> None:
    buf.to_dataset().save(path)
