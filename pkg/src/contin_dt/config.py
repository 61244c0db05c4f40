"""Flat ``key = value`` run configuration with typed validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .dt_core import ConfigError, DTConfig
from .learner import TrainConfig
from .lora_dt import LoRAConfig
from .mh_dt import MHDTConfig
from .tasks import FAMILIES, QUALITIES, TaskSpec, task_sequence

METHODS = ("mhdt", "loradt", "vanilla", "ewc", "si")


@dataclass(frozen=True)
class RunConfig:
    method: str = "mhdt"
    family: str = "direction"
    n_tasks: int = 4
    quality: str = "expert"
    n_traj: int = 200
    horizon: int = 50
    data_seed: int = 0
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"

    steps_per_task: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    eval_interval: int = 200
    eval_episodes: int = 10
    invariant_checks: bool = False

    context_len: int = 20
    n_layers: int = 3
    n_heads: int = 1
    embed_dim: int = 128
    mlp_dim: int = 128
    rtg_scale: float = 0.01
    loss_positions: str = "all"

    k_select: int = 2
    select_period: int = 10
    lambda_distill: float = 0.5
    lambda_rehearsal: float = 1.0
    buffer_capacity: int = 1000
    selective: bool = True

    lora_rank: int = 4
    merge_weight: float = 0.2
    teacher_fraction: float = 0.5

    ewc_lambda: float = 100.0
    fisher_batches: int = 50
    si_c: float = 1.0
    si_xi: float = 1e-3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}")
        if self.quality not in QUALITIES:
            raise ConfigError(f"quality must be one of {QUALITIES}")
        for key in ("n_tasks", "n_traj", "horizon", "steps_per_task", "batch_size", "eval_interval", "eval_episodes"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        # build the sub-configs once so their own checks run up front
        self.dt_config()
        self.mhdt_config()
        self.lora_config()
        if self.method == "loradt" and not 1 <= self.lora_rank <= min(self.embed_dim, self.mlp_dim):
            raise ConfigError("lora_rank must lie in [1, min(embed_dim, mlp_dim)]")

    def dt_config(self) -> DTConfig:
        spec = TaskSpec(self.family, 0.0, horizon=self.horizon)
        return DTConfig(
            state_dim=spec.state_dim,
            action_dim=spec.action_dim,
            max_timestep=self.horizon,
            context_len=self.context_len,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            embed_dim=self.embed_dim,
            mlp_dim=self.mlp_dim,
            rtg_scale=self.rtg_scale,
            loss_positions=self.loss_positions,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.steps_per_task, self.batch_size, self.learning_rate, self.weight_decay, self.invariant_checks)

    def mhdt_config(self) -> MHDTConfig:
        return MHDTConfig(self.k_select, self.select_period, self.lambda_distill, self.lambda_rehearsal, self.buffer_capacity, self.selective)

    def lora_config(self) -> LoRAConfig:
        return LoRAConfig(self.lora_rank, self.merge_weight, self.teacher_fraction)

    def tasks(self) -> list[TaskSpec]:
        return task_sequence(self.family, self.n_tasks, self.horizon)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d


# keys that only matter for one method; everything else must agree across compared runs
METHOD_KEYS = {
    "mhdt": {"k_select", "select_period", "lambda_distill", "lambda_rehearsal", "buffer_capacity", "selective"},
    "loradt": {"lora_rank", "merge_weight", "teacher_fraction"},
    "ewc": {"ewc_lambda", "fisher_batches"},
    "si": {"si_c", "si_xi"},
    "vanilla": set(),
}
RUN_LOCAL_KEYS = {"method", "seeds", "out_dir", "invariant_checks"}


def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        if typ in (str, "str"):
            return raw
        if "tuple" in str(typ):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None
    raise ConfigError(f"{name}: unsupported type {typ}")


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are rejected."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def load_config(path: str | Path, **overrides) -> RunConfig:
    return parse_config(Path(path).read_text(), **overrides)
