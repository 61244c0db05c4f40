"""Performance matrix and the PER / BWT / FWT / DG continual-learning metrics.

``a[i, j]`` is the mean return on task j after finishing task i (0-indexed).
Missing entries are NaN and make every metric refuse to compute.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dt_core import rollout
from .numerics import Rng


class UndefinedMetric(ValueError):
    pass


@dataclass
class PerformanceMatrix:
    n_tasks: int
    a: np.ndarray = field(default=None)
    b_bar: np.ndarray = field(default=None)
    teacher: np.ndarray = field(default=None)

    def __post_init__(self):
        N = self.n_tasks
        if N < 1:
            raise ValueError("need at least one task")
        self.a = np.full((N, N), np.nan) if self.a is None else np.asarray(self.a, dtype=np.float64)
        self.b_bar = np.full(N, np.nan) if self.b_bar is None else np.asarray(self.b_bar, dtype=np.float64)
        self.teacher = np.full(N, np.nan) if self.teacher is None else np.asarray(self.teacher, dtype=np.float64)
        if self.a.shape != (N, N) or self.b_bar.shape != (N,) or self.teacher.shape != (N,):
            raise ValueError("matrix shapes disagree with n_tasks")

    def set_row(self, i: int, row) -> None:
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (self.n_tasks,) or not np.all(np.isfinite(row)):
            raise ValueError(f"row {i} must hold {self.n_tasks} finite returns")
        self.a[i] = row

    @property
    def complete(self) -> bool:
        return bool(np.all(np.isfinite(self.a)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task"] + [f"task{j}" for j in range(self.n_tasks)])
        for i in range(self.n_tasks):
            w.writerow([i] + [repr(float(x)) for x in self.a[i]])
        w.writerow(["b_bar"] + [repr(float(x)) for x in self.b_bar])
        w.writerow(["teacher"] + [repr(float(x)) for x in self.teacher])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PerformanceMatrix":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        body = [[float(x) for x in r[1:]] for r in rows]
        N = len(body) - 2
        return cls(N, np.array(body[:N]), np.array(body[N]), np.array(body[N + 1]))


def _require(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise UndefinedMetric(f"{what} has missing entries")


def per(m: PerformanceMatrix) -> float:
    last = m.a[-1]
    _require(last, "final row")
    return float(last.mean())


def bwt(m: PerformanceMatrix) -> float:
    """Mean drop from the just-trained return to the final return; positive means forgetting."""
    N = m.n_tasks
    if N < 2:
        raise UndefinedMetric("BWT needs at least two tasks")
    diag = np.diag(m.a)[: N - 1]
    last = m.a[N - 1, : N - 1]
    _require(diag, "diagonal")
    _require(last, "final row")
    return float(np.mean(diag - last))


def fwt(m: PerformanceMatrix) -> float:
    N = m.n_tasks
    if N < 2:
        raise UndefinedMetric("FWT needs at least two tasks")
    sup = np.array([m.a[n - 1, n] for n in range(1, N)])
    base = m.b_bar[1:]
    _require(sup, "superdiagonal")
    _require(base, "random-init baseline")
    return float(np.mean(sup - base))


def dg(m: PerformanceMatrix) -> float:
    """Mean shortfall of the learner against each task's standalone teacher."""
    if not np.all(np.isfinite(m.teacher)):
        raise UndefinedMetric("teacher returns missing")
    diag = np.diag(m.a)
    _require(diag, "diagonal")
    return float(np.mean(m.teacher - diag))


def all_metrics(m: PerformanceMatrix) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    for key, fn in (("PER", per), ("BWT", bwt), ("FWT", fwt), ("DG", dg)):
        try:
            out[key] = fn(m)
        except UndefinedMetric:
            out[key] = None
    return out


def eval_rng(root: Rng, task_index: int) -> Rng:
    """Same initial-state draws every time task ``task_index`` is evaluated."""
    return root.child("env").child(f"task{task_index}")


def evaluate_all(policy_for, tasks, targets, root: Rng, n_episodes: int = 10) -> np.ndarray:
    """One matrix row: mean return on every task, using ``policy_for(j)``."""
    return np.array([
        rollout(policy_for(j), task, targets[j], n_episodes, eval_rng(root, j))
        for j, task in enumerate(tasks)
    ])
