"""Aggregate finished run directories into method x metric and memory tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import METHOD_KEYS, RUN_LOCAL_KEYS, RunConfig
from .dt_core import ConfigError

METRICS = ("PER", "BWT", "FWT", "DG")


class IncompatibleRuns(ConfigError):
    pass


@dataclass
class RunRecord:
    path: Path
    report: dict

    @property
    def config(self) -> dict:
        return self.report["config"]

    @property
    def variant(self) -> str:
        """Method name plus any of its own hyperparameters that differ from the defaults."""
        cfg = self.config
        method = cfg["method"]
        defaults = RunConfig().as_dict()
        changed = [f"{k}={cfg[k]}" for k in sorted(METHOD_KEYS[method]) if cfg[k] != defaults[k]]
        return method + (f"[{','.join(changed)}]" if changed else "")


def find_runs(paths: list[str | Path]) -> list[RunRecord]:
    """Accept run directories directly or any directory containing them."""
    found = []
    for p in map(Path, paths):
        if not p.exists():
            raise FileNotFoundError(f"{p} does not exist")
        candidates = [p] if (p / "report.json").exists() else sorted(q.parent for q in p.rglob("report.json"))
        for c in candidates:
            if c.name.endswith(".partial"):
                continue
            found.append(RunRecord(c, json.loads((c / "report.json").read_text())))
    return found


def shared_config(cfg: dict) -> dict:
    method_specific = set().union(*METHOD_KEYS.values())
    return {k: v for k, v in cfg.items() if k not in RUN_LOCAL_KEYS | method_specific}


def check_compatible(runs: list[RunRecord]) -> None:
    ref = shared_config(runs[0].config)
    for r in runs[1:]:
        other = shared_config(r.config)
        diff = [f"  {k}: {ref[k]!r} ({runs[0].path}) vs {other[k]!r} ({r.path})" for k in sorted(ref) if ref[k] != other[k]]
        if diff:
            raise IncompatibleRuns("runs were produced under different settings:\n" + "\n".join(diff))


def _median(values: list) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


@dataclass
class Summary:
    rows: list[dict]
    memory: list[dict]

    def metric_csv(self) -> str:
        return _to_csv(self.rows, ["variant", "seeds", *METRICS])

    def memory_csv(self) -> str:
        return _to_csv(self.memory, ["variant", "buffer_bytes_per_task", "adapter_floats_per_task", "adapter_bytes_per_task"])

    def text(self) -> str:
        return _table(self.rows, ["variant", "seeds", *METRICS]) + "\n" + _table(
            self.memory, ["variant", "buffer_bytes_per_task", "adapter_floats_per_task", "adapter_bytes_per_task"]
        )


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def _table(rows: list[dict], cols: list[str]) -> str:
    cells = [cols] + [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _to_csv(rows: list[dict], cols: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r[c] is None else r[c] for c in cols])
    return buf.getvalue()


def summarize(runs: list[RunRecord]) -> Summary:
    complete = [r for r in runs if r.report["status"] == "complete"]
    if not complete:
        raise FileNotFoundError("no completed runs found")
    check_compatible(complete)
    groups: dict[str, list[RunRecord]] = {}
    for r in complete:
        groups.setdefault(r.variant, []).append(r)
    rows, memory = [], []
    for variant in sorted(groups):
        members = groups[variant]
        row = {"variant": variant, "seeds": len(members)}
        for m in METRICS:
            row[m] = _median([r.report["metrics"][m] for r in members])
        rows.append(row)
        memory.append({"variant": variant, **members[0].report["memory"]})
    return Summary(rows, memory)


def cmd_report(paths: list[str | Path], out_dir: str | Path | None = None) -> Summary:
    summary = summarize(find_runs(paths))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(summary.metric_csv())
        (out / "memory.csv").write_text(summary.memory_csv())
        (out / "summary.txt").write_text(summary.text())
    return summary
