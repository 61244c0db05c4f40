import json
import os

import numpy as np
import pytest

from contin_dt import checkpoint
from contin_dt.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from contin_dt.config import RunConfig, parse_config
from contin_dt.dt_core import ConfigError
from contin_dt.lora_dt import memory_footprint
from contin_dt.numerics import NumericError
from contin_dt.report import IncompatibleRuns, cmd_report, find_runs
from contin_dt.runner import adapter_bytes_per_task, buffer_bytes_per_task, dataset_path
from contin_dt.tasks import OfflineDataset

TINY = """
family = direction
n_tasks = 2
quality = expert
n_traj = 4
horizon = 10
seeds = 0
steps_per_task = 6
batch_size = 4
learning_rate = 1e-3
eval_interval = 4
eval_episodes = 2
context_len = 3
n_layers = 1
embed_dim = 8
mlp_dim = 8
buffer_capacity = 20
select_period = 2
lora_rank = 2
fisher_batches = 2
"""


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("CONTIN_DT_THREADS", "1")
    (tmp_path / "tiny.conf").write_text(TINY + "out_dir = out\n")
    assert main(["generate", "--config", "tiny.conf"]) == EXIT_OK
    return tmp_path


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------- config


def test_defaults_validate():
    cfg = parse_config("")
    assert cfg == RunConfig() and cfg.steps_per_task == 2000 and cfg.eval_interval == 200


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key 'lerning_rate'"):
        parse_config("lerning_rate = 0.1")


def test_duplicate_and_malformed_lines_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("n_tasks = 2\nn_tasks = 3")
    with pytest.raises(ConfigError, match="expected"):
        parse_config("n_tasks 2")
    with pytest.raises(ConfigError):
        parse_config("n_tasks = two")


def test_values_validated_before_compute():
    for text in ("method = dqn", "family = sideways", "quality = random", "steps_per_task = 0", "seeds = ", "method = loradt\nlora_rank = 500"):
        with pytest.raises(ConfigError):
            parse_config(text)


def test_comments_types_and_overrides():
    cfg = parse_config("# c\nseeds = 0, 1,2  # three\nselective = false\nmerge_weight = 0.3", method="loradt", out_dir=None)
    assert cfg.seeds == (0, 1, 2) and cfg.selective is False and cfg.merge_weight == 0.3 and cfg.method == "loradt"
    assert parse_config(cfg.to_text()) == cfg


# ---------------------------------------------------------------- memory accounting


def test_memory_columns_for_default_configs():
    cfg = RunConfig()
    assert memory_footprint(cfg.dt_config(), cfg.lora_rank) == 6144
    assert adapter_bytes_per_task(cfg) == 24576
    assert buffer_bytes_per_task(cfg) == 48000
    assert adapter_bytes_per_task(cfg) < buffer_bytes_per_task(cfg)


# ---------------------------------------------------------------- generate


def test_generate_is_deterministic(workspace):
    cfg = parse_config(TINY + "out_dir = out\n")
    files = [dataset_path(cfg, n) for n in range(2)]
    first = [f.read_bytes() for f in files]
    assert main(["generate", "--config", "tiny.conf"]) == EXIT_OK
    assert [f.read_bytes() for f in files] == first


def test_generate_reports_transition_count(tmp_path, capsys):
    (tmp_path / "c.conf").write_text(f"n_tasks = 1\nn_traj = 200\nhorizon = 50\nout_dir = {tmp_path}\n")
    assert main(["generate", "--config", str(tmp_path / "c.conf")]) == EXIT_OK
    assert "10000 transitions" in capsys.readouterr().out
    cfg = parse_config(f"n_tasks = 1\nout_dir = {tmp_path}")
    header = json.loads(dataset_path(cfg, 0).read_text().splitlines()[0])
    assert header["n_traj"] == 200 and header["H"] == 50


# ---------------------------------------------------------------- exit codes


def test_config_error_exit_code(tmp_path, capsys):
    (tmp_path / "bad.conf").write_text("colour = blue\n")
    assert main(["generate", "--config", str(tmp_path / "bad.conf")]) == EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err


def test_missing_config_is_io_error(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "absent.conf")]) == EXIT_IO


def test_train_without_datasets_is_io_error(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "tiny.conf").write_text(TINY + "out_dir = elsewhere\n")
    assert main(["train", "--config", "tiny.conf", "--method", "vanilla"]) == EXIT_IO


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    (tmp_path / "c.conf").write_text(TINY + f"out_dir = {blocker}\n")
    assert main(["generate", "--config", str(tmp_path / "c.conf")]) == EXIT_IO


def test_bad_thread_cap_is_config_error(workspace, monkeypatch):
    monkeypatch.setenv("CONTIN_DT_THREADS", "many")
    assert main(["train", "--config", "tiny.conf", "--method", "vanilla"]) == EXIT_CONFIG


def test_numeric_failure_writes_failed_run(workspace, monkeypatch, capsys):
    from contin_dt import baselines

    real = baselines.VanillaDT.train_task

    def explode(self, n, dataset, callback=None):
        if n == 1:
            raise NumericError("loss became nan")
        return real(self, n, dataset, callback)

    monkeypatch.setattr(baselines.VanillaDT, "train_task", explode)
    assert main(["train", "--config", "tiny.conf", "--method", "vanilla"]) == EXIT_NUMERIC
    run = workspace / "out" / "runs" / "vanilla-seed0"
    assert (run / "STATUS").read_text() == "failed\n"
    report = json.loads((run / "report.json").read_text())
    assert report["status"] == "failed" and "nan" in report["error"]
    assert report["matrix"]["a"][0][0] is not None and report["matrix"]["a"][1][0] is None
    assert report["metrics"]["PER"] is None
    assert "FAILED" in capsys.readouterr().out


# ---------------------------------------------------------------- train


@pytest.mark.parametrize("method", ["vanilla", "ewc", "si", "mhdt", "loradt"])
def test_train_writes_complete_run(workspace, method):
    assert main(["train", "--config", "tiny.conf", "--method", method]) == EXIT_OK
    run = workspace / "out" / "runs" / f"{method}-seed0"
    assert (run / "STATUS").read_text() == "complete\n"
    report = json.loads((run / "report.json").read_text())
    assert report["status"] == "complete" and report["metrics"]["PER"] is not None
    steps = [row["step"] for row in report["curve"]]
    assert steps == sorted(steps) and steps[-1] == 12
    tensors, meta = checkpoint.load(run / "model.cdt")
    assert meta["tasks_trained"] == 2 and tensors
    if method == "loradt":
        cfg = parse_config(TINY)
        for i in (1,):
            adapters, meta = checkpoint.load(run / "adapters" / f"task{i}.cdt")
            assert checkpoint.element_count(adapters) == memory_footprint(cfg.dt_config(), 2) == 2 * 1 * 2 * 16
    if method == "mhdt":
        for i in (0, 1):
            buf = OfflineDataset.load(run / "buffers" / f"task{i}.jsonl")
            assert buf.n_transitions == 20 and buf.quality == "expert"
        assert report["metrics"]["DG"] is not None


def test_train_is_byte_deterministic(workspace):
    run = workspace / "out" / "runs" / "mhdt-seed0"
    assert main(["train", "--config", "tiny.conf", "--method", "mhdt"]) == EXIT_OK
    first = tree_bytes(run)
    assert main(["train", "--config", "tiny.conf", "--method", "mhdt"]) == EXIT_OK
    assert tree_bytes(run) == first


def test_seeds_do_not_contaminate_each_other(workspace):
    assert main(["train", "--config", "tiny.conf", "--method", "vanilla", "--seed", "1"]) == EXIT_OK
    alone = tree_bytes(workspace / "out" / "runs" / "vanilla-seed1")
    assert main(["train", "--config", "tiny.conf", "--method", "vanilla", "--seed", "0", "--seed", "1"]) == EXIT_OK
    assert tree_bytes(workspace / "out" / "runs" / "vanilla-seed1") == alone
    assert tree_bytes(workspace / "out" / "runs" / "vanilla-seed0") != alone


def test_parallel_jobs_match_sequential(workspace, monkeypatch):
    assert main(["train", "--config", "tiny.conf", "--method", "si", "--seed", "0", "--seed", "1"]) == EXIT_OK
    before = tree_bytes(workspace / "out" / "runs")
    monkeypatch.setenv("CONTIN_DT_THREADS", "2")
    assert main(["train", "--config", "tiny.conf", "--method", "si", "--seed", "0", "--seed", "1"]) == EXIT_OK
    assert tree_bytes(workspace / "out" / "runs") == before


# ---------------------------------------------------------------- report


def test_report_single_run(workspace, capsys):
    assert main(["train", "--config", "tiny.conf", "--method", "loradt"]) == EXIT_OK
    capsys.readouterr()
    assert main(["report", "out/runs/loradt-seed0", "--out", "tables"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "loradt[lora_rank=2]" in text
    rows = (workspace / "tables" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("loradt[lora_rank=2],1,")
    memory = (workspace / "tables" / "memory.csv").read_text().splitlines()
    assert memory[1] == "loradt[lora_rank=2],0,64,256"


def test_report_medians_and_variants(workspace):
    assert main(["train", "--config", "tiny.conf", "--method", "vanilla", "--seed", "0", "--seed", "1", "--seed", "2"]) == EXIT_OK
    (workspace / "abl.conf").write_text(TINY + "out_dir = abl\nlambda_distill = 0\nselective = false\n")
    assert main(["generate", "--config", "abl.conf"]) == EXIT_OK
    assert main(["train", "--config", "abl.conf", "--method", "mhdt"]) == EXIT_OK
    summary = cmd_report(["out", "abl"])
    variants = [r["variant"] for r in summary.rows]
    assert variants == ["mhdt[buffer_capacity=20,lambda_distill=0.0,select_period=2,selective=False]", "vanilla"]
    pers = [json.loads((workspace / "out" / "runs" / f"vanilla-seed{s}" / "report.json").read_text())["metrics"]["PER"] for s in range(3)]
    assert summary.rows[1]["PER"] == pytest.approx(float(np.median(pers)))
    assert summary.memory[0]["buffer_bytes_per_task"] == 20 * 12 * 4


def test_report_refuses_incompatible_runs(workspace, capsys):
    assert main(["train", "--config", "tiny.conf", "--method", "vanilla"]) == EXIT_OK
    (workspace / "other.conf").write_text(TINY.replace("embed_dim = 8", "embed_dim = 12").replace("mlp_dim = 8", "mlp_dim = 12") + "out_dir = other\n")
    assert main(["generate", "--config", "other.conf"]) == EXIT_OK
    assert main(["train", "--config", "other.conf", "--method", "vanilla"]) == EXIT_OK
    with pytest.raises(IncompatibleRuns, match="embed_dim"):
        cmd_report(["out", "other"])
    assert main(["report", "out", "other"]) == EXIT_CONFIG
    assert "embed_dim" in capsys.readouterr().err


def test_report_skips_partial_directories(workspace):
    assert main(["train", "--config", "tiny.conf", "--method", "vanilla"]) == EXIT_OK
    (workspace / "out" / "runs" / "si-seed0.partial").mkdir()
    (workspace / "out" / "runs" / "si-seed0.partial" / "report.json").write_text("{}")
    assert [r.path.name for r in find_runs(["out"])] == ["vanilla-seed0"]


def test_report_without_runs_is_io_error(tmp_path):
    assert main(["report", str(tmp_path)]) == EXIT_IO
