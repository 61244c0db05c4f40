import numpy as np
import pytest
import torch

from contin_dt.dt_core import DTConfig, WindowBatch

torch.set_num_threads(1)


def tiny_config(**kw) -> DTConfig:
    base = dict(state_dim=4, action_dim=2, max_timestep=50, context_len=5, n_layers=2, embed_dim=8, mlp_dim=8)
    base.update(kw)
    return DTConfig(**base)


def random_batch(cfg: DTConfig, batch_size: int, seed: int = 0, valid_len=None, dtype=torch.float32) -> WindowBatch:
    """Right-padded random windows with zeroed padding."""
    rng = np.random.default_rng(seed)
    K = cfg.context_len
    if valid_len is None:
        valid_len = rng.integers(1, K + 1, batch_size)
    valid_len = np.broadcast_to(np.asarray(valid_len), (batch_size,)).copy()
    rtg = rng.normal(size=(batch_size, K)) * 10
    states = rng.normal(size=(batch_size, K, cfg.state_dim))
    actions = rng.uniform(-1, 1, size=(batch_size, K, cfg.action_dim))
    start = rng.integers(0, cfg.max_timestep - K + 1, batch_size)
    ts = start[:, None] + np.arange(K)[None, :]
    pad = np.arange(K)[None, :] >= valid_len[:, None]
    rtg[pad] = 0
    states[pad] = 0
    actions[pad] = 0
    ts[pad] = 0
    return WindowBatch(
        torch.as_tensor(rtg, dtype=dtype),
        torch.as_tensor(states, dtype=dtype),
        torch.as_tensor(actions, dtype=dtype),
        torch.as_tensor(ts, dtype=torch.int64),
        torch.as_tensor(valid_len, dtype=torch.int64),
    )


@pytest.fixture
def cfg():
    return tiny_config()


# ---------------------------------------------------------------- acceptance summary

_criteria: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    number = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
    entry = _criteria.setdefault(number, {"ok": True, "name": "", "detail": []})
    entry["name"] = report.nodeid.split("::")[-1].split("[")[0].split("_", 3)[-1].replace("_", " ")
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False
    if report.when == "call":
        entry["detail"].extend(str(v) for k, v in report.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        detail = f"  ({'; '.join(e['detail'])})" if e["detail"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if e['ok'] else 'FAIL'}: {e['name']}{detail}")
