import json
import os
import time
from pathlib import Path

import pytest
import torch

from tdaa.pipeline import run_pipeline

# reduced sizes so a whole pipeline runs in about a minute
TINY_CONFIG = {
    "data": {"train_count": 200, "test_count": 100, "audit_dumps": 2},
    "pretrain": {"epochs": 1, "batch_size": 64},
    "attack": {"epochs": 1, "batch_size": 50},
    "downstream": {"epochs": 2},
    "eval": {"project_count": 20, "dump_count": 2},
}


def write_config(path, cfg=TINY_CONFIG):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    return write_config(tmp_path_factory.mktemp("cfg") / "tiny.json")


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("tiny-run")
    code = run_pipeline(tiny_config, str(out))
    assert code == 0
    return out


# ---------------------------------------------------------------- full-scale pipeline

ACCEPTANCE_LINES: list[str] = []
ACCEPTANCE_CONFIG = os.environ.get("TDAA_ACCEPTANCE_CONFIG")  # None -> documented defaults


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def _pipeline_dir(tmp_path_factory, suffix: str) -> Path:
    root = os.environ.get("TDAA_ACCEPTANCE_DIR")
    if root:
        path = Path(root + suffix)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("full" + suffix)


def _timed_pipeline(out: Path) -> dict:
    """Run the default pipeline into ``out`` unless a finished run is already there."""
    timing = out / ".timing.json"
    if (out / "report.csv").exists() and timing.exists():
        return json.loads(timing.read_text())
    t0 = time.time()
    code = run_pipeline(ACCEPTANCE_CONFIG, str(out))
    info = {"exit": code, "seconds": time.time() - t0, "cores": torch.get_num_threads()}
    # leading dot keeps the timing note out of the MANIFEST
    timing.write_text(json.dumps(info))
    return info


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    out = _pipeline_dir(tmp_path_factory, "")
    info = _timed_pipeline(out)
    assert info["exit"] == 0, f"default pipeline failed with exit {info['exit']}"
    return out, info


@pytest.fixture(scope="session")
def full_rerun(tmp_path_factory):
    out = _pipeline_dir(tmp_path_factory, "-rerun")
    info = _timed_pipeline(out)
    assert info["exit"] == 0, f"second default pipeline failed with exit {info['exit']}"
    return out, info
