"""Shared fixtures: tiny configs sized for sub-second model builds, and the
acceptance summary printed after the run."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from anima4d.config import Config, default_config

torch.set_num_threads(1)

settings.register_profile("suite", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")

# Small enough that a full render is ~10 ms; the oracle sphere still covers
# a few dozen pixels so masks are nonempty.
TINY_OVERRIDES = [
    "encoding.levels=2", "encoding.min_res=4", "encoding.max_res=8",
    "encoding.time_slices=2", "encoding.hash_table_size=4096",
    "field.hidden_dim=8",
    "render.train_height=12", "render.train_width=12", "render.samples_per_ray=24",
    "guidance.oracle.samples_per_ray=32",
    "sampling.frames_per_clip=2",
    "trainer.log_every=10000",
]


@pytest.fixture()
def tiny_cfg() -> Config:
    return default_config().with_overrides(TINY_OVERRIDES).validate()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


# One line per acceptance criterion, echoed after the terminal summary so the
# pass/fail record is visible regardless of output capture.
ACCEPTANCE_LINES: list[str] = []


def record_criterion(num: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d} ({name}): {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
