import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import settings

from nsgrid.agent import Agent, ModelConfig
from nsgrid.bc import generate_demos
from nsgrid.env import ManipGrid, Task

settings.register_profile("nsgrid", deadline=None, derandomize=True, max_examples=60)
settings.load_profile("nsgrid")

SMALL = ModelConfig(grid=6, d_psi=16, d_instr=4, d_latent=8, cls_hidden=8, d_embed=4, d_query=8,
                    d_context=8, top_k=4, d_model=8, n_layers=1, n_heads=2, horizon=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_agent():
    return Agent(SMALL, seed=3)


@pytest.fixture(scope="session")
def soup_task():
    return Task.from_instruction("put the alphabet soup in the basket", seed=11)


@pytest.fixture(scope="session")
def two_task_demos():
    return generate_demos(["put the butter in the basket", "open the microwave"], 1, seed=5, grid=6)


def make_env(size=6):
    return lambda: ManipGrid(size)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
