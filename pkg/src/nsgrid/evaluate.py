"""Deterministic evaluation: argmax primitive decoding and mean-action execution."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .agent import Agent
from .env import ManipGrid, Task
from .rollout import collect

_EVAL_STREAM = 0x5EED


@dataclass
class TaskResult:
    instruction: str
    successes: int
    episodes: int
    solver_calls_ok: bool

    @property
    def rate(self) -> float:
        return self.successes / self.episodes


def eval_tasks(task: Task, index: int, episodes: int, seed: int, perturbed: bool) -> list[Task]:
    """Episodes of one task.

    The standard protocol replays the task's own layout; the perturbed one
    draws fresh layout seeds from a dedicated evaluation stream.
    """
    if not perturbed:
        return [task] * episodes
    rng = np.random.default_rng([_EVAL_STREAM, seed, index])
    return [task.with_seed(int(s)) for s in rng.integers(2 ** 31 - 1, size=episodes)]


def evaluate(agent: Agent, tasks: Sequence[Task], episodes: int = 20, seed: int = 0,
             perturbed: bool = False, distractors: int = 2, constrained: bool = True) -> list[TaskResult]:
    """Success counts per task under argmax decoding and mean-action execution.

    ``perturbed`` re-seeds object positions and adds ``distractors`` extra
    objects to every scene.
    """
    grid = agent.cfg.grid
    H = agent.cfg.horizon
    n_extra = distractors if perturbed else 0
    out = []
    for i, task in enumerate(tasks):
        episode_tasks = eval_tasks(task, i, episodes, seed, perturbed)
        rolls = collect(agent, episode_tasks, lambda: ManipGrid(grid, n_extra), greedy=True,
                        constrained=constrained)
        calls_ok = all(r.solver_calls == math.ceil(r.steps / H) for r in rolls)
        out.append(TaskResult(task.instruction, sum(r.success for r in rolls), episodes, calls_ok))
    return out


def mean_success(results: Sequence[TaskResult]) -> float:
    return float(np.mean([r.rate for r in results]))
