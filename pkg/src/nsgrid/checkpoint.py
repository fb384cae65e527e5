"""Checkpoint bundles: parameters as ``.npz`` plus a JSON sidecar."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .agent import Agent, ModelConfig

PARAMS = "params.npz"
META = "meta.json"


def save(path: str | Path, agent: Agent, config_hash: str, stage: str,
         bank: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = agent.state()
    np.savez(path / PARAMS, **{k: state[k] for k in sorted(state)})
    meta = {
        "config_hash": config_hash,
        "stage": stage,
        "model": agent.config_dict(),
        "bank": {str(s): np.asarray(v).tolist() for s, v in sorted((bank or {}).items())},
        **(extra or {}),
    }
    (path / META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def exists(path: str | Path) -> bool:
    path = Path(path)
    return (path / PARAMS).exists() and (path / META).exists()


def load(path: str | Path) -> tuple[Agent, dict]:
    """Rebuild the agent recorded in the bundle; returns (agent, meta)."""
    path = Path(path)
    if not exists(path):
        raise FileNotFoundError(f"no checkpoint at {path}")
    meta = json.loads((path / META).read_text())
    agent = Agent(ModelConfig(**meta["model"]))
    with np.load(path / PARAMS) as data:
        agent.load_state({k: data[k] for k in data.files})
    meta["bank"] = {int(s): np.array(v) for s, v in meta["bank"].items()}
    return agent, meta
