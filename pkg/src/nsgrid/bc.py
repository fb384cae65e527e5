"""Stage I: expert demonstrations, classifier pretraining and solver warm start."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import classifier, solver
from . import numerics as nx
from .agent import Agent, pad_sequences
from .env import Demo, ExpertFailure, ManipGrid, Task, demo_from_steps, run_expert, write_demo
from .perceive import pool

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BCConfig:
    window: int = 3
    cls_epochs: int = 200
    cls_lr: float = 1e-3
    solver_epochs: int = 200
    solver_lr: float = 1e-3
    batch_size: int = 32
    clip_norm: float = 1.0
    val_fraction: float = 0.1
    whiten_floor: float | None = 1e-5
    seed: int = 0


def generate_demos(instructions: Sequence[str], n_per_task: int, seed: int, grid: int = 8,
                   out_dir: Path | None = None) -> list[Demo]:
    """Scripted-expert demonstrations; tasks the expert fails on are skipped with a warning."""
    rng = np.random.default_rng(seed)
    demos = []
    for ti, instruction in enumerate(instructions):
        for k in range(n_per_task):
            task = Task.from_instruction(instruction, seed=int(rng.integers(2 ** 31 - 1)))
            try:
                steps = run_expert(ManipGrid(grid), task)
            except ExpertFailure as exc:
                log.warning("skipping task %d (%s): %s", ti, instruction, exc)
                continue
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                write_demo(Path(out_dir) / f"task{ti:02d}_demo{k:02d}.jsonl", task, steps, grid)
            demos.append(demo_from_steps(task, steps, grid))
    return demos


def _encode(agent: Agent, demo: Demo) -> np.ndarray:
    return np.stack([agent.featurizer.encode_tokens(o, demo.task.instruction)
                     for o in demo.observations])


def _split(n: int, frac: float) -> int:
    """First validation step: the last ``frac`` of a demo's steps are held out."""
    return n - max(1, int(np.ceil(frac * n))) if n > 1 else n


# classifier -------------------------------------------------------------------

@dataclass
class ClassifierReport:
    best_epoch: int
    best_val_accuracy: float
    train_losses: list[float]
    uniform_loss: float


def pretrain_classifier(agent: Agent, demos: Sequence[Demo], cfg: BCConfig) -> ClassifierReport:
    """Fit the classifier with the window loss; keeps the best-validation parameters.

    Validation uses the last ``val_fraction`` of each demo's steps. With one demo
    per task those frames also belong to the final segment's supervision window,
    so they stay in the training set; ties keep the later epoch.
    """
    feats, targets, v_feats, v_targets, all_pooled = [], [], [], [], []
    for d in demos:
        pooled = np.stack([pool(z) for z in _encode(agent, d)])
        all_pooled.append(pooled)
        cut = _split(len(d), cfg.val_fraction)
        frames, tgt = classifier.window_frames(d.labels, d.plan, cfg.window)
        feats.append(pooled[frames]); targets.append(tgt)
        ops = np.array(d.plan.op_indices())
        v_feats.append(pooled[cut:]); v_targets.append(ops[d.labels[cut:] - 1])
    x, y = np.concatenate(feats), np.concatenate(targets)
    vx, vy = np.concatenate(v_feats), np.concatenate(v_targets)
    alpha = classifier.class_weights(np.bincount(y, minlength=classifier.N_OPS))

    params = agent.group("cls")
    if cfg.whiten_floor is not None:
        classifier.whiten_init(params, np.concatenate(all_pooled), cfg.whiten_floor)
    names = list(params)
    opt = nx.Adam(params, lr=cfg.cls_lr, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    best = ({k: v.data.copy() for k, v in params.items()}, -1.0, -1)
    losses = []
    for epoch in range(cfg.cls_epochs):
        order = rng.permutation(len(y))
        total, diverged = 0.0, False
        for s in range(0, len(y), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss = classifier.window_loss(params, x[idx], y[idx], alpha)
            if not np.isfinite(loss.item()):
                diverged = True
                break
            grads = dict(zip(names, nx.backward(loss, [params[n] for n in names])))
            opt.step(grads)
            total += loss.item()
        if diverged:
            log.warning("classifier loss diverged at epoch %d; keeping last finite checkpoint", epoch)
            break
        losses.append(total / len(y))
        acc = _accuracy(params, vx, vy)
        if acc >= best[1]:
            best = ({k: v.data.copy() for k, v in params.items()}, acc, epoch)
    for k, v in best[0].items():
        params[k].data = v
    uniform = float(np.log(classifier.N_OPS) * (alpha[y].sum() / len(y)))
    return ClassifierReport(best[2], best[1], losses, uniform)


def _accuracy(params, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    dist = classifier.primitive_dist(params, x)
    return float(np.mean(dist.argmax(axis=1) == y))


def window_accuracy(agent: Agent, demos: Sequence[Demo], window: int = 3) -> float:
    """Argmax op accuracy on the segment-end window frames of ``demos``."""
    hits = total = 0
    for d in demos:
        pooled = np.stack([pool(z) for z in _encode(agent, d)])
        frames, tgt = classifier.window_frames(d.labels, d.plan, window)
        dist = classifier.primitive_dist(agent.group("cls"), pooled[frames])
        hits += int((dist.argmax(axis=1) == tgt).sum())
        total += len(tgt)
    return hits / max(total, 1)


# solver -----------------------------------------------------------------------

@dataclass
class SolverBatch:
    tokens: np.ndarray      # (D, N, d_psi)
    prims: list
    proprio: np.ndarray     # (D, PROPRIO_DIM)
    targets: np.ndarray     # (D, H * a_dim)
    mask: np.ndarray        # (D, H * a_dim)
    lengths: list[int]


def solver_sequences(agent: Agent, demos: Sequence[Demo], offsets: Sequence[int] | None = None,
                     steps: slice | None = None) -> SolverBatch:
    """Decision sequences cut from demos at every chunk offset, with teacher-forced labels.

    A sequence starting at offset ``o`` makes decisions at steps o, o+H, o+2H, ...
    """
    H = agent.cfg.horizon
    offsets = range(H) if offsets is None else offsets
    tok, prims, prop, tgt, msk, lengths = [], [], [], [], [], []
    for d in demos:
        z = _encode(agent, d)
        acts = d.actions if steps is None else d.actions[steps]
        n = len(acts)
        for o in offsets:
            if o >= n:
                continue
            blocks, mask = solver.action_blocks(acts, H, o)
            times = np.arange(o, n, H)
            tok.append(z[times]); prop.append(np.stack([d.observations[t].proprio for t in times]))
            prims += [d.plan[int(d.labels[t])] for t in times]
            tgt.append(blocks); msk.append(mask)
            lengths.append(len(times))
    return SolverBatch(np.concatenate(tok), prims, np.concatenate(prop), np.concatenate(tgt),
                       np.concatenate(msk), lengths)


def solver_means(agent: Agent, batch: SolverBatch, mode: str = "soft") -> nx.Tensor:
    e, _ = agent.decision_tokens(batch.tokens, batch.prims, batch.proprio, mode)
    padded, rows, cols = pad_sequences(e, batch.lengths)
    return agent.chunk_means(padded)[rows, cols]


def solver_mse(agent: Agent, batch: SolverBatch, mode: str = "soft") -> float:
    with nx.no_grad():
        return solver.bc_loss(solver_means(agent, batch, mode), batch.targets, batch.mask).item()


def pretrain_solver(agent: Agent, demos: Sequence[Demo], cfg: BCConfig) -> list[float]:
    """Behaviour cloning of the sparsifier and solver on demo action blocks."""
    batch = solver_sequences(agent, demos)
    params = {k: v for k, v in agent.params.items() if k.startswith(("sp.", "sol."))}
    names = [n for n in params if n != "sol.log_std"]
    opt = nx.Adam({n: params[n] for n in names}, lr=cfg.solver_lr, clip_norm=cfg.clip_norm)
    losses = []
    for epoch in range(cfg.solver_epochs):
        loss = solver.bc_loss(solver_means(agent, batch), batch.targets, batch.mask)
        if not np.isfinite(loss.item()):
            log.warning("solver loss diverged at epoch %d", epoch)
            break
        grads = dict(zip(names, nx.backward(loss, [params[n] for n in names])))
        opt.step(grads)
        losses.append(loss.item())
    return losses


def stage_one(agent: Agent, demos: Sequence[Demo], cfg: BCConfig) -> tuple[Agent, ClassifierReport, list[float]]:
    """Pretrain both modules in place and return the frozen reference copy."""
    report = pretrain_classifier(agent, demos, cfg)
    losses = pretrain_solver(agent, demos, cfg)
    return agent.copy(), report, losses
