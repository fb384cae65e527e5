"""Group-relative policy optimization of the hierarchical policy."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import classifier, reward
from . import numerics as nx
from .agent import Agent, pad_sequences
from .env import ManipGrid, Task
from .numerics import Tensor
from .plan import M_MAX
from .rollout import Rollout, ShapingConfig, collect
from .solver import chunk_kl, chunk_log_prob

log = logging.getLogger(__name__)

LOG_RATIO_CLAMP = 20.0
OPTIMIZERS = {"adam": nx.Adam, "sgd": nx.SGD}


@dataclass(frozen=True)
class RLConfig:
    group_size: int = 8
    gamma: float = 0.99
    beta: float = 0.05
    lr: float = 3e-5
    clip_norm: float = 1.0
    lam_seg: float = 0.5
    lam_prog: float = 0.2
    eps: float = 1e-8
    refresh_every: int = 10
    n_prototypes: int = 3
    buffer_cap: int = 64
    iterations: int = 300
    seed: int = 0
    plan_constraint: bool = True
    optimizer: str = "adam"

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group size must be at least 2")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.beta < 0 or self.eps <= 0:
            raise ValueError("beta must be nonnegative and eps positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")

    @property
    def shaping(self) -> ShapingConfig:
        return ShapingConfig(self.gamma, self.lam_seg, self.lam_prog)


def group_advantages(returns: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """(R - mean) / (population std + eps)."""
    r = np.asarray(returns, dtype=np.float64)
    if len(r) < 2:
        raise ValueError("a group needs at least two returns")
    return (r - r.mean()) / (r.std() + eps)


@dataclass
class _Scores:
    """Per-decision quantities of a batch of rollouts under one parameter set."""
    index_lp: Tensor        # (D,) log-prob of the recorded index choice
    index_dist: Tensor      # (D, k) normalized log-probs of the index distribution
    index_valid: np.ndarray  # (D,) false where the index is deterministic
    means: Tensor           # (D, H * a_dim)
    log_sd: Tensor
    owner: np.ndarray       # (D,) rollout of each decision


def _score(agent: Agent, rollouts: Sequence[Rollout]) -> _Scores:
    lengths = [len(r) for r in rollouts]
    pooled = np.concatenate([r.pooled for r in rollouts])
    lp = agent.class_log_probs(pooled)
    constrained = rollouts[0].constrained
    if any(r.constrained != constrained for r in rollouts):
        raise ValueError("cannot mix constrained and unconstrained rollouts")
    index_lp, index_dist, valid = [], [], []
    off = 0
    for r, L in zip(rollouts, lengths):
        rows = lp[off:off + L]
        off += L
        if constrained:
            pair, single = classifier.masked_log_pair(rows, r.plan, r.m_prev)
            step = r.m_hat - r.m_prev
            if np.any((step != 0) & (step != 1)):
                raise reward.ContractViolation("recorded index outside the admissible set")
            index_lp.append(nx.where(~single, pair[np.arange(L), step], 0.0))
            index_dist.append(pair)
            valid.append(~single)
        else:
            free = classifier.free_log_probs(rows)
            index_lp.append(free[np.arange(L), r.op_choice])
            index_dist.append(free)
            valid.append(np.ones(L, dtype=bool))

    tokens = np.concatenate([r.tokens for r in rollouts])
    proprio = np.concatenate([r.proprio for r in rollouts])
    prims = [r.plan[int(m)] for r in rollouts for m in r.m_hat]
    e, _ = agent.decision_tokens(tokens, prims, proprio, "hard")
    padded, rows_, cols_ = pad_sequences(e, lengths)
    means = agent.chunk_means(padded)[rows_, cols_]
    owner = np.repeat(np.arange(len(rollouts)), lengths)
    return _Scores(nx.concat(index_lp, axis=0), nx.concat(index_dist, axis=0),
                   np.concatenate(valid), means, agent.log_std(), owner)


def _per_rollout(values: Tensor, owner: np.ndarray, n: int, mean: bool = False) -> Tensor:
    agg = (owner[None, :] == np.arange(n)[:, None]).astype(np.float64)
    if mean:
        agg = agg / agg.sum(axis=1, keepdims=True)
    return nx.tensor(agg) @ values


def traj_log_prob(agent: Agent, rollouts: Sequence[Rollout], scores: _Scores | None = None) -> Tensor:
    """(G,) sums over decisions of index log-prob plus chunk log-prob."""
    s = scores or _score(agent, rollouts)
    actions = np.concatenate([r.actions for r in rollouts])
    per = s.index_lp + chunk_log_prob(s.means, s.log_sd, actions)
    return _per_rollout(per, s.owner, len(rollouts))


def kl_penalty(agent: Agent, reference: Agent, rollouts: Sequence[Rollout],
               scores: _Scores | None = None) -> Tensor:
    """(G,) per-rollout mean over decisions of index KL plus chunk KL to the reference."""
    s = scores or _score(agent, rollouts)
    with nx.no_grad():
        ref = _score(reference, rollouts)
    p = s.index_dist.exp()
    disc = nx.where(s.index_valid, (p * (s.index_dist - ref.index_dist.data)).sum(axis=1), 0.0)
    cont = chunk_kl(s.means, s.log_sd, ref.means.data, ref.log_sd.data)
    return _per_rollout(disc + cont, s.owner, len(rollouts), mean=True)


def importance_ratios(agent: Agent, rollouts: Sequence[Rollout],
                      scores: _Scores | None = None) -> Tensor:
    old = np.array([r.logp_old for r in rollouts])
    diff = traj_log_prob(agent, rollouts, scores) - old
    return diff.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp()


def grpo_objective(agent: Agent, reference: Agent | None, rollouts: Sequence[Rollout],
                   advantages: np.ndarray, beta: float) -> tuple[Tensor, dict]:
    """Mean over the group of ratio * advantage - beta * KL; to be maximized."""
    s = _score(agent, rollouts)
    ratio = importance_ratios(agent, rollouts, s)
    obj = ratio * np.asarray(advantages, dtype=np.float64)
    kl = None
    if reference is not None:
        kl = kl_penalty(agent, reference, rollouts, s)
        if beta > 0:
            obj = obj - kl * beta
    stats = {"ratio": ratio.data.copy(), "kl": None if kl is None else kl.data.copy()}
    return obj.mean(), stats


# training loop ---------------------------------------------------------------

METRIC_FIELDS = ["iteration", "instruction", "layout_seed", "mean_return", "success_rate",
                 "mean_r_task", "mean_milestone", "mean_progress", "mean_kl", "mean_ratio",
                 "grad_norm", "status"] + [f"buffer_{s}" for s in range(1, M_MAX + 1)]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


@dataclass
class TrainResult:
    agent: Agent
    bank: dict
    buffers: reward.SegmentBuffers
    rows: list[dict]
    aborted: list[tuple[int, str]]
    timing: list[tuple[int, float]]

    def metrics_csv(self, config_hash: str | None = None) -> str:
        """One row per iteration; ``config_hash`` adds a constant stamp column."""
        names = METRIC_FIELDS + (["config_hash"] if config_hash else [])
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            out = {k: _fmt(row[k]) for k in METRIC_FIELDS}
            if config_hash:
                out["config_hash"] = config_hash
            w.writerow(out)
        return buf.getvalue()

    def timing_csv(self, config_hash: str | None = None) -> str:
        """Wall seconds per iteration; kept apart so the metrics stay reproducible."""
        stamp = f",{config_hash}" if config_hash else ""
        head = "iteration,wall_seconds" + (",config_hash" if config_hash else "")
        return head + "\n" + "".join(f"{i},{s:.6f}{stamp}\n" for i, s in self.timing)


def train(agent: Agent, reference: Agent, tasks: Sequence[Task], cfg: RLConfig,
          make_env: Callable[[], ManipGrid],
          callback: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Run the online stage in place on ``agent``; ``reference`` stays fixed.

    Every iteration picks one of ``tasks`` (instruction and seeded layout) and
    rolls out the whole group on it.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = OPTIMIZERS[cfg.optimizer](agent.params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    buffers = reward.SegmentBuffers(cfg.buffer_cap)
    bank: dict = {}
    rows, aborted, timing = [], [], []
    names = list(agent.params)
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        if it % cfg.refresh_every == 0:
            bank = reward.refresh_prototypes(buffers, cfg.n_prototypes, seed=cfg.seed, previous=bank)
        task = tasks[int(rng.integers(len(tasks)))]
        group = collect(agent, [task] * cfg.group_size, make_env, rng,
                        constrained=cfg.plan_constraint, bank=bank, shaping=cfg.shaping)
        for r in group:
            buffers.update(r.segments, r.r_task, r.success)
        returns = np.array([r.ret for r in group])
        adv = group_advantages(returns, cfg.eps)
        obj, stats = grpo_objective(agent, reference, group, adv, cfg.beta)
        grads = dict(zip(names, nx.backward(obj, [agent.params[n] for n in names])))
        bad = sorted({n.split(".")[0] for n, g in grads.items() if not np.all(np.isfinite(g))})
        status, gnorm = "ok", float("nan")
        if bad:
            status = "aborted:" + "+".join(bad)
            aborted.append((it, status))
            log.warning("iteration %d aborted: non-finite gradient in %s", it, ", ".join(bad))
        else:
            gnorm = opt.step(grads, ascent=True)
        n_dec = sum(len(r) for r in group)
        row = {
            "iteration": it, "instruction": task.instruction, "layout_seed": task.seed,
            "mean_return": returns.mean(),
            "success_rate": float(np.mean([r.success for r in group])),
            "mean_r_task": sum(r.r_task.sum() for r in group) / n_dec,
            "mean_milestone": cfg.lam_seg * sum(r.b.sum() for r in group) / n_dec,
            "mean_progress": sum((r.rewards - r.r_task - cfg.lam_seg * r.b).sum()
                                 for r in group) / n_dec,
            "mean_kl": float(np.mean(stats["kl"])) if stats["kl"] is not None else 0.0,
            "mean_ratio": float(np.mean(stats["ratio"])),
            "grad_norm": gnorm, "status": status,
        }
        row.update({f"buffer_{s}": n for s, n in enumerate(buffers.sizes(M_MAX), start=1)})
        rows.append(row)
        timing.append((it, time.perf_counter() - t0))
        if callback is not None:
            callback(it, row)
    return TrainResult(agent, bank, buffers, rows, aborted, timing)

