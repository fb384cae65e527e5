"""Episode collection for the hierarchical policy.

Episodes in a batch run in lockstep: at each decision every unfinished episode
is encoded, the primitive index is chosen, the context is sparsified and one
batched solver call produces the next action chunk for all of them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import classifier, reward
from . import numerics as nx
from .agent import Agent
from .env import A_DIM, ManipGrid, Task
from .perceive import pool
from .plan import Plan
from .solver import chunk_log_prob


@dataclass(frozen=True)
class ShapingConfig:
    gamma: float = 0.99
    lam_seg: float = 0.5
    lam_prog: float = 0.2


@dataclass
class Rollout:
    """One episode, one entry per solver decision."""
    task: Task
    plan: Plan
    constrained: bool
    tokens: np.ndarray          # (T, N, d_psi)
    pooled: np.ndarray          # (T, d_psi)
    proprio: np.ndarray         # (T, PROPRIO_DIM)
    m_prev: np.ndarray          # (T,)
    m_hat: np.ndarray           # (T,)
    op_choice: np.ndarray       # (T,) freely decoded op (ablation decoder only)
    actions: np.ndarray         # (T, H * a_dim), pre-clipping
    logp_index: np.ndarray      # (T,) under the collecting parameters
    logp_chunk: np.ndarray      # (T,)
    r_task: np.ndarray          # (T,) summed over the executed part of each chunk
    latents: np.ndarray         # (T, d_latent)
    steps: int
    success: bool
    solver_calls: int
    b: np.ndarray = field(default=None)
    phi: np.ndarray = field(default=None)          # (T + 1,), terminal entry 0
    rewards: np.ndarray = field(default=None)
    ret: float = 0.0
    segments: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.m_hat)

    @property
    def logp_old(self) -> float:
        return float(self.logp_index.sum() + self.logp_chunk.sum())

    def discounted_return(self, gamma: float) -> float:
        return float(sum(gamma ** t * r for t, r in enumerate(self.rewards)))

    def shape_rewards(self, bank: Mapping[int, np.ndarray], shaping: ShapingConfig) -> None:
        """Fill boundaries, potentials, shaped rewards, return and segments."""
        prev = np.concatenate([[1], self.m_hat[:-1]])
        self.b = (self.m_hat != prev).astype(int)
        T = len(self)
        self.phi = np.zeros(T + 1)
        for t in range(T):
            self.phi[t] = reward.potential(self.latents[t], int(self.m_hat[t]), bank)
        self.rewards = np.array([
            reward.shaped_reward(self.r_task[t], int(self.b[t]), self.phi[t], self.phi[t + 1],
                                 shaping.gamma, shaping.lam_seg, shaping.lam_prog)
            for t in range(T)])
        self.ret = self.discounted_return(shaping.gamma)
        self.segments = reward.parse_segments(self.m_hat, self.latents, monotone=self.constrained)


def _choose_index(rng, lp_row: np.ndarray, plan: Plan, m_prev: int, visited: set[int],
                  greedy: bool, constrained: bool) -> tuple[int, int, float]:
    """Returns (m_hat, op, log-prob of the choice)."""
    if constrained:
        with nx.no_grad():
            pair, single = classifier.masked_log_pair(nx.tensor(lp_row[None]), plan, np.array([m_prev]))
        pair, single = pair.data[0], bool(single[0])
        if single:
            return m_prev, plan[m_prev].op_index, 0.0
        if greedy:
            m_hat, _ = classifier.constrained_inference(np.exp(lp_row), plan, m_prev)
        else:
            m_hat = m_prev + int(rng.random() < np.exp(pair[1]))
        return m_hat, plan[m_hat].op_index, float(pair[m_hat - m_prev])
    with nx.no_grad():
        free = classifier.free_log_probs(nx.tensor(lp_row[None])).data[0]
    if greedy:
        op = int(np.argmax(free))
    else:
        p = np.exp(free)
        op = int(rng.choice(len(p), p=p / p.sum()))
    return classifier.map_op_to_plan(op, plan, m_prev, visited), op, float(free[op])


def collect(agent: Agent, tasks: Sequence[Task], make_env: Callable[[], ManipGrid],
            rng: np.random.Generator | None = None, *, greedy: bool = False,
            constrained: bool = True, bank: Mapping[int, np.ndarray] | None = None,
            shaping: ShapingConfig = ShapingConfig()) -> list[Rollout]:
    """Roll out one episode per task with the agent's current parameters.

    ``greedy`` decodes the index by masked argmax and executes chunk means;
    otherwise both are sampled from ``rng``.
    """
    if not greedy and rng is None:
        raise ValueError("sampling rollouts need an rng")
    feat, H = agent.featurizer, agent.cfg.horizon
    B = len(tasks)
    envs = [make_env() for _ in range(B)]
    obs = [env.reset(task) for env, task in zip(envs, tasks)]
    plans = [env.plan for env in envs]
    m_prev = [1] * B
    visited = [{1} for _ in range(B)]
    rec = [{k: [] for k in ("tokens", "pooled", "proprio", "m_prev", "m_hat", "op", "actions",
                            "lp_i", "lp_c", "r_task", "latents", "e")} for _ in range(B)]
    steps = [0] * B
    calls = [0] * B
    with nx.no_grad():
        log_sd = agent.log_std()
        while True:
            live = [i for i in range(B) if not envs[i].done]
            if not live:
                break
            toks = np.stack([feat.encode_tokens(obs[i], tasks[i].instruction) for i in live])
            pooled = np.stack([pool(z) for z in toks])
            proprio = np.stack([obs[i].proprio for i in live])
            lp = agent.class_log_probs(pooled).data
            prims = []
            for j, i in enumerate(live):
                m_hat, op, lpi = _choose_index(rng, lp[j], plans[i], m_prev[i], visited[i],
                                               greedy, constrained)
                r = rec[i]
                r["m_prev"].append(m_prev[i]); r["m_hat"].append(m_hat)
                r["op"].append(op); r["lp_i"].append(lpi)
                m_prev[i] = m_hat
                visited[i].add(m_hat)
                prims.append(plans[i][m_hat])
            e, _ = agent.decision_tokens(toks, prims, proprio, "hard")
            for j, i in enumerate(live):
                rec[i]["e"].append(e.data[j])
            hist = np.stack([np.stack(rec[i]["e"]) for i in live])
            mean = agent.chunk_means(nx.tensor(hist)).data[:, -1]
            if greedy:
                acts = mean.copy()
            else:
                acts = mean + np.exp(log_sd.data) * rng.standard_normal(mean.shape)
            lpc = chunk_log_prob(nx.tensor(mean), log_sd, acts).data
            for j, i in enumerate(live):
                env, r = envs[i], rec[i]
                calls[i] += 1
                r["tokens"].append(toks[j]); r["pooled"].append(pooled[j])
                r["proprio"].append(proprio[j]); r["actions"].append(acts[j])
                r["lp_c"].append(float(lpc[j]))
                r["latents"].append(feat.shaping_encode(obs[i]))
                total = 0.0
                for h in range(H):
                    if env.done:
                        break
                    obs[i], rew, _ = env.step(acts[j, h * A_DIM:(h + 1) * A_DIM])
                    total += rew
                    steps[i] += 1
                r["r_task"].append(total)

    out = []
    for i in range(B):
        r = rec[i]
        ro = Rollout(
            task=tasks[i], plan=plans[i], constrained=constrained,
            tokens=np.array(r["tokens"]), pooled=np.array(r["pooled"]),
            proprio=np.array(r["proprio"]), m_prev=np.array(r["m_prev"], dtype=int),
            m_hat=np.array(r["m_hat"], dtype=int), op_choice=np.array(r["op"], dtype=int),
            actions=np.array(r["actions"]), logp_index=np.array(r["lp_i"]),
            logp_chunk=np.array(r["lp_c"]), r_task=np.array(r["r_task"]),
            latents=np.array(r["latents"]), steps=steps[i], success=envs[i].success,
            solver_calls=calls[i])
        ro.shape_rewards(bank or {}, shaping)
        out.append(ro)
    return out
