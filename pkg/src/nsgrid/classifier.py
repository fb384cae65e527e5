"""Symbolic classifier: primitive distribution and plan-constrained decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .plan import N_OPS, OP_INDEX, Plan, Primitive, PrimitiveOp, admissible_set

TIE_TOL = 1e-12


def init_params(d_in: int, hidden: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {
        "w1": nx.param(rng.standard_normal((d_in, hidden)) / np.sqrt(d_in)),
        "b1": nx.param(np.zeros(hidden)),
        "w2": nx.param(rng.standard_normal((hidden, N_OPS)) / np.sqrt(hidden) * 0.1),
        "b2": nx.param(np.zeros(N_OPS)),
    }


def whiten_init(params: dict[str, Tensor], pooled: np.ndarray, floor: float = 1e-5) -> None:
    """Data-dependent first-layer initialization.

    Folds a whitening of ``pooled`` (mean removal and inverse square root of the
    covariance, eigenvalues floored at ``floor`` times the largest) into ``w1``
    and ``b1``. The decision-relevant directions of mean-pooled tokens have tiny
    variance next to nuisance directions such as gripper position, and the
    whitening puts them on an equal footing. The layer stays trainable.
    """
    x = np.asarray(pooled, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("whitening needs at least two samples")
    mu = x.mean(axis=0)
    ev, vec = np.linalg.eigh(np.cov(x, rowvar=False))
    ev = np.maximum(ev, floor * ev.max())
    white = (vec / np.sqrt(ev)) @ vec.T
    w1 = params["w1"].data
    params["w1"].data = white @ w1
    params["b1"].data = params["b1"].data - mu @ white @ w1


def logits(params: dict[str, Tensor], pooled) -> Tensor:
    x = pooled if isinstance(pooled, Tensor) else nx.tensor(pooled)
    h = nx.gelu(x @ params["w1"] + params["b1"])
    return h @ params["w2"] + params["b2"]


def primitive_dist(params: dict[str, Tensor], pooled) -> np.ndarray:
    with nx.no_grad():
        return nx.softmax(logits(params, pooled)).data


def masked_index_policy(dist: np.ndarray, plan: Plan, m_prev: int) -> np.ndarray:
    """Probabilities over plan indices 1..M (returned 0-based), zero outside the admissible set."""
    ks = admissible_set(m_prev, plan.M)
    out = np.zeros(plan.M)
    for k in ks:
        out[k - 1] = dist[plan[k].op_index]
    return out / out.sum()


def constrained_inference(dist: np.ndarray, plan: Plan, m_prev: int) -> tuple[int, Primitive]:
    """Argmax of the masked policy; near-ties (within 1e-12) go to the larger index."""
    pi = masked_index_policy(dist, plan, m_prev)
    ks = admissible_set(m_prev, plan.M)
    best = max(pi[k - 1] for k in ks)
    m_hat = max(k for k in ks if pi[k - 1] >= best - TIE_TOL)
    return m_hat, plan[m_hat]


def map_op_to_plan(op: int, plan: Plan, m_prev: int, visited: set[int]) -> int:
    """Plan index for a freely decoded op (ablation decoder).

    Staying is preferred when the op matches the current primitive, otherwise
    the first unvisited plan index with that op is taken, falling back to its
    first occurrence. Ops absent from the plan keep the pointer.
    """
    if plan[m_prev].op_index == op:
        return m_prev
    hits = [k for k in range(1, plan.M + 1) if plan[k].op_index == op]
    if not hits:
        return m_prev
    fresh = [k for k in hits if k not in visited]
    return fresh[0] if fresh else hits[0]


def unconstrained_inference(dist: np.ndarray, plan: Plan, m_prev: int,
                            visited: set[int]) -> tuple[int, Primitive]:
    """Ablation decoder: free argmax over all non-pad ops, mapped back onto the plan."""
    op = int(np.argmax(dist[:OP_INDEX[PrimitiveOp.PAD]]))
    k = map_op_to_plan(op, plan, m_prev, visited)
    return k, plan[k]


def free_log_probs(log_p: Tensor) -> Tensor:
    """Log-probabilities renormalized over the non-pad ops."""
    n = OP_INDEX[PrimitiveOp.PAD]
    sub = log_p[:, :n]
    return sub - nx.logsumexp(sub, axis=1).reshape(sub.shape[0], 1)


def masked_log_pair(log_p: Tensor, plan: Plan, m_prev: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Normalized (stay, advance) log-probabilities for a batch of decisions.

    Also returns a boolean mask of decisions whose admissible set is a single
    index; their pair is meaningless and must be ignored by callers.
    """
    m_prev = np.asarray(m_prev, dtype=int)
    ops = np.array(plan.op_indices())
    nxt = np.minimum(m_prev + 1, plan.M)
    rows = np.arange(len(m_prev))
    pair = nx.stack([log_p[rows, ops[m_prev - 1]], log_p[rows, ops[nxt - 1]]], axis=1)
    norm = nx.logsumexp(pair, axis=1).reshape(len(m_prev), 1)
    return pair - norm, nxt == m_prev


def masked_log_prob(log_p: Tensor, plan: Plan, m_prev: np.ndarray, m_hat: np.ndarray) -> Tensor:
    """log pi(m_hat | m_prev) for a batch of decisions.

    ``log_p`` is (T, N_OPS) log-probabilities; returns a (T,) tensor. Decisions
    whose admissible set is a single index contribute exactly 0.
    """
    m_prev, m_hat = np.asarray(m_prev, dtype=int), np.asarray(m_hat, dtype=int)
    step = m_hat - m_prev
    if np.any((step != 0) & (step != 1)):
        raise ValueError("m_hat outside the admissible set")
    pair, single = masked_log_pair(log_p, plan, m_prev)
    picked = pair[np.arange(len(m_prev)), step]
    return nx.where(~single, picked, 0.0)


def masked_dist_batch(log_p: np.ndarray, plan: Plan, m_prev: np.ndarray) -> np.ndarray:
    """(T, 2) masked probabilities for (stay, advance); advance is 0 at the last index."""
    ops = np.array(plan.op_indices())
    nxt = np.minimum(m_prev + 1, plan.M)
    rows = np.arange(len(m_prev))
    a = np.exp(log_p[rows, ops[m_prev - 1]])
    b = np.where(nxt == m_prev, 0.0, np.exp(log_p[rows, ops[nxt - 1]]))
    s = a + b
    return np.stack([a / s, b / s], axis=1)


# supervision ---------------------------------------------------------------

@dataclass
class Segment:
    index: int          # 1-based plan index
    start: int
    end: int            # inclusive


def label_segments(labels: np.ndarray) -> list[Segment]:
    segs: list[Segment] = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            segs.append(Segment(int(labels[start]), start, t - 1))
            start = t
    return segs


def window_frames(labels: np.ndarray, plan: Plan, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Frame indices and op targets inside each segment's end window.

    Frames before the segment start are clipped away; pad primitives are skipped.
    """
    if w < 0:
        raise ValueError("window size must be nonnegative")
    frames, targets = [], []
    for seg in label_segments(labels):
        prim = plan[seg.index]
        if prim.op is PrimitiveOp.PAD:
            continue
        for t in range(max(seg.start, seg.end - w), seg.end + 1):
            frames.append(t)
            targets.append(prim.op_index)
    return np.array(frames, dtype=int), np.array(targets, dtype=int)


def class_weights(counts: np.ndarray) -> np.ndarray:
    """Inverse-frequency weights, mean 1 over observed classes.

    Unobserved classes get the largest observed weight.
    """
    counts = np.asarray(counts, dtype=np.float64)
    seen = counts > 0
    if not seen.any():
        raise ValueError("no class observed")
    inv = np.zeros_like(counts)
    inv[seen] = 1.0 / counts[seen]
    inv[seen] /= inv[seen].mean()
    inv[~seen] = inv[seen].max()
    return inv


def window_loss(params: dict[str, Tensor], pooled: np.ndarray, targets: np.ndarray,
                alpha: np.ndarray) -> Tensor:
    """Weighted cross-entropy summed over all window frames.

    ``pooled`` holds the pooled features of the frames gathered by
    :func:`window_frames` (concatenated over demos) and ``targets`` their op indices.
    """
    if len(targets) == 0:
        raise ValueError("window loss needs at least one supervised frame")
    lp = nx.log_softmax(logits(params, pooled), axis=-1)
    picked = lp[np.arange(len(targets)), targets]
    return -(picked * alpha[targets]).sum()
