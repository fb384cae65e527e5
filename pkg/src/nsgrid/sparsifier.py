"""Query-conditioned token sparsification and sparse fusion into a context vector."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .plan import N_OPS, Primitive, PrimitiveOp
from .vocab import ENTITY_INDEX, ENTITY_IDS, RELATION_IDS, split_support


def init_params(d_psi: int, d_embed: int, d_query: int, d_context: int,
                rng: np.random.Generator, entity_basis: np.ndarray | None = None,
                grounding: float = 0.0) -> dict[str, Tensor]:
    """Random parameters, optionally with a grounding prior.

    With ``entity_basis`` (rows: token-space direction of each entity's
    presence) and ``grounding > 0``, the object and support slots of the query
    are routed into the first ``d_embed`` query dimensions and ``w_k`` is set so
    that a primitive's object or support scores the matching entity's tokens
    ``grounding`` above unrelated tokens.
    """
    emb_ent = rng.standard_normal((len(ENTITY_IDS), d_embed))
    w_q = rng.standard_normal((3 * d_embed, d_query)) / np.sqrt(3 * d_embed)
    w_k = rng.standard_normal((d_query, d_psi)) / np.sqrt(d_query)
    if entity_basis is not None and grounding > 0:
        if d_query < d_embed:
            raise ValueError("grounding prior needs d_query >= d_embed")
        w_q[d_embed:, :d_embed] = np.vstack([np.eye(d_embed), np.eye(d_embed)])
        w_q[:d_embed, :d_embed] = 0.0
        w_q[d_embed:, d_embed:] = 0.0
        w_k[:d_embed] = grounding * np.sqrt(d_psi) * np.linalg.pinv(emb_ent) @ entity_basis
    return {
        "emb_op": nx.param(rng.standard_normal((N_OPS, d_embed))),
        "emb_ent": nx.param(emb_ent),
        "emb_rel": nx.param(0.1 * rng.standard_normal((len(RELATION_IDS), d_embed))),
        "w_q": nx.param(w_q),
        "w_k": nx.param(w_k),
        "w_v": nx.param(rng.standard_normal((d_psi, d_context)) / np.sqrt(d_psi)),
    }


def _primitive_indices(prims: Sequence[Primitive]):
    op, obj, sup, rel, has_sup, has_rel = [], [], [], [], [], []
    for p in prims:
        if p.op is PrimitiveOp.PAD:
            raise ValueError("pad primitive cannot be embedded")
        op.append(p.op_index)
        obj.append(ENTITY_INDEX[p.object])
        if p.support is None:
            sup.append(0); rel.append(0); has_sup.append(0.0); has_rel.append(0.0)
        else:
            r, ent = split_support(p.support)
            sup.append(ENTITY_INDEX[ent]); has_sup.append(1.0)
            rel.append(RELATION_IDS.index(r) if r else 0)
            has_rel.append(1.0 if r else 0.0)
    return (np.array(op), np.array(obj), np.array(sup), np.array(rel),
            np.array(has_sup)[:, None], np.array(has_rel)[:, None])


def embed_primitive(params: dict[str, Tensor], prims: Sequence[Primitive]) -> Tensor:
    """(T, d_query) queries composed from op, object and (optional) support embeddings.

    A missing support contributes an all-zero slot.
    """
    op, obj, sup, rel, has_sup, has_rel = _primitive_indices(prims)
    e_sup = params["emb_ent"][sup] * has_sup + params["emb_rel"][rel] * has_rel
    parts = nx.concat([params["emb_op"][op], params["emb_ent"][obj], e_sup], axis=-1)
    return parts @ params["w_q"]


def relevance(params: dict[str, Tensor], q: Tensor, tokens: np.ndarray) -> Tensor:
    """(T, N) scores q^T W_k z_i / sqrt(d_z) for tokens of shape (T, N, d_z)."""
    d_z = tokens.shape[-1]
    keys = (q @ params["w_k"]).reshape(q.shape[0], 1, d_z)
    return (keys @ nx.tensor(tokens).swapaxes(-1, -2)).reshape(q.shape[0], tokens.shape[1]) \
        * (1.0 / math.sqrt(d_z))


def topk_threshold(alpha: np.ndarray, k: int) -> np.ndarray:
    """Per-row cut between the K-th and (K+1)-th largest scores (the K-th itself when K = N)."""
    s = -np.sort(-alpha, axis=-1)
    if k >= alpha.shape[-1]:
        return s[..., k - 1]
    return 0.5 * (s[..., k - 1] + s[..., k])


def soft_topk_gate(alpha: Tensor, k: int, temperature: float) -> Tensor:
    """sigmoid((alpha - threshold) / temperature); the threshold is stop-gradient."""
    if not 1 <= k <= alpha.shape[-1] or temperature <= 0:
        raise ValueError("need 1 <= K <= N and temperature > 0")
    thr = topk_threshold(alpha.data, k)[..., None]
    return nx.sigmoid((alpha - nx.stop_gradient(nx.tensor(thr))) * (1.0 / temperature))


def hard_topk(alpha: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K largest scores, ascending; ties go to the lower index."""
    order = np.argsort(-np.asarray(alpha), axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def fuse_soft(params: dict[str, Tensor], alpha: Tensor, gates: Tensor,
              tokens: np.ndarray) -> tuple[Tensor, Tensor]:
    """Gate-weighted softmax over all tokens; returns (context, weights)."""
    shift = nx.stop_gradient(nx.tensor(alpha.data.max(axis=-1, keepdims=True)))
    e = (alpha - shift).exp() * gates
    w = e / e.sum(axis=-1, keepdims=True)
    pooled = (w.reshape(w.shape[0], 1, w.shape[1]) @ nx.tensor(tokens)).reshape(w.shape[0], -1)
    return pooled @ params["w_v"], w


def fuse_hard(params: dict[str, Tensor], alpha: Tensor, idx: np.ndarray,
              tokens: np.ndarray) -> tuple[Tensor, Tensor]:
    """Softmax restricted to the selected tokens; unselected tokens are never read."""
    rows = np.arange(idx.shape[0])[:, None]
    a = alpha[rows, idx]
    w = nx.softmax(a, axis=-1)
    z = nx.tensor(tokens[rows, idx])
    pooled = (w.reshape(w.shape[0], 1, w.shape[1]) @ z).reshape(w.shape[0], -1)
    return pooled @ params["w_v"], w


def fuse_dense(params: dict[str, Tensor], tokens: np.ndarray) -> Tensor:
    """Ablation: mean of all value-projected tokens."""
    return nx.tensor(tokens.mean(axis=1)) @ params["w_v"]


def sparsify(params: dict[str, Tensor], q: Tensor, tokens: np.ndarray, mode: str, k: int,
             temperature: float = 0.1) -> tuple[Tensor, dict]:
    """Context vectors for a batch of decisions.

    ``mode`` is ``"soft"`` (training relaxation), ``"hard"`` (inference Top-K) or
    ``"dense"`` (no sparsification).
    """
    if mode == "dense":
        return fuse_dense(params, tokens), {}
    alpha = relevance(params, q, tokens)
    if mode == "soft":
        g = soft_topk_gate(alpha, k, temperature)
        c, w = fuse_soft(params, alpha, g, tokens)
        return c, {"alpha": alpha.data, "weights": w.data}
    if mode == "hard":
        idx = hard_topk(alpha.data, k)
        c, w = fuse_hard(params, alpha, idx, tokens)
        return c, {"alpha": alpha.data, "index": idx, "weights": w.data}
    raise ValueError(f"unknown sparsify mode {mode!r}")


def dump_attention_csv(path: Path, alpha: np.ndarray, idx: np.ndarray, weights: np.ndarray) -> None:
    """One row per (decision, token): score, selected flag and fused weight."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["decision", "token", "alpha", "selected", "weight"])
        for t in range(alpha.shape[0]):
            sel = {int(i): float(w) for i, w in zip(idx[t], weights[t])}
            for i in range(alpha.shape[1]):
                out.writerow([t, i, repr(float(alpha[t, i])), int(i in sel), repr(sel.get(i, 0.0))])
