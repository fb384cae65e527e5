"""Chunked action generator: causal transformer over decision tokens with a
diagonal-normal head over H-step action chunks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class SolverShape:
    d_in: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    horizon: int = 4
    a_dim: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def chunk_dim(self) -> int:
        return self.horizon * self.a_dim


def init_params(shape: SolverShape, rng: np.random.Generator,
                init_log_std: float = -1.0) -> dict[str, Tensor]:
    d, h = shape.d_model, shape.d_model * shape.mlp_ratio

    def w(n_in, n_out, gain=1.0):
        return nx.param(rng.standard_normal((n_in, n_out)) * gain / np.sqrt(n_in))

    p = {"w_in": w(shape.d_in, d), "b_in": nx.param(np.zeros(d))}
    for i in range(shape.n_layers):
        depth_gain = 1.0 / np.sqrt(2 * shape.n_layers)
        p[f"l{i}.wq"] = w(d, d)
        p[f"l{i}.wk"] = w(d, d)
        p[f"l{i}.wv"] = w(d, d)
        p[f"l{i}.wo"] = w(d, d, depth_gain)
        p[f"l{i}.w1"] = w(d, h)
        p[f"l{i}.b1"] = nx.param(np.zeros(h))
        p[f"l{i}.w2"] = w(h, d, depth_gain)
        p[f"l{i}.b2"] = nx.param(np.zeros(d))
    p["w_out"] = w(d, shape.chunk_dim, 0.1)
    p["b_out"] = nx.param(np.zeros(shape.chunk_dim))
    p["log_std"] = nx.param(np.full(shape.chunk_dim, float(init_log_std)))
    return p


def sinusoidal(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)
    return out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def chunk_means(params: dict[str, Tensor], shape: SolverShape, e: Tensor) -> Tensor:
    """Chunk means at every position of a batch of token histories.

    ``e`` is (B, T, d_in); the output (B, T, H*a_dim) at position t depends only
    on tokens 0..t.
    """
    B, T, _ = e.shape
    x = e @ params["w_in"] + params["b_in"] + sinusoidal(T, shape.d_model)
    mask = nx.causal_mask(T)
    for i in range(shape.n_layers):
        y = nx.layer_norm(x)
        q = _split_heads(y @ params[f"l{i}.wq"], shape.n_heads)
        k = _split_heads(y @ params[f"l{i}.wk"], shape.n_heads)
        v = _split_heads(y @ params[f"l{i}.wv"], shape.n_heads)
        att = nx.attention(q, k, v, mask).transpose(0, 2, 1, 3).reshape(B, T, shape.d_model)
        x = x + att @ params[f"l{i}.wo"]
        y = nx.layer_norm(x)
        x = x + nx.gelu(y @ params[f"l{i}.w1"] + params[f"l{i}.b1"]) @ params[f"l{i}.w2"] \
            + params[f"l{i}.b2"]
    return nx.layer_norm(x) @ params["w_out"] + params["b_out"]


def log_std(params: dict[str, Tensor]) -> Tensor:
    return params["log_std"].clamp(LOG_STD_MIN, LOG_STD_MAX)


@dataclass
class ChunkDist:
    """Diagonal normal over a flattened chunk; ``log_std`` is shared across positions."""
    mean: np.ndarray        # (..., H*a_dim)
    log_std: np.ndarray     # (H*a_dim,)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def chunk_dist(params: dict[str, Tensor], shape: SolverShape, e_history: np.ndarray) -> ChunkDist:
    """Distribution for the last position of a single (T, d_in) history."""
    e = np.asarray(e_history, dtype=np.float64)
    if e.ndim != 2 or len(e) == 0:
        raise ValueError("history must be a nonempty (T, d_in) array")
    with nx.no_grad():
        mean = chunk_means(params, shape, nx.tensor(e[None]))
        ls = log_std(params)
    return ChunkDist(mean.data[0, -1], ls.data.copy())


def sample_chunk(dist: ChunkDist, rng: np.random.Generator) -> np.ndarray:
    return dist.mean + dist.std * rng.standard_normal(dist.mean.shape)


def chunk_log_prob(mean: Tensor, log_sd: Tensor, action) -> Tensor:
    """Exact diagonal-normal log-density, summed over the last axis.

    Actions are scored before any execution-time clipping.
    """
    a = action if isinstance(action, Tensor) else nx.tensor(action)
    z = (a - mean) / log_sd.exp()
    n = mean.shape[-1]
    return (z * z).sum(axis=-1) * -0.5 - log_sd.sum() - 0.5 * n * _LOG_2PI


def chunk_kl(mean_p: Tensor, log_sd_p: Tensor, mean_q, log_sd_q) -> Tensor:
    """KL(p || q) between diagonal normals, summed over the last axis."""
    mean_q = mean_q if isinstance(mean_q, Tensor) else nx.tensor(mean_q)
    log_sd_q = log_sd_q if isinstance(log_sd_q, Tensor) else nx.tensor(log_sd_q)
    var_ratio = (log_sd_p * 2.0 - log_sd_q * 2.0).exp()
    diff = (mean_p - mean_q) / log_sd_q.exp()
    per = (log_sd_q - log_sd_p) + (var_ratio + diff * diff) * 0.5 - 0.5
    return per.sum(axis=-1)


def bc_loss(means: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked mean squared error between chunk means and demonstrated blocks.

    ``mask`` is 1 on real action coordinates and 0 on the zero padding that
    completes a final partial block or a short sequence.
    """
    m = np.asarray(mask, dtype=np.float64)
    n = m.sum()
    if n == 0:
        raise ValueError("bc_loss needs at least one unmasked coordinate")
    d = (means - targets) * m
    return (d * d).sum() * (1.0 / n)


def action_blocks(actions: np.ndarray, horizon: int, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Split ``actions[offset:]`` into H-step blocks, zero padding the last one.

    Returns ``(blocks, mask)``, each of shape (n_blocks, H*a_dim).
    """
    acts = np.asarray(actions, dtype=np.float64)[offset:]
    n = -(-len(acts) // horizon)
    a_dim = acts.shape[1]
    blocks = np.zeros((n, horizon, a_dim))
    mask = np.zeros((n, horizon, a_dim))
    for j in range(n):
        part = acts[j * horizon:(j + 1) * horizon]
        blocks[j, :len(part)] = part
        mask[j, :len(part)] = 1.0
    return blocks.reshape(n, -1), mask.reshape(n, -1)
