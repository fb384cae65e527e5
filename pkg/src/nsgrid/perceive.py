"""Frozen, deterministic feature encoders.

``encode_tokens`` stands in for a pretrained vision-language token encoder and
``shaping_encode`` for the frozen latent encoder used by the reward potential.
Neither has trainable parameters; all matrices are drawn once from a seeded
generator.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .env import PROPRIO_DIM, Observation
from .numerics import LN_EPS
from .vocab import ENTITY_IDS, N_CELL_CODES

N_POS = 4           # per axis: sin and cos
N_REL = 4           # per axis: clipped offset from the gripper and a one-cell bump
N_HASH_BUCKETS = 32


def _layer_norm(x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    xc = x - x.mean(axis=-1, keepdims=True)
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)


def _embedding_matrix(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    """Isometric when ``n_out >= n_in`` (orthonormal columns), Gaussian otherwise."""
    if n_out >= n_in:
        q, _ = np.linalg.qr(rng.standard_normal((n_out, n_in)))
        return q.T.copy()
    return rng.standard_normal((n_in, n_out)) / np.sqrt(n_out)


def position_code(size: int) -> np.ndarray:
    """(size*size, 4) codes for cells in row-major ``x * size + y`` order."""
    u = np.arange(size) / (size - 1)
    axis = np.stack([np.sin(np.pi * u / 2), np.cos(np.pi * u / 2)], axis=-1)
    xs, ys = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return np.concatenate([axis[xs.ravel()], axis[ys.ravel()]], axis=-1)


def egocentric_code(offset: np.ndarray) -> np.ndarray:
    """Per axis: the offset clipped to one cell and max(0, 1 - |offset|)."""
    return np.concatenate([np.clip(offset, -1.0, 1.0), np.maximum(0.0, 1.0 - np.abs(offset))], axis=-1)


def word_hash(word: str, seed: int) -> int:
    """Platform-independent 64-bit keyed hash."""
    key = seed.to_bytes(8, "little", signed=False)
    return int.from_bytes(hashlib.blake2b(word.encode(), digest_size=8, key=key).digest(), "little")


class Featurizer:
    """Token grid, pooled feature and shaping latent for ManipGrid observations."""

    def __init__(self, size: int = 8, d_psi: int = 32, d_instr: int = 5, d_latent: int = 16,
                 seed: int = 1234):
        if d_instr >= d_psi:
            raise ValueError("instruction slice must be narrower than the token")
        self.size, self.d_psi, self.d_instr, self.d_latent, self.seed = size, d_psi, d_instr, d_latent, seed
        rng = np.random.default_rng(seed)
        d_scene = d_psi - d_instr
        self.pos = position_code(size)
        xs, ys = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        self._cells = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)
        self.p_scene = _embedding_matrix(rng, N_CELL_CODES + N_POS + N_REL, d_scene)
        self.p_prop = _embedding_matrix(rng, PROPRIO_DIM + 1, d_scene)
        self.p_instr = rng.standard_normal((N_HASH_BUCKETS, d_instr)) / np.sqrt(d_instr)
        d_flat = size * size * N_CELL_CODES + PROPRIO_DIM
        self.w_latent = rng.standard_normal((d_flat, d_latent)) / 4.0
        self.b_latent = 0.1 * rng.standard_normal(d_latent)
        self._instr_cache: dict[str, np.ndarray] = {}

    @property
    def n_tokens(self) -> int:
        return self.size * self.size + 1

    def entity_directions(self) -> np.ndarray:
        """(n_entities, d_psi) token-space direction of each entity's presence in a cell."""
        out = np.zeros((len(ENTITY_IDS), self.d_psi))
        out[:, :self.d_psi - self.d_instr] = self.p_scene[:len(ENTITY_IDS)]
        return out

    def instruction_code(self, instruction: str) -> np.ndarray:
        code = self._instr_cache.get(instruction)
        if code is None:
            words = instruction.lower().split()
            bow = np.zeros(N_HASH_BUCKETS)
            for w in words:
                h = word_hash(w, self.seed)
                bow[h % N_HASH_BUCKETS] += 1.0 if (h >> 63) & 1 else -1.0
            code = (bow / np.sqrt(max(len(words), 1))) @ self.p_instr
            self._instr_cache[instruction] = code
        return code

    def encode_tokens(self, obs: Observation, instruction: str) -> np.ndarray:
        """(N, d_psi) tokens: one per cell plus a final proprioception token.

        Each cell token carries its content, its position and its offset from the
        gripper in cells. The last ``d_instr`` columns hold the instruction code and are the
        only columns that depend on the instruction.
        """
        cells = obs.image_features.reshape(self.size * self.size, N_CELL_CODES)
        rel = egocentric_code(self._cells - obs.proprio[:2] * (self.size - 1))
        scene = np.concatenate([cells, self.pos, rel], axis=1) @ self.p_scene
        prop = np.append(obs.proprio, 1.0) @ self.p_prop
        scene = np.vstack([scene, prop[None, :]])
        instr = np.broadcast_to(self.instruction_code(instruction), (scene.shape[0], self.d_instr))
        return np.concatenate([scene, instr], axis=1)

    def shaping_encode(self, obs: Observation) -> np.ndarray:
        x = np.concatenate([obs.image_features.ravel(), obs.proprio])
        return np.tanh(x @ self.w_latent + self.b_latent)


def pool(tokens: np.ndarray) -> np.ndarray:
    """Mean over tokens followed by layer normalization.

    Each column is summed in sorted order, so the result is bitwise invariant to
    any permutation of the tokens.
    """
    mean = np.sort(tokens, axis=0).sum(axis=0) / tokens.shape[0]
    return _layer_norm(mean)
