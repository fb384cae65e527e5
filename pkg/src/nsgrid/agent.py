"""Parameter bundle of the hierarchical policy and the decision-token pipeline.

The trainable parameters live in one flat dict with ``cls.``, ``sp.`` and
``sol.`` prefixes (classifier, sparsifier, solver). The featurizer is frozen
and shared.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import classifier, solver, sparsifier
from . import numerics as nx
from .env import A_DIM, PROPRIO_DIM
from .numerics import Tensor
from .perceive import Featurizer
from .plan import Primitive

GROUPS = ("cls", "sp", "sol")


@dataclass(frozen=True)
class ModelConfig:
    grid: int = 8
    d_psi: int = 32
    d_instr: int = 5
    d_latent: int = 16
    featurizer_seed: int = 1234
    cls_hidden: int = 64
    d_embed: int = 16
    d_query: int = 32
    d_context: int = 32
    top_k: int = 8
    temperature: float = 0.01
    grounding: float = 5.0
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    horizon: int = 4
    init_log_std: float = -2.5
    sparsify: bool = True

    def __post_init__(self):
        n_tokens = self.grid * self.grid + 1
        if not 1 <= self.top_k <= n_tokens:
            raise ValueError(f"top_k must lie in [1, {n_tokens}]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def d_token(self) -> int:
        return self.d_context + self.d_query + PROPRIO_DIM

    @property
    def solver_shape(self) -> solver.SolverShape:
        return solver.SolverShape(d_in=self.d_token, d_model=self.d_model, n_layers=self.n_layers,
                                  n_heads=self.n_heads, horizon=self.horizon, a_dim=A_DIM)


class Agent:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.featurizer = Featurizer(cfg.grid, cfg.d_psi, cfg.d_instr, cfg.d_latent,
                                     cfg.featurizer_seed)
        rng = np.random.default_rng(seed)
        parts = {
            "cls": classifier.init_params(cfg.d_psi, cfg.cls_hidden, rng),
            "sp": sparsifier.init_params(cfg.d_psi, cfg.d_embed, cfg.d_query, cfg.d_context, rng,
                                         self.featurizer.entity_directions(), cfg.grounding),
            "sol": solver.init_params(cfg.solver_shape, rng, cfg.init_log_std),
        }
        self.params: dict[str, Tensor] = {f"{g}.{k}": v for g, d in parts.items() for k, v in d.items()}
        for name, p in self.params.items():
            p.name = name

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Views (same tensor objects) of one parameter group with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    @property
    def shape(self) -> solver.SolverShape:
        return self.cfg.solver_shape

    def copy(self) -> "Agent":
        """Independent deep copy of the trainable parameters; the featurizer is shared."""
        other = copy.copy(self)
        other.params = {k: nx.param(v.data.copy(), k) for k, v in self.params.items()}
        return other

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def config_dict(self) -> dict:
        return asdict(self.cfg)

    # pipeline ---------------------------------------------------------------
    def class_log_probs(self, pooled: np.ndarray) -> Tensor:
        return nx.log_softmax(classifier.logits(self.group("cls"), pooled), axis=-1)

    def decision_tokens(self, tokens: np.ndarray, prims: Sequence[Primitive], proprio: np.ndarray,
                        mode: str) -> tuple[Tensor, dict]:
        """Solver tokens e = [c; q; S] for a flat batch of decisions.

        ``tokens`` is (B, N, d_psi), ``proprio`` (B, PROPRIO_DIM); ``mode`` is
        ``"soft"`` or ``"hard"`` and is ignored when sparsification is disabled.
        """
        sp = self.group("sp")
        q = sparsifier.embed_primitive(sp, prims)
        mode = mode if self.cfg.sparsify else "dense"
        c, info = sparsifier.sparsify(sp, q, tokens, mode, self.cfg.top_k, self.cfg.temperature)
        return nx.concat([c, q, nx.tensor(proprio)], axis=-1), info

    def chunk_means(self, e: Tensor) -> Tensor:
        return solver.chunk_means(self.group("sol"), self.shape, e)

    def log_std(self) -> Tensor:
        return solver.log_std(self.group("sol"))


def pad_sequences(flat: Tensor, lengths: Sequence[int]) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Scatter a (sum L, d) tensor into a zero-padded (B, max L, d) batch.

    Returns the batch plus (row, col) index arrays of the valid positions in
    the order of ``flat``.
    """
    lengths = list(lengths)
    n, width = sum(lengths), max(lengths)
    idx = np.full((len(lengths), width), n)
    rows, cols = [], []
    off = 0
    for b, L in enumerate(lengths):
        idx[b, :L] = np.arange(off, off + L)
        rows += [b] * L
        cols += list(range(L))
        off += L
    padded = nx.concat([flat, nx.tensor(np.zeros((1,) + flat.shape[1:]))], axis=0)[idx]
    return padded, np.array(rows), np.array(cols)
