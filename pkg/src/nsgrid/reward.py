"""Segment-level reward machinery: milestones, prototype potentials and buffers."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class ContractViolation(ValueError):
    """An input broke a structural guarantee (for example a non-monotone pointer trace)."""


def boundary(m_t: int, m_prev: int) -> int:
    return int(m_t != m_prev)


PrototypeBank = Mapping[int, np.ndarray]     # sigma -> (C, d) centers


def potential(latent: np.ndarray, sigma: int, bank: PrototypeBank, terminal: bool = False) -> float:
    """Negated distance to the nearest prototype of segment ``sigma``.

    Zero at an absorbing terminal state or when the bank has no entry for ``sigma``.
    """
    if terminal:
        return 0.0
    centers = bank.get(sigma)
    if centers is None or len(centers) == 0:
        return 0.0
    d = np.linalg.norm(np.asarray(centers) - np.asarray(latent), axis=1)
    return -float(d.min())


def shaped_reward(r_task: float, b: int, phi_t: float, phi_next: float, gamma: float,
                  lam_seg: float, lam_prog: float) -> float:
    return r_task + lam_seg * b + lam_prog * (gamma * phi_next - phi_t)


@dataclass
class Segment:
    sigma: int
    start: int
    end: int                 # inclusive decision index
    summary: np.ndarray | None = None

    def __len__(self) -> int:
        return self.end - self.start + 1


def parse_segments(trace: Sequence[int], latents: np.ndarray | None = None,
                   monotone: bool = True) -> list[Segment]:
    """Maximal constant-index runs of a pointer trace, with mean latents as summaries.

    Raises :class:`ContractViolation` on a trace that moves backwards or skips
    ahead, unless ``monotone`` is false.
    """
    trace = [int(m) for m in trace]
    if not trace:
        return []
    if monotone:
        for t in range(1, len(trace)):
            if trace[t] - trace[t - 1] not in (0, 1):
                raise ContractViolation(
                    f"pointer moved {trace[t - 1]} -> {trace[t]} at decision {t}")
    segs: list[Segment] = []
    start = 0
    for t in range(1, len(trace) + 1):
        if t == len(trace) or trace[t] != trace[start]:
            summary = None
            if latents is not None:
                summary = np.asarray(latents[start:t]).mean(axis=0)
            segs.append(Segment(trace[start], start, t - 1, summary))
            start = t
    return segs


def eligible_segments(segments: Sequence[Segment], r_task: Sequence[float],
                      success: bool) -> list[Segment]:
    """Segments that closed on a boundary with positive task reward at their end.

    The last segment has no trailing boundary; it qualifies when the episode
    succeeded and its end step was rewarded.
    """
    out = []
    for i, seg in enumerate(segments):
        closed = i + 1 < len(segments) or success
        if closed and r_task[seg.end] > 0:
            out.append(seg)
    return out


@dataclass
class SegmentBuffers:
    """Per-segment FIFO stores of successful segment summaries."""
    cap: int = 64
    store: dict[int, deque] = field(default_factory=dict)

    def __post_init__(self):
        if self.cap < 1:
            raise ValueError("buffer capacity must be positive")

    def insert(self, sigma: int, summary: np.ndarray) -> None:
        buf = self.store.setdefault(sigma, deque(maxlen=self.cap))
        buf.append(np.array(summary, dtype=np.float64))

    def update(self, segments: Sequence[Segment], r_task: Sequence[float], success: bool) -> int:
        """Insert every eligible segment; returns the number of insertions."""
        chosen = eligible_segments(segments, r_task, success)
        for seg in chosen:
            if seg.summary is None:
                raise ValueError("segment has no summary latent")
            self.insert(seg.sigma, seg.summary)
        return len(chosen)

    def sizes(self, m_max: int) -> list[int]:
        return [len(self.store.get(s, ())) for s in range(1, m_max + 1)]

    def __getitem__(self, sigma: int) -> list[np.ndarray]:
        return list(self.store.get(sigma, ()))


def kmeans(x: np.ndarray, k: int, seed: int = 0, iters: int = 50) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns (k, d) centers.

    Empty clusters keep their previous center.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.integers(n) if total == 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
    c = np.array(centers)
    for _ in range(iters):
        assign = np.argmin(((x[:, None, :] - c[None]) ** 2).sum(-1), axis=1)
        new = c.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        if np.array_equal(new, c):
            break
        c = new
    return c


def refresh_prototypes(buffers: SegmentBuffers, n_clusters: int, seed: int = 0,
                       previous: PrototypeBank | None = None) -> dict[int, np.ndarray]:
    """Cluster each segment buffer into ``n_clusters`` prototypes.

    Buffers with fewer entries than ``n_clusters`` use their raw summaries.
    When every buffer is empty the previous bank is returned unchanged.
    """
    if not any(len(b) for b in buffers.store.values()):
        return dict(previous or {})
    bank = {}
    for sigma in sorted(buffers.store):
        data = np.array(buffers.store[sigma])
        if len(data) == 0:
            continue
        if len(data) < n_clusters:
            bank[sigma] = data.copy()
        else:
            bank[sigma] = kmeans(data, n_clusters, seed=seed + sigma)
    return bank
