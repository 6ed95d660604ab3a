"""Exact t-SNE (no tree approximation) for visualizing model embeddings.

Small-n only: O(n^2) affinities, binary-searched per-point bandwidths, early
exaggeration, momentum with per-coordinate gains, and an objective trace so
tests can assert the KL actually decreases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EPS = 1e-12


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.perplexity <= 1.0:
            raise ValueError("perplexity must exceed 1")
        if self.iterations <= self.exaggeration_iters:
            raise ValueError("iterations must exceed the exaggeration phase")
        if self.exaggeration < 1.0:
            raise ValueError("exaggeration factor must be >= 1")


def _entropy_probs(dist_row: np.ndarray, beta: float):
    """Shannon entropy (nats) and conditional probabilities for one point."""
    p = np.exp(-dist_row * beta)
    s = p.sum()
    if s <= 0:
        return 0.0, np.zeros_like(p)
    p = p / s
    nz = p > 0
    h = -np.sum(p[nz] * np.log(p[nz]))
    return h, p


def conditional_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-5,
                           max_iter: int = 60) -> np.ndarray:
    """Per-point bandwidths found by binary search so each row's perplexity
    matches the target."""
    n = x.shape[0]
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    target = np.log(perplexity)
    p_cond = np.zeros((n, n))
    for i in range(n):
        row = np.delete(d2[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            h, p = _entropy_probs(row, beta)
            if abs(h - target) < tol:
                break
            if h > target:  # too spread out -> sharpen
                lo = beta
                beta = beta * 2.0 if np.isinf(hi) else 0.5 * (lo + hi)
            else:
                hi = beta
                beta = beta / 2.0 if lo == 0.0 else 0.5 * (lo + hi)
        p_cond[i, np.arange(n) != i] = p
    return p_cond


def joint_affinities(x: np.ndarray, perplexity: float) -> np.ndarray:
    n = x.shape[0]
    pc = conditional_affinities(x, perplexity)
    p = (pc + pc.T) / (2.0 * n)
    return np.maximum(p, _EPS)


def _low_dim_q(y: np.ndarray):
    sq = np.sum(y * y, axis=1)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2.0 * (y @ y.T), 0.0))
    np.fill_diagonal(num, 0.0)
    q = num / num.sum()
    return np.maximum(q, _EPS), num


def kl_objective(p: np.ndarray, y: np.ndarray) -> float:
    q, _ = _low_dim_q(y)
    mask = ~np.eye(p.shape[0], dtype=bool)
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


@dataclass
class TsneResult:
    coords: np.ndarray  # (n, 2), zero-mean
    objective_trace: np.ndarray  # KL(P||Q) per iteration, unexaggerated P


def tsne(embeddings: np.ndarray, cfg: TsneConfig) -> TsneResult:
    """Reduce (n, d) embeddings to centered 2-D coordinates.

    Deterministic per cfg.seed. The returned trace holds the objective
    against the true (unexaggerated) affinities at every iteration.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be 2-D (n, d)")
    n = x.shape[0]
    if n < 10:
        raise ValueError("need at least 10 points")
    if not np.isfinite(x).all():
        raise ValueError("embeddings contain non-finite values")
    if cfg.perplexity >= (n - 1) / 3.0:
        raise ValueError(
            f"perplexity {cfg.perplexity} infeasible for n={n}; need < (n-1)/3"
        )

    p_true = joint_affinities(x, cfg.perplexity)
    rng = np.random.default_rng(cfg.seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    y -= y.mean(axis=0)
    inc = np.zeros_like(y)
    gains = np.ones_like(y)
    trace = np.empty(cfg.iterations)

    for it in range(cfg.iterations):
        p = p_true * cfg.exaggeration if it < cfg.exaggeration_iters else p_true
        q, num = _low_dim_q(y)
        pq = (p - q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
        momentum = cfg.momentum_early if it < cfg.exaggeration_iters else cfg.momentum_late
        flips = np.sign(grad) != np.sign(inc)
        gains = np.where(flips, gains + 0.2, gains * 0.8)
        np.clip(gains, 0.01, None, out=gains)
        inc = momentum * inc - cfg.learning_rate * gains * grad
        y = y + inc
        y -= y.mean(axis=0)  # keep translation-centered every iteration
        trace[it] = kl_objective(p_true, y)

    return TsneResult(coords=y, objective_trace=trace)


def tsne_to_csv(coords: np.ndarray, labels: np.ndarray, ids: list[str]) -> str:
    lines = ["id,x,y,consensus"]
    for sid, (cx, cy), lab in zip(ids, coords, labels):
        lines.append(f"{sid},{cx:.9f},{cy:.9f},{int(lab)}")
    return "\n".join(lines) + "\n"
