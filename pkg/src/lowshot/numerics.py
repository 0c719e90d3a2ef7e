"""Small deterministic numerics: stable softmax, cosine similarity,
power iteration, and tie-stable top-k selection.

All computation is in float64 regardless of input dtype. Ties anywhere
break toward the lowest index so results are reproducible bit-for-bit.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .rng import SeededRng

# Norms below this are treated as "no direction": cosine similarity
# against them is defined to be 0.
ZERO_NORM_TOL = 1e-12


def softmax_stable(logits: np.ndarray) -> np.ndarray:
    """Softmax with max-subtraction; safe for logits up to +-700."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 1:
        raise ValueError("logits must be a non-empty 1-d vector")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax for a 2-d array of logits."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """<u,v> / (|u||v|), or 0 if either vector has (near-)zero norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < ZERO_NORM_TOL or nv < ZERO_NORM_TOL:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


class PowerIterationResult(NamedTuple):
    value: float
    iterations: int
    converged: bool


def power_iteration_max_eig(
    matrix: np.ndarray,
    iters: int = 1000,
    tol: float = 1e-10,
    seed: int = 0,
) -> PowerIterationResult:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    The start vector comes from SeededRng(seed) so runs are repeatable.
    Convergence is declared when the Rayleigh quotient moves by less than
    tol relative per step; if the budget runs out, the best estimate is
    returned with converged=False.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-9):
        raise ValueError("matrix must be symmetric within 1e-9")
    n = a.shape[0]
    rng = SeededRng(seed)
    v = rng.normal((n,))
    norm = np.linalg.norm(v)
    if norm == 0.0:
        v = np.ones(n)
        norm = np.sqrt(n)
    v = v / norm
    lam = 0.0
    for it in range(1, iters + 1):
        w = a @ v
        wnorm = np.linalg.norm(w)
        if wnorm == 0.0:
            # v is in the nullspace; for PSD matrices 0 is then the floor.
            return PowerIterationResult(0.0, it, True)
        lam_next = float(v @ w)
        v = w / wnorm
        if abs(lam_next - lam) <= tol * max(abs(lam_next), 1e-300):
            return PowerIterationResult(lam_next, it, True)
        lam = lam_next
    return PowerIterationResult(lam, iters, False)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties break toward lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("scores must be a 1-d vector")
    if not 1 <= k <= scores.shape[0]:
        raise ValueError(f"k={k} out of range for {scores.shape[0]} scores")
    # Stable sort of -scores keeps the original order among equal scores.
    return np.argsort(-scores, kind="stable")[:k]


def top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top_k_indices for a 2-d score array."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k={k} out of range for {scores.shape[1]} scores")
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]
