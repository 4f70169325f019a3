"""Power-iteration estimate of the spectral norm of a symmetric matrix.

Used on Gram-matrix residuals W^T W - I, which are symmetric by
construction; for symmetric A the largest singular value equals the
largest absolute eigenvalue, and the ratio ||A^2 v|| / ||A v|| is a lower
bound on it for any v with A v != 0.
"""

from __future__ import annotations

import numpy as np


class DegenerateIterateError(RuntimeError):
    """The matrix annihilated the power iterate; callers treat the norm as 0."""


def _unit_random(n: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal(n)
    return v / np.linalg.norm(v)


def power_iteration_pair(A: np.ndarray, iters: int = 2, seed: int = 0) -> tuple[float, np.ndarray]:
    """Run u <- A v, v <- A u for `iters` rounds.

    Returns (||v|| / ||u|| from the final pair, the final unit-norm u).
    The iterate is renormalized between rounds, which leaves the ratio
    unchanged but avoids overflow at high iteration counts.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"power iteration needs a square matrix, got {A.shape}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    v = _unit_random(A.shape[0], seed)
    sigma = 0.0
    u = v
    for _ in range(iters):
        u = A @ v
        nu = np.linalg.norm(u)
        if nu < 1e-300:
            raise DegenerateIterateError("power iterate vanished")
        u = u / nu
        w = A @ u
        nw = np.linalg.norm(w)
        sigma = nw  # ||A u|| / ||u|| with u unit-norm
        if nw < 1e-300:
            return 0.0, u
        v = w / nw
    return float(sigma), u


def spectral_norm_estimate(A: np.ndarray, iters: int = 2, seed: int = 0) -> float:
    """Estimated largest singular value of symmetric A; deterministic per seed."""
    sigma, _ = power_iteration_pair(A, iters=iters, seed=seed)
    return sigma
