"""Linear algebra and random-sampling primitives shared by the optimizers."""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "DecompositionError",
    "make_rng",
    "spawn_rngs",
    "sample_ball",
    "cholesky",
    "repair_covariance",
    "gaussian_log_density",
]


class DecompositionError(np.linalg.LinAlgError):
    """Raised when a matrix that must be positive definite is not."""


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Counter-based generator (Philox); equal seeds give equal streams on every platform."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent child generators, so results do not depend on scheduling order."""
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [make_rng(child) for child in children]


def sample_ball(center, eps: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw points uniformly from the closed Euclidean ball ``B(center, eps)``.

    Direction is uniform on the sphere and the radius is ``eps * u**(1/n)``,
    which stays exact in any dimension (rejection sampling does not).

    Parameters
    ----------
    center : array_like, shape (n,)
    eps : float
        Ball radius, must be non-negative.
    rng : numpy.random.Generator
    size : int, optional
        Number of points. ``None`` returns a single point of shape ``(n,)``.
    """
    center = np.asarray(center, dtype=float)
    if center.ndim != 1 or center.size < 1:
        raise ValueError("center must be a non-empty vector")
    if not np.isfinite(eps) or eps < 0:
        raise ValueError(f"eps must be a finite non-negative number, got {eps!r}")
    n = center.size
    count = 1 if size is None else int(size)
    if eps == 0:
        out = np.repeat(center[None, :], count, axis=0)
        return out[0] if size is None else out

    direction = rng.standard_normal((count, n))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    # a zero draw has probability zero, but guard the division anyway
    norms[norms == 0] = 1.0
    direction /= norms
    radius = eps * rng.random((count, 1)) ** (1.0 / n)
    step = direction * radius
    # rounding can push |step| a hair past eps
    lengths = np.linalg.norm(step, axis=1, keepdims=True)
    over = lengths > eps
    if np.any(over):
        step = np.where(over, step * (eps / lengths), step)
    out = center + step
    return out[0] if size is None else out


def _check_square_symmetric(C: np.ndarray) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise DecompositionError("matrix has non-finite entries")
    scale = max(np.max(np.abs(C)), 1.0)
    if np.max(np.abs(C - C.T)) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    return C


def cholesky(C) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == C``.

    Raises
    ------
    DecompositionError
        If ``C`` is not positive definite.
    ValueError
        If ``C`` is not square and symmetric.
    """
    C = _check_square_symmetric(C)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(str(exc)) from exc


def repair_covariance(C) -> np.ndarray:
    """Symmetrize ``C`` and floor its eigenvalues at ``1e-12 * trace(C) / n``."""
    C = np.asarray(C, dtype=float)
    C = 0.5 * (C + C.T)
    n = C.shape[0]
    vals, vecs = np.linalg.eigh(C)
    floor = 1e-12 * max(np.trace(C), np.finfo(float).tiny) / n
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def gaussian_log_density(x, m, sigma: float, C, chol: np.ndarray | None = None) -> np.ndarray:
    """Unnormalized log density ``-(x-m)^T C^{-1} (x-m) / (2 sigma^2)``.

    ``x`` may be a single point or a batch of shape ``(k, n)``. The
    normalization constant is dropped on purpose; callers renormalize.
    A precomputed Cholesky factor of ``C`` can be passed as ``chol``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=float)
    m = np.asarray(m, dtype=float)
    L = cholesky(C) if chol is None else chol
    d = (x - m).T if x.ndim == 2 else (x - m)
    z = solve_triangular(L, d, lower=True, check_finite=False)
    quad = np.sum(z * z, axis=0)
    return -0.5 * quad / sigma**2
