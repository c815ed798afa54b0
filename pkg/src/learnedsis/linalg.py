"""Dense linear algebra and Gaussian-density helpers.

Matrices and vectors are plain float64 NumPy arrays. The only structured
type is :class:`CholeskyFactor`, which remembers how much diagonal jitter was
needed to factor its input.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels
from .errors import DimensionMismatch, JitterCapExceeded, NotSymmetric

LOG_2PI = float(np.log(2.0 * np.pi))

# Relative jitter used for learned covariances: base = REL_JITTER * trace / n.
REL_JITTER = 1e-6
# Escalation never goes past CAP_FRACTION * trace / n.
CAP_FRACTION = 1e-2
# First positive jitter tried when a factorization at zero jitter fails.
FLOOR_FRACTION = 1e-12


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def dim(self):
        return self.lower.shape[0]

    def log_det(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


def _scale(trace, n):
    return max(float(trace) / n, 0.0)


def cholesky(m, base_jitter=0.0):
    """Lower Cholesky factor of ``m + jitter * I``.

    The jitter starts at ``base_jitter`` and grows by factors of ten until the
    factorization succeeds. It is capped at ``1e-2 * trace(m) / dim``; going
    past the cap raises :class:`JitterCapExceeded`.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {m.shape}")
    tol = 1e-10 * max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if np.max(np.abs(m - m.T), initial=0.0) > tol:
        raise NotSymmetric("matrix is not symmetric within 1e-10")
    n = m.shape[0]
    scale = _scale(np.trace(m), n)
    L, jitter, status = kernels.cholesky_batched(
        m[None],
        np.array([float(base_jitter)]),
        np.array([max(FLOOR_FRACTION * scale, np.finfo(float).tiny)]),
        np.array([max(CAP_FRACTION * scale, float(base_jitter))]),
    )
    if status[0]:
        raise JitterCapExceeded(
            f"cholesky failed up to jitter cap {CAP_FRACTION * scale:.3g}"
        )
    return CholeskyFactor(L[0], float(jitter[0]))


def cholesky_relative(stack, rel_jitter=REL_JITTER):
    """Factor a stack ``(B, n, n)`` with base jitter ``rel_jitter * trace/n``.

    Returns ``(L, jitter_factor)`` where ``jitter_factor[b]`` is the jitter used
    divided by ``trace(stack[b]) / n``, so ``L L^T = S + factor * tr(S)/n * I``.
    """
    stack = np.asarray(stack, dtype=np.float64)
    n = stack.shape[-1]
    scale = np.trace(stack, axis1=1, axis2=2) / n
    safe = np.where(scale > 0.0, scale, 1.0)
    L, jitter, status = kernels.cholesky_batched(
        stack,
        rel_jitter * scale,
        FLOOR_FRACTION * safe,
        CAP_FRACTION * np.maximum(scale, 0.0),
    )
    if np.any(status):
        bad = int(np.flatnonzero(status)[0])
        raise JitterCapExceeded(
            f"cholesky of stacked matrix {bad} failed up to jitter cap "
            f"{CAP_FRACTION * scale[bad]:.3g}"
        )
    return L, jitter / safe


def spectral_norm(m, max_iter=200, rtol=1e-12):
    """Largest singular value by power iteration on ``m^T m``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"spectral_norm needs a square matrix, got {m.shape}")
    n = m.shape[0]
    if n == 0 or not np.any(m):
        return 0.0
    gram = m.T @ m
    # Deterministic, generic start vector.
    v = 1.0 + np.arange(n, dtype=np.float64) / (n + 1.0)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = gram @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # Start vector in the null space; restart from a coordinate.
            v = np.zeros(n)
            v[int(np.argmax(np.sum(gram * gram, axis=0)))] = 1.0
            continue
        v = w / nw
        new = float(v @ gram @ v)
        if est > 0.0 and abs(new - est) <= rtol * new:
            est = new
            break
        est = new
    return float(np.sqrt(max(est, 0.0)))


def mvn_log_density(x, mean, chol):
    """Log density of ``N(mean, L L^T)`` at ``x`` via a triangular solve."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    L = chol.lower if isinstance(chol, CholeskyFactor) else np.asarray(chol)
    if x.shape != mean.shape or L.shape != (x.size, x.size):
        raise DimensionMismatch(
            f"dims disagree: x {x.shape}, mean {mean.shape}, factor {L.shape}"
        )
    u = kernels.solve_lower_batched(L[None], (x - mean)[None])[0]
    return float(-0.5 * u @ u - np.sum(np.log(np.diag(L))) - 0.5 * x.size * LOG_2PI)


def mvn_log_density_rows(X, mean, L):
    """Row-wise log density for ``X`` of shape ``(K, n)``.

    ``mean`` is either one vector or one row per particle; ``L`` is a single
    shared factor.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[-1]
    diff = X - mean
    U = solve_triangular(L, diff.T, lower=True).T if n else diff
    return (
        -0.5 * np.sum(U * U, axis=-1)
        - np.sum(np.log(np.diag(L)))
        - 0.5 * n * LOG_2PI
    )


def sample_mvn(mean, chol, rng):
    """Draw ``mean + L eta`` and return ``(sample, eta)``."""
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    L = chol.lower if isinstance(chol, CholeskyFactor) else np.asarray(chol)
    if L.shape != (mean.size, mean.size):
        raise DimensionMismatch(f"factor {L.shape} does not match mean {mean.shape}")
    eta = np.asarray(rng.standard_normal(mean.size), dtype=np.float64)
    return mean + L @ eta, eta


def random_covariance(dim, target_spectral_norm, rng):
    """Random ``G G^T`` rescaled to the requested spectral norm."""
    if target_spectral_norm <= 0:
        raise ValueError("target_spectral_norm must be positive")
    G = rng.standard_normal((dim, dim))
    S = G @ G.T
    S = 0.5 * (S + S.T)
    return S * (target_spectral_norm / spectral_norm(S))


def symmetric_inverse(m):
    """Inverse of a symmetric positive-definite matrix, symmetrized."""
    L = np.linalg.cholesky(m)
    Linv = np.linalg.solve(L, np.eye(m.shape[0]))
    inv = Linv.T @ Linv
    return 0.5 * (inv + inv.T)
