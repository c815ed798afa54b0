"""Pure NumPy implementations of the batched small-matrix kernels.

Every function mirrors the compiled version in ``_kernels.pyx`` argument for
argument. Stacks are laid out as ``(B, n, n)`` matrices and ``(B, n)``
vectors, float64, C-contiguous.
"""

import numpy as np


def _try_cholesky(m):
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return None


def cholesky_batched(S, base, floor, cap):
    """Factor every ``S[b] + j_b I`` with geometric jitter escalation.

    Returns ``(L, jitter, status)``; ``status[b]`` is 0 on success and 1 when
    the jitter would exceed ``cap[b]``.
    """
    S = np.asarray(S, dtype=np.float64)
    B, n, _ = S.shape
    L = np.zeros_like(S)
    jitter = np.array(base, dtype=np.float64, copy=True)
    status = np.zeros(B, dtype=np.int64)
    eye = np.eye(n)

    # Fast path: the whole stack at its base jitter.
    whole = _try_cholesky(S + jitter[:, None, None] * eye)
    if whole is not None and np.all(np.isfinite(whole)):
        return whole, jitter, status

    for b in range(B):
        j = jitter[b]
        while True:
            fac = _try_cholesky(S[b] + j * eye)
            if fac is not None and np.all(np.isfinite(fac)):
                L[b] = fac
                jitter[b] = j
                break
            j = j * 10.0 if j > 0.0 else floor[b]
            if j > cap[b] or not np.isfinite(j):
                status[b] = 1
                jitter[b] = j
                break
    return L, jitter, status


def solve_lower_batched(L, rhs):
    """``L[b]^{-1} rhs[b]`` for lower-triangular ``L``."""
    L = np.asarray(L, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    B, n, _ = L.shape
    out = np.empty_like(rhs)
    for i in range(n):
        acc = rhs[:, i] - np.einsum("bj,bj->b", L[:, i, :i], out[:, :i])
        out[:, i] = acc / L[:, i, i]
    return out


def solve_lower_transpose_batched(L, rhs):
    """``L[b]^{-T} rhs[b]`` for lower-triangular ``L``."""
    L = np.asarray(L, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    B, n, _ = L.shape
    out = np.empty_like(rhs)
    for i in range(n - 1, -1, -1):
        acc = rhs[:, i] - np.einsum("bj,bj->b", L[:, i + 1:, i], out[:, i + 1:])
        out[:, i] = acc / L[:, i, i]
    return out


def lower_matvec_batched(L, v):
    """``L[b] v[b]`` using only the lower triangle of ``L``."""
    return np.einsum("bij,bj->bi", np.tril(L), v)


def cholesky_backward_batched(L, Lbar):
    """Adjoint of the Cholesky factorization, returned symmetric.

    With ``P = Phi(L^T Lbar)`` (lower triangle, halved diagonal) the input
    adjoint is ``sym(L^{-T} P L^{-1})``.
    """
    L = np.asarray(L, dtype=np.float64)
    Lbar = np.tril(np.asarray(Lbar, dtype=np.float64))
    P = np.tril(np.einsum("bki,bkj->bij", L, Lbar))
    idx = np.arange(L.shape[1])
    P[:, idx, idx] *= 0.5
    Linv = np.linalg.inv(L)
    S = np.einsum("bki,bkl,blj->bij", Linv, P, Linv)
    return 0.5 * (S + np.transpose(S, (0, 2, 1)))


def gaussian_gram_batched(z):
    """``D[b, i, j] = exp(-(z[b, i] - z[b, j])**2)``."""
    z = np.asarray(z, dtype=np.float64)
    diff = z[:, :, None] - z[:, None, :]
    return np.exp(-diff * diff)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, corr1, corr2):
    """Fused in-place ADAM step on flat float64 arrays."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    if lr != 0.0:
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
