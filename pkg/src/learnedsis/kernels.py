"""Backend selection for the batched small-matrix kernels.

The compiled extension is used when it is importable; setting
``LEARNEDSIS_PURE_PYTHON=1`` forces the NumPy fallback. Both backends expose
the same functions, so callers never branch on :data:`BACKEND`.
"""

import os

from . import _kernels_py as python_backend

if os.environ.get("LEARNEDSIS_PURE_PYTHON", "") not in ("", "0"):
    _impl = python_backend
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = python_backend
        BACKEND = "python"

cholesky_batched = _impl.cholesky_batched
cholesky_backward_batched = _impl.cholesky_backward_batched
solve_lower_batched = _impl.solve_lower_batched
solve_lower_transpose_batched = _impl.solve_lower_transpose_batched
lower_matvec_batched = _impl.lower_matvec_batched
gaussian_gram_batched = _impl.gaussian_gram_batched
adam_update = _impl.adam_update


def compiled_backend():
    """Return the compiled kernel module, or ``None`` if it is unavailable."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
