"""Hot-loop kernels, compiled when available.

The GRU time recurrence dominates training cost. ``ratlab._gru_ext`` is the
Cython build; ``ratlab._gru_py`` is the numpy fallback. Set
``RATLAB_PURE_PYTHON=1`` to force the fallback.
"""
import os

from ratlab import _gru_py

BACKEND = "python"
_impl = _gru_py

if os.environ.get("RATLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ratlab import _gru_ext as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _gru_py


def gru_forward(gx, U):
    return _impl.gru_forward(gx, U)


def gru_backward(dhs, U, hs, z, r, n):
    return _impl.gru_backward(dhs, U, hs, z, r, n)


def use(backend: str) -> None:
    """Switch backend at runtime ("cython" or "python"); used by benchmarks and tests."""
    global _impl, BACKEND
    if backend == "python":
        _impl, BACKEND = _gru_py, "python"
    elif backend == "cython":
        from ratlab import _gru_ext
        _impl, BACKEND = _gru_ext, "cython"
    else:
        raise ValueError(f"unknown backend {backend!r}")
