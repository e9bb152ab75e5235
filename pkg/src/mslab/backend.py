"""Kernel backend selection.

The stepping kernels exist twice: numba-jitted scalar loops and a pure-numpy
vectorized fallback.  ``MSLAB_BACKEND`` picks one explicitly (``numba`` or
``numpy``); unset/``auto`` means numba when importable.  ``MSLAB_THREADS``
caps the numba thread pool (the shipped kernels are single-threaded, the cap
is applied for anything numba parallelizes internally).
"""

from __future__ import annotations

import math
import os

from .errors import ValidationError

_NUMBA_MOD = None  # module, or False when import failed
_THREADS_APPLIED = False


def _numba():
    global _NUMBA_MOD
    if _NUMBA_MOD is None:
        try:
            import numba

            _NUMBA_MOD = numba
        except ImportError:  # pragma: no cover - exercised on numba-free installs
            _NUMBA_MOD = False
    return _NUMBA_MOD


def backend_name() -> str:
    choice = os.environ.get("MSLAB_BACKEND", "auto").strip().lower() or "auto"
    if choice not in ("auto", "numba", "numpy"):
        raise ValidationError(f"MSLAB_BACKEND must be auto|numba|numpy, got {choice!r}")
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if not _numba():
            raise ValidationError("MSLAB_BACKEND=numba but numba is not importable")
        return "numba"
    return "numba" if _numba() else "numpy"


def use_numba() -> bool:
    return backend_name() == "numba"


def apply_thread_cap() -> None:
    """Honor MSLAB_THREADS for the numba thread pool (idempotent)."""
    global _THREADS_APPLIED
    if _THREADS_APPLIED or not use_numba():
        return
    cap = os.environ.get("MSLAB_THREADS")
    if cap:
        numba = _numba()
        try:
            n = max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS))
            numba.set_num_threads(n)
        except ValueError as exc:
            raise ValidationError(f"MSLAB_THREADS must be an integer, got {cap!r}") from exc
    _THREADS_APPLIED = True


def njit_compile(fn):
    """jit ``fn`` under the numba backend; return it unchanged otherwise."""
    if use_numba():
        apply_thread_cap()
        return _numba().njit(cache=False)(fn)
    return fn


def _sign_py(v):
    return 0.0 if v == 0.0 else math.copysign(1.0, v)


_SIGN_JIT = None


def scalar_sign():
    """Scalar sign() usable inside generated coefficient code."""
    global _SIGN_JIT
    if use_numba():
        if _SIGN_JIT is None:
            _SIGN_JIT = _numba().njit(cache=False)(_sign_py)
        return _SIGN_JIT
    return _sign_py
