"""Numerical backend selection for the hot kernels.

All performance-critical code lives in :mod:`platoonlab._kernels` and is
written once in vectorized numpy style. When numba is installed the
kernels are compiled in nopython mode; otherwise (or when forced) they
run as plain numpy functions.

Set the environment variable ``PLATOONLAB_BACKEND`` to

* ``numba`` to require JIT compilation (import fails if numba is absent),
* ``numpy`` to force the pure-numpy fallback path,
* unset / empty to auto-detect (numba when importable).

``benchmarks/bench_backends.py`` compares the two paths on the same
workloads.
"""

import os

ENV_VAR = "PLATOONLAB_BACKEND"

NUMBA_OPTS = {"cache": True}


def _resolve() -> str:
    choice = os.environ.get(ENV_VAR, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(
            f"{ENV_VAR} must be 'numba' or 'numpy', got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise ImportError(f"{ENV_VAR}=numba but numba is not importable")
        return "numpy"
    return "numba"


BACKEND = _resolve()

if BACKEND == "numba":
    import numba

    def njit(func):
        """Compile ``func`` in nopython mode with on-disk caching."""
        return numba.njit(func, **NUMBA_OPTS)

else:

    def njit(func):
        """Identity decorator: the fallback runs ``func`` as plain numpy."""
        return func
