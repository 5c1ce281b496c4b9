"""Kernel backend selection.

The hot convolution loops ship in two flavours: numba ``@njit`` kernels and a
vectorised pure-numpy path.  ``LDCSF_BACKEND=numpy`` forces the fallback;
the default is ``numba`` whenever it imports cleanly.
"""

import os

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    HAS_NUMBA = False

BACKENDS = ("numba", "numpy")


def _initial_backend():
    requested = os.environ.get("LDCSF_BACKEND", "").strip().lower()
    if requested == "numpy":
        return "numpy"
    if requested not in ("", "numba"):
        raise ValueError(f"LDCSF_BACKEND must be one of {BACKENDS}, got {requested!r}")
    return "numba" if HAS_NUMBA else "numpy"


_backend = _initial_backend()


def get_backend():
    return _backend


def set_backend(name):
    """Switch kernels at runtime (used by tests and the benchmark)."""
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    _backend = name


class use_backend:
    """Context manager form of :func:`set_backend`."""

    def __init__(self, name):
        self.name = name
        self._prev = None

    def __enter__(self):
        self._prev = get_backend()
        set_backend(self.name)
        return self

    def __exit__(self, *exc):
        set_backend(self._prev)
        return False
