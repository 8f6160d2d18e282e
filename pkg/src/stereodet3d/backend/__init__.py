"""Kernel backend selection.

The compiled Cython extension is preferred when importable; otherwise the
numpy reference implementation is used. ``STEREODET3D_BACKEND`` overrides the
choice (``compiled`` | ``reference`` | ``auto``). Both backends expose the
same callables so callers never branch.

Thread count applies to the compiled kernels only (the reference backend
delegates parallelism to BLAS). Compiled kernels are bit-identical across
thread counts by construction.
"""

import os

import numpy as np

from ..errors import BackendUnavailable
from . import reference

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_num_threads = 1


def set_num_threads(n: int) -> None:
    """Set worker thread count for compiled kernels (clamped to >= 1)."""
    global _num_threads
    _num_threads = max(1, int(n))


def get_num_threads() -> int:
    return _num_threads


class Backend:
    """Uniform facade over one kernel implementation module."""

    def __init__(self, module, name: str):
        self._module = module
        self.name = name

    def conv2d(self, x, w, bias, stride, padding, groups, out):
        self._module.conv2d(x, w, bias, stride, padding, groups, _num_threads, out)

    def correlation_volume(self, left_normed, right_normed, out):
        self._module.correlation_volume(left_normed, right_normed, _num_threads, out)

    def concatenation_volume(self, left, right, out):
        self._module.concatenation_volume(left, right, _num_threads, out)

    def sad_cost_volume(self, left, right, window, search_range, out):
        self._module.sad_cost_volume(left, right, window, search_range, _num_threads, out)

    def __repr__(self):
        return f"Backend({self.name})"


_REFERENCE = Backend(reference, "reference")
_COMPILED = Backend(_compiled, "compiled") if _compiled is not None else None

INT32_INVALID = int(np.iinfo(np.int32).max)


def compiled_available() -> bool:
    return _COMPILED is not None


def get_backend(name: str | None = None) -> Backend:
    """Resolve a backend by name; None or 'auto' selects the default."""
    if name is None or name == "auto":
        return active_backend()
    if name == "reference":
        return _REFERENCE
    if name == "compiled":
        if _COMPILED is None:
            raise BackendUnavailable(
                "compiled kernel extension is not built; reinstall the package "
                "or use the reference backend"
            )
        return _COMPILED
    raise BackendUnavailable(f"unknown backend {name!r}")


def active_backend() -> Backend:
    forced = os.environ.get("STEREODET3D_BACKEND", "auto")
    if forced == "auto":
        return _COMPILED if _COMPILED is not None else _REFERENCE
    return get_backend(forced)
