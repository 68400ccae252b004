"""Pick the compiled kernels when available, numpy otherwise.

Set ``LATENTSDE_PURE_PYTHON=1`` to force the fallback (used by the benchmark
and the cross-backend tests).
"""
from __future__ import annotations

import os

from . import _rng

NAME = "python"
_impl = _rng

if os.environ.get("LATENTSDE_PURE_PYTHON", "") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        NAME = "compiled"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _rng


def compiled_available() -> bool:
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True


def get(name: str | None = None):
    """Return the kernel module; ``name`` in {None, 'python', 'compiled'}."""
    if name is None:
        return _impl
    if name == "python":
        return _rng
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def uniforms(key: int, start: int, count: int):
    return _impl.uniforms(key, start, count)


def normals(key: int, start: int, count: int):
    return _impl.normals(key, start, count)


def em_affine(z0, times, drift_matrix, drift_offset, diffusion, key: int):
    return _impl.em_affine(z0, times, drift_matrix, drift_offset, diffusion, key)
