"""Backend selection for the hot loops.

The compiled extension is preferred. Set ``NTFKMIX_PURE=1`` to force the
numpy fallback, or call :func:`use_backend` at runtime.
"""
from __future__ import annotations

import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKEND = "python"
pgs_solve = _kernels_py.pgs_solve
core_cd = _kernels_py.core_cd
hals_columns = _kernels_py.hals_columns


def available_backends():
    return ["compiled", "python"] if _compiled is not None else ["python"]


def use_backend(name):
    """Switch kernels to ``"compiled"`` or ``"python"``."""
    global BACKEND, pgs_solve, core_cd, hals_columns
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        mod = _compiled
    elif name == "python":
        mod = _kernels_py
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    pgs_solve = mod.pgs_solve
    core_cd = mod.core_cd
    hals_columns = mod.hals_columns


if _compiled is not None and os.environ.get("NTFKMIX_PURE") != "1":
    use_backend("compiled")
