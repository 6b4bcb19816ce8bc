"""Kernel backend selection.

The compiled extension is used when it imports; ``PMFL_BACKEND=python``
forces the pure-Python kernels.
"""

from __future__ import annotations

import os

from . import _kernels_py

kernels = _kernels_py
if os.environ.get("PMFL_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        kernels = _compiled

BACKEND: str = kernels.BACKEND


def available_backends() -> dict:
    """All importable kernel modules keyed by backend name."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels as compiled
    except ImportError:
        return found
    found["cython"] = compiled
    return found
