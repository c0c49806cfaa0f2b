"""Kernel backend selection.

The compiled extension is used when it imports cleanly; setting
``VMARKER_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _kernels_py

if os.environ.get("VMARKER_PURE_PYTHON", "") not in ("", "0"):
    kernels = _kernels_py
else:
    try:
        from . import _kernels as kernels
    except ImportError:
        kernels = _kernels_py

BACKEND = "python" if kernels is _kernels_py else "compiled"

try:
    from . import _kernels as _compiled  # noqa: F401

    HAVE_COMPILED = True
except ImportError:
    HAVE_COMPILED = False


def get_kernels(name=None):
    """Return a kernel module by name (``"compiled"``/``"python"``) or the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")
