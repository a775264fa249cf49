"""Backend selection: compiled extension when available, numpy fallback otherwise.

``FRACHEAT_BACKEND=python`` or ``FRACHEAT_BACKEND=ext`` forces the choice.
"""

import os

from . import _kernels_py

_forced = os.environ.get("FRACHEAT_BACKEND", "").strip().lower()

if _forced == "python":
    kernels = _kernels_py
elif _forced == "ext":
    from . import _kernels as kernels  # noqa: F401  (ImportError is the answer)
else:
    try:
        from . import _kernels as kernels
    except ImportError:
        kernels = _kernels_py

BACKEND = kernels.BACKEND
HAVE_EXT = BACKEND == "ext"


def get_kernels(backend=None):
    """Return the kernel module for an explicit backend name, or the default."""
    if backend is None:
        return kernels
    if backend == "python":
        return _kernels_py
    if backend == "ext":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {backend!r}")
