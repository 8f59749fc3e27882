"""Kernel backend selection.

The compiled extension is preferred; the numpy fallback is used when it is
missing or when ``WOTLAB_PURE_PYTHON`` is set to a truthy value.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("WOTLAB_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

im2col = _impl.im2col
col2im = _impl.col2im
block_inner = _impl.block_inner
block_combine = _impl.block_combine


def backends():
    """Return ``{name: module}`` for every kernel backend importable here."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as compiled
    except ImportError:
        return out
    out["cython"] = compiled
    return out
