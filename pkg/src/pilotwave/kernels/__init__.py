"""Hot loops: off-grid interpolation and ensemble RK4 integration.

The compiled extension is used when importable; otherwise, or when
``PILOTWAVE_PURE=1`` is set, the vectorized NumPy fallback is selected.
Both expose ``interpolate`` and ``integrate_paths`` with identical
signatures.
"""
import os

from . import _pykernels

OK, NODE_ABORT, BOUNDARY_EXIT = _pykernels.OK, _pykernels.NODE_ABORT, _pykernels.BOUNDARY_EXIT

_ext = None
if not os.environ.get("PILOTWAVE_PURE"):
    try:
        from . import _ckernels as _ext
    except ImportError:  # extension not built
        _ext = None

backend = _ext if _ext is not None else _pykernels
BACKEND = "cython" if _ext is not None else "numpy"

interpolate = backend.interpolate
integrate_paths = backend.integrate_paths


def get_backend(name=None):
    """Return the kernel module for ``name`` (``"cython"``/``"numpy"``), or the active one."""
    if name is None:
        return backend
    if name == "numpy":
        return _pykernels
    if name == "cython":
        if _ext is None:
            raise ImportError("compiled kernels are not available")
        return _ext
    raise ValueError(f"unknown kernel backend {name!r}")
