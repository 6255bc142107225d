"""Hot-loop kernels, compiled when available.

The Cython extension ``_ckernels`` is preferred; the numpy module
``_pykernels`` is used when the extension was not built or when the
environment variable ``FLGPR_PURE_PYTHON=1`` is set. ``BACKEND`` names the
active choice.
"""

import os

from . import _pykernels

if os.environ.get("FLGPR_PURE_PYTHON") == "1":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

rx_lambda = _impl.rx_lambda
dpmeans = _impl.dpmeans
smo_solve = _impl.smo_solve


def backends():
    """Map of available backend name to kernel module."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out
