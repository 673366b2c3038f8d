"""Hot numeric kernels with backend selection at import.

The compiled Cython core (``rigfit.kernels._core``) is preferred when it was
built; otherwise the numpy fallback is used. Set ``RIGFIT_PURE=1`` to force
the fallback (useful for benchmarking and debugging).
"""

import os

from . import _pure

if os.environ.get("RIGFIT_PURE", "") not in ("", "0"):
    _impl = _pure
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _pure

BACKEND = _impl.BACKEND_NAME

rodrigues = _impl.rodrigues
rodrigues_dual = _impl.rodrigues_dual
fk_chain = _impl.fk_chain
fk_chain_dual = _impl.fk_chain_dual
lbs = _impl.lbs
lbs_dual = _impl.lbs_dual


def backend_name():
    """Name of the kernel backend selected at import ('cython' or 'pure')."""
    return BACKEND
