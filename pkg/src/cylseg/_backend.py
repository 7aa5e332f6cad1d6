"""Pick the compiled kernels when available, numpy otherwise.

Set ``CYLSEG_BACKEND=python`` to force the fallback.
"""

import logging
import os

from . import _fallback

log = logging.getLogger(__name__)


def load(name=None):
    name = (name or os.environ.get("CYLSEG_BACKEND", "auto")).lower()
    if name in ("python", "numpy", "fallback"):
        return _fallback
    try:
        from . import _kernels
    except ImportError:
        if name == "cython":
            raise
        log.debug("compiled kernels unavailable; using numpy fallback")
        return _fallback
    return _kernels


kernels = load()
