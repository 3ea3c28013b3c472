"""Hot-kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set ``ALCR_PURE_PYTHON=1`` to force the fallback.
"""
import os

from alcr import _fallback

try:
    if os.environ.get("ALCR_PURE_PYTHON"):
        raise ImportError("fallback forced by ALCR_PURE_PYTHON")
    from alcr import _kernels as _impl

    COMPILED = True
except ImportError:
    _impl = _fallback
    COMPILED = False

gru_scan_forward = _impl.gru_scan_forward
gru_scan_backward = _impl.gru_scan_backward
edit_distance = _impl.edit_distance
