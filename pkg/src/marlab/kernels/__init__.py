"""Kernel backend selection.

The compiled core (``marlab.kernels._core``, Cython) is preferred when the
extension built; otherwise the numpy reference backend is used. Set
``MARLAB_KERNELS=py`` or ``MARLAB_KERNELS=c`` to force a backend (``c``
raises if the extension is unavailable).
"""

import os

from . import _ref


def _select():
    choice = os.environ.get("MARLAB_KERNELS", "auto").lower()
    if choice == "py":
        return _ref
    try:
        from . import _core
    except ImportError:
        if choice == "c":
            raise ImportError(
                "MARLAB_KERNELS=c but the compiled kernel extension is not "
                "available; reinstall with a C toolchain or unset the variable"
            )
        return _ref
    return _core


_impl = _select()

BACKEND_NAME = _impl.BACKEND_NAME
gru_forward = _impl.gru_forward
gru_backward = _impl.gru_backward
lambda_scan = _impl.lambda_scan

__all__ = ["BACKEND_NAME", "gru_forward", "gru_backward", "lambda_scan"]
