"""Kernel backend selection.

The conv/pool data-movement loops exist twice: a compiled Cython extension
and a pure-numpy fallback with identical semantics. The compiled one is
preferred when importable; GAMIN_KERNELS=numpy|cython forces a choice
(cython raises if the extension is missing). GEMM work is delegated to
BLAS through numpy in both cases.
"""

import os

from . import _numpy_impl

_choice = os.environ.get("GAMIN_KERNELS", "auto").lower()

if _choice == "numpy":
    _impl = _numpy_impl
elif _choice == "cython":
    from . import _cy_impl as _impl
elif _choice == "auto":
    try:
        from . import _cy_impl as _impl
    except ImportError:
        _impl = _numpy_impl
else:
    raise ValueError(f"GAMIN_KERNELS must be auto, numpy or cython, got {_choice!r}")

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward

__all__ = ["BACKEND", "im2col", "col2im", "maxpool_forward", "maxpool_backward"]
