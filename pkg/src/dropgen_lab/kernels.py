"""Kernel backend selection.

The compiled extension is preferred; the numpy implementation is used when
it is missing or when ``DROPGEN_LAB_PURE`` is set to a non-empty value other
than ``0``. ``BACKEND`` names the active choice.

Even with the extension loaded, width-1 convolutions go to numpy: they are
plain batched matrix products and the vendor BLAS beats the compiled loops
there (see ``benchmarks/bench_kernels.py``). The choice depends only on the
kernel shape, so results stay deterministic.
"""

import os

from . import _kernels_py

_force_pure = os.environ.get("DROPGEN_LAB_PURE", "") not in ("", "0")

if _force_pure:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def conv1d_forward(x, w, b):
    impl = _impl if w.shape[2] > 1 else _kernels_py
    return impl.conv1d_forward(x, w, b)


def conv1d_backward(gy, x, w):
    impl = _impl if w.shape[2] > 1 else _kernels_py
    return impl.conv1d_backward(gy, x, w)


softmax_xent = _impl.softmax_xent

__all__ = ["BACKEND", "conv1d_forward", "conv1d_backward", "softmax_xent"]
