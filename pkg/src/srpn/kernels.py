"""Backend selection for the convolution and pooling kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation. Set ``SRPN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from srpn import _pykernels

BACKENDS = {"python": _pykernels}

try:
    from srpn import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["compiled"] = _ckernels

if _ckernels is not None and os.environ.get("SRPN_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

_impl = BACKENDS[BACKEND]


def use_backend(name):
    """Switch the active kernel backend; returns the previous name."""
    global _impl, BACKEND
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {sorted(BACKENDS)}")
    prev, BACKEND, _impl = BACKEND, name, BACKENDS[name]
    return prev


def conv2d_forward(x, w, b, pad):
    return _impl.conv2d_forward(x, w, b, pad)


def conv2d_backward(dout, x_shape, w, cols, pad):
    return _impl.conv2d_backward(dout, x_shape, w, cols, pad)


def maxpool2d_forward(x, size):
    return _impl.maxpool2d_forward(x, size)


def maxpool2d_backward(dout, argmax, x_shape):
    return _impl.maxpool2d_backward(dout, argmax, x_shape)
