"""Hot loops for convolution and pooling.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``MEMLOC_KERNELS=python`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MEMLOC_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _c(a):
    return a if a.flags.c_contiguous else a.copy(order="C")


def im2col(x, kh, kw, stride=1, pad=0):
    """Unfold ``(N, C, H, W)`` into ``(C*kh*kw, N*OH*OW)`` patch columns."""
    return _impl.im2col(_c(x), kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride=1, pad=0):
    """Adjoint of :func:`im2col`: sum patch columns back onto the image grid."""
    return _impl.col2im(_c(cols), tuple(shape), kh, kw, stride, pad)


def maxpool2x2(x):
    """2x2/stride-2 max pool. Returns ``(out, argmax)`` with argmax in 0..3."""
    return _impl.maxpool2x2(_c(x))


def maxpool2x2_backward(grad, idx, shape):
    return _impl.maxpool2x2_backward(_c(grad), _c(idx), tuple(shape))


__all__ = ["BACKEND", "im2col", "col2im", "maxpool2x2", "maxpool2x2_backward"]
