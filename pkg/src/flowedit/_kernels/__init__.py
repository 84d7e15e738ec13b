"""Kernel backend selection: compiled Cython core with a numpy fallback.

``FLOWEDIT_KERNEL_BACKEND=numpy|cython`` forces a backend; the default is the
compiled core when the extension built, numpy otherwise. ``BACKEND`` names the
active one so benchmarks and tests can report it.
"""

import os

from . import _npkernels

_forced = os.environ.get("FLOWEDIT_KERNEL_BACKEND", "").lower()

if _forced == "numpy":
    _impl = _npkernels
    BACKEND = "numpy"
else:
    try:
        from . import _cykernels as _impl
        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise ImportError(
                "FLOWEDIT_KERNEL_BACKEND=cython but the compiled extension "
                "is not available; reinstall with Cython present"
            )
        _impl = _npkernels
        BACKEND = "numpy"


def _ascontig(a):
    import numpy as np

    return np.ascontiguousarray(a)


def grid_sample_forward(image, coords):
    return _impl.grid_sample_forward(_ascontig(image), _ascontig(coords))


def grid_sample_backward(image, coords, grad_out):
    return _impl.grid_sample_backward(
        _ascontig(image), _ascontig(coords), _ascontig(grad_out)
    )


def correlate1d_replicate(field, kernel, axis):
    return _impl.correlate1d_replicate(_ascontig(field), _ascontig(kernel), axis)


def correlate1d_replicate_adjoint(grad_out, kernel, axis):
    return _impl.correlate1d_replicate_adjoint(
        _ascontig(grad_out), _ascontig(kernel), axis
    )
