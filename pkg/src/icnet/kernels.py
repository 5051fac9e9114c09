"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy twins
take over. ``use_backend`` switches explicitly (benchmarks, parity tests).
"""

import logging

from icnet import _pykernels

log = logging.getLogger(__name__)

try:
    from icnet import _ckernels
except ImportError:  # extension not built
    _ckernels = None
    log.debug("compiled kernels unavailable, using numpy fallback")

_active = _ckernels if _ckernels is not None else _pykernels


def compiled_available():
    return _ckernels is not None


def backend_name():
    return "compiled" if _active is _ckernels and _ckernels is not None else "python"


def use_backend(name):
    """Select ``"compiled"`` or ``"python"``; returns the previous name."""
    global _active
    prev = backend_name()
    if name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _active = _ckernels
    elif name == "python":
        _active = _pykernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    return prev


def conv_accumulate(w, cols, out):
    _active.conv_accumulate(w, cols, out)


def col2im_add(cols, xpad, stride, dilation):
    _active.col2im_add(cols, xpad, stride, dilation)


def label_components(labels, ignore, connectivity=4):
    return _active.label_components(labels, ignore, connectivity)
