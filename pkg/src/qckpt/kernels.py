"""Backend selection for the hot loops.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy fallback in ``_pykernels``.  Set ``QCKPT_PURE_PYTHON=1`` to force the
fallback.
"""
import os

from . import _pykernels

if os.environ.get("QCKPT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

rle_encode = _impl.rle_encode
rle_decode = _impl.rle_decode
huffman_pack = _impl.huffman_pack
huffman_unpack = _impl.huffman_unpack
lloyd_step = _impl.lloyd_step
assign_nearest = _impl.assign_nearest


def available_backends():
    """Map of backend name to kernel module, for tests and benchmarks."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out
