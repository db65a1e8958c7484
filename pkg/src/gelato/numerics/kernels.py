"""Kernel backend selection.

Prefers the compiled extension when it imported cleanly; falls back to the
numpy implementations otherwise. ``GELATO_KERNELS=py`` forces the fallback,
``GELATO_KERNELS=compiled`` demands the extension (import error if absent).

Each backend is deterministic with itself; the two may differ in the last
ulp (different erf implementations, different summation order), so numeric
guarantees in this package are always stated per backend.
"""

import os

from . import _kernels_py

_choice = os.environ.get("GELATO_KERNELS", "auto").lower()

if _choice in ("py", "python"):
    _impl = _kernels_py
    BACKEND = "python"
elif _choice in ("cy", "compiled", "c"):
    from . import _kernels_cy as _impl  # noqa: F401  (hard requirement)

    BACKEND = "compiled"
else:
    try:
        from . import _kernels_cy as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def backend() -> str:
    """Name of the active kernel backend: 'compiled' or 'python'."""
    return BACKEND


gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
masked_softmax_fwd = _impl.masked_softmax_fwd
masked_softmax_bwd = _impl.masked_softmax_bwd
rotary = _impl.rotary
