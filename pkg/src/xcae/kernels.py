"""Hot-loop kernels, compiled when available.

The Cython extension ``xcae._ckernels`` is used when it imports; otherwise the
numpy implementation in ``xcae._kernels_py`` is used. ``XCAE_BACKEND=python``
forces the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

_forced = os.environ.get("XCAE_BACKEND", "").strip().lower()

try:
    if _forced == "python":
        raise ImportError("python backend forced by XCAE_BACKEND")
    from . import _ckernels as _compiled  # type: ignore[attr-defined]
except ImportError:
    _compiled = None
    if _forced in ("c", "cython"):
        raise

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

BACKEND = "cython" if _compiled is not None else "python"
_impl = BACKENDS[BACKEND]


def get(name: str | None = None):
    """Kernel namespace for ``name`` (default: the active backend)."""
    if name is None:
        return _impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available "
                         f"(have: {', '.join(BACKENDS)})") from None


def cae_loss_grad(*args, **kwargs):
    return _impl.cae_loss_grad(*args, **kwargs)


def explainer_train(*args, **kwargs):
    return _impl.explainer_train(*args, **kwargs)
