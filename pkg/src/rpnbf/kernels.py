"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations in ``_pykernels`` are used.  Setting the environment
variable ``RPNBF_PURE_PYTHON=1`` forces the fallback.
"""
import os

from rpnbf import _pykernels

python_backend = _pykernels
compiled_backend = None

try:
    from rpnbf import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and os.environ.get("RPNBF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    backend = compiled_backend
else:
    backend = python_backend


def available_backends():
    out = {"python": python_backend}
    if compiled_backend is not None:
        out["cython"] = compiled_backend
    return out


def use(name):
    """Switch the active backend (``"python"`` or ``"cython"``)."""
    global backend
    backends = available_backends()
    if name not in backends:
        raise ValueError(f"backend {name!r} is not available; have {sorted(backends)}")
    backend = backends[name]
    return backend
