"""Selects the kernel backend at import time.

The compiled extension is preferred when present; otherwise the NumPy
fallback is used. REATTN_BACKEND=python|compiled forces the choice.
"""

import os

from reattn import _kernels_py
from reattn.errors import ConfigError

try:
    from reattn import _kernels as _compiled
except ImportError:
    _compiled = None

_requested = os.environ.get("REATTN_BACKEND", "").strip().lower()
if _requested in ("", "auto"):
    _active = _compiled if _compiled is not None else _kernels_py
elif _requested == "python":
    _active = _kernels_py
elif _requested == "compiled":
    if _compiled is None:
        raise ConfigError(
            "REATTN_BACKEND=compiled but the extension is not built; "
            "run `pip install -e . --no-build-isolation` with Cython available"
        )
    _active = _compiled
else:
    raise ConfigError(f"unknown REATTN_BACKEND {_requested!r}")

BACKEND = _active.NAME

softmax_forward = _active.softmax_forward
softmax_backward = _active.softmax_backward
gelu_forward = _active.gelu_forward
gelu_backward = _active.gelu_backward
adamw_update = _active.adamw_update


def available_backends():
    """Importable kernel modules, keyed by name. Used by tests and benchmarks."""
    mods = {"python": _kernels_py}
    if _compiled is not None:
        mods["compiled"] = _compiled
    return mods
