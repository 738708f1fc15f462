"""Blending-kernel backend selection.

The compiled Cython kernels are preferred; the pure-numpy fallback is used
when the extension is unavailable or ENSPLAT_PURE_PYTHON=1 is set. Both
implement the same contract; ``tests/test_kernels.py`` checks parity.
"""

from __future__ import annotations

import os

from . import _blend_py

if os.environ.get("ENSPLAT_PURE_PYTHON") == "1":
    _impl = _blend_py
else:
    try:
        from . import _blend_cy as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _blend_py

blend_forward = _impl.blend_forward
blend_backward = _impl.blend_backward
BACKEND = _impl.BACKEND

ALPHA_MIN = _blend_py.ALPHA_MIN
ALPHA_MAX = _blend_py.ALPHA_MAX
T_EPS = _blend_py.T_EPS


def get_backend(name: str):
    """Return a specific backend module ("python" or "cython")."""
    if name == "python":
        return _blend_py
    if name == "cython":
        from . import _blend_cy  # noqa: F811
        return _blend_cy
    raise ValueError(f"unknown kernel backend '{name}'")
