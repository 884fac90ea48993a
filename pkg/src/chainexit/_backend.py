"""Kernel backend selection.

The compiled extension is used when it imports; set ``CHAINEXIT_BACKEND=python``
to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
kernels = _pykernels
if os.environ.get("CHAINEXIT_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as kernels  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        kernels = _pykernels


def get_kernels(name: str | None = None):
    """Kernel module by name (``"cython"`` or ``"python"``); default is the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
