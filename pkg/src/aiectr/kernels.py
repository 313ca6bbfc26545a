"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise (or
when ``AIECTR_PURE_PYTHON=1``) the numpy versions in ``_pykernels`` are used.
Both expose the same functions and give identical results.
"""
from __future__ import annotations

import os

from . import _pykernels

python_backend = _pykernels

if os.environ.get("AIECTR_PURE_PYTHON") == "1":
    compiled_backend = None
else:
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend or python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

scatter_add_rows = _active.scatter_add_rows
dominance_counts = _active.dominance_counts
group_argmax = _active.group_argmax
