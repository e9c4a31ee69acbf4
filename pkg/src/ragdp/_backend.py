"""Kernel backend selection.

The compiled extension is used when it imports cleanly. Setting ``RAGDP_PURE_PYTHON=1``
forces the numpy fallback.
"""

from __future__ import annotations

import os

from ragdp import _kernels_py

python_kernels = _kernels_py

if os.environ.get("RAGDP_PURE_PYTHON", "").strip() not in ("", "0"):
    kernels = _kernels_py
    BACKEND = "python"
    compiled_kernels = None
else:
    try:
        from ragdp import _kernels as compiled_kernels
    except ImportError:
        compiled_kernels = None
        kernels = _kernels_py
        BACKEND = "python"
    else:
        kernels = compiled_kernels
        BACKEND = "compiled"
