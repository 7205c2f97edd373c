"""Select the hash kernel at import: compiled extension when built, else pure.

CRISP_PURE_PYTHON=1 forces the pure kernel regardless of what is installed.
"""

from __future__ import annotations

import os

from . import _kernel_pure as pure

if os.environ.get("CRISP_PURE_PYTHON") == "1":
    kernel = pure
else:
    try:
        from . import _core as kernel  # type: ignore[no-redef]
    except ImportError:
        kernel = pure


def active_implementation() -> str:
    return kernel.IMPLEMENTATION
