"""Backend selection for the hot loops.

The compiled ``_core`` extension is used when it imports; otherwise the
pure-Python ``_pycore`` with identical signatures. Setting
``NEEDLEVAR_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _pycore

backend = _pycore
COMPILED = False

if os.environ.get("NEEDLEVAR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as backend  # type: ignore[no-redef]

        COMPILED = True
    except ImportError:  # pragma: no cover - depends on the build
        backend = _pycore


def backend_name() -> str:
    return "compiled" if COMPILED else "python"
