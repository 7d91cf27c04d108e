"""Kernel backend selection.

The compiled extension is preferred when importable; otherwise the
numpy fallback is used.  Set RAGWARD_BACKEND=python or =compiled to
force one (forcing the compiled backend raises if it is not built).
"""

from __future__ import annotations

import os

_forced = os.environ.get("RAGWARD_BACKEND", "").strip().lower()

if _forced == "python":
    from . import _kernels_py as _impl
elif _forced == "compiled":
    from . import _kernels as _impl  # type: ignore[attr-defined]
elif _forced == "":
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as _impl
else:
    raise RuntimeError(f"RAGWARD_BACKEND must be 'python' or 'compiled', got {_forced!r}")

BACKEND = _impl.BACKEND_NAME

pool = _impl.pool
grad_norms = _impl.grad_norms
grad_at = _impl.grad_at
substitution_scores = _impl.substitution_scores
