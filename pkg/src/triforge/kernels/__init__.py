"""Hot-kernel backend selection.

The compiled Cython extension is preferred; the numpy reference
implementation is the fallback.  Override with TRIFORGE_KERNELS=python or
TRIFORGE_KERNELS=compiled (the latter raises if the extension is missing).
Both backends implement the same contract and are compared by
tests/test_kernels.py and benchmarks/bench_kernels.py.
"""

from __future__ import annotations

import os

from . import reference

_requested = os.environ.get("TRIFORGE_KERNELS", "auto").lower()

if _requested in ("auto", "compiled"):
    try:
        from . import _fastcore as _impl

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "TRIFORGE_KERNELS=compiled but triforge.kernels._fastcore is not built; "
                "run `pip install -e . --no-build-isolation`"
            )
        _impl = reference
        BACKEND = "python"
elif _requested == "python":
    _impl = reference
    BACKEND = "python"
else:
    raise ValueError(f"unknown TRIFORGE_KERNELS value: {_requested!r}")

scatter_add_rows = _impl.scatter_add_rows
scatter_add_1d = _impl.scatter_add_1d
softras_forward = _impl.softras_forward
softras_backward = _impl.softras_backward


def backend_name() -> str:
    return BACKEND
