"""Kernel backend selection.

The compiled extension (``elastica._core._simcore``) and the numpy fallback
(``elastica._core.py_backend``) expose the same three entry points with
identical numerics. The compiled core is preferred when importable; set
ELASTICA_BACKEND=python (or =cython) to force a choice.
"""

from __future__ import annotations

import os

from . import py_backend

_requested = os.environ.get("ELASTICA_BACKEND", "auto").lower()

if _requested not in ("auto", "cython", "python"):
    raise ImportError(
        f"ELASTICA_BACKEND must be auto, cython, or python (got {_requested!r})"
    )

_impl = None
if _requested in ("auto", "cython"):
    try:
        from . import _simcore as _candidate

        if hasattr(_candidate, "run_rollout"):
            _impl = _candidate
    except ImportError:
        pass
    if _impl is None and _requested == "cython":
        raise ImportError(
            "ELASTICA_BACKEND=cython but the compiled extension is not built; "
            "run `pip install -e . --no-build-isolation` or "
            "`python setup.py build_ext --inplace`"
        )
if _impl is None:
    _impl = py_backend

run_rollout = _impl.run_rollout
run_rollout_taped = _impl.run_rollout_taped
adjoint_sweep = _impl.adjoint_sweep


def backend_name() -> str:
    """Name of the active kernel backend: "cython" or "python"."""
    return "cython" if _impl is not py_backend else "python"


def available_backends() -> dict[str, object]:
    """Importable backend modules keyed by name (for tests and benchmarks)."""
    out: dict[str, object] = {"python": py_backend}
    try:
        from . import _simcore

        out["cython"] = _simcore
    except ImportError:
        pass
    return out
