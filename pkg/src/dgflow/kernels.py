"""Kernel selection: compiled ``_ckernels`` when importable, else pure Python.

Set ``DGFLOW_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _pykernels
from ._pykernels import (  # noqa: F401
    STATUS_BLOWUP, STATUS_EXITED, STATUS_MAXSTEPS, STATUS_OK, STATUS_UNDERFLOW, phi_functions,
)

_ck = None
if os.environ.get("DGFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _ck
    except ImportError:  # extension not built
        _ck = None

HAVE_COMPILED = _ck is not None
BACKEND = "compiled" if HAVE_COMPILED else "python"


def _flat_params(objective) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(objective.kernel_params, dtype=float).ravel())


def compiled_supported(objective) -> bool:
    return HAVE_COMPILED and getattr(objective, "kernel_kind", None) is not None


def integrate_modes(objective, V, q, lin, weight, x0, t0, t_end, *, backend=None, **opts):
    """Dispatch one ETD integration.

    ``backend`` is ``"compiled"``, ``"python"`` or None (compiled when the
    objective has a kernel code and the extension is available).
    """
    use_c = compiled_supported(objective) if backend is None else backend == "compiled"
    if use_c:
        if not compiled_supported(objective):
            raise RuntimeError("compiled backend unavailable for this objective")
        center = opts.pop("exit_center", None)
        return _ck.integrate_modes(
            int(objective.kernel_kind), _flat_params(objective),
            np.ascontiguousarray(V, dtype=float), np.ascontiguousarray(q, dtype=float),
            lin.kernel_args(), weight.kernel_args(),
            np.ascontiguousarray(x0, dtype=float), float(t0), float(t_end),
            exit_center=None if center is None else np.ascontiguousarray(center, dtype=float),
            **opts)
    return _pykernels.integrate_modes(objective.subgrad, V, q, lin, weight, x0, t0, t_end, **opts)


def forward_recurrence(decay, src, init):
    if HAVE_COMPILED:
        return _ck.forward_recurrence(np.ascontiguousarray(decay, dtype=float),
                                      np.ascontiguousarray(src, dtype=float),
                                      np.ascontiguousarray(init, dtype=float))
    return _pykernels.forward_recurrence(decay, src, init)


def backward_recurrence(decay, src):
    if HAVE_COMPILED:
        return _ck.backward_recurrence(np.ascontiguousarray(decay, dtype=float),
                                       np.ascontiguousarray(src, dtype=float))
    return _pykernels.backward_recurrence(decay, src)
