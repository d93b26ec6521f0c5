"""Per-frequency dense solve kernels with optional numba acceleration.

The two inner loops that dominate sweep workloads live here:

* ``descriptor_response`` -- G(i w) = C (i w E - A)^-1 B over a frequency grid,
* ``lft_response`` -- the feedback interconnection solve per frequency.

Both exist as a pure-numpy implementation and, when numba is importable, a
compiled twin.  The active backend is chosen once at import time from the
``MODLINK_NUMBA`` environment variable:

* ``auto`` (default) -- numba if available, numpy otherwise,
* ``0`` / ``off`` / ``numpy`` -- force the pure-numpy path,
* ``1`` / ``on`` / ``require`` -- fail hard if numba is missing.

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

import os

import numpy as np


def _descriptor_response_numpy(E, A, B, C, omega):
    nw = omega.shape[0]
    p, m = C.shape[0], B.shape[1]
    out = np.empty((nw, p, m), dtype=np.complex128)
    for w in range(nw):
        pencil = 1j * omega[w] * E - A
        out[w] = C @ np.linalg.solve(pencil, B)
    return out


def _lft_response_numpy(gb, k11, k12, k21, k22):
    nw = gb.shape[0]
    mb = k11.shape[0]
    pc, mc = k22.shape
    gc = np.empty((nw, pc, mc), dtype=np.complex128)
    rcond = np.empty(nw, dtype=np.float64)
    eye = np.eye(mb, dtype=np.complex128)
    for w in range(nw):
        feedback = eye - k11 @ gb[w]
        _, sv, _ = np.linalg.svd(feedback)
        rcond[w] = sv[-1] / sv[0] if sv[0] > 0.0 else 0.0
        x = np.linalg.solve(feedback, k12)
        gc[w] = k21 @ (gb[w] @ x) + k22
    return gc, rcond


_flag = os.environ.get("MODLINK_NUMBA", "auto").strip().lower()
_want_numba = _flag not in ("0", "off", "false", "no", "numpy")

HAS_NUMBA = False
if _want_numba:
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:
        if _flag in ("1", "on", "true", "yes", "require"):
            raise ImportError(
                "MODLINK_NUMBA=%s but numba is not installed" % _flag
            ) from None

if HAS_NUMBA:
    _descriptor_response_jit = njit(cache=True)(_descriptor_response_numpy)
    _lft_response_jit = njit(cache=True)(_lft_response_numpy)
    descriptor_response = _descriptor_response_jit
    lft_response = _lft_response_jit
    BACKEND = "numba"
else:
    _descriptor_response_jit = None
    _lft_response_jit = None
    descriptor_response = _descriptor_response_numpy
    lft_response = _lft_response_numpy
    BACKEND = "numpy"


def as_kernel_args(*arrays):
    """Coerce matrices to contiguous complex128 arrays for the kernels."""
    return tuple(np.ascontiguousarray(a, dtype=np.complex128) for a in arrays)
