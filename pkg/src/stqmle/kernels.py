"""Backend dispatch for the banded kernels.

Set ``STQMLE_BACKEND=numpy`` to force the pure-numpy path; the default is
numba when it imports cleanly.
"""

import importlib
import os

_NAMES = {"numba": "stqmle._kernels_numba", "numpy": "stqmle._kernels_numpy"}


def load_backend(name):
    return importlib.import_module(_NAMES[name])


def _select():
    wanted = os.environ.get("STQMLE_BACKEND", "numba").strip().lower()
    if wanted not in _NAMES:
        raise ValueError(f"STQMLE_BACKEND must be one of {sorted(_NAMES)}, got {wanted!r}")
    if wanted == "numba":
        try:
            return "numba", load_backend("numba")
        except ImportError:
            return "numpy", load_backend("numpy")
    return wanted, load_backend(wanted)


BACKEND, _impl = _select()

band_spmv = _impl.band_spmv
band_product = _impl.band_product
band_cholesky = _impl.band_cholesky
band_cholesky_solve = _impl.band_cholesky_solve
solve_prepare = _impl.solve_prepare
