"""Backend selection for the RK4 shooting kernels.

The compiled extension is used whenever it imported and the model has a
native code (see ``SystemModel.kernel``); everything else falls back to the
numpy implementation.  ``ETNMPC_BACKEND=python`` forces the fallback.
"""
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_MODEL_CODES = {"chen_allgower": 0, "linear": 1}


def compiled_available():
    return _ckernels is not None


def default_backend():
    forced = os.environ.get("ETNMPC_BACKEND", "").strip().lower()
    if forced == "python" or _ckernels is None:
        return "python"
    return "cython"


BACKEND = default_backend()


def _c(a, ndim):
    a = np.ascontiguousarray(a, dtype=float)
    if not a.flags.writeable:  # memoryviews refuse read-only buffers
        a = a.copy()
    if a.ndim != ndim:
        raise ValueError(f"expected {ndim}-d array, got shape {a.shape}")
    return a


class _Compiled:
    name = "cython"

    def __init__(self, code, params, n, m):
        self.code = code
        self.params = np.ascontiguousarray(params, dtype=float)
        if self.params.size == 0:
            self.params = np.zeros(1)
        self.n, self.m = n, m

    def rk4_steps(self, x0, U, W, H):
        return _ckernels.rk4_steps(self.code, self.params, self.n, self.m, _c(x0, 1),
                                   _c(U, 2), _c(W, 2), _c(H, 1))

    def shoot(self, x0, U, sps, h, Q, R):
        return _ckernels.shoot(self.code, self.params, self.n, self.m, _c(x0, 1), _c(U, 2),
                               int(sps), float(h), _c(Q, 2), _c(R, 2))

    def cost_terminal(self, x0, U, sps, h, Q, R, P):
        return _ckernels.cost_terminal(self.code, self.params, self.n, self.m, _c(x0, 1),
                                       _c(U, 2), int(sps), float(h), _c(Q, 2), _c(R, 2),
                                       _c(P, 2))

    def cost_terminal_grad(self, x0, U, sps, h, Q, R, P, fd_step):
        return _ckernels.cost_terminal_grad(self.code, self.params, self.n, self.m, _c(x0, 1),
                                            _c(U, 2), int(sps), float(h), _c(Q, 2), _c(R, 2),
                                            _c(P, 2), float(fd_step))


class _Python:
    name = "python"

    def __init__(self, rhs):
        self.rhs = rhs

    def rk4_steps(self, x0, U, W, H):
        return _pykernels.rk4_steps(self.rhs, _c(x0, 1), _c(U, 2), _c(W, 2), _c(H, 1))

    def shoot(self, x0, U, sps, h, Q, R):
        return _pykernels.shoot(self.rhs, _c(x0, 1), _c(U, 2), int(sps), float(h),
                                _c(Q, 2), _c(R, 2))

    def cost_terminal(self, x0, U, sps, h, Q, R, P):
        return _pykernels.cost_terminal(self.rhs, _c(x0, 1), _c(U, 2), int(sps), float(h),
                                        _c(Q, 2), _c(R, 2), _c(P, 2))

    def cost_terminal_grad(self, x0, U, sps, h, Q, R, P, fd_step):
        return _pykernels.cost_terminal_grad(self.rhs, _c(x0, 1), _c(U, 2), int(sps),
                                             float(h), _c(Q, 2), _c(R, 2), _c(P, 2), fd_step)


def kernel_for(model, backend=None):
    """Return the kernel object used to simulate ``model``."""
    backend = backend or BACKEND
    if backend == "cython" and _ckernels is None:
        raise RuntimeError("compiled backend requested but the extension is not built")
    if backend == "cython" and model.kernel is not None:
        kind, params = model.kernel
        return _Compiled(_MODEL_CODES[kind], params, model.state_dim, model.input_dim)
    return _Python(model.rhs)
