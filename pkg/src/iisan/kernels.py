"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``IISAN_KERNELS=python`` to force the numpy fallback (for benchmarking
or debugging). ``BACKEND`` reports which one is active.
"""
import os

import numpy as np

from . import _pykernels

_c = None
if os.environ.get("IISAN_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _c
    except ImportError:  # extension not built
        _c = None

BACKEND = "cython" if _c is not None else "python"


def _use_c(*arrays):
    return _c is not None and all(a.dtype == np.float64 for a in arrays)


def layernorm_forward(x, gamma, beta, eps, backend=None):
    c = _pick(backend, x, gamma, beta)
    if c:
        return _c.layernorm_forward(
            np.ascontiguousarray(x), np.ascontiguousarray(gamma), np.ascontiguousarray(beta), eps
        )
    return _pykernels.layernorm_forward(x, gamma, beta, eps)


def layernorm_backward(gy, xhat, rstd, gamma, backend=None):
    c = _pick(backend, gy, xhat, gamma)
    if c:
        return _c.layernorm_backward(
            np.ascontiguousarray(gy), xhat, rstd, np.ascontiguousarray(gamma)
        )
    return _pykernels.layernorm_backward(gy, xhat, rstd, gamma)


def gelu_forward(x, backend=None):
    if _pick(backend, x):
        flat = np.ascontiguousarray(x).reshape(-1)
        return _c.gelu_forward(flat).reshape(x.shape)
    return _pykernels.gelu_forward(x)


def gelu_backward(x, gy, backend=None):
    if _pick(backend, x, gy):
        out = _c.gelu_backward(
            np.ascontiguousarray(x).reshape(-1), np.ascontiguousarray(gy).reshape(-1)
        )
        return out.reshape(x.shape)
    return _pykernels.gelu_backward(x, gy)


def debiased_ce(scores, logp, targets, valid, admit, backend=None):
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    valid = np.ascontiguousarray(valid, dtype=np.uint8)
    admit = np.ascontiguousarray(admit, dtype=np.uint8)
    if _pick(backend, scores, logp):
        return _c.debiased_ce(
            np.ascontiguousarray(scores), np.ascontiguousarray(logp), targets, valid, admit
        )
    return _pykernels.debiased_ce(scores, logp, targets, valid, admit)


def rank_targets(scores, targets, backend=None):
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    if _pick(backend, scores):
        return _c.rank_targets(np.ascontiguousarray(scores), targets)
    return _pykernels.rank_targets(scores, targets)


def _pick(backend, *arrays):
    if backend == "python":
        return False
    if backend == "cython":
        if _c is None:
            raise RuntimeError("compiled kernels are not built")
        return True
    return _use_c(*arrays)
