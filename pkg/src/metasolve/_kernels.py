"""Hot numeric kernels with a numba path and a pure-numpy/LAPACK fallback.

The backend is chosen once at import time from ``METASOLVE_JIT``:
``"1"`` (default) uses the numba kernels when numba imports, ``"0"`` forces
the numpy path. Both variants stay importable under explicit names so the
benchmark can time them side by side.

Systems larger than ``JIT_MAX_DIM`` always go to LAPACK: the scalar-loop
factorization is only competitive where call overhead dominates.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.linalg import lapack

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = HAVE_NUMBA and os.environ.get("METASOLVE_JIT", "1") != "0"
JIT_MAX_DIM = 32  # numba/LAPACK crossover measured between 25 and 50 (benchmarks/bench_kernels.py)


@njit(cache=True)
def cholesky_numba(a):
    """Lower Cholesky factor of ``a``. Returns ``(L, info)``; ``info`` is the
    1-based failing pivot, 0 on success."""
    n = a.shape[0]
    L = np.zeros_like(a)
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, j + 1
        d = np.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            t = a[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / d
    return L, 0


@njit(cache=True)
def cho_solve_numba(L, b):
    n, r = b.shape
    z = b.copy()
    for c in range(r):
        for i in range(n):
            t = z[i, c]
            for k in range(i):
                t -= L[i, k] * z[k, c]
            z[i, c] = t / L[i, i]
        for i in range(n - 1, -1, -1):
            t = z[i, c]
            for k in range(i + 1, n):
                t -= L[k, i] * z[k, c]
            z[i, c] = t / L[i, i]
    return z


@njit(cache=True)
def shifted_factor_solve_numba(a, d, b):
    """Factor ``a + diag(d[:, j])`` and solve against ``b[:, j]`` for every
    column. Returns ``(Ls [m, k, k], z [k, m], info, column)``."""
    k, m = b.shape
    Ls = np.empty((m, k, k))
    z = np.empty((k, m))
    aj = a.copy()
    for j in range(m):
        for i in range(k):
            for c in range(k):
                aj[i, c] = a[i, c]
            aj[i, i] += d[i, j]
        L, info = cholesky_numba(aj)
        if info:
            return Ls, z, info, j
        Ls[j] = L
        z[:, j:j + 1] = cho_solve_numba(L, np.ascontiguousarray(b[:, j:j + 1]))
    return Ls, z, 0, 0


@njit(cache=True)
def batched_cho_solve_numba(Ls, g):
    k, m = g.shape
    out = np.empty((k, m))
    for j in range(m):
        out[:, j:j + 1] = cho_solve_numba(Ls[j], np.ascontiguousarray(g[:, j:j + 1]))
    return out


@njit(cache=True)
def sqdist_numba(q, c):
    nq, d = q.shape
    nc = c.shape[0]
    out = np.empty((nq, nc))
    for i in range(nq):
        for j in range(nc):
            s = 0.0
            for k in range(d):
                t = q[i, k] - c[j, k]
                s += t * t
            out[i, j] = s
    return out


def cholesky_numpy(a):
    L, info = lapack.dpotrf(a, lower=1, clean=1)
    return L, int(info)


def cho_solve_numpy(L, b):
    z, info = lapack.dpotrs(L, b, lower=1)
    if info != 0:  # pragma: no cover - only on malformed arguments
        raise RuntimeError(f"dpotrs failed with info={info}")
    return z


def shifted_factor_solve_numpy(a, d, b):
    k, m = b.shape
    Ls = np.empty((m, k, k))
    z = np.empty((k, m))
    idx = np.arange(k)
    for j in range(m):
        aj = a.copy()
        aj[idx, idx] += d[:, j]
        L, info = cholesky_numpy(aj)
        if info:
            return Ls, z, info, j
        Ls[j] = L
        z[:, j] = cho_solve_numpy(L, b[:, j:j + 1])[:, 0]
    return Ls, z, 0, 0


def batched_cho_solve_numpy(Ls, g):
    return np.stack([cho_solve_numpy(L, g[:, j:j + 1])[:, 0] for j, L in enumerate(Ls)], axis=1)


def sqdist_numpy(q, c):
    diff = q[:, None, :] - c[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def cholesky(a: np.ndarray) -> tuple[np.ndarray, int]:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if USE_NUMBA and a.shape[0] <= JIT_MAX_DIM:
        L, info = cholesky_numba(a)
        return L, int(info)
    return cholesky_numpy(a)


def cho_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    b = np.ascontiguousarray(b, dtype=np.float64)
    if USE_NUMBA and L.shape[0] <= JIT_MAX_DIM:
        return cho_solve_numba(L, b)
    return cho_solve_numpy(L, b)


def shifted_factor_solve(a, d, b):
    """Per-column ``(a + diag(d[:, j]))⁻¹ b[:, j]`` with the factors kept for
    reuse. ``info`` is the 1-based failing pivot of system ``column``."""
    a, d, b = (np.ascontiguousarray(x, dtype=np.float64) for x in (a, d, b))
    if USE_NUMBA and a.shape[0] <= JIT_MAX_DIM:
        Ls, z, info, col = shifted_factor_solve_numba(a, d, b)
    else:
        Ls, z, info, col = shifted_factor_solve_numpy(a, d, b)
    return Ls, z, int(info), int(col)


def batched_cho_solve(Ls, g):
    g = np.ascontiguousarray(g, dtype=np.float64)
    if USE_NUMBA and Ls.shape[1] <= JIT_MAX_DIM:
        return batched_cho_solve_numba(Ls, g)
    return batched_cho_solve_numpy(Ls, g)


def sqdist(q: np.ndarray, c: np.ndarray) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    if USE_NUMBA:
        return sqdist_numba(q, c)
    return sqdist_numpy(q, c)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
