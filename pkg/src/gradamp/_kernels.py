"""Hot loops with an optional numba backend.

Every kernel here has a numba implementation and a pure-numpy one. The
numba path is used when numba imports cleanly and the environment variable
``GRADAMP_DISABLE_NUMBA`` is unset or ``0``. Both paths return identical
results up to floating-point reassociation.
"""
from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("GRADAMP_DISABLE_NUMBA", "0").strip().lower()

try:  # pragma: no cover - exercised implicitly by import
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG in ("", "0", "false", "no")


def maybe_njit(func):
    """Compile ``func`` with ``numba.njit(cache=True)`` when numba is active.

    The undecorated function stays reachable as ``func.py_func`` in both
    modes, so the pure-Python body can be benchmarked against the compiled one.
    """
    if USE_NUMBA:
        compiled = numba.njit(cache=True)(func)
        return compiled
    func.py_func = func
    return func


# ---------------------------------------------------------------------------
# Plane-wave sums
# ---------------------------------------------------------------------------

def _plane_wave_sum_numpy(points, nodes, coeffs, powers, chunk=4096):
    n_pts = points.shape[0]
    out = np.empty((powers.shape[0], n_pts), dtype=np.complex128)
    # factor[a, j] = prod_d (i theta_jd)^alpha_ad
    factors = np.ones((powers.shape[0], nodes.shape[0]), dtype=np.complex128)
    for a in range(powers.shape[0]):
        for d in range(nodes.shape[1]):
            if powers[a, d]:
                factors[a] *= (1j * nodes[:, d]) ** powers[a, d]
    weighted = (factors * coeffs[None, :]).T  # (N, K)
    for start in range(0, n_pts, chunk):
        stop = min(start + chunk, n_pts)
        phase = np.exp(1j * (points[start:stop] @ nodes.T))
        out[:, start:stop] = (phase @ weighted).T
    return out


def _plane_wave_sum_loop(points, nodes, coeffs, powers):
    n_pts = points.shape[0]
    n_nodes = nodes.shape[0]
    dim = nodes.shape[1]
    n_pow = powers.shape[0]
    weighted = np.empty((n_pow, n_nodes), dtype=np.complex128)
    for a in range(n_pow):
        for j in range(n_nodes):
            f = coeffs[j]
            for d in range(dim):
                for _ in range(powers[a, d]):
                    f = f * (1j * nodes[j, d])
            weighted[a, j] = f
    out = np.zeros((n_pow, n_pts), dtype=np.complex128)
    for p in range(n_pts):
        for j in range(n_nodes):
            arg = 0.0
            for d in range(dim):
                arg += points[p, d] * nodes[j, d]
            e = complex(np.cos(arg), np.sin(arg))
            for a in range(n_pow):
                out[a, p] += weighted[a, j] * e
    return out


if USE_NUMBA:
    _plane_wave_sum_jit = numba.njit(cache=True, fastmath=False)(_plane_wave_sum_loop)


def plane_wave_sum(points, nodes, coeffs, powers):
    """Evaluate ``sum_j c_j (i theta_j)^alpha exp(i x . theta_j)``.

    Parameters
    ----------
    points : (P, d) float array
    nodes : (N, d) float array of unit directions
    coeffs : (N,) complex array (quadrature weight already folded in)
    powers : (K, d) int array of multi-indices

    Returns
    -------
    (K, P) complex array
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    nodes = np.ascontiguousarray(nodes, dtype=np.float64)
    coeffs = np.ascontiguousarray(coeffs, dtype=np.complex128)
    powers = np.ascontiguousarray(powers, dtype=np.int64)
    if USE_NUMBA:
        return _plane_wave_sum_jit(points, nodes, coeffs, powers)
    return _plane_wave_sum_numpy(points, nodes, coeffs, powers)


# ---------------------------------------------------------------------------
# Hoelder pair maxima
# ---------------------------------------------------------------------------

def _holder_all_pairs_loop(points, grads):
    n = points.shape[0]
    best = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            dist2 = 0.0
            for d in range(points.shape[1]):
                diff = points[i, d] - points[j, d]
                dist2 += diff * diff
            if dist2 == 0.0:
                continue
            num2 = 0.0
            for d in range(grads.shape[1]):
                g = grads[i, d] - grads[j, d]
                num2 += g.real * g.real + g.imag * g.imag
            q = np.sqrt(num2) / dist2 ** 0.25
            if q > best:
                best = q
    return best


def _holder_listed_pairs_loop(points, grads, first, second):
    best = 0.0
    for k in range(first.shape[0]):
        i = first[k]
        j = second[k]
        dist2 = 0.0
        for d in range(points.shape[1]):
            diff = points[i, d] - points[j, d]
            dist2 += diff * diff
        if dist2 == 0.0:
            continue
        num2 = 0.0
        for d in range(grads.shape[1]):
            g = grads[i, d] - grads[j, d]
            num2 += g.real * g.real + g.imag * g.imag
        q = np.sqrt(num2) / dist2 ** 0.25
        if q > best:
            best = q
    return best


def _holder_all_pairs_numpy(points, grads, chunk=512):
    n = points.shape[0]
    best = 0.0
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        dx = points[start:stop, None, :] - points[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", dx, dx))
        dg = grads[start:stop, None, :] - grads[None, :, :]
        num = np.sqrt(np.einsum("ijk,ijk->ij", dg, dg.conj()).real)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(dist > 0.0, num / np.sqrt(dist), 0.0)
        best = max(best, float(q.max(initial=0.0)))
    return best


def _holder_listed_pairs_numpy(points, grads, first, second, chunk=1 << 18):
    best = 0.0
    for start in range(0, first.shape[0], chunk):
        i = first[start:start + chunk]
        j = second[start:start + chunk]
        dist = np.linalg.norm(points[i] - points[j], axis=1)
        num = np.linalg.norm(grads[i] - grads[j], axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(dist > 0.0, num / np.sqrt(dist), 0.0)
        if q.size:
            best = max(best, float(q.max()))
    return best


if USE_NUMBA:
    _holder_all_pairs_jit = numba.njit(cache=True)(_holder_all_pairs_loop)
    _holder_listed_pairs_jit = numba.njit(cache=True)(_holder_listed_pairs_loop)


def holder_all_pairs(points, grads):
    """Max of ``|g(x)-g(y)| / |x-y|^(1/2)`` over all unordered pairs."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    grads = np.ascontiguousarray(grads, dtype=np.complex128)
    if USE_NUMBA:
        return float(_holder_all_pairs_jit(points, grads))
    return _holder_all_pairs_numpy(points, grads)


def holder_listed_pairs(points, grads, first, second):
    """Same quotient as :func:`holder_all_pairs`, over the listed index pairs."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    grads = np.ascontiguousarray(grads, dtype=np.complex128)
    first = np.ascontiguousarray(first, dtype=np.int64)
    second = np.ascontiguousarray(second, dtype=np.int64)
    if USE_NUMBA:
        return float(_holder_listed_pairs_jit(points, grads, first, second))
    return _holder_listed_pairs_numpy(points, grads, first, second)
