"""Bessel functions of the first kind, their zeros, Ferrers functions and
spherical harmonics.

Only real, non-negative orders and arguments are supported. Integer orders
drive the planar modes and half-integer orders the spherical ones.

Conventions
-----------
* ``assoc_legendre`` includes the Condon-Shortley phase ``(-1)^m``.
* ``spherical_harmonic(m, l, theta, phi)`` uses degree ``m`` and order ``l``
  with ``theta`` the polar angle.
"""
from __future__ import annotations

import math

import numpy as np

from ._kernels import USE_NUMBA, maybe_njit

# Series terms may grow to this multiple of the sum before the
# result is considered too cancellation-prone (about 3 digits lost).
_SERIES_GROWTH_LIMIT = 1.0e3
_RESCALE = 1.0e250


class DomainError(ValueError):
    """Argument outside the supported domain."""


# ---------------------------------------------------------------------------
# Scalar cores (compiled when numba is active)
# ---------------------------------------------------------------------------

@maybe_njit
def _scaled_series(nu, x):
    """Return ``(S, peak)`` with ``S = sum_k (-x^2/4)^k / (k! (nu+1)_k)``.

    ``peak`` is the largest absolute term, used to detect cancellation.
    """
    q = -0.25 * x * x
    term = 1.0
    total = 1.0
    peak = 1.0
    k = 0
    while k < 2000:
        k += 1
        term *= q / (k * (nu + k))
        total += term
        a = abs(term)
        if a > peak:
            peak = a
        # stop once terms are shrinking and negligible
        if k * (nu + k) > -q and a <= 1.0e-17 * abs(total):
            break
    return total, peak


@maybe_njit
def _miller(nu, x):
    """Backward recurrence for J_nu(x), x > 0.

    Normalised by the closed forms of J_{1/2}, J_{3/2} for half-integer
    orders, otherwise by ``(x/2)^a = sum_k (a+2k) Gamma(a+k)/k! J_{a+2k}``
    where ``a`` is the fractional part of ``nu``.
    """
    n = int(math.floor(nu))
    frac = nu - n
    half = abs(frac - 0.5) < 1.0e-14
    big = max(float(n), x)
    top = int(big + math.sqrt(40.0 * big + 40.0)) + 24
    if top % 2 == 1:
        top += 1
    nxt = 0.0
    cur = 1.0e-300
    value = 0.0
    norm_sum = 0.0
    j0 = 0.0
    j1 = 0.0
    mu = top
    while True:
        if mu == n:
            value = cur
        if half:
            if mu == 0:
                j0 = cur
            elif mu == 1:
                j1 = cur
        elif mu % 2 == 0:
            k = mu // 2
            if k == 0:
                coef = math.exp(math.lgamma(frac + 1.0))
            else:
                coef = (frac + 2.0 * k) * math.exp(math.lgamma(frac + k) - math.lgamma(k + 1.0))
            norm_sum += coef * cur
        if mu == 0:
            break
        prev = 2.0 * (frac + mu) / x * cur - nxt
        nxt = cur
        cur = prev
        mu -= 1
        if abs(cur) > _RESCALE:
            cur /= _RESCALE
            nxt /= _RESCALE
            value /= _RESCALE
            norm_sum /= _RESCALE
            j0 /= _RESCALE
            j1 /= _RESCALE
    if half:
        pref = math.sqrt(2.0 / (math.pi * x))
        exact0 = pref * math.sin(x)
        exact1 = pref * (math.sin(x) / x - math.cos(x))
        if abs(exact0) >= abs(exact1):
            return value * exact0 / j0
        return value * exact1 / j1
    return value * math.exp(frac * math.log(0.5 * x)) / norm_sum


@maybe_njit
def _bessel_scalar(nu, x):
    if x == 0.0:
        return 1.0 if nu == 0.0 else 0.0
    s, peak = _scaled_series(nu, x)
    if peak <= _SERIES_GROWTH_LIMIT * abs(s):
        return s * math.exp(nu * math.log(0.5 * x) - math.lgamma(nu + 1.0))
    return _miller(nu, x)


@maybe_njit
def _bessel_scaled_scalar(nu, x):
    """``Gamma(nu+1) (x/2)^(-nu) J_nu(x)``, finite at x = 0."""
    if x == 0.0:
        return 1.0
    s, peak = _scaled_series(nu, x)
    if peak <= _SERIES_GROWTH_LIMIT * abs(s):
        return s
    return _miller(nu, x) * math.exp(math.lgamma(nu + 1.0) - nu * math.log(0.5 * x))


@maybe_njit
def _bessel_array(nu, xs):
    out = np.empty(xs.shape[0])
    for i in range(xs.shape[0]):
        out[i] = _bessel_scalar(nu, xs[i])
    return out


@maybe_njit
def _bessel_scaled_array(nu, xs):
    out = np.empty(xs.shape[0])
    for i in range(xs.shape[0]):
        out[i] = _bessel_scaled_scalar(nu, xs[i])
    return out


def _apply(array_fn, nu, x):
    nu = float(nu)
    if nu < 0.0:
        raise DomainError(f"order must be non-negative, got {nu}")
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(~np.isfinite(arr)):
        raise DomainError("argument must be finite and non-negative")
    flat = np.ascontiguousarray(arr.reshape(-1))
    out = array_fn(nu, flat).reshape(arr.shape)
    if out.ndim == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def bessel_j(nu, x):
    """Bessel function of the first kind ``J_nu(x)`` for ``nu, x >= 0``.

    Uses the power series while its terms stay within three orders of
    magnitude of the sum, and normalised backward recurrence otherwise.

    Parameters
    ----------
    nu : float
        Non-negative order.
    x : float or array_like
        Non-negative argument(s).
    """
    return _apply(_bessel_array, nu, x)


def bessel_j_scaled(nu, x):
    """Return ``Gamma(nu+1) (x/2)^(-nu) J_nu(x)``.

    This is the power series without its leading factor. It equals 1 at the
    origin and never underflows for small ``x``.
    """
    return _apply(_bessel_scaled_array, nu, x)


def bessel_jp(nu, x):
    """Derivative ``J_nu'(x)``, from ``(nu/x) J_nu - J_{nu+1}`` for ``x > 0``."""
    nu = float(nu)
    arr = np.asarray(x, dtype=np.float64)
    jn = np.asarray(bessel_j(nu, arr))
    jn1 = np.asarray(bessel_j(nu + 1.0, arr))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(arr > 0.0, nu / np.where(arr > 0, arr, 1.0) * jn - jn1, 0.0)
    # J_nu'(0): 1/2 for nu = 1, 0 for nu > 1 and nu = 0; infinite for 0 < nu < 1.
    if nu == 1.0:
        out = np.where(arr == 0.0, 0.5, out)
    elif 0.0 < nu < 1.0:
        out = np.where(arr == 0.0, np.inf, out)
    if out.ndim == 0:
        return float(out)
    return out


def spherical_bessel_j(m, x):
    """Spherical Bessel function ``j_m(x) = sqrt(pi/(2x)) J_{m+1/2}(x)``.

    The origin is handled through the scaled series, so ``j_0(0) = 1`` and
    ``j_m(0) = 0`` for ``m >= 1``.
    """
    m = int(m)
    if m < 0:
        raise DomainError("m must be non-negative")
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0.0):
        raise DomainError("argument must be non-negative")
    nu = m + 0.5
    scaled = np.asarray(bessel_j_scaled(nu, arr))
    # sqrt(pi/(2x)) (x/2)^(m+1/2) / Gamma(m+3/2) = (sqrt(pi)/2) (x/2)^m / Gamma(m+3/2)
    log_pref = 0.5 * math.log(math.pi) - math.log(2.0) - math.lgamma(nu + 1.0)
    with np.errstate(divide="ignore"):
        power = np.where(arr > 0.0, np.exp(m * np.log(np.where(arr > 0, arr, 1.0) / 2.0)),
                         1.0 if m == 0 else 0.0)
    out = math.exp(log_pref) * power * scaled
    if out.ndim == 0:
        return float(out)
    return out


def spherical_bessel_jp(m, x):
    """Derivative of ``j_m``: ``(m/x) j_m - j_{m+1}`` for ``x > 0``."""
    arr = np.asarray(x, dtype=np.float64)
    out = m / arr * np.asarray(spherical_bessel_j(m, arr)) - np.asarray(spherical_bessel_j(m + 1, arr))
    if out.ndim == 0:
        return float(out)
    return out


def bessel_zero(nu, s, *, scan_step=0.25):
    """The ``s``-th positive zero of ``J_nu``.

    The scan for sign changes starts at ``nu + 0.5``, which lies below the
    first zero for every ``nu >= 0``. Each bracket is narrowed by bisection
    to width 1e-6 and then polished with Newton's method.
    """
    nu = float(nu)
    s = int(s)
    if nu < 0.0:
        raise DomainError("order must be non-negative")
    if s < 1:
        raise DomainError("zero index must be >= 1")
    lo = nu + 0.5
    hi = nu + (s + 1) * math.pi + 2.0
    brackets: list[tuple[float, float]] = []
    while len(brackets) < s:
        grid = np.arange(lo, hi + scan_step, scan_step)
        vals = np.asarray(bessel_j(nu, grid))
        brackets = []
        for a, b, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
            if fa == 0.0:
                brackets.append((a, a))
            elif fa * fb < 0.0:
                brackets.append((a, b))
        hi += (s + 1) * math.pi
    a, b = brackets[s - 1]
    if a == b:
        return float(a)
    fa = bessel_j(nu, a)
    while b - a > 1.0e-6:
        c = 0.5 * (a + b)
        fc = bessel_j(nu, c)
        if fc == 0.0:
            return float(c)
        if fa * fc < 0.0:
            b = c
        else:
            a, fa = c, fc
    x = 0.5 * (a + b)
    for _ in range(50):
        step = bessel_j(nu, x) / bessel_jp(nu, x)
        x -= step
        if abs(step) < 1.0e-12 * max(1.0, abs(x)):
            break
    return float(x)


def assoc_legendre_normalized(n, m, x):
    """``sqrt((n-m)!/(n+m)!) P_n^m(x)``, with the Condon-Shortley phase.

    The scaled recurrence never overflows. Its magnitude stays below 1 on
    [-1, 1].
    """
    n = int(n)
    m = int(m)
    arr = np.asarray(x, dtype=np.float64)
    if m < 0 or m > n:
        raise DomainError("need 0 <= m <= n")
    if np.any(np.abs(arr) > 1.0):
        raise DomainError("x must lie in [-1, 1]")
    sin_part = np.sqrt(np.clip(1.0 - arr * arr, 0.0, None))
    diag = np.ones_like(arr)
    for k in range(1, m + 1):
        diag = -diag * math.sqrt((2.0 * k - 1.0) / (2.0 * k)) * sin_part
    if n == m:
        return diag
    prev = diag
    cur = arr * math.sqrt(2.0 * m + 1.0) * diag
    for deg in range(m + 2, n + 1):
        nxt = ((2.0 * deg - 1.0) * arr * cur
               - math.sqrt((deg + m - 1.0) * (deg - m - 1.0)) * prev) / math.sqrt((deg + m) * (deg - m))
        prev, cur = cur, nxt
    return cur


def assoc_legendre(n, m, x):
    """Ferrers associated Legendre function ``P_n^m(x)`` on ``[-1, 1]``.

    Includes the Condon-Shortley phase, so ``P_1^1(x) = -sqrt(1 - x^2)``.
    """
    scaled = assoc_legendre_normalized(n, m, x)
    factor = math.exp(0.5 * (math.lgamma(n + m + 1.0) - math.lgamma(n - m + 1.0)))
    out = scaled * factor
    if np.ndim(out) == 0:
        return float(out)
    return out


def spherical_harmonic(m, l, theta, phi):
    """Spherical harmonic of degree ``m`` and order ``l``.

    ``sqrt((2m+1)/(4 pi) (m-|l|)!/(m+|l|)!) P_m^{|l|}(cos theta) exp(i l phi)``
    """
    m = int(m)
    l = int(l)
    if m < 0 or abs(l) > m:
        raise DomainError("need |l| <= m")
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    radial = assoc_legendre_normalized(m, abs(l), np.clip(np.cos(theta), -1.0, 1.0))
    out = math.sqrt((2.0 * m + 1.0) / (4.0 * math.pi)) * radial * np.exp(1j * l * phi)
    if np.ndim(out) == 0:
        return complex(out)
    return out


def backend() -> str:
    """Name of the active backend for the scalar cores."""
    return "numba" if USE_NUMBA else "python"
