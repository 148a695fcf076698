"""Normalised transmission eigenfunctions on balls.

A planar mode of order ``m`` on ``B_{r0}(y)`` is

    v(x) = beta_m J_m(r) exp(i m theta),   r = |x - y|,

with ``beta_m`` fixing the unit L2 norm on the ball. A spatial mode replaces
``J_m`` by the spherical Bessel ``j_m`` and the angular factor by
``Y_m^l``.

Near the origin ``J_m`` and ``beta_m`` under/overflow independently once ``m``
is large. All evaluations therefore go through the scaled series
``S_nu(x) = Gamma(nu+1) (x/2)^(-nu) J_nu(x)`` and the scaled integral

    K_nu(r0) = int_0^1 s^(2 nu + 1) S_nu(r0 s)^2 ds,

so that ``beta_m J_m(r) = (r/r0)^m S_m(r) / (r0 sqrt(2 pi K_m))`` stays O(sqrt(m)/r0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_legendre

from .specialfn import (
    assoc_legendre_normalized,
    bessel_j,
    bessel_j_scaled,
    bessel_zero,
    spherical_bessel_j,
    spherical_bessel_jp,
    spherical_harmonic,
    bessel_jp,
)


class NoRootError(RuntimeError):
    """No root of the characteristic equation in the scan window."""


class ScanLimitError(RuntimeError):
    """The mode-order scan exceeded its limit."""


def _bessel_order(dim: int, m: int) -> float:
    if dim == 2:
        return float(m)
    if dim == 3:
        return m + 0.5
    raise ValueError("dim must be 2 or 3")


_MAX_GAUSS_ORDER = 8192


def scaled_norm_integral(nu: float, r0: float, rtol: float = 1e-13) -> float:
    """``K = int_0^1 s^(2nu+1) S_nu(r0 s)^2 ds`` by Gauss-Legendre, doubling the order.

    The integrand is entire in ``s`` and takes one sign, so convergence is
    geometric once the order exceeds about ``nu + r0``.
    """
    order = max(32, int(nu + r0) + 16)
    prev, prev_change = None, math.inf
    while True:
        t, w = roots_legendre(order)
        s = 0.5 * (t + 1.0)
        vals = np.exp((2.0 * nu + 1.0) * np.log(s)) * np.asarray(bessel_j_scaled(nu, r0 * s)) ** 2
        val = 0.5 * float(np.dot(w, vals))
        if prev is not None:
            change = abs(val - prev)
            # stop at tolerance, at the roundoff floor (change no longer shrinks), or at the order cap
            if change <= rtol * abs(val) or change >= prev_change or order >= _MAX_GAUSS_ORDER:
                return val
            prev_change = change
        prev = val
        order *= 2


def log_radial_integral(dim: int, m: int, r0: float) -> float:
    """``log int_0^{r0} J_nu(r)^2 r dr`` with ``nu = m`` (2D) or ``m + 1/2`` (3D)."""
    nu = _bessel_order(dim, m)
    K = scaled_norm_integral(nu, r0)
    return (2.0 * math.log(r0) + 2.0 * nu * math.log(r0 / 2.0)
            - 2.0 * math.lgamma(nu + 1.0) + math.log(K))


def normalization_beta(dim: int, m: int, l: int | None, r0: float) -> float:
    """Normalisation constant making ``||v||_{L2(B_{r0})} = 1``.

    2D: ``1/sqrt(2 pi) / sqrt(int_0^{r0} J_m^2 r dr)``.
    3D: ``sqrt(2/pi) / sqrt(int_0^{r0} J_{m+1/2}^2 r dr)`` (independent of ``l``).

    The integral is evaluated in log form. The result is ``inf`` only when
    beta itself exceeds the double range.
    """
    if m < 1 or r0 <= 0:
        raise ValueError("need m >= 1 and r0 > 0")
    log_i = log_radial_integral(dim, m, r0)
    pref = -0.5 * math.log(2.0 * math.pi) if dim == 2 else 0.5 * math.log(2.0 / math.pi)
    log_beta = pref - 0.5 * log_i
    return math.exp(log_beta) if log_beta < 709.0 else math.inf


@dataclass(frozen=True)
class TransmissionMode:
    """One normalised mode ``v`` on ``B_{r0}(center)``.

    ``scaled_K`` is the scaled radial integral; ``beta`` is kept for
    reference (it overflows to ``inf`` for extreme ``m``/``r0``).
    """

    dim: int
    m: int
    l: int
    r0: float
    center: tuple
    beta: float
    scaled_K: float
    n_index: float | None = None

    @classmethod
    def build(cls, dim: int, m: int, r0: float, center, l: int | None = None,
              with_index: bool = False) -> "TransmissionMode":
        if m < 1:
            raise ValueError("mode order m must be >= 1")
        if r0 <= 0:
            raise ValueError("r0 must be positive")
        if l is None:
            l = m
        if dim == 3 and abs(l) > m:
            raise ValueError("need |l| <= m")
        center = tuple(float(c) for c in center)
        if len(center) != dim:
            raise ValueError("center dimension mismatch")
        nu = _bessel_order(dim, m)
        K = scaled_norm_integral(nu, r0)
        beta = normalization_beta(dim, m, l, r0)
        n_index = refraction_index(dim, m, r0, 1) if with_index else None
        return cls(dim, int(m), int(l) if dim == 3 else int(m), float(r0), center, beta, K, n_index)

    @property
    def nu(self) -> float:
        return _bessel_order(self.dim, self.m)

    @property
    def amplitude(self) -> float:
        """``1 / (r0 sqrt(K))`` times the angular normalisation."""
        if self.dim == 2:
            return 1.0 / (math.sqrt(2.0 * math.pi) * self.r0 * math.sqrt(self.scaled_K))
        return 1.0 / (math.sqrt(self.r0) * self.r0 * math.sqrt(self.scaled_K))

    def radial(self, r) -> np.ndarray:
        """Radial factor of ``v``: ``(r/r0)^m S_nu(r) * amplitude``."""
        r = np.asarray(r, dtype=np.float64)
        with np.errstate(divide="ignore"):
            power = np.where(r > 0, np.exp(self.m * np.log(np.where(r > 0, r, 1.0) / self.r0)), 0.0)
        return self.amplitude * power * np.asarray(bessel_j_scaled(self.nu, r))

    def to_dict(self) -> dict:
        return {"dim": self.dim, "m": self.m, "l": self.l, "r0": self.r0,
                "center": list(self.center), "beta": self.beta, "scaled_K": self.scaled_K,
                "n_index": self.n_index}


def _rel(mode: TransmissionMode, x) -> np.ndarray:
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    return pts - np.asarray(mode.center)


def eval_v(mode: TransmissionMode, x) -> np.ndarray:
    """Evaluate ``v`` at points ``x`` of shape ``(P, dim)``.

    The formula is used for every ``r >= 0``; callers restrict the domain.
    """
    d = _rel(mode, x)
    if mode.dim == 2:
        z = (d[:, 0] + 1j * d[:, 1]) / mode.r0
        r = np.abs(d[:, 0] + 1j * d[:, 1])
        return mode.amplitude * z ** mode.m * np.asarray(bessel_j_scaled(mode.nu, r))
    r = np.linalg.norm(d, axis=1)
    safe = np.where(r > 0, r, 1.0)
    theta = np.arccos(np.clip(d[:, 2] / safe, -1.0, 1.0))
    phi = np.arctan2(d[:, 1], d[:, 0])
    return mode.radial(r) * spherical_harmonic(mode.m, mode.l, theta, phi)


def eval_v_grad(mode: TransmissionMode, x) -> np.ndarray:
    """Gradient of a planar mode, shape ``(P, 2)`` complex.

    With ``z = (x1 + i x2)/r0`` the mode is ``A z^m S_m(r)``, so
    ``grad v = A [m z^(m-1) S_m(r) (1, i)/r0 - z^m S_{m+1}(r) (x1, x2)/(2(m+1))]``.
    """
    if mode.dim != 2:
        raise NotImplementedError("gradients are provided for planar modes only")
    d = _rel(mode, x)
    z = (d[:, 0] + 1j * d[:, 1]) / mode.r0
    r = np.hypot(d[:, 0], d[:, 1])
    m = mode.m
    s0 = np.asarray(bessel_j_scaled(m, r))
    s1 = np.asarray(bessel_j_scaled(m + 1, r))
    first = m * z ** (m - 1) * s0 / mode.r0
    second = z ** m * s1 / (2.0 * (m + 1))
    gx = first - second * d[:, 0]
    gy = 1j * first - second * d[:, 1]
    return mode.amplitude * np.stack([gx, gy], axis=1)


# ---------------------------------------------------------------------------
# Characteristic equation for the companion refraction index
# ---------------------------------------------------------------------------

def _log_derivative(nu: float, x: float) -> float:
    """``x J_nu'(x) / J_nu(x) = nu - x J_{nu+1}(x)/J_nu(x)``."""
    return nu - x * bessel_j(nu + 1.0, x) / bessel_j(nu, x)


def characteristic(dim: int, m: int, r0: float, n: float) -> float:
    """``n f'(n r0) f(r0) - f'(r0) f(n r0)`` with ``f = J_m`` or ``j_m``."""
    if dim == 2:
        return float(n * bessel_jp(m, n * r0) * bessel_j(m, r0) - bessel_jp(m, r0) * bessel_j(m, n * r0))
    return float(n * spherical_bessel_jp(m, n * r0) * spherical_bessel_j(m, r0)
                 - spherical_bessel_jp(m, r0) * spherical_bessel_j(m, n * r0))


def refraction_index(dim: int, m: int, r0: float, branch: int = 1, n_max: float | None = None,
                     tol: float = 1e-12) -> float:
    """The ``branch``-th nontrivial index ``n > 1`` solving the characteristic equation.

    Dividing by ``f(r0) f(n r0) / r0`` turns the equation into
    ``h(n r0) = h(r0)`` with ``h(x) = x f'(x)/f(x)``. Between consecutive
    zeros of ``f``, ``h`` falls monotonically from ``+inf`` to ``-inf``, so
    each interval ``(z_b/r0, z_{b+1}/r0)`` holds exactly one root. The spherical
    case has the same ``h`` as ``J_{m+1/2}`` up to a constant shift.
    """
    if m <= r0:
        raise ValueError("requires m > r0")
    if branch < 1:
        raise ValueError("branch must be >= 1")
    nu = _bessel_order(dim, m)
    z_lo = bessel_zero(nu, branch)
    z_hi = bessel_zero(nu, branch + 1)
    if n_max is None:
        n_max = z_hi / r0
    lo, hi = z_lo / r0, min(z_hi / r0, n_max)
    if hi <= lo or lo <= 1.0:
        raise NoRootError("no sign change in the scan window")
    target = _log_derivative(nu, r0)

    def phi(n):
        return _log_derivative(nu, n * r0) - target

    eps = 1e-9 * (hi - lo)
    a, b = lo + eps, hi - eps
    fa, fb = phi(a), phi(b)
    if not (fa > 0 > fb):
        raise NoRootError("no sign change in the scan window")
    while b - a > tol * max(1.0, a):
        c = 0.5 * (a + b)
        fc = phi(c)
        if fc > 0:
            a = c
        else:
            b = c
    return 0.5 * (a + b)


def matching_alpha(dim: int, m: int, r0: float, n_index: float, beta: float) -> float:
    """``alpha = f(r0)/f(n r0) * beta`` so that ``w = v`` on the sphere."""
    f = bessel_j if dim == 2 else spherical_bessel_j
    return float(f(m, r0) / f(m, n_index * r0) * beta)


# ---------------------------------------------------------------------------
# Series for the peak amplitude
# ---------------------------------------------------------------------------

def _series_coeffs(nu: float, q: float, tol: float, max_terms: int = 10000):
    """Return ``[g_k (-q)^k]`` with ``g_k = Gamma(nu+1)/(k! Gamma(nu+k+1))``.

    Stops after three consecutive terms below ``tol * (1 + |partial sum|)``.
    """
    terms = [1.0]
    partial = 0.0
    small = 0
    k = 0
    term = 1.0
    while k < max_terms:
        k += 1
        term *= -q / (k * (nu + k))
        terms.append(term)
        partial += term
        if abs(term) < tol * (1.0 + abs(partial)):
            small += 1
            if small >= 3:
                break
        else:
            small = 0
    return np.array(terms)


def series_I(index: int, m: int, r0: float, tol: float = 1e-17) -> float:
    """The correction series of the peak formulas.

    ``I_1``, ``I_2`` use ``nu = m + 1/2`` and ``I_3``, ``I_4`` use ``nu = m``.
    ``I_1``, ``I_3`` are single sums. ``I_2``, ``I_4`` are Cauchy products weighted by
    ``(2nu+2)/(2nu+2k+2)``. All Gamma ratios are formed iteratively.
    """
    if m < 1 or r0 <= 0:
        raise ValueError("need m >= 1 and r0 > 0")
    if index not in (1, 2, 3, 4):
        raise ValueError("index must be 1..4")
    nu = m + 0.5 if index in (1, 2) else float(m)
    q = (r0 / 2.0) ** 2
    a = _series_coeffs(nu, q, tol)
    if index in (1, 3):
        pref = math.sqrt(2.0 * nu + 2.0) * (r0 ** -1.5 if index == 1 else 1.0 / r0)
        return pref * float(np.sum(a[1:]))
    # Cauchy product: coefficient of (-q)^k is sum_{k1+k2=k} g_k1 g_k2
    conv = np.convolve(a, a)[1:]
    ks = np.arange(1, conv.size + 1)
    weights = (2.0 * nu + 2.0) / (2.0 * nu + 2.0 * ks + 2.0)
    out = 0.0
    partial = 0.0
    small = 0
    for term in conv * weights:
        out += term
        partial = out
        if abs(term) < tol * (1.0 + abs(partial)):
            small += 1
            if small >= 3:
                break
        else:
            small = 0
    return float(out)


def series_I_bound(index: int, m: int, r0: float) -> float:
    """Explicit bounds on ``|I_i|`` from the exponential majorant of the series."""
    q = (r0 / 2.0) ** 2
    if index == 1:
        return math.sqrt(2 * m + 3) / (m + 0.5) * r0 ** -1.5 * q * math.exp(q)
    if index == 2:
        return math.expm1(r0 * r0 / (2 * m + 3))
    if index == 3:
        return math.sqrt(2 * m + 2) / m / r0 * q * math.exp(q)
    if index == 4:
        return math.expm1(r0 * r0 / (2 * m + 2))
    raise ValueError("index must be 1..4")


def radial_peak(dim: int, m: int, r0: float) -> float:
    """Closed-form maximum of the radial factor on ``(0, r0]`` (attained at ``r0``).

    2D: ``(sqrt(2m+2)/r0 + I_3)/sqrt(1 + I_4) / sqrt(2 pi)``.
    3D: ``(sqrt(2m+3) r0^(-3/2) + I_1)/sqrt(1 + I_2)``.
    """
    if dim == 2:
        return ((math.sqrt(2 * m + 2) / r0 + series_I(3, m, r0))
                / math.sqrt(1.0 + series_I(4, m, r0)) / math.sqrt(2.0 * math.pi))
    return (math.sqrt(2 * m + 3) * r0 ** -1.5 + series_I(1, m, r0)) / math.sqrt(1.0 + series_I(2, m, r0))


def _max_abs_legendre(m: int, l: int) -> float:
    """Polar angle maximising ``|P_m^{|l|}(cos theta)|`` on ``[0, pi/2]``.

    A coarse scan isolates the best sample, then golden-section search
    refines within its two neighbours.
    """
    al = abs(l)

    def f(t):
        return -abs(float(assoc_legendre_normalized(m, al, math.cos(t))))

    grid = np.linspace(0.0, 0.5 * math.pi, 4 * m + 65)
    vals = np.abs(assoc_legendre_normalized(m, al, np.cos(grid)))
    k = int(np.argmax(vals))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, grid.size - 1)]
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - ratio * (b - a)
    d = a + ratio * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(80):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = f(d)
    t = 0.5 * (a + b)
    if -f(t) < vals[k]:
        t = grid[k]
    return float(t)


def peak_amplitude(mode: TransmissionMode, direction=None) -> tuple[np.ndarray, float]:
    """Maximising point on the sphere ``|x - y| = r0`` and ``max |v|`` there.

    Parameters
    ----------
    direction : array_like, optional
        Planar modes have constant ``|v|`` on the circle. This picks which
        point is returned (default ``+x``).
    """
    c = np.asarray(mode.center)
    if mode.m <= mode.r0:
        raise ValueError("requires m > r0")
    rad = radial_peak(mode.dim, mode.m, mode.r0)
    if mode.dim == 2:
        u = np.array([1.0, 0.0]) if direction is None else np.asarray(direction, float)
        u = u / np.linalg.norm(u)
        return c + mode.r0 * u, rad
    theta = _max_abs_legendre(mode.m, mode.l)
    ylm = abs(spherical_harmonic(mode.m, mode.l, theta, 0.0))
    point = c + mode.r0 * np.array([math.sin(theta), 0.0, math.cos(theta)])
    return point, rad * ylm


def peak_lower_bound(dim: int, m: int, r0: float) -> float:
    """Guaranteed peak: ``sqrt(2m+2)/(2 sqrt(2 pi) r0)`` in 2D, ``sqrt(2m+3) r0^(-3/2)/16`` in 3D."""
    if dim == 2:
        return math.sqrt(2 * m + 2) / (2.0 * math.sqrt(2.0 * math.pi) * r0)
    return math.sqrt(2 * m + 3) * r0 ** -1.5 / 16.0


def min_mode_order(r0: float, limit: int = 1_000_000) -> int:
    """Smallest ``m >= floor(r0) + 1`` meeting both radial peak thresholds.

    3D: radial peak ``> sqrt(2m+3) r0^(-3/2) / 2``. 2D: peak ``>=
    sqrt(2m+2)/(2 sqrt(2 pi) r0)``.
    """
    if r0 <= 0:
        raise ValueError("r0 must be positive")
    m = int(math.floor(r0)) + 1
    while m <= limit:
        ok3 = radial_peak(3, m, r0) > 0.5 * math.sqrt(2 * m + 3) * r0 ** -1.5
        ok2 = radial_peak(2, m, r0) >= peak_lower_bound(2, m, r0)
        if ok3 and ok2:
            return m
        m += 1
    raise ScanLimitError(f"no mode order <= {limit} satisfies the peak thresholds for r0={r0}")
