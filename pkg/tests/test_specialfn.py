from __future__ import annotations

import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradamp.specialfn import (DomainError, assoc_legendre, assoc_legendre_normalized, bessel_j,
                               bessel_jp, bessel_zero, spherical_bessel_j, spherical_bessel_jp,
                               spherical_harmonic)

# Frozen extended-precision values (mpmath, 40 digits).
J10_AT_5 = 0.0014678026473104741311
SPH_J3_AT_2 = 0.060722097662874828461
J0_ZERO_1 = 2.4048255576957727686
J1_ZERO_1 = 3.8317059702075123156
J0_ZERO_2 = 5.5200781102863106496
P8_3_AT_HALF = 149.45281174781940963


def series_oracle(nu, x, terms=80):
    """Direct power series in extended precision."""
    mp.mp.dps = 50
    x = mp.mpf(x)
    total = mp.mpf(0)
    for k in range(terms):
        total += (-1) ** k / (mp.factorial(k) * mp.gamma(k + nu + 1)) * (x / 2) ** (2 * k + nu)
    return float(total)


class TestBessel:
    def test_origin(self):
        assert bessel_j(0, 0.0) == 1.0
        assert bessel_j(3, 0.0) == 0.0

    def test_half_order_closed_form(self):
        assert abs(bessel_j(0.5, math.pi)) < 1e-15
        x = 2.7
        assert bessel_j(0.5, x) == pytest.approx(math.sqrt(2 / (math.pi * x)) * math.sin(x), rel=1e-13)

    def test_series_oracle(self):
        assert bessel_j(10, 5.0) == pytest.approx(J10_AT_5, rel=1e-12)
        assert bessel_j(10, 5.0) == pytest.approx(series_oracle(10, 5.0), rel=1e-12)

    @pytest.mark.parametrize("nu", [0, 1, 2.5, 6, 10, 17.5, 40])
    def test_against_mpmath_range(self, nu):
        mp.mp.dps = 30
        xs = np.linspace(0.05, 2 * nu + 50, 97)
        got = bessel_j(nu, xs)
        ref = np.array([float(mp.besselj(nu, x)) for x in xs])
        # relative error where the function is not near a zero
        scale = np.maximum(np.abs(ref), 1e-3 * np.max(np.abs(ref)))
        assert np.max(np.abs(got - ref) / scale) < 1e-12

    def test_recurrence_identity(self):
        xs = np.linspace(0.5, 30, 100)
        for m in range(1, 12):
            lhs = bessel_j(m - 1, xs) + bessel_j(m + 1, xs) - (2 * m / xs) * bessel_j(m, xs)
            assert np.all(np.abs(lhs) <= 1e-10 * (1 + np.abs(bessel_j(m, xs))))

    def test_derivative_matches_difference(self):
        x, h = 3.3, 1e-5
        fd = (bessel_j(4, x + h) - bessel_j(4, x - h)) / (2 * h)
        assert bessel_jp(4, x) == pytest.approx(fd, rel=1e-8)

    def test_domain(self):
        with pytest.raises(DomainError):
            bessel_j(1, -1.0)
        with pytest.raises(DomainError):
            bessel_j(-1, 1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.0, 20.0), st.floats(0.01, 60.0))
    def test_property_mpmath(self, nu, x):
        mp.mp.dps = 30
        ref = float(mp.besselj(nu, x))
        assert abs(bessel_j(nu, x) - ref) <= 1e-11 * max(abs(ref), 1e-2)


class TestSphericalBessel:
    def test_values(self):
        assert spherical_bessel_j(0, 1.0) == pytest.approx(math.sin(1.0), rel=1e-14)
        assert spherical_bessel_j(0, 1e-12) == pytest.approx(1.0, rel=1e-14)
        assert spherical_bessel_j(2, 0.0) == 0.0
        assert spherical_bessel_j(3, 2.0) == pytest.approx(SPH_J3_AT_2, rel=1e-12)

    def test_relation_to_half_order(self):
        for m in range(6):
            for x in (0.3, 2.0, 9.0):
                ref = math.sqrt(math.pi / (2 * x)) * bessel_j(m + 0.5, x)
                assert spherical_bessel_j(m, x) == pytest.approx(ref, rel=1e-12)

    def test_derivative(self):
        x, h = 1.7, 1e-5
        fd = (spherical_bessel_j(3, x + h) - spherical_bessel_j(3, x - h)) / (2 * h)
        assert spherical_bessel_jp(3, x) == pytest.approx(fd, rel=1e-7)


class TestZeros:
    def test_known(self):
        assert bessel_zero(0, 1) == pytest.approx(J0_ZERO_1, abs=1e-10)
        assert bessel_zero(0, 2) == pytest.approx(J0_ZERO_2, abs=1e-10)
        z = bessel_zero(1, 1)
        assert 1.0 < z < J0_ZERO_2
        assert z == pytest.approx(J1_ZERO_1, abs=1e-10)
        assert bessel_zero(5, 1) > 5

    @pytest.mark.parametrize("nu", range(11))
    def test_residual(self, nu):
        for s in (1, 2, 3):
            assert abs(bessel_j(nu, bessel_zero(nu, s))) <= 1e-8

    def test_against_mpmath(self):
        for nu in (0, 3, 7.5):
            for s in (1, 2):
                assert bessel_zero(nu, s) == pytest.approx(float(mp.besseljzero(nu, s)), abs=1e-10)

    def test_ordering(self):
        zs = [bessel_zero(2, s) for s in range(1, 6)]
        assert all(b > a for a, b in zip(zs, zs[1:]))


class TestLegendre:
    def test_values(self):
        assert assoc_legendre(0, 0, 0.3) == 1.0
        assert assoc_legendre(1, 1, 0.0) == pytest.approx(-1.0, abs=1e-15)
        assert assoc_legendre(8, 3, 0.5) == pytest.approx(P8_3_AT_HALF, rel=1e-12)

    def test_against_mpmath(self):
        mp.mp.dps = 30
        for n, m, x in [(5, 2, -0.3), (12, 7, 0.81), (20, 0, 0.99), (25, 25, 0.1)]:
            ref = float(mp.legenp(n, m, x, type=2))
            assert assoc_legendre(n, m, x) == pytest.approx(ref, rel=1e-11)

    def test_domain(self):
        with pytest.raises(DomainError):
            assoc_legendre(3, 4, 0.1)
        with pytest.raises(DomainError):
            assoc_legendre(3, 1, 1.5)

    def test_normalized_bracket(self):
        xs = np.linspace(-1, 1, 2001)
        for n in range(1, 31):
            for m in range(1, n + 1):
                peak = np.max(np.abs(assoc_legendre_normalized(n, m, xs)))
                assert 1 / math.sqrt(2.22 * (m + 1)) < peak < 2 ** 1.25 * math.pi ** -0.75 * m ** -0.25


def sphere_inner(f, g, n_theta=48, n_phi=96):
    t, w = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(t)
    phi = 2 * math.pi * np.arange(n_phi) / n_phi
    TH, PH = np.meshgrid(theta, phi, indexing="ij")
    W = np.outer(w, np.full(n_phi, 2 * math.pi / n_phi))
    return np.sum(W * f(TH, PH) * np.conj(g(TH, PH)))


class TestHarmonics:
    def test_values(self):
        assert spherical_harmonic(0, 0, 0.4, 1.1) == pytest.approx(1 / math.sqrt(4 * math.pi))
        assert spherical_harmonic(1, 0, 0.0, 0.0) == pytest.approx(math.sqrt(3 / (4 * math.pi)))
        with pytest.raises(DomainError):
            spherical_harmonic(2, 3, 0.1, 0.1)

    def test_norm_y53(self):
        y = lambda th, ph: spherical_harmonic(5, 3, th, ph)
        assert abs(sphere_inner(y, y) - 1) < 1e-8

    def test_orthonormal(self):
        pairs = [(m, l) for m in range(7) for l in range(-m, m + 1)]
        for a in pairs:
            for b in pairs:
                val = sphere_inner(lambda th, ph: spherical_harmonic(*a, th, ph),
                                   lambda th, ph: spherical_harmonic(*b, th, ph))
                assert abs(val - (a == b)) < 1e-8
