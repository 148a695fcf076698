from __future__ import annotations

import math

import mpmath as mp
import numpy as np
import pytest

from gradamp.geometry import Region, region_quadrature
from gradamp.specialfn import bessel_j, bessel_jp
from gradamp.transmission import (NoRootError, TransmissionMode, characteristic, eval_v, eval_v_grad,
                                  matching_alpha, min_mode_order, normalization_beta, peak_amplitude,
                                  peak_lower_bound, radial_peak, refraction_index, series_I,
                                  series_I_bound)


def series_oracle(index, m, r0):
    """I-series from mpmath Bessel values and quadrature, independent of the summation."""
    mp.mp.dps = 40
    nu = mp.mpf(m) + (mp.mpf(1) / 2 if index in (1, 2) else 0)
    r0 = mp.mpf(r0)

    def scaled(x):
        if x == 0:
            return mp.mpf(1)
        return mp.gamma(nu + 1) * (x / 2) ** (-nu) * mp.besselj(nu, x)

    if index in (1, 3):
        pref = mp.sqrt(2 * nu + 2) * (r0 ** mp.mpf(-1.5) if index == 1 else 1 / r0)
        return float(pref * (scaled(r0) - 1))
    K = mp.quad(lambda s: s ** (2 * nu + 1) * scaled(r0 * s) ** 2, [0, 1])
    return float((2 * nu + 2) * K - 1)


class TestModes:
    def test_center_and_phase(self):
        mode = TransmissionMode.build(2, 1, 0.5, (0.0, 0.0))
        assert abs(eval_v(mode, np.zeros((1, 2)))[0]) == 0.0
        mode = TransmissionMode.build(2, 5, 0.3, (1.0, 2.0))
        r = 0.2
        a = eval_v(mode, np.array([[1.0 + r, 2.0]]))[0]
        b = eval_v(mode, np.array([[1.0, 2.0 + r]]))[0]
        diff = (np.angle(b) - np.angle(a)) % (2 * math.pi)
        assert diff == pytest.approx((5 * math.pi / 2) % (2 * math.pi), abs=1e-12)

    @pytest.mark.parametrize("m,r0", [(4, 0.3), (1, 0.5), (10, 0.1)])
    def test_normalization_2d(self, m, r0):
        mode = TransmissionMode.build(2, m, r0, (0.1, 0.2))
        q = region_quadrature(Region.disk(mode.center, r0), r0 / 200, rule="gauss2")
        assert q.integrate(np.abs(eval_v(mode, q.points)) ** 2) == pytest.approx(1.0, abs=1e-4)

    def test_normalization_3d(self):
        mode = TransmissionMode.build(3, 4, 0.3, (0.0, 0.0, 0.0), l=2)
        rs, rw = np.polynomial.legendre.leggauss(40)
        rs, rw = 0.5 * 0.3 * (rs + 1), 0.5 * 0.3 * rw
        ts, tw = np.polynomial.legendre.leggauss(40)
        ph = 2 * math.pi * np.arange(80) / 80
        R, T, P = np.meshgrid(rs, np.arccos(ts), ph, indexing="ij")
        W = rw[:, None, None] * R ** 2 * tw[None, :, None] * (2 * math.pi / 80)
        pts = np.stack([R * np.sin(T) * np.cos(P), R * np.sin(T) * np.sin(P), R * np.cos(T)], -1)
        vals = eval_v(mode, pts.reshape(-1, 3)).reshape(R.shape)
        assert np.sum(W * np.abs(vals) ** 2) == pytest.approx(1.0, abs=1e-8)

    def test_matches_bessel_formula(self):
        m, r0 = 6, 0.3
        mode = TransmissionMode.build(2, m, r0, (0.0, 0.0))
        beta = normalization_beta(2, m, None, r0)
        x = np.array([[0.11, 0.07]])
        r, th = math.hypot(0.11, 0.07), math.atan2(0.07, 0.11)
        assert eval_v(mode, x)[0] == pytest.approx(beta * bessel_j(m, r) * np.exp(1j * m * th), rel=1e-12)

    def test_gradient_fd(self):
        mode = TransmissionMode.build(2, 6, 0.3, (0.4, -0.1))
        x = np.array([[0.55, 0.02]])
        h = 1e-6
        fd = [(eval_v(mode, x + h * e) - eval_v(mode, x - h * e))[0] / (2 * h) for e in np.eye(2)]
        assert np.allclose(eval_v_grad(mode, x)[0], fd, rtol=1e-7)

    def test_beta_monotone_in_r0(self):
        betas = [normalization_beta(2, 8, None, r0) for r0 in (0.5, 0.3, 0.2, 0.1)]
        assert all(b > a for a, b in zip(betas, betas[1:]))

    def test_log_space_extreme(self):
        mode = TransmissionMode.build(2, 400, 0.05, (0.0, 0.0))
        assert math.isinf(mode.beta)
        assert math.isfinite(mode.radial(0.05))
        assert mode.radial(0.05) == pytest.approx(radial_peak(2, 400, 0.05), rel=1e-10)

    def test_leading_order(self):
        m, r0 = 10, 0.1
        mode = TransmissionMode.build(2, m, r0, (0.0, 0.0))
        lead = math.sqrt(2 * m + 2) / r0 / math.sqrt(2 * math.pi)
        peak = mode.radial(r0)
        assert peak == pytest.approx(radial_peak(2, m, r0), rel=1e-12)
        slack = (abs(series_I(3, m, r0)) / math.sqrt(2 * math.pi) + lead * abs(series_I(4, m, r0))) * 1.01
        assert abs(peak - lead) <= slack

    def test_radial_monotone_3d(self):
        for m, r0 in [(3, 0.5), (8, 2.0)]:
            r = np.linspace(1e-3, r0, 500)
            vals = np.array([bessel_j(m + 0.5, x) for x in r]) / np.sqrt(r)
            assert np.all(np.diff(vals) >= 0)


class TestRefraction:
    @pytest.mark.parametrize("dim", [2, 3])
    def test_residual_and_matching(self, dim):
        m, r0 = 4, 0.6
        n = refraction_index(dim, m, r0)
        assert n > 1
        scale = abs(bessel_j(m, r0)) * m / r0
        assert abs(characteristic(dim, m, r0, n)) <= 1e-8 * max(scale, 1.0)
        if dim == 2:
            beta = normalization_beta(2, m, None, r0)
            alpha = matching_alpha(2, m, r0, n, beta)
            v, dv = beta * bessel_j(m, r0), beta * bessel_jp(m, r0)
            w, dw = alpha * bessel_j(m, n * r0), alpha * n * bessel_jp(m, n * r0)
            assert abs(w - v) <= 1e-8 * abs(v)
            assert abs(dw - dv) <= 1e-8 * abs(dv)

    def test_branch_order(self):
        assert refraction_index(2, 3, 0.5, 2) > refraction_index(2, 3, 0.5, 1)

    def test_errors(self):
        with pytest.raises(ValueError):
            refraction_index(2, 1, 2.0)
        with pytest.raises(NoRootError):
            refraction_index(2, 3, 0.5, n_max=1.01)


class TestSeries:
    @pytest.mark.parametrize("index", [1, 2, 3, 4])
    @pytest.mark.parametrize("m,r0", [(3, 0.5), (20, 0.1), (6, 1.7)])
    def test_against_oracle(self, index, m, r0):
        assert series_I(index, m, r0) == pytest.approx(series_oracle(index, m, r0), rel=1e-9, abs=1e-15)

    def test_bounds_and_decay(self):
        r0 = 0.1
        for index in (1, 2, 3, 4):
            lo, hi = abs(series_I(index, 200, r0)), abs(series_I(index, 20, r0))
            assert lo < hi
            assert lo <= series_I_bound(index, 200, r0)
            assert hi <= series_I_bound(index, 20, r0)
        assert abs(series_I(1, 100, r0)) < series_I_bound(1, 100, r0)

    def test_eventually_small(self):
        r0 = 0.5
        m = 1
        while max(abs(series_I(i, m, r0)) for i in (1, 2, 3, 4)) >= 1e-2:
            m += 1
        assert m < 2000


class TestPeak:
    @pytest.mark.parametrize("m", range(4, 17))
    @pytest.mark.parametrize("r0", [0.1, 0.25, 0.5])
    def test_peak_vs_grid(self, m, r0):
        mode = TransmissionMode.build(2, m, r0, (0.0, 0.0))
        point, value = peak_amplitude(mode)
        r = np.linspace(0, r0, 2000)
        grid = np.max(np.abs(eval_v(mode, np.stack([r, np.zeros_like(r)], 1))))
        assert abs(value - grid) <= 0.005 * grid
        assert np.linalg.norm(point) == pytest.approx(r0)
        if m >= min_mode_order(r0):
            assert value >= peak_lower_bound(2, m, r0)

    def test_peak_3d(self):
        mode = TransmissionMode.build(3, 8, 0.25, (0.0, 0.0, 0.0), l=8)
        point, value = peak_amplitude(mode)
        assert value >= math.sqrt(2 * 8 + 3) * 0.25 ** -1.5 / 16
        assert abs(eval_v(mode, point[None])[0]) == pytest.approx(value, rel=1e-9)

    def test_peak_3d_grid(self):
        for m, l, r0 in [(4, 2, 0.25), (6, 6, 0.5)]:
            mode = TransmissionMode.build(3, m, r0, (0.0, 0.0, 0.0), l=l)
            _, value = peak_amplitude(mode)
            th = np.linspace(0, math.pi, 2001)
            pts = r0 * np.stack([np.sin(th), np.zeros_like(th), np.cos(th)], 1)
            grid = np.max(np.abs(eval_v(mode, pts)))
            assert abs(value - grid) <= 0.005 * grid

    def test_min_mode_order(self):
        r0 = 0.25
        M = min_mode_order(r0)
        assert M >= 1
        for m in (M, M + 5):
            assert radial_peak(3, m, r0) > 0.5 * math.sqrt(2 * m + 3) * r0 ** -1.5
            assert radial_peak(2, m, r0) >= peak_lower_bound(2, m, r0)
        assert min_mode_order(0.1) >= 1
        assert min_mode_order(2.5) >= 3
