from __future__ import annotations

import math

import mpmath as mp
import numpy as np
import pytest

from gradamp.geometry import Region, place_centers
from gradamp.herglotz import (CollocationSet, FitError, FitTarget, HerglotzKernel, build_fit_target,
                              circle_nodes, constant_kernel, eval_H, eval_H_derivs, eval_H_grad,
                              exact_single_ball_kernel_2d, fit_kernel, helmholtz_residual,
                              kernel_report, load_kernel, make_u0, save_kernel, sweep_lambda)
from gradamp.transmission import TransmissionMode, eval_v, eval_v_grad

SQUARE = Region.rectangle((-0.5, -0.5), (0.5, 0.5))


def random_points(n, radius, seed=0):
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.uniform(0, 1, n))
    a = rng.uniform(0, 2 * math.pi, n)
    return np.stack([r * np.cos(a), r * np.sin(a)], 1)


def random_kernel(n=64, seed=1):
    nodes, w = circle_nodes(n)
    rng = np.random.default_rng(seed)
    return HerglotzKernel(2, nodes, w, rng.normal(size=n) + 1j * rng.normal(size=n))


def relative_residual(kernel, pts):
    d = eval_H_derivs(kernel, pts, 2)
    scale = np.abs(d[(0, 0)]) + np.abs(d[(2, 0)]) + np.abs(d[(0, 2)])
    return np.max(np.abs(helmholtz_residual(kernel, pts)) / np.maximum(scale, 1e-300))


@pytest.fixture(scope="module")
def single_ball():
    mode = TransmissionMode.build(2, 6, 0.3, (0.8, 0.1))
    return mode, build_fit_target([mode], None, 0.3)


@pytest.fixture(scope="module")
def two_site_target():
    sites = place_centers([(0.5, 0.0), (-0.5, 0.0)], 0.3, SQUARE)
    modes = [TransmissionMode.build(2, 4, 0.3, y) for y in sites.centers_y]
    return build_fit_target(modes, SQUARE, 0.3)


class TestEvaluation:
    def test_jacobi_anger_2d(self):
        kernel = constant_kernel(2, 256)
        pts = random_points(200, 5.0)
        mp.mp.dps = 30
        ref = np.array([2 * math.pi * float(mp.besselj(0, math.hypot(*p))) for p in pts])
        assert np.max(np.abs(eval_H(kernel, pts) - ref)) <= 1e-10

    def test_constant_kernel_3d(self):
        kernel = constant_kernel(3, 24)
        r = np.linspace(0.1, 4.0, 30)
        pts = np.stack([0.3 * r, -0.5 * r, math.sqrt(1 - 0.34) * r], 1)
        assert np.allclose(eval_H(kernel, pts), 4 * math.pi * np.sin(r) / r, atol=1e-10)

    def test_derivatives_fd(self):
        kernel = random_kernel()
        x = np.array([[0.3, -0.7]])
        h = 1e-5
        d = eval_H_derivs(kernel, x, 3)
        for a, e in (((1, 0), np.array([h, 0])), ((0, 1), np.array([0, h]))):
            fd = (eval_H(kernel, x + e) - eval_H(kernel, x - e)) / (2 * h)
            assert d[a][0] == pytest.approx(fd[0], rel=1e-8)
        fd = (eval_H_derivs(kernel, x + [0, h], 2)[(2, 0)] - eval_H_derivs(kernel, x - [0, h], 2)[(2, 0)]) / (2 * h)
        assert d[(2, 1)][0] == pytest.approx(fd[0], rel=1e-7)
        assert np.allclose(eval_H_grad(kernel, x)[0], [d[(1, 0)][0], d[(0, 1)][0]], rtol=1e-14)

    def test_helmholtz_identity(self):
        pts = random_points(100, 3.0, seed=4)
        assert relative_residual(random_kernel(), pts) <= 1e-10
        assert relative_residual(constant_kernel(2, 64), pts) <= 1e-10

    def test_translation(self):
        kernel = random_kernel()
        shift = np.array([0.4, -1.3])
        pts = random_points(20, 2.0)
        assert np.allclose(eval_H(kernel.translated(shift), pts), eval_H(kernel, pts - shift), atol=1e-11)

    def test_invalid_kernel(self):
        nodes, w = circle_nodes(16)
        with pytest.raises(ValueError):
            HerglotzKernel(2, 2 * nodes, w, np.ones(16, complex))
        with pytest.raises(ValueError):
            HerglotzKernel(2, nodes, -w, np.ones(16, complex))
        with pytest.raises(ValueError):
            HerglotzKernel(2, nodes, w, np.ones(16, complex), omega=2.0)


class TestExactKernel:
    def test_reproduces_mode(self):
        mode = TransmissionMode.build(2, 6, 0.3, (1.2, -0.4))
        kernel = exact_single_ball_kernel_2d(mode)
        pts = mode.center + random_points(300, 0.3)
        v = eval_v(mode, pts)
        # cancellation among coefficients of size beta / (2 pi) bounds the attainable accuracy
        assert np.max(np.abs(eval_H(kernel, pts) - v)) <= 1e-6 * np.max(np.abs(v))
        assert np.allclose(np.abs(kernel.coeffs), mode.beta / (2 * math.pi), rtol=1e-14)

    def test_self_convergence(self):
        mode = TransmissionMode.build(2, 8, 0.25, (0.0, 0.5))
        pts = mode.center + random_points(50, 0.25)
        a = eval_H(exact_single_ball_kernel_2d(mode, 96), pts)
        b = eval_H(exact_single_ball_kernel_2d(mode, 192), pts)
        assert np.max(np.abs(a - b)) <= 1e-14 * mode.beta

    def test_report_matches_fit_scale(self, single_ball):
        mode, target = single_ball
        rep = kernel_report(target, exact_single_ball_kernel_2d(mode))
        assert rep.per_set["ball0"]["eps_value"] <= 1e-6 * rep.per_set["ball0"]["target_rms"]


class TestFitting:
    def test_single_ball_oracle(self, single_ball):
        mode, target = single_ball
        kernel, rep = fit_kernel(target, 128, 0.0)
        pts = mode.center + random_points(400, 0.3, seed=7)
        v = eval_v(mode, pts)
        err = np.max(np.abs(eval_H(kernel, pts) - v)) / np.max(np.abs(v))
        assert err <= 1e-6
        grad_err = np.max(np.abs(eval_H_grad(kernel, pts) - eval_v_grad(mode, pts)))
        assert grad_err <= 1e-6 * np.max(np.abs(eval_v_grad(mode, pts)))

    def test_zero_target(self, two_site_target):
        sets = [CollocationSet(s.name, s.points, 0 * s.values, 0 * s.grads, s.point_weights, s.weight)
                for s in two_site_target.sets]
        kernel, rep = fit_kernel(FitTarget(sets), 64, 1e-6)
        assert np.all(kernel.coeffs == 0)
        assert rep.eps_hat == 0.0

    def test_monotone_in_nodes(self, two_site_target):
        lam = 1e-10
        eps = [fit_kernel(two_site_target, n, lam, method="svd")[1].eps_hat for n in (64, 128, 256)]
        assert eps[1] <= eps[0] * (1 + 1e-10)
        assert eps[2] <= eps[1] * (1 + 1e-10)

    def test_optimality(self, two_site_target):
        lam = 1e-8
        kernel, rep = fit_kernel(two_site_target, 64, lam, method="normal")
        base = kernel_report(two_site_target, kernel, lam=lam).objective
        assert base == pytest.approx(rep.objective, rel=1e-12)
        c = kernel.field_coeffs
        step = 1e-6 * np.linalg.norm(c)
        rng = np.random.default_rng(3)
        for j in rng.choice(c.size, 20, replace=False):
            for sign in (1, -1):
                for unit in (1, 1j):
                    g = kernel.coeffs.copy()
                    g[j] += sign * unit * step / kernel.weights[j]
                    moved = HerglotzKernel(2, kernel.nodes, kernel.weights, g)
                    assert kernel_report(two_site_target, moved, lam=lam).objective >= base * (1 - 1e-13)

    def test_solve_paths_agree(self, two_site_target):
        lam = 1e-6
        cs = [fit_kernel(two_site_target, 64, lam, method=m)[0].coeffs for m in ("normal", "svd", "qr")]
        scale = np.linalg.norm(cs[1])
        assert np.linalg.norm(cs[0] - cs[1]) <= 1e-6 * scale
        assert np.linalg.norm(cs[2] - cs[1]) <= 1e-6 * scale

    def test_smallness_transport(self, two_site_target):
        lam = sweep_lambda(two_site_target, 128).chosen
        kernel, rep = fit_kernel(two_site_target, 128, lam)
        d = rep.per_set["D"]
        eps_D = math.hypot(d["eps_value"], d["eps_grad"])
        X, Y = np.meshgrid(np.linspace(-0.5, 0.5, 101), np.linspace(-0.5, 0.5, 101), indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], 1)
        peak = np.max(np.abs(eval_H(kernel, pts)) + np.linalg.norm(eval_H_grad(kernel, pts), axis=1))
        assert peak <= 10 * eps_D

    def test_fitted_kernels_helmholtz(self, two_site_target):
        kernel, _ = fit_kernel(two_site_target, 64, 1e-8)
        assert relative_residual(kernel, random_points(100, 1.5, seed=9)) <= 1e-10

    def test_sweep_lambda(self, two_site_target):
        sweep = sweep_lambda(two_site_target, 64)
        assert sweep.chosen in sweep.lams
        assert np.all(np.diff(sweep.misfits) >= -1e-9 * sweep.misfits[:-1])
        assert np.all(np.diff(sweep.norms) <= 1e-9 * sweep.norms[:-1])

    def test_errors(self, two_site_target):
        with pytest.raises(ValueError):
            fit_kernel(two_site_target, 8)
        with pytest.raises(ValueError):
            fit_kernel(two_site_target, 64, -1.0)
        with pytest.raises(FitError):
            FitTarget([])
        s = two_site_target.sets[0]
        with pytest.raises(FitError):
            CollocationSet("bad", s.points, s.values * np.nan, s.grads, s.point_weights)


class TestKernelFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        kernel = random_kernel(48, seed=11)
        save_kernel(kernel, tmp_path / "k.txt")
        back = load_kernel(tmp_path / "k.txt")
        assert back.dim == 2 and back.omega == 1.0
        assert np.array_equal(back.nodes, kernel.nodes)
        assert np.array_equal(back.weights, kernel.weights)
        assert np.array_equal(back.coeffs, kernel.coeffs)

    def test_header_and_shape(self, tmp_path):
        save_kernel(constant_kernel(2, 16), tmp_path / "k.txt")
        lines = (tmp_path / "k.txt").read_text().splitlines()
        assert lines[:3] == ["2", "16", "1.0"] and len(lines) == 19
        (tmp_path / "k.txt").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ValueError):
            load_kernel(tmp_path / "k.txt")


class TestU0:
    def test_free_schrodinger(self):
        u0 = make_u0(random_kernel())
        pts = random_points(100, 2.0, seed=5)
        for t in (0.0, 0.37, 1.0):
            res = 1j * u0.dt(pts, t) + u0.laplacian(pts, t)
            assert np.max(np.abs(res)) <= 1e-10 * np.max(np.abs(u0.value(pts, t)))

    def test_phase_and_scaling(self):
        kernel = random_kernel()
        u0 = make_u0(kernel)
        pts = random_points(10, 1.0)
        assert np.allclose(u0.value(pts, 0.5), eval_H(kernel, pts) * np.exp(-0.5j))
        assert np.allclose(u0.scaled(0.25).grad(pts, 0.2), 0.25 * u0.grad(pts, 0.2))
