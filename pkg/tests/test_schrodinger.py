from __future__ import annotations

import math

import numpy as np
import pytest

from gradamp.geometry import Region
from gradamp.herglotz import HerglotzKernel, circle_nodes, constant_kernel, make_u0
from gradamp.schrodinger import (Bump, CoefficientError, CoefficientSet, ComplexField, Grid2D,
                                 MatrixProfile, Operator, ScalarProfile, assemble_F1, assemble_F2,
                                 assemble_hat_c, eval_hat_N, hat_N_terms, integrate,
                                 mass_and_energy_diagnostics, power_nonlinearity, relative_l2,
                                 solve_linear_auxiliary, solve_linear_ibvp, solve_nonlinear_auxiliary,
                                 solve_nonlinear_cauchy)

D = Region.rectangle((-0.5, -0.5), (0.5, 0.5))
BUMP = Bump((0.0, 0.0), 0.45)
ROTATION = MatrixProfile("hermitian-rotation", BUMP, angle=0.6, contrast=0.2)
MOVING = MatrixProfile("hermitian-rotation", BUMP, angle=0.6, contrast=0.2, rate=0.5)


def small_grid(n=33, T=0.25, steps=8):
    return Grid2D(-1.0, 1.0, -1.0, 1.0, n, n, T / steps, T)


def smooth_kernel(n=32, seed=2, scale=0.3):
    nodes, w = circle_nodes(n)
    rng = np.random.default_rng(seed)
    return HerglotzKernel(2, nodes, w, scale * (rng.normal(size=n) + 1j * rng.normal(size=n)))


def nonlinear_set(amp=1.0):
    return CoefficientSet(MOVING, c=ScalarProfile(0.2 * amp, BUMP),
                          alphas={2: ScalarProfile((0.1 + 0.05j) * amp, BUMP),
                                  3: ScalarProfile(-0.05 * amp, BUMP)})


def plane_wave_error(n, T=1.0, angle=0.3):
    steps = int(round(T * (n - 1) / 1.6))
    grid = Grid2D(0.0, 2.0, 0.0, 2.0, n, n, T / steps, T)
    theta = np.array([math.cos(angle), math.sin(angle)])

    def exact(p, t):
        return np.exp(1j * (p @ theta - t))

    traj = solve_linear_ibvp(CoefficientSet(MatrixProfile("identity")), grid, lambda p: exact(p, 0.0),
                             exact, stride=steps)
    return np.max(np.abs(traj.final.values.ravel() - exact(grid.points(), T)))


class TestGrid:
    def test_validation(self):
        with pytest.raises(ValueError):
            Grid2D(0, 1, 0, 1, 8, 32, 0.1, 1.0)
        with pytest.raises(ValueError):
            Grid2D(0, 1, 0, 1, 32, 32, 0.3, 1.0)
        with pytest.raises(ValueError):
            Grid2D(1, 0, 0, 1, 32, 32, 0.1, 1.0)

    def test_around_square_cells(self):
        g = Grid2D.around((-2.4, -1.9), (2.4, 1.9), 257, 1 / 128, 1.0)
        assert g.nx == 257 and g.dx == pytest.approx(g.dy, rel=1e-12)
        assert g.y1 >= 1.9 and g.n_steps == 128

    def test_snapshot_round_trip(self, tmp_path):
        g = small_grid(17)
        rng = np.random.default_rng(0)
        f = ComplexField(g, rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape), 0.125)
        f.save(tmp_path / "s.txt")
        back = ComplexField.load(tmp_path / "s.txt", dt=g.dt, T=g.T)
        assert np.array_equal(back.values, f.values)
        assert back.time_stamp == 0.125
        assert back.grid.dx == g.dx and back.grid.x0 == g.x0
        head = (tmp_path / "s.txt").read_text().splitlines()[0].split()
        assert head[:2] == ["17", "17"] and len(head) == 7


class TestOperator:
    def test_hermitian(self):
        op = Operator(small_grid(), ROTATION)
        L_II, _ = op.blocks(0.0)
        diff = L_II - L_II.conj().T
        assert abs(diff).max() <= 1e-12 * abs(L_II).max()

    def test_consistency_order(self):
        profile = MatrixProfile("hermitian-rotation", Bump((0.1, -0.05), 0.6), angle=0.9, contrast=0.3)
        errs = []
        for n in (81, 161, 321):
            g = Grid2D(-1, 1, -1, 1, n, n, 0.1, 1.0)
            p = g.points()
            x, y = p[:, 0], p[:, 1]
            u = np.exp(-(x * x + y * y) + 1j * x)
            ux = (-2 * x + 1j) * u
            uy = -2 * y * u
            uxx = ((-2 * x + 1j) ** 2 - 2) * u
            uyy = (4 * y * y - 2) * u
            uxy = (-2 * x + 1j) * (-2 * y) * u
            M = profile.perturbation()
            chi, gchi = profile.bump.value(p), profile.bump.grad(p)
            grad = np.stack([ux, uy], 1)
            hess = np.stack([np.stack([uxx, uxy], 1), np.stack([uxy, uyy], 1)], 1)
            exact = (uxx + uyy + np.einsum("pi,ij,pj->p", gchi, M, grad)
                     + chi * np.einsum("ij,pij->p", M, hess))
            inner = np.all(np.abs(p) <= 0.9, axis=1)
            errs.append(np.max(np.abs(Operator(g, profile).full() @ u - exact)[inner]))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders > 1.7)


class TestConvergence:
    def test_plane_wave_order(self):
        errs = [plane_wave_error(n) for n in (17, 33, 65, 129)]
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all((orders >= 1.7) & (orders <= 2.3)), orders

    def test_mass_conservation(self):
        g = small_grid(41, T=0.5, steps=20)
        p = g.points()
        init = np.exp(-8 * np.sum((p - 0.1) ** 2, axis=1) + 3j * p[:, 0]).reshape(g.shape)
        traj = integrate(g, ROTATION, init, stride=1)
        diag = mass_and_energy_diagnostics(traj, CoefficientSet(ROTATION))
        assert diag["mass_drift"] <= 1e-10
        moving = integrate(g, MOVING, init, stride=1)
        mass = np.array(moving.mass)
        assert np.max(np.abs(mass - mass[0])) <= 1e-10 * mass[0]

    def test_mass_balance_with_source(self):
        g = small_grid(33, T=0.25, steps=10)
        p = g.points()
        rng = np.random.default_rng(1)
        init = (rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape)) * 1e-2
        shape = np.exp(-10 * np.sum(p * p, axis=1))
        src = lambda t: shape * np.exp(2j * t) * (1 + 0.5j)
        traj = integrate(g, ROTATION, init, source=src, stride=1)
        vals = [s.values.ravel() for s in traj.snapshots]
        interior = ~g.boundary_mask().ravel()
        for n in range(len(vals) - 1):
            lhs = (np.vdot(vals[n + 1], vals[n + 1]) - np.vdot(vals[n], vals[n])).real
            ubar = 0.5 * (vals[n + 1] + vals[n])
            fbar = 0.5 * (src((n + 1) * g.dt) + src(n * g.dt))
            rhs = 2 * g.dt * np.vdot(ubar[interior], fbar[interior]).imag
            assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-14)

    def test_iterative_matches_direct(self):
        g = small_grid(33)
        p = g.points()
        init = np.exp(-8 * np.sum(p * p, axis=1)).reshape(g.shape)
        a = integrate(g, ROTATION, init, stride=4)
        b = integrate(g, ROTATION, init, stride=4, solver="iterative")
        assert relative_l2(b.final.values, a.final.values) <= 1e-8


class TestUniqueness:
    def test_zero_data_exactly_zero(self):
        g = small_grid(33)
        zero_u0 = make_u0(constant_kernel(2, 16, 0.0))
        lin = CoefficientSet(ROTATION)
        nl = nonlinear_set()
        runs = [
            solve_linear_ibvp(lin, g, lambda p: np.zeros(len(p)), lambda p, t: np.zeros(len(p)), stride=2),
            solve_linear_auxiliary(lin, g, assemble_F1(lin, zero_u0), stride=2),
            solve_nonlinear_cauchy(nl, g, lambda p: np.zeros(len(p)), zero_u0, stride=2),
            solve_nonlinear_auxiliary(nl, g, assemble_F2(nl, zero_u0), assemble_hat_c(nl, zero_u0),
                                      zero_u0, stride=2),
        ]
        for traj in runs:
            assert all(np.all(s.values == 0) for s in traj.snapshots)
            assert np.all(traj.final.values == 0)


class TestSources:
    def test_F1_vanishes_for_identity(self):
        u0 = make_u0(smooth_kernel())
        coeffs = CoefficientSet(MatrixProfile("identity"))
        pts = small_grid().points()
        assert np.all(assemble_F1(coeffs, u0)(pts, 0.3) == 0)

    def test_F1_at_flat_point(self):
        # at the bump centre chi = 1 and grad chi = 0, so F1 = -a Laplacian u0 = a u0
        u0 = make_u0(smooth_kernel())
        profile = MatrixProfile("isotropic-bump", Bump((0.1, 0.2), 0.3), amplitude=0.4)
        F = assemble_F1(CoefficientSet(profile), u0)
        c = np.array([[0.1, 0.2]])
        assert F(c, 0.7)[0] == pytest.approx(0.4 * u0.value(c, 0.7)[0], rel=1e-12)

    def test_F1_matches_flux_difference(self):
        u0 = make_u0(smooth_kernel())
        coeffs = CoefficientSet(MOVING)
        x, h, t = np.array([0.13, -0.08]), 1e-4, 0.4

        def flux(p):
            p = np.atleast_2d(p)
            return np.einsum("pij,pj->pi", -coeffs.A.minus_identity(p, t), u0.grad(p, t))[0]

        div = sum((flux(x + h * e)[k] - flux(x - h * e)[k]) / (2 * h) for k, e in enumerate(np.eye(2)))
        assert assemble_F1(coeffs, u0)(x[None], t)[0] == pytest.approx(div, rel=1e-6)

    def test_F2_outside_support(self):
        u0 = make_u0(smooth_kernel())
        pts = np.array([[0.9, 0.9], [-0.6, 0.0]])
        assert np.all(assemble_F2(nonlinear_set(), u0)(pts, 0.2) == 0)

    def test_binomial_identity(self):
        rng = np.random.default_rng(5)
        u0 = rng.normal(size=200) + 1j * rng.normal(size=200)
        W = rng.normal(size=200) + 1j * rng.normal(size=200)
        for l0 in range(2, 7):
            alphas = {k: complex(*rng.normal(size=2)) for k in range(2, l0 + 1)}
            N = lambda u: sum(a * u ** k for k, a in alphas.items())
            c_lin = sum(k * a * u0 ** (k - 1) for k, a in alphas.items())
            lhs = N(u0 + W)
            rhs = N(u0) + c_lin * W + hat_N_terms(alphas, u0, W)
            assert np.max(np.abs(lhs - rhs)) <= 1e-12 * np.max(np.abs(lhs))

    def test_linearisation_matches_nonlinearity(self):
        coeffs = nonlinear_set()
        u0 = make_u0(smooth_kernel())
        g = small_grid(17)
        pts = g.points()
        R = power_nonlinearity(coeffs, pts)
        t = 0.3
        U0 = u0.value(pts, t)
        rng = np.random.default_rng(6)
        W = 0.1 * (rng.normal(size=U0.size) + 1j * rng.normal(size=U0.size))
        hatN = eval_hat_N(coeffs, u0, ComplexField(g, W.reshape(g.shape), t), t).values.ravel()
        lhs = R(U0 + W, t) - R(U0, t)
        rhs = assemble_hat_c(coeffs, u0)(pts)(t) * W + hatN
        assert np.max(np.abs(lhs - rhs)) <= 1e-13 * max(np.max(np.abs(lhs)), 1.0)


class TestCoefficients:
    def test_validation_errors(self):
        with pytest.raises(CoefficientError):
            CoefficientSet(ROTATION, alphas={7: ScalarProfile(0.1, BUMP)}).validate(D)
        with pytest.raises(CoefficientError):
            CoefficientSet(MatrixProfile("isotropic-bump", Bump((0.4, 0.0), 0.3), amplitude=0.1)).validate(D)
        with pytest.raises(CoefficientError):
            CoefficientSet(MatrixProfile("hermitian-rotation", BUMP, angle=2.0, contrast=0.4)).validate(D)
        with pytest.raises(CoefficientError):
            CoefficientSet(MatrixProfile("hermitian-rotation", BUMP, contrast=0.4, rate=1.0)).validate(D)
        nonlinear_set().validate(D)
        CoefficientSet(MatrixProfile("hermitian-rotation", BUMP, angle=0.78, contrast=0.6)).validate(D)

    def test_profile_values(self):
        x = np.array([[0.0, 0.0], [0.44, 0.0], [0.5, 0.0]])
        A = ROTATION.eval(x)
        assert np.allclose(A[0], np.eye(2) + 0.2 * np.array([[math.cos(0.6), 1j * math.sin(0.6)],
                                                             [-1j * math.sin(0.6), math.cos(0.6)]]))
        assert np.allclose(A[2], np.eye(2))
        assert np.allclose(A, np.conj(np.transpose(A, (0, 2, 1))))


class TestDecomposition:
    def test_identity_coefficients_give_u0(self):
        g = small_grid(33)
        u0 = make_u0(smooth_kernel())
        coeffs = CoefficientSet(MatrixProfile("identity"))
        aux = solve_linear_auxiliary(coeffs, g, assemble_F1(coeffs, u0), stride=8)
        assert np.all(aux.final.values == 0)
        direct = solve_linear_ibvp(coeffs, g, lambda p: u0.value(p, 0.0), u0.value, stride=8)
        assert relative_l2(direct.final.values.ravel(), u0.value(g.points(), g.T)) <= 5e-3

    def test_linear_equivalence_small(self):
        g = small_grid(65, T=0.5, steps=32)
        u0 = make_u0(smooth_kernel())
        coeffs = CoefficientSet(ROTATION)
        direct = solve_linear_ibvp(coeffs, g, lambda p: u0.value(p, 0.0), u0.value, stride=8)
        aux = solve_linear_auxiliary(coeffs, g, assemble_F1(coeffs, u0), stride=8)
        recombined = u0.value(g.points(), g.T) + aux.final.values.ravel()
        assert relative_l2(recombined, direct.final.values.ravel()) <= 5e-3
        assert np.linalg.norm(aux.final.values) > 0

    def test_nonlinear_equivalence_small(self):
        g = small_grid(65, T=0.5, steps=32)
        u0 = make_u0(smooth_kernel())
        coeffs = nonlinear_set()
        direct = solve_nonlinear_cauchy(coeffs, g, lambda p: u0.value(p, 0.0), u0, stride=8)
        aux = solve_nonlinear_auxiliary(coeffs, g, assemble_F2(coeffs, u0), assemble_hat_c(coeffs, u0),
                                        u0, stride=8)
        recombined = u0.value(g.points(), g.T) + aux.final.values.ravel()
        assert relative_l2(recombined, direct.final.values.ravel()) <= 5e-3
        assert max(direct.picard_counts) <= 8 and max(aux.picard_counts) <= 8

    def test_auxiliary_shrinks_with_kernel_scale(self):
        g = small_grid(33)
        base = smooth_kernel()
        lin = CoefficientSet(ROTATION)
        nl = nonlinear_set()
        lin_norms, nl_norms = [], []
        for s in (1.0, 0.5, 0.25):
            u0 = make_u0(base.scaled(s))
            lin_norms.append(solve_linear_auxiliary(lin, g, assemble_F1(lin, u0), stride=8).final.l2_norm())
            nl_norms.append(solve_nonlinear_auxiliary(nl, g, assemble_F2(nl, u0), assemble_hat_c(nl, u0),
                                                      u0, stride=8).final.l2_norm())
        assert lin_norms[1] == pytest.approx(0.5 * lin_norms[0], rel=1e-10)
        assert lin_norms[2] == pytest.approx(0.25 * lin_norms[0], rel=1e-10)
        assert nl_norms[0] > nl_norms[1] > nl_norms[2] > 0

    def test_snapshot_count_and_times(self):
        g = small_grid(17, T=1.0, steps=16)
        traj = integrate(g, ROTATION, np.zeros(g.shape, complex), stride=5)
        assert len(traj.snapshots) == 16 // 5 + 1
        assert traj.times == pytest.approx([0.0, 5 / 16, 10 / 16, 15 / 16])
        assert traj.final.time_stamp == pytest.approx(1.0)
