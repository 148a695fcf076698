"""Herglotz wave functions: evaluation, closed-form kernels and least-squares fits.

A kernel is a quadrature rule on the unit circle or sphere (nodes ``theta_j``,
weights ``w_j``) with density samples ``g_j``. Its field is

    H(x) = sum_j w_j g_j exp(i x . theta_j),

which solves ``(Delta + 1) H = 0`` exactly, node by node.

Fits work with the field coefficients ``c_j = w_j g_j``. Nested node sets then
give nested models with identical penalties. A penalty on ``g`` itself
scales with ``1/w_j`` and would break that nesting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._kernels import plane_wave_sum
from .geometry import Region, Shape, region_quadrature, smooth_outer_approx
from .transmission import TransmissionMode, eval_v, eval_v_grad

OMEGA = 1.0


class FitError(RuntimeError):
    """The fitter could not produce a kernel."""


@dataclass(frozen=True)
class HerglotzKernel:
    dim: int
    nodes: np.ndarray
    weights: np.ndarray
    coeffs: np.ndarray
    omega: float = OMEGA

    def __post_init__(self):
        if self.omega != OMEGA:
            raise ValueError("only omega = 1 is supported")
        if self.nodes.shape != (self.weights.size, self.dim) or self.coeffs.size != self.weights.size:
            raise ValueError("nodes, weights and coeffs are inconsistent")
        if np.any(np.abs(np.linalg.norm(self.nodes, axis=1) - 1.0) > 1e-14):
            raise ValueError("nodes must be unit vectors")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")

    @property
    def n_nodes(self) -> int:
        return int(self.weights.size)

    @property
    def field_coeffs(self) -> np.ndarray:
        return self.weights * self.coeffs

    def scaled(self, factor: complex) -> "HerglotzKernel":
        return HerglotzKernel(self.dim, self.nodes, self.weights, self.coeffs * factor)

    def translated(self, shift) -> "HerglotzKernel":
        """Kernel whose field is ``H(x - shift)``."""
        phase = np.exp(-1j * self.nodes @ np.asarray(shift, dtype=np.float64))
        return HerglotzKernel(self.dim, self.nodes, self.weights, self.coeffs * phase)


def circle_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoid nodes on the unit circle, weights ``2 pi / n``."""
    ang = 2.0 * math.pi * np.arange(n) / n
    nodes = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return nodes, np.full(n, 2.0 * math.pi / n)


def sphere_nodes(n_theta: int, n_phi: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre in ``cos(theta)`` times trapezoid in ``phi``."""
    t, w = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * math.pi * np.arange(n_phi) / n_phi
    T, P = np.meshgrid(t, phi, indexing="ij")
    s = np.sqrt(1.0 - T ** 2)
    nodes = np.stack([s * np.cos(P), s * np.sin(P), T], axis=-1).reshape(-1, 3)
    nodes /= np.linalg.norm(nodes, axis=1, keepdims=True)
    weights = (w[:, None] * np.full(n_phi, 2.0 * math.pi / n_phi)[None, :]).ravel()
    return nodes, weights


def constant_kernel(dim: int, n: int, value: complex = 1.0) -> HerglotzKernel:
    if dim == 2:
        nodes, w = circle_nodes(n)
    else:
        nodes, w = sphere_nodes(n, 2 * n)
    return HerglotzKernel(dim, nodes, w, np.full(w.size, complex(value)))


def _points(x, dim):
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[1] != dim:
        raise ValueError("point dimension does not match kernel")
    return pts


def eval_H(kernel: HerglotzKernel, x) -> np.ndarray:
    """Field values at points ``x`` of shape ``(P, dim)``."""
    pts = _points(x, kernel.dim)
    powers = np.zeros((1, kernel.dim), dtype=np.int64)
    return plane_wave_sum(pts, kernel.nodes, kernel.field_coeffs, powers)[0]


def multi_indices(dim: int, max_order: int) -> list[tuple]:
    out = []
    for total in range(max_order + 1):
        if dim == 2:
            out += [(total - k, k) for k in range(total + 1)]
        else:
            for a in range(total, -1, -1):
                for b in range(total - a, -1, -1):
                    out.append((a, b, total - a - b))
    return out


def eval_H_derivs(kernel: HerglotzKernel, x, max_order: int = 1) -> dict[tuple, np.ndarray]:
    """All partial derivatives up to ``max_order`` (at most 3).

    Returns a dict keyed by multi-index, e.g. ``(1, 0)`` for ``d/dx1``.
    """
    if not 0 <= max_order <= 3:
        raise ValueError("max_order must be in 0..3")
    pts = _points(x, kernel.dim)
    idx = multi_indices(kernel.dim, max_order)
    vals = plane_wave_sum(pts, kernel.nodes, kernel.field_coeffs, np.array(idx, dtype=np.int64))
    return {a: vals[k] for k, a in enumerate(idx)}


def eval_H_grad(kernel: HerglotzKernel, x) -> np.ndarray:
    """Gradient, shape ``(P, dim)``."""
    pts = _points(x, kernel.dim)
    powers = np.eye(kernel.dim, dtype=np.int64)
    return plane_wave_sum(pts, kernel.nodes, kernel.field_coeffs, powers).T


def helmholtz_residual(kernel: HerglotzKernel, x) -> np.ndarray:
    """``(Delta + 1) H`` at ``x``; zero up to rounding for every kernel."""
    d = eval_H_derivs(kernel, x, 2)
    lap = sum(d[a] for a in d if sum(a) == 2 and max(a) == 2)
    zero = (0,) * kernel.dim
    return lap + d[zero]


def exact_single_ball_kernel_2d(mode: TransmissionMode, n_nodes: int | None = None) -> HerglotzKernel:
    """Closed-form kernel reproducing a planar mode everywhere.

    ``g(theta) = beta exp(i m theta) exp(-i y . theta) / (2 pi i^m)``.
    Jacobi-Anger then gives ``H(x) = beta J_m(|x - y|) exp(i m arg(x - y))``.
    """
    if mode.dim != 2:
        raise ValueError("closed-form kernels exist for planar modes only")
    if not math.isfinite(mode.beta):
        raise FitError("beta overflows for this mode")
    if n_nodes is None:
        n_nodes = 4 * mode.m + 64
    nodes, w = circle_nodes(n_nodes)
    ang = 2.0 * math.pi * np.arange(n_nodes) / n_nodes
    y = np.asarray(mode.center)
    g = mode.beta * np.exp(1j * mode.m * ang - 1j * nodes @ y) / (2.0 * math.pi * (1j) ** mode.m)
    return HerglotzKernel(2, nodes, w, g)


# ---------------------------------------------------------------------------
# Kernel files
# ---------------------------------------------------------------------------

def save_kernel(kernel: HerglotzKernel, path) -> None:
    """Text table: 3 header lines (dim, n_nodes, omega), then one row per node."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{kernel.dim}\n{kernel.n_nodes}\n{kernel.omega!r}\n")
        for th, w, g in zip(kernel.nodes, kernel.weights, kernel.coeffs):
            cols = [*th, w, g.real, g.imag]
            fh.write(" ".join(f"{c:.17g}" for c in cols) + "\n")


def load_kernel(path) -> HerglotzKernel:
    with open(path, encoding="utf-8") as fh:
        dim = int(fh.readline())
        n = int(fh.readline())
        omega = float(fh.readline())
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (n, dim + 3):
        raise ValueError(f"kernel table has shape {data.shape}, expected {(n, dim + 3)}")
    return HerglotzKernel(dim, data[:, :dim].copy(), data[:, dim].copy(),
                          data[:, dim + 1] + 1j * data[:, dim + 2], omega)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

@dataclass
class CollocationSet:
    """Points with target values/gradients and per-point quadrature weights."""

    name: str
    points: np.ndarray
    values: np.ndarray
    grads: np.ndarray
    point_weights: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        if self.points.shape[0] == 0:
            raise FitError(f"collocation set {self.name!r} is empty")
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.grads))):
            raise FitError(f"collocation set {self.name!r} has non-finite targets")


@dataclass
class FitTarget:
    sets: list[CollocationSet]
    dim: int = 2

    def __post_init__(self):
        if not self.sets:
            raise FitError("fit target has no collocation sets")


def ball_collocation(mode: TransmissionMode, n_radial: int = 20, n_angular: int | None = None,
                     weight: float = 1.0, name: str | None = None) -> CollocationSet:
    """Polar tensor grid on the mode's ball with targets ``v`` and ``grad v``."""
    if n_angular is None:
        n_angular = max(64, 8 * mode.m)
    r0 = mode.r0
    dr = r0 / n_radial
    r = (np.arange(n_radial) + 0.5) * dr
    a = 2.0 * math.pi * np.arange(n_angular) / n_angular
    R, A = np.meshgrid(r, a, indexing="ij")
    c = np.asarray(mode.center)
    pts = np.stack([c[0] + R.ravel() * np.cos(A.ravel()), c[1] + R.ravel() * np.sin(A.ravel())], axis=1)
    pw = (R * dr * (2.0 * math.pi / n_angular)).ravel()
    return CollocationSet(name or f"ball@{tuple(np.round(c, 6))}", pts, eval_v(mode, pts),
                          eval_v_grad(mode, pts), pw, weight)


def zero_collocation(region: Shape, h: float, weight: float = 1.0, name: str = "D") -> CollocationSet:
    q = region_quadrature(region, h)
    n = q.points.shape[0]
    return CollocationSet(name, q.points, np.zeros(n, complex), np.zeros((n, 2), complex), q.weights, weight)


def build_fit_target(modes: list[TransmissionMode], D: Region | None, r0: float, *,
                     n_radial: int = 20, n_angular: int | None = None, d_spacing: float | None = None,
                     ball_weight: float = 1.0, d_weight: float = 1.0) -> FitTarget:
    """Targets ``v_i`` on each ball and zero on the outer approximation ``D_{r0/4}``."""
    sets = [ball_collocation(md, n_radial, n_angular, ball_weight, name=f"ball{i}")
            for i, md in enumerate(modes)]
    if D is not None:
        outer = smooth_outer_approx(D, r0 / 4.0)
        sets.append(zero_collocation(outer, d_spacing or r0 / 4.0, d_weight, "D"))
    return FitTarget(sets, 2)


def _design(target: FitTarget, nodes: np.ndarray):
    """Weighted rows ``[E; i theta_1 E; i theta_2 E]`` and targets per set."""
    blocks, rhs, owners = [], [], []
    for k, s in enumerate(target.sets):
        sw = np.sqrt(s.weight * s.point_weights)[:, None]
        E = np.exp(1j * s.points @ nodes.T)
        blocks.append(sw * E)
        rhs.append(sw[:, 0] * s.values)
        for d in range(nodes.shape[1]):
            blocks.append(sw * E * (1j * nodes[:, d])[None, :])
            rhs.append(sw[:, 0] * s.grads[:, d])
        owners.append(np.full((1 + nodes.shape[1]) * s.points.shape[0], k))
    return np.vstack(blocks), np.concatenate(rhs), np.concatenate(owners)


def penalty_scale(target: FitTarget) -> float:
    """Common squared column norm ``sum w (1 + |theta|^2)``, independent of the nodes."""
    return float(sum(s.weight * s.point_weights.sum() * 2.0 for s in target.sets))


@dataclass
class FitReport:
    n_nodes: int
    lam: float
    method: str
    objective: float
    misfit: float
    coeff_norm: float
    eps_hat: float
    per_set: dict = field(default_factory=dict)
    condition: float = float("nan")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("n_nodes", "lam", "method", "objective", "misfit", "coeff_norm", "eps_hat",
                 "per_set", "condition")}


def _solve(A, b, lam, scale, method, rcond):
    """Minimise ``|A c - b|^2 + lam * scale * |c|^2``; returns ``(c, method, cond)``."""
    if method == "auto":
        s = scipy.linalg.svdvals(A)
        cond = s[0] / s[-1] if s[-1] > 0 else np.inf
        method = "normal" if cond < 1e6 else "svd"
    else:
        cond = float("nan")
    if method == "normal":
        G = A.conj().T @ A
        G[np.diag_indices_from(G)] += lam * scale
        rhs = A.conj().T @ b
        c = scipy.linalg.solve(G, rhs, assume_a="her")
    elif method == "svd":
        U, s, Vh = scipy.linalg.svd(A, full_matrices=False)
        cond = s[0] / s[-1] if s[-1] > 0 else np.inf
        beta = U.conj().T @ b
        if lam > 0:
            filt = s / (s * s + lam * scale)
        else:
            filt = np.where(s > rcond * s[0], 1.0 / np.where(s > 0, s, 1.0), 0.0)
        c = Vh.conj().T @ (filt * beta)
    elif method == "qr":
        if lam > 0:
            n = A.shape[1]
            A = np.vstack([A, math.sqrt(lam * scale) * np.eye(n)])
            b = np.concatenate([b, np.zeros(n, complex)])
        Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > rcond * diag[0]))
        y = scipy.linalg.solve_triangular(R[:rank, :rank], (Q.conj().T @ b)[:rank])
        c = np.zeros(A.shape[1], complex)
        c[piv[:rank]] = y
    else:
        raise ValueError(f"unknown method {method!r}")
    return c, method, cond


def fit_kernel(target: FitTarget, n_nodes: int, lam: float = 0.0, *, method: str = "auto",
               rcond: float = 1e-15) -> tuple[HerglotzKernel, FitReport]:
    """Regularised least-squares kernel on ``n_nodes`` trapezoid nodes.

    Minimises ``sum_sets weight sum_points w_p (|H - v|^2 + |grad H - grad v|^2)``
    plus ``lam * S * |c|^2``, where ``c`` are the field coefficients and
    ``S`` is :func:`penalty_scale`.

    ``method="auto"`` uses the normal equations when ``cond(A) < 1e6``
    (normal matrix below 1e12), and the SVD otherwise. ``"qr"`` selects
    column-pivoted QR. With ``lam = 0`` the singular values below
    ``rcond * s_max`` are truncated.

    The report's ``eps_hat`` is ``sqrt(objective / total weight)``. It is
    nonincreasing under node refinement with nested node sets.
    """
    if n_nodes < 16:
        raise ValueError("n_nodes must be >= 16")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if target.dim != 2:
        raise NotImplementedError("fitting is implemented for planar targets")
    nodes, w = circle_nodes(n_nodes)
    A, b, owners = _design(target, nodes)
    scale = penalty_scale(target)
    c, used, cond = _solve(A, b, lam, scale, method, rcond)
    kernel = HerglotzKernel(2, nodes, w, c / w)
    report = _report(target, A, b, owners, c, lam, scale, used, cond)
    return kernel, report


def kernel_report(target: FitTarget, kernel: HerglotzKernel, method: str = "given",
                  lam: float = 0.0) -> FitReport:
    """Residual report of an externally supplied kernel, with the objective at ``lam``."""
    A, b, owners = _design(target, kernel.nodes)
    return _report(target, A, b, owners, kernel.field_coeffs, lam, penalty_scale(target), method,
                   float("nan"))


def _report(target, A, b, owners, c, lam, scale, method, cond) -> FitReport:
    res = A @ c - b
    misfit = float(np.vdot(res, res).real)
    cnorm = float(np.linalg.norm(c))
    objective = misfit + lam * scale * cnorm ** 2
    total_w = sum(s.weight * s.point_weights.sum() for s in target.sets)
    per_set = {}
    for k, s in enumerate(target.sets):
        mask = owners == k
        rows = res[mask].reshape(1 + target.dim, -1)
        wsum = s.weight * s.point_weights.sum()
        per_set[s.name] = {
            "eps_value": float(np.sqrt(np.sum(np.abs(rows[0]) ** 2) / wsum)),
            "eps_grad": float(np.sqrt(np.sum(np.abs(rows[1:]) ** 2) / wsum)),
            "target_rms": float(np.sqrt(np.sum(s.point_weights * np.abs(s.values) ** 2)
                                        / s.point_weights.sum())),
        }
    return FitReport(int(c.size), float(lam), method, objective, misfit, cnorm,
                     float(np.sqrt(objective / total_w)), per_set, float(cond))


@dataclass
class LambdaSweep:
    lams: np.ndarray
    misfits: np.ndarray
    norms: np.ndarray
    chosen: float

    def to_dict(self) -> dict:
        return {"lams": self.lams.tolist(), "misfits": self.misfits.tolist(),
                "norms": self.norms.tolist(), "chosen": self.chosen}


def lcurve_corner(misfits, norms) -> int:
    """Index of maximum curvature of the log-log (residual, norm) curve."""
    x = np.log(np.sqrt(np.maximum(misfits, 1e-300)))
    y = np.log(np.maximum(norms, 1e-300))
    if x.size < 3:
        return int(np.argmin(x))
    dx, dy = np.gradient(x), np.gradient(y)
    ddx, ddy = np.gradient(dx), np.gradient(dy)
    kappa = (dx * ddy - dy * ddx) / np.maximum((dx * dx + dy * dy) ** 1.5, 1e-300)
    kappa[0] = kappa[-1] = -np.inf
    return int(np.argmax(kappa))


def sweep_lambda(target: FitTarget, n_nodes: int, lams=None) -> LambdaSweep:
    """Tikhonov path from one SVD, with the L-curve corner as the choice.

    The default grid spans ``1e-28 .. 1e-6``. The useful range sits far
    below ``1e-14`` because field coefficients reach ``1e8`` or more.
    """
    if lams is None:
        lams = np.logspace(-28, -6, 23)
    lams = np.asarray(lams, dtype=float)
    nodes, _ = circle_nodes(n_nodes)
    A, b, _ = _design(target, nodes)
    scale = penalty_scale(target)
    U, s, Vh = scipy.linalg.svd(A, full_matrices=False)
    beta = U.conj().T @ b
    outside = max(float(np.vdot(b, b).real - np.vdot(beta, beta).real), 0.0)
    misfits, norms = [], []
    for lam in lams:
        f = s * s / (s * s + lam * scale)
        misfits.append(float(np.sum(np.abs((1 - f) * beta) ** 2)) + outside)
        norms.append(float(np.linalg.norm(f * beta / s)))
    misfits, norms = np.array(misfits), np.array(norms)
    k = lcurve_corner(misfits, norms)
    return LambdaSweep(lams, misfits, norms, float(lams[k]))


# ---------------------------------------------------------------------------
# The time-harmonic free solution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class U0Field:
    """``u0(x, t) = H(x) exp(-i t)``, a solution of ``i u_t + Delta u = 0``."""

    kernel: HerglotzKernel

    def value(self, x, t: float = 0.0) -> np.ndarray:
        return eval_H(self.kernel, x) * np.exp(-1j * t)

    def grad(self, x, t: float = 0.0) -> np.ndarray:
        return eval_H_grad(self.kernel, x) * np.exp(-1j * t)

    def derivs(self, x, t: float = 0.0, max_order: int = 2) -> dict[tuple, np.ndarray]:
        phase = np.exp(-1j * t)
        return {a: v * phase for a, v in eval_H_derivs(self.kernel, x, max_order).items()}

    def dt(self, x, t: float = 0.0) -> np.ndarray:
        return -1j * self.value(x, t)

    def laplacian(self, x, t: float = 0.0) -> np.ndarray:
        d = self.derivs(x, t, 2)
        return sum(d[a] for a in d if sum(a) == 2 and max(a) == 2)

    def scaled(self, factor: complex) -> "U0Field":
        return U0Field(self.kernel.scaled(factor))


def make_u0(kernel: HerglotzKernel) -> U0Field:
    return U0Field(kernel)
