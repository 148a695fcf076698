"""Crank-Nicolson solvers for linear and nonlinear Schroedinger problems in 2D.

The equations are written as

    i u_t + div(A grad u) + R(u, t) = F(x, t)

on a rectangular box with Dirichlet data. ``R`` collects pointwise terms
(``c u``, power nonlinearities, or their linearisations around ``u0``), which
are handled by per-step fixed-point iteration.

Spatial discretisation
----------------------
``div(A grad u) = Delta u + div((A - I) grad u)``. The Laplacian uses the
isotropic 9-point stencil when ``dx == dy``. Its leading error
``(h^2/12) Delta^2 u`` is rotation invariant and equals a pure phase shift
on unit-frequency fields. The 5-point stencil instead leaves an anisotropic
error that is large for the strongly oscillating fields produced by the
Herglotz fit. The perturbation ``A - I`` enters in the Hermitian form
``-G^H (A - I) G``. Diagonal entries use face differences (flux form) and
off-diagonal entries use centred nodal gradients. For Hermitian ``A`` the
discrete operator is Hermitian, so the homogeneous scheme conserves the
discrete L2 mass exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Region, Shape, grid_mask


class SolverDivergence(RuntimeError):
    """The iterative linear solver did not reach its tolerance."""


class FixedPointStall(RuntimeError):
    """The per-step fixed-point iteration hit its cap."""


class CoefficientError(ValueError):
    """Coefficient invariants (Hermitian, elliptic, supported in D) fail."""


# ---------------------------------------------------------------------------
# Grid and fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid2D:
    x0: float
    x1: float
    y0: float
    y1: float
    nx: int
    ny: int
    dt: float
    T: float

    def __post_init__(self):
        if self.nx < 16 or self.ny < 16:
            raise ValueError("nx, ny must be >= 16")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("empty box")
        if self.dt <= 0 or self.T <= 0:
            raise ValueError("dt and T must be positive")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("T/dt must be an integer")

    @classmethod
    def around(cls, lower, upper, n: int, dt: float, T: float) -> "Grid2D":
        """Square-cell grid with ``n`` nodes along the longer side."""
        lo, hi = np.asarray(lower, float), np.asarray(upper, float)
        span = hi - lo
        h = span.max() / (n - 1)
        counts = np.maximum(np.ceil(span / h - 1e-9).astype(int), 1) + 1
        hi = lo + (counts - 1) * h
        return cls(lo[0], hi[0], lo[1], hi[1], int(counts[0]), int(counts[1]), dt, T)

    @property
    def dx(self) -> float:
        return (self.x1 - self.x0) / (self.nx - 1)

    @property
    def dy(self) -> float:
        return (self.y1 - self.y0) / (self.ny - 1)

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    def axes(self):
        return (self.x0 + self.dx * np.arange(self.nx), self.y0 + self.dy * np.arange(self.ny))

    def mesh(self):
        xs, ys = self.axes()
        return np.meshgrid(xs, ys, indexing="ij")

    def points(self) -> np.ndarray:
        X, Y = self.mesh()
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
        return mask

    def cell_area(self) -> float:
        return self.dx * self.dy

    def with_steps(self, nx: int, dt: float) -> "Grid2D":
        ny = int(round((self.ny - 1) * (nx - 1) / (self.nx - 1))) + 1
        return Grid2D(self.x0, self.x1, self.y0, self.y1, nx, ny, dt, self.T)


@dataclass
class ComplexField:
    grid: Grid2D
    values: np.ndarray
    time_stamp: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != self.grid.shape:
            raise ValueError("field shape does not match grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field has non-finite values")

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.grid.cell_area()))

    def save(self, path) -> None:
        """Header ``nx ny x0 y0 dx dy t`` then rows ``i j Re Im`` in row-major order."""
        g = self.grid
        I, J = np.meshgrid(np.arange(g.nx), np.arange(g.ny), indexing="ij")
        table = np.column_stack([I.ravel(), J.ravel(), self.values.real.ravel(), self.values.imag.ravel()])
        header = f"{g.nx} {g.ny} {g.x0:.17g} {g.y0:.17g} {g.dx:.17g} {g.dy:.17g} {self.time_stamp:.17g}"
        np.savetxt(path, table, fmt=["%d", "%d", "%.17g", "%.17g"], header=header, comments="")

    @classmethod
    def load(cls, path, dt: float = 1.0, T: float | None = None) -> "ComplexField":
        with open(path, encoding="utf-8") as fh:
            head = fh.readline().split()
            data = np.loadtxt(fh, ndmin=2)
        nx, ny = int(head[0]), int(head[1])
        x0, y0, dx, dy, t = (float(v) for v in head[2:7])
        grid = Grid2D(x0, x0 + dx * (nx - 1), y0, y0 + dy * (ny - 1), nx, ny, dt, T or dt)
        vals = np.zeros((nx, ny), complex)
        vals[data[:, 0].astype(int), data[:, 1].astype(int)] = data[:, 2] + 1j * data[:, 3]
        return cls(grid, vals, t)


@dataclass
class Trajectory:
    snapshots: list[ComplexField]
    final: ComplexField
    picard_counts: list[int] = field(default_factory=list)
    mass: list[float] = field(default_factory=list)

    @property
    def times(self) -> list[float]:
        return [s.time_stamp for s in self.snapshots]


# ---------------------------------------------------------------------------
# Coefficient profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bump:
    """Smooth bump ``exp(1 - 1/(1 - rho^2))``, ``rho = |x - center|/radius``."""

    center: tuple
    radius: float

    def value(self, x) -> np.ndarray:
        d = np.asarray(x, float) - np.asarray(self.center)
        rho2 = np.sum(d * d, axis=-1) / self.radius ** 2
        out = np.zeros(rho2.shape)
        inside = rho2 < 1.0
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - rho2[inside]))
        return out

    def grad(self, x) -> np.ndarray:
        d = np.asarray(x, float) - np.asarray(self.center)
        rho2 = np.sum(d * d, axis=-1) / self.radius ** 2
        chi = self.value(x)
        fac = np.zeros(rho2.shape)
        inside = rho2 < 1.0
        fac[inside] = -2.0 * chi[inside] / (self.radius ** 2 * (1.0 - rho2[inside]) ** 2)
        return fac[..., None] * d

    def support(self) -> Region:
        return Region.disk(self.center, self.radius)


def rotation_matrix(angle: float) -> np.ndarray:
    """Hermitian ``[[cos a, i sin a], [-i sin a, cos a]]`` with eigenvalues ``cos a +- sin a``."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 1j * s], [-1j * s, c]])


@dataclass(frozen=True)
class MatrixProfile:
    """``A(x, t) = I + chi(x) M(t)`` with a constant-shape Hermitian ``M``.

    kinds
        ``isotropic-bump``: ``M = amplitude * I``.
        ``hermitian-rotation``: ``M(t) = contrast * rotation_matrix(angle + rate t)``.
        ``identity``: ``M = 0``.
    """

    kind: str
    bump: Bump | None = None
    amplitude: float = 0.0
    angle: float = 0.0
    contrast: float = 0.0
    rate: float = 0.0

    @property
    def time_dependent(self) -> bool:
        return self.kind == "hermitian-rotation" and self.rate != 0.0

    def perturbation(self, t: float = 0.0) -> np.ndarray:
        """The matrix ``M(t)``."""
        if self.kind == "identity":
            return np.zeros((2, 2), complex)
        if self.kind == "isotropic-bump":
            return self.amplitude * np.eye(2, dtype=complex)
        if self.kind == "hermitian-rotation":
            return self.contrast * rotation_matrix(self.angle + self.rate * t)
        raise ValueError(f"unknown matrix profile {self.kind!r}")

    def B_of_t(self, t: float) -> np.ndarray:
        """Interior value ``I + M(t)``, attained where the bump equals 1."""
        return np.eye(2) + self.perturbation(t)

    def chi(self, x) -> np.ndarray:
        if self.bump is None or self.kind == "identity":
            return np.zeros(np.asarray(x).shape[:-1])
        return self.bump.value(x)

    def eval(self, x, t: float = 0.0) -> np.ndarray:
        """``(P, 2, 2)`` matrices."""
        chi = self.chi(x)
        return np.eye(2)[None] + chi[:, None, None] * self.perturbation(t)[None]

    def minus_identity(self, x, t: float = 0.0) -> np.ndarray:
        return self.chi(x)[:, None, None] * self.perturbation(t)[None]

    def column_divergence(self, x, t: float = 0.0) -> np.ndarray:
        """``d_j = sum_i d_i a_ij``, shape ``(P, 2)``."""
        if self.bump is None or self.kind == "identity":
            return np.zeros((np.asarray(x).shape[0], 2), complex)
        g = self.bump.grad(x)
        return np.einsum("pi,ij->pj", g, self.perturbation(t))

    def ellipticity(self) -> float:
        """Lower bound on the smallest eigenvalue over all ``x`` and ``t``."""
        if self.kind == "identity" or self.bump is None:
            return 1.0
        if self.kind == "isotropic-bump":
            return min(1.0, 1.0 + self.amplitude)
        # eigenvalues 1 + chi * contrast * (cos a +- sin a), chi in [0, 1]
        if self.time_dependent:
            return min(1.0, 1.0 - abs(self.contrast) * math.sqrt(2.0))
        lam = self.contrast * np.array([math.cos(self.angle) + math.sin(self.angle),
                                        math.cos(self.angle) - math.sin(self.angle)])
        return min(1.0, 1.0 + float(lam.min()))

    def to_dict(self) -> dict:
        out = {"profile": self.kind}
        if self.bump is not None:
            out.update(center=list(self.bump.center), radius=self.bump.radius)
        if self.kind == "isotropic-bump":
            out["amplitude"] = self.amplitude
        if self.kind == "hermitian-rotation":
            out.update(angle=self.angle, contrast=self.contrast, rate=self.rate)
        return out


@dataclass(frozen=True)
class ScalarProfile:
    """``f(x, t) = amplitude * chi(x)`` with complex amplitude."""

    amplitude: complex
    bump: Bump

    def __call__(self, x, t: float = 0.0) -> np.ndarray:
        return self.amplitude * self.bump.value(x)

    def to_dict(self) -> dict:
        return {"profile": "bump", "amplitude": [self.amplitude.real, self.amplitude.imag],
                "center": list(self.bump.center), "radius": self.bump.radius}


@dataclass(frozen=True)
class CoefficientSet:
    """Leading matrix ``A`` (``A1`` linear, ``A2`` nonlinear), potential ``c`` and ``alpha_k``."""

    A: MatrixProfile
    c: ScalarProfile | None = None
    alphas: dict = field(default_factory=dict)
    theta_ell: float = 0.5

    @property
    def l0(self) -> int:
        return max(self.alphas) if self.alphas else 0

    def supports(self) -> list[Region]:
        out = []
        if self.A.bump is not None and self.A.kind != "identity":
            out.append(self.A.bump.support())
        if self.c is not None:
            out.append(self.c.bump.support())
        out += [a.bump.support() for a in self.alphas.values()]
        return out

    def validate(self, D: Shape, n_samples: int = 200, seed: int = 0) -> None:
        """Check Hermitian symmetry, ellipticity and support inside D."""
        for k in self.alphas:
            if not 2 <= k <= 6:
                raise CoefficientError("power k must lie in 2..6")
        for supp in self.supports():
            cx, cy, r = supp.params
            if D.signed_distance(np.array([[cx, cy]]))[0] > -r:
                raise CoefficientError("coefficient support is not inside D")
        if self.A.ellipticity() < self.theta_ell:
            raise CoefficientError(f"A has ellipticity {self.A.ellipticity():.4g} below {self.theta_ell}")
        rng = np.random.default_rng(seed)
        lo, hi = D.bbox()
        pts = lo + (hi - lo) * rng.random((n_samples, 2))
        for t in (0.0, 0.37, 1.0):
            A = self.A.eval(pts, t)
            if np.max(np.abs(A - np.conj(np.transpose(A, (0, 2, 1))))) > 1e-14:
                raise CoefficientError("A is not Hermitian")
            xi = rng.normal(size=(n_samples, 2)) + 1j * rng.normal(size=(n_samples, 2))
            form = np.einsum("pi,pij,pj->p", xi.conj(), A, xi).real
            if np.any(form < self.theta_ell * np.sum(np.abs(xi) ** 2, axis=1) - 1e-12):
                raise CoefficientError("A violates the ellipticity bound")


# ---------------------------------------------------------------------------
# Discrete operator
# ---------------------------------------------------------------------------

def _tri(n):
    return sp.diags([np.ones(n - 1), np.ones(n - 1)], [-1, 1], format="csr")


def laplacian(grid: Grid2D, stencil: str = "auto") -> sp.csr_matrix:
    """Laplacian on all nodes (boundary rows are discarded by the caller)."""
    nx, ny = grid.shape
    Ix, Iy = sp.identity(nx, format="csr"), sp.identity(ny, format="csr")
    Tx, Ty = _tri(nx), _tri(ny)
    square = abs(grid.dx - grid.dy) <= 1e-12 * grid.dx
    if stencil == "auto":
        stencil = "iso9" if square else "five"
    if stencil == "iso9":
        if not square:
            raise ValueError("the 9-point stencil needs dx == dy")
        h2 = grid.dx * grid.dx
        N = nx * ny
        return ((4.0 * (sp.kron(Tx, Iy) + sp.kron(Ix, Ty)) + sp.kron(Tx, Ty)
                 - 20.0 * sp.identity(N)) / (6.0 * h2)).tocsr()
    if stencil == "five":
        return ((sp.kron(Tx, Iy) - 2.0 * sp.identity(nx * ny)) / grid.dx ** 2
                + (sp.kron(Ix, Ty) - 2.0 * sp.identity(nx * ny)) / grid.dy ** 2).tocsr()
    raise ValueError(f"unknown stencil {stencil!r}")


class _Gradients:
    """Face-difference and centred-gradient matrices, built once per grid."""

    def __init__(self, grid: Grid2D):
        nx, ny = grid.shape
        dx, dy = grid.dx, grid.dy
        Ix, Iy = sp.identity(nx, format="csr"), sp.identity(ny, format="csr")
        fx = sp.diags([-np.ones(nx - 1), np.ones(nx - 1)], [0, 1], shape=(nx - 1, nx)) / dx
        fy = sp.diags([-np.ones(ny - 1), np.ones(ny - 1)], [0, 1], shape=(ny - 1, ny)) / dy
        self.Dx = sp.kron(fx, Iy, format="csr")
        self.Dy = sp.kron(Ix, fy, format="csr")
        cx = sp.lil_matrix((nx, nx))
        for i in range(1, nx - 1):
            cx[i, i - 1], cx[i, i + 1] = -0.5 / dx, 0.5 / dx
        cy = sp.lil_matrix((ny, ny))
        for j in range(1, ny - 1):
            cy[j, j - 1], cy[j, j + 1] = -0.5 / dy, 0.5 / dy
        self.Gx = sp.kron(cx.tocsr(), Iy, format="csr")
        self.Gy = sp.kron(Ix, cy.tocsr(), format="csr")
        xs, ys = grid.axes()
        XF, YF = np.meshgrid(xs[:-1] + 0.5 * dx, ys, indexing="ij")
        self.xfaces = np.stack([XF.ravel(), YF.ravel()], axis=1)
        XF, YF = np.meshgrid(xs, ys[:-1] + 0.5 * dy, indexing="ij")
        self.yfaces = np.stack([XF.ravel(), YF.ravel()], axis=1)
        self.nodes = grid.points()


def perturbation_operator(grid: Grid2D, profile: MatrixProfile, t: float = 0.0,
                          grads: _Gradients | None = None) -> sp.csr_matrix:
    """Discrete ``div((A - I) grad u)`` in the Hermitian form ``-G^H P G``."""
    N = grid.nx * grid.ny
    if profile.kind == "identity" or profile.bump is None:
        return sp.csr_matrix((N, N), dtype=complex)
    g = grads or _Gradients(grid)
    M = profile.perturbation(t)
    p11 = profile.chi(g.xfaces) * M[0, 0].real
    p22 = profile.chi(g.yfaces) * M[1, 1].real
    chi = profile.chi(g.nodes)
    out = -(g.Dx.T @ sp.diags(p11) @ g.Dx) - (g.Dy.T @ sp.diags(p22) @ g.Dy)
    if M[0, 1] != 0:
        out = out - g.Gx.T @ sp.diags(chi * M[0, 1]) @ g.Gy - g.Gy.T @ sp.diags(chi * M[1, 0]) @ g.Gx
    return out.tocsr()


class Operator:
    """Interior/boundary blocks of ``div(A grad .)`` with caching in time."""

    def __init__(self, grid: Grid2D, profile: MatrixProfile, stencil: str = "auto"):
        self.grid = grid
        self.profile = profile
        self.base = laplacian(grid, stencil)
        self.grads = _Gradients(grid) if profile.kind != "identity" else None
        bmask = grid.boundary_mask().ravel()
        self.interior = np.flatnonzero(~bmask)
        self.boundary = np.flatnonzero(bmask)
        self._cache_t = None
        self._blocks = None

    def blocks(self, t: float):
        if self._blocks is not None and (not self.profile.time_dependent or self._cache_t == t):
            return self._blocks
        L = self.base
        if self.profile.kind != "identity":
            L = (L + perturbation_operator(self.grid, self.profile, t, self.grads)).tocsr()
        L_II = L[self.interior][:, self.interior].tocsc()
        L_IB = L[self.interior][:, self.boundary].tocsr()
        self._blocks = (L_II, L_IB)
        self._cache_t = t
        return self._blocks

    def full(self, t: float = 0.0) -> sp.csr_matrix:
        L = self.base
        if self.profile.kind != "identity":
            L = L + perturbation_operator(self.grid, self.profile, t, self.grads)
        return L.tocsr()


class _LinearSolver:
    def __init__(self, method: str, rtol: float, maxiter: int):
        self.method = method
        self.rtol = rtol
        self.maxiter = maxiter
        self._key = None
        self._lu = None
        self._M = None
        self._A = None

    def prepare(self, A: sp.csc_matrix, key) -> None:
        if key == self._key and self._A is not None:
            return
        self._A = A
        self._key = key
        if self.method == "direct":
            self._lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
        else:
            inv_diag = 1.0 / A.diagonal()
            self._M = spla.LinearOperator(A.shape, matvec=lambda v: inv_diag * v, dtype=complex)

    def solve(self, rhs: np.ndarray, guess: np.ndarray | None = None) -> np.ndarray:
        if self.method == "direct":
            return self._lu.solve(rhs)
        x, info = spla.bicgstab(self._A, rhs, x0=guess, rtol=self.rtol, atol=0.0,
                                maxiter=self.maxiter, M=self._M)
        if info != 0:
            raise SolverDivergence(f"bicgstab did not converge (info={info})")
        return x


# ---------------------------------------------------------------------------
# Time stepping
# ---------------------------------------------------------------------------

BoundaryFn = Callable[[float], np.ndarray]   # t -> values on boundary nodes
SourceFn = Callable[[float], np.ndarray]     # t -> values on all nodes (flattened)
PointwiseFn = Callable[[np.ndarray, float], np.ndarray]  # (u_all, t) -> R(u) on all nodes


def integrate(grid: Grid2D, profile: MatrixProfile, initial: np.ndarray, *,
              boundary: BoundaryFn | None = None, source: SourceFn | None = None,
              pointwise: PointwiseFn | None = None, stride: int = 10,
              picard_tol: float = 1e-11, picard_cap: int = 25, solver: str = "direct",
              stencil: str = "auto", rtol: float = 1e-10) -> Trajectory:
    """March ``i u_t + div(A grad u) + R(u, t) = F`` with Crank-Nicolson.

    ``A`` is frozen at ``t + dt/2`` within each step. ``R`` is iterated to
    a fixed point with relative change below ``picard_tol``.
    """
    op = Operator(grid, profile, stencil)
    tau = grid.dt
    nI = op.interior.size
    u = np.asarray(initial, dtype=complex).ravel().copy()
    if boundary is not None:
        u[op.boundary] = boundary(0.0)
    else:
        u[op.boundary] = 0.0
    lin = _LinearSolver(solver, rtol, 10 * (grid.nx + grid.ny))
    snaps = [ComplexField(grid, u.reshape(grid.shape).copy(), 0.0)]
    counts: list[int] = []
    b_old = u[op.boundary].copy()
    f_old = source(0.0) if source is not None else None
    r_old = pointwise(u, 0.0) if pointwise is not None else None
    u_prev = None
    eye = sp.identity(nI, format="csc", dtype=complex)
    for n in range(grid.n_steps):
        t_new = (n + 1) * tau
        t_half = (n + 0.5) * tau
        L_II, L_IB = op.blocks(t_half)
        lhs = (eye - 0.5j * tau * L_II).tocsc()
        lin.prepare(lhs, op._cache_t if profile.time_dependent else "static")
        b_new = boundary(t_new) if boundary is not None else np.zeros(op.boundary.size, complex)
        uI = u[op.interior]
        rhs = uI + 0.5j * tau * (L_II @ uI) + 0.5j * tau * (L_IB @ (b_new + b_old))
        if source is not None:
            f_new = source(t_new)
            rhs -= 0.5j * tau * (f_new + f_old)[op.interior]
        u_new = np.empty_like(u)
        u_new[op.boundary] = b_new
        if pointwise is None:
            u_new[op.interior] = lin.solve(rhs, uI)
            counts.append(1)
        else:
            rhs_base = rhs + 0.5j * tau * r_old[op.interior]
            guess = 2.0 * u - u_prev if u_prev is not None else u.copy()
            guess[op.boundary] = b_new
            it = 0
            while True:
                it += 1
                r_new = pointwise(guess, t_new)
                sol = lin.solve(rhs_base + 0.5j * tau * r_new[op.interior], guess[op.interior])
                change = np.linalg.norm(sol - guess[op.interior])
                scale = np.linalg.norm(sol)
                guess[op.interior] = sol
                if change <= picard_tol * max(scale, 1e-300):
                    break
                if it >= picard_cap:
                    raise FixedPointStall(f"fixed point stalled at step {n + 1} (t={t_new:.6g}, "
                                          f"relative change {change / max(scale, 1e-300):.3e})")
            u_new = guess
            r_old = pointwise(u_new, t_new)
            counts.append(it)
        u_prev = u
        u = u_new
        b_old = b_new
        if source is not None:
            f_old = f_new
        if (n + 1) % stride == 0:
            snaps.append(ComplexField(grid, u.reshape(grid.shape).copy(), t_new))
    final = ComplexField(grid, u.reshape(grid.shape).copy(), grid.n_steps * tau)
    traj = Trajectory(snaps, final, counts)
    traj.mass = [s.l2_norm() for s in snaps]
    return traj


# ---------------------------------------------------------------------------
# Sources and linearised coefficients built from u0
# ---------------------------------------------------------------------------

class _U0Cache:
    """Spatial derivatives of ``u0`` at fixed points (time enters as ``exp(-i t)``)."""

    def __init__(self, u0, points):
        self.points = points
        d = u0.derivs(points, 0.0, 2) if points.shape[0] else {}
        self.h = d.get((0, 0), np.zeros(0, complex))
        self.hx = d.get((1, 0), np.zeros(0, complex))
        self.hy = d.get((0, 1), np.zeros(0, complex))
        self.hxx = d.get((2, 0), np.zeros(0, complex))
        self.hxy = d.get((1, 1), np.zeros(0, complex))
        self.hyy = d.get((0, 2), np.zeros(0, complex))


def _support_points(coeffs: CoefficientSet, points: np.ndarray) -> np.ndarray:
    mask = np.zeros(points.shape[0], dtype=bool)
    for supp in coeffs.supports():
        mask |= supp.contains(points, closed=False)
    return mask


@dataclass
class SourceTerm:
    """Complex source ``F(x, t)`` supported in the coefficient supports.

    ``bind(points)`` precomputes everything spatial and returns ``t -> F``.
    """

    builder: Callable
    coeffs: CoefficientSet

    def bind(self, points) -> Callable[[float], np.ndarray]:
        pts = np.asarray(points, float)
        mask = _support_points(self.coeffs, pts)
        inner = self.builder(pts[mask])

        def f(t):
            out = np.zeros(pts.shape[0], complex)
            out[mask] = inner(t)
            return out

        return f

    def __call__(self, points, t: float) -> np.ndarray:
        return self.bind(points)(t)


def _divergence_term(profile: MatrixProfile, cache: _U0Cache, pts, t):
    """``div((I - A) grad u0)`` at time ``t`` (without the ``exp(-i t)`` factor)."""
    P = profile.minus_identity(pts, t)
    d = profile.column_divergence(pts, t)
    grad = np.stack([cache.hx, cache.hy], axis=1)
    hess = np.stack([np.stack([cache.hxx, cache.hxy], 1), np.stack([cache.hxy, cache.hyy], 1)], 1)
    return -np.einsum("pj,pj->p", d, grad) - np.einsum("pij,pij->p", P, hess)


def assemble_F1(coeffs: CoefficientSet, u0) -> SourceTerm:
    """``F1 = div((I - A1) grad u0)``, from analytic derivatives of ``u0``."""

    def builder(pts):
        cache = _U0Cache(u0, pts)
        if coeffs.A.time_dependent:
            return lambda t: _divergence_term(coeffs.A, cache, pts, t) * np.exp(-1j * t)
        spatial = _divergence_term(coeffs.A, cache, pts, 0.0)
        return lambda t: spatial * np.exp(-1j * t)

    return SourceTerm(builder, coeffs)


def assemble_F2(coeffs: CoefficientSet, u0) -> SourceTerm:
    """``F2 = div((I - A2) grad u0) - c u0 - sum_k alpha_k u0^k``."""

    def builder(pts):
        cache = _U0Cache(u0, pts)
        c = coeffs.c(pts) if coeffs.c is not None else 0.0
        alph = {k: a(pts) for k, a in coeffs.alphas.items()}
        static = None if coeffs.A.time_dependent else _divergence_term(coeffs.A, cache, pts, 0.0)

        def f(t):
            phase = np.exp(-1j * t)
            div = static if static is not None else _divergence_term(coeffs.A, cache, pts, t)
            val = cache.h * phase
            out = div * phase - c * val
            for k, a in alph.items():
                out = out - a * val ** k
            return out

        return f

    return SourceTerm(builder, coeffs)


def assemble_hat_c(coeffs: CoefficientSet, u0):
    """``hat_c = c + sum_k k alpha_k u0^(k-1)``, returned as ``points -> (t -> values)``."""

    def bind(points):
        pts = np.asarray(points, float)
        mask = _support_points(coeffs, pts)
        sub = pts[mask]
        h = u0.value(sub, 0.0) if sub.shape[0] else np.zeros(0, complex)
        c = coeffs.c(sub) if coeffs.c is not None else 0.0
        alph = {k: a(sub) for k, a in coeffs.alphas.items()}

        def f(t):
            val = h * np.exp(-1j * t)
            acc = np.zeros(sub.shape[0], complex) + c
            for k, a in alph.items():
                acc = acc + k * a * val ** (k - 1)
            out = np.zeros(pts.shape[0], complex)
            out[mask] = acc
            return out

        return f

    return bind


def hat_N_terms(alphas: dict, u0_vals: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``sum_k alpha_k sum_{i=2}^k C(k, i) u0^(k-i) W^i`` pointwise."""
    out = np.zeros(np.broadcast(u0_vals, W).shape, complex)
    for k, a in alphas.items():
        for i in range(2, k + 1):
            out = out + a * math.comb(k, i) * u0_vals ** (k - i) * W ** i
    return out


def eval_hat_N(coeffs: CoefficientSet, u0, W: ComplexField, t: float) -> ComplexField:
    pts = W.grid.points()
    mask = _support_points(coeffs, pts)
    vals = np.zeros(pts.shape[0], complex)
    sub = pts[mask]
    if sub.shape[0]:
        alph = {k: a(sub) for k, a in coeffs.alphas.items()}
        vals[mask] = hat_N_terms(alph, u0.value(sub, t), W.values.ravel()[mask])
    return ComplexField(W.grid, vals.reshape(W.grid.shape), t)


def power_nonlinearity(coeffs: CoefficientSet, points) -> Callable:
    """``(U, t) -> c U + sum_k alpha_k U^k`` on the bound points."""
    pts = np.asarray(points, float)
    mask = _support_points(coeffs, pts)
    sub = pts[mask]
    c = coeffs.c(sub) if coeffs.c is not None else 0.0
    alph = {k: a(sub) for k, a in coeffs.alphas.items()}

    def R(U, t):
        out = np.zeros(U.shape, complex)
        v = U[mask]
        acc = c * v
        for k, a in alph.items():
            acc = acc + a * v ** k
        out[mask] = acc
        return out

    return R


# ---------------------------------------------------------------------------
# The four problems
# ---------------------------------------------------------------------------

def _initial_on_grid(grid: Grid2D, phi) -> np.ndarray:
    if callable(phi):
        return np.asarray(phi(grid.points()), complex).reshape(grid.shape)
    return np.asarray(phi, complex).reshape(grid.shape)


def _boundary_handle(grid: Grid2D, psi) -> BoundaryFn | None:
    if psi is None:
        return None
    bpts = grid.points()[grid.boundary_mask().ravel()]
    return lambda t: np.asarray(psi(bpts, t), complex)


def solve_linear_ibvp(coeffs: CoefficientSet, grid: Grid2D, phi, psi, *, stride: int = 10,
                      solver: str = "direct", stencil: str = "auto", compat_tol: float = 1e-8) -> Trajectory:
    """``i u_t + div(A1 grad u) = 0``, ``u(0) = phi``, ``u = psi`` on the box boundary."""
    init = _initial_on_grid(grid, phi)
    bfun = _boundary_handle(grid, psi)
    if bfun is not None:
        mask = grid.boundary_mask()
        mismatch = np.max(np.abs(init[mask] - bfun(0.0)), initial=0.0)
        if mismatch > compat_tol * max(1.0, np.max(np.abs(init[mask]), initial=0.0)):
            raise ValueError(f"initial and boundary data disagree at t=0 (max {mismatch:.3g})")
    return integrate(grid, coeffs.A, init, boundary=bfun, stride=stride, solver=solver, stencil=stencil)


def solve_linear_auxiliary(coeffs: CoefficientSet, grid: Grid2D, F1: SourceTerm, *, stride: int = 10,
                           solver: str = "direct", stencil: str = "auto") -> Trajectory:
    """``i U_t + div(A1 grad U) = F1`` with zero initial and boundary data."""
    src = F1.bind(grid.points())
    return integrate(grid, coeffs.A, np.zeros(grid.shape, complex), source=src, stride=stride,
                     solver=solver, stencil=stencil)


def solve_nonlinear_cauchy(coeffs: CoefficientSet, grid: Grid2D, Phi, u0, *, stride: int = 10,
                           solver: str = "direct", stencil: str = "auto", picard_tol: float = 1e-11,
                           picard_cap: int = 25) -> Trajectory:
    """``i U_t + div(A2 grad U) + c U + sum alpha_k U^k = 0`` on a truncated box.

    The box boundary carries ``U = u0``, which matches the decomposition
    ``U = u0 + W`` with ``W = 0`` there.
    """
    init = _initial_on_grid(grid, Phi)
    bfun = _boundary_handle(grid, u0.value)
    R = power_nonlinearity(coeffs, grid.points())
    return integrate(grid, coeffs.A, init, boundary=bfun, pointwise=R, stride=stride, solver=solver,
                     stencil=stencil, picard_tol=picard_tol, picard_cap=picard_cap)


def solve_nonlinear_auxiliary(coeffs: CoefficientSet, grid: Grid2D, F2: SourceTerm, hat_c, u0, *,
                              stride: int = 10, solver: str = "direct", stencil: str = "auto",
                              picard_tol: float = 1e-11, picard_cap: int = 25) -> Trajectory:
    """``i W_t + div(A2 grad W) + hat_c W + hat_N(W) = F2``, zero data.

    ``hat_c`` is the handle from :func:`assemble_hat_c`; ``hat_N`` is built
    from the coefficient powers and ``u0`` on the support nodes.
    """
    pts = grid.points()
    src = F2.bind(pts)
    cfun = hat_c(pts)
    mask = _support_points(coeffs, pts)
    sub = pts[mask]
    alph = {k: a(sub) for k, a in coeffs.alphas.items()}
    h = u0.value(sub, 0.0) if sub.shape[0] else np.zeros(0, complex)

    def R(W, t):
        out = cfun(t) * W
        if alph:
            out[mask] += hat_N_terms(alph, h * np.exp(-1j * t), W[mask])
        return out

    return integrate(grid, coeffs.A, np.zeros(grid.shape, complex), source=src, pointwise=R,
                     stride=stride, solver=solver, stencil=stencil, picard_tol=picard_tol,
                     picard_cap=picard_cap)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def quadratic_form(field_: ComplexField, profile: MatrixProfile, t: float | None = None) -> float:
    """Discrete ``int grad(u)^H A grad(u)`` with centred differences."""
    g = field_.grid
    t = field_.time_stamp if t is None else t
    ux, uy = np.gradient(field_.values, g.dx, g.dy, edge_order=2)
    grad = np.stack([ux.ravel(), uy.ravel()], axis=1)
    A = profile.eval(g.points(), t)
    return float(np.einsum("pi,pij,pj->p", grad.conj(), A, grad).real.sum() * g.cell_area())


def mass_and_energy_diagnostics(traj: Trajectory, coeffs: CoefficientSet) -> dict:
    mass = np.array([s.l2_norm() for s in traj.snapshots])
    energy = np.array([quadratic_form(s, coeffs.A) for s in traj.snapshots])
    drift = float(np.max(np.abs(mass - mass[0])) / mass[0]) if mass[0] > 0 else 0.0
    return {"times": traj.times, "mass": mass.tolist(), "energy": energy.tolist(), "mass_drift": drift}


def relative_l2(a: np.ndarray, b: np.ndarray) -> float:
    den = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / den) if den > 0 else float(np.linalg.norm(a - b))
