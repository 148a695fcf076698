"""Parameter selection and measurement of localized gradient amplification.

Fields are accepted either as :class:`~gradamp.schrodinger.ComplexField`
snapshots (derivatives by finite differences on the grid) or as analytic
handles exposing ``value(points, t)`` and ``grad(points, t)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from ._kernels import holder_all_pairs, holder_listed_pairs
from .geometry import AmplificationSites, EmptyRegion, Region, Shape, Union
from .schrodinger import ComplexField, Grid2D
from .transmission import min_mode_order, peak_lower_bound


class InfeasibleParams(ValueError):
    """The achieved fit residual is larger than the parameter rule allows."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constants:
    """Empirical stand-ins for the abstract constants of the construction."""

    C1: float = 1.0
    C2: float = 1.0
    C3: float = 1.0
    C4: float = 1.0
    C5: float = 1.0
    C6: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "Constants":
        return cls(**{k: float(v) for k, v in (data or {}).items()})


@dataclass(frozen=True)
class ConstructionParams:
    M_target: float
    r0: float
    eps: float
    m: int
    constants: Constants
    problem: str = "linear"
    dim: int = 2
    r0_terms: tuple = ()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["r0_terms"] = list(self.r0_terms)
        return out


def boundary_distance(D: Region, omega: Region) -> float:
    """``dist(D, boundary of Omega)`` for convex ``D`` inside convex ``Omega``."""
    if D.kind == "disk":
        cx, cy, r = D.params
        return float(-omega.signed_distance(np.array([[cx, cy]]))[0] - (r + D.offset))
    if D.offset:
        raise ValueError("offset polygons are not supported here")
    return float(np.min(-omega.signed_distance(D.vertices())))


def _min_pair_distance(points: np.ndarray) -> float:
    if points.shape[0] < 2:
        return math.inf
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    dist[np.diag_indices(points.shape[0])] = np.inf
    return float(dist.min())


def _peak_margin_2d(m: int, r0: float) -> float:
    return peak_lower_bound(2, m, r0)


def select_params(M_target: float, points_x, D: Region, omega: Region | None = None,
                  constants: Constants | None = None, *, problem: str = "linear", dim: int = 2,
                  T: float = 1.0, eps_achieved: float | None = None, m_limit: int = 100_000) -> ConstructionParams:
    """Radius, target residual and mode order from the explicit parameter rules.

    Linear: ``r0 = min{1/(3(M+1)), min|xi-xj|/6, dist(D, dOmega)/3}`` and
    ``eps = min{1/(C1+C2+C3), 1}``. Nonlinear drops the boundary term and uses
    ``eps = min{1/(C1+C6^2), 1/(C4 T)^2, 1/(4 C5 T), 1}``.
    """
    if M_target <= 0:
        raise ValueError("M_target must be positive")
    if problem not in ("linear", "nonlinear"):
        raise ValueError(f"unknown problem {problem!r}")
    C = constants or Constants()
    pts = np.atleast_2d(np.asarray(points_x, float))
    sep = _min_pair_distance(pts)
    if sep == 0.0:
        raise ValueError("points must be distinct")
    terms = [1.0 / (3.0 * (M_target + 1.0)), sep / 6.0]
    if problem == "linear" and omega is not None:
        terms.append(boundary_distance(D, omega) / 3.0)
    r0 = min(terms)
    if r0 <= 0:
        raise ValueError("D must lie strictly inside Omega")
    if problem == "linear":
        eps = min(1.0 / (C.C1 + C.C2 + C.C3), 1.0)
    else:
        eps = min(1.0 / (C.C1 + C.C6 ** 2), 1.0 / (C.C4 * T) ** 2, 1.0 / (4.0 * C.C5 * T), 1.0)
    floor_m = min_mode_order(r0)
    if dim == 3:
        if problem == "linear":
            m = max(int(math.floor(512.0 * r0 ** 3)) + 1, floor_m)
        else:
            m = max(int(math.floor((256.0 * (2.0 + C.C2 * eps) ** 2 * r0 ** 3 - 3.0) / 2.0)) + 1, floor_m)
    elif dim == 2:
        m = floor_m
        while True:
            peak = _peak_margin_2d(m, r0)
            if problem == "linear":
                ok = peak - (C.C1 + C.C2) * eps >= 6.0 * r0 * (M_target + 1.0)
            else:
                ok = peak - C.C2 * eps > 2.0
            if ok:
                break
            m += 1
            if m > m_limit:
                raise InfeasibleParams(f"no mode order <= {m_limit} meets the 2D margin")
    else:
        raise ValueError("dim must be 2 or 3")
    if eps_achieved is not None and eps_achieved > eps:
        raise InfeasibleParams(f"achieved residual {eps_achieved:.4g} exceeds the required {eps:.4g}")
    return ConstructionParams(float(M_target), float(r0), float(eps), int(m), C, problem, dim, tuple(terms))


# ---------------------------------------------------------------------------
# Field access
# ---------------------------------------------------------------------------

def fd_gradient(values: np.ndarray, dx: float, dy: float) -> tuple[np.ndarray, np.ndarray]:
    """Fourth-order differences, one-sided in the two outermost rows."""
    return _fd_axis(values, dx, 0), _fd_axis(values, dy, 1)


def _fd_axis(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    f = np.moveaxis(np.asarray(f), axis, 0)
    n = f.shape[0]
    if n < 5:
        raise ValueError("need at least 5 samples per axis")
    out = np.empty_like(f, dtype=np.result_type(f, float))
    out[2:-2] = (f[:-4] - 8.0 * f[1:-3] + 8.0 * f[3:-1] - f[4:]) / (12.0 * h)
    out[0] = (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]) / (12.0 * h)
    out[1] = (-3 * f[0] - 10 * f[1] + 18 * f[2] - 6 * f[3] + f[4]) / (12.0 * h)
    out[-1] = (25 * f[-1] - 48 * f[-2] + 36 * f[-3] - 16 * f[-4] + 3 * f[-5]) / (12.0 * h)
    out[-2] = (3 * f[-1] + 10 * f[-2] - 18 * f[-3] + 6 * f[-4] - f[-5]) / (12.0 * h)
    return np.moveaxis(out, 0, axis)


class GridFieldHandle:
    """Cubic interpolation of a snapshot and of its finite-difference gradient."""

    def __init__(self, snapshot: ComplexField):
        g = snapshot.grid
        axes = g.axes()
        gx, gy = fd_gradient(snapshot.values, g.dx, g.dy)
        self.time_stamp = snapshot.time_stamp
        self._interp = [RegularGridInterpolator(axes, arr, method="cubic")
                        for arr in (snapshot.values, gx, gy)]

    def value(self, x, t: float | None = None) -> np.ndarray:
        return self._interp[0](np.atleast_2d(x))

    def grad(self, x, t: float | None = None) -> np.ndarray:
        p = np.atleast_2d(x)
        return np.stack([self._interp[1](p), self._interp[2](p)], axis=1)


@dataclass
class _Samples:
    points: np.ndarray
    values: np.ndarray
    grads: np.ndarray
    cell_area: float


def _sampling_grid(region: Shape, h: float) -> np.ndarray:
    lo, hi = region.bbox()
    xs = np.arange(lo[0], hi[0] + 0.5 * h, h)
    ys = np.arange(lo[1], hi[1] + 0.5 * h, h)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def _samples(fld, region: Shape, t: float = 0.0, h: float | None = None) -> _Samples:
    if isinstance(fld, ComplexField):
        g = fld.grid
        pts = g.points()
        mask = region.contains(pts)
        gx, gy = fd_gradient(fld.values, g.dx, g.dy)
        grads = np.stack([gx.ravel(), gy.ravel()], axis=1)[mask]
        out = _Samples(pts[mask], fld.values.ravel()[mask], grads, g.cell_area())
    else:
        if h is None:
            lo, hi = region.bbox()
            h = float(np.max(hi - lo)) / 200.0
        pts = _sampling_grid(region, h)
        pts = pts[region.contains(pts)]
        out = _Samples(pts, fld.value(pts, t) if pts.size else np.zeros(0, complex),
                       fld.grad(pts, t) if pts.size else np.zeros((0, 2), complex), h * h)
    if out.points.shape[0] == 0:
        raise EmptyRegion("region has no samples on the measurement grid")
    return out


def _grad_norm(grads: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(grads) ** 2, axis=1))


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------

def grad_sup(fld, region: Shape, *, t: float = 0.0, h: float | None = None) -> tuple[float, np.ndarray]:
    """Maximum of ``|grad u|`` over the region samples and its location."""
    s = _samples(fld, region, t, h)
    norms = _grad_norm(s.grads)
    k = int(np.argmax(norms))
    return float(norms[k]), s.points[k].copy()


def holder_seminorm(points: np.ndarray, grads: np.ndarray, pair_budget: int = 2_000_000,
                    seed: int = 0, neighbours: int = 9) -> float:
    """``max |grad u(x) - grad u(y)| / |x - y|^(1/2)`` over sampled pairs."""
    n = points.shape[0]
    if n < 2:
        return 0.0
    if n * (n - 1) // 2 <= pair_budget:
        return holder_all_pairs(points, grads)
    rng = np.random.default_rng(seed)
    first = rng.integers(0, n, pair_budget)
    second = rng.integers(0, n, pair_budget)
    k = min(neighbours + 1, n)
    _, idx = cKDTree(points).query(points, k=k)
    near_first = np.repeat(np.arange(n), k - 1)
    near_second = idx[:, 1:].ravel()
    first = np.concatenate([first, near_first]).astype(np.int64)
    second = np.concatenate([second, near_second]).astype(np.int64)
    return holder_listed_pairs(points, grads, first, second)


def holder_c1half_norm(fld, region: Shape, pair_budget: int = 2_000_000, *, t: float = 0.0,
                       h: float | None = None, seed: int = 0) -> float:
    """``sup|u| + sup|grad u| + [grad u]_{1/2}`` estimated on samples."""
    s = _samples(fld, region, t, h)
    if s.points.shape[0] < 2:
        raise EmptyRegion("need at least two samples")
    return float(np.max(np.abs(s.values)) + np.max(_grad_norm(s.grads))
                 + holder_seminorm(s.points, s.grads, pair_budget, seed))


def superlevel_measure(fld, M_level: float, region: Shape, *, t: float = 0.0, h: float | None = None) -> float:
    """Cell-counting area of ``{|grad u| > M_level}`` inside the region."""
    try:
        s = _samples(fld, region, t, h)
    except EmptyRegion:
        return 0.0
    return float(np.count_nonzero(_grad_norm(s.grads) > M_level) * s.cell_area)


@dataclass
class MVTRecord:
    site: int
    peak_point: list
    peak: float
    smallness: float
    implied_bound: float
    measured: float
    ok: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _d_sup(handle, D: Shape, t: float, h: float) -> float:
    if isinstance(handle, ComplexField):
        return float(np.max(np.abs(_samples(handle, D).values)))
    pts = _sampling_grid(D, h)
    pts = pts[D.contains(pts)]
    return float(np.max(np.abs(handle.value(pts, t))))


def mvt_chain_diagnostic(u_handle, sites: AmplificationSites, i: int, D: Shape, *, t: float = 0.0,
                         n_samples: int = 400, h: float | None = None, slack: float = 0.01) -> MVTRecord:
    """Mean-value chain from the sphere point nearest D back to ``x_i``.

    ``bound = (P - s) / (3 r0)`` with ``P = |u(y*)|`` and ``s = sup_D |u|``;
    the measured value is ``sup |grad u|`` on the segment ``[y*, x_i]``.
    """
    handle = GridFieldHandle(u_handle) if isinstance(u_handle, ComplexField) else u_handle
    if isinstance(u_handle, ComplexField):
        t = u_handle.time_stamp
    ystar = sites.peak_points()[i]
    x_i = sites.points_x[i]
    peak = float(np.abs(handle.value(ystar[None], t))[0])
    lo, hi = D.bbox()
    small = _d_sup(u_handle, D, t, h or float(np.max(hi - lo)) / 200.0)
    bound = (peak - small) / (3.0 * sites.r0)
    s = np.linspace(0.0, 1.0, n_samples)[:, None]
    seg = ystar[None] + s * (x_i - ystar)[None]
    measured = float(np.max(_grad_norm(handle.grad(seg, t))))
    ok = measured >= bound - slack * abs(bound)
    return MVTRecord(i, ystar.tolist(), peak, small, float(bound), measured, bool(ok))


# ---------------------------------------------------------------------------
# Constant calibration
# ---------------------------------------------------------------------------

@dataclass
class PilotMeasurement:
    """Quantities measured in one pilot run."""

    eps_hat: float
    u0_holder_D: float = 0.0
    peak_deficit: float = 0.0
    aux_norm: float = 0.0
    horizon: float = 1.0
    problem: str = "linear"


def _ratio(num: Sequence[float], den: Sequence[float]) -> float:
    vals = [a / b for a, b in zip(num, den) if b > 0 and math.isfinite(a / b)]
    vals = [v for v in vals if v > 0]
    return max(vals) if vals else 1.0


def calibrate_constants(pilots: Sequence[PilotMeasurement]) -> Constants:
    """Largest measured ratio per constant; 1.0 when nothing was measured.

    ``C1 = ||u0||_{C^{1,1/2}(D)}/eps``, ``C2 = peak deficit/eps``,
    ``C3 = ||U||/eps`` (linear), ``C6 = ||U||/sqrt(eps)`` (nonlinear),
    ``C4 = ||U||/(T eps)`` and ``C5 = ||U||/(T sqrt(eps))`` (nonlinear).
    """
    eps = [p.eps_hat for p in pilots]
    lin = [p for p in pilots if p.problem == "linear"]
    non = [p for p in pilots if p.problem == "nonlinear"]
    return Constants(
        C1=_ratio([p.u0_holder_D for p in pilots], eps),
        C2=_ratio([p.peak_deficit for p in pilots], eps),
        C3=_ratio([p.aux_norm for p in lin], [p.eps_hat for p in lin]),
        C4=_ratio([p.aux_norm for p in non], [p.horizon * p.eps_hat for p in non]),
        C5=_ratio([p.aux_norm for p in non], [p.horizon * math.sqrt(p.eps_hat) for p in non]),
        C6=_ratio([p.aux_norm for p in non], [math.sqrt(p.eps_hat) for p in non]),
    )


# ---------------------------------------------------------------------------
# Verification report
# ---------------------------------------------------------------------------

@dataclass
class VerificationReport:
    times: list = field(default_factory=list)
    grad_sup_per_site: list = field(default_factory=list)        # [step][site]
    holder_outside_per_site: list = field(default_factory=list)  # [step][site]
    holder_D: list = field(default_factory=list)                 # [step]
    ratio_per_site: list = field(default_factory=list)           # [step][site]
    superlevel_area: list = field(default_factory=list)          # [step]
    superlevel_level: list = field(default_factory=list)         # [step]
    area_bound: float = 0.0
    mvt_chain: list = field(default_factory=list)                # [step][site]
    conservation_drift: float | None = None
    decomposition_discrepancy: float | None = None
    eps_hat: float | None = None
    M_target: float = 0.0
    ratio_target: float = 3.0
    constants: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, path_json, path_text=None) -> None:
        with open(path_json, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
        if path_text is not None:
            with open(path_text, "w", encoding="utf-8") as fh:
                fh.write(self.summary())

    @classmethod
    def read(cls, path) -> "VerificationReport":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def summary(self) -> str:
        lines = [f"steps checked: {len(self.times)}  (t = {self.times[0]:.4g} .. {self.times[-1]:.4g})"
                 if self.times else "steps checked: 0"]
        if self.eps_hat is not None:
            lines.append(f"fit residual eps_hat: {self.eps_hat:.6g}")
        if self.grad_sup_per_site:
            gs = np.asarray(self.grad_sup_per_site)
            lines.append("min grad sup per site: " + ", ".join(f"{v:.6g}" for v in gs.min(axis=0)))
            rt = np.asarray(self.ratio_per_site)
            lines.append("min C^{1,1/2} ratio per site: " + ", ".join(f"{v:.6g}" for v in rt.min(axis=0)))
            lines.append(f"max superlevel area: {max(self.superlevel_area):.6g}  (bound {self.area_bound:.6g})")
        if self.conservation_drift is not None:
            lines.append(f"conservation drift: {self.conservation_drift:.3e}")
        if self.decomposition_discrepancy is not None:
            lines.append(f"decomposition discrepancy: {self.decomposition_discrepancy:.3e}")
        lines.append("constants: " + ", ".join(f"{k}={v:.4g}" for k, v in self.constants.items()))
        for name, val in self.flags.items():
            lines.append(f"{name}: {val}")
        return "\n".join(lines) + "\n"


def ratio_flag(ratio: float, threshold: float) -> str:
    """``pass``/``fail`` with a ``marginal`` band of 10% around the threshold."""
    if abs(ratio - threshold) <= 0.1 * threshold:
        return "marginal"
    return "pass" if ratio > threshold else "fail"


def verify_snapshots(snapshots: Sequence[ComplexField], sites: AmplificationSites, D: Region, *,
                     M_target: float, eps_hat: float | None = None, ratio_target: float = 3.0,
                     constants: Constants | None = None, pair_budget: int = 2_000_000,
                     seed: int = 0) -> VerificationReport:
    """Measure every amplification claim at each stored snapshot."""
    regions = [sites.amplification_region(i, D) for i in range(sites.n)]
    union = Union(tuple(regions))
    rep = VerificationReport(M_target=float(M_target), eps_hat=eps_hat, ratio_target=float(ratio_target),
                             area_bound=9.0 * sites.n * math.pi * sites.r0 ** 2,
                             constants=(constants or Constants()).to_dict())
    for snap in snapshots:
        gs = [grad_sup(snap, reg)[0] for reg in regions]
        hin = holder_c1half_norm(snap, D, pair_budget, seed=seed)
        hout = [holder_c1half_norm(snap, reg, pair_budget, seed=seed) for reg in regions]
        level = 0.5 * min(gs)
        rep.times.append(snap.time_stamp)
        rep.grad_sup_per_site.append(gs)
        rep.holder_D.append(hin)
        rep.holder_outside_per_site.append(hout)
        rep.ratio_per_site.append([h / hin if hin > 0 else math.inf for h in hout])
        rep.superlevel_level.append(level)
        rep.superlevel_area.append(superlevel_measure(snap, level, union))
        rep.mvt_chain.append([mvt_chain_diagnostic(snap, sites, i, D).to_dict() for i in range(sites.n)])
    gs = np.asarray(rep.grad_sup_per_site)
    ratios = np.asarray(rep.ratio_per_site)
    areas = np.asarray(rep.superlevel_area)
    mvt_ok = all(rec["measured"] >= rec["implied_bound"] - 0.01 * abs(rec["implied_bound"]) and gs[k][rec["site"]]
                 >= rec["implied_bound"] - 0.01 * abs(rec["implied_bound"])
                 for k, step in enumerate(rep.mvt_chain) for rec in step)
    rep.flags = {
        "mvt_chain": "pass" if mvt_ok else "fail",
        "grad_exceeds_M": "pass" if gs.min() >= M_target else "fail",
        "ratio_exceeds_M_half": ratio_flag(float(ratios.min()), 0.5 * M_target),
        "ratio_exceeds_target": "pass" if ratios.min() >= ratio_target else "fail",
        "area_within_bound": "pass" if np.all(areas <= rep.area_bound) else "fail",
        "area_positive": "pass" if np.all(areas > 0) else "fail",
    }
    return rep
