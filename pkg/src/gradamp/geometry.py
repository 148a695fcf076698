"""Planar regions, signed distances, amplification sites and cell quadrature.

Regions are immutable and evaluate membership and signed distance on
``(P, 2)`` point arrays. Set expressions such as ``Omega minus closure(D)``
are built from :class:`Difference` and :class:`Union`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class PlacementInfeasible(ValueError):
    """Sites cannot be placed with the requested radius."""


class EmptyRegion(ValueError):
    """A quadrature or sampling request found no points inside the region."""


def _as_points(x) -> np.ndarray:
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    return pts


class Shape:
    """Base class: subclasses define ``signed_distance`` and ``bbox``."""

    def signed_distance(self, x) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:  # pragma: no cover - abstract
        raise NotImplementedError

    def contains(self, x, closed: bool = True) -> np.ndarray:
        sd = self.signed_distance(x)
        return sd <= 0.0 if closed else sd < 0.0


@dataclass(frozen=True)
class Region(Shape):
    """Disk, axis-aligned rectangle or convex polygon, optionally offset.

    Attributes
    ----------
    kind : {"disk", "rectangle", "polygon"}
    params : tuple
        disk: ``(cx, cy, radius)``; rectangle: ``(x0, y0, x1, y1)``;
        polygon: flat vertex coordinates in counterclockwise order.
    offset : float
        Outward offset distance. The region is ``{sd_base <= offset}``, which
        for convex shapes is the Minkowski sum with a disk.
    """

    kind: str
    params: tuple
    offset: float = 0.0

    def __post_init__(self):
        if self.kind == "disk":
            if self.params[2] <= 0:
                raise ValueError("disk radius must be positive")
        elif self.kind == "rectangle":
            x0, y0, x1, y1 = self.params
            if not (x1 > x0 and y1 > y0):
                raise ValueError("rectangle corners must satisfy x0 < x1, y0 < y1")
        elif self.kind == "polygon":
            v = self.vertices()
            if len(v) < 3:
                raise ValueError("polygon needs at least 3 vertices")
            e = np.roll(v, -1, axis=0) - v
            nxt = np.roll(e, -1, axis=0)
            cross = e[:, 0] * nxt[:, 1] - e[:, 1] * nxt[:, 0]
            if np.any(cross <= 0.0):
                raise ValueError("polygon must be strictly convex and counterclockwise")
        else:
            raise ValueError(f"unknown region kind {self.kind!r}")
        if self.offset < 0:
            raise ValueError("offset must be non-negative")

    # constructors -----------------------------------------------------
    @classmethod
    def disk(cls, center, radius) -> "Region":
        return cls("disk", (float(center[0]), float(center[1]), float(radius)))

    @classmethod
    def rectangle(cls, lower, upper) -> "Region":
        return cls("rectangle", (float(lower[0]), float(lower[1]), float(upper[0]), float(upper[1])))

    @classmethod
    def polygon(cls, vertices) -> "Region":
        flat = tuple(float(c) for v in vertices for c in v)
        return cls("polygon", flat)

    # geometry ---------------------------------------------------------
    def vertices(self) -> np.ndarray:
        if self.kind == "polygon":
            return np.asarray(self.params, dtype=np.float64).reshape(-1, 2)
        if self.kind == "rectangle":
            x0, y0, x1, y1 = self.params
            return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
        raise ValueError("disks have no vertices")

    def _base_sd(self, pts: np.ndarray) -> np.ndarray:
        if self.kind == "disk":
            cx, cy, r = self.params
            return np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) - r
        if self.kind == "rectangle":
            x0, y0, x1, y1 = self.params
            c = np.array([(x0 + x1) / 2, (y0 + y1) / 2])
            half = np.array([(x1 - x0) / 2, (y1 - y0) / 2])
            q = np.abs(pts - c) - half
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(np.max(q, axis=1), 0.0)
            return outside + inside
        v = self.vertices()
        a = v[None, :, :]
        b = np.roll(v, -1, axis=0)[None, :, :]
        p = pts[:, None, :]
        ab = b - a
        t = np.clip(np.sum((p - a) * ab, axis=2) / np.sum(ab * ab, axis=2), 0.0, 1.0)
        closest = a + t[..., None] * ab
        dist = np.min(np.linalg.norm(p - closest, axis=2), axis=1)
        cross = ab[..., 0] * (p[..., 1] - a[..., 1]) - ab[..., 1] * (p[..., 0] - a[..., 0])
        inside = np.all(cross >= 0.0, axis=1)
        return np.where(inside, -dist, dist)

    def signed_distance(self, x) -> np.ndarray:
        """Signed Euclidean distance: negative inside, zero on the boundary."""
        pts = _as_points(x)
        return self._base_sd(pts) - self.offset

    def bbox(self):
        if self.kind == "disk":
            cx, cy, r = self.params
            lo, hi = np.array([cx - r, cy - r]), np.array([cx + r, cy + r])
        else:
            v = self.vertices()
            lo, hi = v.min(axis=0), v.max(axis=0)
        return lo - self.offset, hi + self.offset

    def centroid(self) -> np.ndarray:
        if self.kind == "disk":
            return np.array(self.params[:2])
        return self.vertices().mean(axis=0)

    def outward_normal(self, x, tol: float = 1e-9) -> np.ndarray:
        """Outward unit normal at a boundary point.

        At a polygon vertex this is the normalized sum of the two adjacent
        edge normals, i.e. the angle bisector.
        """
        p = np.asarray(x, dtype=np.float64)
        if self.kind == "disk" or self.offset > 0:
            if self.kind == "disk":
                d = p - np.array(self.params[:2])
            else:
                h = 1e-7
                d = np.array([
                    self.signed_distance(p + [h, 0])[0] - self.signed_distance(p - [h, 0])[0],
                    self.signed_distance(p + [0, h])[0] - self.signed_distance(p - [0, h])[0],
                ])
            return d / np.linalg.norm(d)
        v = self.vertices()
        normals = []
        for a, b in zip(v, np.roll(v, -1, axis=0)):
            ab = b - a
            t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
            if np.linalg.norm(p - (a + t * ab)) <= tol:
                normals.append(np.array([ab[1], -ab[0]]) / np.linalg.norm(ab))
        if not normals:
            raise ValueError("point is not on the boundary")
        n = np.sum(normals, axis=0)
        return n / np.linalg.norm(n)

    def area(self) -> float:
        if self.kind == "disk":
            r = self.params[2] + self.offset
            return math.pi * r * r
        v = self.vertices()
        x, y = v[:, 0], v[:, 1]
        base = 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
        perim = float(np.sum(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)))
        o = self.offset
        return base + perim * o + math.pi * o * o

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "disk":
            out.update(center=list(self.params[:2]), radius=self.params[2])
        elif self.kind == "rectangle":
            out.update(lower=list(self.params[:2]), upper=list(self.params[2:]))
        else:
            out.update(vertices=self.vertices().tolist())
        if self.offset:
            out["offset"] = self.offset
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Region":
        kind = data["kind"]
        if kind == "disk":
            reg = cls.disk(data["center"], data["radius"])
        elif kind == "rectangle":
            reg = cls.rectangle(data["lower"], data["upper"])
        elif kind == "polygon":
            reg = cls.polygon(data["vertices"])
        else:
            raise ValueError(f"unknown region kind {kind!r}")
        off = float(data.get("offset", 0.0))
        return Region(reg.kind, reg.params, off) if off else reg


@dataclass(frozen=True)
class Difference(Shape):
    """``outer`` minus the closure of ``inner``."""

    outer: Shape
    inner: Shape

    def signed_distance(self, x):
        return np.maximum(self.outer.signed_distance(x), -self.inner.signed_distance(x))

    def contains(self, x, closed: bool = True):
        return self.outer.contains(x, closed) & (self.inner.signed_distance(x) > 0.0)

    def bbox(self):
        return self.outer.bbox()


@dataclass(frozen=True)
class Union(Shape):
    parts: tuple

    def signed_distance(self, x):
        return np.min(np.stack([p.signed_distance(x) for p in self.parts]), axis=0)

    def contains(self, x, closed: bool = True):
        out = np.zeros(_as_points(x).shape[0], dtype=bool)
        for p in self.parts:
            out |= p.contains(x, closed)
        return out

    def bbox(self):
        boxes = [p.bbox() for p in self.parts]
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)


def signed_distance(region: Shape, x) -> np.ndarray | float:
    """Signed distance of point(s) ``x`` to ``region``."""
    out = region.signed_distance(x)
    if np.ndim(x) == 1:
        return float(out[0])
    return out


def smooth_outer_approx(region: Region, delta: float) -> Region:
    """Region ``{sd <= delta/2}`` strictly containing ``region``.

    For polygons this rounds every corner with radius ``delta/2``. Every
    boundary point lies at distance ``delta/2 < delta`` from ``region``.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    return Region(region.kind, region.params, region.offset + 0.5 * delta)


@dataclass(frozen=True)
class AmplificationSites:
    """Boundary points of D with the centers of the exterior balls."""

    points_x: np.ndarray
    centers_y: np.ndarray
    r0: float
    normals: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return int(self.points_x.shape[0])

    def peak_points(self) -> np.ndarray:
        """Points of each sphere closest to D: ``x_i + r0 n_i``."""
        return self.points_x + self.r0 * self.normals

    def ball(self, i: int) -> Region:
        return Region.disk(self.centers_y[i], self.r0)

    def amplification_region(self, i: int, D: Shape) -> Difference:
        """``B_{3 r0}(x_i)`` minus the closure of D."""
        return Difference(Region.disk(self.points_x[i], 3.0 * self.r0), D)

    def to_dict(self) -> dict:
        return {"points_x": self.points_x.tolist(), "centers_y": self.centers_y.tolist(),
                "r0": self.r0, "normals": self.normals.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "AmplificationSites":
        return cls(np.asarray(data["points_x"], float), np.asarray(data["centers_y"], float),
                   float(data["r0"]), np.asarray(data["normals"], float))


def check_sites(sites: AmplificationSites, D: Region, omega: Shape | None = None,
                tol: float = 1e-12) -> list[str]:
    """Return the list of violated site invariants (empty when valid)."""
    problems = []
    r0 = sites.r0
    gaps = np.linalg.norm(sites.points_x - sites.centers_y, axis=1)
    if np.any(np.abs(gaps - 2.0 * r0) > tol * max(1.0, r0)):
        problems.append("|x_i - y_i| != 2 r0")
    for i in range(sites.n):
        for j in range(i + 1, sites.n):
            if np.linalg.norm(sites.centers_y[i] - sites.centers_y[j]) <= 2.0 * r0:
                problems.append(f"balls {i} and {j} intersect")
    sd = D.signed_distance(sites.centers_y)
    # for convex D, dist(D, B_r0(y)) = sd(y) - r0
    if np.any(sd - r0 <= 0.25 * r0):
        problems.append("dist(boundary of D, ball) <= r0/4")
    if omega is not None:
        if np.any(omega.signed_distance(sites.centers_y) + r0 >= 0.0):
            problems.append("ball not inside Omega")
    return problems


def place_centers(points_x, r0: float, D: Region, omega: Shape | None = None) -> AmplificationSites:
    """Place ``y_i = x_i + 2 r0 n_i`` along the outward normal at each ``x_i``.

    Raises
    ------
    PlacementInfeasible
        If a point is off the boundary or any site invariant fails.
    """
    pts = _as_points(points_x)
    if r0 <= 0:
        raise PlacementInfeasible("r0 must be positive")
    sd = D.signed_distance(pts)
    if np.any(np.abs(sd) > 1e-9):
        raise PlacementInfeasible("every x_i must lie on the boundary of D (tolerance 1e-9)")
    normals = np.array([D.outward_normal(p) for p in pts])
    centers = pts + 2.0 * r0 * normals
    sites = AmplificationSites(pts.copy(), centers, float(r0), normals)
    problems = check_sites(sites, D, omega)
    if problems:
        raise PlacementInfeasible("; ".join(problems) + " (shrink r0)")
    return sites


@dataclass(frozen=True)
class Quadrature:
    points: np.ndarray
    weights: np.ndarray

    def integrate(self, values) -> float | complex:
        return np.sum(self.weights * values)

    def __iter__(self):
        return iter(zip(self.points, self.weights))


def region_quadrature(region: Shape, h: float, refine: int = 8, rule: str = "midpoint") -> Quadrature:
    """Cell quadrature of spacing ``h`` clipped to ``region``.

    Cells wholly inside get weight ``h^2`` at their center. Cells cut by the
    boundary are split into ``refine x refine`` sub-cells. The inside
    sub-cells set the weight, and the point moves to their centroid.

    ``rule="gauss2"`` replaces each interior midpoint by the 2x2 tensor
    Gauss-Legendre points of the cell. That removes the ``O(h^2)`` interior
    error, which dominates for strongly peaked integrands such as ``|v|^2``
    for large mode orders.

    Raises
    ------
    EmptyRegion
        If no cell meets the region.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    lo, hi = region.bbox()
    nx = max(1, int(math.ceil((hi[0] - lo[0]) / h)))
    ny = max(1, int(math.ceil((hi[1] - lo[1]) / h)))
    xs = lo[0] + h * (np.arange(nx) + 0.5)
    ys = lo[1] + h * (np.arange(ny) + 0.5)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    centers = np.stack([X.ravel(), Y.ravel()], axis=1)
    sd = region.signed_distance(centers)
    half_diag = h / math.sqrt(2.0)
    full = sd <= -half_diag
    cut = np.abs(sd) < half_diag
    if rule == "midpoint":
        pts = [centers[full]]
        wts = [np.full(int(full.sum()), h * h)]
    elif rule == "gauss2":
        g = h / (2.0 * math.sqrt(3.0))
        shifts = np.array([[-g, -g], [-g, g], [g, -g], [g, g]])
        inner = (centers[full][:, None, :] + shifts[None, :, :]).reshape(-1, 2)
        pts = [inner]
        wts = [np.full(inner.shape[0], 0.25 * h * h)]
    else:
        raise ValueError(f"unknown rule {rule!r}")
    if np.any(cut):
        offs = (np.arange(refine) + 0.5) / refine - 0.5
        OX, OY = np.meshgrid(offs * h, offs * h, indexing="ij")
        sub = np.stack([OX.ravel(), OY.ravel()], axis=1)
        cc = centers[cut]
        allsub = (cc[:, None, :] + sub[None, :, :]).reshape(-1, 2)
        inside = region.contains(allsub).reshape(cc.shape[0], -1)
        counts = inside.sum(axis=1)
        keep = counts > 0
        sums = np.einsum("cs,csk->ck", inside, allsub.reshape(cc.shape[0], -1, 2))
        pts.append(sums[keep] / counts[keep, None])
        wts.append(h * h * counts[keep] / sub.shape[0])
    points = np.concatenate(pts)
    weights = np.concatenate(wts)
    if points.shape[0] == 0:
        raise EmptyRegion("no quadrature cells fall inside the region")
    return Quadrature(points, weights)


def grid_mask(region: Shape, X: np.ndarray, Y: np.ndarray, closed: bool = True) -> np.ndarray:
    """Membership of grid nodes ``(X, Y)`` in ``region``, shaped like ``X``."""
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    return region.contains(pts, closed).reshape(X.shape)
