"""Product geometry [0, L1] x M0 with M0 the unit disk, its prism mesh,
boundary normal charts, and geodesics (chords) of the transversal disk.

Node numbering of the 3-D mesh is layer-major: ``node = i1 * n2 + i2`` where
``i1`` indexes the x1 grid and ``i2`` the disk triangulation.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import CubicSpline
from scipy.spatial import Delaunay

from .errors import ChartUnavailable, ConfigError, DegenerateResolution, NonTangentialViolation

ANGLE_TOL = 1e-3
BOUNDARY_TOL = 1e-12


# ---------------------------------------------------------------------------
# transversal manifold and product geometry


@dataclass(frozen=True)
class TransversalManifold:
    """Unit disk with metric c0(r) * Euclidean; ``conformal_profile`` holds
    samples of c0 on a uniform radial grid over [0, 1] (None means flat)."""

    conformal_profile: tuple[float, ...] | None = None
    c_min: float = 0.5

    def __post_init__(self):
        if self.conformal_profile is not None:
            c = np.asarray(self.conformal_profile, dtype=float)
            if c.size < 2:
                raise ConfigError("conformal_profile needs at least two samples")
            if np.min(c) < self.c_min:
                raise ConfigError(f"conformal factor drops below c_min={self.c_min}")
            if np.max(np.abs(c - 1.0)) > 0.1 + 1e-12:
                raise ConfigError("only small radial perturbations |c0 - 1| <= 0.1 are supported")

    @property
    def is_flat(self) -> bool:
        return self.conformal_profile is None

    @cached_property
    def _spline(self) -> CubicSpline | None:
        if self.conformal_profile is None:
            return None
        c = np.asarray(self.conformal_profile, dtype=float)
        r = np.linspace(0.0, 1.0, c.size)
        # clamped at r = 0 so that c0 is smooth through the centre
        return CubicSpline(r, c, bc_type=((1, 0.0), "not-a-knot"))

    def c0(self, r):
        r = np.asarray(r, dtype=float)
        if self._spline is None:
            return np.ones_like(r)
        return self._spline(np.clip(r, 0.0, None))

    def dc0(self, r, order: int = 1):
        r = np.asarray(r, dtype=float)
        if self._spline is None:
            return np.zeros_like(r)
        return self._spline(np.clip(r, 0.0, None), order)

    def gauss_curvature(self, r):
        """K = -Delta_e(rho) / c0 with rho = log(c0) / 2 (radial Laplacian)."""
        r = np.asarray(r, dtype=float)
        if self.is_flat:
            return np.zeros_like(r)
        c, c1, c2 = self.c0(r), self.dc0(r, 1), self.dc0(r, 2)
        rho1 = 0.5 * c1 / c
        rho2 = 0.5 * (c2 / c - (c1 / c) ** 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            lap = np.where(r > 1e-8, rho2 + rho1 / np.maximum(r, 1e-300), 2.0 * rho2)
        return -lap / c

    def christoffel_accel(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Geodesic acceleration for g = exp(2 rho) * delta."""
        r = np.hypot(x[0], x[1])
        if self.is_flat or r < 1e-14:
            return np.zeros(2)
        rho1 = 0.5 * float(self.dc0(r)) / float(self.c0(r))
        grad = rho1 * x / r
        return -2.0 * (grad @ v) * v + (v @ v) * grad


@dataclass(frozen=True)
class CylinderGeometry:
    L1: float = 1.0
    transversal: TransversalManifold = field(default_factory=TransversalManifold)
    margin: float = 0.25

    def __post_init__(self):
        if self.L1 <= 0:
            raise ConfigError("L1 must be positive")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")

    @property
    def slab(self) -> tuple[float, float]:
        return (-self.margin, self.L1 + self.margin)


@dataclass(frozen=True)
class GeometryConfig:
    geometry: CylinderGeometry
    disk_resolution: int = 8
    x1_resolution: int = 10

    def build_mesh(self) -> "Mesh":
        return build_mesh(self.geometry, (self.disk_resolution, self.x1_resolution))


def load_geometry_config(path: str | Path) -> GeometryConfig:
    """Read the ``[geometry]`` section of an INI-style text config."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    return parse_geometry_section(parser["geometry"] if parser.has_section("geometry") else {})


def parse_geometry_section(sec) -> GeometryConfig:
    try:
        L1 = float(sec.get("L1", 1.0))
        margin = float(sec.get("margin", 0.25))
        disk_res = int(sec.get("disk_resolution", 8))
        x1_res = int(sec.get("x1_resolution", 10))
        prof = sec.get("conformal_profile", "").strip()
    except ValueError as exc:
        raise ConfigError(f"bad geometry value: {exc}") from exc
    profile = None
    if prof:
        try:
            profile = tuple(float(t) for t in prof.replace(",", " ").split())
        except ValueError as exc:
            raise ConfigError(f"bad conformal_profile: {exc}") from exc
    geom = CylinderGeometry(L1=L1, transversal=TransversalManifold(profile), margin=margin)
    return GeometryConfig(geom, disk_res, x1_res)


# ---------------------------------------------------------------------------
# meshes


@dataclass(frozen=True)
class DiskMesh:
    """Triangulation of the unit disk with P1 stiffness and lumped masses."""

    nodes: np.ndarray  # (n2, 2)
    triangles: np.ndarray  # (nt, 3)
    boundary: np.ndarray  # indices on |x| = 1, counter-clockwise
    c0: np.ndarray  # conformal factor at nodes

    @property
    def n(self) -> int:
        return len(self.nodes)

    @cached_property
    def interior(self) -> np.ndarray:
        mask = np.ones(self.n, bool)
        mask[self.boundary] = False
        return np.flatnonzero(mask)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        # the 2-D Dirichlet form is conformally invariant: no c0 here
        p = self.nodes[self.triangles]
        area = self.areas
        # gradients of barycentric coordinates
        e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        grads = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2 * area)[:, None, None]
        local = np.einsum("tid,tjd->tij", grads, grads) * area[:, None, None]
        rows = np.repeat(self.triangles, 3, axis=1).ravel()
        cols = np.tile(self.triangles, (1, 3)).ravel()
        return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(self.n, self.n))

    @cached_property
    def weights(self) -> np.ndarray:
        """Lumped mass (vertex quadrature of c0 dx)."""
        w = np.zeros(self.n)
        np.add.at(w, self.triangles.ravel(), np.repeat(self.areas / 3.0, 3))
        return w * self.c0

    @cached_property
    def boundary_lengths(self) -> np.ndarray:
        """Lumped boundary length per node (zero off the boundary)."""
        b = self.boundary
        pts = self.nodes[b]
        seg = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
        seg = seg * np.sqrt(0.5 * (self.c0[b] + np.roll(self.c0[b], -1)))
        out = np.zeros(self.n)
        out[b] = 0.5 * (seg + np.roll(seg, 1))
        return out

    @cached_property
    def spacing(self) -> float:
        p = self.nodes[self.triangles]
        edges = np.concatenate([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
        return float(np.max(np.linalg.norm(edges, axis=1)))

    def interpolator(self):
        from scipy.interpolate import LinearNDInterpolator

        tri = Delaunay(self.nodes)
        return lambda values: LinearNDInterpolator(tri, values, fill_value=0.0)


def triangulate_disk(n_rings: int, transversal: TransversalManifold | None = None) -> DiskMesh:
    """Concentric-ring point set (ring j carries 6j points) + Delaunay."""
    if n_rings < 2:
        raise DegenerateResolution("disk needs at least 2 rings")
    pts = [np.zeros((1, 2))]
    boundary_start = 1
    for j in range(1, n_rings + 1):
        m = 6 * j
        ang = 2 * np.pi * np.arange(m) / m + (0.5 * np.pi / m if j % 2 else 0.0)
        r = j / n_rings
        pts.append(np.column_stack([r * np.cos(ang), r * np.sin(ang)]))
        if j == n_rings:
            boundary_start = sum(len(q) for q in pts[:-1])
    nodes = np.vstack(pts)
    b = np.arange(boundary_start, len(nodes))
    nodes[b] /= np.linalg.norm(nodes[b], axis=1)[:, None]
    tri = Delaunay(nodes).simplices.astype(np.int64)
    p = nodes[tri]
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    orient = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    tri[orient < 0] = tri[orient < 0][:, [0, 2, 1]]
    keep = np.abs(orient) > 1e-12
    tri = tri[keep]
    t = transversal or TransversalManifold()
    c0 = t.c0(np.linalg.norm(nodes, axis=1))
    return DiskMesh(nodes=nodes, triangles=tri, boundary=b, c0=c0)


@dataclass(frozen=True)
class Mesh:
    """Tensor-product prism mesh of [0, L1] x disk.

    Elements are prisms (triangle x interval); the bilinear forms are assembled
    as Kronecker products so that the discrete Laplacian is an exact sum of an
    x1 part and a transversal part.
    """

    geometry: CylinderGeometry
    x1: np.ndarray
    disk: DiskMesh

    @property
    def n1(self) -> int:
        return len(self.x1)

    @property
    def n2(self) -> int:
        return self.disk.n

    @property
    def n(self) -> int:
        return self.n1 * self.n2

    @cached_property
    def nodes(self) -> np.ndarray:
        """Coordinates (x1, x, y) per node."""
        X1 = np.repeat(self.x1, self.n2)
        XY = np.tile(self.disk.nodes, (self.n1, 1))
        return np.column_stack([X1, XY])

    @cached_property
    def prisms(self) -> np.ndarray:
        """(n_elem, 6): bottom triangle then top triangle."""
        tri = self.disk.triangles
        out = []
        for i in range(self.n1 - 1):
            out.append(np.hstack([tri + i * self.n2, tri + (i + 1) * self.n2]))
        return np.vstack(out)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        m = np.zeros((self.n1, self.n2), bool)
        m[0, :] = m[-1, :] = True
        m[:, self.disk.boundary] = True
        return m.ravel()

    @cached_property
    def boundary(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @cached_property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @property
    def quadrature_order(self) -> int:
        return 1  # vertex quadrature for the mass factors

    # 1-D factors --------------------------------------------------------
    @cached_property
    def w1(self) -> np.ndarray:
        d = np.diff(self.x1)
        w = np.zeros(self.n1)
        w[:-1] += d / 2
        w[1:] += d / 2
        return w

    @cached_property
    def K1(self) -> sp.csr_matrix:
        d = np.diff(self.x1)
        main = np.zeros(self.n1)
        main[:-1] += 1 / d
        main[1:] += 1 / d
        return sp.diags([main, -1 / d, -1 / d], [0, 1, -1], format="csr")

    # 3-D forms -----------------------------------------------------------
    @cached_property
    def weights(self) -> np.ndarray:
        """Lumped volume weights realising dV_g."""
        return np.kron(self.w1, self.disk.weights)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        K = sp.kron(self.K1, sp.diags(self.disk.weights)) + sp.kron(sp.diags(self.w1), self.disk.stiffness)
        return K.tocsr()

    @cached_property
    def boundary_weights(self) -> np.ndarray:
        """Lumped surface measure on boundary nodes (caps + lateral)."""
        cap = np.zeros(self.n1)
        cap[0] = cap[-1] = 1.0
        b = np.kron(cap, self.disk.weights) + np.kron(self.w1, self.disk.boundary_lengths)
        return b[self.boundary]

    @property
    def volume(self) -> float:
        return float(self.weights.sum())

    @cached_property
    def element_volumes(self) -> np.ndarray:
        return np.kron(np.diff(self.x1), self.disk.areas)

    @cached_property
    def tets(self) -> np.ndarray:
        """Conforming split of every prism into three tetrahedra."""
        out = []
        for pr in self.prisms:
            bot, top = pr[:3], pr[3:]
            order = np.argsort(bot)
            a, b, c = bot[order]
            A, B, C = top[order]
            out += [(a, b, c, C), (a, b, B, C), (a, A, B, C)]
        return np.asarray(out, dtype=np.int64)

    @cached_property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.nodes).tobytes())
        h.update(np.ascontiguousarray(self.disk.triangles).tobytes())
        h.update(np.ascontiguousarray(self.disk.c0).tobytes())
        return h.hexdigest()[:16]

    def layer(self, values: np.ndarray) -> np.ndarray:
        """Reshape nodal values to (n1, n2)."""
        return np.asarray(values).reshape(self.n1, self.n2)

    def export_csv(self, directory: str | Path) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        nodes_path, elem_path = d / "mesh_nodes.csv", d / "mesh_elements.csv"
        with nodes_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "x1", "x", "y", "boundary"])
            for i, (p, bnd) in enumerate(zip(self.nodes, self.boundary_mask)):
                w.writerow([i, repr(p[0]), repr(p[1]), repr(p[2]), int(bnd)])
        with elem_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "n0", "n1", "n2", "n3"])
            for i, t in enumerate(self.tets):
                w.writerow([i, *map(int, t)])
        return nodes_path, elem_path


def tet_volumes(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = nodes[tets]
    return np.abs(np.linalg.det(p[:, 1:] - p[:, :1])) / 6.0


def build_mesh(geometry: CylinderGeometry, resolution: int | Sequence[int]) -> Mesh:
    """Build the prism mesh.

    ``resolution`` is either ``(disk_rings, x1_cells)`` or an approximate
    total node count, in which case the disk spacing and the x1 spacing are
    balanced.
    """
    if np.isscalar(resolution):
        target = int(resolution)
        if target < 100:
            raise DegenerateResolution(f"node target {target} too small (need >= 100)")
        rings = 2
        while True:
            nxt = rings + 1
            cells = max(4, round(geometry.L1 * nxt))
            if (1 + 3 * nxt * (nxt + 1)) * (cells + 1) > target:
                break
            rings = nxt
        cells = max(4, round(geometry.L1 * rings))
    else:
        rings, cells = (int(v) for v in resolution)
    if rings < 4 or cells < 4:
        raise DegenerateResolution(f"need >= 4 elements per axis, got rings={rings}, x1 cells={cells}")
    disk = triangulate_disk(rings, geometry.transversal)
    x1 = np.linspace(0.0, geometry.L1, cells + 1)
    return Mesh(geometry=geometry, x1=x1, disk=disk)


# ---------------------------------------------------------------------------
# geodesics


@dataclass(frozen=True)
class Geodesic:
    """Unit-speed (in g0) boundary-to-boundary geodesic of the disk.

    For the flat disk this is the chord with direction angle ``theta`` and
    signed offset ``p``: gamma(t) = p * n + (t - L/2) * d with
    d = (cos theta, sin theta), n = (-sin theta, cos theta).
    """

    theta: float
    p: float
    length: float
    t: np.ndarray | None = None  # samples for curved geodesics
    xy: np.ndarray | None = None
    vel: np.ndarray | None = None

    @property
    def direction(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta)])

    @property
    def normal(self) -> np.ndarray:
        return np.array([-np.sin(self.theta), np.cos(self.theta)])

    @property
    def is_chord(self) -> bool:
        return self.xy is None

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.is_chord:
            return self.p * self.normal + (t[..., None] - self.length / 2) * self.direction
        out = np.empty(t.shape + (2,))
        for k in range(2):
            out[..., k] = np.interp(t, self.t, self.xy[:, k])
        return out

    def velocity(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.is_chord:
            return np.broadcast_to(self.direction, t.shape + (2,)).copy()
        out = np.empty(t.shape + (2,))
        for k in range(2):
            out[..., k] = np.interp(t, self.t, self.vel[:, k])
        return out

    @property
    def entry(self) -> np.ndarray:
        return self(0.0)

    @property
    def exit(self) -> np.ndarray:
        return self(self.length)

    def incidence_cosines(self, transversal: TransversalManifold | None = None) -> tuple[float, float]:
        """|cos| of the angle with the inward/outward normal at both ends."""
        out = []
        for t in (0.0, self.length):
            x, v = self(t), self.velocity(t)
            out.append(abs(float(x @ v)) / (np.linalg.norm(x) * np.linalg.norm(v)))
        return out[0], out[1]


def trace_geodesic(M0: TransversalManifold, theta: float, p: float, steps: int = 4000) -> Geodesic:
    """Trace the geodesic entering like the chord (theta, p).

    Flat disk: closed-form chord.  Conformal disk: the geodesic leaving the
    chord's entry point in the chord direction, integrated with classical RK4.
    """
    if not abs(p) < 1 - ANGLE_TOL:
        raise NonTangentialViolation(f"offset |p|={abs(p)} too close to 1 (angle_tol={ANGLE_TOL})")
    L_flat = 2.0 * np.sqrt(1.0 - p * p)
    if M0.is_flat:
        return Geodesic(theta=theta, p=p, length=L_flat)
    d = np.array([np.cos(theta), np.sin(theta)])
    n = np.array([-np.sin(theta), np.cos(theta)])
    x = p * n - (L_flat / 2) * d
    v = d / np.sqrt(float(M0.c0(1.0)))
    t_s, x_s, v_s = _integrate_geodesic(M0, x, v, dt=L_flat / steps)
    g = Geodesic(theta=theta, p=p, length=float(t_s[-1]), t=t_s, xy=x_s, vel=v_s)
    for c in g.incidence_cosines():
        if c < ANGLE_TOL:
            raise NonTangentialViolation("curved geodesic leaves tangentially")
    return g


def _integrate_geodesic(M0, x0, v0, dt, max_len=10.0):
    def f(y):
        return np.concatenate([y[2:], M0.christoffel_accel(y[:2], y[2:])])

    y = np.concatenate([x0, v0])
    ts, ys = [0.0], [y.copy()]
    t = 0.0
    # step off the boundary first
    while t < max_len:
        k1 = f(y)
        k2 = f(y + 0.5 * dt * k1)
        k3 = f(y + 0.5 * dt * k2)
        k4 = f(y + dt * k3)
        y_new = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if t > 10 * dt and np.hypot(*y_new[:2]) >= 1.0:
            # cubic Hermite location of the exit within the last step
            a, b = 0.0, 1.0
            fa = f(y)
            fb = f(y_new)
            for _ in range(60):
                m = 0.5 * (a + b)
                s = m
                h00, h10 = 2 * s**3 - 3 * s**2 + 1, s**3 - 2 * s**2 + s
                h01, h11 = -2 * s**3 + 3 * s**2, s**3 - s**2
                ym = h00 * y + h10 * dt * fa + h01 * y_new + h11 * dt * fb
                if np.hypot(*ym[:2]) >= 1.0:
                    b = m
                else:
                    a = m
            s = 0.5 * (a + b)
            h00, h10 = 2 * s**3 - 3 * s**2 + 1, s**3 - 2 * s**2 + s
            h01, h11 = -2 * s**3 + 3 * s**2, s**3 - s**2
            ye = h00 * y + h10 * dt * fa + h01 * y_new + h11 * dt * fb
            ye[:2] /= np.hypot(*ye[:2])
            ts.append(t + s * dt)
            ys.append(ye)
            break
        y, t = y_new, t + dt
        ts.append(t)
        ys.append(y.copy())
    ys = np.asarray(ys)
    return np.asarray(ts), ys[:, :2], ys[:, 2:]


def geodesic_speed_defect(M0: TransversalManifold, g: Geodesic) -> float:
    """max_t | |gamma'(t)|_{g0} - 1 |."""
    t = g.t if g.t is not None else np.linspace(0, g.length, 201)
    x, v = g(t), g.velocity(t)
    c = M0.c0(np.linalg.norm(x, axis=-1))
    return float(np.max(np.abs(np.sqrt(c) * np.linalg.norm(v, axis=-1) - 1.0)))


def chord_family(n_theta: int, n_p: int, full_circle: bool = False) -> list[tuple[float, float]]:
    """Parallel-beam chord grid: angles uniform on [0, pi) (or [0, 2 pi)),
    offsets at cell centres of (-1, 1)."""
    span = 2 * np.pi if full_circle else np.pi
    thetas = span * np.arange(n_theta) / n_theta
    ps = -1 + (np.arange(n_p) + 0.5) * 2.0 / n_p
    return [(float(a), float(b)) for a in thetas for b in ps]


# ---------------------------------------------------------------------------
# boundary normal coordinates


@dataclass(frozen=True)
class BoundaryChart:
    """Boundary normal coordinates (a, b, x_n) centred at ``base``.

    lateral: point = (x1_0 + a, (1 - r(x_n)) e(phi_0 + b / R0))
    cap:     point = (x_n or L1 - x_n, x0 + a, y0 + b)
    """

    base: np.ndarray  # (x1, x, y)
    kind: str
    radius: float
    geometry: CylinderGeometry
    phi0: float = 0.0

    @property
    def tangent_frame(self) -> np.ndarray:
        if self.kind == "lateral":
            return np.array([[1.0, 0.0, 0.0], [0.0, -np.sin(self.phi0), np.cos(self.phi0)]])
        return np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])

    @property
    def inward_normal(self) -> np.ndarray:
        if self.kind == "lateral":
            return np.array([0.0, -np.cos(self.phi0), -np.sin(self.phi0)])
        return np.array([1.0, 0.0, 0.0]) if self.base[0] < self.geometry.L1 / 2 else np.array([-1.0, 0.0, 0.0])

    def _radius_of_depth(self, xn):
        """r with int_r^1 sqrt(c0) dr' = x_n (identity when flat)."""
        t = self.geometry.transversal
        xn = np.asarray(xn, dtype=float)
        if t.is_flat:
            return 1.0 - xn
        rr = np.linspace(0.0, 1.0, 2001)
        depth = np.concatenate([[0.0], np.cumsum(0.5 * (np.sqrt(t.c0(rr[1:])) + np.sqrt(t.c0(rr[:-1]))) * np.diff(rr))])
        depth = depth[-1] - depth
        return np.interp(xn, depth[::-1], rr[::-1])

    def to_physical(self, a, b, xn) -> np.ndarray:
        a, b, xn = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, xn)))
        if self.kind == "lateral":
            R0 = np.sqrt(float(self.geometry.transversal.c0(1.0)))
            r = self._radius_of_depth(xn)
            ang = self.phi0 + b / R0
            return np.stack([self.base[0] + a, r * np.cos(ang), r * np.sin(ang)], axis=-1)
        x1 = xn if self.base[0] < self.geometry.L1 / 2 else self.geometry.L1 - xn
        return np.stack([x1, self.base[1] + a, self.base[2] + b], axis=-1)

    def from_physical(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.kind == "lateral":
            R0 = np.sqrt(float(self.geometry.transversal.c0(1.0)))
            r = np.hypot(pts[..., 1], pts[..., 2])
            t = self.geometry.transversal
            if t.is_flat:
                xn = 1.0 - r
            else:
                rr = np.linspace(0.0, 1.0, 2001)
                depth = np.concatenate([[0.0], np.cumsum(0.5 * (np.sqrt(t.c0(rr[1:])) + np.sqrt(t.c0(rr[:-1]))) * np.diff(rr))])
                xn = np.interp(r, rr, depth[-1] - depth)
            ang = np.angle(np.exp(1j * (np.arctan2(pts[..., 2], pts[..., 1]) - self.phi0)))
            return np.stack([pts[..., 0] - self.base[0], R0 * ang, xn], axis=-1)
        xn = pts[..., 0] if self.base[0] < self.geometry.L1 / 2 else self.geometry.L1 - pts[..., 0]
        return np.stack([pts[..., 1] - self.base[1], pts[..., 2] - self.base[2], xn], axis=-1)

    def metric(self, a, b, xn, eps: float = 1e-6) -> np.ndarray:
        """Chart metric g_ij by central differences of the embedding,
        weighted with the ambient metric e + c0 * e2."""
        X = self.to_physical(a, b, xn)
        J = []
        for k in range(3):
            dp = [np.zeros_like(np.asarray(a, float)) for _ in range(3)]
            dp[k] = dp[k] + eps
            up = self.to_physical(a + dp[0], b + dp[1], xn + dp[2])
            dn = self.to_physical(a - dp[0], b - dp[1], xn - dp[2])
            J.append((up - dn) / (2 * eps))
        J = np.stack(J, axis=-1)  # (..., 3 ambient, 3 chart)
        c = self.geometry.transversal.c0(np.hypot(X[..., 1], X[..., 2]))
        G = np.zeros(np.shape(X)[:-1] + (3, 3))
        G[..., 0, 0] = 1.0
        G[..., 1, 1] = c
        G[..., 2, 2] = c
        return np.einsum("...ai,...ab,...bj->...ij", J, G, J)


def boundary_chart(M: CylinderGeometry, x0: Sequence[float], radius: float = 0.3) -> BoundaryChart:
    """Boundary normal chart at a boundary point x0 = (x1, x, y)."""
    x0 = np.asarray(x0, dtype=float)
    r = float(np.hypot(x0[1], x0[2]))
    on_lateral = abs(r - 1.0) <= 1e-9
    on_cap = abs(x0[0]) <= 1e-12 or abs(x0[0] - M.L1) <= 1e-12
    if on_lateral and not on_cap:
        if min(x0[0], M.L1 - x0[0]) <= radius:
            raise ChartUnavailable(f"point within chart radius {radius} of the corner set")
        return BoundaryChart(base=x0, kind="lateral", radius=radius, geometry=M, phi0=float(np.arctan2(x0[2], x0[1])))
    if on_cap and not on_lateral:
        if 1.0 - r <= radius:
            raise ChartUnavailable(f"cap point within chart radius {radius} of the corner set")
        if not M.transversal.is_flat:
            raise ChartUnavailable("cap charts are only available for the flat transversal disk")
        return BoundaryChart(base=x0, kind="cap", radius=radius, geometry=M)
    raise ChartUnavailable("point is not on the boundary or lies on the corner set")


def chart_metric_defect(chart: BoundaryChart, rs: np.ndarray) -> np.ndarray:
    """max_{ab} |g^{ab}(x', 0) - delta^{ab}| along |x'| = rs (diagonal direction)."""
    out = []
    for r in rs:
        a = b = r / np.sqrt(2)
        g = chart.metric(np.array(a), np.array(b), np.array(0.0))
        ginv = np.linalg.inv(g)[:2, :2]
        out.append(np.max(np.abs(ginv - np.eye(2))))
    return np.asarray(out)
