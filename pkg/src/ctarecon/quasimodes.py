"""Gaussian beam quasimodes v_s on the transversal disk.

Two beam orders are available:

``exact``
    complex-source-point beam  C h^{-1/4} sqrt(2 pi s) e^{-s} J0(s rho),
    rho^2 = (t - i)^2 + y^2 in Fermi coordinates (t, y) of a chord.  It solves
    (-Delta - s^2) v = 0 exactly and agrees with the Riccati beam below to
    leading order (same curvature H(t) = i / (1 + i t) and amplitude).
``riccati``
    quadratic phase t + H y^2 / 2 and leading amplitude a(t) from
    H' + H^2 + K = 0, a' + H a / 2 = 0, H(0) = i, a(0) = 1, times a hard
    cutoff chi(y / delta).

The normalising constant C = pi^{-1/4} makes |v|^2 integrate to
exp(-2 lambda t) along the geodesic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import jve
from scipy.spatial import cKDTree

from .errors import BeamDegenerate, UnderResolved
from .geometry import DiskMesh, Geodesic, TransversalManifold, triangulate_disk

NODES_PER_WAVELENGTH = 6
IM_MIN = 1e-3
_NORM = np.pi ** -0.25


@dataclass(frozen=True)
class SpectralParameter:
    h: float
    lam: float = 0.0
    lam_max: float = 2.0

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if abs(self.lam) > self.lam_max:
            raise ValueError(f"|lambda|={abs(self.lam)} exceeds lambda_max={self.lam_max}")

    @property
    def s(self) -> complex:
        return complex(1.0 / self.h, self.lam)


# ---------------------------------------------------------------------------
# Riccati / transport


def riccati_flat(t):
    """Closed forms on the flat disk: H = i / (1 + i t), a = (1 + i t)^{-1/2}."""
    t = np.asarray(t, dtype=float)
    return 1j / (1 + 1j * t), (1 + 1j * t) ** -0.5


def integrate_riccati(curvature: Callable[[float], float], L: float, steps: int = 2000):
    """RK4 for (H, a) with H' = -H^2 - K(t), a' = -H a / 2 on [0, L]."""
    dt = L / steps

    def f(t, y):
        H, a = y
        return np.array([-H * H - curvature(t), -0.5 * H * a])

    t = np.linspace(0.0, L, steps + 1)
    Y = np.empty((steps + 1, 2), dtype=complex)
    Y[0] = (1j, 1.0)
    for k in range(steps):
        y, tk = Y[k], t[k]
        k1 = f(tk, y)
        k2 = f(tk + dt / 2, y + dt / 2 * k1)
        k3 = f(tk + dt / 2, y + dt / 2 * k2)
        k4 = f(tk + dt, y + dt * k3)
        Y[k + 1] = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return t, Y[:, 0], Y[:, 1]


def _smooth_step(x):
    """C^1 cutoff: 1 on |x| <= 1/2, 0 on |x| >= 1, with derivatives."""
    ax = np.abs(x)
    u = np.clip(2 * ax - 1, 0.0, 1.0)
    chi = 1 - u * u * (3 - 2 * u)
    dchi_du = -6 * u * (1 - u)
    d2chi_du2 = -6 + 12 * u
    inside = (ax > 0.5) & (ax < 1.0)
    sgn = np.sign(x)
    d1 = np.where(inside, dchi_du * 2 * sgn, 0.0)
    d2 = np.where(inside, d2chi_du2 * 4, 0.0)
    return chi, d1, d2


# ---------------------------------------------------------------------------


@dataclass
class GaussianBeam:
    geodesic: Geodesic
    sp: SpectralParameter
    transversal: TransversalManifold
    order: str = "exact"
    delta: float = 0.25
    H: np.ndarray | None = None  # Riccati samples on t_grid
    a: np.ndarray | None = None
    t_grid: np.ndarray | None = None

    @property
    def s(self) -> complex:
        return self.sp.s

    @property
    def scale(self) -> float:
        return _NORM * self.sp.h ** -0.25

    # Fermi coordinates --------------------------------------------------
    def fermi(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = self.geodesic
        xy = np.asarray(xy, dtype=float)
        if g.is_chord:
            rel = xy - g.entry
            return rel @ g.direction, rel @ g.normal
        # curved: nearest sample, signed distance scaled to first order
        pts = g.xy
        _, k = cKDTree(pts).query(xy)
        tang = g.vel[k] / np.linalg.norm(g.vel[k], axis=1)[:, None]
        nrm = np.column_stack([-tang[:, 1], tang[:, 0]])
        rel = xy - pts[k]
        c = self.transversal.c0(np.linalg.norm(pts[k], axis=1))
        t = g.t[k] + np.sqrt(c) * (rel * tang).sum(1)
        return t, np.sqrt(c) * (rel * nrm).sum(1)

    # evaluation -----------------------------------------------------------
    def _exact(self, t, y, derivs: bool = False):
        s = self.s
        rho2 = (t - 1j) ** 2 + y * y
        z = s * np.sqrt(rho2)
        ez = np.exp(np.abs(z.imag) - s)
        pref = self.scale * np.sqrt(2 * np.pi * s)
        v = pref * jve(0, z) * ez
        if not derivs:
            return v
        # d/dx J0(s rho) = -s J1(s rho) * (x-component of grad rho^2) / (2 rho)
        with np.errstate(invalid="ignore", divide="ignore"):
            j1_over_rho = np.where(np.abs(z) > 1e-12, jve(1, z) * ez / np.sqrt(rho2), 0.5 * s * ez)
        dv_dt = -pref * s * j1_over_rho * (t - 1j)
        dv_dy = -pref * s * j1_over_rho * y
        return v, dv_dt, dv_dy

    def _riccati_coeffs(self, t):
        if self.transversal.is_flat:
            H, a = riccati_flat(t)
            return H, a
        H = np.interp(t, self.t_grid, self.H.real) + 1j * np.interp(t, self.t_grid, self.H.imag)
        a = np.interp(t, self.t_grid, self.a.real) + 1j * np.interp(t, self.t_grid, self.a.imag)
        return H, a

    def _riccati(self, t, y):
        H, a = self._riccati_coeffs(t)
        theta = t + 0.5 * H * y * y
        chi, _, _ = _smooth_step(y / self.delta) if self.delta else (1.0, 0, 0)
        return self.scale * a * np.exp(1j * self.s * theta) * chi

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        t, y = self.fermi(xy)
        if self.order == "exact":
            return self._exact(t, y)
        return self._riccati(t, y)

    def sample(self, disk: DiskMesh) -> np.ndarray:
        """Nodal samples on a disk mesh."""
        return self(disk.nodes)

    # analytic residual ------------------------------------------------------
    def residual_values(self, xy: np.ndarray) -> np.ndarray:
        """(-Delta_{g0} - s^2) v at points, from closed-form derivatives."""
        t, y = self.fermi(xy)
        s = self.s
        if not self.geodesic.is_chord:
            raise NotImplementedError("closed-form residual is available on chords only")
        if self.order == "exact":
            v, _, _ = self._exact(t, y, derivs=True)
            rho = np.sqrt((t - 1j) ** 2 + y * y)
            z = s * rho
            ez = np.exp(np.abs(z.imag) - s)
            pref = self.scale * np.sqrt(2 * np.pi * s)
            J0 = jve(0, z) * ez
            with np.errstate(invalid="ignore", divide="ignore"):
                J1r = np.where(np.abs(z) > 1e-12, jve(1, z) * ez / rho, 0.5 * s * ez)
            # F(rho) = J0(s rho): Delta F = F'' |grad rho|^2 + F' Delta rho with
            # |grad rho|^2 = 1, Delta rho = 1 / rho
            Fpp = -s * s * J0 + s * J1r
            Fp_over_rho = -s * J1r
            lap = pref * (Fpp + Fp_over_rho)
            return -lap - s * s * v
        H, a = riccati_flat(t)
        dH, d2H = -H * H, 2 * H**3
        da = -0.5 * H * a
        d2a = -0.5 * (dH * a + H * da)
        th_t = 1 + 0.5 * dH * y * y
        th_tt = 0.5 * d2H * y * y
        th_y, th_yy = H * y, H
        E = np.exp(1j * s * (t + 0.5 * H * y * y))
        f = a * E
        lap_f = E * (d2a + 2j * s * da * th_t + a * (1j * s * th_tt - s * s * th_t**2 + 1j * s * th_yy - s * s * th_y**2))
        if self.delta:
            chi, dchi, d2chi = _smooth_step(y / self.delta)
            dchi, d2chi = dchi / self.delta, d2chi / self.delta**2
        else:
            chi, dchi, d2chi = 1.0, 0.0, 0.0
        f_y = 1j * s * th_y * f
        lap = self.scale * (chi * lap_f + 2 * dchi * f_y + d2chi * f)
        return -lap - s * s * self.scale * f * chi


def chord_beams(sp: SpectralParameter, nodes: np.ndarray, thetas: np.ndarray, ps: np.ndarray) -> np.ndarray:
    """Exact flat-disk beams for a batch of chords, shape (n_nodes, n_chords).

    Chord k has direction angle thetas[k] and offset ps[k]; t is measured
    from its entry point as in :class:`Geodesic`.
    """
    thetas, ps = np.broadcast_arrays(np.asarray(thetas, float), np.asarray(ps, float))
    d = np.stack([np.cos(thetas), np.sin(thetas)])
    n = np.stack([-np.sin(thetas), np.cos(thetas)])
    half = np.sqrt(1.0 - ps**2)
    t = nodes @ d + half[None, :]
    y = nodes @ n - ps[None, :]
    proto = GaussianBeam(Geodesic(0.0, 0.0, 2.0), sp, TransversalManifold())
    return proto._exact(t, y)


def build_quasimode(M0: TransversalManifold, gamma: Geodesic, sp: SpectralParameter, order: str = "exact", delta: float | None = None) -> GaussianBeam:
    if order not in ("exact", "riccati"):
        raise ValueError(f"unknown beam order {order!r}")
    if order == "exact" and not (M0.is_flat and gamma.is_chord):
        order = "riccati"  # the closed-form beam only exists on the flat disk
    if delta is None:
        delta = 0.25 if order == "riccati" else 0.0
    if order == "exact":
        return GaussianBeam(gamma, sp, M0, order, delta)
    if M0.is_flat:
        return GaussianBeam(gamma, sp, M0, order, delta)
    curv = lambda t: float(M0.gauss_curvature(np.linalg.norm(gamma(t))))
    t, H, a = integrate_riccati(curv, gamma.length)
    if np.min(H.imag) < IM_MIN:
        raise BeamDegenerate(f"Im H drops to {np.min(H.imag):.2e} along the geodesic")
    return GaussianBeam(gamma, sp, M0, order, delta, H=H, a=a, t_grid=t)


# ---------------------------------------------------------------------------
# quadrature on a fine disk mesh

# 7-point degree-5 rule on the reference triangle
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


@lru_cache(maxsize=8)
def quadrature_disk(rings: int = 60) -> tuple[np.ndarray, np.ndarray, float]:
    """Points and weights of a degree-5 rule on a fine disk triangulation;
    returns also the mesh spacing."""
    d = triangulate_disk(rings)
    p = d.nodes[d.triangles]
    pts = np.einsum("qk,tkd->tqd", _BARY, p).reshape(-1, 2)
    w = (d.areas[:, None] * _W[None, :]).ravel()
    return pts, w, d.spacing


def _check_resolution(spacing: float, h: float) -> None:
    if spacing > 2 * np.pi * h / NODES_PER_WAVELENGTH:
        raise UnderResolved(f"spacing {spacing:.3g} gives < {NODES_PER_WAVELENGTH} nodes per wavelength 2 pi h = {2 * np.pi * h:.3g}")


def beam_norm(beam: GaussianBeam, rings: int = 60) -> float:
    pts, w, _ = quadrature_disk(rings)
    c = beam.transversal.c0(np.linalg.norm(pts, axis=1))
    return float(np.sqrt(np.sum(w * c * np.abs(beam(pts)) ** 2)))


def residual_norm(beam: GaussianBeam, rings: int = 60) -> float:
    """||(-Delta_{g0} - s^2) v_s||_{L^2(M0)}."""
    pts, w, spacing = quadrature_disk(rings)
    _check_resolution(spacing, beam.sp.h)
    if beam.geodesic.is_chord and beam.transversal.is_flat:
        r = beam.residual_values(pts)
        return float(np.sqrt(np.sum(w * np.abs(r) ** 2)))
    return _fem_residual(beam, rings)


def _fem_residual(beam: GaussianBeam, rings: int) -> float:
    d = triangulate_disk(rings, beam.transversal)
    _check_resolution(d.spacing, beam.sp.h)
    v = beam.sample(d)
    r = (d.stiffness @ v) / d.weights - beam.s**2 * v
    I = d.interior
    return float(np.sqrt(np.sum(d.weights[I] * np.abs(r[I]) ** 2)))


def concentration_integral(beam: GaussianBeam, psi: Callable | Sequence[Callable], rings: int = 60) -> complex | np.ndarray:
    """int_{M0} |v_s|^2 psi dV_{g0}.  A sequence of psi shares one beam
    evaluation and gives an array."""
    pts, w, _ = quadrature_disk(rings)
    c = beam.transversal.c0(np.linalg.norm(pts, axis=1))
    dens = w * c * np.abs(beam(pts)) ** 2
    if callable(psi):
        return complex(np.sum(dens * psi(pts[:, 0], pts[:, 1])))
    return np.array([np.sum(dens * f(pts[:, 0], pts[:, 1])) for f in psi], dtype=complex)


def concentration_target(gamma: Geodesic, lam: float, psi: Callable, n: int = 64) -> complex:
    """int_0^L exp(-2 lambda t) psi(gamma(t)) dt by Gauss-Legendre."""
    x, wq = np.polynomial.legendre.leggauss(n)
    t = 0.5 * gamma.length * (x + 1)
    p = gamma(t)
    return complex(0.5 * gamma.length * np.sum(wq * np.exp(-2 * lam * t) * psi(p[:, 0], p[:, 1])))


def write_diagnostics(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0].keys()) if rows else ["h", "lam", "geodesic", "residual", "norm"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return path
