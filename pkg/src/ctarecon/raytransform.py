"""Ray transforms on the flat unit disk.

Chord (theta, p): gamma(t) = p n + (t - L/2) d with d = (cos theta, sin theta),
n = (-sin theta, cos theta), L = 2 sqrt(1 - p^2).  Angles theta lie in [0, pi);
the chord starts (t = 0) at p n - (L/2) d.

Attenuated data D(lam) = int_0^L exp(-2 lam t) f(gamma(t)) dt.  With mu = -2 lam
the exponential Radon transform T_mu f(theta, p) = int f(p n + tau d) e^{mu tau} dtau
equals exp(lam L) D(lam).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import LinearNDInterpolator

from .errors import AttenuationTooStrong, GridTooCoarse, TaylorUnstable
from .geometry import ANGLE_TOL, DiskMesh

SAMPLES_PER_UNIT = 200
_GL4 = np.polynomial.legendre.leggauss(4)


@dataclass
class RaySampleGrid:
    thetas: np.ndarray
    ps: np.ndarray
    values: np.ndarray | None = None  # (n_theta, n_p)
    lam: float = 0.0

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=float)
        self.ps = np.asarray(self.ps, dtype=float)
        if np.any(np.abs(self.ps) > 1 - ANGLE_TOL):
            raise ValueError("chord offsets must satisfy |p| <= 1 - angle_tol")

    @classmethod
    def uniform(cls, n_theta: int = 60, n_p: int = 60) -> "RaySampleGrid":
        thetas = np.pi * np.arange(n_theta) / n_theta
        ps = -1 + (np.arange(n_p) + 0.5) * 2.0 / n_p
        return cls(thetas, ps)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.thetas), len(self.ps)

    @property
    def lengths(self) -> np.ndarray:
        return 2 * np.sqrt(1 - self.ps**2)

    def with_values(self, values: np.ndarray, lam: float = 0.0) -> "RaySampleGrid":
        return RaySampleGrid(self.thetas, self.ps, np.asarray(values), lam)

    def write_csv(self, path: str | Path, mode: str = "w") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        new = mode == "w" or not path.exists()
        with path.open(mode, newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["theta", "p", "lambda", "re", "im"])
            for i, th in enumerate(self.thetas):
                for j, p in enumerate(self.ps):
                    v = complex(self.values[i, j])
                    w.writerow([repr(th), repr(p), repr(self.lam), repr(v.real), repr(v.imag)])
        return path


def as_function(f, disk: DiskMesh | None = None) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Accept a callable f(x, y) or nodal values on ``disk`` (piecewise linear)."""
    if callable(f):
        return f
    if disk is None:
        raise ValueError("nodal values need the disk mesh")
    interp = LinearNDInterpolator(disk.nodes, np.asarray(f), fill_value=0.0)
    return lambda x, y: interp(np.column_stack([np.ravel(x), np.ravel(y)])).reshape(np.shape(x))


def _chord_nodes(theta: float, p: float):
    """Composite 4-point Gauss nodes, SAMPLES_PER_UNIT per unit length."""
    L = 2 * np.sqrt(1 - p * p)
    panels = max(2, int(np.ceil(SAMPLES_PER_UNIT * L / 4)))
    edges = np.linspace(0.0, L, panels + 1)
    xg, wg = _GL4
    mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
    t = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
    w = (half[:, None] * wg[None, :]).ravel()
    d = np.array([np.cos(theta), np.sin(theta)])
    n = np.array([-np.sin(theta), np.cos(theta)])
    pts = p * n + (t[:, None] - L / 2) * d
    return t, w, pts


def _grid_nodes(grid: RaySampleGrid):
    """Quadrature nodes of every chord of the grid, flattened; ``owner`` maps
    each node to its chord (row-major over (theta, p))."""
    ts, ws, pts, owner, lens = [], [], [], [], []
    for i, th in enumerate(grid.thetas):
        for j, p in enumerate(grid.ps):
            t, w, x = _chord_nodes(th, p)
            ts.append(t)
            ws.append(w)
            pts.append(x)
            owner.append(np.full(len(t), i * len(grid.ps) + j))
            lens.append(np.full(len(t), 2 * np.sqrt(1 - p * p)))
    return np.concatenate(ts), np.concatenate(ws), np.vstack(pts), np.concatenate(owner), np.concatenate(lens)


def weighted_ray(f, grid: RaySampleGrid, weight: Callable[[np.ndarray, float], np.ndarray], disk: DiskMesh | None = None) -> np.ndarray:
    """int_0^L weight(t, L) f(gamma(t)) dt for every chord of the grid."""
    fn = as_function(f, disk)
    t, w, pts, owner, lens = _grid_nodes(grid)
    vals = w * weight(t, lens) * fn(pts[:, 0], pts[:, 1])
    n = len(grid.thetas) * len(grid.ps)
    out = np.bincount(owner, weights=vals.real, minlength=n) + 1j * np.bincount(owner, weights=np.imag(vals), minlength=n)
    return out.reshape(grid.shape)


def forward_ray(f, grid: RaySampleGrid, disk: DiskMesh | None = None) -> RaySampleGrid:
    vals = weighted_ray(f, grid, lambda t, L: np.ones_like(t), disk)
    return grid.with_values(vals, 0.0)


def forward_attenuated(f, lam: float, grid: RaySampleGrid, disk: DiskMesh | None = None) -> RaySampleGrid:
    vals = weighted_ray(f, grid, lambda t, L: np.exp(-2 * lam * t), disk)
    return grid.with_values(vals, lam)


def reverse_orientation(D_lam: np.ndarray, D_minus_lam: np.ndarray, lam: float, lengths: np.ndarray) -> np.ndarray:
    """Data of the reversed chords from the data at +lam and -lam (real q):
    D_rev(lam) = exp(-2 lam L) conj(D(-lam))."""
    return np.exp(-2 * lam * lengths)[None, :] * np.conj(D_minus_lam)


# ---------------------------------------------------------------------------
# filtered backprojection


def _check_grid(grid: RaySampleGrid) -> None:
    nt, npp = grid.shape
    if npp < 16 or 2 * nt < npp:
        raise GridTooCoarse(f"grid {nt} x {npp} is under-sampled (need n_p >= 16 and n_theta >= n_p / 2)")


def _filter_rows(rows: np.ndarray, dp: float, mu: float = 0.0, taper: float = 0.8, pad: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Apply k_mu (|nu| for |nu| >= |mu|, cosine-tapered ramp) along p.
    Returns filtered rows on the padded p-grid and its length. Heavy zero
    padding keeps the frequency step well below |mu| so the cut is sharp."""
    n = rows.shape[-1]
    npad = int(2 ** np.ceil(np.log2(pad * n)))
    nu = 2 * np.pi * np.fft.fftfreq(npad, d=dp)
    nyq = np.pi / dp
    win = np.ones_like(nu)
    a = np.abs(nu) / nyq
    band = a > taper
    win[band] = np.cos(0.5 * np.pi * (a[band] - taper) / (1 - taper)) ** 2
    k = np.abs(nu) * win * (np.abs(nu) >= abs(mu))
    padded = np.zeros(rows.shape[:-1] + (npad,), dtype=complex)
    padded[..., :n] = rows
    # (1/2pi) int k(nu) g^(nu) e^{i nu p} d nu with g^ = dp * DFT reduces to ifft(k * fft)
    out = np.fft.ifft(np.fft.fft(padded, axis=-1) * k, axis=-1)
    return out, npad


def _backproject(filtered: np.ndarray, npad: int, thetas: np.ndarray, p0: float, dp: float, pts: np.ndarray, weights_fn=None) -> np.ndarray:
    out = np.zeros(len(pts), dtype=complex)
    for i, th in enumerate(thetas):
        n = np.array([-np.sin(th), np.cos(th)])
        s = pts @ n
        idx = (s - p0) / dp
        i0 = np.floor(idx).astype(int)
        fr = idx - i0
        row = filtered[i]
        a = row[np.mod(i0, npad)]
        b = row[np.mod(i0 + 1, npad)]
        val = (1 - fr) * a + fr * b
        if weights_fn is not None:
            val = val * weights_fn(th, pts)
        out += val
    return out


def invert_ray(samples: RaySampleGrid, points: np.ndarray) -> np.ndarray:
    """Parallel-beam FBP: f(x) = (1/2pi) int_0^pi q_theta(x . n) d theta."""
    _check_grid(samples)
    ps = samples.ps
    dp = ps[1] - ps[0]
    filt, npad = _filter_rows(np.asarray(samples.values, dtype=complex), dp)
    dtheta = np.pi / len(samples.thetas)
    bp = _backproject(filt, npad, samples.thetas, ps[0], dp, np.asarray(points))
    out = bp * dtheta / (2 * np.pi)
    return out if np.iscomplexobj(samples.values) else out.real


def invert_attenuated_const(D: RaySampleGrid, D_minus: RaySampleGrid, lam: float, points: np.ndarray, lam_max: float = 2.0) -> np.ndarray:
    """Invert D(lam) for a slice f_lam with conj(f_lam) = f_{-lam}.

    Builds T_mu f on the full circle of directions from the data at +lam and
    -lam and applies the constant-attenuation (Tretiak-Metz) formula
        f(x) = (1/4pi) int_0^{2pi} e^{-mu x.d} (k_mu * T_mu f(theta, .))(x . n) d theta
    with k_mu^(nu) = |nu| 1{|nu| >= |mu|}, mu = -2 lam.
    """
    _check_grid(D)
    mu = -2.0 * lam
    ps = D.ps
    dp = ps[1] - ps[0]
    if abs(lam) > lam_max or abs(mu) > 0.25 * np.pi / dp:
        raise AttenuationTooStrong(f"|lambda|={abs(lam)} too large for the filter on this grid")
    L = D.lengths
    T_fwd = np.exp(lam * L)[None, :] * D.values
    # reversed chords (theta + pi, -p): T = exp(lam L) D_rev
    D_rev = reverse_orientation(D.values, D_minus.values, lam, L)
    T_rev = (np.exp(lam * L)[None, :] * D_rev)[:, ::-1]  # index by -p
    thetas = np.concatenate([D.thetas, D.thetas + np.pi])
    rows = np.vstack([T_fwd, T_rev])
    filt, npad = _filter_rows(rows, dp, mu)
    dtheta = np.pi / len(D.thetas)
    wfn = lambda th, pts: np.exp(-mu * (pts @ np.array([np.cos(th), np.sin(th)])))
    bp = _backproject(filt, npad, thetas, ps[0], dp, np.asarray(points), wfn)
    return bp * dtheta / (4 * np.pi)


# ---------------------------------------------------------------------------
# Taylor route


def fornberg_weights(x0: float, nodes: np.ndarray, m: int) -> np.ndarray:
    """Finite-difference weights for derivatives 0..m at x0 (Fornberg)."""
    nodes = np.asarray(nodes, dtype=float)
    n = len(nodes)
    c = np.zeros((n, m + 1))
    c1, c4 = 1.0, nodes[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2, c5, c4 = 1.0, c4, nodes[i] - x0
        for j in range(i):
            c3 = nodes[i] - nodes[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c


@dataclass
class TaylorResult:
    slices: list  # nodal derivative slices d^k q^(0, .)
    amplification: list
    truncated_at: int | None = None


def taylor_recovery(
    D_by_lam: dict[float, np.ndarray],
    grid: RaySampleGrid,
    K_T: int,
    disk: DiskMesh,
    points: np.ndarray | None = None,
    stencil: int = 9,
    max_amplification: float = 1e6,
) -> TaylorResult:
    """Recover d^k_lam q^(0, .) for k = 0..K_T from D on a symmetric lam-grid."""
    if K_T > 4:
        raise ValueError("Taylor route is capped at K_T = 4")
    lams = np.array(sorted(D_by_lam))
    order = np.argsort(np.abs(lams))[:stencil]
    nodes = lams[order]
    W = fornberg_weights(0.0, nodes, K_T)
    points = disk.nodes if points is None else points
    slices: list[np.ndarray] = []
    amps = []
    result = TaylorResult(slices, amps)
    for k in range(K_T + 1):
        amp = float(np.sum(np.abs(W[:, k])))
        amps.append(amp)
        if amp > max_amplification:
            result.truncated_at = k
            raise TaylorUnstable(k, amp)
        dD = sum(W[i, k] * D_by_lam[float(nodes[i])] for i in range(len(nodes)))
        acc = np.array(dD, dtype=complex)
        for j in range(k):
            wj = lambda t, L, e=k - j: (-2.0 * t) ** e
            acc = acc - comb(k, j) * 2**j * weighted_ray(slices[j], grid, wj, disk)
        rec = invert_ray(grid.with_values(acc / 2**k), points)
        slices.append(np.asarray(rec, dtype=complex))
    return result


def write_slice_csv(path: str | Path, points: np.ndarray, values: np.ndarray, lam: float) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "lambda", "re", "im"])
        for (x, y), v in zip(points, values):
            v = complex(v)
            w.writerow([repr(x), repr(y), repr(lam), repr(v.real), repr(v.imag)])
    return path
