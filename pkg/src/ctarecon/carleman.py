"""Conjugated operator P_phi = e^{phi/h}(-h^2 Delta)e^{-phi/h} with phi = x1,
its Green operator G_phi = H_phi + pi_phi H*_{-phi} and the single layer S_phi.

Spaces: nodal vectors on all nodes carry the lumped volume weights W; the
equation space consists of interior nodes with weights W_I.  Adjoints are
taken in these weighted inner products, A* = W_dom^{-1} A^T W_cod.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import KernelAmbiguous, WeightOverflow
from .geometry import Mesh

H_GRID = (0.3, 0.2, 0.15, 0.1, 0.07, 0.05)
KERNEL_TOL = 1e-8
KERNEL_GAP = 10.0
MAX_EXPONENT = 40.0


@dataclass(frozen=True)
class CarlemanWeight:
    h: float
    sign: int = 1
    h_range: tuple[float, float] = (0.05, 0.5)

    def __post_init__(self):
        lo, hi = self.h_range
        if not (lo - 1e-12 <= self.h <= hi + 1e-12):
            raise ValueError(f"h={self.h} outside the configured range [{lo}, {hi}]")
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")

    def flipped(self) -> "CarlemanWeight":
        return CarlemanWeight(self.h, -self.sign, self.h_range)

    def exponent(self, x1) -> np.ndarray:
        return self.sign * np.asarray(x1, dtype=float) / self.h

    def factor(self, x1) -> np.ndarray:
        """e^{sign * x1 / h}."""
        e = self.exponent(x1)
        if np.max(np.abs(e)) > MAX_EXPONENT:
            raise WeightOverflow(f"|phi/h| reaches {np.max(np.abs(e)):.1f} > {MAX_EXPONENT}")
        return np.exp(e)

    @staticmethod
    def symbol(xi: np.ndarray) -> complex:
        """p_phi(xi) = |xi|^2 - 1 + 2 i xi_1 for phi = x1."""
        xi = np.asarray(xi, dtype=float)
        return complex(xi @ xi - 1.0, 2.0 * xi[0])


def _weighted_adjoint(A: np.ndarray, w_dom: np.ndarray, w_cod: np.ndarray) -> np.ndarray:
    """Adjoint of A: (dom, w_dom) -> (cod, w_cod)."""
    return (A.T * w_cod[None, :]) / w_dom[:, None]


# ---------------------------------------------------------------------------


@dataclass
class ConjugatedOperator:
    mesh: Mesh
    weight: CarlemanWeight
    full: sp.csr_matrix  # all rows: h^2 W^{-1} E K E^{-1}

    @property
    def matrix(self) -> sp.csr_matrix:
        """Interior equation rows x all-node columns."""
        return self.full[self.mesh.interior]

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u

    def apply_full(self, u: np.ndarray) -> np.ndarray:
        return self.full @ u


def assemble_conjugated(mesh: Mesh, weight: CarlemanWeight) -> ConjugatedOperator:
    E = weight.factor(mesh.nodes[:, 0])
    full = sp.diags(weight.h**2 * E / mesh.weights) @ mesh.stiffness @ sp.diags(1.0 / E)
    return ConjugatedOperator(mesh, weight, full.tocsr())


def discrete_laplacian(mesh: Mesh) -> sp.csr_matrix:
    """-Delta in strong nodal form W^{-1} K."""
    return (sp.diags(1.0 / mesh.weights) @ mesh.stiffness).tocsr()


# ---------------------------------------------------------------------------


@dataclass
class _Pinv:
    H: np.ndarray  # all -> all (boundary inputs ignored)
    pi: np.ndarray  # kernel projection on all nodes
    sigma: np.ndarray  # singular values of the weighted P, descending
    kernel_dim: int


def _pinv(P: ConjugatedOperator, tol: float, gap: float) -> _Pinv:
    m = P.mesh
    I = m.interior
    w, wI = m.weights, m.weights[I]
    Pt = (sp.diags(np.sqrt(wI)) @ P.matrix @ sp.diags(1.0 / np.sqrt(w))).toarray()
    gram = Pt @ Pt.T
    lam, V = np.linalg.eigh(gram)
    lam, V = lam[::-1].copy(), np.ascontiguousarray(V[:, ::-1])
    sigma = np.sqrt(np.clip(lam, 0.0, None))
    cut = tol * sigma[0]
    kept = sigma > cut
    r = int(kept.sum())
    if r < len(sigma):
        if sigma[r - 1] < gap * max(sigma[r], 1e-300):
            raise KernelAmbiguous("no spectral gap at the kernel cutoff", sigma)
    elif sigma[-1] < gap * cut:
        raise KernelAmbiguous("smallest singular value sits just above the kernel cutoff", sigma)
    Vk = np.ascontiguousarray(V[:, :r])
    # pseudo-inverse through the Gram matrix: P^+ = P^T V S^{-2} V^T
    C = Pt.T @ (Vk / lam[:r])
    Ptp = C @ Vk.T  # (n, n_int)
    H = np.zeros((m.n, m.n))
    H[:, I] = (Ptp * np.sqrt(wI)[None, :]) / np.sqrt(w)[:, None]
    rowproj = (Pt.T @ Vk) @ (C.T)  # P^+ P on the weighted space
    rowproj = 0.5 * (rowproj + rowproj.T)
    sw = np.sqrt(w)
    pi = np.eye(m.n) - (rowproj * sw[None, :]) / sw[:, None]
    return _Pinv(H=H, pi=pi, sigma=sigma, kernel_dim=m.n - r)


@dataclass
class GreenOperator:
    """G_phi together with the ingredients of its construction.  The data of
    the flipped weight (H_{-phi}, pi_{-phi}) is kept so that G_{-phi} and
    T_{+-phi} are available without a second build."""

    mesh: Mesh
    weight: CarlemanWeight
    H: np.ndarray
    pi: np.ndarray
    H_minus: np.ndarray
    pi_minus: np.ndarray
    sigma: np.ndarray
    kernel_dim: int

    @cached_property
    def matrix(self) -> np.ndarray:
        w = self.mesh.weights
        return self.H + self.pi @ _weighted_adjoint(self.H_minus, w, w)

    @cached_property
    def minus(self) -> "GreenOperator":
        return GreenOperator(self.mesh, self.weight.flipped(), self.H_minus, self.pi_minus, self.H, self.pi, self.sigma, self.kernel_dim)

    @cached_property
    def T(self) -> np.ndarray:
        """T_phi = H_phi (1 - pi_{-phi})."""
        return self.H - self.H @ self.pi_minus

    def adjoint(self, A: np.ndarray | None = None) -> np.ndarray:
        w = self.mesh.weights
        return _weighted_adjoint(self.matrix if A is None else A, w, w)

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ f

    @cached_property
    def norm(self) -> float:
        """Operator norm on L^2(M, W)."""
        sw = np.sqrt(self.mesh.weights)
        A = (self.matrix * sw[:, None]) / sw[None, :]
        return float(spla.svds(A, k=1, return_singular_vectors=False, tol=1e-6)[0])


def build_green(P: ConjugatedOperator, weight: CarlemanWeight | None = None, kernel_tol: float = KERNEL_TOL, gap: float = KERNEL_GAP) -> GreenOperator:
    weight = weight or P.weight
    plus = _pinv(P, kernel_tol, gap)
    minus = _pinv(assemble_conjugated(P.mesh, weight.flipped()), kernel_tol, gap)
    return GreenOperator(P.mesh, weight, plus.H, plus.pi, minus.H, minus.pi, plus.sigma, plus.kernel_dim)


def green_for(mesh: Mesh, h: float, sign: int = 1) -> GreenOperator:
    w = CarlemanWeight(h, sign)
    return build_green(assemble_conjugated(mesh, w), w)


# ---------------------------------------------------------------------------
# property checks


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_green(G: GreenOperator, n_random: int = 20, seed: int = 0) -> dict:
    """Relative residuals of the Green-operator identities."""
    m = G.mesh
    rng = np.random.default_rng(seed)
    I = m.interior
    w = m.weights
    Pp = assemble_conjugated(m, G.weight)
    Pm = assemble_conjugated(m, G.weight.flipped())
    V = rng.standard_normal((m.n, n_random))
    GV = G.matrix @ V
    res_i = _rel(Pp.matrix @ GV, V[I])
    res_iv = _rel(G.adjoint(), G.minus.matrix)
    U = np.zeros((m.n, n_random))
    U[I] = rng.standard_normal((len(I), n_random))
    res_v = _rel(G.matrix @ (Pp.full @ U), U)
    pi = G.pi
    idem = _rel(pi @ pi, pi)
    selfadj = _rel(_weighted_adjoint(pi, w, w), pi)
    kern = float(np.linalg.norm(Pp.matrix @ (pi @ V)) / np.linalg.norm(V))
    res_T = _rel(_weighted_adjoint(G.T, w, w), G.minus.T)
    # adjoint relation of the conjugated operators on interior-supported fields
    U2 = np.zeros((m.n, n_random))
    U2[I] = rng.standard_normal((len(I), n_random))
    lhs = (Pp.full @ U).T @ (w[:, None] * U2)
    rhs = U.T @ (w[:, None] * (Pm.full @ U2))
    res_adj = _rel(lhs, rhs)
    return {
        "h": G.weight.h,
        "right_inverse": res_i,
        "adjoint_symmetry": res_iv,
        "left_inverse_on_compact": res_v,
        "pi_idempotent": idem,
        "pi_selfadjoint": selfadj,
        "pi_into_kernel": kern,
        "T_adjoint": res_T,
        "P_adjoint": res_adj,
        "kernel_dim": G.kernel_dim,
        "sigma_min": float(G.sigma[G.sigma > 0].min()),
        "sigma_max": float(G.sigma[0]),
    }


def compact_nodes(mesh: Mesh) -> np.ndarray:
    """Interior nodes not adjacent to the boundary.

    Fields supported there vanish together with their discrete normal
    derivative, the discrete counterpart of C_0^infty(M^int).  Fields that
    merely vanish on the boundary admit pseudomodes such as
    x1 exp(-x1/h) psi(x') with ||P_phi u|| = O(h^2) ||u||.
    """
    touch = np.asarray(abs(mesh.stiffness)[:, mesh.boundary].sum(axis=1)).ravel() > 0
    keep = ~mesh.boundary_mask & ~touch
    return np.flatnonzero(keep)


def carleman_lower_bound(mesh: Mesh, h_grid: Sequence[float] = H_GRID, sign: int = 1) -> list[dict]:
    """inf ||P_phi u|| / ||u|| over compactly supported u (weighted norms)."""
    out = []
    I = mesh.interior
    J = compact_nodes(mesh)
    swI, swJ = np.sqrt(mesh.weights[I]), np.sqrt(mesh.weights[J])
    for h in h_grid:
        P = assemble_conjugated(mesh, CarlemanWeight(h, sign))
        A = (sp.diags(swI) @ P.matrix[:, J] @ sp.diags(1.0 / swJ)).toarray()
        s = float(np.linalg.svd(A, compute_uv=False)[-1])
        out.append({"h": h, "bound": s, "ratio": s / h})
    return out


# ---------------------------------------------------------------------------
# single layer


@dataclass
class SingleLayerOp:
    """S_phi = E_{-phi} gamma G_phi gamma* E_phi on boundary nodal functions.

    gamma is boundary sampling; gamma* = W^{-1} gamma^T B.
    """

    matrix: np.ndarray
    h: float
    gammaG: np.ndarray  # boundary rows of G_phi

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ f


def build_single_layer(G: GreenOperator, mesh: Mesh | None = None, weight: CarlemanWeight | None = None) -> SingleLayerOp:
    mesh = mesh or G.mesh
    weight = weight or G.weight
    b = mesh.boundary
    B = mesh.boundary_weights
    Eb = weight.factor(mesh.nodes[b, 0])
    gammaG = G.matrix[b]
    core = gammaG[:, b] * (B / mesh.weights[b])[None, :]
    S = (core * Eb[None, :]) / Eb[:, None]
    return SingleLayerOp(S, weight.h, gammaG)


def gamma_G_adjoint(G: GreenOperator, k: np.ndarray) -> np.ndarray:
    """(gamma G_phi)* k = W^{-1} G^T gamma^T B k."""
    m = G.mesh
    y = np.zeros((m.n,) + np.shape(k)[1:], dtype=np.result_type(k, float))
    Bk = k * (m.boundary_weights if np.ndim(k) == 1 else m.boundary_weights[:, None])
    y = G.matrix[m.boundary].T @ Bk
    return y / (m.weights if np.ndim(k) == 1 else m.weights[:, None])


def write_report(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, default=float))
    return path


def verification_report(mesh: Mesh, h_grid: Sequence[float] = H_GRID) -> dict:
    rows = []
    for h in h_grid:
        rows.append(check_green(green_for(mesh, h)))
    return {"green": rows, "carleman": carleman_lower_bound(mesh, h_grid)}
