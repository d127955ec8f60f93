"""Boundary integral equation (1 + h^2 S_phi (Lq - L0)) f = u0|_bdy."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .carleman import GreenOperator, SingleLayerOp
from .errors import EquationIllConditioned
from .forward import DNMap, DirichletSolver, Potential
from .geometry import Mesh

MARGIN_THRESHOLD = 0.1


def trace_operator(S: SingleLayerOp, Lq: DNMap, L0: DNMap, h: float) -> np.ndarray:
    """1 + h^2 S (Lq - L0), with the DN difference acting as a function map."""
    dL = (Lq.matrix - L0.matrix) / L0.B[:, None]
    return np.eye(dL.shape[0]) + h * h * (S.matrix @ dL)


def _margin(A: np.ndarray, E: np.ndarray) -> float:
    # boundary values of e^{x1/h} u1 are O(1); measuring in that frame keeps
    # the e^{+-x1/h} scaling of the raw operator out of the singular values
    return float(np.linalg.svd((A * E[:, None]) / E[None, :], compute_uv=False)[-1])


def invertibility_margin(S: SingleLayerOp, Lq: DNMap, L0: DNMap, h: float, x1_boundary: np.ndarray) -> float:
    """Smallest singular value of e^{x1/h} (1 + h^2 S (Lq - L0)) e^{-x1/h}."""
    A = trace_operator(S, Lq, L0, h)
    return _margin(A, np.exp(np.asarray(x1_boundary) / h))


@dataclass
class TraceSolution:
    f: np.ndarray
    margin: float
    residual: float


def solve_trace_equation(S: SingleLayerOp, Lq: DNMap, L0: DNMap, g0: np.ndarray, h: float, x1_boundary: np.ndarray, threshold: float = MARGIN_THRESHOLD) -> TraceSolution:
    A = trace_operator(S, Lq, L0, h)
    margin = _margin(A, np.exp(np.asarray(x1_boundary) / h))
    if margin < threshold:
        raise EquationIllConditioned(h, margin)
    f = np.linalg.solve(A, g0)
    res = float(np.linalg.norm(A @ f - g0) / max(np.linalg.norm(g0), 1e-300))
    return TraceSolution(f, margin, res)


def b_norm(mesh_or_B, f: np.ndarray) -> float:
    B = mesh_or_B.boundary_weights if isinstance(mesh_or_B, Mesh) else np.asarray(mesh_or_B)
    return float(np.sqrt(np.sum(B * np.abs(f) ** 2)))


def identity_residual(mesh: Mesh, q: Potential, G: GreenOperator, K: np.ndarray, Lq: DNMap | None = None, L0: DNMap | None = None) -> float:
    """Relative gap between S_phi (Lq - L0) k and gamma e^{-phi/h} G_phi e^{phi/h} q P_q k
    over the columns of K."""
    from .carleman import build_single_layer
    from .forward import assemble_dn_map

    Lq = Lq or assemble_dn_map(mesh, q, check=False)
    L0 = L0 or assemble_dn_map(mesh, Potential.zero(mesh), check=False)
    S = build_single_layer(G)
    lhs = S.matrix @ (((Lq.matrix - L0.matrix) / L0.B[:, None]) @ K)
    U = DirichletSolver(mesh, q, check=False).solve(K)
    E = G.weight.factor(mesh.nodes[:, 0])[:, None]
    rhs = ((G.matrix @ (E * q.values[:, None] * U)) / E)[mesh.boundary]
    return float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-300))


def verify_equivalence(mesh: Mesh, q: Potential, G: GreenOperator, k: np.ndarray) -> dict:
    """Equivalence of the boundary equation (1 + h^2 S (Lq - L0)) k = f and
    the volume equation (1 + h^2 e^{-phi/h} G e^{phi/h} q) P_q k = P_0 f.

    f is produced from k through the volume equation's trace, then both
    directions are checked:
      * boundary residual of k against f,
      * interior harmonic residual of the volume left side (it must equal P_0 f).
    """
    from .carleman import build_single_layer
    from .forward import assemble_dn_map

    h = G.weight.h
    E = G.weight.factor(mesh.nodes[:, 0])
    Pq = DirichletSolver(mesh, q, check=False)
    P0 = DirichletSolver(mesh, Potential.zero(mesh), check=False)
    uk = Pq.solve(k)
    lhs_vol = uk + h * h * (G.matrix @ (E * q.values * uk)) / E
    f = lhs_vol[mesh.boundary]
    # volume -> boundary: trace of the volume side solves the boundary equation
    S = build_single_layer(G)
    Lq = assemble_dn_map(mesh, q, check=False)
    L0 = assemble_dn_map(mesh, Potential.zero(mesh), check=False)
    A = trace_operator(S, Lq, L0, h)
    res_bdy = float(np.linalg.norm(A @ k - f) / np.linalg.norm(f))
    # boundary -> volume: the volume side equals the harmonic extension of f
    pf = P0.solve(f)
    res_vol = float(np.linalg.norm(lhs_vol - pf) / np.linalg.norm(pf))
    trace_gap = float(np.linalg.norm(lhs_vol[mesh.boundary] - A @ k) / np.linalg.norm(f))
    return {"h": h, "boundary_residual": res_bdy, "volume_residual": res_vol, "trace_consistency": trace_gap}


def write_report(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0].keys()) if rows else ["h", "lam", "geodesic", "margin", "residual", "oracle_gap"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return path
