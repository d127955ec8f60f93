"""Complex geometric optics solutions built from a beam and the Green operators.

u0 = e^{-s x1}(v + r0~),  r0~ = e^{i lam x1} G_phi r0
u2 = e^{ s x1}(v + r2~),  r2~ = e^{-i lam x1} G_{-phi} r2
u1 = u0 + e^{-x1/h} G_phi r1,  (I + h^2 q G_phi) r1 = -h^2 e^{x1/h} q u0
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .carleman import CarlemanWeight, GreenOperator, assemble_conjugated
from .errors import ContractionFailure
from .forward import Potential, system_matrix
from .geometry import Mesh
from .quasimodes import GaussianBeam


def l2(mesh: Mesh, u: np.ndarray) -> float:
    return float(np.sqrt(np.sum(mesh.weights * np.abs(u) ** 2)))


def beam_field(mesh: Mesh, beam: GaussianBeam) -> np.ndarray:
    """The x1-independent beam on all nodes of the product mesh."""
    return np.tile(beam.sample(mesh.disk), mesh.n1)


@dataclass
class CGOField:
    u: np.ndarray
    remainder: np.ndarray  # r~ (tilde remainder)
    rhs: np.ndarray  # raw right-hand side r
    harmonic_residual: float


@dataclass
class CGOPair:
    h: float
    lam: float
    u0: CGOField
    u2: CGOField
    u1: CGOField | None = None
    norms: dict = field(default_factory=dict)


def _conjugated_rhs(mesh: Mesh, weight: CarlemanWeight, w: np.ndarray) -> np.ndarray:
    """-P_weight w on interior rows, zero on boundary rows."""
    P = assemble_conjugated(mesh, weight)
    r = np.zeros(mesh.n, dtype=complex)
    r[mesh.interior] = -(P.full @ w)[mesh.interior]
    return r


def _harmonic_residual(mesh: Mesh, weight: CarlemanWeight, conj_u: np.ndarray, scale: float) -> float:
    P = assemble_conjugated(mesh, weight)
    res = (P.full @ conj_u)[mesh.interior]
    return float(np.sqrt(np.sum(mesh.weights[mesh.interior] * np.abs(res) ** 2)) / max(scale, 1e-300))


def build_u0(beam: GaussianBeam, G: GreenOperator, mesh: Mesh | None = None, v: np.ndarray | None = None) -> CGOField:
    mesh = mesh or G.mesh
    h, lam, s = beam.sp.h, beam.sp.lam, beam.s
    if G.weight.sign != 1 or abs(G.weight.h - h) > 1e-14:
        raise ValueError("build_u0 needs G_phi for +phi at the beam's h")
    x1 = mesh.nodes[:, 0]
    v = beam_field(mesh, beam) if v is None else v
    w = np.exp(-1j * lam * x1) * v
    r0 = _conjugated_rhs(mesh, G.weight, w)
    rt0 = np.exp(1j * lam * x1) * (G.matrix @ r0)
    u0 = np.exp(-s * x1) * (v + rt0)
    # e^{x1/h} u0 = e^{-i lam x1}(v + r0~) should be P_phi-harmonic
    conj_u = np.exp(-1j * lam * x1) * (v + rt0)
    res = _harmonic_residual(mesh, G.weight, conj_u, l2(mesh, r0))
    return CGOField(u0, rt0, r0, res)


def build_u2(beam: GaussianBeam, G: GreenOperator, mesh: Mesh | None = None, v: np.ndarray | None = None) -> CGOField:
    """``G`` is G_phi (its flipped partner G_{-phi} is used) or G_{-phi}."""
    mesh = mesh or G.mesh
    Gm = G.minus if G.weight.sign == 1 else G
    h, lam, s = beam.sp.h, beam.sp.lam, beam.s
    x1 = mesh.nodes[:, 0]
    v = beam_field(mesh, beam) if v is None else v
    w = np.exp(1j * lam * x1) * v
    r2 = _conjugated_rhs(mesh, Gm.weight, w)
    rt2 = np.exp(-1j * lam * x1) * (Gm.matrix @ r2)
    u2 = np.exp(s * x1) * (v + rt2)
    conj_u = np.exp(1j * lam * x1) * (v + rt2)
    res = _harmonic_residual(mesh, Gm.weight, conj_u, l2(mesh, r2))
    return CGOField(u2, rt2, r2, res)


def build_u1_oracle(u0: CGOField, q: Potential, G: GreenOperator, lam: float, method: str = "direct") -> CGOField:
    """Solve (I + h^2 q G_phi) r1 = -h^2 e^{x1/h} q u0 and form u1."""
    mesh = G.mesh
    h = G.weight.h
    x1 = mesh.nodes[:, 0]
    E = G.weight.factor(x1)
    qv = q.values
    rhs = -h * h * E * qv * u0.u
    A = h * h * qv[:, None] * G.matrix
    if method == "neumann":
        sw = np.sqrt(mesh.weights)
        nrm = np.linalg.norm((A * sw[:, None]) / sw[None, :], 2)
        if nrm >= 1:
            raise ContractionFailure(f"||h^2 q G|| = {nrm:.3f} >= 1 at h={h}")
        r1 = rhs.copy()
        term = rhs.copy()
        for _ in range(500):
            term = -(A @ term)
            r1 = r1 + term
            if l2(mesh, term) <= 1e-15 * l2(mesh, r1):
                break
    elif method == "direct":
        M = np.eye(mesh.n) + A
        r1 = np.linalg.solve(M, rhs)
    else:
        raise ValueError(method)
    Gr1 = G.matrix @ r1
    u1 = u0.u + Gr1 / E
    rt1 = np.exp(1j * lam * x1) * Gr1
    Aq = system_matrix(mesh, q)
    res = float(np.linalg.norm((Aq @ u1)[mesh.interior]) / max(np.linalg.norm(Aq @ np.abs(u1)), 1e-300))
    return CGOField(u1, rt1, r1, res)


def u1_identity_residual(u1: CGOField, u0: CGOField, q: Potential, G: GreenOperator) -> float:
    """||(I + h^2 e^{-x1/h} G q e^{x1/h}) u1 - u0|| / ||u0||."""
    mesh = G.mesh
    h = G.weight.h
    E = G.weight.factor(mesh.nodes[:, 0])
    lhs = u1.u + h * h * (G.matrix @ (q.values * E * u1.u)) / E
    return l2(mesh, lhs - u0.u) / l2(mesh, u0.u)


def build_pair(beam: GaussianBeam, G: GreenOperator, q: Potential | None = None) -> CGOPair:
    mesh = G.mesh
    v = beam_field(mesh, beam)
    u0 = build_u0(beam, G, mesh, v)
    u2 = build_u2(beam, G, mesh, v)
    pair = CGOPair(beam.sp.h, beam.sp.lam, u0, u2)
    pair.norms = {"r0": l2(mesh, u0.remainder), "r2": l2(mesh, u2.remainder), "v": l2(mesh, v)}
    if q is not None:
        pair.u1 = build_u1_oracle(u0, q, G, beam.sp.lam)
        pair.norms["r1"] = l2(mesh, pair.u1.remainder)
    return pair


def write_diagnostics(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0].keys()) if rows else ["h", "lam", "geodesic", "r0", "r1", "r2"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return path
