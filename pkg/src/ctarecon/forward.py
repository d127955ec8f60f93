"""P1 (prism) finite-element solver for -Delta + q and the discrete DN map."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, EigenvalueProximity
from .geometry import Mesh

SPECTRUM_THRESHOLD = 1e-6
_MAGIC = b"CTADN1\n"


@dataclass(frozen=True)
class Potential:
    values: np.ndarray
    interior_supported: bool = False
    description: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ConfigError("potential has non-finite samples")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, mesh: Mesh, fn: Callable, interior_supported: bool = False, description: str = "") -> "Potential":
        X = mesh.nodes
        v = np.asarray(fn(X[:, 0], X[:, 1], X[:, 2]), dtype=float) * np.ones(mesh.n)
        if interior_supported:
            v = v.copy()
            v[mesh.boundary] = 0.0
        return cls(v, interior_supported, description)

    @classmethod
    def constant(cls, mesh: Mesh, c: float) -> "Potential":
        return cls(np.full(mesh.n, float(c)), False, f"constant {c!r}")

    @classmethod
    def zero(cls, mesh: Mesh) -> "Potential":
        return cls.constant(mesh, 0.0)

    def check(self, mesh: Mesh) -> None:
        if self.values.shape != (mesh.n,):
            raise ConfigError(f"potential has {self.values.size} samples, mesh has {mesh.n} nodes")
        if self.interior_supported and np.any(self.values[mesh.boundary] != 0):
            raise ConfigError("interior-supported potential is nonzero on the boundary")

    @cached_property
    def hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()[:16]


@dataclass
class FieldSolution:
    values: np.ndarray
    trace: np.ndarray
    residual: float

    def recompute_residual(self, mesh: Mesh, q: Potential) -> float:
        return _residual(mesh, q, self.values)


@dataclass
class DNMap:
    """Boundary matrix with <Lambda f, k> = f^T matrix k; ``B`` is the
    (diagonal) boundary mass so the function-valued map is B^{-1} matrix."""

    matrix: np.ndarray
    B: np.ndarray
    mesh_hash: str = ""
    q_hash: str = ""

    @property
    def n_b(self) -> int:
        return self.matrix.shape[0]

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Nodal function representing Lambda f (in the B-duality)."""
        return (self.matrix @ f) / (self.B if np.ndim(f) == 1 else self.B[:, None])

    def pair(self, f: np.ndarray, k: np.ndarray) -> complex:
        return f @ (self.matrix @ k)

    def symmetry_defect(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.T)) / np.max(np.abs(self.matrix)))

    # serialization ---------------------------------------------------------
    def header(self) -> dict:
        return {"mesh_hash": self.mesh_hash, "n_b": self.n_b, "q_hash": self.q_hash}

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        binp, csvp = stem.with_suffix(".bin"), stem.with_suffix(".csv")
        with binp.open("wb") as fh:
            fh.write(_MAGIC)
            fh.write((json.dumps(self.header()) + "\n").encode())
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.B, dtype="<f8").tobytes())
        hdr = ",".join(f"{k}={v}" for k, v in self.header().items())
        np.savetxt(csvp, self.matrix, delimiter=",", header=hdr, fmt="%.17g")
        return binp, csvp

    @classmethod
    def load(cls, path: str | Path) -> "DNMap":
        path = Path(path)
        if path.suffix == ".csv":
            with path.open() as fh:
                first = fh.readline().lstrip("# ").strip()
            hdr = dict(kv.split("=", 1) for kv in first.split(","))
            M = np.loadtxt(path, delimiter=",", ndmin=2)
            if M.shape != (int(hdr["n_b"]),) * 2:
                raise ConfigError("DN csv shape does not match its header")
            return cls(M, np.full(M.shape[0], np.nan), hdr["mesh_hash"], hdr["q_hash"])
        with path.open("rb") as fh:
            if fh.readline() != _MAGIC:
                raise ConfigError(f"{path} is not a DN map file")
            hdr = json.loads(fh.readline())
            n = int(hdr["n_b"])
            data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != n * n + n:
            raise ConfigError(f"{path}: truncated DN map payload")
        return cls(data[: n * n].reshape(n, n).copy(), data[n * n :].copy(), hdr["mesh_hash"], hdr["q_hash"])


# ---------------------------------------------------------------------------


def system_matrix(mesh: Mesh, q: Potential | np.ndarray | None) -> sp.csr_matrix:
    """K + diag(W q): the form <du, dv> + q u v with lumped potential term."""
    qv = np.zeros(mesh.n) if q is None else (q.values if isinstance(q, Potential) else np.asarray(q))
    return (mesh.stiffness + sp.diags(mesh.weights * qv)).tocsr()


def _blocks(mesh: Mesh, A: sp.csr_matrix):
    I, Bn = mesh.interior, mesh.boundary
    return A[I][:, I].tocsc(), A[I][:, Bn], A[Bn][:, I], A[Bn][:, Bn]


def _residual(mesh: Mesh, q: Potential, u: np.ndarray) -> float:
    A = system_matrix(mesh, q)
    r = (A @ u)[mesh.interior]
    scale = np.linalg.norm(A[mesh.interior] @ np.abs(u)) or 1.0
    return float(np.linalg.norm(r) / scale)


def check_spectrum(mesh: Mesh, q: Potential | None = None, k: int = 3) -> float:
    """min |mu| over the interior pencil (A_II, W_I): the distance from 0 to
    the discrete Dirichlet spectrum of -Delta + q."""
    A = system_matrix(mesh, q)
    I = mesh.interior
    AII = A[I][:, I].tocsc()
    M = sp.diags(mesh.weights[I]).tocsc()
    sigma = -0.0137  # off-grid shift, never an eigenvalue in practice
    try:
        vals = spla.eigsh(AII, k=k, M=M, sigma=sigma, which="LM", return_eigenvectors=False, tol=1e-12)
    except (RuntimeError, spla.ArpackNoConvergence):
        return 0.0
    return float(np.min(np.abs(vals)))


def first_dirichlet_eigenvalue(mesh: Mesh) -> float:
    I = mesh.interior
    AII = mesh.stiffness[I][:, I].tocsc()
    M = sp.diags(mesh.weights[I]).tocsc()
    vals = spla.eigsh(AII, k=1, M=M, sigma=0.0, which="LM", return_eigenvectors=False, tol=1e-12)
    return float(vals[0])


class DirichletSolver:
    """Factorised interior block for repeated Dirichlet solves."""

    def __init__(self, mesh: Mesh, q: Potential | None = None, check: bool = True):
        q = q or Potential.zero(mesh)
        q.check(mesh)
        self.mesh, self.q = mesh, q
        if check:
            margin = check_spectrum(mesh, q)
            if margin < SPECTRUM_THRESHOLD:
                raise EigenvalueProximity(margin, SPECTRUM_THRESHOLD)
            self.margin = margin
        A = system_matrix(mesh, q)
        self.AII, self.AIB, self.ABI, self.ABB = _blocks(mesh, A)
        self.lu = spla.splu(self.AII)

    def solve(self, f: np.ndarray) -> np.ndarray:
        """Nodal solution(s) for boundary data f of shape (n_b,) or (n_b, m)."""
        f = np.asarray(f)
        m = self.mesh
        shape = (m.n,) + f.shape[1:]
        u = np.zeros(shape, dtype=np.result_type(f, float))
        u[m.boundary] = f
        rhs = -(self.AIB @ f)
        if np.iscomplexobj(rhs):
            u[m.interior] = self.lu.solve(np.ascontiguousarray(rhs.real)) + 1j * self.lu.solve(np.ascontiguousarray(rhs.imag))
        else:
            u[m.interior] = self.lu.solve(np.ascontiguousarray(rhs))
        return u

    def schur(self) -> np.ndarray:
        X = self.lu.solve(self.AIB.toarray())
        S = self.ABB.toarray() - self.ABI @ X
        return 0.5 * (S + S.T)


def solve_dirichlet(mesh: Mesh, q: Potential, f: np.ndarray, check: bool = True) -> FieldSolution:
    solver = DirichletSolver(mesh, q, check=check)
    u = solver.solve(f)
    return FieldSolution(values=u, trace=u[mesh.boundary], residual=_residual(mesh, q, u))


def assemble_dn_map(mesh: Mesh, q: Potential, check: bool = True) -> DNMap:
    solver = DirichletSolver(mesh, q, check=check)
    return DNMap(solver.schur(), mesh.boundary_weights.copy(), mesh.hash, q.hash)


def pair_dn(La: DNMap, Lb: DNMap, f: np.ndarray, k: np.ndarray) -> complex:
    """<(La - Lb) f, k>, bilinear (no conjugation)."""
    if La.matrix.shape != Lb.matrix.shape:
        raise ValueError(f"DN maps of different sizes {La.matrix.shape} vs {Lb.matrix.shape}")
    if La.mesh_hash and Lb.mesh_hash and La.mesh_hash != Lb.mesh_hash:
        raise ValueError("DN maps were assembled on different meshes")
    return f @ ((La.matrix - Lb.matrix) @ k)


def volume_integral(mesh: Mesh, *fields: np.ndarray) -> complex:
    """Lumped quadrature of the product of nodal fields."""
    out = mesh.weights.astype(complex if any(np.iscomplexobj(f) for f in fields) else float)
    for f in fields:
        out = out * f
    return out.sum()
