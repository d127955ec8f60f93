import numpy as np
import pytest

from ctarecon.carleman import (
    H_GRID,
    CarlemanWeight,
    assemble_conjugated,
    build_single_layer,
    carleman_lower_bound,
    check_green,
    discrete_laplacian,
    gamma_G_adjoint,
    green_for,
)
from ctarecon.errors import WeightOverflow
from ctarecon.forward import DirichletSolver
from ctarecon.geometry import build_mesh
from ctarecon.traces import identity_residual

# smallest singular value / h on mesh (6, 8), frozen from the dense SVD
CARLEMAN_RATIOS = (12.28, 10.02, 9.91, 10.70, 13.1, 25.3)


@pytest.fixture(scope="module")
def greens(small_mesh):
    return {h: green_for(small_mesh, h) for h in (0.3, 0.2, 0.15, 0.1)}


def test_weight_range_and_overflow(small_mesh):
    with pytest.raises(ValueError):
        CarlemanWeight(0.01)
    with pytest.raises(WeightOverflow):
        CarlemanWeight(0.05).factor(np.array([2.5]))


def test_plane_wave_symbol_second_order(geometry):
    errs = []
    for res in ((4, 5), (8, 10)):
        m = build_mesh(geometry, res)
        X, h = m.nodes, 0.3
        P = assemble_conjugated(m, CarlemanWeight(h))
        psi = np.exp(-((X[:, 0] - 0.5) ** 2 + X[:, 1] ** 2 + X[:, 2] ** 2) / (2 * 0.15**2))
        xi = np.array([0.5, 0.3, 0.0])
        u = np.exp(1j * X @ xi / h)
        rq = np.sum(m.weights * psi * np.conj(u) * (P.full @ u)) / np.sum(m.weights * psi)
        errs.append(abs(rq - CarlemanWeight.symbol(xi)))
    assert errs[1] <= 0.02
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.15)


def test_conjugation_identity(small_mesh, rng):
    h = 0.2
    w = CarlemanWeight(h)
    P = assemble_conjugated(small_mesh, w)
    E = w.factor(small_mesh.nodes[:, 0])
    L = discrete_laplacian(small_mesh)
    for _ in range(10):
        v = rng.standard_normal(small_mesh.n)
        lhs = P.full @ (E * v)
        rhs = E * (h * h * (L @ v))
        assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)


def test_green_identities(greens):
    for G in greens.values():
        r = check_green(G)
        assert r["right_inverse"] <= 1e-8
        assert r["adjoint_symmetry"] <= 1e-6
        assert r["left_inverse_on_compact"] <= 1e-8
        assert r["pi_idempotent"] <= 1e-10 and r["pi_selfadjoint"] <= 1e-10
        assert r["pi_into_kernel"] <= 1e-6
        assert r["T_adjoint"] <= 1e-6
        assert r["P_adjoint"] <= 1e-8


def test_kernel_dimension_is_boundary_count(greens, small_mesh):
    for G in greens.values():
        assert G.kernel_dim == len(small_mesh.boundary)


def test_norm_growth_slope(greens):
    hs = np.array(sorted(greens, reverse=True))
    norms = [greens[h].norm for h in hs]
    slope = np.polyfit(np.log(1 / hs), np.log(norms), 1)[0]
    assert slope <= 1.3


def test_carleman_ratios_frozen(small_mesh):
    rows = carleman_lower_bound(small_mesh, H_GRID)
    ratios = [r["ratio"] for r in rows]
    assert all(r["bound"] > 0 for r in rows)
    assert np.allclose(ratios, CARLEMAN_RATIOS, rtol=0.01)
    assert max(ratios) / min(ratios) < 3


def test_carleman_bound_mesh_stable(geometry):
    a = carleman_lower_bound(build_mesh(geometry, (4, 6)), (0.2,))[0]["bound"]
    b = carleman_lower_bound(build_mesh(geometry, (8, 12)), (0.2,))[0]["bound"]
    # change relative to the coarse-mesh value
    assert abs(a - b) / a < 0.2


def test_single_layer(greens, small_mesh, rng):
    G = greens[0.2]
    S = build_single_layer(G)
    nb = len(small_mesh.boundary)
    assert np.all(S.apply(np.zeros(nb)) == 0)
    assert np.all(np.isfinite(S.matrix))
    Pm = assemble_conjugated(small_mesh, G.weight.flipped())
    K = rng.standard_normal((nb, 5))
    Y = gamma_G_adjoint(G, K)
    res = np.linalg.norm(Pm.matrix @ Y) / np.linalg.norm(Pm.full @ Y)
    assert res <= 1e-6


def test_identity_with_dn_maps(greens, small_mesh, small_dn, rng):
    q, Lq, L0 = small_dn
    K = rng.standard_normal((len(small_mesh.boundary), 10))
    for h in (0.3, 0.1):
        assert identity_residual(small_mesh, q, greens[h], K, Lq, L0) <= 1e-4


def test_trace_of_harmonics_full_rank(small_mesh):
    nb = len(small_mesh.boundary)
    U = DirichletSolver(small_mesh).solve(np.eye(nb))
    assert np.linalg.matrix_rank(U[small_mesh.boundary]) == nb
