import numpy as np
import pytest

from ctarecon.errors import ConfigError, EigenvalueProximity
from ctarecon.forward import (
    DirichletSolver,
    DNMap,
    Potential,
    assemble_dn_map,
    check_spectrum,
    first_dirichlet_eigenvalue,
    pair_dn,
    solve_dirichlet,
    volume_integral,
)
from ctarecon.geometry import build_mesh


def test_constant_and_linear_are_harmonic(small_mesh):
    z = Potential.zero(small_mesh)
    b = small_mesh.boundary
    u = solve_dirichlet(small_mesh, z, np.ones(len(b))).values
    assert np.allclose(u, 1.0, atol=1e-12)
    x1 = small_mesh.nodes[:, 0]
    sol = solve_dirichlet(small_mesh, z, x1[b])
    assert np.allclose(sol.values, x1, atol=1e-12)
    assert sol.recompute_residual(small_mesh, z) == pytest.approx(sol.residual, abs=1e-15)
    assert np.array_equal(sol.trace, x1[b])


def test_fem_rate_on_manufactured_solution(geometry):
    # e^{x1} cos(x) is harmonic; L2 error vs mesh size has slope about 2
    errs = []
    for r in (4, 8, 16):
        m = build_mesh(geometry, (r, r))
        ex = np.exp(m.nodes[:, 0]) * np.cos(m.nodes[:, 1])
        u = solve_dirichlet(m, Potential.zero(m), ex[m.boundary]).values
        errs.append(np.sqrt(np.sum(m.weights * (u - ex) ** 2)))
    slope = np.polyfit(np.log([1 / 4, 1 / 8, 1 / 16]), np.log(errs), 1)[0]
    assert slope == pytest.approx(2.14, abs=0.2)


def test_dn_annihilates_constants(small_dn):
    _, _, L0 = small_dn
    one = np.ones(L0.n_b)
    assert abs(L0.pair(one, one)) <= 1e-10 * np.abs(L0.matrix).max()
    assert np.max(np.abs(L0.matrix @ one)) <= 1e-10 * np.abs(L0.matrix).max()


def test_dn_symmetry(small_dn, rng):
    _, Lq, _ = small_dn
    for _ in range(20):
        f, k = rng.standard_normal((2, Lq.n_b))
        assert abs(Lq.pair(f, k) - Lq.pair(k, f)) <= 1e-8 * np.linalg.norm(f) * np.linalg.norm(k)


def test_small_constant_perturbation(small_mesh, rng):
    eps = 1e-3
    La = assemble_dn_map(small_mesh, Potential.constant(small_mesh, eps))
    L0 = assemble_dn_map(small_mesh, Potential.zero(small_mesh))
    f = rng.standard_normal(L0.n_b)
    u = solve_dirichlet(small_mesh, Potential.zero(small_mesh), f).values
    first_order = eps * volume_integral(small_mesh, u, u)
    assert pair_dn(La, L0, f, f) == pytest.approx(first_order, rel=5e-3)


def test_pairing_identity(small_mesh, small_dn, rng):
    q, Lq, L0 = small_dn
    for _ in range(5):
        f, k = rng.standard_normal((2, Lq.n_b))
        u1 = solve_dirichlet(small_mesh, q, f).values
        u2 = solve_dirichlet(small_mesh, Potential.zero(small_mesh), k).values
        vol = volume_integral(small_mesh, q.values, u1, u2)
        assert pair_dn(Lq, L0, f, k) == pytest.approx(vol, rel=1e-6)


def test_pairing_is_bilinear(small_dn, rng):
    _, Lq, L0 = small_dn
    f, g, k = rng.standard_normal((3, Lq.n_b))
    a, b = 1.7, -0.3 + 2j
    lhs = pair_dn(Lq, L0, a * f + b * g, k)
    assert lhs == pytest.approx(a * pair_dn(Lq, L0, f, k) + b * pair_dn(Lq, L0, g, k), rel=1e-12)
    assert pair_dn(Lq, Lq, f, k) == 0


def test_pairing_shape_mismatch(small_dn, mesh):
    _, Lq, _ = small_dn
    other = assemble_dn_map(mesh, Potential.zero(mesh))
    with pytest.raises(ValueError):
        pair_dn(Lq, other, np.zeros(Lq.n_b), np.zeros(Lq.n_b))


def test_spectrum_margin(small_mesh):
    lam1 = first_dirichlet_eigenvalue(small_mesh)
    m0 = check_spectrum(small_mesh)
    assert m0 == pytest.approx(lam1, rel=1e-8) and m0 > 0
    assert check_spectrum(small_mesh, Potential.constant(small_mesh, 5.0)) > m0
    shifted = Potential.constant(small_mesh, -lam1)
    assert check_spectrum(small_mesh, shifted) < 1e-6
    with pytest.raises(EigenvalueProximity):
        DirichletSolver(small_mesh, shifted)


def test_interior_supported_potential_checked(small_mesh):
    v = np.ones(small_mesh.n)
    with pytest.raises(ConfigError):
        Potential(v, interior_supported=True).check(small_mesh)
    with pytest.raises(ConfigError):
        Potential(np.full(small_mesh.n, np.nan))


def test_dn_roundtrip(tmp_path, small_dn):
    _, Lq, _ = small_dn
    binp, csvp = Lq.save(tmp_path / "dn")
    a, b = DNMap.load(binp), DNMap.load(csvp)
    assert np.array_equal(a.matrix, Lq.matrix) and np.array_equal(a.B, Lq.B)
    assert np.array_equal(b.matrix, Lq.matrix)
    assert a.mesh_hash == Lq.mesh_hash and a.q_hash == Lq.q_hash


def test_truncated_dn_file_rejected(tmp_path, small_dn):
    _, Lq, _ = small_dn
    binp, _ = Lq.save(tmp_path / "dn")
    binp.write_bytes(binp.read_bytes()[:-8])
    with pytest.raises(ConfigError):
        DNMap.load(binp)
