import numpy as np
import pytest

from ctarecon.carleman import discrete_laplacian, green_for
from ctarecon.cgo import beam_field, build_pair, build_u0, build_u1_oracle, build_u2, u1_identity_residual, l2
from ctarecon.errors import ContractionFailure
from ctarecon.forward import Potential
from ctarecon.geometry import TransversalManifold, trace_geodesic
from ctarecon.quasimodes import SpectralParameter, build_quasimode

M0 = TransversalManifold()
HS = (0.3, 0.2, 0.15, 0.1)


@pytest.fixture(scope="module")
def greens(small_mesh):
    return {h: green_for(small_mesh, h) for h in HS}


def beam(h, lam, theta=0.7, p=0.3):
    return build_quasimode(M0, trace_geodesic(M0, theta, p), SpectralParameter(h, lam))


def test_harmonicity(greens, small_dn):
    q = small_dn[0]
    for lam in (0.0, 0.5):
        pair = build_pair(beam(0.1, lam), greens[0.1], q)
        assert pair.u0.harmonic_residual <= 1e-6
        assert pair.u2.harmonic_residual <= 1e-6
        assert pair.u1.harmonic_residual <= 1e-5
        assert u1_identity_residual(pair.u1, pair.u0, q, greens[0.1]) <= 1e-6


def test_r0_matches_conjugated_laplacian(greens, small_mesh):
    h = 0.2
    G = greens[h]
    b = beam(h, 0.0)
    u0 = build_u0(b, G)
    v = beam_field(small_mesh, b)
    E = G.weight.factor(small_mesh.nodes[:, 0])
    direct = -E * (h * h * (discrete_laplacian(small_mesh) @ (v / E)))
    I = small_mesh.interior
    assert np.linalg.norm(u0.rhs[I] - direct[I]) <= 1e-8 * np.linalg.norm(direct[I])


def test_u2_deterministic(greens):
    a = build_u2(beam(0.15, 0.5), greens[0.15])
    b = build_u2(beam(0.15, 0.5), greens[0.15])
    assert np.all(np.isfinite(a.u)) and np.array_equal(a.u, b.u)


def test_zero_potential_gives_u1_equal_u0(greens, small_mesh):
    G = greens[0.2]
    u0 = build_u0(beam(0.2, 0.5), G)
    u1 = build_u1_oracle(u0, Potential.zero(small_mesh), G, 0.5)
    assert np.all(u1.remainder == 0) and np.array_equal(u1.u, u0.u)


def test_neumann_matches_direct(greens, small_dn):
    q = small_dn[0]
    G = greens[0.1]
    u0 = build_u0(beam(0.1, 0.5), G)
    a = build_u1_oracle(u0, q, G, 0.5, "direct")
    b = build_u1_oracle(u0, q, G, 0.5, "neumann")
    assert l2(G.mesh, a.u - b.u) <= 1e-8 * l2(G.mesh, a.u)


def test_neumann_refuses_strong_potential(greens, small_mesh):
    G = greens[0.3]
    q = Potential.constant(small_mesh, 400.0)
    with pytest.raises(ContractionFailure):
        build_u1_oracle(build_u0(beam(0.3, 0.0), G), q, G, 0.0, "neumann")


def test_remainder_slopes(greens, small_dn):
    # the exact beam has no continuum residual: r0 and r2 carry only the
    # mesh error of the discrete Laplacian, which grows like (mesh / h)^2
    q = small_dn[0]
    norms = np.array([[build_pair(beam(h, 0.5), greens[h], q).norms[k] for k in ("r0", "r2", "r1")] for h in HS])
    slopes = [np.polyfit(np.log(HS), np.log(norms[:, j]), 1)[0] for j in range(3)]
    assert np.allclose(norms[:, 0], norms[:, 1], rtol=1e-8)
    assert slopes[2] >= 0.9
    assert slopes[0] < 0
