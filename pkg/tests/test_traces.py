import numpy as np
import pytest

from ctarecon.carleman import build_single_layer, green_for
from ctarecon.cgo import build_pair
from ctarecon.errors import EquationIllConditioned
from ctarecon.forward import Potential, assemble_dn_map
from ctarecon.geometry import TransversalManifold, trace_geodesic
from ctarecon.quasimodes import SpectralParameter, build_quasimode
from ctarecon.traces import b_norm, invertibility_margin, solve_trace_equation, verify_equivalence, write_report

M0 = TransversalManifold()
PAIRS = [(0.0, 0.0, 0.0), (0.7, 0.3, 0.5), (1.9, -0.5, 1.0), (2.5, 0.6, -0.5), (1.2, -0.2, 0.25)]


@pytest.fixture(scope="module")
def setup(small_mesh, small_dn):
    G = green_for(small_mesh, 0.1)
    return G, build_single_layer(G), small_mesh.nodes[small_mesh.boundary, 0]


def test_zero_potential_returns_u0_trace(setup, small_dn, rng):
    G, S, xb = setup
    _, _, L0 = small_dn
    g0 = rng.standard_normal(L0.n_b)
    sol = solve_trace_equation(S, L0, L0, g0, 0.1, xb)
    assert np.array_equal(sol.f, g0)
    assert invertibility_margin(S, L0, L0, 0.1, xb) == pytest.approx(1.0)


def test_trace_matches_oracle(setup, small_mesh, small_dn):
    G, S, xb = setup
    q, Lq, L0 = small_dn
    b = small_mesh.boundary
    for theta, p, lam in PAIRS:
        beam = build_quasimode(M0, trace_geodesic(M0, theta, p), SpectralParameter(0.1, lam))
        pair = build_pair(beam, G, q)
        sol = solve_trace_equation(S, Lq, L0, pair.u0.u[b], 0.1, xb)
        assert sol.residual <= 1e-10
        assert b_norm(small_mesh, sol.f - pair.u1.u[b]) <= 0.05 * b_norm(small_mesh, pair.u1.u[b])


def test_linearity(setup, small_dn, rng):
    G, S, xb = setup
    _, Lq, L0 = small_dn
    a, c = rng.standard_normal((2, L0.n_b))
    fa = solve_trace_equation(S, Lq, L0, a, 0.1, xb).f
    fc = solve_trace_equation(S, Lq, L0, c, 0.1, xb).f
    fs = solve_trace_equation(S, Lq, L0, a + c, 0.1, xb).f
    assert np.allclose(fa + fc, fs, rtol=1e-10, atol=1e-12)


def test_margin_threshold_raises(setup, small_dn, rng):
    G, S, xb = setup
    _, Lq, L0 = small_dn
    with pytest.raises(EquationIllConditioned):
        solve_trace_equation(S, Lq, L0, np.ones(L0.n_b), 0.1, xb, threshold=0.99)


def test_margin_linear_in_potential_scale(setup, small_mesh, small_dn):
    G, S, xb = setup
    q, _, L0 = small_dn
    defects = []
    for eps in (0.01, 0.1):
        Le = assemble_dn_map(small_mesh, Potential(q.values * eps, True))
        defects.append(1 - invertibility_margin(S, Le, L0, 0.1, xb))
    assert defects[1] / defects[0] == pytest.approx(10, rel=0.05)


def test_margin_above_threshold(small_mesh, small_dn):
    _, Lq, L0 = small_dn
    xb = small_mesh.nodes[small_mesh.boundary, 0]
    for h in (0.1, 0.05):
        S = build_single_layer(green_for(small_mesh, h))
        assert invertibility_margin(S, Lq, L0, h, xb) >= 0.1


def test_boundary_volume_equivalence(setup, small_mesh, small_dn, rng):
    G, _, _ = setup
    q = small_dn[0]
    r = verify_equivalence(small_mesh, q, G, rng.standard_normal(len(small_mesh.boundary)))
    assert r["boundary_residual"] <= 1e-4 and r["volume_residual"] <= 1e-4
    assert r["trace_consistency"] <= 1e-8
    k = rng.standard_normal(len(small_mesh.boundary))
    r0 = verify_equivalence(small_mesh, Potential.zero(small_mesh), G, k)
    assert r0["boundary_residual"] <= 1e-12 and r0["volume_residual"] <= 1e-12


def test_report_csv(tmp_path):
    p = write_report([{"h": 0.1, "lam": 0.0, "geodesic": 0, "margin": 0.9, "residual": 1e-14, "oracle_gap": 0.0}], tmp_path / "t.csv")
    assert p.read_text().splitlines()[0] == "h,lam,geodesic,margin,residual,oracle_gap"
