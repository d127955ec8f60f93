import numpy as np
import pytest

from ctarecon.errors import ChartUnavailable, ConfigError, DegenerateResolution, NonTangentialViolation
from ctarecon.geometry import (
    CylinderGeometry,
    TransversalManifold,
    boundary_chart,
    build_mesh,
    chart_metric_defect,
    chord_family,
    geodesic_speed_defect,
    trace_geodesic,
)

CURVED = TransversalManifold(tuple(1 + 0.05 * (1 - np.linspace(0, 1, 41) ** 2)))


def test_volume_near_pi(geometry):
    mesh = build_mesh(geometry, 1000)
    assert abs(mesh.volume - np.pi) / np.pi <= 0.02


def test_volume_error_shrinks_under_refinement(geometry):
    errs = [abs(build_mesh(geometry, (r, r)).volume - np.pi) for r in (4, 8, 16)]
    assert errs[0] > errs[1] > errs[2]


def test_boundary_nodes_match_definition(small_mesh):
    x = small_mesh.nodes
    r = np.hypot(x[:, 1], x[:, 2])
    on = (np.abs(r - 1) <= 1e-12) | (x[:, 0] <= 1e-12) | (np.abs(x[:, 0] - 1) <= 1e-12)
    assert on.sum() == len(small_mesh.boundary)
    assert np.all(on[small_mesh.boundary])
    both = np.concatenate([small_mesh.boundary, small_mesh.interior])
    assert np.array_equal(np.sort(both), np.arange(small_mesh.n))


def test_element_volumes_positive(small_mesh):
    assert np.all(small_mesh.element_volumes > 0)


def test_mesh_is_deterministic(geometry):
    assert build_mesh(geometry, (5, 6)).hash == build_mesh(geometry, (5, 6)).hash


@pytest.mark.parametrize("res", [(3, 8), (8, 3), 50])
def test_degenerate_resolution_rejected(geometry, res):
    with pytest.raises(DegenerateResolution):
        build_mesh(geometry, res)


def test_diameter_and_chord_lengths():
    M0 = TransversalManifold()
    assert trace_geodesic(M0, 0.3, 0.0).length == pytest.approx(2.0)
    assert trace_geodesic(M0, 1.1, 0.5).length == pytest.approx(np.sqrt(3.0))


def test_grazing_chord_rejected():
    with pytest.raises(NonTangentialViolation):
        trace_geodesic(TransversalManifold(), 0.0, 0.9995)


def test_flat_geodesic_unit_speed_and_interior():
    g = trace_geodesic(TransversalManifold(), 0.7, -0.4)
    assert geodesic_speed_defect(TransversalManifold(), g) <= 1e-6
    t = np.linspace(0, g.length, 50)[1:-1]
    assert np.all(np.linalg.norm(g(t), axis=-1) < 1)


def test_curved_geodesic_matches_refined_oracle():
    coarse = trace_geodesic(CURVED, 0.4, 0.3)
    fine = trace_geodesic(CURVED, 0.4, 0.3, steps=40000)
    assert np.linalg.norm(coarse.exit - fine.exit) <= 1e-6
    assert geodesic_speed_defect(CURVED, coarse) <= 1e-6


def test_conformal_profile_limits():
    with pytest.raises(ConfigError):
        TransversalManifold((1.0, 1.3))
    with pytest.raises(ConfigError):
        TransversalManifold((1.0,))


def test_lateral_chart_depth_and_metric(geometry, rng):
    chart = boundary_chart(geometry, (0.5, 1.0, 0.0))
    xn = chart.from_physical(np.array([[0.5, 0.93, 0.0]]))[0, 2]
    assert xn == pytest.approx(0.07)
    pts = rng.uniform(-0.2, 0.2, size=(20, 3))
    pts[:, 2] = np.abs(pts[:, 2])
    g = chart.metric(pts[:, 0], pts[:, 1], pts[:, 2])
    assert np.max(np.abs(g[:, 2, 2] - 1)) <= 1e-8
    assert np.max(np.abs(g[:, 2, :2])) <= 1e-8


def test_chart_inverse_metric_is_flat_on_boundary(geometry):
    for M in (geometry, CylinderGeometry(transversal=CURVED)):
        chart = boundary_chart(M, (0.5, 0.0, 1.0))
        assert np.max(chart_metric_defect(chart, np.array([0.02, 0.05, 0.1]))) <= 1e-6


def test_chart_roundtrip(geometry):
    chart = boundary_chart(geometry, (0.5, np.cos(1.0), np.sin(1.0)))
    p = chart.to_physical(0.1, -0.2, 0.05)
    assert np.allclose(chart.from_physical(p), [0.1, -0.2, 0.05])


@pytest.mark.parametrize("x0", [(0.1, 1.0, 0.0), (0.0, 0.9, 0.0), (0.5, 0.5, 0.0), (0.0, 1.0, 0.0)])
def test_chart_unavailable(geometry, x0):
    with pytest.raises(ChartUnavailable):
        boundary_chart(geometry, x0)


def test_chord_family_covers_disk(small_mesh):
    ch = np.array(chord_family(12, 12))
    d = np.stack([-np.sin(ch[:, 0]), np.cos(ch[:, 0])], 1)
    dist = np.abs(small_mesh.disk.nodes @ d.T - ch[:, 1][None, :])
    assert np.all(dist.min(axis=1) <= np.sqrt(0.1))
