"""Acceptance criteria 1-8.

Each test prints one ``CRITERION k: PASS|FAIL`` line with the measured
quantities and asserts the verdict.  The lines are repeated in the pytest
terminal summary.  Runtime limits are part of each verdict.
"""

import time
from pathlib import Path

import numpy as np
import pytest

import ctarecon.raytransform as R
from ctarecon.carleman import H_GRID, build_single_layer, carleman_lower_bound, check_green, green_for
from ctarecon.cgo import build_pair
from ctarecon.cli import load_config
from ctarecon.forward import Potential, assemble_dn_map
from ctarecon.geometry import TransversalManifold, boundary_chart, trace_geodesic, triangulate_disk
from ctarecon.pipeline import BoundaryProbe, boundary_determination, reconstruct
from ctarecon.quasimodes import SpectralParameter, beam_norm, build_quasimode, concentration_integral, concentration_target, residual_norm
from ctarecon.traces import b_norm, identity_residual, invertibility_margin, solve_trace_equation, verify_equivalence

from test_raytransform import CX, CY, SIG, chord_gaussian, g

RESULTS: dict[int, str] = {}
M0 = TransversalManifold()
HS = np.array(H_GRID)
GEODESICS = [(0.0, 0.0), (0.7, 0.3), (1.9, -0.5), (2.5, 0.6), (1.2, -0.2)]
PANEL = [lambda x, y: np.ones_like(x), lambda x, y: x, lambda x, y: y, lambda x, y: x * x, lambda x, y: x * y, lambda x, y: y * y]
ACCEPTANCE_INI = Path(__file__).resolve().parents[1] / "configs" / "acceptance.ini"


def verdict(k: int, checks: dict[str, bool], detail: str, seconds: float, limit: float) -> None:
    checks = dict(checks, runtime=seconds <= limit)
    failed = [name for name, ok in checks.items() if not ok]
    line = f"CRITERION {k}: {'PASS' if not failed else 'FAIL'} {detail}; runtime {seconds:.0f}s (limit {limit:.0f}s)"
    if failed:
        line += f"; failing: {', '.join(failed)}"
    RESULTS[k] = line
    print(line)
    assert not failed, line


def slope(hs, vals) -> float:
    """Observed order p in vals ~ h^p."""
    return float(np.polyfit(np.log(hs), np.log(vals), 1)[0])


@pytest.fixture(scope="module")
def greens(small_mesh):
    t = time.perf_counter()
    G = {h: green_for(small_mesh, h) for h in H_GRID}
    return G, time.perf_counter() - t


def test_criterion_1_green_operators(small_mesh, greens):
    G, t_build = greens
    t = time.perf_counter()
    rows = [check_green(G[h]) for h in H_GRID]
    worst = {k: max(r[k] for r in rows) for k in ("right_inverse", "adjoint_symmetry", "left_inverse_on_compact")}
    s = slope(1 / HS, [G[h].norm for h in H_GRID])
    ratios = [r["ratio"] for r in carleman_lower_bound(small_mesh, H_GRID)]
    spread = max(ratios) / min(ratios)
    checks = {f"{k} <= 1e-6": v <= 1e-6 for k, v in worst.items()}
    checks.update({"norm slope <= 1.3": s <= 1.3, "Carleman spread <= 3": spread <= 3})
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", norm slope {s:.2f}, Carleman spread {spread:.2f}"
    verdict(1, checks, detail, t_build + time.perf_counter() - t, 180)


def test_criterion_2_operator_identities(small_mesh, small_dn, greens):
    G, _ = greens
    q, Lq, L0 = small_dn
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    K = rng.standard_normal((len(small_mesh.boundary), 10))
    xb = small_mesh.nodes[small_mesh.boundary, 0]
    ident, prop, margins = [], [], []
    for h in H_GRID:
        ident.append(identity_residual(small_mesh, q, G[h], K, Lq, L0))
        r = verify_equivalence(small_mesh, q, G[h], K[:, 0])
        prop.append(max(r["boundary_residual"], r["volume_residual"]))
        margins.append(invertibility_margin(build_single_layer(G[h]), Lq, L0, h, xb))
    small = [m for h, m in zip(H_GRID, margins) if h <= 0.1]
    checks = {
        "identity <= 1e-4": max(ident) <= 1e-4,
        "equivalence <= 1e-4": max(prop) <= 1e-4,
        "margin >= 0.1 for h <= 0.1": min(small) >= 0.1,
        "margin non-decreasing as h decreases": bool(np.all(np.diff(margins) >= 0)),
    }
    detail = f"identity {max(ident):.1e}, equivalence {max(prop):.1e}, margins " + " ".join(f"{m:.3f}" for m in margins)
    verdict(2, checks, detail, time.perf_counter() - t, 120)


def test_criterion_3_quasimodes():
    t = time.perf_counter()
    res_slopes, conc_slopes, rel_res, monotone = [], [], [], True
    for theta, p in GEODESICS:
        gamma = trace_geodesic(M0, theta, p)
        for lam in (0.0, 0.5):
            res, errs = [], []
            for h in H_GRID:
                b = build_quasimode(M0, gamma, SpectralParameter(h, lam))
                res.append(residual_norm(b) / beam_norm(b))
                target = np.array([concentration_target(gamma, lam, psi) for psi in PANEL])
                errs.append(float(np.max(np.abs(concentration_integral(b, PANEL) - target))))
            rel_res.append(max(res))
            # a residual at round-off carries no rate; any order holds
            res_slopes.append(np.inf if max(res) <= 1e-10 else slope(HS, res))
            conc_slopes.append(slope(HS, errs))
            monotone &= bool(np.all(np.diff(errs) < 0))
    checks = {
        "residual slope >= 0.4": min(res_slopes) >= 0.4,
        "concentration order >= 0.5": min(conc_slopes) >= 0.5,
        "concentration decreasing": monotone,
    }
    rs = "round-off floor" if np.isinf(min(res_slopes)) else f"{min(res_slopes):.2f}"
    detail = f"residual slope min {rs} (max relative residual {max(rel_res):.1e}), concentration order min {min(conc_slopes):.2f}"
    verdict(3, checks, detail, time.perf_counter() - t, 120)


def test_criterion_4_cgo_remainders(small_dn, greens):
    G, _ = greens
    q = small_dn[0]
    t = time.perf_counter()
    gamma = trace_geodesic(M0, 0.7, 0.3)
    norms = np.array([[build_pair(build_quasimode(M0, gamma, SpectralParameter(h, 0.5)), G[h], q).norms[k] for k in ("r0", "r1", "r2")] for h in H_GRID])
    s0, s1, s2 = (slope(HS, norms[:, j]) for j in range(3))
    checks = {"r0 slope >= 1.3": s0 >= 1.3, "r1 slope >= 0.9": s1 >= 0.9, "r2 slope >= 1.3": s2 >= 1.3}
    verdict(4, checks, f"slopes r0 {s0:.2f}, r1 {s1:.2f}, r2 {s2:.2f}", time.perf_counter() - t, 180)


def test_criterion_5_trace_recovery(small_mesh, small_dn, greens):
    G = greens[0][0.1]
    q, Lq, L0 = small_dn
    t = time.perf_counter()
    S = build_single_layer(G)
    b = small_mesh.boundary
    xb = small_mesh.nodes[b, 0]
    gaps = []
    for theta, p in GEODESICS:
        for lam in (0.0, 0.5):
            pair = build_pair(build_quasimode(M0, trace_geodesic(M0, theta, p), SpectralParameter(0.1, lam)), G, q)
            sol = solve_trace_equation(S, Lq, L0, pair.u0.u[b], 0.1, xb)
            gaps.append(b_norm(small_mesh, sol.f - pair.u1.u[b]) / b_norm(small_mesh, pair.u1.u[b]))
    verdict(5, {"oracle gap <= 5%": max(gaps) <= 0.05}, f"worst oracle gap {max(gaps):.1e} over {len(gaps)} pairs", time.perf_counter() - t, 120)


def test_criterion_6_ray_transforms():
    t = time.perf_counter()
    disk = triangulate_disk(20)
    P = disk.nodes
    ex = g(P[:, 0], P[:, 1])
    grid = R.RaySampleGrid.uniform(60, 60)

    def rel(rec, target):
        return float(np.sqrt(np.sum(disk.weights * np.abs(rec - target) ** 2) / np.sum(disk.weights * ex**2)))

    small = R.RaySampleGrid.uniform(7, 9)
    chord = max(
        float(np.max(np.abs(R.forward_attenuated(g, lam, small).values - np.array([[chord_gaussian(th, p, lam) for p in small.ps] for th in small.thetas]))))
        for lam in (-1.0, 0.0, 0.5, 1.0)
    )
    fbp = rel(R.invert_ray(R.forward_ray(g, grid), P), ex)
    f = lambda x, y: g(x, y) + 0j
    att = max(rel(R.invert_attenuated_const(R.forward_attenuated(f, lam, grid), R.forward_attenuated(f, -lam, grid), lam, P), ex) for lam in (0.5, 1.0))
    # slices of a potential whose x1 transform is sqrt(pi) e^{-lam^2} g
    D = {float(l): R.forward_attenuated(lambda x, y, l=l: np.sqrt(np.pi) * np.exp(-l * l) * g(x, y) + 0j, l, grid).values for l in np.linspace(-1, 1, 17)}
    res = R.taylor_recovery(D, grid, 2, disk)
    targets = [np.sqrt(np.pi) * ex, 0 * ex, -np.sqrt(np.pi) / 2 * ex]
    taylor = max(rel(s, tg) for s, tg in zip(res.slices, targets))
    checks = {"chord <= 1e-6": chord <= 1e-6, "FBP <= 5%": fbp <= 0.05, "attenuated <= 8%": att <= 0.08, "Taylor <= 10%": taylor <= 0.1}
    detail = f"chord {chord:.1e}, FBP {fbp:.4f}, attenuated {att:.4f}, Taylor {taylor:.4f}"
    verdict(6, checks, detail, time.perf_counter() - t, 180)


def test_criterion_7_boundary_determination(mesh):
    t = time.perf_counter()
    L0 = assemble_dn_map(mesh, Potential.zero(mesh))
    Lc = assemble_dn_map(mesh, Potential.constant(mesh, 0.5))
    Ll = assemble_dn_map(mesh, Potential.from_function(mesh, lambda x1, x, y: 0.5 + 0.4 * x1 + 0 * x))
    const = [boundary_determination(Lc, L0, x0, mesh).value for x0 in ((0.5, 1.0, 0.0), (0.0, 0.0, 0.0), (1.0, 0.4, 0.0))]
    vals = []
    for x0 in ((0.4, 0.0, 1.0), (0.6, 0.0, 1.0)):
        probe = BoundaryProbe(boundary_chart(mesh.geometry, x0), sigma=0.15)
        vals.append(boundary_determination(Ll, L0, x0, mesh, probe).value)
    c_err = max(abs(c - 0.5) / 0.5 for c in const)
    inc = vals[1] - vals[0]
    i_err = abs(inc - 0.08) / 0.08
    checks = {"constant within 5%": c_err <= 0.05, "increment within 10%": i_err <= 0.1}
    verdict(7, checks, f"constant worst error {c_err:.2%}, increment {inc:.4f} vs 0.08 ({i_err:.2%})", time.perf_counter() - t, 180)


def test_criterion_8_end_to_end(tmp_path):
    _, geo, run = load_config(ACCEPTANCE_INI)
    mesh = geo.build_mesh()
    spec = run.potential
    paths = {}
    for name, q in (("dn_q", spec.build(mesh)), ("dn_0", Potential.zero(mesh))):
        paths[name] = assemble_dn_map(mesh, q).save(tmp_path / name)[0]
    t = time.perf_counter()
    rep = reconstruct(paths["dn_q"], paths["dn_0"], geo, run, truth=spec.function(), out=tmp_path / "out", mesh=mesh)
    err = rep.errors["relative_l2"]
    swaps = rep.stages.get("swaps", [])
    checks = {"relative L2 <= 0.2": err <= 0.2, "swaps non-increasing": bool(swaps) and all(r["non_increasing"] for r in swaps)}
    detail = f"relative L2 {err:.3f} (band-limited projection {rep.errors['band_projection']:.3f}), swaps " + ", ".join(
        f"{r['stage']} {'ok' if r['non_increasing'] else 'increasing'}" for r in swaps
    )
    verdict(8, checks, detail, time.perf_counter() - t, 600)
