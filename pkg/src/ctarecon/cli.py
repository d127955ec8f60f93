"""Command-line front end: ``ctarecon forward|validate|reconstruct``.

Exit codes: 0 success, 1 an invariant or tolerance failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .carleman import carleman_lower_bound, check_green, green_for
from .errors import ConfigError, CTAError
from .forward import DNMap, Potential, assemble_dn_map
from .geometry import GeometryConfig, parse_geometry_section, trace_geodesic
from .pipeline import RunConfig, parse_run_config, reconstruct
from .quasimodes import SpectralParameter, build_quasimode, concentration_integral, concentration_target, residual_norm
from .traces import identity_residual, verify_equivalence

log = logging.getLogger("ctarecon")

GREEN_TOL = 1e-6
IDENTITY_TOL = 1e-4
NORM_SLOPE_MAX = 1.3
CARLEMAN_SPREAD_MAX = 3.0
RECON_TOL = 0.2


class InputError(Exception):
    pass


def load_config(path: str | Path) -> tuple[configparser.ConfigParser, GeometryConfig, RunConfig]:
    parser = configparser.ConfigParser()
    try:
        ok = parser.read(path)
    except configparser.Error as exc:
        raise InputError(f"cannot parse {path}: {exc}") from exc
    if not ok:
        raise InputError(f"cannot read config file {path}")
    try:
        geo = parse_geometry_section(parser["geometry"] if parser.has_section("geometry") else {})
        run = parse_run_config(parser)
    except (ConfigError, CTAError) as exc:
        raise InputError(str(exc)) from exc
    return parser, geo, run


def echo_config(geo: GeometryConfig, run: RunConfig) -> dict:
    g = geo.geometry
    return {
        "geometry": {
            "L1": g.L1,
            "margin": g.margin,
            "disk_resolution": geo.disk_resolution,
            "x1_resolution": geo.x1_resolution,
            "conformal_profile": list(g.transversal.conformal_profile or []),
        },
        "run": run.as_dict(),
    }


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))
    return path


# ---------------------------------------------------------------------------


def cmd_forward(geo: GeometryConfig, run: RunConfig, out: Path) -> int:
    mesh = geo.build_mesh()
    q = run.potential.build(mesh)
    Lq = assemble_dn_map(mesh, q)
    L0 = assemble_dn_map(mesh, Potential.zero(mesh))
    files = {}
    for name, L in (("dn_q", Lq), ("dn_0", L0)):
        binp, csvp = L.save(out / name)
        files[name] = {"bin": binp.name, "csv": csvp.name}
    mesh.export_csv(out)
    const_image = float(np.max(np.abs(L0.matrix @ np.ones(L0.n_b))) / np.max(np.abs(L0.matrix)))
    _write_json(
        out / "forward.json",
        {
            "mesh_hash": mesh.hash,
            "q_hash": q.hash,
            "n_nodes": mesh.n,
            "n_boundary": len(mesh.boundary),
            "files": files,
            "L0_constant_image": const_image,
            "symmetry_defect": {"q": Lq.symmetry_defect(), "0": L0.symmetry_defect()},
            "config": echo_config(geo, run),
        },
    )
    print(f"mesh {mesh.hash}: {mesh.n} nodes, {len(mesh.boundary)} boundary nodes -> {out}")
    return 0


def validation_report(geo: GeometryConfig, run: RunConfig, seed: int = 0) -> tuple[dict, list[str]]:
    """Operator, quasimode and boundary-equation invariants on the configured mesh."""
    mesh = geo.build_mesh()
    q = run.potential.build(mesh)
    failures: list[str] = []
    rng = np.random.default_rng(seed)
    green_rows, norms = [], []
    K = rng.standard_normal((len(mesh.boundary), 10))
    ident_rows = []
    for h in run.h_grid:
        G = green_for(mesh, h)
        row = check_green(G, seed=seed)
        row["norm"] = G.norm
        norms.append(row["norm"])
        green_rows.append(row)
        for key in ("right_inverse", "adjoint_symmetry", "left_inverse_on_compact"):
            if not row[key] <= GREEN_TOL:
                failures.append(f"h={h}: {key} residual {row[key]:.2e} > {GREEN_TOL}")
        ir = {"h": h, "identity": identity_residual(mesh, q, G, K)}
        ir.update(verify_equivalence(mesh, q, G, K[:, 0]))
        ident_rows.append(ir)
        for key in ("identity", "boundary_residual", "volume_residual"):
            if not ir[key] <= IDENTITY_TOL:
                failures.append(f"h={h}: {key} residual {ir[key]:.2e} > {IDENTITY_TOL}")
    hs = np.asarray(run.h_grid)
    slope = float(np.polyfit(np.log(1 / hs), np.log(norms), 1)[0]) if len(hs) > 1 else float("nan")
    if len(hs) > 1 and not slope <= NORM_SLOPE_MAX:
        failures.append(f"norm growth slope {slope:.2f} > {NORM_SLOPE_MAX}")
    carl = carleman_lower_bound(mesh, run.h_grid)
    ratios = [r["ratio"] for r in carl]
    spread = float(max(ratios) / min(ratios))
    if not spread <= CARLEMAN_SPREAD_MAX:
        failures.append(f"Carleman constant spread {spread:.2f} > {CARLEMAN_SPREAD_MAX}")
    beams = []
    M0 = geo.geometry.transversal
    for theta, p in ((0.0, 0.0), (0.7, 0.3), (1.9, -0.5)):
        gamma = trace_geodesic(M0, theta, p)
        for h in run.h_grid:
            try:
                b = build_quasimode(M0, gamma, SpectralParameter(h, 0.5))
                psi = lambda x, y: np.exp(-(x * x + y * y))
                conc = abs(concentration_integral(b, psi) - concentration_target(gamma, 0.5, psi))
                beams.append({"theta": theta, "p": p, "h": h, "order": b.order, "residual": residual_norm(b), "concentration_error": conc})
            except CTAError as exc:
                failures.append(f"beam ({theta}, {p}) h={h}: {exc}")
    report = {
        "green": green_rows,
        "norm_slope": slope,
        "carleman": carl,
        "carleman_spread": spread,
        "identities": ident_rows,
        "quasimodes": beams,
        "failures": failures,
        "config": echo_config(geo, run),
        "seed": seed,
    }
    return report, failures


def cmd_validate(geo: GeometryConfig, run: RunConfig, out: Path, seed: int) -> int:
    report, failures = validation_report(geo, run, seed)
    _write_json(out / "validate.json", report)
    for f in failures:
        print(f"FAIL {f}")
    print(f"validation: {'ok' if not failures else f'{len(failures)} failure(s)'} -> {out / 'validate.json'}")
    return 1 if failures else 0


def _dn_path(parser: configparser.ConfigParser, key: str, flag: str | None, out: Path, base: Path) -> Path:
    if flag:
        return Path(flag)
    if parser.has_section("run") and parser["run"].get(key):
        p = Path(parser["run"][key])
        return p if p.is_absolute() else base / p
    return out / f"{key}.bin"


def cmd_reconstruct(geo: GeometryConfig, run: RunConfig, out: Path, dn_q: Path, dn_0: Path, with_truth: bool) -> int:
    for p in (dn_q, dn_0):
        if not p.exists():
            raise InputError(f"DN map file {p} not found (run `ctarecon forward` first or set dn_q / dn_0)")
    mesh = geo.build_mesh()
    for p in (dn_q, dn_0):
        try:
            h = DNMap.load(p).mesh_hash
        except (ConfigError, ValueError) as exc:
            raise InputError(f"{p}: {exc}") from exc
        if h != mesh.hash:
            raise InputError(f"{p} was assembled on mesh {h}, the geometry config gives mesh {mesh.hash}")
    truth = run.potential.function() if with_truth else None
    report = reconstruct(dn_q, dn_0, geo, run, truth=truth, out=out, mesh=mesh)
    for f in report.failures:
        print(f"note: {f}")
    status = 0
    if truth is not None:
        err = report.errors.get("relative_l2", float("nan"))
        print(f"relative L2 error {err:.4f} (band-limited projection {report.errors.get('band_projection', float('nan')):.4f})")
        if not err <= RECON_TOL:
            status = 1
        if any(not r["non_increasing"] for r in report.stages.get("swaps", [])):
            status = 1
    print(f"report {report.hash} -> {out / 'report.json'}")
    return status


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctarecon", description="Potential reconstruction on a cylinder from DN maps.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("forward", "assemble DN maps for the configured q and for q = 0"),
        ("validate", "check operator, quasimode and boundary-equation invariants"),
        ("reconstruct", "reconstruct q from DN map files"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="INI config with [geometry], [run], [potential]")
        p.add_argument("--out", default="ctarecon_out", help="output directory")
        p.add_argument("--seed", type=int, default=None)
        if name == "reconstruct":
            p.add_argument("--route", choices=("per-lambda", "taylor"), default=None)
            p.add_argument("--dn-q", default=None, help="DN map of q (default from config or <out>/dn_q.bin)")
            p.add_argument("--dn-0", default=None, help="DN map of 0 (default from config or <out>/dn_0.bin)")
            p.add_argument("--no-truth", action="store_true", help="skip error metrics against the [potential] section")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        parser, geo, run = load_config(args.config)
        if args.seed is not None:
            run = replace(run, seed=args.seed)
        if args.command == "forward":
            return cmd_forward(geo, run, out)
        if args.command == "validate":
            return cmd_validate(geo, run, out, run.seed)
        if args.route:
            run = replace(run, route=args.route)
        base = Path(args.config).resolve().parent
        dn_q = _dn_path(parser, "dn_q", args.dn_q, out, base)
        dn_0 = _dn_path(parser, "dn_0", args.dn_0, out, base)
        with_truth = parser.has_section("potential") and not args.no_truth
        return cmd_reconstruct(geo, run, out, dn_q, dn_0, with_truth)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CTAError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
