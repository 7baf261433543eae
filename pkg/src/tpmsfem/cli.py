"""``tpmsfem`` command line interface.

Commands
--------
gen     calibrate the offset, write the capped STL and the ``C,RD`` table
mesh    build one (h, MJ) mesh; write VTK and a quality row
solve   mesh and solve one (h, MJ) point; write result row and displacement VTK
sweep   run every (RD, h, MJ) point of the config
gci     grid convergence report from an ``h,f`` or sweep CSV
fit     Gibson-Ashby power law from an ``RD,E_rel`` or sweep CSV
report  GCI, relative-error table and figures for a sweep CSV

Settings resolve as: command-line flag, then ``TPMSFEM_*`` environment
variable, then config file, then built-in default.
"""

from __future__ import annotations

import argparse
import os
import sys
from collections import defaultdict

import numpy as np

from . import __version__
from .convergence import GciReport, MeshStudy, fit_gibson_ashby, gci_report, relative_error
from .errors import ConfigError, NonPositivePoint, StageFailure, TpmsError
from .geometry import extract_surface, slab_fractions, solid_fraction, write_stl
from .mesher import scaled_jacobians, write_vtk
from .plotting import plot_convergence, plot_gibson_ashby, plot_mj_sweep
from .study import (MESH_HEADER, RESULT_HEADER, StudyConfig, read_csv, run_case, run_sweep,
                    write_csv)

ENV = "TPMSFEM_"


def _tag(h, mj):
    return f"h{h:g}_mj{mj:g}".replace(".", "p")


def _load(args) -> StudyConfig:
    path = args.config or os.environ.get(ENV + "CONFIG")
    overrides = {"output_dir": args.out, "jobs": args.jobs, "seed": args.seed,
                 "gci.convention": args.convention}
    return StudyConfig.load(path, overrides)


def _out(cfg: StudyConfig):
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _single_point(cfg, args):
    h = args.h if args.h is not None else cfg.element_sizes[-1]
    mj = args.mj if args.mj is not None else cfg.mj_values[-1]
    if not 0.0 < mj <= 1.0:
        raise ConfigError(f"MJ must lie in (0, 1], got {mj}")
    edge = cfg.domain_edge
    if h <= 0 or abs(edge / h - round(edge / h)) > 1e-9 * edge / h:
        raise ConfigError(f"element size {h} mm does not divide the domain edge {edge} mm")
    return h, mj


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: StudyConfig, args):
    out = _out(cfg)
    lattice = cfg.lattice()
    lo, hi = cfg.bounds
    surf = extract_surface(lattice, lo, hi, cfg.data["surface"]["resolution"])
    write_stl(surf, out / "lattice.stl", cfg.data["surface"]["stl_mode"])
    cfg.calibration().to_csv(out / "calibration.csv")
    rd_mc = solid_fraction(lattice, (lo, hi), sampler="mc", seed=int(cfg.data["seed"]))
    vol_box = float(np.prod(np.subtract(hi, lo)))
    rows = [["domain", f"{lo[2]:g}-{hi[2]:g}", rd_mc, surf.volume() / vol_box, int(surf.is_watertight())]]
    if lattice.graded:
        n = 2 * int(cfg.data["cells"])
        fr = slab_fractions(lattice, lo, hi, n)
        edges = np.linspace(lo[2], hi[2], n + 1)
        rows += [["slab", f"{a:g}-{b:g}", f, "", ""] for a, b, f in zip(edges, edges[1:], fr)]
    write_csv(out / "geometry.csv", ("region", "z_mm", "RD_mc", "RD_stl", "watertight"), rows, cfg)
    print(f"wrote {out / 'lattice.stl'} ({len(surf.faces)} triangles, RD {rd_mc:.4f})")


def cmd_mesh(cfg: StudyConfig, args):
    out = _out(cfg)
    h, mj = _single_point(cfg, args)
    res = run_case(cfg, h, mj, solve=False, keep_fields=True)
    sj = scaled_jacobians(res.mesh.element_coords())
    write_vtk(res.mesh, out / f"mesh_{_tag(h, mj)}.vtk", cell_data={"scaled_jacobian": sj})
    write_csv(out / f"mesh_{_tag(h, mj)}.csv", MESH_HEADER, [res.mesh_row()], cfg)
    q = res.report
    print(f"h={h:g} MJ={mj:g}: {q.element_count} elements, min SJ {q.min_scaled_jacobian:.4f}, "
          f"RD {q.relative_density:.4f}")


def cmd_solve(cfg: StudyConfig, args):
    out = _out(cfg)
    h, mj = _single_point(cfg, args)
    res = run_case(cfg, h, mj, keep_fields=True)
    u = res.compression.u.reshape(-1, 3)
    write_vtk(res.mesh, out / f"solve_{_tag(h, mj)}.vtk", point_data={"displacement": u})
    write_csv(out / f"solve_{_tag(h, mj)}.csv", RESULT_HEADER, [res.row()], cfg)
    write_csv(out / f"timings_{_tag(h, mj)}.csv", ("h", "MJ", "mesh_s", "solve_s"),
              [[h, mj, res.mesh_seconds, res.solve_seconds]], None)
    c = res.compression
    print(f"h={h:g} MJ={mj:g}: E_eff {c.E_eff:.2f} MPa, F {c.F:.3f} N, {c.iterations} iterations")


def cmd_sweep(cfg: StudyConfig, args):
    out = _out(cfg)

    def progress(r):
        c = r.compression
        print(f"RD={r.rd_target:g} h={r.h:g} MJ={r.mj:g}: E_eff {c.E_eff:.2f} MPa "
              f"({r.report.element_count} elements, {c.iterations} it)", flush=True)

    results = run_sweep(cfg, progress=progress)
    write_csv(out / "study.csv", RESULT_HEADER, [r.row() for r in results], cfg)
    write_csv(out / "mesh_quality.csv", MESH_HEADER, [r.mesh_row() for r in results], cfg)
    write_csv(out / "timings.csv", ("RD_target", "h", "MJ", "mesh_s", "solve_s"),
              [[r.rd_target, r.h, r.mj, r.mesh_seconds, r.solve_seconds] for r in results], None)
    print(f"wrote {out / 'study.csv'}")


def _studies_from_csv(path):
    """``label -> MeshStudy`` from either an ``h,f`` CSV or a sweep CSV."""
    rows, _ = read_csv(path)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    cols = rows[0].keys()
    if "f" in cols:
        return {"f": MeshStudy.from_pairs([(float(r["h"]), float(r["f"])) for r in rows], "f")}
    if "Eeff_MPa" not in cols:
        raise ValueError(f"{path}: expected columns h,f or a sweep CSV with Eeff_MPa")
    groups = defaultdict(list)
    for r in rows:
        key = (r.get("RD_target", ""), float(r["MJ"]))
        groups[key].append((float(r["h"]), float(r["Eeff_MPa"])))
    multi_rd = len({k[0] for k in groups}) > 1
    studies = {}
    for (rd, mj), pairs in groups.items():
        label = f"RD{float(rd):g}_MJ{mj:g}" if multi_rd else f"MJ{mj:g}"
        studies[label] = MeshStudy.from_pairs(pairs, label)
    return studies


def _gci_reports(studies, cfg: StudyConfig, F_s=None):
    g = cfg.data["gci"]
    F_s = g["safety_factor"] if F_s is None else F_s
    reports = []
    for label, st in studies.items():
        if len(st) < 3:
            continue
        tri = st.triple(g["ratio"]) if len(st) > 3 else st.triple()
        tri.label = label
        reports.append(gci_report(tri, F_s, g["convention"]))
    return reports


def _write_gci(reports, cfg, out, name="gci"):
    rows = [rep.row() + [int(rep.ra_informative)] for rep in reports]
    write_csv(out / f"{name}.csv", GciReport.HEADER + ("Ra_informative",), rows, cfg)


def cmd_gci(cfg: StudyConfig, args):
    out = _out(cfg)
    studies = _studies_from_csv(args.input)
    reports = _gci_reports(studies, cfg, args.safety_factor)
    if not reports:
        raise ValueError(f"{args.input}: no series with three element sizes")
    _write_gci(reports, cfg, out)
    plot_convergence({k: (s.h, s.f) for k, s in studies.items()}, out / "gci.svg",
                     {r.label: r.f_asym for r in reports}, ylabel="f")
    for r in reports:
        print(f"{r.label}: p={r.p:.4f} f_asym={r.f_asym:.4f} GCI12={r.gci12:.4f}% GCI23={r.gci23:.4f}% "
              f"Ra={r.Ra:.5f} ({r.convention})")


def _fit_points(path, cfg, args):
    rows, lines = read_csv(path)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    cols = rows[0].keys()
    E_s = cfg.material().E_s
    if "E_rel" in cols:
        pts = [(float(r["RD"]), float(r["E_rel"])) for r in rows]
    elif "Eeff_MPa" in cols:
        rd_col = "RD_mesh" if args.use_mesh_rd else "RD_target"
        mj = args.mj if args.mj is not None else min(float(r["MJ"]) for r in rows)
        keep = [(r, n) for r, n in zip(rows, lines) if abs(float(r["MJ"]) - mj) < 1e-12]
        finest = defaultdict(lambda: (np.inf, None, None))
        for r, n in keep:
            if args.h is not None and abs(float(r["h"]) - args.h) > 1e-12:
                continue
            if float(r["h"]) < finest[r["RD_target"]][0]:
                finest[r["RD_target"]] = (float(r["h"]), r, n)
        rows = [v[1] for v in finest.values()]
        lines = [v[2] for v in finest.values()]
        pts = [(float(r[rd_col]), float(r["Eeff_MPa"]) / E_s) for r in rows]
    else:
        raise ValueError(f"{path}: expected columns RD,E_rel or a sweep CSV with Eeff_MPa")
    for (rd, e), n in zip(pts, lines):
        if rd <= 0 or e <= 0:
            raise NonPositivePoint(f"{path}: row at line {n} has non-positive point ({rd}, {e})")
    return pts


def cmd_fit(cfg: StudyConfig, args):
    out = _out(cfg)
    pts = _fit_points(args.input, cfg, args)
    fit = fit_gibson_ashby(pts)
    write_csv(out / "gibson_ashby.csv", fit.HEADER, [fit.row()], cfg)
    rd, e = zip(*pts)
    plot_gibson_ashby(rd, e, fit, out / "gibson_ashby.svg")
    print(f"E/E_s = {fit.C1:.4f} RD^{fit.m:.4f}  (R2 {fit.r2:.6f}, {fit.n_points} points)")


def cmd_report(cfg: StudyConfig, args):
    out = _out(cfg)
    studies = _studies_from_csv(args.input)
    reports = _gci_reports(studies, cfg)
    if reports:
        _write_gci(reports, cfg, out)
    err_rows = []
    for label, st in studies.items():
        for (hc, fc), (hf, ff) in zip(zip(st.h, st.f), zip(st.h[1:], st.f[1:])):
            err_rows.append([label, hc, hf, fc, ff, relative_error(ff, fc)])
    write_csv(out / "relative_error.csv", ("label", "h_coarse", "h_fine", "f_coarse", "f_fine", "eps_pct"),
              err_rows, cfg)
    figures = []
    if any(len(s) > 1 for s in studies.values()):
        figures.append(plot_convergence({k: (s.h, s.f) for k, s in studies.items()}, out / "convergence.svg",
                                        {r.label: r.f_asym for r in reports}))
    rows, _ = read_csv(args.input)
    if "MJ" in rows[0]:
        by_h = defaultdict(list)
        for r in rows:
            by_h[(r.get("RD_target", ""), float(r["h"]))].append((float(r["MJ"]), float(r["Eeff_MPa"])))
        for (rd, h), pairs in sorted(by_h.items()):
            if len(pairs) >= 3:
                mj, f = zip(*pairs)
                figures.append(plot_mj_sweep(mj, f, out / f"mj_sweep_h{h:g}.svg".replace("0.", "0p")))
        if len({r.get("RD_target") for r in rows}) >= 2:
            args.mj, args.h, args.use_mesh_rd = None, None, False
            pts = _fit_points(args.input, cfg, args)
            fit = fit_gibson_ashby(pts)
            write_csv(out / "gibson_ashby.csv", fit.HEADER, [fit.row()], cfg)
            rd, e = zip(*pts)
            figures.append(plot_gibson_ashby(rd, e, fit, out / "gibson_ashby.svg"))
    for r in reports:
        print(f"{r.label}: p={r.p:.4f} f_asym={r.f_asym:.3f} GCI12={r.gci12:.3f}% GCI23={r.gci23:.3f}%")
    for f in figures:
        print(f"wrote {f}")


COMMANDS = {"gen": cmd_gen, "mesh": cmd_mesh, "solve": cmd_solve, "sweep": cmd_sweep, "gci": cmd_gci,
            "fit": cmd_fit, "report": cmd_report}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON study configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="parallel sweep jobs")
    common.add_argument("--convention", choices=("paper", "roache"), help="GCI error denominator")
    common.add_argument("--seed", type=int, help="Monte-Carlo seed")

    parser = argparse.ArgumentParser(prog="tpmsfem", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="surface STL and calibration table")
    for name in ("mesh", "solve"):
        p = sub.add_parser(name, parents=[common], help=f"{name} one (h, MJ) point")
        p.add_argument("--h", type=float, help="element size (mm); default finest configured")
        p.add_argument("--mj", type=float, help="minimum Jacobian; default last configured")
    sub.add_parser("sweep", parents=[common], help="run all configured points")
    p = sub.add_parser("gci", parents=[common], help="grid convergence index")
    p.add_argument("input", help="CSV with h,f columns or a sweep CSV")
    p.add_argument("--safety-factor", type=float, help="F_s (default from config, 1.25)")
    p = sub.add_parser("fit", parents=[common], help="Gibson-Ashby fit")
    p.add_argument("input", help="CSV with RD,E_rel columns or a sweep CSV")
    p.add_argument("--mj", type=float, help="MJ rows to use from a sweep CSV (default lowest)")
    p.add_argument("--h", type=float, help="element size rows to use (default finest per RD)")
    p.add_argument("--use-mesh-rd", action="store_true", help="fit against meshed rather than target RD")
    p = sub.add_parser("report", parents=[common], help="tables and figures for a sweep CSV")
    p.add_argument("input", help="sweep CSV")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"tpmsfem {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except StageFailure as exc:
        print(f"tpmsfem {args.command}: {exc}", file=sys.stderr)
        return 1
    except (TpmsError, ValueError, OSError, RuntimeError) as exc:
        print(f"tpmsfem {args.command}: stage '{args.command}' failed: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
