"""End-to-end acceptance checks.

Each test records one PASS/FAIL line per criterion (printed in the terminal
summary) and then asserts. Heavy FE runs are shared through a session cache
and use the AMG-preconditioned solver.
"""

import time

import numpy as np
import pytest

from tpmsfem.convergence import MeshStudy, fit_gibson_ashby, gci_report
from tpmsfem.fem import CompressionSetup, MaterialSpec, assemble, compression_test, hex8_stiffness, pcg
from tpmsfem.geometry import (ImplicitLattice, calibrate_offset, eval_field, eval_gradient, extract_surface,
                              solid_fraction)
from tpmsfem.mesher import CORNER_NEIGHBOURS, CORNER_OFFSETS, HexMesh, build_voxel_mesh, scaled_jacobians
from tpmsfem.study import StudyConfig, run_case

H = (0.5, 0.25, 0.125)
MJ_SWEEP = (1.0, 0.8, 0.6, 0.45, 0.3, 0.2)
GRADED = {"graded": {"rd_top": 0.35, "rd_bottom": 0.55}}


def _independent_min_sj(coords):
    """Scaled Jacobian recomputed from determinants of the corner edge frames."""
    e = coords[:, CORNER_NEIGHBOURS, :] - coords[:, :, None, :]
    det = np.linalg.det(e)
    return (det / np.linalg.norm(e, axis=-1).prod(axis=-1)).min()


def _is_axis_aligned_cube_mesh(mesh):
    x = mesh.element_coords()
    return bool(np.all(x - x[:, :1, :] == mesh.h * CORNER_OFFSETS))


class StudyCache:
    def __init__(self):
        self.results = {}

    def get(self, lattice, h, mj):
        """``lattice`` is an RD float or ``"graded"``."""
        key = (lattice, h, mj)
        if key not in self.results:
            lat = GRADED if lattice == "graded" else {"relative_density": lattice}
            cfg = StudyConfig({"lattice": lat, "solver": {"preconditioner": "amg"}})
            t0 = time.perf_counter()
            res = run_case(cfg, h, mj, keep_fields=True)
            mesh = res.mesh
            res.independent_min_sj = _independent_min_sj(mesh.element_coords())
            res.library_sj_all_one = bool(np.all(scaled_jacobians(mesh.element_coords()) == 1.0))
            res.cube_mesh = _is_axis_aligned_cube_mesh(mesh)
            del res.mesh
            res.compression.u = None
            res.seconds = time.perf_counter() - t0
            self.results[key] = res
        return self.results[key]

    def series(self, lattice, mj, hs=H):
        return [self.get(lattice, h, mj) for h in hs]


@pytest.fixture(scope="session")
def cache():
    return StudyCache()


def _gci(results, convention="paper"):
    return gci_report(MeshStudy([r.h for r in results], [r.compression.E_eff for r in results]),
                      convention=convention)


# ---------------------------------------------------------------------------

def test_criterion_1_gci_reproduction(record):
    t0 = time.perf_counter()
    h = [0.4, 0.2, 0.1]
    voxel = gci_report(MeshStudy(h, [42.756, 29.986, 25.004]), 1.25, "paper")
    two = gci_report(MeshStudy(h, [27.553, 21.093, 20.137]), 1.25, "paper")
    graded_voxel = gci_report(MeshStudy(h, [41.40, 27.53, 23.25]), 1.25, "paper")
    graded_two = gci_report(MeshStudy(h, [36.94, 19.52, 19.24]), 1.25, "paper")
    elapsed = time.perf_counter() - t0
    checks = [
        abs(voxel.p - 1.358) <= 1e-3, abs(two.p - 2.756) <= 1e-3,
        abs(voxel.f_asym - 21.817) <= 5e-3, abs(two.f_asym - 19.97) <= 5e-3,
        abs(voxel.gci12 - 15.932) <= 5e-3, abs(two.gci12 - 1.031) <= 5e-3,
        abs(voxel.gci23 - 40.838) <= 1e-2, abs(two.gci23 - 6.965) <= 1e-2,
        abs(voxel.Ra - 1) <= 1e-4, abs(two.Ra - 1) <= 1e-4,
        abs(graded_voxel.p - 1.696) <= 0.05, abs(graded_voxel.f_asym - 21.34) <= 0.05,
        abs(graded_voxel.gci12 - 10.27) <= 0.05, abs(graded_voxel.gci23 - 33.28) <= 0.05,
        abs(graded_two.p - 5.986) <= 0.05,
        elapsed < 1.0,
    ]
    detail = (f"p {voxel.p:.4f}/{two.p:.4f}, f_asym {voxel.f_asym:.3f}/{two.f_asym:.3f}, "
              f"GCI12 {voxel.gci12:.3f}/{two.gci12:.3f}%, GCI23 {voxel.gci23:.3f}/{two.gci23:.3f}%, "
              f"Ra {voxel.Ra:.6f}/{two.Ra:.6f}; graded voxel p {graded_voxel.p:.3f} f_asym "
              f"{graded_voxel.f_asym:.2f} GCI {graded_voxel.gci12:.2f}/{graded_voxel.gci23:.2f}%; "
              f"graded two-param p {graded_two.p:.3f}; {elapsed * 1e3:.1f} ms")
    assert record("1", all(checks), detail), detail


def test_criterion_2_solid_block(record):
    t0 = time.perf_counter()
    mesh = build_voxel_mesh(np.ones((20, 20, 20), bool), 0.5)
    res = compression_test(mesh, MaterialSpec(), CompressionSetup(0.05))
    elapsed = time.perf_counter() - t0
    err = abs(res.E_eff - 121000.0) / 121000.0
    ok = err < 1e-3 and res.balance < 1e-6 and elapsed < 60
    detail = f"E_eff {res.E_eff:.3f} MPa (rel err {err:.2e}), balance {res.balance:.2e}, {elapsed:.1f} s"
    assert record("2", ok, detail), detail


def test_criterion_3_convergence_structure(cache, record):
    vox = cache.series(0.45, 1.0)
    two = cache.series(0.45, 0.3)
    Ev = [r.compression.E_eff for r in vox]
    Et = [r.compression.E_eff for r in two]
    g_v, g_t = _gci(vox), _gci(two)
    a = all(np.diff(Ev) < 0) and all(np.diff(Et) < 0)
    b = all(x > y for x, y in zip(Ev, Et))
    c = g_t.p > g_v.p
    d = g_t.gci12 < g_v.gci12
    e = abs(g_v.f_asym - g_t.f_asym) / min(g_v.f_asym, g_t.f_asym) < 0.10
    seconds = sum(r.seconds for r in vox + two)
    detail = (f"E(MJ1) {[round(v) for v in Ev]}, E(MJ0.3) {[round(v) for v in Et]} MPa; "
              f"(a) {a} (b) {b} (c) p {g_t.p:.3f} > {g_v.p:.3f} {c} "
              f"(d) GCI12 {g_t.gci12:.2f}% < {g_v.gci12:.2f}% {d} "
              f"(e) asymptotes {g_v.f_asym:.0f}/{g_t.f_asym:.0f} {e}; {seconds:.0f} s")
    assert record("3", a and b and c and d and e and seconds < 1800, detail), detail


def test_criterion_4_mj_stabilisation(cache, record):
    runs = {mj: cache.get(0.45, 0.25, mj) for mj in MJ_SWEEP}
    E = {mj: r.compression.E_eff for mj, r in runs.items()}
    low = abs(E[0.2] - E[0.3]) / E[0.3]
    high = abs(E[1.0] - E[0.3]) / E[0.3]
    seconds = sum(r.seconds for r in runs.values())
    detail = (f"E {', '.join(f'{mj:g}:{v:.0f}' for mj, v in E.items())} MPa; "
              f"|E(.2)-E(.3)| {low:.2%}, |E(1)-E(.3)| {high:.2%}; {seconds:.0f} s")
    assert record("4", low < 0.02 and high > 0.05 and seconds < 1200, detail), detail


def test_criterion_6_density_fidelity(cache, record):
    errs = {}
    for target in (0.1, 0.2, 0.3, 0.35, 0.45, 0.55):
        c, _ = calibrate_offset(target)
        mc = solid_fraction(ImplicitLattice(1.0, c), sampler="mc", samples=1_000_000)
        errs[target] = abs(mc - target)
    closer = {}
    for h in H:
        rv = cache.get(0.45, h, 1.0).report.relative_density
        rc = cache.get(0.45, h, 0.3).report.relative_density
        closer[h] = (abs(rc - 0.45) < abs(rv - 0.45), rv, rc)
    ok = max(errs.values()) < 0.005 and all(v[0] for v in closer.values())
    detail = (f"max |RD_mc - target| {max(errs.values()):.4f}; RD voxel/conformed "
              + ", ".join(f"h={h:g}: {v[1]:.3f}/{v[2]:.3f}" for h, v in closer.items()))
    assert record("6", ok, detail), detail


def test_criterion_7_gibson_ashby(cache, record):
    rd = np.array([0.1, 0.2, 0.3, 0.45])
    exact = [fit_gibson_ashby(np.column_stack([rd, C1 * rd ** m])) for C1, m in ((1.11, 1.96), (1.06, 2.24))]
    ok_exact = all(abs(f.r2 - 1) < 1e-12 for f in exact) and \
        abs(exact[0].C1 - 1.11) < 1e-12 and abs(exact[0].m - 1.96) < 1e-12 and \
        abs(exact[1].C1 - 1.06) < 1e-12 and abs(exact[1].m - 2.24) < 1e-12
    runs = [cache.get(r, 0.25, 0.3) for r in (0.2, 0.3, 0.45)]
    E_s = MaterialSpec().E_s
    fit = fit_gibson_ashby([(r.rd_target, r.compression.E_eff / E_s) for r in runs])
    seconds = sum(r.seconds for r in runs)
    ok = ok_exact and 1.7 <= fit.m <= 2.5 and fit.r2 > 0.99 and seconds < 1800
    detail = (f"synthetic exact {ok_exact}; pipeline C1 {fit.C1:.3f}, m {fit.m:.3f}, R2 {fit.r2:.5f}; "
              f"{seconds:.0f} s")
    assert record("7", ok, detail), detail


def test_criterion_8_graded(cache, record):
    graded = cache.series("graded", 0.3)
    uniform = cache.series(0.45, 0.3)
    g, u = _gci(graded), _gci(uniform)
    seconds = sum(r.seconds for r in graded) + sum(cache.get("graded", h, 1.0).seconds for h in H)
    gv, uv = _gci(cache.series("graded", 1.0)), _gci(cache.series(0.45, 1.0))
    ok = g.f_asym < u.f_asym and g.gci12 <= u.gci12 and seconds < 2700
    detail = (f"two-parameter asymptote graded {g.f_asym:.0f} < uniform {u.f_asym:.0f} MPa, "
              f"GCI12 graded {g.gci12:.3f}% <= uniform {u.gci12:.3f}%; "
              f"voxel asymptotes (informative) graded {gv.f_asym:.0f} / uniform {uv.f_asym:.0f}; {seconds:.0f} s")
    assert record("8", ok, detail), detail


def test_criterion_9_kernel_suite(record):
    t0 = time.perf_counter()
    mat = MaterialSpec()
    # patch test: linear field on the boundary of a distorted 2x2x2 patch
    base = build_voxel_mesh(np.ones((2, 2, 2), bool), 1.0)
    interior = np.all(np.abs(base.nodes - 1.0) < 1e-12, axis=1)
    nodes = base.nodes.copy()
    nodes[interior] += [0.21, -0.13, 0.17]
    mesh = HexMesh(nodes, base.elements, 1.0, base.bounds)
    K = assemble(mesh, mat).tocsr()
    G = np.array([[1e-3, 2e-4, -5e-4], [3e-4, -2e-3, 1e-4], [-1e-4, 4e-4, 1.5e-3]])
    exact = (mesh.nodes @ G.T).ravel()
    free = np.repeat(interior, 3)
    u = exact.copy()
    u[free] = 0.0
    sol = pcg(K[free][:, free], -(K @ u)[free], rel_tol=1e-12)
    patch_err = np.abs(sol.u - exact[free]).max() / np.abs(exact).max()
    ok_patch = patch_err < 1e-10
    # rigid-body null space of a distorted element
    x = CORNER_OFFSETS + np.random.default_rng(0).uniform(-0.15, 0.15, (8, 3))
    w = np.linalg.eigvalsh(hex8_stiffness(x, mat))
    n_zero = int(np.sum(np.abs(w) < 1e-10 * w.max()))
    # field gradient vs central differences
    lat = ImplicitLattice(5.0, 0.3)
    pts = np.random.default_rng(1).uniform(-10, 10, (50, 3))
    fd_err = 0.0
    for p in pts:
        fd = np.array([(eval_field(lat, p + e) - eval_field(lat, p - e)) / 2e-6 for e in np.eye(3) * 1e-6])
        fd_err = max(fd_err, np.abs(fd - eval_gradient(lat, p)).max())
    # exact h^q series
    hs = np.array([0.4, 0.2, 0.1])
    rep = gci_report(MeshStudy(hs, 7.0 + 3.0 * hs ** 1.7))
    series_err = max(abs(rep.p - 1.7) / 1.7, abs(rep.f_asym - 7.0) / 7.0)
    # watertight STL and enclosed volume vs Monte-Carlo
    c, _ = calibrate_offset(0.45)
    lat = ImplicitLattice(5.0, c)
    surf = extract_surface(lat, (0, 0, 0), (10, 10, 10), 64)
    mc = solid_fraction(lat, ((0, 0, 0), (10, 10, 10)), sampler="mc", samples=1_000_000)
    vol_err = abs(surf.volume() / 1000.0 - mc) / mc
    elapsed = time.perf_counter() - t0
    ok = (ok_patch and n_zero == 6 and fd_err < 1e-6 and series_err < 1e-10 and surf.is_watertight()
          and vol_err < 0.01 and elapsed < 120)
    detail = (f"patch err {patch_err:.1e}, zero eigenvalues {n_zero}, FD gradient err {fd_err:.1e}, "
              f"series err {series_err:.1e}, watertight {surf.is_watertight()}, STL volume vs MC "
              f"{vol_err:.2%}; {elapsed:.1f} s")
    assert record("9", ok, detail), detail


def test_criterion_5_mesh_quality(cache, record):
    # runs last so every mesh built by the other criteria is audited
    conformed = [r for (lat, h, mj), r in cache.results.items() if mj == 0.3]
    voxel = [r for (lat, h, mj), r in cache.results.items() if mj == 1.0]
    if not conformed:
        conformed = cache.series(0.45, 0.3)
    if not voxel:
        voxel = cache.series(0.45, 1.0)
    min_sj = min(r.independent_min_sj for r in conformed)
    ok_conf = min_sj >= 0.3 - 1e-9 and all(r.report.min_scaled_jacobian >= 0.3 - 1e-9 for r in conformed)
    ok_vox = all(r.library_sj_all_one and r.cube_mesh for r in voxel)
    detail = (f"{len(conformed)} conformed meshes, min SJ {min_sj:.6f}; "
              f"{len(voxel)} MJ=1 meshes all SJ == 1: {ok_vox}")
    assert record("5", ok_conf and ok_vox, detail), detail
