"""Declarative study configuration and the mesh -> solve pipeline.

A study is configured by a JSON document (see ``README.md``). Physical keys
carry unit suffixes. Every quantity has a default, so ``{}`` is a valid
configuration describing the desk-scale RD 0.45 Gyroid study.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, StageFailure
from .fem import CompressionSetup, MaterialSpec, compression_test
from .geometry import DEFAULT_SEED, ImplicitLattice, build_calibration, calibrate_offset, graded_lattice
from .mesher import (VoxelGridSpec, classify_voxels, build_voxel_mesh, conform_to_surface, filter_components,
                     quality_report)

ENV_PREFIX = "TPMSFEM_"

DEFAULTS = {
    "lattice": {
        "kind": "gyroid",
        "topology": "network",
        "cell_size_mm": 5.0,
        "relative_density": 0.45,
        "graded": None,  # {"rd_top": 0.35, "rd_bottom": 0.55}
    },
    "cells": 2,
    "element_sizes_mm": [0.5, 0.25, 0.125],
    "mj_values": [1.0, 0.3],
    "material": {"E_s_MPa": 121000.0, "nu": 0.34, "rho_s_kg_m3": 4400.0, "sigma_y_MPa": 896.0,
                 "E_t_MPa": 1850.0},
    "delta_mm": 0.05,
    "solver": {"rel_tol": 1e-8, "max_iter": None, "preconditioner": "amg"},
    "mesher": {"rule": "intersect", "theta": 0.5, "subsamples": 3, "max_passes": 3, "keep": "spanning"},
    "calibration": {"c_min": -1.25, "c_max": 1.25, "samples": 26, "grid": 64, "tolerance": 1e-4},
    "surface": {"resolution": 64, "stl_mode": "binary"},
    "gci": {"convention": "paper", "safety_factor": 1.25, "ratio": 2.0},
    "output_dir": "out",
    "jobs": 1,
    "seed": DEFAULT_SEED,
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            for sub in value:
                if sub not in base[key]:
                    raise ConfigError(f"unknown configuration key {key}.{sub}")
            out[key].update(value)
        else:
            out[key] = value
    return out


@dataclass
class StudyConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.data = _merge(DEFAULTS, self.data)
        self.validate()

    # -- construction -------------------------------------------------------
    @classmethod
    def load(cls, path=None, overrides=None, environ=None):
        """Read a JSON config, then apply ``TPMSFEM_*`` environment variables,
        then explicit ``overrides`` (highest precedence)."""
        data = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        data = _merge(DEFAULTS, data)
        env = os.environ if environ is None else environ
        for key, conv in (("OUT", str), ("JOBS", int), ("SEED", int)):
            if ENV_PREFIX + key in env:
                name = {"OUT": "output_dir", "JOBS": "jobs", "SEED": "seed"}[key]
                data[name] = conv(env[ENV_PREFIX + key])
        if ENV_PREFIX + "CONVENTION" in env:
            data["gci"]["convention"] = env[ENV_PREFIX + "CONVENTION"]
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if "." in key:
                top, sub = key.split(".", 1)
                data[top][sub] = value
            else:
                data[key] = value
        return cls(data)

    def validate(self):
        d = self.data
        lat = d["lattice"]
        if lat["cell_size_mm"] <= 0:
            raise ConfigError("cell_size_mm must be positive")
        if int(d["cells"]) < 1:
            raise ConfigError("cells must be at least 1")
        sizes = d["element_sizes_mm"]
        if not sizes:
            raise ConfigError("element_sizes_mm must list at least one element size")
        edge = self.domain_edge
        for h in sizes:
            if h <= 0 or abs(edge / h - round(edge / h)) > 1e-9 * edge / h:
                raise ConfigError(f"element size {h} mm does not divide the domain edge {edge} mm")
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError("element_sizes_mm must be strictly decreasing")
        mjs = d["mj_values"]
        if not mjs or any(not 0.0 < v <= 1.0 for v in mjs):
            raise ConfigError("mj_values must be a nonempty list of values in (0, 1]")
        rds = self.relative_densities
        if lat["graded"] is None and any(not 0.0 < r < 1.0 for r in rds):
            raise ConfigError("relative_density values must lie in (0, 1)")
        if lat["graded"] is not None:
            g = lat["graded"]
            if set(g) != {"rd_top", "rd_bottom"}:
                raise ConfigError("graded lattice needs exactly rd_top and rd_bottom")
        if d["delta_mm"] <= 0:
            raise ConfigError("delta_mm must be positive")
        if d["gci"]["convention"] not in ("paper", "roache"):
            raise ConfigError("gci.convention must be 'paper' or 'roache'")
        if int(d["jobs"]) < 1:
            raise ConfigError("jobs must be at least 1")

    # -- derived quantities --------------------------------------------------
    @property
    def domain_edge(self):
        return float(self.data["lattice"]["cell_size_mm"]) * int(self.data["cells"])

    @property
    def bounds(self):
        e = self.domain_edge
        return (0.0, 0.0, 0.0), (e, e, e)

    @property
    def relative_densities(self):
        rd = self.data["lattice"]["relative_density"]
        return [float(v) for v in rd] if isinstance(rd, (list, tuple)) else [float(rd)]

    @property
    def graded(self):
        return self.data["lattice"]["graded"] is not None

    @property
    def element_sizes(self):
        return [float(h) for h in self.data["element_sizes_mm"]]

    @property
    def mj_values(self):
        return [float(v) for v in self.data["mj_values"]]

    @property
    def output_dir(self):
        return Path(self.data["output_dir"])

    @property
    def jobs(self):
        return int(self.data["jobs"])

    def material(self):
        m = self.data["material"]
        return MaterialSpec(m["E_s_MPa"], m["nu"], m["rho_s_kg_m3"], m["sigma_y_MPa"], m["E_t_MPa"])

    def setup(self):
        return CompressionSetup(float(self.data["delta_mm"]))

    def digest(self):
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def calibration(self):
        c = self.data["calibration"]
        lat = self.data["lattice"]
        return _calibration(lat["topology"], lat["kind"], c["c_min"], c["c_max"], c["samples"], c["grid"])

    def lattice(self, rd=None) -> ImplicitLattice:
        """Calibrated lattice for one target density (or the graded lattice)."""
        lat = self.data["lattice"]
        cal = self.calibration()
        if self.graded:
            g = lat["graded"]
            lo, hi = self.bounds
            return graded_lattice(g["rd_top"], g["rd_bottom"], (lo[2], hi[2]), cal, lat["cell_size_mm"])
        rd = self.relative_densities[0] if rd is None else rd
        cal.offset_for(rd)  # range guard
        tol = self.data["calibration"]["tolerance"]
        c = _offset(rd, tol, lat["topology"], lat["kind"], self.data["calibration"]["grid"])
        return ImplicitLattice(lat["cell_size_mm"], c, lat["topology"], lat["kind"])

    def grid_spec(self, h):
        m = self.data["mesher"]
        lo, hi = self.bounds
        return VoxelGridSpec(h, lo, hi, m["rule"], m["theta"], m["subsamples"])


@lru_cache(maxsize=8)
def _calibration(topology, kind, c_min, c_max, samples, grid):
    return build_calibration(topology, kind, c_min, c_max, samples, grid)


@lru_cache(maxsize=32)
def _offset(rd, tol, topology, kind, grid):
    return calibrate_offset(rd, tol, topology, kind, grid).offset


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

RESULT_HEADER = ("h", "MJ", "elements", "RD_mesh", "F_N", "sigma_MPa", "Eeff_MPa", "iters", "residual",
                 "RD_target", "elements_per_cell", "min_SJ")
MESH_HEADER = ("h", "MJ", "elements", "elements_per_cell", "min_SJ", "RD_mesh") + tuple(
    f"sj_bin{i}" for i in range(10))


@dataclass
class CaseResult:
    h: float
    mj: float
    rd_target: float
    report: object
    compression: object = None
    mesh_seconds: float = 0.0
    solve_seconds: float = 0.0

    def row(self):
        c = self.compression
        q = self.report
        return [self.h, self.mj, q.element_count, q.relative_density, c.F, c.sigma, c.E_eff, c.iterations,
                c.residual, self.rd_target, q.elements_per_cell, q.min_scaled_jacobian]

    def mesh_row(self):
        q = self.report
        return [self.h, self.mj, q.element_count, q.elements_per_cell, q.min_scaled_jacobian,
                q.relative_density] + [int(v) for v in q.histogram]


def build_mesh(config: StudyConfig, h, mj, rd=None, lattice=None):
    """classify -> build -> conform (MJ < 1) -> keep spanning components."""
    lattice = lattice or config.lattice(rd)
    spec = config.grid_spec(h)
    mesh = build_voxel_mesh(classify_voxels(lattice, spec), h, spec.lo)
    if mj < 1.0:
        mesh = conform_to_surface(mesh, lattice, mj, max_passes=config.data["mesher"]["max_passes"])
    return filter_components(mesh, config.data["mesher"]["keep"])


def run_case(config: StudyConfig, h, mj, rd=None, solve=True, keep_fields=False):
    """Mesh and (optionally) solve one sweep point.

    Any failure is re-raised as :class:`StageFailure` naming the stage and
    the ``(h, MJ)`` pair.
    """
    t0 = time.perf_counter()
    try:
        lattice = config.lattice(rd)
    except Exception as exc:
        raise StageFailure("geometry", h, mj, exc) from exc
    try:
        mesh = build_mesh(config, h, mj, lattice=lattice)
        report = quality_report(mesh, int(config.data["cells"]))
    except Exception as exc:
        raise StageFailure("mesh", h, mj, exc) from exc
    t1 = time.perf_counter()
    result = CaseResult(h, mj, _design_density(config, rd), report, mesh_seconds=t1 - t0)
    if solve:
        s = config.data["solver"]
        try:
            comp = compression_test(mesh, config.material(), config.setup(), rel_tol=s["rel_tol"],
                                    max_iter=s["max_iter"], preconditioner=s["preconditioner"])
        except Exception as exc:
            raise StageFailure("solve", h, mj, exc) from exc
        result.solve_seconds = time.perf_counter() - t1
        if not keep_fields:
            comp.u = None
        result.compression = comp
    if keep_fields:
        result.mesh = mesh
    return result


def _design_density(config, rd):
    if config.graded:
        g = config.data["lattice"]["graded"]
        return 0.5 * (g["rd_top"] + g["rd_bottom"])
    return config.relative_densities[0] if rd is None else rd


def sweep_points(config: StudyConfig):
    """All (RD, h, MJ) jobs in output order."""
    rds = [None] if config.graded else config.relative_densities
    return [(rd, h, mj) for rd in rds for h in config.element_sizes for mj in config.mj_values]


def _run_point(args):
    data, rd, h, mj = args
    return run_case(StudyConfig(data), h, mj, rd)


def run_sweep(config: StudyConfig, jobs=None, progress=None):
    """Run every sweep point; results come back in :func:`sweep_points` order
    regardless of ``jobs``."""
    points = sweep_points(config)
    jobs = config.jobs if jobs is None else jobs
    if jobs <= 1:
        results = []
        for rd, h, mj in points:
            results.append(run_case(config, h, mj, rd))
            if progress:
                progress(results[-1])
        return results
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(_run_point, [(config.data, rd, h, mj) for rd, h, mj in points]))
    if progress:
        for r in results:
            progress(r)
    return results


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows, config: StudyConfig = None):
    """CSV with a provenance comment line, then header and rows."""
    buf = io.StringIO()
    digest = config.digest() if config is not None else "none"
    buf.write(f"# tpmsfem {__version__} config_sha256={digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_csv(path):
    """Rows of a (possibly commented) CSV file as dicts, plus 1-based line numbers."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    numbered = [(i + 1, line) for i, line in enumerate(lines) if line.strip() and not line.startswith("#")]
    if not numbered:
        return [], []
    reader = csv.DictReader([line for _, line in numbered])
    rows = list(reader)
    return rows, [n for n, _ in numbered[1:]]
