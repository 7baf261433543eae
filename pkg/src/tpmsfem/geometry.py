"""Implicit TPMS lattices: field evaluation, density calibration, grading and
surface extraction.

Coordinates are in mm. A lattice is solid where its *level function* is
non-negative:

* network topology: ``phi(x) - C(x) >= 0``
* sheet topology:   ``C(x) - |phi(x)| >= 0``

where ``phi`` is the periodic TPMS field and ``C`` the (possibly graded)
level offset.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Union

import numpy as np

from .errors import CalibrationRangeExceeded, EmptySurface, NonMonotoneBracket

TWO_PI = 2.0 * np.pi

#: Seed used by the Monte-Carlo sampler when the caller does not pass one.
DEFAULT_SEED = 20250101
#: Monte-Carlo samples are drawn in fixed blocks; block ``b`` always comes from
#: ``Philox(key=seed).jumped(b)`` so the stream does not depend on how blocks
#: are distributed over workers.
MC_BLOCK = 1 << 16


# ---------------------------------------------------------------------------
# TPMS fields (extension seam: add entries to FIELDS)
# ---------------------------------------------------------------------------

def _gyroid(X, Y, Z):
    return np.sin(X) * np.cos(Y) + np.sin(Y) * np.cos(Z) + np.sin(Z) * np.cos(X)


def _gyroid_grad(X, Y, Z):
    sx, cx = np.sin(X), np.cos(X)
    sy, cy = np.sin(Y), np.cos(Y)
    sz, cz = np.sin(Z), np.cos(Z)
    return (cx * cy - sz * sx, cy * cz - sx * sy, cz * cx - sy * sz)


FIELDS = {"gyroid": (_gyroid, _gyroid_grad)}
#: Range of each field over space, used to bracket the offset search.
FIELD_RANGE = {"gyroid": (-1.5, 1.5)}

Offset = Union[float, Callable[[np.ndarray], np.ndarray]]


def _as_points(points):
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1] != 3:
        raise ValueError(f"points must have a trailing dimension of 3, got {pts.shape}")
    return pts


@dataclass(frozen=True)
class ImplicitLattice:
    """A TPMS lattice described by an implicit field and a level offset.

    Parameters
    ----------
    cell_size : float or 3-tuple
        Unit-cell edge lengths (mm) along x, y, z.
    offset : float or callable
        Constant level ``C`` or a function mapping an ``(..., 3)`` array of
        points to offsets. Callables may expose a ``gradient(points)`` method;
        otherwise offset gradients are taken by central differences.
    topology : {"network", "sheet"}
    kind : str
        Key into :data:`FIELDS`.
    """

    cell_size: tuple = (5.0, 5.0, 5.0)
    offset: Offset = 0.0
    topology: str = "network"
    kind: str = "gyroid"

    def __post_init__(self):
        cs = self.cell_size
        if np.isscalar(cs):
            cs = (float(cs),) * 3
        cs = tuple(float(c) for c in cs)
        if len(cs) != 3 or min(cs) <= 0:
            raise ValueError(f"cell sizes must be three positive lengths, got {self.cell_size}")
        object.__setattr__(self, "cell_size", cs)
        if self.topology not in ("network", "sheet"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.kind not in FIELDS:
            raise ValueError(f"unknown field kind {self.kind!r}; available: {sorted(FIELDS)}")
        if not callable(self.offset):
            object.__setattr__(self, "offset", float(self.offset))
            if self.topology == "sheet" and self.offset < 0:
                raise ValueError("sheet topology requires C >= 0")

    @property
    def graded(self) -> bool:
        return callable(self.offset)

    def _scaled(self, pts):
        L = self.cell_size
        return TWO_PI * pts[..., 0] / L[0], TWO_PI * pts[..., 1] / L[1], TWO_PI * pts[..., 2] / L[2]

    def field(self, points) -> np.ndarray:
        pts = _as_points(points)
        return FIELDS[self.kind][0](*self._scaled(pts))

    def gradient(self, points) -> np.ndarray:
        """Analytic gradient of the field in mm^-1, shape ``(..., 3)``."""
        pts = _as_points(points)
        gx, gy, gz = FIELDS[self.kind][1](*self._scaled(pts))
        L = self.cell_size
        return np.stack([gx * (TWO_PI / L[0]), gy * (TWO_PI / L[1]), gz * (TWO_PI / L[2])], axis=-1)

    def offset_at(self, points) -> np.ndarray:
        pts = _as_points(points)
        if callable(self.offset):
            return np.asarray(self.offset(pts), dtype=float)
        return np.full(pts.shape[:-1], self.offset)

    def offset_gradient(self, points) -> np.ndarray:
        pts = _as_points(points)
        if not callable(self.offset):
            return np.zeros(pts.shape)
        grad = getattr(self.offset, "gradient", None)
        if grad is not None:
            return np.asarray(grad(pts), dtype=float)
        step = 1e-6
        out = np.empty(pts.shape)
        for axis in range(3):
            d = np.zeros(3)
            d[axis] = step
            out[..., axis] = (self.offset(pts + d) - self.offset(pts - d)) / (2 * step)
        return out

    def level(self, points) -> np.ndarray:
        """Signed solid indicator: ``>= 0`` inside the solid."""
        pts = _as_points(points)
        phi = self.field(pts)
        c = self.offset_at(pts)
        if self.topology == "network":
            return phi - c
        return c - np.abs(phi)

    def level_gradient(self, points) -> np.ndarray:
        pts = _as_points(points)
        g = self.gradient(pts)
        gc = self.offset_gradient(pts)
        if self.topology == "network":
            return g - gc
        sign = np.sign(self.field(pts))[..., None]
        return gc - sign * g

    def is_solid(self, points) -> np.ndarray:
        return self.level(points) >= 0.0

    def unit_cell(self):
        return np.zeros(3), np.asarray(self.cell_size)


def eval_field(lattice: ImplicitLattice, point):
    """Field value at one point (float) or at an array of points."""
    val = lattice.field(point)
    return float(val) if np.ndim(val) == 0 else val


def eval_gradient(lattice: ImplicitLattice, point) -> np.ndarray:
    return lattice.gradient(point)


# ---------------------------------------------------------------------------
# Relative density
# ---------------------------------------------------------------------------

def _region(lattice, region):
    if region is None:
        return lattice.unit_cell()
    lo, hi = (np.asarray(r, dtype=float) for r in region)
    if np.any(hi <= lo):
        raise ValueError(f"region must be nonempty, got lo={lo} hi={hi}")
    return lo, hi


def solid_fraction(lattice, region=None, sampler="grid", n=64, samples=1_000_000, seed=DEFAULT_SEED):
    """Fraction of sample points inside the solid.

    ``sampler="grid"`` evaluates ``n**3`` cell-centred points over the region;
    ``sampler="mc"`` draws ``samples`` uniform points from the counter-based
    stream described at :data:`MC_BLOCK`.
    """
    lo, hi = _region(lattice, region)
    if sampler == "grid":
        if n ** 3 < 1000:
            raise ValueError("grid sampler needs at least 1000 points (n >= 10)")
        axes = [lo[i] + (np.arange(n) + 0.5) * (hi[i] - lo[i]) / n for i in range(3)]
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        count = 0
        for z in axes[2]:
            pts = np.stack([X, Y, np.full_like(X, z)], axis=-1)
            count += int(np.count_nonzero(lattice.is_solid(pts)))
        return count / n ** 3
    if sampler == "mc":
        if samples < 1000:
            raise ValueError("Monte-Carlo sampler needs at least 1000 samples")
        return _mc_count(lattice, lo, hi, samples, seed) / samples
    raise ValueError(f"unknown sampler {sampler!r}")


def mc_block_points(seed, block, size, lo, hi):
    rng = np.random.Generator(np.random.Philox(key=seed).jumped(block))
    return lo + rng.random((size, 3)) * (hi - lo)


def _mc_count(lattice, lo, hi, samples, seed):
    count = 0
    n_blocks = -(-samples // MC_BLOCK)
    for b in range(n_blocks):
        size = min(MC_BLOCK, samples - b * MC_BLOCK)
        count += int(np.count_nonzero(lattice.is_solid(mc_block_points(seed, b, size, lo, hi))))
    return count


class Calibrated(NamedTuple):
    offset: float
    relative_density: float


def calibrate_offset(target, tolerance=1e-4, topology="network", kind="gyroid", n=64, max_iter=200):
    """Bisect the level offset ``C`` until the unit-cell relative density
    (cell-centred ``n**3`` grid) is within ``tolerance`` of ``target``.

    Returns ``(offset, relative_density)``.
    """
    if not 0.0 < target < 1.0:
        raise ValueError(f"target relative density must lie in (0, 1), got {target}")
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    fmin, fmax = FIELD_RANGE[kind]
    lo, hi = (fmin, fmax) if topology == "network" else (0.0, max(abs(fmin), abs(fmax)))

    def rd(c):
        return solid_fraction(ImplicitLattice((1.0, 1.0, 1.0), c, topology, kind), sampler="grid", n=n)

    rd_lo, rd_hi = rd(lo), rd(hi)
    if not min(rd_lo, rd_hi) <= target <= max(rd_lo, rd_hi):
        raise NonMonotoneBracket(
            f"offsets [{lo}, {hi}] give densities [{rd_lo:.4f}, {rd_hi:.4f}] which do not straddle {target}"
        )
    decreasing = rd_lo > rd_hi
    c, value = 0.5 * (lo + hi), None
    for _ in range(max_iter):
        c = 0.5 * (lo + hi)
        value = rd(c)
        if abs(value - target) < tolerance:
            break
        if (value > target) == decreasing:
            lo = c
        else:
            hi = c
    return Calibrated(c, value)


@dataclass(frozen=True)
class DensityCalibration:
    """Piecewise-linear table relating level offset to relative density."""

    offsets: np.ndarray
    densities: np.ndarray
    topology: str = "network"
    kind: str = "gyroid"
    grid_n: int = 64

    def __post_init__(self):
        c = np.asarray(self.offsets, dtype=float)
        rd = np.asarray(self.densities, dtype=float)
        if c.shape != rd.shape or c.ndim != 1 or c.size < 2:
            raise ValueError("calibration needs matching 1-D offset and density arrays")
        if np.any(np.diff(c) <= 0):
            raise ValueError("calibration offsets must be strictly increasing")
        if np.any((rd < 0) | (rd > 1)):
            raise ValueError("relative densities must lie in [0, 1]")
        object.__setattr__(self, "offsets", c)
        object.__setattr__(self, "densities", rd)

    @property
    def density_range(self):
        return float(self.densities.min()), float(self.densities.max())

    def _ascending(self):
        # np.interp needs increasing abscissae
        if self.densities[0] > self.densities[-1]:
            return self.densities[::-1], self.offsets[::-1]
        return self.densities, self.offsets

    def density_at(self, offset):
        return np.interp(offset, self.offsets, self.densities)

    def offset_for(self, rd):
        rd = np.asarray(rd, dtype=float)
        lo, hi = self.density_range
        if np.any(rd < lo - 1e-12) or np.any(rd > hi + 1e-12):
            bad = rd[(rd < lo) | (rd > hi)].ravel()[0] if rd.ndim else float(rd)
            raise CalibrationRangeExceeded(
                f"relative density {bad:.4g} lies outside the calibrated range [{lo:.4f}, {hi:.4f}] "
                f"(offsets {self.offsets[0]:g}..{self.offsets[-1]:g})"
            )
        xs, ys = self._ascending()
        return np.interp(rd, xs, ys)

    def offset_slope(self, rd):
        """d(offset)/d(RD) of the piecewise-linear inverse map."""
        xs, ys = self._ascending()
        idx = np.clip(np.searchsorted(xs, rd, side="right") - 1, 0, xs.size - 2)
        return (ys[idx + 1] - ys[idx]) / (xs[idx + 1] - xs[idx])

    def to_csv(self, path):
        path = Path(path)
        try:
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["C", "RD"])
                for c, rd in zip(self.offsets, self.densities):
                    w.writerow([repr(float(c)), repr(float(rd))])
        except OSError as exc:
            raise OSError(f"cannot write calibration table to {path}: {exc}") from exc

    @classmethod
    def from_csv(cls, path, topology="network"):
        rows = [r for r in csv.DictReader(_strip_comments(path))]
        return cls(np.array([float(r["C"]) for r in rows]), np.array([float(r["RD"]) for r in rows]), topology)


def _strip_comments(path):
    with open(path, newline="") as fh:
        return [line for line in fh if not line.startswith("#")]


def build_calibration(topology="network", kind="gyroid", c_min=-1.25, c_max=1.25, samples=26, n=64):
    """Tabulate relative density over evenly spaced offsets."""
    offsets = np.linspace(c_min, c_max, samples)
    dens = np.array(
        [solid_fraction(ImplicitLattice((1.0, 1.0, 1.0), c, topology, kind), sampler="grid", n=n) for c in offsets]
    )
    return DensityCalibration(offsets, dens, topology, kind, n)


@dataclass(frozen=True)
class GradedOffset:
    """Offset field whose relative density varies linearly in z.

    Outside ``[z_bottom, z_top]`` the end densities are held.
    """

    calibration: DensityCalibration
    rd_bottom: float
    rd_top: float
    z_bottom: float
    z_top: float

    def density(self, z):
        s = np.clip((np.asarray(z) - self.z_bottom) / (self.z_top - self.z_bottom), 0.0, 1.0)
        return self.rd_bottom + s * (self.rd_top - self.rd_bottom)

    def __call__(self, points):
        return self.calibration.offset_for(self.density(np.asarray(points)[..., 2]))

    def gradient(self, points):
        pts = np.asarray(points, dtype=float)
        z = pts[..., 2]
        inside = (z > self.z_bottom) & (z < self.z_top)
        drd_dz = (self.rd_top - self.rd_bottom) / (self.z_top - self.z_bottom)
        out = np.zeros(pts.shape)
        out[..., 2] = np.where(inside, self.calibration.offset_slope(self.density(z)) * drd_dz, 0.0)
        return out


def graded_lattice(rd_top, rd_bottom, z_range, calibration: DensityCalibration, cell_size=5.0):
    """Lattice whose relative density runs linearly from ``rd_bottom`` at
    ``z_range[0]`` to ``rd_top`` at ``z_range[1]``."""
    for rd in (rd_top, rd_bottom):
        if not 0.0 < rd < 1.0:
            raise ValueError(f"relative densities must lie in (0, 1), got {rd}")
    z0, z1 = (float(z) for z in z_range)
    if not z1 > z0:
        raise ValueError(f"z range must be nonempty, got {z_range}")
    calibration.offset_for(np.array([rd_top, rd_bottom]))  # range check
    off = GradedOffset(calibration, float(rd_bottom), float(rd_top), z0, z1)
    return ImplicitLattice(cell_size, off, calibration.topology, calibration.kind)


def slab_fractions(lattice, lo, hi, n_slabs, n=48):
    """Solid fraction of ``n_slabs`` horizontal slabs, ordered bottom to top."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    edges = np.linspace(lo[2], hi[2], n_slabs + 1)
    out = []
    for z0, z1 in zip(edges[:-1], edges[1:]):
        out.append(solid_fraction(lattice, ([lo[0], lo[1], z0], [hi[0], hi[1], z1]), sampler="grid", n=n))
    return np.array(out)


# ---------------------------------------------------------------------------
# Surfaces
# ---------------------------------------------------------------------------

@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    outward: bool = True

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64)

    @property
    def triangles(self):
        return self.vertices[self.faces]

    def areas(self):
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def normals(self):
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def volume(self):
        """Signed enclosed volume (positive for outward orientation)."""
        t = self.triangles - self.vertices.mean(axis=0)
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def edge_counts(self):
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self):
        return bool(np.all(self.edge_counts() == 2))


def extract_surface(lattice, lo, hi, resolution=64, cap=True) -> TriMesh:
    """Marching-cubes triangulation of the solid boundary inside a box.

    ``resolution`` is the number of samples per unit-cell edge. With ``cap``
    the sample grid is padded by one layer of strongly negative (void) values
    so the surface closes just outside the box faces.
    """
    from skimage.measure import marching_cubes

    if resolution < 8:
        raise ValueError("resolution must be at least 8 samples per cell edge")
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    step = np.asarray(lattice.cell_size) / resolution
    counts = np.maximum(np.round((hi - lo) / step).astype(int), 1)
    spacing = (hi - lo) / counts
    axes = [lo[i] + spacing[i] * np.arange(counts[i] + 1) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vol = lattice.level(grid)
    # exact zeros on samples create zero-area triangles
    vol[vol == 0.0] = 1e-12
    origin = lo
    if cap:
        vol = np.pad(vol, 1, mode="constant", constant_values=-1e3)
        origin = lo - spacing
    if not (vol.max() > 0 > vol.min()):
        raise EmptySurface("level function has no sign change inside the box")
    verts, faces, _, _ = marching_cubes(vol, level=0.0, spacing=tuple(spacing), allow_degenerate=False)
    mesh = TriMesh(verts + origin, faces)
    if mesh.volume() < 0:
        mesh.faces = mesh.faces[:, ::-1].copy()
    return mesh


# ---------------------------------------------------------------------------
# STL
# ---------------------------------------------------------------------------

_STL_RECORD = np.dtype([("normal", "<f4", (3,)), ("vertices", "<f4", (3, 3)), ("attr", "<u2")])


def write_stl(mesh: TriMesh, path, mode="binary", name="tpms"):
    path = Path(path)
    tris = mesh.triangles
    normals = mesh.normals()
    try:
        if mode == "binary":
            rec = np.zeros(len(tris), dtype=_STL_RECORD)
            rec["normal"] = normals
            rec["vertices"] = tris
            with path.open("wb") as fh:
                fh.write(name.encode("ascii")[:80].ljust(80, b" "))
                fh.write(struct.pack("<I", len(tris)))
                fh.write(rec.tobytes())
        elif mode == "ascii":
            with path.open("w") as fh:
                fh.write(f"solid {name}\n")
                for n, t in zip(normals, tris):
                    fh.write(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}\n    outer loop\n")
                    for v in t:
                        fh.write(f"      vertex {v[0]:.9e} {v[1]:.9e} {v[2]:.9e}\n")
                    fh.write("    endloop\n  endfacet\n")
                fh.write(f"endsolid {name}\n")
        else:
            raise ValueError(f"unknown STL mode {mode!r}")
    except OSError as exc:
        raise OSError(f"cannot write STL to {path}: {exc}") from exc


def read_stl(path):
    """Return ``(triangles, normals)`` as float arrays of shape (m, 3, 3), (m, 3)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read STL {path}: {exc}") from exc
    if len(data) >= 84:
        (count,) = struct.unpack("<I", data[80:84])
        if len(data) == 84 + 50 * count:
            rec = np.frombuffer(data, dtype=_STL_RECORD, count=count, offset=84)
            return rec["vertices"].astype(float), rec["normal"].astype(float)
    text = data.decode("ascii").split()
    verts, normals = [], []
    for i, tok in enumerate(text):
        if tok == "vertex":
            verts.append([float(x) for x in text[i + 1:i + 4]])
        elif tok == "normal":
            normals.append([float(x) for x in text[i + 1:i + 4]])
    return np.array(verts).reshape(-1, 3, 3), np.array(normals).reshape(-1, 3)
