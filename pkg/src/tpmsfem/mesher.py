"""Voxel hexahedral meshing of implicit lattices and the two-parameter
(element size + minimum scaled Jacobian) boundary conforming step."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DomainNotDivisible, EmptyMesh, InvalidMesh, NoSpanningComponent, ZeroEdge

# Corner offsets of the standard hex ordering: bottom face (zeta=-1) counter-
# clockwise seen from +z, then the top face in the same cycle.
CORNER_OFFSETS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
)
NATURAL_CORNERS = 2.0 * CORNER_OFFSETS - 1.0

# For each corner, the three neighbours whose edge vectors form a right-handed
# triad on the ideal cube.
CORNER_NEIGHBOURS = np.array(
    [[1, 3, 4], [2, 0, 5], [3, 1, 6], [0, 2, 7], [7, 5, 0], [4, 6, 1], [5, 7, 2], [6, 4, 3]]
)

HEX_FACES = np.array(
    [[0, 3, 2, 1], [4, 5, 6, 7], [0, 1, 5, 4], [2, 3, 7, 6], [0, 4, 7, 3], [1, 2, 6, 5]]
)

BACKTRACK_LADDER = (1.0, 0.75, 0.5, 0.25, 0.1)

GAUSS_2 = NATURAL_CORNERS / np.sqrt(3.0)


def shape_derivatives(points):
    """dN/d(xi, eta, zeta) of the trilinear hex at natural points, shape (p, 8, 3)."""
    p = np.atleast_2d(points)
    c = NATURAL_CORNERS
    f = 1.0 + p[:, None, :] * c[None, :, :]  # (p, 8, 3)
    d = np.empty_like(f)
    d[..., 0] = c[:, 0] * f[..., 1] * f[..., 2]
    d[..., 1] = c[:, 1] * f[..., 0] * f[..., 2]
    d[..., 2] = c[:, 2] * f[..., 0] * f[..., 1]
    return d / 8.0


DN_GAUSS = shape_derivatives(GAUSS_2)


# ---------------------------------------------------------------------------
# Element quality
# ---------------------------------------------------------------------------

def corner_scaled_jacobians(coords):
    """Scaled Jacobian at each of the 8 corners; ``coords`` has shape (..., 8, 3).

    Corners with a zero-length edge score -1.
    """
    x = np.asarray(coords, dtype=float)
    e = x[..., CORNER_NEIGHBOURS, :] - x[..., :, None, :]  # (..., 8, 3, 3)
    # triple product and length product share one multiplication order, so
    # axis-aligned cubes score exactly 1
    det = np.einsum("...i,...i->...", e[..., 0, :], np.cross(e[..., 1, :], e[..., 2, :]))
    n = np.linalg.norm(e, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sj = det / (n[..., 0] * (n[..., 1] * n[..., 2]))
    return np.where(n.min(axis=-1) < 1e-12, -1.0, sj)


def scaled_jacobians(coords):
    """Minimum corner scaled Jacobian per element."""
    return corner_scaled_jacobians(coords).min(axis=-1)


def scaled_jacobian(corners) -> float:
    x = np.asarray(corners, dtype=float)
    if x.shape != (8, 3):
        raise ValueError(f"expected 8 corner coordinates, got shape {x.shape}")
    e = x[CORNER_NEIGHBOURS] - x[:, None, :]
    if np.linalg.norm(e, axis=-1).min() < 1e-12:
        raise ZeroEdge("element has a zero-length edge")
    return float(corner_scaled_jacobians(x).min())


def element_volumes(coords, chunk=20000):
    """Element volumes by 2x2x2 Gauss integration of det J."""
    x = np.asarray(coords, dtype=float)
    out = np.empty(len(x))
    for s in range(0, len(x), chunk):
        J = np.einsum("gni,enj->egij", DN_GAUSS, x[s:s + chunk])
        out[s:s + chunk] = np.linalg.det(J).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# Mesh container
# ---------------------------------------------------------------------------

def _face_keys(elements):
    """Sorted node quadruples of all element faces, shape (6m, 4)."""
    f = elements[:, HEX_FACES].reshape(-1, 4)
    return np.sort(f, axis=1)


def face_incidence(elements):
    """Return ``(face_id, counts)`` where ``face_id`` labels each of the 6m
    element faces with a shared-face index and ``counts`` its multiplicity."""
    keys = _face_keys(elements)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return inverse.ravel(), counts


@dataclass
class HexMesh:
    """Nodes (mm) and 8-node hexahedra in standard corner ordering.

    ``bounds`` is the design-domain box ``(lo, hi)``; ``h`` the nominal
    element size.
    """

    nodes: np.ndarray
    elements: np.ndarray
    h: float
    bounds: tuple
    boundary: np.ndarray = None
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        self.bounds = (np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float))
        if self.elements.ndim != 2 or self.elements.shape[1] != 8:
            raise InvalidMesh(f"elements must have shape (m, 8), got {self.elements.shape}")
        if self.validate:
            self.check()
        if self.boundary is None:
            self.boundary = self._boundary_flags()

    def check(self):
        el = self.elements
        if el.size and (el.min() < 0 or el.max() >= len(self.nodes)):
            raise InvalidMesh("element references a node index out of range")
        s = np.sort(el, axis=1)
        if np.any(s[:, 1:] == s[:, :-1]):
            raise InvalidMesh("element references the same node twice")
        if el.size:
            sj = scaled_jacobians(self.nodes[el])
            if np.any(sj <= 0):
                bad = int(np.argmin(sj))
                raise InvalidMesh(f"element {bad} has non-positive scaled Jacobian {sj[bad]:.3g}")

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.elements)

    def element_coords(self):
        return self.nodes[self.elements]

    def exposed_faces(self):
        """Node quadruples (in element order) of faces owned by one element."""
        fid, counts = face_incidence(self.elements)
        mask = counts[fid] == 1
        return self.elements[:, HEX_FACES].reshape(-1, 4)[mask]

    def box_face_mask(self, faces, tol=None):
        """True for faces lying entirely on one plane of the domain box."""
        lo, hi = self.bounds
        tol = 1e-9 * max(1.0, float(np.abs(hi - lo).max())) if tol is None else tol
        x = self.nodes[faces]  # (k, 4, 3)
        on = np.zeros(len(faces), dtype=bool)
        for axis in range(3):
            on |= np.all(np.abs(x[..., axis] - lo[axis]) < tol, axis=1)
            on |= np.all(np.abs(x[..., axis] - hi[axis]) < tol, axis=1)
        return on

    def _boundary_flags(self):
        flags = np.zeros(self.n_nodes, dtype=bool)
        if self.n_elements:
            flags[self.exposed_faces().ravel()] = True
        return flags

    def surface_nodes(self):
        """Nodes on exposed faces that are not part of the domain box."""
        faces = self.exposed_faces()
        faces = faces[~self.box_face_mask(faces)]
        flags = np.zeros(self.n_nodes, dtype=bool)
        flags[faces.ravel()] = True
        return flags

    def nodes_on_plane(self, axis, side, tol=None):
        lo, hi = self.bounds
        tol = 1e-9 * max(1.0, float(np.abs(hi - lo).max())) if tol is None else tol
        ref = lo[axis] if side == "lo" else hi[axis]
        return np.abs(self.nodes[:, axis] - ref) < tol

    def copy(self):
        return HexMesh(self.nodes.copy(), self.elements.copy(), self.h,
                       (self.bounds[0].copy(), self.bounds[1].copy()), self.boundary.copy(), validate=False)


# ---------------------------------------------------------------------------
# Voxelisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VoxelGridSpec:
    """Voxel size, keep rule and design-domain box.

    ``rule`` is ``"intersect"`` (any subsample solid), ``"centroid"`` or
    ``"fraction"`` (solid subsample share >= ``theta``). ``subsamples`` is the
    per-axis subsample count including both voxel faces.
    """

    h: float
    lo: tuple
    hi: tuple
    rule: str = "intersect"
    theta: float = 0.5
    subsamples: int = 3

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("element size must be positive")
        if self.rule not in ("intersect", "centroid", "fraction"):
            raise ValueError(f"unknown classification rule {self.rule!r}")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.subsamples < 2:
            raise ValueError("need at least 2 subsamples per axis")

    def dims(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        ratio = (hi - lo) / self.h
        n = np.round(ratio).astype(int)
        if np.any(n < 1) or np.any(np.abs(ratio - n) > 1e-9 * np.maximum(ratio, 1.0)):
            raise DomainNotDivisible(f"domain edges {hi - lo} are not integer multiples of h={self.h}")
        return tuple(int(v) for v in n)


def classify_voxels(lattice, spec: VoxelGridSpec) -> np.ndarray:
    """Boolean occupancy of shape ``spec.dims()``."""
    N = spec.dims()
    lo = np.asarray(spec.lo, float)
    h = spec.h
    if spec.rule == "centroid":
        axes = [lo[i] + (np.arange(N[i]) + 0.5) * h for i in range(3)]
        return _solid_on_grid(lattice, axes)
    s = spec.subsamples - 1
    axes = [lo[i] + np.arange(s * N[i] + 1) * (h / s) for i in range(3)]
    solid = _solid_on_grid(lattice, axes)
    count = np.zeros(N, dtype=np.int16)
    for a in range(s + 1):
        for b in range(s + 1):
            for c in range(s + 1):
                count += solid[a:a + s * N[0]:s, b:b + s * N[1]:s, c:c + s * N[2]:s]
    if spec.rule == "intersect":
        return count > 0
    return count >= spec.theta * (s + 1) ** 3


def _solid_on_grid(lattice, axes):
    X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
    out = np.empty((len(axes[0]), len(axes[1]), len(axes[2])), dtype=bool)
    for k, z in enumerate(axes[2]):
        out[:, :, k] = lattice.is_solid(np.stack([X, Y, np.full_like(X, z)], axis=-1))
    return out


def build_voxel_mesh(occupancy, h, lo=(0.0, 0.0, 0.0)) -> HexMesh:
    """Hex mesh of the kept voxels with nodes shared on the integer lattice.

    Node ids follow the lexicographic order of their (i, j, k) grid index.
    """
    occ = np.asarray(occupancy, dtype=bool)
    if not occ.any():
        raise EmptyMesh("no voxels are occupied")
    lo = np.asarray(lo, dtype=float)
    N = np.array(occ.shape)
    vox = np.argwhere(occ)  # C order, i.e. lexicographic
    corners = vox[:, None, :] + CORNER_OFFSETS[None, :, :]
    keys = np.ravel_multi_index(corners.reshape(-1, 3).T, tuple(N + 1))
    uniq, inverse = np.unique(keys, return_inverse=True)
    ijk = np.stack(np.unravel_index(uniq, tuple(N + 1)), axis=1)
    nodes = lo + h * ijk
    elements = inverse.reshape(-1, 8)
    return HexMesh(nodes, elements, float(h), (lo, lo + h * N), validate=False)


def voxel_mesh(lattice, spec: VoxelGridSpec) -> HexMesh:
    return build_voxel_mesh(classify_voxels(lattice, spec), spec.h, spec.lo)


# ---------------------------------------------------------------------------
# Two-parameter conforming
# ---------------------------------------------------------------------------

def _node_element_incidence(elements, n_nodes):
    flat = elements.ravel()
    order = np.argsort(flat, kind="stable")
    ptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.add.at(ptr, flat + 1, 1)
    ptr = np.cumsum(ptr)
    return ptr, order // 8, order % 8


def project_to_level(lattice, points, free_axes, max_steps=20, tol=1e-9):
    """Newton projection of points onto the zero level set.

    Returns ``(targets, converged)``. Axes where ``free_axes`` is False are
    held fixed.
    """
    x = np.array(points, dtype=float)
    free = np.asarray(free_axes, dtype=float)
    converged = np.zeros(len(x), dtype=bool)
    active = np.arange(len(x))
    for _ in range(max_steps + 1):
        if active.size == 0:
            break
        g = lattice.level(x[active])
        done = np.abs(g) < tol
        converged[active[done]] = True
        active, g = active[~done], g[~done]
        if active.size == 0:
            break
        grad = lattice.level_gradient(x[active]) * free[active]
        gg = np.einsum("ij,ij->i", grad, grad)
        ok = gg > 1e-20
        step = np.zeros_like(grad)
        step[ok] = (g[ok] / gg[ok])[:, None] * grad[ok]
        x[active] -= step
        active = active[ok]
    return x, converged


def conform_to_surface(mesh: HexMesh, lattice, mj_target, max_passes=3, max_move=None, tol=1e-9):
    """Move surface nodes toward the lattice iso-level under a minimum scaled
    Jacobian guard.

    Nodes are visited in index order. Each takes the largest fraction of its
    Newton displacement from :data:`BACKTRACK_LADDER` that keeps every incident
    element at ``SJ >= mj_target`` (or stays put). Nodes on the domain box move
    only within their box plane. Displacements longer than ``max_move``
    (default ``2 h``) are discarded as non-local.
    """
    if not 0.0 < mj_target <= 1.0:
        raise ValueError(f"MJ target must lie in (0, 1], got {mj_target}")
    out = mesh.copy()
    if mj_target >= 1.0:
        return out
    max_move = 2.0 * mesh.h if max_move is None else max_move
    nodes = out.nodes
    elements = out.elements
    candidates = np.flatnonzero(out.surface_nodes())
    lo, hi = out.bounds
    btol = 1e-9 * max(1.0, float(np.abs(hi - lo).max()))
    on_box = (np.abs(nodes - lo) < btol) | (np.abs(nodes - hi) < btol)
    free = ~on_box
    ptr, inc_elem, inc_pos = _node_element_incidence(elements, len(nodes))
    ladder = np.asarray(BACKTRACK_LADDER)

    for _ in range(max_passes):
        targets, conv = project_to_level(lattice, nodes[candidates], free[candidates])
        disp = targets - nodes[candidates]
        dist = np.linalg.norm(disp, axis=1)
        movable = conv & (dist > tol) & (dist <= max_move) & np.isfinite(dist)
        moved = 0.0
        for node, d in zip(candidates[movable], disp[movable]):
            sl = slice(ptr[node], ptr[node + 1])
            els, pos = inc_elem[sl], inc_pos[sl]
            coords = nodes[elements[els]]  # (m, 8, 3)
            trial = np.broadcast_to(coords, (len(ladder),) + coords.shape).copy()
            trial[:, np.arange(len(els)), pos] = nodes[node] + ladder[:, None, None] * d
            ok = np.all(scaled_jacobians(trial) >= mj_target, axis=1)
            if ok.any():
                t = ladder[np.argmax(ok)]
                nodes[node] = nodes[node] + t * d
                moved = max(moved, t * float(np.linalg.norm(d)))
        if moved <= tol:
            break
    return out


# ---------------------------------------------------------------------------
# Statistics and filtering
# ---------------------------------------------------------------------------

def mesh_relative_density(mesh: HexMesh, bounds=None):
    lo, hi = mesh.bounds if bounds is None else (np.asarray(bounds[0], float), np.asarray(bounds[1], float))
    return float(element_volumes(mesh.element_coords()).sum() / np.prod(hi - lo))


def element_components(mesh: HexMesh, adjacency="face"):
    """Connected-component label per element (face or shared-node adjacency)."""
    m = mesh.n_elements
    if adjacency == "face":
        fid, counts = face_incidence(mesh.elements)
        owner = np.repeat(np.arange(m), 6)
        shared = counts[fid] == 2
        order = np.argsort(fid[shared], kind="stable")
        pairs = owner[shared][order].reshape(-1, 2)
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(m, m))
    elif adjacency == "node":
        rows = np.repeat(np.arange(m), 8)
        graph = coo_matrix((np.ones(8 * m), (rows, mesh.elements.ravel())), shape=(m, mesh.n_nodes))
        graph = (graph @ graph.T).tocoo()
    else:
        raise ValueError(f"unknown adjacency {adjacency!r}")
    return connected_components(graph, directed=False)[1]


def submesh(mesh: HexMesh, keep_elements) -> HexMesh:
    """Mesh restricted to the selected elements with nodes renumbered densely
    (relative order preserved)."""
    el = mesh.elements[keep_elements]
    used = np.unique(el)
    remap = np.full(mesh.n_nodes, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return HexMesh(mesh.nodes[used], remap[el], mesh.h, mesh.bounds, validate=False)


def filter_components(mesh: HexMesh, keep="spanning") -> HexMesh:
    labels = element_components(mesh, "face")
    if keep == "largest":
        return submesh(mesh, labels == np.bincount(labels).argmax())
    if keep != "spanning":
        raise ValueError(f"unknown keep mode {keep!r}")
    bottom = mesh.nodes_on_plane(2, "lo")
    top = mesh.nodes_on_plane(2, "hi")
    n_comp = labels.max() + 1
    touches_bottom = np.zeros(n_comp, dtype=bool)
    touches_top = np.zeros(n_comp, dtype=bool)
    el_bottom = bottom[mesh.elements].any(axis=1)
    el_top = top[mesh.elements].any(axis=1)
    touches_bottom[labels[el_bottom]] = True
    touches_top[labels[el_top]] = True
    spanning = touches_bottom & touches_top
    if not spanning.any():
        raise NoSpanningComponent("no connected component reaches both the bottom and top faces")
    return submesh(mesh, spanning[labels])


@dataclass
class MeshQualityReport:
    element_count: int
    elements_per_cell: float
    min_scaled_jacobian: float
    histogram: np.ndarray
    relative_density: float

    HEADER = ("elements", "elements_per_cell", "min_SJ", "RD_mesh")

    def row(self):
        return [self.element_count, self.elements_per_cell, self.min_scaled_jacobian, self.relative_density]


def quality_report(mesh: HexMesh, n_cells) -> MeshQualityReport:
    if n_cells < 1:
        raise ValueError("n_cells must be at least 1")
    sj = scaled_jacobians(mesh.element_coords())
    hist, _ = np.histogram(np.clip(sj, 0.0, 1.0), bins=10, range=(0.0, 1.0))
    return MeshQualityReport(
        element_count=mesh.n_elements,
        elements_per_cell=mesh.n_elements / n_cells ** 3,
        min_scaled_jacobian=float(sj.min()),
        histogram=hist,
        relative_density=mesh_relative_density(mesh),
    )


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _vtk_field_block(name, values, count):
    arr = np.asarray(values, dtype=float)
    if arr.shape[0] != count:
        raise ValueError(f"field {name!r} has {arr.shape[0]} entries, expected {count}")
    if arr.ndim == 1:
        lines = [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [f"{v:.10g}" for v in arr]
    elif arr.ndim == 2 and arr.shape[1] == 3:
        lines = [f"VECTORS {name} double"]
        lines += [f"{a:.10g} {b:.10g} {c:.10g}" for a, b, c in arr]
    else:
        raise ValueError(f"field {name!r} must be scalar or 3-vector per entry")
    return lines


def write_vtk(mesh: HexMesh, path, point_data=None, cell_data=None, title="tpms hex mesh"):
    """Legacy ASCII VTK unstructured grid with hexahedral cells (type 12)."""
    path = Path(path)
    n, m = mesh.n_nodes, mesh.n_elements
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {n} double"]
    lines += [f"{x:.10g} {y:.10g} {z:.10g}" for x, y, z in mesh.nodes]
    lines.append(f"CELLS {m} {9 * m}")
    lines += ["8 " + " ".join(map(str, e)) for e in mesh.elements]
    lines.append(f"CELL_TYPES {m}")
    lines += ["12"] * m
    if point_data:
        lines.append(f"POINT_DATA {n}")
        for name, values in point_data.items():
            lines += _vtk_field_block(name, values, n)
    if cell_data:
        lines.append(f"CELL_DATA {m}")
        for name, values in cell_data.items():
            lines += _vtk_field_block(name, values, m)
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc}") from exc


_OCC_MAGIC = b"OCC1"


def write_occupancy(path, occupancy, h, origin):
    """Raw u8 volume (C order) after a header: magic, 3 x u32 dims, f64 h, 3 x f64 origin."""
    occ = np.asarray(occupancy, dtype=np.uint8)
    header = _OCC_MAGIC + struct.pack("<3I", *occ.shape) + struct.pack("<4d", h, *origin)
    try:
        Path(path).write_bytes(header + occ.tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write occupancy grid {path}: {exc}") from exc


def read_occupancy(path):
    data = Path(path).read_bytes()
    if data[:4] != _OCC_MAGIC:
        raise ValueError(f"{path} is not an occupancy grid")
    dims = struct.unpack("<3I", data[4:16])
    h, *origin = struct.unpack("<4d", data[16:48])
    occ = np.frombuffer(data, dtype=np.uint8, offset=48).reshape(dims).astype(bool)
    return occ, h, np.array(origin)
