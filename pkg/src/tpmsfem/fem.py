"""Small-strain linear elastic hexahedral FE solve under uniaxial compression.

Units are mm, N and MPa. The loading model uses frictionless platens: every
node on the bottom face has ``u_z = 0``, every node on the top face
``u_z = -delta``, and in-plane rigid-body motion is locked per connected
component by a 3-2-1 pick of bottom nodes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NoBottomFace, NoConvergence, NonPositiveJacobian, NoTopFace, UnconstrainedRigidBody
from .mesher import CORNER_OFFSETS, DN_GAUSS, HexMesh, element_components


@dataclass(frozen=True)
class MaterialSpec:
    """Isotropic base material; defaults are Ti-6Al-4V.

    ``sigma_y`` and ``E_t`` describe the bilinear hardening branch and are
    carried for reference only (the solve is linear elastic).
    """

    E_s: float = 121000.0  # MPa
    nu: float = 0.34
    rho_s: float = 4400.0  # kg/m^3
    sigma_y: float = 896.0  # MPa
    E_t: float = 1850.0  # MPa

    def __post_init__(self):
        if self.E_s <= 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < self.nu < 0.5:
            raise ValueError("Poisson's ratio must lie in (-1, 0.5)")

    def elasticity_matrix(self):
        E, nu = self.E_s, self.nu
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        D = np.zeros((6, 6))
        D[:3, :3] = lam
        D[np.arange(3), np.arange(3)] += 2 * mu
        D[np.arange(3, 6), np.arange(3, 6)] = mu
        return D


@dataclass(frozen=True)
class CompressionSetup:
    delta: float = 0.05  # mm, applied as -z on the top face
    face_tol: float = None  # mm; default 1e-6 * specimen height

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("prescribed displacement must be non-negative")


# ---------------------------------------------------------------------------
# Element stiffness
# ---------------------------------------------------------------------------

def _b_matrices(dNdx):
    """Strain-displacement matrices from (..., 8, 3) global shape derivatives.

    Engineering strain order: xx, yy, zz, xy, yz, zx.
    """
    shape = dNdx.shape[:-2]
    B = np.zeros(shape + (6, 24))
    dx, dy, dz = dNdx[..., 0], dNdx[..., 1], dNdx[..., 2]
    B[..., 0, 0::3] = dx
    B[..., 1, 1::3] = dy
    B[..., 2, 2::3] = dz
    B[..., 3, 0::3] = dy
    B[..., 3, 1::3] = dx
    B[..., 4, 1::3] = dz
    B[..., 4, 2::3] = dy
    B[..., 5, 0::3] = dz
    B[..., 5, 2::3] = dx
    return B


def element_stiffness_batch(coords, D, first_id=0):
    """24x24 stiffness of each element, 2x2x2 Gauss quadrature; shape (n, 24, 24)."""
    X = np.asarray(coords, dtype=float)
    J = np.einsum("gai,naj->ngij", DN_GAUSS, X)
    detJ = np.linalg.det(J)
    if np.any(detJ <= 0):
        bad = int(np.argwhere(detJ <= 0)[0, 0])
        raise NonPositiveJacobian(f"element {first_id + bad} has a non-positive Jacobian at a Gauss point",
                                  element=first_id + bad)
    dNdx = np.einsum("ngij,gaj->ngai", np.linalg.inv(J), DN_GAUSS)
    B = _b_matrices(dNdx)
    K = np.einsum("ngki,kl,nglj,ng->nij", B, D, B, detJ, optimize=True)
    return 0.5 * (K + K.transpose(0, 2, 1))


def hex8_stiffness(corners, material: MaterialSpec):
    return element_stiffness_batch(np.asarray(corners, dtype=float)[None], material.elasticity_matrix())[0]


def element_strains(coords, ue):
    """Element-averaged engineering strain from nodal displacements (n, 8, 3)."""
    X = np.asarray(coords, dtype=float)
    J = np.einsum("gai,naj->ngij", DN_GAUSS, X)
    detJ = np.linalg.det(J)
    dNdx = np.einsum("ngij,gaj->ngai", np.linalg.inv(J), DN_GAUSS)
    eps = np.einsum("ngki,ni->ngk", _b_matrices(dNdx), ue.reshape(len(X), 24))
    return np.einsum("ngk,ng->nk", eps, detJ) / detJ.sum(axis=1)[:, None]


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _node_pattern(elements, n_nodes):
    """Sorted node-pair adjacency (CSR indptr/indices) including self pairs."""
    m = len(elements)
    inc = sp.csr_matrix((np.ones(8 * m, dtype=np.int8), (np.repeat(np.arange(m), 8), elements.ravel())),
                        shape=(m, n_nodes))
    A = (inc.T.astype(np.int32) @ inc.astype(np.int32)).tocsr()
    A.sort_indices()
    return A.indptr.astype(np.int64), A.indices.astype(np.int64)


def _is_ideal_cube(X, h):
    ref = h * CORNER_OFFSETS
    return np.all(np.abs(X - X[:, :1, :] - ref) <= 1e-12 * max(h, 1.0), axis=(1, 2))


def assemble(mesh: HexMesh, material: MaterialSpec, chunk=8192):
    """Global stiffness (CSR, both triangles stored, sorted indices).

    Element contributions are accumulated in element order with
    ``np.bincount``, so repeated runs are bit-identical.
    """
    n = mesh.n_nodes
    el = mesh.elements
    D = material.elasticity_matrix()
    indptr, indices = _node_pattern(el, n)
    keys = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr)) * n + indices
    nnzb = len(indices)
    data = np.zeros((nnzb, 3, 3))
    flat = data.reshape(-1)
    X_all = mesh.nodes
    k_cube = None
    if mesh.h and mesh.h > 0:
        cube = (mesh.h * CORNER_OFFSETS)[None].astype(float)
        k_cube = element_stiffness_batch(cube, D)[0]
    a_idx, b_idx = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    a_idx, b_idx = a_idx.ravel(), b_idx.ravel()
    # offsets of the 3x3 block entries within Ke for each of the 64 node pairs
    blk_rows = (3 * a_idx[:, None, None] + np.arange(3)[None, :, None])
    blk_cols = (3 * b_idx[:, None, None] + np.arange(3)[None, None, :])
    for s in range(0, len(el), chunk):
        e = el[s:s + chunk]
        X = X_all[e]
        Ke = np.empty((len(e), 24, 24))
        cube_mask = _is_ideal_cube(X, mesh.h) if k_cube is not None else np.zeros(len(e), bool)
        Ke[cube_mask] = k_cube
        if (~cube_mask).any():
            Ke[~cube_mask] = element_stiffness_batch(X[~cube_mask], D, first_id=s)
        pair_keys = e[:, a_idx] * n + e[:, b_idx]  # (c, 64)
        pos = np.searchsorted(keys, pair_keys)
        blocks = Ke[:, blk_rows, blk_cols]  # (c, 64, 3, 3)
        target = (pos[:, :, None, None] * 9 + np.arange(9).reshape(3, 3)).ravel()
        flat += np.bincount(target, weights=blocks.ravel(), minlength=flat.size)
    K = sp.bsr_matrix((data, indices, indptr), shape=(3 * n, 3 * n), blocksize=(3, 3)).tocsr()
    K.sort_indices()
    return K


def rigid_body_modes(nodes):
    """Six rigid-body displacement fields (3n, 6): translations then rotations."""
    x = np.asarray(nodes, dtype=float)
    c = x - x.mean(axis=0)
    n = len(x)
    R = np.zeros((n, 3, 6))
    R[:, 0, 0] = R[:, 1, 1] = R[:, 2, 2] = 1.0
    # rotation about x: (0, -z, y); about y: (z, 0, -x); about z: (-y, x, 0)
    R[:, 1, 3], R[:, 2, 3] = -c[:, 2], c[:, 1]
    R[:, 0, 4], R[:, 2, 4] = c[:, 2], -c[:, 0]
    R[:, 0, 5], R[:, 1, 5] = -c[:, 1], c[:, 0]
    return R.reshape(3 * n, 6)


# ---------------------------------------------------------------------------
# Boundary conditions
# ---------------------------------------------------------------------------

@dataclass
class ConstrainedSystem:
    """Stiffness with prescribed DOFs eliminated in place.

    Prescribed rows/columns of ``K`` are replaced by identity rows so the
    system keeps full size and stays symmetric positive definite; ``b``
    carries the transferred load on free DOFs and the prescribed values on
    constrained ones.
    """

    K: sp.csr_matrix
    b: np.ndarray
    prescribed: np.ndarray  # bool per DOF
    u_prescribed: np.ndarray  # full-length vector, zero on free DOFs
    top_rows: sp.csr_matrix  # unconstrained K rows of top-face z DOFs
    bottom_rows: sp.csr_matrix
    top_nodes: np.ndarray
    bottom_nodes: np.ndarray
    lock_dofs: np.ndarray
    height: float
    area: float
    delta: float

    @property
    def n_dofs(self):
        return len(self.b)

    def reduced(self):
        """Free-DOF block of the constrained stiffness."""
        free = ~self.prescribed
        return self.K[free][:, free]


def _lock_dofs(mesh: HexMesh, bottom):
    labels = element_components(mesh, "node")
    node_label = np.full(mesh.n_nodes, -1)
    node_label[mesh.elements.ravel()] = np.repeat(labels, 8)
    locks = []
    for comp in range(labels.max() + 1):
        nodes = np.flatnonzero((node_label == comp) & bottom)
        if nodes.size == 0:
            raise UnconstrainedRigidBody(f"component {comp} has no bottom-face node; filter components first")
        xy = mesh.nodes[nodes, :2]
        first = nodes[np.lexsort((xy[:, 1], xy[:, 0]))[0]]
        span_x = np.ptp(xy[:, 0])
        span_y = np.ptp(xy[:, 1])
        if max(span_x, span_y) <= 1e-12:
            raise UnconstrainedRigidBody(f"component {comp} touches the bottom face at a single point")
        if span_x >= span_y:
            second = nodes[np.lexsort((xy[:, 1], -xy[:, 0]))[0]]
            locks += [3 * first, 3 * first + 1, 3 * second + 1]
        else:
            second = nodes[np.lexsort((xy[:, 0], -xy[:, 1]))[0]]
            locks += [3 * first, 3 * first + 1, 3 * second]
    return np.array(locks, dtype=np.int64)


def apply_compression_bcs(K, mesh: HexMesh, setup: CompressionSetup) -> ConstrainedSystem:
    """Prescribe platen displacements and eliminate them from ``K``.

    ``K`` is modified in place; pass a copy to keep the original.
    """
    lo, hi = mesh.bounds
    H = float(hi[2] - lo[2])
    tol = setup.face_tol if setup.face_tol is not None else 1e-6 * H
    z = mesh.nodes[:, 2]
    used = np.zeros(mesh.n_nodes, bool)
    used[mesh.elements.ravel()] = True
    bottom = used & (np.abs(z - lo[2]) <= tol)
    top = used & (np.abs(z - hi[2]) <= tol)
    if not bottom.any():
        raise NoBottomFace("no mesh node lies on the bottom face")
    if not top.any():
        raise NoTopFace("no mesh node lies on the top face")
    n_dof = 3 * mesh.n_nodes
    prescribed = np.zeros(n_dof, dtype=bool)
    u_p = np.zeros(n_dof)
    bottom_nodes, top_nodes = np.flatnonzero(bottom), np.flatnonzero(top)
    prescribed[3 * bottom_nodes + 2] = True
    prescribed[3 * top_nodes + 2] = True
    u_p[3 * top_nodes + 2] = -setup.delta
    lock = _lock_dofs(mesh, bottom)
    prescribed[lock] = True
    # unused nodes (none after filtering) would give empty rows
    prescribed[np.repeat(3 * np.flatnonzero(~used), 3) + np.tile(np.arange(3), (~used).sum())] = True

    K = K.tocsr()
    top_rows = K[3 * top_nodes + 2]
    bottom_rows = K[3 * bottom_nodes + 2]
    b = -(K @ u_p)
    b[prescribed] = u_p[prescribed]
    rows = np.repeat(np.arange(n_dof), np.diff(K.indptr))
    kill = prescribed[rows] | prescribed[K.indices]
    K.data[kill] = 0.0
    K.eliminate_zeros()
    K = K + sp.diags(prescribed.astype(float), format="csr")
    K.sort_indices()
    lo_xy, hi_xy = lo[:2], hi[:2]
    area = float(np.prod(hi_xy - lo_xy))
    return ConstrainedSystem(K, b, prescribed, u_p, top_rows, bottom_rows, top_nodes, bottom_nodes, lock,
                             H, area, setup.delta)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

@dataclass
class SolveResult:
    u: np.ndarray
    iterations: int
    residual: float
    history: list = field(default_factory=list)
    energy_history: list = field(default_factory=list)
    seconds: float = 0.0

    def displacements(self):
        return self.u.reshape(-1, 3)


def default_max_iter(n_dofs):
    return int(max(20 * np.sqrt(n_dofs), 10000))


def pcg(A, b, M=None, x0=None, rel_tol=1e-8, max_iter=None, track_energy=False, callback=None):
    """Preconditioned conjugate gradients for SPD ``A``.

    ``M`` applies the preconditioner inverse to a vector (identity when None).
    Stops when ``||r|| / ||b|| < rel_tol``. ``history`` holds the relative
    residual of every iterate; with ``track_energy`` the preconditioned
    residual norm ``sqrt(r^T M r)`` is stored too. ``callback(x)`` is called
    after every iteration with the current iterate.
    """
    b = np.asarray(b, dtype=float)
    n = len(b)
    max_iter = default_max_iter(n) if max_iter is None else max_iter
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return SolveResult(np.zeros(n), 0, 0.0, [0.0])
    r = b - A @ x if x0 is not None else b.copy()
    z = M(r) if M is not None else r.copy()
    p = z.copy()
    rz = r @ z
    history = [np.linalg.norm(r) / bnorm]
    energy = [np.sqrt(max(rz, 0.0))] if track_energy else []
    it = 0
    while history[-1] >= rel_tol:
        if it >= max_iter:
            raise NoConvergence(f"CG did not converge in {max_iter} iterations "
                                f"(relative residual {history[-1]:.3e})", history[-1], it)
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = M(r) if M is not None else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
        history.append(np.linalg.norm(r) / bnorm)
        if callback is not None:
            callback(x)
        if track_energy:
            energy.append(np.sqrt(max(rz, 0.0)))
    true_res = np.linalg.norm(b - A @ x) / bnorm
    return SolveResult(x, it, float(true_res), history, energy)


def jacobi_preconditioner(A):
    d = A.diagonal()
    if np.any(d <= 0):
        raise ValueError("Jacobi preconditioner needs a positive diagonal")
    inv = 1.0 / d
    return lambda r: inv * r


def amg_preconditioner(A, nodes=None):
    """Smoothed-aggregation AMG V-cycle (pyamg) with rigid-body near-null space."""
    import pyamg

    B = rigid_body_modes(nodes) if nodes is not None else None
    ml = pyamg.smoothed_aggregation_solver(A, B=B, symmetry="symmetric", max_coarse=500, coarse_solver="splu")
    Mop = ml.aspreconditioner(cycle="V")
    return lambda r: Mop @ r


def solve(system: ConstrainedSystem, rel_tol=1e-8, max_iter=None, preconditioner="jacobi", nodes=None,
          track_energy=False) -> SolveResult:
    """Displacements of a constrained system by preconditioned CG.

    ``preconditioner`` is ``"jacobi"`` (diagonal scaling), ``"amg"`` or a
    callable ``r -> M^{-1} r``.
    """
    t0 = time.perf_counter()
    A = system.K
    if callable(preconditioner):
        M = preconditioner
    elif preconditioner == "jacobi":
        M = jacobi_preconditioner(A)
    elif preconditioner == "amg":
        M = amg_preconditioner(A, nodes)
    else:
        raise ValueError(f"unknown preconditioner {preconditioner!r}")
    x0 = system.u_prescribed.copy() if np.any(system.u_prescribed) else None
    res = pcg(A, system.b, M=M, x0=x0, rel_tol=rel_tol, max_iter=max_iter, track_energy=track_energy)
    res.u[system.prescribed] = system.u_prescribed[system.prescribed]
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# Post-processing
# ---------------------------------------------------------------------------

def reaction_force(system: ConstrainedSystem, u):
    """Platen force in N, positive in compression: ``-sum_top (K u)_z``."""
    return float(-(system.top_rows @ u).sum())


def bottom_reaction(system: ConstrainedSystem, u):
    """Bottom platen force with the same sign convention as the top one."""
    return float((system.bottom_rows @ u).sum())


def effective_modulus(F, S, delta, H):
    """Return ``(sigma_e, E_eff)`` in MPa for force ``F`` on nominal area ``S``."""
    if S <= 0 or delta <= 0 or H <= 0:
        raise ValueError("area, displacement and height must be positive")
    sigma = F / S
    return sigma, sigma / (delta / H)


@dataclass
class CompressionResult:
    F: float
    S: float
    sigma: float
    E_eff: float
    iterations: int
    residual: float
    F_bottom: float = float("nan")
    seconds: float = 0.0
    u: np.ndarray = field(default=None, repr=False)

    @property
    def balance(self):
        return abs(self.F - self.F_bottom) / abs(self.F) if self.F else 0.0


def compression_test(mesh: HexMesh, material: MaterialSpec = MaterialSpec(), setup: CompressionSetup = None,
                     rel_tol=1e-8, max_iter=None, preconditioner="jacobi") -> CompressionResult:
    """Assemble, constrain, solve and post-process one mesh."""
    setup = setup or CompressionSetup()
    t0 = time.perf_counter()
    K = assemble(mesh, material)
    system = apply_compression_bcs(K, mesh, setup)
    del K
    res = solve(system, rel_tol=rel_tol, max_iter=max_iter, preconditioner=preconditioner, nodes=mesh.nodes)
    F = reaction_force(system, res.u)
    Fb = bottom_reaction(system, res.u)
    if setup.delta > 0:
        sigma, E = effective_modulus(F, system.area, setup.delta, system.height)
    else:
        sigma, E = 0.0, 0.0
    return CompressionResult(F, system.area, sigma, E, res.iterations, res.residual, Fb,
                             time.perf_counter() - t0, res.u)
