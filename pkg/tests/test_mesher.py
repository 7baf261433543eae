import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tpmsfem.errors import DomainNotDivisible, EmptyMesh, InvalidMesh, NoSpanningComponent, ZeroEdge
from tpmsfem.geometry import ImplicitLattice, calibrate_offset
from tpmsfem.mesher import (
    CORNER_OFFSETS,
    HexMesh,
    VoxelGridSpec,
    build_voxel_mesh,
    classify_voxels,
    conform_to_surface,
    element_components,
    element_volumes,
    filter_components,
    mesh_relative_density,
    quality_report,
    read_occupancy,
    scaled_jacobian,
    scaled_jacobians,
    voxel_mesh,
    write_occupancy,
    write_vtk,
)

UNIT = CORNER_OFFSETS.astype(float)


@pytest.fixture(scope="module")
def lattice45():
    c, _ = calibrate_offset(0.45)
    return ImplicitLattice(5.0, c)


def test_unit_cube_scaled_jacobian():
    assert scaled_jacobian(UNIT) == 1.0
    assert scaled_jacobian(UNIT * 0.1 + 3.0) == 1.0


@pytest.mark.parametrize("s", [0.2, 0.5, 1.0, 3.0])
def test_sheared_parallelepiped(s):
    # x' = x + s y: every corner sees edges (1,0,0), (s,1,0), (0,0,1)
    x = UNIT.copy()
    x[:, 0] += s * x[:, 1]
    assert scaled_jacobian(x) == pytest.approx(1.0 / np.sqrt(1.0 + s * s), rel=1e-12)


def test_inverted_element_negative():
    x = UNIT.copy()
    x[:, 2] *= -1.0
    assert scaled_jacobian(x) == pytest.approx(-1.0)


def test_zero_edge_raises():
    x = UNIT.copy()
    x[1] = x[0]
    with pytest.raises(ZeroEdge):
        scaled_jacobian(x)
    assert scaled_jacobians(x[None])[0] == -1.0


@given(st.floats(0.01, 100.0), st.tuples(*[st.floats(-50, 50)] * 3))
@settings(max_examples=40, deadline=None)
def test_scaled_jacobian_invariant_to_scale_and_shift(scale, shift):
    rng = np.random.default_rng(3)
    x = UNIT + rng.uniform(-0.15, 0.15, (8, 3))
    ref = scaled_jacobian(x)
    assert scaled_jacobian(x * scale + np.array(shift)) == pytest.approx(ref, rel=1e-9)


def test_element_volume_of_parallelepiped():
    x = UNIT.copy()
    x[:, 0] += 0.7 * x[:, 1]
    x *= 2.0
    assert element_volumes(x[None])[0] == pytest.approx(8.0, rel=1e-12)


def test_box_mesh_counts():
    occ = np.ones((3, 4, 5), dtype=bool)
    mesh = build_voxel_mesh(occ, 0.5)
    assert mesh.n_elements == 60
    assert mesh.n_nodes == 4 * 5 * 6
    assert mesh_relative_density(mesh) == pytest.approx(1.0)
    assert np.all(scaled_jacobians(mesh.element_coords()) == 1.0)
    # nodes are numbered lexicographically on the grid
    assert np.all(np.diff(mesh.nodes[:, 2][:6]) > 0)


def test_empty_occupancy():
    with pytest.raises(EmptyMesh):
        build_voxel_mesh(np.zeros((2, 2, 2), bool), 1.0)


def test_invalid_mesh_rejected():
    nodes = UNIT.copy()
    el = np.array([[0, 1, 2, 3, 4, 5, 6, 6]])
    with pytest.raises(InvalidMesh):
        HexMesh(nodes, el, 1.0, ((0, 0, 0), (1, 1, 1)))


def test_domain_not_divisible():
    with pytest.raises(DomainNotDivisible):
        VoxelGridSpec(0.3, (0, 0, 0), (10, 10, 10)).dims()
    assert VoxelGridSpec(0.125, (0, 0, 0), (10, 10, 10)).dims() == (80, 80, 80)


def test_classification_rules_nest(lattice45):
    lo, hi = (0, 0, 0), (5, 5, 5)
    occ = {r: classify_voxels(lattice45, VoxelGridSpec(0.5, lo, hi, r)) for r in ("intersect", "fraction",
                                                                                  "centroid")}
    # intersect keeps every voxel that any other rule keeps
    assert np.all(occ["intersect"] >= occ["fraction"])
    assert np.all(occ["intersect"] >= occ["centroid"])
    assert occ["centroid"].mean() == pytest.approx(0.45, abs=0.05)


def _union_find_components(elements):
    parent = list(range(len(elements)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    owner = {}
    faces = [(0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4), (3, 2, 6, 7), (0, 3, 7, 4), (1, 2, 6, 5)]
    for e, el in enumerate(elements):
        for f in faces:
            key = tuple(sorted(el[list(f)]))
            if key in owner:
                parent[find(e)] = find(owner[key])
            else:
                owner[key] = e
    roots = [find(e) for e in range(len(elements))]
    return roots


def test_components_match_union_find():
    rng = np.random.default_rng(5)
    occ = rng.random((6, 6, 6)) < 0.45
    mesh = build_voxel_mesh(occ, 1.0)
    labels = element_components(mesh, "face")
    roots = _union_find_components(mesh.elements)
    # same partition: label pairs equal iff root pairs equal
    a = labels[:, None] == labels[None, :]
    b = np.array(roots)[:, None] == np.array(roots)[None, :]
    np.testing.assert_array_equal(a, b)


def test_filter_drops_floating_island():
    occ = np.zeros((4, 4, 4), bool)
    occ[1, 1, :] = True  # column spanning bottom to top
    occ[3, 3, 1:3] = True  # island
    mesh = filter_components(build_voxel_mesh(occ, 1.0), "spanning")
    assert mesh.n_elements == 4
    occ[1, 1, 2] = False
    with pytest.raises(NoSpanningComponent):
        filter_components(build_voxel_mesh(occ, 1.0), "spanning")


def test_conform_guarantee_and_density(lattice45):
    spec = VoxelGridSpec(0.5, (0, 0, 0), (5, 5, 5))
    vox = voxel_mesh(lattice45, spec)
    for mj in (0.6, 0.3):
        conf = conform_to_surface(vox, lattice45, mj)
        sj = scaled_jacobians(conf.element_coords())
        assert sj.min() >= mj - 1e-9
        assert conf.n_elements == vox.n_elements
        # box nodes stay on their box planes
        lo, hi = conf.bounds
        on = (np.abs(vox.nodes - lo) < 1e-12) | (np.abs(vox.nodes - hi) < 1e-12)
        np.testing.assert_array_equal(conf.nodes[on], vox.nodes[on])
    assert abs(mesh_relative_density(conf) - 0.45) < abs(mesh_relative_density(vox) - 0.45)
    same = conform_to_surface(vox, lattice45, 1.0)
    np.testing.assert_array_equal(same.nodes, vox.nodes)


def test_quality_report():
    mesh = build_voxel_mesh(np.ones((2, 2, 2), bool), 1.0)
    q = quality_report(mesh, 2)
    assert q.element_count == 8
    assert q.elements_per_cell == 1.0
    assert q.min_scaled_jacobian == 1.0
    assert q.histogram[-1] == 8


def test_vtk_roundtrip_with_meshio(tmp_path):
    meshio = pytest.importorskip("meshio")
    rng = np.random.default_rng(2)
    mesh = build_voxel_mesh(rng.random((3, 3, 3)) < 0.6, 0.25, (1.0, 2.0, 3.0))
    u = rng.normal(size=(mesh.n_nodes, 3))
    sj = scaled_jacobians(mesh.element_coords())
    path = tmp_path / "m.vtk"
    write_vtk(mesh, path, point_data={"u": u}, cell_data={"sj": sj})
    m = meshio.read(path)
    np.testing.assert_allclose(m.points, mesh.nodes, rtol=1e-9)
    np.testing.assert_array_equal(m.cells_dict["hexahedron"], mesh.elements)
    np.testing.assert_allclose(m.point_data["u"], u, rtol=1e-9)
    np.testing.assert_allclose(np.ravel(m.cell_data["sj"][0]), sj)


def test_occupancy_roundtrip(tmp_path):
    occ = np.random.default_rng(4).random((3, 5, 7)) < 0.5
    write_occupancy(tmp_path / "o.bin", occ, 0.25, (1.0, 0.0, -2.0))
    back, h, origin = read_occupancy(tmp_path / "o.bin")
    np.testing.assert_array_equal(back, occ)
    assert h == 0.25
    np.testing.assert_array_equal(origin, [1.0, 0.0, -2.0])
