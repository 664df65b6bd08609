import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simlmc import checks
from simlmc.errors import MaterialError, MeshError, MeshFormatError, NestingError, SolverError
from simlmc.meshfem import (
    GAUSS_XI,
    Mesh2D,
    MeshHierarchy,
    assemble_and_solve,
    assemble_stiffness,
    build_plate_hierarchy,
    element_stiffness,
    extract_qoi,
    isotropic_plane_stress,
    load_mesh_hierarchy,
    load_vector,
    orthotropic_plane_stress,
    read_mesh,
    write_mesh,
    write_mesh_hierarchy,
)

# deterministic orthotropic plate, max total displacement on level 3 (cm)
BASELINE_MAX_TOTAL_L3 = 0.002319436183479686


def test_plate_element_counts(plate):
    assert [m.n_elements for m in plate.meshes] == [12, 48, 192, 768]
    assert [m.n_nodes for m in plate.meshes] == [21, 65, 225, 833]


def test_element_size_halves(plate):
    np.testing.assert_allclose(plate.h[:-1] / plate.h[1:], 2.0, rtol=1e-14)


def test_single_element_hierarchy():
    h = build_plate_hierarchy(1.0, 1.0, 1, 1, 0)
    assert len(h) == 1
    assert h[0].n_elements == 1 and h[0].n_nodes == 4


def test_all_coarse_nodes_found_on_level_one():
    h = build_plate_hierarchy(7.0, 21.7, 2, 6, 1)
    assert len(h.common_nodes[1]) == 21
    np.testing.assert_array_equal(h[1].nodes[h.common_nodes[1]], h[0].nodes)


def test_common_coordinates_bitwise_identical(plate):
    for level in range(len(plate)):
        assert np.array_equal(plate[level].nodes[plate.common_nodes[level]], plate[0].nodes)


@pytest.mark.parametrize("kw", [dict(width=0.0), dict(height=-1.0), dict(nx0=0), dict(L=-1)])
def test_invalid_geometry(kw):
    with pytest.raises(MeshError):
        build_plate_hierarchy(**kw)


def test_mesh_file_round_trip(tmp_path):
    h = build_plate_hierarchy(L=1)
    write_mesh_hierarchy(h, tmp_path)
    back = load_mesh_hierarchy(tmp_path)
    assert len(back) == 2
    for a, b in zip(h.meshes, back.meshes):
        np.testing.assert_array_equal(a.nodes, b.nodes)
        np.testing.assert_array_equal(a.elements, b.elements)
        np.testing.assert_array_equal(a.dirichlet, b.dirichlet)
        np.testing.assert_array_equal(a.neumann_traction, b.neumann_traction)
    np.testing.assert_array_equal(back.common_nodes[1], h.common_nodes[1])


def test_bad_element_reference_is_named(tmp_path):
    mesh = build_plate_hierarchy(L=0)[0]
    path = tmp_path / "mesh_l0.txt"
    write_mesh(mesh, path)
    lines = path.read_text().splitlines()
    k = lines.index(f"elements {mesh.n_elements}") + 4
    lines[k] = "3 0 1 99 2"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(MeshError, match="element 3"):
        read_mesh(path)


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "mesh_l0.txt"
    path.write_text("nodes 2\n0 0.0 0.0\n1 abc 0.0\n")
    with pytest.raises(MeshFormatError) as err:
        read_mesh(path)
    assert err.value.line == 3


def test_nesting_violation(tmp_path):
    h = build_plate_hierarchy(L=1)
    write_mesh_hierarchy(h, tmp_path)
    fine = h[1]
    moved = fine.nodes.copy()
    moved[h.common_nodes[1][4]] += (1e-3, 0.0)
    write_mesh(Mesh2D(1, moved, fine.elements, fine.dirichlet, fine.neumann_edges, fine.neumann_traction),
               tmp_path / "mesh_l1.txt")
    with pytest.raises(NestingError, match="node 4"):
        load_mesh_hierarchy(tmp_path)


def test_missing_mesh_directory(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere"):
        load_mesh_hierarchy(tmp_path / "nowhere")


def test_dirichlet_neumann_overlap_rejected():
    m = build_plate_hierarchy(L=0)[0]
    top_nodes = m.neumann_nodes()
    with pytest.raises(MeshError):
        Mesh2D(0, m.nodes, m.elements, np.union1d(m.dirichlet, top_nodes[:1]),
               m.neumann_edges, m.neumann_traction).validate()


def test_patch_test():
    assert checks.patch_test(1e-10).passed


def test_uniaxial_plate():
    assert checks.uniaxial_test(1e-8).passed


def test_zero_load_gives_zero_displacement(plate):
    m = plate[1]
    quiet = Mesh2D(1, m.nodes, m.elements, m.dirichlet, m.neumann_edges, 0.0 * m.neumann_traction)
    f = assemble_and_solve(quiet, isotropic_plane_stress(1e6, 0.3))
    assert np.all(f.u == 0.0)


def test_empty_dirichlet_set_is_singular(plate):
    m = plate[0]
    free = Mesh2D(0, m.nodes, m.elements, np.array([], dtype=int), m.neumann_edges, m.neumann_traction)
    with pytest.raises(SolverError):
        assemble_and_solve(free, isotropic_plane_stress(1e6, 0.3), 1500.0)


def test_non_spd_material_rejected(plate):
    bad = isotropic_plane_stress(1e6, 0.3)
    bad[2, 2] = -1.0
    with pytest.raises(MaterialError):
        assemble_and_solve(plate[0], bad, 1500.0)


def test_orthotropic_matrix_symmetric_and_reciprocal():
    C = orthotropic_plane_stress(12000e2, 20000e2, 0.371, 5610e2)
    assert np.abs(C - C.T).max() <= 1e-12 * np.abs(C).max()
    S = np.linalg.inv(C)
    assert S[0, 1] == pytest.approx(-0.371 / 20000e2, rel=1e-12)
    assert S[2, 2] == pytest.approx(1.0 / 5610e2, rel=1e-12)


def test_stiffness_symmetric_with_rigid_body_null_space(plate):
    m = plate[1]
    K = assemble_stiffness(m, orthotropic_plane_stress(12000e2, 20000e2, 0.371, 5610e2)).toarray()
    assert np.abs(K - K.T).max() <= 1e-12 * np.abs(K).max()
    x, y = m.nodes.T
    for mode in (np.column_stack([np.ones_like(x), 0 * x]), np.column_stack([0 * x, np.ones_like(x)]),
                 np.column_stack([-y, x])):
        assert np.abs(K @ mode.ravel()).max() <= 1e-9 * np.abs(K).max()


def _reference_element_stiffness(xy, C):
    """Loop-based Q4 stiffness written independently of the vectorized assembly."""
    K = np.zeros((8, 8))
    for xi, eta in GAUSS_XI:
        dN = 0.25 * np.array([
            [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)],
            [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)],
        ])
        J = dN @ xy
        dNdx = np.linalg.solve(J, dN)
        B = np.zeros((3, 8))
        for a in range(4):
            B[0, 2 * a] = dNdx[0, a]
            B[1, 2 * a + 1] = dNdx[1, a]
            B[2, 2 * a] = dNdx[1, a]
            B[2, 2 * a + 1] = dNdx[0, a]
        K += B.T @ C @ B * np.linalg.det(J)
    return K


def test_element_stiffness_matches_reference_loop():
    mesh = checks.distorted_patch()
    C = orthotropic_plane_stress(12000e2, 20000e2, 0.371, 5610e2)
    Ke = element_stiffness(mesh, C)
    for e in range(mesh.n_elements):
        ref = _reference_element_stiffness(mesh.nodes[mesh.elements[e]], C)
        np.testing.assert_allclose(Ke[e], ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())


def test_orthotropic_plate_regression(plate, ortho_mean):
    field = assemble_and_solve(plate[3], ortho_mean.C_bar, 1500.0)
    assert np.all(np.isfinite(field.total))
    assert field.total.max() > 0.0
    assert np.all(field.total[plate[3].dirichlet] == 0.0)
    np.testing.assert_allclose(field.total, np.linalg.norm(field.u, axis=1), rtol=0, atol=0)
    assert field.total.max() == pytest.approx(BASELINE_MAX_TOTAL_L3, rel=1e-9)


def test_load_resultant_is_applied(plate):
    F = load_vector(plate[2], 1500.0)
    assert F[1::2].sum() == pytest.approx(-1500.0, rel=1e-13)
    assert abs(F[0::2].sum()) < 1e-12


def test_extract_qoi_identity_and_length(plate, ortho_mean):
    f0 = assemble_and_solve(plate[0], ortho_mean.C_bar, 1500.0)
    np.testing.assert_array_equal(extract_qoi(f0, plate), f0.total)
    f1 = assemble_and_solve(plate[1], ortho_mean.C_bar, 1500.0)
    assert extract_qoi(f1, plate).shape == (plate[0].n_nodes,)


def test_deterministic_convergence_order(plate, ortho_mean):
    from simlmc.mlmc import loglog_fit

    q = [extract_qoi(assemble_and_solve(plate[l], ortho_mean.C_bar, 1500.0), plate) for l in range(4)]
    diffs = [np.abs(q[l] - q[l - 1]).max() for l in range(1, 4)]
    alpha, _ = loglog_fit(plate.h[1:], diffs)
    assert 1.5 <= alpha <= 2.5


@settings(max_examples=10, deadline=None)
@given(st.randoms(use_true_random=False))
def test_solution_invariant_under_element_reordering(rnd):
    m = build_plate_hierarchy(L=1)[1]
    perm = list(range(m.n_elements))
    rnd.shuffle(perm)
    perm = np.array(perm)
    inv = np.argsort(perm)
    edges = m.neumann_edges.copy()
    edges[:, 0] = inv[edges[:, 0]]
    shuffled = Mesh2D(1, m.nodes, m.elements[perm], m.dirichlet, edges, m.neumann_traction)
    C = isotropic_plane_stress(1e6, 0.25)
    a = assemble_and_solve(m, C, 1500.0).u
    b = assemble_and_solve(shuffled, C, 1500.0).u
    np.testing.assert_allclose(b, a, rtol=1e-10, atol=1e-10 * np.abs(a).max())


def test_hierarchy_from_single_mesh():
    h = MeshHierarchy.from_meshes([build_plate_hierarchy(L=0)[0]])
    assert h.n_common == 21 and h.L == 0
