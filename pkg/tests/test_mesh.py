"""Mesh generation, P2 enrichment and MSH round-trip tests."""

import numpy as np
import pytest

from arterysim.errors import MeshError, MeshParseError
from arterysim.mesh import (Mesh, enrich_p2, generate_cube_mesh,
                            generate_tube_mesh, read_gmsh, write_gmsh,
                            TET_FACES)


def face_multiplicities(tets):
    faces = np.sort(tets[:, TET_FACES].reshape(-1, 3), axis=1)
    _, counts = np.unique(faces, axis=0, return_counts=True)
    return counts


class TestCube:
    def test_single_voxel(self):
        mesh = generate_cube_mesh(1)
        assert mesh.n_vertices == 8
        assert mesh.n_tets == 5
        mesh.validate()

    def test_volume_exact(self):
        mesh = generate_cube_mesh(2, side=1.0)
        assert mesh.n_tets == 40
        assert np.isclose(mesh.tet_volumes().sum(), 1.0, rtol=1e-14)
        mesh = generate_cube_mesh(3, side=2.5)
        assert np.isclose(mesh.tet_volumes().sum(), 2.5 ** 3, rtol=1e-13)

    def test_conformity(self):
        mesh = generate_cube_mesh(3)
        counts = face_multiplicities(mesh.tets)
        assert set(counts) <= {1, 2}
        n_boundary = np.sum(counts == 1)
        assert n_boundary == len(mesh.boundary_tris)

    def test_boundary_tags_partition(self):
        mesh = generate_cube_mesh(2)
        names = {t.name for t in mesh.tags}
        assert {"x0", "x1", "y0", "y1", "z0", "z1"} <= names
        assert np.all(mesh.boundary_tag_ids >= 0)
        # each cube face covers side^2 in triangle area
        for name in ("x0", "z1"):
            tris = mesh.boundary_tris[mesh.tris_of_tag(name)]
            p = mesh.vertices[tris]
            area = 0.5 * np.linalg.norm(
                np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1).sum()
            assert np.isclose(area, 1.0, rtol=1e-12)

    def test_outward_orientation(self):
        mesh = generate_cube_mesh(2)
        center = np.array([0.5, 0.5, 0.5])
        p = mesh.vertices[mesh.boundary_tris]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        outward = np.einsum("ij,ij->i", n, p.mean(axis=1) - center)
        assert np.all(outward > 0)

    def test_invalid_inputs(self):
        with pytest.raises(MeshError):
            generate_cube_mesh(0)
        with pytest.raises(MeshError):
            generate_cube_mesh(2, side=-1.0)


class TestTube:
    def test_quarter_annulus_volume(self):
        mesh = generate_tube_mesh(1.0, 1.25, 0.75, np.pi / 2, (2, 32, 3))
        exact = (np.pi / 4) * (1.25 ** 2 - 1.0 ** 2) * 0.75
        vol = mesh.tet_volumes().sum()
        assert abs(vol - exact) / exact < 0.01

    def test_fiber_orientation(self):
        mesh = generate_tube_mesh(1.0, 1.25, 0.75, np.pi / 2, (1, 8, 2))
        cent = mesh.vertices[mesh.tets].mean(axis=1)
        e_r = np.column_stack([cent[:, 0], cent[:, 1], np.zeros(len(cent))])
        e_r /= np.linalg.norm(e_r, axis=1, keepdims=True)
        th = np.arctan2(cent[:, 1], cent[:, 0])
        e_th = np.column_stack([-np.sin(th), np.cos(th), np.zeros(len(th))])
        for f in range(2):
            radial = np.einsum("ij,ij->i", mesh.fibers[:, f], e_r)
            circ = np.einsum("ij,ij->i", mesh.fibers[:, f], e_th)
            assert np.max(np.abs(radial)) < 1e-12
            assert np.allclose(np.abs(circ), np.cos(np.deg2rad(30)), atol=1e-12)

    def test_reference_inner_radius(self):
        mesh = generate_tube_mesh(1.0, 1.25, 0.75, np.pi / 2, (1, 6, 2))
        tris = mesh.boundary_tris[mesh.tris_of_tag("inner_wall")]
        r = np.hypot(*mesh.vertices[np.unique(tris)][:, :2].T)
        assert np.allclose(r, 1.0, atol=1e-12)

    def test_tags_and_conformity(self):
        mesh = generate_tube_mesh(1.0, 1.25, 0.75, np.pi / 2, (2, 6, 2))
        mesh.validate()
        names = {t.name for t in mesh.tags}
        assert {"inner_wall", "outer_wall", "z_min", "z_max",
                "theta_min", "theta_max"} == names

    def test_full_tube(self):
        mesh = generate_tube_mesh(1.0, 1.25, 0.75, 2 * np.pi, (1, 16, 2))
        mesh.validate()
        names = {t.name for t in mesh.tags}
        assert "theta_min" not in names
        exact = np.pi * (1.25 ** 2 - 1.0 ** 2) * 0.75
        assert abs(mesh.tet_volumes().sum() - exact) / exact < 0.03

    def test_degenerate_rejected(self):
        with pytest.raises(MeshError):
            generate_tube_mesh(1.0, 0.8, 0.75, np.pi / 2, (1, 4, 1))
        with pytest.raises(MeshError):
            generate_tube_mesh(1.0, 1.25, 0.75, np.pi / 2, (0, 4, 1))


class TestEnrichP2:
    def test_single_tet(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
        tets = np.array([[0, 1, 2, 3]])
        tris = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
        mesh = Mesh(verts, tets, tris, np.zeros(4, dtype=int),
                    [__import__("arterysim.mesh", fromlist=["BoundaryTag"]).BoundaryTag("all")])
        p2 = enrich_p2(mesh)
        assert p2.n_nodes == 10
        assert p2.tet_nodes.shape == (1, 10)

    def test_shared_edges_created_once(self):
        mesh = generate_cube_mesh(1)
        p2 = enrich_p2(mesh)
        # two tets sharing a face share the face's three edge midpoints
        ids = p2.tet_nodes
        all_midpoints = ids[:, 4:].ravel()
        assert len(np.unique(all_midpoints)) == len(p2.edges)

    def test_node_count_matches_bruteforce_edges(self):
        mesh = generate_cube_mesh(2)
        p2 = enrich_p2(mesh)
        edges = set()
        for tet in mesh.tets:
            for i in range(4):
                for j in range(i + 1, 4):
                    edges.add((min(tet[i], tet[j]), max(tet[i], tet[j])))
        assert p2.n_nodes == mesh.n_vertices + len(edges)

    def test_midpoints_at_edge_midpoints(self):
        mesh = generate_tube_mesh(1.0, 1.25, 0.5, np.pi / 2, (1, 4, 1))
        p2 = enrich_p2(mesh)
        mid = 0.5 * (p2.vertices[p2.edges[:, 0]] + p2.vertices[p2.edges[:, 1]])
        assert np.allclose(p2.nodes[mesh.n_vertices:], mid, atol=1e-15)

    def test_double_enrichment_rejected(self):
        p2 = enrich_p2(generate_cube_mesh(1))
        with pytest.raises(MeshError):
            enrich_p2(p2)

    def test_boundary_triangles_gain_edge_nodes(self):
        p2 = enrich_p2(generate_cube_mesh(2))
        tri = p2.tri_nodes
        v, m = p2.nodes[tri[:, :3]], p2.nodes[tri[:, 3:]]
        assert np.allclose(m[:, 0], 0.5 * (v[:, 0] + v[:, 1]), atol=1e-15)
        assert np.allclose(m[:, 1], 0.5 * (v[:, 1] + v[:, 2]), atol=1e-15)
        assert np.allclose(m[:, 2], 0.5 * (v[:, 2] + v[:, 0]), atol=1e-15)


class TestGmshIO:
    SINGLE_TET = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 0 1 0
4 0 0 1
$EndNodes
$Elements
1
1 4 2 0 1 1 2 3 4
$EndElements
"""

    def test_single_tet_file(self, tmp_path):
        path = tmp_path / "single.msh"
        path.write_text(self.SINGLE_TET)
        mesh = read_gmsh(path)
        assert mesh.n_tets == 1
        assert mesh.n_vertices == 4

    def test_unsupported_element_type(self, tmp_path):
        bad = self.SINGLE_TET.replace("1 4 2 0 1 1 2 3 4",
                                      "1 5 2 0 1 1 2 3 4")
        path = tmp_path / "hex.msh"
        path.write_text(bad)
        with pytest.raises(MeshParseError) as err:
            read_gmsh(path)
        assert "type 5" in str(err.value)
        assert err.value.line is not None

    def test_dangling_node_reference(self, tmp_path):
        bad = self.SINGLE_TET.replace("1 4 2 0 1 1 2 3 4",
                                      "1 4 2 0 1 1 2 3 9")
        path = tmp_path / "dangling.msh"
        path.write_text(bad)
        with pytest.raises(MeshParseError):
            read_gmsh(path)

    def test_roundtrip_cube(self, tmp_path):
        mesh = generate_cube_mesh(2)
        path = tmp_path / "cube.msh"
        write_gmsh(mesh, path)
        back = read_gmsh(path)
        assert np.allclose(back.vertices, mesh.vertices)
        assert np.array_equal(np.sort(back.tets, axis=1),
                              np.sort(mesh.tets, axis=1))
        assert np.array_equal(
            np.sort(np.sort(back.boundary_tris, axis=1), axis=0),
            np.sort(np.sort(mesh.boundary_tris, axis=1), axis=0))
        names = [t.name for t in back.tags]
        assert names == [t.name for t in mesh.tags]
