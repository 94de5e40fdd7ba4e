"""Tetrahedral meshes for the unit cube and idealized artery segments.

Meshes are linear on construction; quadratic (10-node) connectivity is added
by :func:`enrich_p2`.  Geometry is affine per element throughout, midedge
nodes sit at arithmetic edge midpoints.  Lengths are millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MeshError, MeshParseError

GEOM_TOL = 1e-9

#: Local edges of a tetrahedron, defining the P2 node order (4 vertices
#: followed by the midpoints of these edges).
TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

#: Local faces, each opposite to the omitted vertex.
TET_FACES = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))


@dataclass(frozen=True)
class BoundaryTag:
    """Named boundary patch and the condition kind it defaults to."""

    name: str
    kind: str = "free"  # Dirichlet-displacement | Dirichlet-concentration |
    #                     follower-pressure | free

    def __post_init__(self):
        kinds = {"Dirichlet-displacement", "Dirichlet-concentration",
                 "follower-pressure", "free"}
        if self.kind not in kinds:
            raise MeshError(f"unknown boundary tag kind {self.kind!r}")


@dataclass
class Mesh:
    """Conforming tetrahedral mesh with tagged boundary and fiber field.

    vertices/tets describe the linear mesh; after P2 enrichment `nodes`
    holds vertex plus midedge coordinates, `tet_nodes` the 10-node and
    `tri_nodes` the 6-node connectivity.  Boundary triangles are stored
    with outward orientation.  fibers has shape (n_tets, 2, 3), one pair
    of unit directions per element.
    """

    vertices: np.ndarray
    tets: np.ndarray
    boundary_tris: np.ndarray
    boundary_tag_ids: np.ndarray
    tags: list[BoundaryTag]
    fibers: np.ndarray | None = None
    edges: np.ndarray | None = None
    nodes: np.ndarray | None = None
    tet_nodes: np.ndarray | None = None
    tri_nodes: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_tets(self):
        return self.tets.shape[0]

    @property
    def is_p2(self):
        return self.nodes is not None

    @property
    def n_nodes(self):
        return self.nodes.shape[0] if self.is_p2 else self.n_vertices

    def tet_volumes(self):
        """Signed volumes; positive for correctly oriented elements."""
        v = self.vertices[self.tets]
        d = v[:, 1:] - v[:, :1]
        return np.linalg.det(d) / 6.0

    def tag_id(self, name):
        for i, t in enumerate(self.tags):
            if t.name == name:
                return i
        raise MeshError(f"no boundary tag named {name!r}")

    def tris_of_tag(self, name):
        return np.flatnonzero(self.boundary_tag_ids == self.tag_id(name))

    def validate(self):
        """Checks positivity, conformity and fiber normalization."""
        vol = self.tet_volumes()
        if np.any(vol <= 0):
            raise MeshError(f"{np.sum(vol <= 0)} tetrahedra with nonpositive volume")
        counts = _face_counts(self.tets)[1]
        if np.any(counts > 2):
            raise MeshError("non-conforming mesh: face shared by > 2 elements")
        if self.fibers is not None:
            norms = np.linalg.norm(self.fibers, axis=-1)
            if np.any(np.abs(norms - 1.0) > 1e-12):
                raise MeshError("fiber vectors are not unit length")


def _face_counts(tets):
    """Sorted vertex triples of all element faces with multiplicities."""
    faces = tets[:, TET_FACES].reshape(-1, 3)
    faces = np.sort(faces, axis=1)
    return np.unique(faces, axis=0, return_counts=True)


def _fix_orientation(vertices, tets):
    v = vertices[tets]
    det = np.linalg.det(v[:, 1:] - v[:, :1])
    flip = det < 0
    tets[flip, 2], tets[flip, 3] = tets[flip, 3], tets[flip, 2].copy()
    if np.any(np.abs(np.linalg.det(
            vertices[tets][:, 1:] - vertices[tets][:, :1])) < GEOM_TOL):
        raise MeshError("degenerate (zero volume) tetrahedron generated")
    return tets


def _boundary_triangles(vertices, tets, surfaces):
    """Multiplicity-one faces, outward oriented and tagged geometrically.

    surfaces is a list of (name, kind, predicate) with predicate mapping
    vertex coordinates (m, 3) to a bool mask of membership.
    """
    faces = tets[:, TET_FACES].reshape(-1, 3)
    owner = np.repeat(np.arange(len(tets)), 4)
    key = np.sort(faces, axis=1)
    uniq, first, counts = np.unique(key, axis=0, return_index=True,
                                    return_counts=True)
    boundary = first[counts == 1]
    tris = faces[boundary]
    tri_owner = owner[boundary]

    # orient outward: normal must point away from the opposite tet vertex
    own = tets[tri_owner]
    opp = np.array([list(set(o) - set(t))[0] for o, t in zip(own, tris)])
    p = vertices[tris]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    inward = np.einsum("ij,ij->i", n, vertices[opp] - p[:, 0]) > 0
    tris[inward, 1], tris[inward, 2] = tris[inward, 2], tris[inward, 1].copy()

    tags = [BoundaryTag(name, kind) for name, kind, _ in surfaces]
    tag_ids = np.full(len(tris), -1, dtype=int)
    for tid, (_, _, pred) in enumerate(surfaces):
        member = pred(vertices)
        on = member[tris].all(axis=1) & (tag_ids < 0)
        tag_ids[on] = tid
    if np.any(tag_ids < 0):
        tags.append(BoundaryTag("untagged", "free"))
        tag_ids[tag_ids < 0] = len(tags) - 1
    return tris, tag_ids, tags


def _default_plane_fibers(n_tets, angle_rad):
    """Two crosswise directions at +-angle to the x axis in the x-y plane."""
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    f = np.empty((n_tets, 2, 3))
    f[:, 0] = (c, s, 0.0)
    f[:, 1] = (c, -s, 0.0)
    return f


def generate_cube_mesh(n, side=1.0, fiber_angle_deg=30.0):
    """Voxel cube split into five tetrahedra per voxel.

    The split orientation alternates in a checkerboard pattern so shared
    faces conform.  Boundary faces are tagged x0, x1, y0, y1, z0, z1.
    """
    if n < 1:
        raise MeshError("voxel count must be at least 1")
    if side <= 0:
        raise MeshError("side length must be positive")
    grid = np.arange(n + 1) * (side / n)
    X, Y, Z = np.meshgrid(grid, grid, grid, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    even = ((0, 0, 0), (1, 1, 0), (1, 0, 1), (0, 1, 1))
    odd = ((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1))
    tets = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                corners = even if (i + j + k) % 2 == 0 else odd
                central = odd if (i + j + k) % 2 == 0 else even
                for (a, b, c) in corners:
                    base = (i + a, j + b, k + c)
                    nb = [(i + (1 - a), j + b, k + c),
                          (i + a, j + (1 - b), k + c),
                          (i + a, j + b, k + (1 - c))]
                    tets.append([vid(*base)] + [vid(*q) for q in nb])
                tets.append([vid(i + a, j + b, k + c) for (a, b, c) in central])
    tets = _fix_orientation(vertices, np.asarray(tets, dtype=int))

    tol = 1e-9 * side
    surfaces = [
        ("x0", "free", lambda v: np.abs(v[:, 0]) < tol),
        ("x1", "free", lambda v: np.abs(v[:, 0] - side) < tol),
        ("y0", "free", lambda v: np.abs(v[:, 1]) < tol),
        ("y1", "free", lambda v: np.abs(v[:, 1] - side) < tol),
        ("z0", "free", lambda v: np.abs(v[:, 2]) < tol),
        ("z1", "free", lambda v: np.abs(v[:, 2] - side) < tol),
    ]
    tris, tag_ids, tags = _boundary_triangles(vertices, tets, surfaces)
    fibers = _default_plane_fibers(len(tets), np.deg2rad(fiber_angle_deg))
    return Mesh(vertices, tets, tris, tag_ids, tags, fibers=fibers)


def generate_tube_mesh(r_in, r_out, length, angle, resolution,
                       fiber_angle_deg=30.0):
    """Structured tube segment, six conforming tetrahedra per hexahedron.

    resolution = (n_r, n_theta, n_z).  The inner wall is tagged for a
    follower pressure; cut planes and end caps are tagged for symmetry
    displacement conditions.  Fibers lie in the local circumferential-axial
    plane at +-fiber_angle to the circumferential direction, evaluated at
    each element centroid.
    """
    if not (0 < r_in < r_out):
        raise MeshError("need 0 < r_in < r_out")
    if not (0 < angle <= 2 * np.pi + GEOM_TOL):
        raise MeshError("opening angle must lie in (0, 2*pi]")
    nr, nth, nz = resolution
    if min(nr, nth, nz) < 1:
        raise MeshError("all resolutions must be at least 1")
    full = abs(angle - 2 * np.pi) < GEOM_TOL

    rs = np.linspace(r_in, r_out, nr + 1)
    ths = np.linspace(0.0, angle, nth + 1)
    zs = np.linspace(0.0, length, nz + 1)
    n_th_nodes = nth if full else nth + 1

    def vid(i, j, k):
        return (i * n_th_nodes + (j % n_th_nodes)) * (nz + 1) + k

    verts = np.empty(((nr + 1) * n_th_nodes * (nz + 1), 3))
    for i, r in enumerate(rs):
        for j in range(n_th_nodes):
            for k, z in enumerate(zs):
                th = ths[j]
                verts[vid(i, j, k)] = (r * np.cos(th), r * np.sin(th), z)

    # Kuhn split: one tetrahedron per vertex permutation of the hex diagonal
    perms = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))
    tets = []
    for i in range(nr):
        for j in range(nth):
            for k in range(nz):
                corner = np.array([i, j, k])
                for perm in perms:
                    path = [corner.copy()]
                    for axis in perm:
                        nxt = path[-1].copy()
                        nxt[axis] += 1
                        path.append(nxt)
                    tets.append([vid(*p) for p in path])
    tets = _fix_orientation(verts, np.asarray(tets, dtype=int))

    tol = 1e-9 * max(r_out, length)
    rad = lambda v: np.hypot(v[:, 0], v[:, 1])
    surfaces = [
        ("inner_wall", "follower-pressure", lambda v: np.abs(rad(v) - r_in) < tol),
        ("outer_wall", "free", lambda v: np.abs(rad(v) - r_out) < tol),
        ("z_min", "Dirichlet-displacement", lambda v: np.abs(v[:, 2]) < tol),
        ("z_max", "Dirichlet-displacement", lambda v: np.abs(v[:, 2] - length) < tol),
    ]
    if not full:
        ang_tol = 1e-9 * max(1.0, angle) + tol / r_in

        def node_angle(v):
            return np.mod(np.arctan2(v[:, 1], v[:, 0]), 2 * np.pi)

        surfaces += [
            ("theta_min", "Dirichlet-displacement",
             lambda v: np.minimum(node_angle(v),
                                  2 * np.pi - node_angle(v)) < ang_tol),
            ("theta_max", "Dirichlet-displacement",
             lambda v: np.abs(node_angle(v) - angle) < ang_tol),
        ]
    tris, tag_ids, tags = _boundary_triangles(verts, tets, surfaces)

    beta = np.deg2rad(fiber_angle_deg)
    cent = verts[tets].mean(axis=1)
    th_c = np.arctan2(cent[:, 1], cent[:, 0])
    e_th = np.column_stack([-np.sin(th_c), np.cos(th_c), np.zeros_like(th_c)])
    e_z = np.array([0.0, 0.0, 1.0])
    fibers = np.empty((len(tets), 2, 3))
    fibers[:, 0] = np.cos(beta) * e_th + np.sin(beta) * e_z
    fibers[:, 1] = np.cos(beta) * e_th - np.sin(beta) * e_z
    fibers /= np.linalg.norm(fibers, axis=-1, keepdims=True)

    mesh = Mesh(verts, tets, tris, tag_ids, tags, fibers=fibers,
                extras={"axis": "z", "r_in": r_in, "r_out": r_out})
    mesh.validate()
    return mesh


def enrich_p2(mesh: Mesh) -> Mesh:
    """Adds one midpoint node per unique edge, yielding 10-node elements."""
    if mesh.is_p2:
        raise MeshError("mesh is already quadratic")
    nv = mesh.n_vertices
    raw = mesh.tets[:, TET_EDGES].reshape(-1, 2)
    raw = np.sort(raw, axis=1)
    edges, inverse = np.unique(raw, axis=0, return_inverse=True)
    tet_nodes = np.hstack([mesh.tets, nv + inverse.reshape(-1, 6)])
    nodes = np.vstack([mesh.vertices,
                       0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])

    # midpoints of the boundary triangle edges via lookup in the edge list
    key = edges[:, 0].astype(np.int64) * nv + edges[:, 1]
    order = np.argsort(key)
    tri = mesh.boundary_tris
    tri_nodes = np.empty((len(tri), 6), dtype=int)
    tri_nodes[:, :3] = tri
    for m, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
        lo = np.minimum(tri[:, a], tri[:, b]).astype(np.int64)
        hi = np.maximum(tri[:, a], tri[:, b])
        want = lo * nv + hi
        pos = order[np.searchsorted(key[order], want)]
        if np.any(key[pos] != want):
            raise MeshError("boundary triangle edge missing from edge list")
        tri_nodes[:, 3 + m] = nv + pos

    return Mesh(mesh.vertices, mesh.tets, mesh.boundary_tris,
                mesh.boundary_tag_ids, list(mesh.tags), fibers=mesh.fibers,
                edges=edges, nodes=nodes, tet_nodes=tet_nodes,
                tri_nodes=tri_nodes, extras=dict(mesh.extras))


# ---------------------------------------------------------------------------
# Gmsh MSH 2.2 ASCII I/O
# ---------------------------------------------------------------------------

def read_gmsh(path, tag_map=None, fibers=None):
    """Reads an ASCII MSH v2.2 file with tetrahedra and boundary triangles.

    tag_map maps physical ids to tag names or BoundaryTag instances and
    overrides names from a $PhysicalNames section.  Unsupported element
    types raise a parse error naming the line.
    """
    with open(path, "r") as fh:
        lines = fh.read().splitlines()

    def fail(msg, ln):
        raise MeshParseError(msg, line=ln + 1)

    sections = {}
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if line.startswith("$") and not line.startswith("$End"):
            name = line[1:]
            end = f"$End{name}"
            j = i + 1
            while j < len(lines) and lines[j].strip() != end:
                j += 1
            if j >= len(lines):
                fail(f"section {name} is not terminated", i)
            sections[name] = (i + 1, lines[i + 1:j])
            i = j + 1
        else:
            i += 1

    if "MeshFormat" in sections:
        start, body = sections["MeshFormat"]
        if not body or not body[0].strip().startswith("2.2"):
            fail("unsupported MSH version (need 2.2 ASCII)", start)
    if "Nodes" not in sections or "Elements" not in sections:
        raise MeshParseError("missing $Nodes or $Elements section", line=1)

    start, body = sections["Nodes"]
    try:
        n_nodes = int(body[0])
    except (ValueError, IndexError):
        fail("invalid node count", start)
    if len(body) - 1 != n_nodes:
        fail(f"expected {n_nodes} node lines, found {len(body) - 1}", start)
    ids = np.empty(n_nodes, dtype=np.int64)
    coords = np.empty((n_nodes, 3))
    for m, ln in enumerate(body[1:]):
        parts = ln.split()
        if len(parts) != 4:
            fail("node line must be: id x y z", start + 1 + m)
        ids[m] = int(parts[0])
        coords[m] = [float(p) for p in parts[1:]]
    id_to_idx = {int(v): m for m, v in enumerate(ids)}

    start, body = sections["Elements"]
    try:
        n_elem = int(body[0])
    except (ValueError, IndexError):
        fail("invalid element count", start)
    if len(body) - 1 != n_elem:
        fail(f"expected {n_elem} element lines, found {len(body) - 1}", start)
    tets, tris, tri_phys = [], [], []
    for m, ln in enumerate(body[1:]):
        lno = start + 1 + m
        parts = ln.split()
        if len(parts) < 3:
            fail("element line too short", lno)
        etype, ntags = int(parts[1]), int(parts[2])
        conn = parts[3 + ntags:]
        phys = int(parts[3]) if ntags >= 1 else 0
        try:
            conn = [id_to_idx[int(p)] for p in conn]
        except KeyError as exc:
            fail(f"element references unknown node {exc.args[0]}", lno)
        if etype == 4:
            if len(conn) != 4:
                fail("tetrahedron needs 4 nodes", lno)
            tets.append(conn)
        elif etype == 2:
            if len(conn) != 3:
                fail("triangle needs 3 nodes", lno)
            tris.append(conn)
            tri_phys.append(phys)
        else:
            fail(f"unsupported element type {etype}", lno)
    if not tets:
        raise MeshParseError("file contains no tetrahedra", line=start + 1)

    tets = _fix_orientation(coords, np.asarray(tets, dtype=int))

    names = {}
    if "PhysicalNames" in sections:
        _, body = sections["PhysicalNames"]
        for ln in body[1:]:
            parts = ln.split(maxsplit=2)
            if len(parts) == 3:
                names[int(parts[1])] = parts[2].strip().strip('"')
    tag_map = tag_map or {}

    phys_ids = sorted(set(tri_phys))
    tags = []
    tag_of_phys = {}
    for p in phys_ids:
        mapped = tag_map.get(p, names.get(p, f"phys_{p}"))
        if not isinstance(mapped, BoundaryTag):
            mapped = BoundaryTag(str(mapped), "free")
        tag_of_phys[p] = len(tags)
        tags.append(mapped)

    if tris:
        tris = np.asarray(tris, dtype=int)
        tag_ids = np.array([tag_of_phys[p] for p in tri_phys], dtype=int)
        tris, tag_ids = _orient_boundary(coords, tets, tris, tag_ids)
    else:
        surfaces = []
        tris, tag_ids, tags = _boundary_triangles(coords, tets, surfaces)

    mesh = Mesh(coords, tets, tris, tag_ids, tags, fibers=fibers)
    mesh.validate()
    return mesh


def _orient_boundary(vertices, tets, tris, tag_ids):
    """Outward-orients file-provided boundary triangles via tet ownership."""
    faces = tets[:, TET_FACES].reshape(-1, 3)
    owner = np.repeat(np.arange(len(tets)), 4)
    fkey = {tuple(f): o for f, o in zip(np.sort(faces, axis=1).tolist(), owner)}
    out = tris.copy()
    for m, t in enumerate(np.sort(tris, axis=1).tolist()):
        o = fkey.get(tuple(t))
        if o is None:
            raise MeshParseError("boundary triangle does not match any "
                                 "tetrahedron face")
        opp = list(set(tets[o]) - set(t))[0]
        p = vertices[out[m]]
        n = np.cross(p[1] - p[0], p[2] - p[0])
        if n @ (vertices[opp] - p[0]) > 0:
            out[m, 1], out[m, 2] = out[m, 2], out[m, 1]
    return out, tag_ids


def write_gmsh(mesh: Mesh, path):
    """Writes the linear mesh as ASCII MSH v2.2."""
    with open(path, "w") as fh:
        fh.write("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n")
        if mesh.tags:
            fh.write("$PhysicalNames\n%d\n" % len(mesh.tags))
            for i, t in enumerate(mesh.tags):
                fh.write(f'2 {i + 1} "{t.name}"\n')
            fh.write("$EndPhysicalNames\n")
        fh.write("$Nodes\n%d\n" % mesh.n_vertices)
        for i, p in enumerate(mesh.vertices):
            fh.write(f"{i + 1} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        fh.write("$EndNodes\n")
        n_elem = mesh.n_tets + len(mesh.boundary_tris)
        fh.write("$Elements\n%d\n" % n_elem)
        eid = 1
        for t, tag in zip(mesh.boundary_tris, mesh.boundary_tag_ids):
            fh.write(f"{eid} 2 2 {tag + 1} {tag + 1} "
                     f"{t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
            eid += 1
        for t in mesh.tets:
            fh.write(f"{eid} 4 2 0 0 {t[0] + 1} {t[1] + 1} {t[2] + 1} {t[3] + 1}\n")
            eid += 1
        fh.write("$EndElements\n")
