"""Quadratic tetrahedral discretization of the coupled problem.

Displacement (3 dofs per node) and drug concentration (1 dof per node) share
one P2 node set; the monolithic dof layout is all u-dofs first, then all
c-dofs.  Assembly is vectorized over elements.  The Jacobian is consistent:
the staggered internal-variable update is differentiated exactly through the
implicit local solve, so full Newton steps converge superlinearly.

Dirichlet conditions are imposed by row replacement (residual row = current
value minus target, Jacobian row = identity) which keeps the sparsity
pattern identical across Newton steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, MeshError
from .materials import (ActiveParams, DrugParams, GaussPointState,
                        KineticParams, PassiveParams, active_stress_scalars,
                        passive_energy_stress, update_internal_state)
from .mesh import Mesh
from .sparse_linalg import BlockSparseMatrix


@dataclass(frozen=True)
class MaterialSet:
    """Bundle of all constitutive parameters of one simulation."""

    passive: PassiveParams = field(default_factory=PassiveParams)
    kinetic: KineticParams = field(default_factory=KineticParams)
    active: ActiveParams = field(default_factory=ActiveParams)
    drug: DrugParams = field(default_factory=DrugParams)

    def validate(self):
        for p in (self.passive, self.kinetic, self.active, self.drug):
            p.validate()


@dataclass(frozen=True)
class DofMap:
    """Node-to-dof numbering: u dof = 3*node + comp, c dof = 3*N + node."""

    n_nodes: int

    @property
    def n_u(self):
        return 3 * self.n_nodes

    @property
    def n_c(self):
        return self.n_nodes

    @property
    def n_dofs(self):
        return 4 * self.n_nodes

    def u_dof(self, node, comp):
        return 3 * np.asarray(node) + comp

    def c_dof(self, node):
        return 3 * self.n_nodes + np.asarray(node)


@dataclass
class BlockVector:
    """Displacement / concentration pair over the monolithic layout."""

    u: np.ndarray
    c: np.ndarray

    def full(self):
        return np.concatenate([self.u, self.c])

    @classmethod
    def from_full(cls, x, n_u):
        return cls(u=np.asarray(x[:n_u]), c=np.asarray(x[n_u:]))

    @classmethod
    def zeros(cls, dofmap: DofMap):
        return cls(np.zeros(dofmap.n_u), np.zeros(dofmap.n_c))

    def norm(self):
        return float(np.sqrt(np.dot(self.u, self.u) + np.dot(self.c, self.c)))

    def copy(self):
        return BlockVector(self.u.copy(), self.c.copy())


# ---------------------------------------------------------------------------
# Reference element: P2 basis and quadrature
# ---------------------------------------------------------------------------

#: P2 midpoint numbering follows mesh.TET_EDGES.
_EDGE_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

_GRAD_BARY = np.array([[-1.0, -1.0, -1.0],
                       [1.0, 0.0, 0.0],
                       [0.0, 1.0, 0.0],
                       [0.0, 0.0, 1.0]])


def eval_p2_basis(point):
    """Quadratic Lagrange basis on the reference tetrahedron.

    point holds barycentric coordinates (lambda0..lambda3, nonnegative, sum
    one).  Returns (values[10], gradients[10, 3]) with gradients taken with
    respect to the reference coordinates (x, y, z) = (l1, l2, l3).
    """
    lam = np.asarray(point, dtype=float)
    if lam.shape != (4,) or np.any(lam < -1e-12) or abs(lam.sum() - 1) > 1e-12:
        raise ValueError("need nonnegative barycentric coordinates summing to 1")
    values = np.empty(10)
    grads = np.empty((10, 3))
    for i in range(4):
        values[i] = lam[i] * (2 * lam[i] - 1)
        grads[i] = (4 * lam[i] - 1) * _GRAD_BARY[i]
    for m, (a, b) in enumerate(_EDGE_PAIRS):
        values[4 + m] = 4 * lam[a] * lam[b]
        grads[4 + m] = 4 * (lam[a] * _GRAD_BARY[b] + lam[b] * _GRAD_BARY[a])
    return values, grads


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points and weights; weights sum to the reference volume."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")


def _perm_groups(*groups):
    pts, wts = [], []
    for w, bary in groups:
        seen = set()
        from itertools import permutations
        for p in permutations(bary):
            if p in seen:
                continue
            seen.add(p)
            pts.append(p)
            wts.append(w)
    return np.asarray(pts), np.asarray(wts)


def quadrature_rule(degree) -> QuadratureRule:
    """Symmetric tetrahedron rules exact for the requested degree."""
    if degree == 2:
        a = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
        b = (5.0 - np.sqrt(5.0)) / 20.0
        pts, wts = _perm_groups((0.25, (a, b, b, b)))
    elif degree == 4:
        a1, w1 = 0.3108859192633005, 0.1126879257180158
        a2, w2 = 0.0927352503108912, 0.0734930431163619
        a3, w3 = 0.0455037041256497, 0.0425460207770812
        pts, wts = _perm_groups(
            (w1, (a1, a1, a1, 1 - 3 * a1)),
            (w2, (a2, a2, a2, 1 - 3 * a2)),
            (w3, (a3, a3, 0.5 - a3, 0.5 - a3)))
    elif degree == 5:
        w0 = 0.0302836780970891 * 6
        w1, a1 = 0.0060267857142857 * 6, 0.0
        w2, a2 = 0.0116452490860290 * 6, 0.7272727272727273
        w3, b3 = 0.0109491415613865 * 6, 0.0665501535736643
        pts, wts = _perm_groups(
            (w0, (0.25, 0.25, 0.25, 0.25)),
            (w1, (a1, 1 / 3, 1 / 3, 1 / 3)),
            (w2, (a2, (1 - a2) / 3, (1 - a2) / 3, (1 - a2) / 3)),
            (w3, (b3, b3, 0.5 - b3, 0.5 - b3)))
    else:
        raise ValueError(f"unsupported quadrature degree {degree}")
    wts = wts / wts.sum() / 6.0
    return QuadratureRule(points=pts, weights=wts, degree=degree)


def triangle_quadrature(degree=4):
    """Symmetric triangle rule (6 points, degree 4); weights sum to 1/2."""
    if degree != 4:
        raise ValueError("only the degree-4 surface rule is provided")
    a1, w1 = 0.445948490915965, 0.223381589678011
    a2, w2 = 0.091576213509771, 0.109951743655322
    pts, wts = [], []
    for a, w in ((a1, w1), (a2, w2)):
        for bary in {(a, a, 1 - 2 * a), (a, 1 - 2 * a, a), (1 - 2 * a, a, a)}:
            pts.append(bary)
            wts.append(w)
    order = np.lexsort(np.asarray(pts).T)
    pts = np.asarray(pts)[order]
    wts = np.asarray(wts)[order]
    return pts, wts / wts.sum() / 2.0


def _tri6_basis(bary):
    """Quadratic basis on the reference triangle at barycentric points."""
    l0, l1, l2 = bary[..., 0], bary[..., 1], bary[..., 2]
    vals = np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                     4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0], axis=-1)
    # gradients wrt (xi, eta) with l1 = xi, l2 = eta, l0 = 1 - xi - eta
    g0 = np.array([-1.0, -1.0])
    g1 = np.array([1.0, 0.0])
    g2 = np.array([0.0, 1.0])
    grads = np.stack([
        (4 * l0 - 1)[..., None] * g0,
        (4 * l1 - 1)[..., None] * g1,
        (4 * l2 - 1)[..., None] * g2,
        4 * (l0[..., None] * g1 + l1[..., None] * g0),
        4 * (l1[..., None] * g2 + l2[..., None] * g1),
        4 * (l2[..., None] * g0 + l0[..., None] * g2)], axis=-2)
    return vals, grads


# ---------------------------------------------------------------------------
# Boundary conditions
# ---------------------------------------------------------------------------

@dataclass
class BoundaryConditions:
    """Dirichlet components and load surfaces, referenced by tag name.

    fixed_u lists (tag, component) pairs fixed to zero displacement;
    c_inflow_tags carry the drug inflow Dirichlet value supplied per
    assembly call; pressure_tag names the follower load surface.  With
    pressure_pull=True the traction acts along the outward normal (pulling)
    instead of against it.
    """

    fixed_u: list = field(default_factory=list)
    c_inflow_tags: list = field(default_factory=list)
    pressure_tag: str | None = None
    pressure_pull: bool = False


# ---------------------------------------------------------------------------
# Assembler
# ---------------------------------------------------------------------------

class Assembler:
    """Precomputed mesh data plus residual / Jacobian evaluation.

    Geometry is affine per element, so Jacobians of the reference map are
    constant per element and the basis gradients are precomputed per
    quadrature point.  tangent selects the consistent analytic Jacobian or
    an element-level central finite-difference fallback.
    """

    def __init__(self, mesh: Mesh, materials: MaterialSet,
                 bcs: BoundaryConditions | None = None, quad_degree=4,
                 tangent="analytic"):
        if not mesh.is_p2:
            raise MeshError("assembler requires a P2-enriched mesh")
        if mesh.fibers is None:
            raise MeshError("mesh carries no fiber field")
        if tangent not in ("analytic", "fd"):
            raise ValueError("tangent must be 'analytic' or 'fd'")
        self.mesh = mesh
        self.materials = materials
        self.bcs = bcs or BoundaryConditions()
        self.tangent = tangent
        self.dofmap = DofMap(mesh.n_nodes)

        rule = quadrature_rule(quad_degree)
        self.rule = rule
        nq = len(rule.weights)
        vals = np.empty((nq, 10))
        grads = np.empty((nq, 10, 3))
        for q, pt in enumerate(rule.points):
            vals[q], grads[q] = eval_p2_basis(pt)
        self.N = vals                       # (nq, 10)
        self._NN = (vals[:, :, None] * vals[:, None, :]).reshape(nq, 100)

        conn = mesh.tet_nodes
        self.conn = conn
        verts = mesh.vertices[mesh.tets]
        J = np.swapaxes(verts[:, 1:] - verts[:, :1], -1, -2)   # (nel, 3, 3)
        detJ = np.linalg.det(J)
        if np.any(detJ <= 0):
            raise AssemblyError("inverted element in reference geometry",
                                element=int(np.argmax(detJ <= 0)))
        Jinv = np.linalg.inv(J)
        # reference gradients -> physical: G[e,q,a,:] = grads[q,a,:] @ Jinv[e]
        self.G = np.einsum("qam,emk->eqak", grads, Jinv, optimize=True)
        self.wdetJ = rule.weights[None, :] * detJ[:, None]     # (nel, nq)
        self.fibers = mesh.fibers                               # (nel, 2, 3)
        self.n_el = conn.shape[0]
        self.nq = nq

        self._setup_dirichlet()
        self._setup_pressure_faces()
        self._setup_scatter()

    # -- setup ------------------------------------------------------------

    def _setup_dirichlet(self):
        mesh, dm = self.mesh, self.dofmap
        u_dofs = []
        for tag, comp in self.bcs.fixed_u:
            tris = mesh.tri_nodes[mesh.tris_of_tag(tag)]
            nodes = np.unique(tris)
            u_dofs.append(dm.u_dof(nodes, comp))
        self.u_dirichlet = (np.unique(np.concatenate(u_dofs))
                            if u_dofs else np.empty(0, dtype=int))
        c_nodes = []
        for tag in self.bcs.c_inflow_tags:
            tris = mesh.tri_nodes[mesh.tris_of_tag(tag)]
            c_nodes.append(np.unique(tris))
        self.c_dirichlet_nodes = (np.unique(np.concatenate(c_nodes))
                                  if c_nodes else np.empty(0, dtype=int))
        self.c_dirichlet = dm.c_dof(self.c_dirichlet_nodes)
        mask = np.zeros(dm.n_dofs, dtype=bool)
        mask[self.u_dirichlet] = True
        mask[self.c_dirichlet] = True
        self.dirichlet_mask = mask

    def _setup_pressure_faces(self):
        self.press_conn = None
        if self.bcs.pressure_tag is None:
            return
        mesh = self.mesh
        faces = mesh.tris_of_tag(self.bcs.pressure_tag)
        if len(faces) == 0:
            raise AssemblyError(f"no faces tagged {self.bcs.pressure_tag!r}")
        self.press_conn = mesh.tri_nodes[faces]                 # (nf, 6)
        pts, wts = triangle_quadrature(4)
        self.press_w = wts
        self.press_N, self.press_dN = _tri6_basis(pts)          # (nqs,6),(nqs,6,2)
        self.press_X = mesh.nodes[self.press_conn]              # (nf, 6, 3)

    def _setup_scatter(self):
        """COO index arrays of the four Jacobian blocks (fixed pattern)."""
        conn = self.conn
        dm = self.dofmap
        udof = (3 * conn[:, :, None] + np.arange(3)).reshape(self.n_el, 30)
        cdof = conn                                             # (nel, 10)
        self.udof_e = udof
        self.cdof_e = cdof

        def pair(rows, cols):
            nr, nc = rows.shape[1], cols.shape[1]
            r = np.repeat(rows, nc, axis=1).ravel()
            c = np.tile(cols, (1, nr)).ravel()
            return r, c

        self._uu_idx = pair(udof, udof)
        self._uc_idx = pair(udof, cdof)
        self._cu_idx = pair(cdof, udof)
        self._cc_idx = pair(cdof, cdof)

    # -- kinematics and state ----------------------------------------------

    def element_vectors(self, u, c):
        ue = u.reshape(-1, 3)[self.conn]                        # (nel, 10, 3)
        ce = c[self.conn]                                       # (nel, 10)
        return ue, ce

    def _kinematics(self, ue):
        gradu = np.einsum("eqam,eai->eqim", self.G, ue, optimize=True)
        F = gradu + np.eye(3)
        detF = np.linalg.det(F)
        if np.any(detF <= 0):
            el = int(np.argmax(np.any(detF <= 0, axis=1)))
            raise AssemblyError(f"non-positive det F = {detF.min():.3e}",
                                element=el)
        return F, detF

    def fiber_stretches(self, F):
        C = np.einsum("eqki,eqkj->eqij", F, F, optimize=True)
        i4 = np.einsum("efi,eqij,efj->eqf", self.fibers, C, self.fibers,
                       optimize=True)
        return C, np.sqrt(i4)

    def update_states(self, states_prev: GaussPointState, u, c, dt,
                      active=True, with_sensitivities=False):
        """Staggered internal update at the current iterate.

        Returns the updated state (and, on request, the stretch and drug
        sensitivities used by the consistent tangent).
        """
        if not active:
            zero = (np.zeros(states_prev.shape + (8,)),) * 2
            return (states_prev, zero) if with_sensitivities else states_prev
        ue, ce = self.element_vectors(u, c)
        F, _ = self._kinematics(ue)
        _, lam = self.fiber_stretches(F)
        cq = np.einsum("qa,ea->eq", self.N, ce, optimize=True)
        cq = np.clip(cq, 0.0, None)[..., None]                  # (nel, nq, 1)
        m = self.materials
        out = update_internal_state(states_prev, lam, cq, dt, m.kinetic,
                                    m.active, m.drug,
                                    return_sensitivities=with_sensitivities)
        return out

    def initial_states(self) -> GaussPointState:
        return GaussPointState.initial((self.n_el, self.nq, 2),
                                       self.materials.kinetic)

    # -- residual -----------------------------------------------------------

    def _stress(self, C, lam, states, active, want_tangent=False):
        m = self.materials
        fib_q = np.broadcast_to(self.fibers[:, None], C.shape[:2] + (2, 3))
        tangent = "analytic" if want_tangent else None
        psi, S, D = passive_energy_stress(C, fib_q, m.passive, tangent=tangent)
        h = None
        if active:
            h, dh_dlam, dh_ds = active_stress_scalars(states, lam, m.active)
            M = np.einsum("efi,efj->efij", self.fibers, self.fibers)
            S = S + np.einsum("eqf,efij->eqij", h, M, optimize=True)
            return S, D, (h, dh_dlam, dh_ds, M)
        return S, D, None

    def residual(self, u, c, states, pressure, dt, c_prev, c_bc=0.0,
                 active=True):
        """Monolithic residual [r_u; r_c] with Dirichlet rows replaced."""
        ue, ce = self.element_vectors(u, c)
        ru, rc, _ = self._volume_residual(ue, ce, c_prev[self.conn], states,
                                          dt, active)
        R_u = np.zeros(self.dofmap.n_u)
        np.add.at(R_u, self.udof_e, ru.reshape(self.n_el, 30))
        R_c = np.zeros(self.dofmap.n_c)
        np.add.at(R_c, self.cdof_e, rc)
        if pressure != 0.0 and self.press_conn is not None:
            load = self._pressure_load(u, pressure)
            R_u -= load
        # Dirichlet rows: current minus target drives the dof to the value
        R_u[self.u_dirichlet] = u[self.u_dirichlet] - 0.0
        R_c[self.c_dirichlet_nodes] = c[self.c_dirichlet_nodes] - c_bc
        return BlockVector(R_u, R_c)

    def _volume_residual(self, ue, ce, ceprev, states, dt, active):
        """Element residual blocks (nel, 10, 3) and (nel, 10)."""
        m = self.materials
        F, detF = self._kinematics(ue)
        C, lam = self.fiber_stretches(F)
        S, _, _ = self._stress(C, lam, states, active)
        P = np.einsum("eqim,eqmj->eqij", F, S, optimize=True)
        ru = np.einsum("eq,eqij,eqaj->eai", self.wdetJ, P, self.G,
                       optimize=True)

        cq = np.einsum("qa,ea->eq", self.N, ce, optimize=True)
        cpq = np.einsum("qa,ea->eq", self.N, ceprev, optimize=True)
        Finv = np.linalg.inv(F)
        g = np.einsum("eqam,eqmi->eqai", self.G, Finv, optimize=True)
        gc = np.einsum("eqam,ea->eqm", self.G, ce, optimize=True)
        gc = np.einsum("eqm,eqmi->eqi", gc, Finv, optimize=True)
        diff = m.drug.diffusion
        kr = m.drug.reaction_rate
        rc = np.einsum("eq,eq,qa->ea", self.wdetJ, (cq - cpq) / dt, self.N,
                       optimize=True)
        rc += diff * np.einsum("eq,eq,eqi,eqai->ea", self.wdetJ, detF, gc, g,
                               optimize=True)
        if kr != 0.0:
            rc += kr * np.einsum("eq,eq,eq,qa->ea", self.wdetJ, detF, cq,
                                 self.N, optimize=True)
        return ru, rc, (F, detF, C, lam, Finv, g, gc, cq)

    # -- follower pressure ----------------------------------------------------

    def _surface_geometry(self, u):
        x = self.press_X + u.reshape(-1, 3)[self.press_conn]
        g1 = np.einsum("qb,fbi->fqi", self.press_dN[:, :, 0], x, optimize=True)
        g2 = np.einsum("qb,fbi->fqi", self.press_dN[:, :, 1], x, optimize=True)
        return np.cross(g1, g2), g1, g2

    def _pressure_load(self, u, pressure):
        """Assembled follower load vector on the u block."""
        nvec, _, _ = self._surface_geometry(u)
        s = 1.0 if self.bcs.pressure_pull else -1.0
        ext = s * pressure * np.einsum("q,qb,fqi->fbi", self.press_w,
                                       self.press_N, nvec, optimize=True)
        load = np.zeros(self.dofmap.n_u)
        dofs = (3 * self.press_conn[:, :, None] + np.arange(3))
        np.add.at(load, dofs.ravel(), ext.ravel())
        return load

    def _pressure_tangent_coo(self, u, pressure):
        """d(load)/du as COO triplets on the uu block (asymmetric)."""
        _, g1, g2 = self._surface_geometry(u)
        s = 1.0 if self.bcs.pressure_pull else -1.0
        eps = np.zeros((3, 3, 3))
        eps[0, 1, 2] = eps[1, 2, 0] = eps[2, 0, 1] = 1.0
        eps[0, 2, 1] = eps[1, 0, 2] = eps[2, 1, 0] = -1.0
        # d n / d x_bj = dN1_b (e_j x g2) + dN2_b (g1 x e_j)
        t1 = np.einsum("ijk,fqk->fqij", eps, g2, optimize=True)
        t2 = np.einsum("ipj,fqp->fqij", eps, g1, optimize=True)
        dn = (np.einsum("qb,fqij->fqbij", self.press_dN[:, :, 0], t1,
                        optimize=True)
              + np.einsum("qb,fqij->fqbij", self.press_dN[:, :, 1], t2,
                          optimize=True))
        dext = s * pressure * np.einsum("q,qa,fqbij->faibj", self.press_w,
                                        self.press_N, dn, optimize=True)
        dofs = (3 * self.press_conn[:, :, None] + np.arange(3)).reshape(-1, 18)
        nf = dofs.shape[0]
        rows = np.repeat(dofs, 18, axis=1).ravel()
        cols = np.tile(dofs, (1, 18)).ravel()
        return rows, cols, -dext.reshape(nf, 18 * 18).ravel()

    def follower_pressure(self, u, pressure):
        """Load vector and tangent matrix of the deformed-surface pressure."""
        if self.press_conn is None or pressure == 0.0:
            n_u = self.dofmap.n_u
            return np.zeros(n_u), sp.csr_matrix((n_u, n_u))
        load = self._pressure_load(u, pressure)
        rows, cols, data = self._pressure_tangent_coo(u, pressure)
        K = sp.coo_matrix((data, (rows, cols)),
                          shape=(self.dofmap.n_u,) * 2).tocsr()
        return load, K

    # -- Jacobian -------------------------------------------------------------

    def jacobian(self, u, c, states, pressure, dt, sens=None, active=True,
                 states_prev=None, c_prev=None):
        """Consistent block Jacobian at the current iterate.

        In analytic mode `sens` must hold the internal sensitivities
        returned by update_states.  In fd mode the element residual
        (including the state update from states_prev) is differenced.
        """
        if self.tangent == "fd":
            if states_prev is None or c_prev is None:
                raise AssemblyError("fd tangent needs states_prev and c_prev")
            return self._jacobian_fd(u, c, states_prev, pressure, dt, c_prev,
                                     active)
        return self._jacobian_analytic(u, c, states, pressure, dt, sens,
                                       active)

    def _jacobian_analytic(self, u, c, states, pressure, dt, sens, active):
        ue, ce = self.element_vectors(u, c)
        blocks = self._element_system(ue, ce, None, states, sens, dt, active,
                                      want_residual=False)[1]
        return self._blocks_from_elements(*blocks, u, pressure)

    # assembled per chunk to bound the workspace of the batched products
    _CHUNK = 1024

    def _element_system(self, ue, ce, ceprev, states, sens, dt, active,
                        want_residual=True):
        """Element residual vectors and tangent blocks in one sweep.

        The material tangent is contracted in rank-structured form: every
        term of dS/dC is a tensor product of second-order quantities, so
        the 30x30 element blocks reduce to batched matrix products of
        slim factor matrices (plus two Kronecker-structured terms from the
        fiber energies).
        """
        m = self.materials
        pas = m.passive
        F, detF = self._kinematics(ue)
        w = self.wdetJ
        G = self.G
        fib = self.fibers
        nel, nq = self.n_el, self.nq
        Ft = np.ascontiguousarray(np.swapaxes(F, -1, -2))
        C = np.einsum("eqki,eqkj->eqij", F, F)
        i1 = np.trace(C, axis1=-2, axis2=-1)
        i3 = detF * detF
        Finv = np.linalg.inv(F)
        iC = np.einsum("eqik,eqjk->eqij", Finv, Finv)
        eye = np.eye(3)

        # all fiber structure tensors are rank one: M = a (x) a, so every
        # contraction reduces to the matrix-vector products below
        Fa = np.einsum("eqik,efk->eqfi", F, fib)              # F a
        Ca = np.einsum("eqik,efk->eqfi", C, fib)              # C a
        Ga = np.einsum("eqak,efk->eqfa", G, fib)              # grads . a
        i4 = np.einsum("eqfi,efi->eqf", Ca, fib)
        lam = np.sqrt(i4)

        p = i3 ** (-1.0 / 3.0)
        b = i3 ** pas.alpha3
        bm = i3 ** (-pas.alpha3)
        S = (2.0 * pas.alpha1 * p)[..., None, None] * eye \
            - (2.0 * pas.alpha1 / 3.0 * i1 * p
               - 2.0 * pas.alpha2 * pas.alpha3 * (b - bm))[..., None, None] * iC

        k3 = i1[..., None] * i4 - np.einsum("eqfi,eqfi->eqf", Ca, Ca)
        bracket = np.maximum(k3 - 2.0, 0.0)
        gfac = 2.0 * pas.alpha4 * pas.alpha5 * bracket ** (pas.alpha5 - 1.0)
        # Z = i4 I + i1 M - C M - M C assembled from outer products
        aCa = np.einsum("eqf,efi,eqfj->eqfij", gfac, fib, Ca)
        S = S + (gfac * i4)[..., None, None].sum(axis=2) * eye \
            + np.einsum("eqf,efi,efj->eqij", gfac * i1[..., None], fib, fib) \
            - aCa.sum(axis=2) - np.swapaxes(aCa, -1, -2).sum(axis=2)

        if active:
            h, dh_dlam, dh_ds = active_stress_scalars(states, lam, m.active)
            S = S + np.einsum("eqf,efi,efj->eqij", h, fib, fib)

        g = np.einsum("eqam,eqmi->eqai", G, Finv)             # spatial grads
        cq = ce @ self.N.T                                    # (nel, nq)
        gc = np.einsum("eqam,ea->eqm", G, ce)
        gc = np.einsum("eqm,eqmi->eqi", gc, Finv)
        diff, kr = m.drug.diffusion, m.drug.reaction_rate

        def qreduce(A, B):
            """sum_q A[e,q,r,k] B[e,q,s,k] -> (e, r, s) via one product."""
            r, s = A.shape[2], B.shape[2]
            Af = A.transpose(0, 2, 1, 3).reshape(nel, r, -1)
            Bf = B.transpose(0, 2, 1, 3).reshape(nel, s, -1)
            return Af @ np.swapaxes(Bf, -1, -2)

        if want_residual:
            P = np.einsum("eqim,eqmj->eqij", F, S)
            ru = np.swapaxes(qreduce(w[..., None, None] * P, G), -1, -2)
            cpq = ceprev @ self.N.T
            rc = (w * (cq - cpq) / dt) @ self.N
            flux = np.einsum("eqai,eqi->eqa", g, (w * detF)[..., None] * gc)
            rc += diff * flux.sum(axis=1)
            if kr != 0.0:
                rc += kr * ((w * detF * cq) @ self.N)
            res = (ru, rc)
        else:
            res = None

        # --- tangent scalars -------------------------------------------
        c1 = -(2.0 * pas.alpha1 / 3.0) * p
        c3 = (2.0 * pas.alpha1 / 9.0) * i1 * p \
            + 2.0 * pas.alpha2 * pas.alpha3 ** 2 * (b + bm)
        s_ic = -(2.0 * pas.alpha1 / 3.0) * i1 * p \
            + 2.0 * pas.alpha2 * pas.alpha3 * (b - bm)
        with np.errstate(invalid="ignore"):
            gp = np.where(bracket > 0.0,
                          2.0 * pas.alpha4 * pas.alpha5 * (pas.alpha5 - 1.0)
                          * bracket ** (pas.alpha5 - 2.0), 0.0)

        xI = np.einsum("eqak,eqik->eqai", G, F)
        FCa = np.einsum("eqik,eqfk->eqfi", F, Ca)
        GCa = np.einsum("eqak,eqfk->eqfa", G, Ca)
        xM = Ga[..., :, None] * Fa[..., None, :]              # (nel,nq,2,10,3)
        xZ = (i4[..., None, None] * xI[:, :, None]
              + i1[:, :, None, None, None] * xM
              - Ga[..., :, None] * FCa[..., None, :]
              - GCa[..., :, None] * Fa[..., None, :])

        if active:
            ds_dlam, ds_dc = sens if sens is not None else (
                np.zeros(states.shape + (8,)),) * 2
            dh_tot = dh_dlam + np.einsum("eqfs,eqfs->eqf", dh_ds, ds_dlam)
            act_coef = dh_tot / lam                   # rank-one M x M factor
            dh_dc = np.einsum("eqfs,eqfs->eqf", dh_ds, ds_dc)

        # rank-one pairs: contribution 2 * coef * x[a,i] * y[b,j]
        pairs = [(2.0 * c1, xI, g), (2.0 * c1, g, xI), (2.0 * c3, g, g)]
        for f in range(2):
            pairs += [(2.0 * gp[..., f], xZ[:, :, f], xZ[:, :, f]),
                      (2.0 * gfac[..., f], xI, xM[:, :, f]),
                      (2.0 * gfac[..., f], xM[:, :, f], xI)]
            if active:
                pairs.append((act_coef[..., f], xM[:, :, f], xM[:, :, f]))
        # transposed pairs: contribution coef * x[a,j] * y[b,i]
        tpairs = [(-s_ic, g, g)]
        for f in range(2):
            tpairs += [(-gfac[..., f], xM[:, :, f], xI),
                       (-gfac[..., f], xI, xM[:, :, f])]
        # Kronecker terms coef * A[a,b] * B[i,j]; the fiber ones are again
        # outer products: G M G^T = Ga (x) Ga and F M F^T = Fa (x) Fa
        FFt = np.einsum("eqik,eqjk->eqij", F, F)
        GGt = np.einsum("eqak,eqbk->eqab", G, G)
        krons = []
        for f in range(2):
            GMGt = Ga[:, :, f, :, None] * Ga[:, :, f, None, :]
            FMFt = Fa[:, :, f, :, None] * Fa[:, :, f, None, :]
            krons += [(-gfac[..., f], GMGt, FFt),
                      (-gfac[..., f], GGt, FMFt)]

        # delta_ij terms: geometric stress + the isochoric inverse term
        GS = np.einsum("eqak,eqkm->eqam", G, S)
        sep = qreduce(w[..., None, None] * GS, G)
        sep += qreduce((w * (-s_ic))[..., None, None] * g, g)

        Kuu = np.empty((nel, 30, 30))
        T, TT, TK = len(pairs), len(tpairs), len(krons)
        for s0 in range(0, nel, self._CHUNK):
            sl = slice(s0, min(s0 + self._CHUNK, nel))
            ch = sl.stop - sl.start
            XL = np.empty((ch, T * nq, 30))
            YR = np.empty((ch, T * nq, 30))
            for t, (coef, x, y) in enumerate(pairs):
                wc = (w[sl] * coef[sl])[:, :, None]
                XL[:, t * nq:(t + 1) * nq, :] = x[sl].reshape(ch, nq, 30) * wc
                YR[:, t * nq:(t + 1) * nq, :] = y[sl].reshape(ch, nq, 30)
            block = np.matmul(XL.swapaxes(1, 2), YR)
            XL2 = np.empty((ch, TT * nq, 30))
            YR2 = np.empty((ch, TT * nq, 30))
            for t, (coef, x, y) in enumerate(tpairs):
                wc = (w[sl] * coef[sl])[:, :, None]
                XL2[:, t * nq:(t + 1) * nq, :] = x[sl].reshape(ch, nq, 30) * wc
                YR2[:, t * nq:(t + 1) * nq, :] = y[sl].reshape(ch, nq, 30)
            block += np.matmul(XL2.swapaxes(1, 2), YR2).reshape(
                ch, 10, 3, 10, 3).transpose(0, 1, 4, 3, 2).reshape(ch, 30, 30)
            AL = np.empty((ch, TK * nq, 100))
            BR = np.empty((ch, TK * nq, 9))
            for t, (coef, A, B) in enumerate(krons):
                wc = (w[sl] * coef[sl])[:, :, None]
                AL[:, t * nq:(t + 1) * nq, :] = A[sl].reshape(ch, nq, 100) * wc
                BR[:, t * nq:(t + 1) * nq, :] = B[sl].reshape(ch, nq, 9)
            block += np.matmul(AL.swapaxes(1, 2), BR).reshape(
                ch, 10, 10, 3, 3).transpose(0, 1, 3, 2, 4).reshape(ch, 30, 30)
            bb = block.reshape(ch, 10, 3, 10, 3)
            for i in range(3):
                bb[:, :, i, :, i] += sep[sl]
            Kuu[sl] = block

        # --- coupling and concentration blocks -------------------------
        if active:
            wduc = (w[..., None] * dh_dc)                      # (nel,nq,2)
            A = (xM * wduc[..., None, None]).transpose(0, 3, 4, 1, 2)
            A = A.reshape(nel, 30, nq * 2)
            B = np.broadcast_to(self.N[:, None, :], (nq, 2, 10))
            Kuc_e = A @ B.reshape(nq * 2, 10)
        else:
            Kuc_e = np.zeros((nel, 30, 10))

        NN = self._NN                                          # (nq, 100)
        Kcc_e = ((w / dt) @ NN).reshape(nel, 10, 10)
        wdF = w * detF
        Kcc_e += diff * qreduce(wdF[..., None, None] * g, g, 10, 10)
        if kr != 0.0:
            Kcc_e += kr * ((wdF) @ NN).reshape(nel, 10, 10)

        gcga = (g @ gc[..., None])[..., 0]                     # gc . g_a
        t_a = wdF[..., None] * gcga                            # (nel,nq,10)
        gflat = g.reshape(nel, nq, 30)
        # T[x, (y,j)] = sum_q t_a[q,x] g[q,y,j] serves terms 1 and 2
        T = t_a.transpose(0, 2, 1) @ gflat
        term12 = (T - T.reshape(nel, 10, 10, 3).transpose(0, 2, 1, 3)
                  .reshape(nel, 10, 30))
        gagb = g @ np.swapaxes(g, -1, -2)                      # (nel,nq,10,10)
        A3 = (wdF[..., None, None] * gagb).transpose(0, 2, 3, 1)
        term3 = (A3.reshape(nel, 100, nq) @ gc).reshape(nel, 10, 30)
        Kcu_e = diff * (term12 - term3)
        if kr != 0.0:
            wc = wdF * cq
            Kcu_e += kr * ((wc[:, None, :] * self.N.T[None]) @ gflat)

        blocks = (Kuu.reshape(nel, -1), Kuc_e.reshape(nel, -1),
                  Kcu_e.reshape(nel, -1), Kcc_e.reshape(nel, -1))
        return res, blocks

    def system(self, u, c, states, pressure, dt, c_prev, c_bc=0.0,
               sens=None, active=True, states_prev=None):
        """Residual and Jacobian sharing one kinematics sweep."""
        if self.tangent == "fd":
            R = self.residual(u, c, states, pressure, dt, c_prev, c_bc=c_bc,
                              active=active)
            J = self._jacobian_fd(u, c, states_prev, pressure, dt, c_prev,
                                  active)
            return R, J
        ue, ce = self.element_vectors(u, c)
        res, blocks = self._element_system(ue, ce, c_prev[self.conn], states,
                                           sens, dt, active)
        ru, rc = res
        R_u = np.zeros(self.dofmap.n_u)
        np.add.at(R_u, self.udof_e, ru.reshape(self.n_el, 30))
        R_c = np.zeros(self.dofmap.n_c)
        np.add.at(R_c, self.cdof_e, rc)
        if pressure != 0.0 and self.press_conn is not None:
            R_u -= self._pressure_load(u, pressure)
        R_u[self.u_dirichlet] = u[self.u_dirichlet] - 0.0
        R_c[self.c_dirichlet_nodes] = c[self.c_dirichlet_nodes] - c_bc
        R = BlockVector(R_u, R_c)
        J = self._blocks_from_elements(*blocks, u, pressure)
        return R, J

    def _blocks_from_elements(self, kuu, kuc, kcu, kcc, u, pressure):
        dm = self.dofmap
        uu = sp.coo_matrix((kuu.ravel(), self._uu_idx),
                           shape=(dm.n_u, dm.n_u)).tocsr()
        uc = sp.coo_matrix((kuc.ravel(), self._uc_idx),
                           shape=(dm.n_u, dm.n_c)).tocsr()
        cu = sp.coo_matrix((kcu.ravel(), self._cu_idx),
                           shape=(dm.n_c, dm.n_u)).tocsr()
        cc = sp.coo_matrix((kcc.ravel(), self._cc_idx),
                           shape=(dm.n_c, dm.n_c)).tocsr()
        if self.press_conn is not None:
            # include the (possibly zero) follower pattern unconditionally so
            # the sparsity stays identical across all steps of a protocol
            rows, cols, data = self._pressure_tangent_coo(u, pressure)
            uu = (uu + sp.coo_matrix((data, (rows, cols)),
                                     shape=uu.shape)).tocsr()
        self._replace_dirichlet_rows(uu, uc, block="u")
        self._replace_dirichlet_rows(cc, cu, block="c")
        return BlockSparseMatrix(uu, uc, cu, cc)

    def _replace_dirichlet_rows(self, diag_block, off_block, block):
        dofs = self.u_dirichlet if block == "u" else self.c_dirichlet_nodes
        if len(dofs) == 0:
            return
        for Mtx in (diag_block, off_block):
            start = Mtx.indptr[dofs]
            end = Mtx.indptr[dofs + 1]
            for s, e in zip(start, end):
                Mtx.data[s:e] = 0.0
        # unit diagonal; the entry exists in the FE pattern
        d = diag_block.diagonal()
        d[dofs] = 1.0
        diag_block.setdiag(d)

    # -- finite-difference tangent --------------------------------------------

    def _jacobian_fd(self, u, c, states_prev, pressure, dt, c_prev, active,
                     step=1e-6):
        """Element-level central differences through the full update chain."""
        ue0, ce0 = self.element_vectors(u, c)
        cpe = c_prev[self.conn]

        def element_res(ue, ce):
            if active:
                F, _ = self._kinematics(ue)
                _, lam = self.fiber_stretches(F)
                cq = np.clip(np.einsum("qa,ea->eq", self.N, ce), 0.0,
                             None)[..., None]
                m = self.materials
                st = update_internal_state(states_prev, lam, cq, dt,
                                           m.kinetic, m.active, m.drug)
            else:
                st = states_prev
            ru, rc, _ = self._volume_residual(ue, ce, cpe, st, dt, active)
            return np.concatenate([ru.reshape(self.n_el, 30), rc], axis=1)

        n_loc = 40
        K = np.empty((self.n_el, n_loc, n_loc))
        for d in range(n_loc):
            up, um = ue0.copy(), ue0.copy()
            cp, cm = ce0.copy(), ce0.copy()
            if d < 30:
                a, i = divmod(d, 3)
                up[:, a, i] += step
                um[:, a, i] -= step
            else:
                cp[:, d - 30] += step
                cm[:, d - 30] -= step
            K[:, :, d] = (element_res(up, cp) - element_res(um, cm)) / (2 * step)

        kuu = K[:, :30, :30]
        kuc = K[:, :30, 30:]
        kcu = K[:, 30:, :30]
        kcc = K[:, 30:, 30:]
        return self._blocks_from_elements(
            kuu.reshape(self.n_el, -1), kuc.reshape(self.n_el, -1),
            kcu.reshape(self.n_el, -1), kcc.reshape(self.n_el, -1),
            u, pressure)


# ---------------------------------------------------------------------------
# Module-level operation wrappers
# ---------------------------------------------------------------------------

def assemble_residual(u, c, states, assembler: Assembler, pressure, dt,
                      c_prev, c_bc=0.0, active=True) -> BlockVector:
    """Residual of the coupled system; see Assembler.residual."""
    return assembler.residual(u, c, states, pressure, dt, c_prev, c_bc=c_bc,
                              active=active)


def assemble_jacobian(u, c, states, assembler: Assembler, pressure, dt,
                      sens=None, active=True, states_prev=None,
                      c_prev=None) -> BlockSparseMatrix:
    """Block Jacobian of the coupled system; see Assembler.jacobian."""
    return assembler.jacobian(u, c, states, pressure, dt, sens=sens,
                              active=active, states_prev=states_prev,
                              c_prev=c_prev)


def assemble_follower_pressure(u, assembler: Assembler, pressure):
    """Deformed-configuration pressure load and its tangent."""
    return assembler.follower_pressure(u, pressure)


# ---------------------------------------------------------------------------
# Scalar diffusion model problem (solver scalability studies)
# ---------------------------------------------------------------------------

@dataclass
class ProblemLayout:
    """Dof metadata consumed by the domain decomposition preconditioner."""

    n_dofs: int
    node_of_dof: np.ndarray
    coords: np.ndarray
    dirichlet: np.ndarray
    kind: str                     # "monolithic" or "scalar"
    n_u: int = 0

    @property
    def n_nodes(self):
        return self.coords.shape[0]


def layout_of_assembler(asm: Assembler) -> ProblemLayout:
    dm = asm.dofmap
    node_of_dof = np.concatenate([np.repeat(np.arange(dm.n_nodes), 3),
                                  np.arange(dm.n_nodes)])
    return ProblemLayout(n_dofs=dm.n_dofs, node_of_dof=node_of_dof,
                         coords=asm.mesh.nodes, dirichlet=asm.dirichlet_mask,
                         kind="monolithic", n_u=dm.n_u)


def assemble_scalar_diffusion(mesh: Mesh, dirichlet_tags=(), diffusion=1.0,
                              quad_degree=4):
    """P2 stiffness matrix and unit load of -div(D grad c) = 1.

    Returns (K, b, layout); Dirichlet rows are replaced by identity with
    zero right-hand side.
    """
    if not mesh.is_p2:
        raise MeshError("scalar assembly requires a P2 mesh")
    rule = quadrature_rule(quad_degree)
    nq = len(rule.weights)
    vals = np.empty((nq, 10))
    grads = np.empty((nq, 10, 3))
    for q, pt in enumerate(rule.points):
        vals[q], grads[q] = eval_p2_basis(pt)
    verts = mesh.vertices[mesh.tets]
    J = np.swapaxes(verts[:, 1:] - verts[:, :1], -1, -2)
    detJ = np.linalg.det(J)
    Jinv = np.linalg.inv(J)
    G = np.einsum("qam,emk->eqak", grads, Jinv, optimize=True)
    w = rule.weights[None, :] * detJ[:, None]
    conn = mesh.tet_nodes
    ke = diffusion * np.einsum("eq,eqai,eqbi->eab", w, G, G, optimize=True)
    be = np.einsum("eq,qa->ea", w, vals, optimize=True)

    n = mesh.n_nodes
    rows = np.repeat(conn, 10, axis=1).ravel()
    cols = np.tile(conn, (1, 10)).ravel()
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    b = np.zeros(n)
    np.add.at(b, conn.ravel(), be.ravel())

    dir_nodes = []
    for tag in dirichlet_tags:
        dir_nodes.append(np.unique(mesh.tri_nodes[mesh.tris_of_tag(tag)]))
    dir_nodes = (np.unique(np.concatenate(dir_nodes)) if dir_nodes
                 else np.empty(0, dtype=int))
    if len(dir_nodes):
        start, end = K.indptr[dir_nodes], K.indptr[dir_nodes + 1]
        for s, e in zip(start, end):
            K.data[s:e] = 0.0
        d = K.diagonal()
        d[dir_nodes] = 1.0
        K.setdiag(d)
        b[dir_nodes] = 0.0
    mask = np.zeros(n, dtype=bool)
    mask[dir_nodes] = True
    layout = ProblemLayout(n_dofs=n, node_of_dof=np.arange(n),
                           coords=mesh.nodes, dirichlet=mask, kind="scalar")
    return K, b, layout
