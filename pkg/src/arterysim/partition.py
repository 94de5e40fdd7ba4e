"""Nonoverlapping element partitions.

Structured subcube partitions for generated cube meshes, a deterministic
greedy region-growing partitioner for unstructured meshes, and epart-style
partition files (one subdomain id per element line) for interoperability
with external partitioners.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import PartitionError
from .mesh import Mesh, TET_FACES


@dataclass
class Partition:
    """Assignment of every element to exactly one subdomain in [0, count)."""

    subdomain_of_element: np.ndarray
    count: int

    def __post_init__(self):
        self.subdomain_of_element = np.asarray(self.subdomain_of_element,
                                               dtype=int)
        if self.subdomain_of_element.min(initial=0) < 0:
            raise PartitionError("negative subdomain id")
        if self.count < 1 or (len(self.subdomain_of_element)
                              and self.subdomain_of_element.max() >= self.count):
            raise PartitionError("subdomain id out of range")

    def sizes(self):
        return np.bincount(self.subdomain_of_element, minlength=self.count)

    def elements_of(self, sd):
        return np.flatnonzero(self.subdomain_of_element == sd)

    def __eq__(self, other):
        return (isinstance(other, Partition) and self.count == other.count
                and np.array_equal(self.subdomain_of_element,
                                   other.subdomain_of_element))


def element_adjacency(mesh: Mesh):
    """Pairs of elements sharing a face, as an (m, 2) index array."""
    faces = mesh.tets[:, TET_FACES].reshape(-1, 3)
    owner = np.repeat(np.arange(mesh.n_tets), 4)
    key = np.sort(faces, axis=1)
    order = np.lexsort(key.T[::-1])
    key = key[order]
    owner = owner[order]
    same = np.all(key[1:] == key[:-1], axis=1)
    return np.column_stack([owner[:-1][same], owner[1:][same]])


def _neighbor_lists(n, pairs):
    nbr = [[] for _ in range(n)]
    for a, b in pairs:
        nbr[a].append(b)
        nbr[b].append(a)
    return [sorted(v) for v in nbr]


def _is_connected(elements, nbr):
    if len(elements) == 0:
        return False
    inside = set(elements)
    seen = {elements[0]}
    queue = deque([elements[0]])
    while queue:
        e = queue.popleft()
        for o in nbr[e]:
            if o in inside and o not in seen:
                seen.add(o)
                queue.append(o)
    return len(seen) == len(inside)


def partition_structured(mesh: Mesh, m: int) -> Partition:
    """Subcube partition of a generated cube mesh into m^3 subdomains.

    Relies on the voxel element order of generate_cube_mesh (five elements
    per voxel, voxels in lexicographic order).  The voxel count per axis
    must be divisible by m.
    """
    nt = mesh.n_tets
    if nt % 5:
        raise PartitionError("not a generated cube mesh (elements not in "
                             "groups of five)")
    n = round((nt // 5) ** (1 / 3))
    if 5 * n ** 3 != nt:
        raise PartitionError("not a generated cube mesh (no cubic voxel count)")
    if m < 1 or n % m:
        raise PartitionError(f"voxels per axis ({n}) not divisible by m ({m})")
    w = n // m
    voxel = np.arange(n ** 3)
    i, rem = divmod(voxel, n * n)
    j, k = divmod(rem, n)
    sub = ((i // w) * m + (j // w)) * m + (k // w)
    return Partition(np.repeat(sub, 5), m ** 3)


def partition_greedy(mesh: Mesh, count: int, seed: int = 0) -> Partition:
    """Greedy region growing over the shared-face element graph.

    Deterministic for a fixed seed; target balance within 10 percent of the
    mean part size.  Stranded islands are merged into adjacent parts and
    sizes rebalanced by boundary moves.
    """
    nt = mesh.n_tets
    if count > nt:
        raise PartitionError("more subdomains than elements")
    if count < 1:
        raise PartitionError("need at least one subdomain")
    nbr = _neighbor_lists(nt, element_adjacency(mesh))
    rng = np.random.default_rng(seed)
    part = np.full(nt, -1, dtype=int)
    base, extra = divmod(nt, count)
    targets = [base + (1 if p < extra else 0) for p in range(count)]

    unassigned = nt
    for p in range(count):
        free = np.flatnonzero(part < 0)
        # seed at a free element adjacent to the assigned region when
        # possible, to keep the remainder compact
        boundary = [e for e in free if any(part[o] >= 0 for o in nbr[e])]
        pool = boundary if (p > 0 and boundary) else free.tolist()
        start = pool[rng.integers(len(pool))] if p > 0 else int(free[0])
        size = 0
        queue = deque([start])
        frontier = []
        while size < targets[p]:
            while queue:
                e = queue.popleft()
                if part[e] >= 0:
                    continue
                part[e] = p
                size += 1
                unassigned -= 1
                for o in nbr[e]:
                    if part[o] < 0:
                        queue.append(o)
                if size >= targets[p]:
                    break
            if size >= targets[p] or unassigned == 0:
                break
            # region exhausted early: restart from any free element
            free2 = np.flatnonzero(part < 0)
            if len(free2) == 0:
                break
            queue.append(int(free2[0]))
    if np.any(part < 0):      # leftovers go to the nearest assigned neighbor
        for e in np.flatnonzero(part < 0):
            hit = [part[o] for o in nbr[e] if part[o] >= 0]
            part[e] = hit[0] if hit else count - 1

    _merge_islands(part, nbr, count)
    _rebalance(part, nbr, count, rng)
    p = Partition(part, count)
    if np.any(p.sizes() == 0):
        raise PartitionError("empty subdomain produced; reduce the count")
    return p


def _components_of_part(elements, nbr):
    inside = set(elements)
    comps = []
    seen = set()
    for e in elements:
        if e in seen:
            continue
        comp = [e]
        seen.add(e)
        queue = deque([e])
        while queue:
            x = queue.popleft()
            for o in nbr[x]:
                if o in inside and o not in seen:
                    seen.add(o)
                    comp.append(o)
                    queue.append(o)
        comps.append(comp)
    return comps


def _merge_islands(part, nbr, count):
    """Reassigns all but the largest connected piece of every part."""
    for p in range(count):
        elements = np.flatnonzero(part == p)
        comps = _components_of_part(elements.tolist(), nbr)
        if len(comps) <= 1:
            continue
        comps.sort(key=len, reverse=True)
        for comp in comps[1:]:
            votes = {}
            for e in comp:
                for o in nbr[e]:
                    if part[o] != p:
                        votes[part[o]] = votes.get(part[o], 0) + 1
            tgt = max(sorted(votes), key=lambda q: votes[q]) if votes else p
            for e in comp:
                part[e] = tgt


def _rebalance(part, nbr, count, rng, imbalance=0.10, max_moves=100000):
    """Moves boundary elements from oversized to undersized parts."""
    n = len(part)
    mean = n / count
    for _ in range(max_moves):
        sizes = np.bincount(part, minlength=count)
        over = np.argsort(-sizes)
        if sizes[over[0]] <= np.ceil(mean * (1 + imbalance)):
            return
        p = over[0]
        moved = False
        for e in np.flatnonzero(part == p):
            others = {part[o] for o in nbr[e] if part[o] != p}
            cands = [q for q in sorted(others) if sizes[q] < mean]
            if not cands:
                continue
            q = min(cands, key=lambda x: sizes[x])
            part[e] = q
            still = np.flatnonzero(part == p)
            if len(_components_of_part(still.tolist(), nbr)) > 1:
                part[e] = p      # move would disconnect the donor
                continue
            moved = True
            break
        if not moved:
            return


def save_partition(partition: Partition, path):
    """Writes one subdomain id per line (epart convention)."""
    np.savetxt(path, partition.subdomain_of_element, fmt="%d")


def load_partition(path, mesh: Mesh) -> Partition:
    """Reads an epart-style file: line i holds the subdomain of element i."""
    with open(path) as fh:
        values = [ln.strip() for ln in fh if ln.strip()]
    if len(values) != mesh.n_tets:
        raise PartitionError(f"partition file has {len(values)} lines but the "
                             f"mesh has {mesh.n_tets} elements")
    try:
        part = np.array([int(v) for v in values])
    except ValueError as exc:
        raise PartitionError(f"non-integer subdomain id: {exc}") from exc
    if part.min() < 0:
        raise PartitionError("negative subdomain id in partition file")
    p = Partition(part, int(part.max()) + 1)
    nbr = _neighbor_lists(mesh.n_tets, element_adjacency(mesh))
    for sd in range(p.count):
        els = p.elements_of(sd).tolist()
        if not els:
            warnings.warn(f"subdomain {sd} is empty")
        elif not _is_connected(els, nbr):
            warnings.warn(f"subdomain {sd} is not connected")
    return p
