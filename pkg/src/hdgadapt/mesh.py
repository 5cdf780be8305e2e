"""Conforming triangular meshes with an explicit edge skeleton.

The mesh stores, besides vertices and elements, the set of interior
(skeleton) edges and the set of tagged boundary edges.  Each edge knows
its adjacent elements and carries a unit normal pointing from the left
element to the right one (outward on the boundary).  Local refinement is
newest-vertex bisection with iterated conformity closure; uniform
refinement is the red (1:4) rule.  Meshes are immutable after
construction; refinement returns a new mesh that remembers its parent
elements so element-local data can be transferred.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MeshError",
    "Edge",
    "Mesh",
    "ElementGeometry",
    "build_mesh",
    "element_geometry",
    "refine",
    "uniform_refine",
    "validate",
    "unit_square_mesh",
    "read_mesh",
    "write_mesh",
]


class MeshError(Exception):
    """Raised for non-conforming, degenerate or inconsistent mesh input."""


@dataclass(frozen=True)
class Edge:
    """Single mesh edge.

    ``vertices`` is ordered as the edge appears in the *left* element's
    counterclockwise boundary, so the stored unit normal points away from
    the left element (into the right neighbour, or out of the domain).
    ``right`` is -1 for boundary edges, which carry an integer ``tag``.
    """

    vertices: tuple
    left: int
    right: int
    normal: np.ndarray
    length: float
    tag: int = -1

    @property
    def is_boundary(self):
        return self.right < 0


@dataclass(frozen=True)
class Mesh:
    """Immutable conforming triangulation.

    Attributes
    ----------
    vertices : (nv, 2) float array
    elements : (ne, 3) int array, counterclockwise vertex triples
    interior_edges : list of Edge (the skeleton)
    boundary_edges : list of Edge
    element_to_edges : (ne, 3) int array; local edge ``j`` joins vertices
        ``j`` and ``(j+1) % 3``.  The entry is ``+(gid+1)`` when the local
        direction matches the edge's canonical orientation and
        ``-(gid+1)`` otherwise, where ``gid`` indexes interior edges
        first, then boundary edges.
    refinement_edge : (ne,) int array, local index of the bisection edge
    parent_elements : (ne,) int array mapping each element to its parent
        in the mesh this one was refined from, or None for a root mesh.
    """

    vertices: np.ndarray
    elements: np.ndarray
    interior_edges: list
    boundary_edges: list
    element_to_edges: np.ndarray
    refinement_edge: np.ndarray
    parent_elements: np.ndarray = None
    generation: int = 0

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def n_interior_edges(self):
        return len(self.interior_edges)

    @property
    def n_boundary_edges(self):
        return len(self.boundary_edges)

    def edge(self, gid):
        """Edge object for a combined edge id (interior first)."""
        nf = self.n_interior_edges
        return self.interior_edges[gid] if gid < nf else self.boundary_edges[gid - nf]

    def local_edge_info(self, elem, j):
        """(gid, orientation) of local edge ``j``; orientation 0 means the
        element traverses the edge in canonical direction."""
        ref = self.element_to_edges[elem, j]
        return abs(ref) - 1, 0 if ref > 0 else 1


@dataclass(frozen=True)
class ElementGeometry:
    """Affine geometry of one triangle.

    ``jac`` maps the reference triangle {(0,0),(1,0),(0,1)} onto the
    element, ``x = v0 + jac @ xi``.  ``normals`` and ``lengths`` follow
    the local edge convention of Mesh.element_to_edges.
    """

    origin: np.ndarray
    jac: np.ndarray
    inv_jac: np.ndarray
    det: float
    area: float
    normals: np.ndarray
    lengths: np.ndarray

    def to_physical(self, ref_pts):
        return self.origin + ref_pts @ self.jac.T

    def to_reference(self, phys_pts):
        return (phys_pts - self.origin) @ self.inv_jac.T


def _signed_areas(vertices, elements):
    p0 = vertices[elements[:, 0]]
    p1 = vertices[elements[:, 1]]
    p2 = vertices[elements[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _longest_edges(vertices, elements):
    lengths = np.empty((elements.shape[0], 3))
    for j in range(3):
        d = vertices[elements[:, (j + 1) % 3]] - vertices[elements[:, j]]
        lengths[:, j] = np.hypot(d[:, 0], d[:, 1])
    return np.argmax(lengths, axis=1)


def build_mesh(vertices, element_triples, boundary_tags=None, refinement_edges=None,
               generation=0, parent_elements=None):
    """Build a Mesh from raw vertex/element data.

    Parameters
    ----------
    vertices : (nv, 2) array_like
    element_triples : (ne, 3) array_like of vertex indices, counterclockwise
    boundary_tags : optional dict mapping an (unordered) vertex pair to an
        integer tag; untagged boundary edges get tag 0
    refinement_edges : optional (ne,) array of local bisection-edge
        indices; defaults to the longest edge of each element

    Raises
    ------
    MeshError
        for degenerate triangles, clockwise elements, invalid indices or
        non-conforming connectivity.
    """
    vertices = np.ascontiguousarray(vertices, dtype=float)
    elements = np.ascontiguousarray(element_triples, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must be an (nv, 2) array")
    if elements.ndim != 2 or elements.shape[1] != 3:
        raise MeshError("elements must be an (ne, 3) array")
    if elements.min(initial=0) < 0 or elements.max(initial=-1) >= len(vertices):
        raise MeshError("element vertex index out of range")

    areas = _signed_areas(vertices, elements)
    if np.any(np.abs(areas) < 1e-14):
        raise MeshError("degenerate (zero-area) triangle")
    if np.any(areas < 0):
        raise MeshError("clockwise element orientation; expected counterclockwise")

    tag_lookup = {}
    if boundary_tags:
        for pair, tag in boundary_tags.items():
            a, b = pair
            tag_lookup[(min(a, b), max(a, b))] = int(tag)

    # First pass over directed element edges: the first element to use an
    # undirected edge defines the canonical orientation (becomes "left").
    seen = {}
    order = []
    for e, tri in enumerate(elements):
        for j in range(3):
            a, b = int(tri[j]), int(tri[(j + 1) % 3])
            key = (min(a, b), max(a, b))
            if key not in seen:
                seen[key] = [(e, j, (a, b))]
                order.append(key)
            else:
                seen[key].append((e, j, (a, b)))
                if len(seen[key]) > 2:
                    raise MeshError("edge shared by more than two elements")

    interior_keys = [k for k in order if len(seen[k]) == 2]
    boundary_keys = [k for k in order if len(seen[k]) == 1]

    interior_edges = []
    boundary_edges = []
    elem_to_edge = np.zeros((len(elements), 3), dtype=np.int64)

    def _edge_geom(a, b):
        d = vertices[b] - vertices[a]
        length = float(np.hypot(d[0], d[1]))
        normal = np.array([d[1], -d[0]]) / length
        normal.setflags(write=False)
        return normal, length

    for gid, key in enumerate(interior_keys):
        (e0, j0, dir0), (e1, j1, dir1) = seen[key]
        if dir0 == dir1:
            raise MeshError("inconsistent orientation across edge %s" % (key,))
        a, b = dir0
        normal, length = _edge_geom(a, b)
        interior_edges.append(Edge((a, b), e0, e1, normal, length))
        elem_to_edge[e0, j0] = gid + 1
        elem_to_edge[e1, j1] = -(gid + 1)

    nf = len(interior_keys)
    for k, key in enumerate(boundary_keys):
        (e0, j0, (a, b)), = seen[key]
        normal, length = _edge_geom(a, b)
        tag = tag_lookup.get(key, 0)
        boundary_edges.append(Edge((a, b), e0, -1, normal, length, tag=tag))
        elem_to_edge[e0, j0] = nf + k + 1

    if refinement_edges is None:
        refinement_edges = _longest_edges(vertices, elements)
    else:
        refinement_edges = np.asarray(refinement_edges, dtype=np.int64).copy()

    vertices.setflags(write=False)
    elements.setflags(write=False)
    elem_to_edge.setflags(write=False)
    refinement_edges.setflags(write=False)
    if parent_elements is not None:
        parent_elements = np.asarray(parent_elements, dtype=np.int64)
        parent_elements.setflags(write=False)

    mesh = Mesh(vertices, elements, interior_edges, boundary_edges,
                elem_to_edge, refinement_edges, parent_elements, generation)
    validate(mesh)
    return mesh


def validate(mesh):
    """Check the structural mesh invariants, raising MeshError on failure."""
    areas = _signed_areas(mesh.vertices, mesh.elements)
    if np.any(areas <= 0):
        raise MeshError("non-positive element area")
    nv = len(mesh.vertices)
    ne = mesh.n_elements
    nf = mesh.n_interior_edges
    nb = mesh.n_boundary_edges
    # Euler's formula for a triangulated disk; catches hanging nodes.
    if nv - (nf + nb) + ne != 1:
        raise MeshError("Euler formula violated: mesh is not a conforming disk")
    if 3 * ne != 2 * nf + nb:
        raise MeshError("edge/element incidence count mismatch")
    for gid in range(nf + nb):
        edge = mesh.edge(gid)
        if not np.isclose(np.hypot(*edge.normal), 1.0, atol=1e-12):
            raise MeshError("non-unit edge normal")
        if edge.length <= 0:
            raise MeshError("non-positive edge length")
    return True


def element_geometry(mesh, element_id):
    """Affine map, area and per-edge outward normals/lengths of one element."""
    tri = mesh.elements[element_id]
    v = mesh.vertices[tri]
    jac = np.column_stack([v[1] - v[0], v[2] - v[0]])
    det = float(jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0])
    if det <= 0:
        raise MeshError("degenerate or inverted element %d" % element_id)
    inv_jac = np.array([[jac[1, 1], -jac[0, 1]], [-jac[1, 0], jac[0, 0]]]) / det
    normals = np.empty((3, 2))
    lengths = np.empty(3)
    for j in range(3):
        d = v[(j + 1) % 3] - v[j]
        lengths[j] = np.hypot(d[0], d[1])
        normals[j] = (d[1], -d[0])
        normals[j] /= lengths[j]
    return ElementGeometry(v[0].copy(), jac, inv_jac, det, 0.5 * det, normals, lengths)


def _closure_mark(mesh, marked_elements):
    """Edge marking for NVB: mark refinement edges of marked elements and
    close so every element with a marked edge has its refinement edge
    marked.  Returns a boolean array over combined edge ids."""
    n_edges = mesh.n_interior_edges + mesh.n_boundary_edges
    marked = np.zeros(n_edges, dtype=bool)
    for e in marked_elements:
        gid, _ = mesh.local_edge_info(int(e), int(mesh.refinement_edge[e]))
        marked[gid] = True

    elem_edges = np.abs(mesh.element_to_edges) - 1
    ref_gid = elem_edges[np.arange(mesh.n_elements), mesh.refinement_edge]
    sweeps = 0
    while True:
        any_marked = marked[elem_edges].any(axis=1)
        need = any_marked & ~marked[ref_gid]
        if not need.any():
            break
        marked[ref_gid[need]] = True
        sweeps += 1
        if sweeps > n_edges:
            raise MeshError("refinement closure failed to terminate")
    return marked


def _bisect(tri, ref_local, midpoint_of, out_tris, out_ref, out_parent, parent):
    """Recursively bisect a triangle at the midpoints recorded in
    ``midpoint_of`` (keyed by unordered vertex pairs of *original* edges).
    Children keep the NVB convention: their refinement edge is the parent
    edge they inherit."""
    a = tri[ref_local]
    b = tri[(ref_local + 1) % 3]
    c = tri[(ref_local + 2) % 3]
    key = (min(a, b), max(a, b))
    mid = midpoint_of.get(key)
    if mid is None:
        out_tris.append((tri[0], tri[1], tri[2]))
        out_ref.append(ref_local)
        out_parent.append(parent)
        return
    # children (c, a, mid) and (b, c, mid); inherited parent edges (c, a)
    # and (b, c) become the new refinement edges (local index 0)
    _bisect((c, a, mid), 0, midpoint_of, out_tris, out_ref, out_parent, parent)
    _bisect((b, c, mid), 0, midpoint_of, out_tris, out_ref, out_parent, parent)


def refine(mesh, marked_element_ids):
    """Newest-vertex bisection of the marked elements plus conformity closure.

    Every marked element is bisected at least once.  Returns a new
    conforming mesh whose ``parent_elements`` maps children back to the
    elements of ``mesh``.
    """
    marked_element_ids = np.asarray(list(marked_element_ids), dtype=np.int64)
    if marked_element_ids.size == 0:
        return mesh
    if marked_element_ids.min() < 0 or marked_element_ids.max() >= mesh.n_elements:
        raise MeshError("marked element id out of range")

    marked_edges = _closure_mark(mesh, marked_element_ids)

    vertices = [tuple(p) for p in mesh.vertices]
    midpoint_of = {}
    split_edges = {}
    for gid in np.nonzero(marked_edges)[0]:
        edge = mesh.edge(int(gid))
        a, b = edge.vertices
        mid = len(vertices)
        vertices.append(tuple(0.5 * (mesh.vertices[a] + mesh.vertices[b])))
        key = (min(a, b), max(a, b))
        midpoint_of[key] = mid
        split_edges[key] = edge

    tris, refs, parents = [], [], []
    for e in range(mesh.n_elements):
        _bisect(tuple(int(v) for v in mesh.elements[e]),
                int(mesh.refinement_edge[e]), midpoint_of,
                tris, refs, parents, e)

    boundary_tags = {}
    for edge in mesh.boundary_edges:
        a, b = edge.vertices
        key = (min(a, b), max(a, b))
        mid = midpoint_of.get(key)
        if mid is None:
            boundary_tags[(a, b)] = edge.tag
        else:
            boundary_tags[(a, mid)] = edge.tag
            boundary_tags[(mid, b)] = edge.tag

    return build_mesh(np.array(vertices), np.array(tris, dtype=np.int64),
                      boundary_tags, refinement_edges=np.array(refs),
                      generation=mesh.generation + 1,
                      parent_elements=np.array(parents))


def uniform_refine(mesh):
    """Red refinement: split every element into four similar children."""
    vertices = [tuple(p) for p in mesh.vertices]
    midpoint_of = {}

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        mid = midpoint_of.get(key)
        if mid is None:
            mid = len(vertices)
            vertices.append(tuple(0.5 * (mesh.vertices[a] + mesh.vertices[b])))
            midpoint_of[key] = mid
        return mid

    tris, parents = [], []
    for e, tri in enumerate(mesh.elements):
        v0, v1, v2 = (int(v) for v in tri)
        m01 = midpoint(v0, v1)
        m12 = midpoint(v1, v2)
        m20 = midpoint(v2, v0)
        tris.extend([(v0, m01, m20), (v1, m12, m01), (v2, m20, m12),
                     (m01, m12, m20)])
        parents.extend([e] * 4)

    boundary_tags = {}
    for edge in mesh.boundary_edges:
        a, b = edge.vertices
        mid = midpoint_of[(min(a, b), max(a, b))]
        boundary_tags[(a, mid)] = edge.tag
        boundary_tags[(mid, b)] = edge.tag

    return build_mesh(np.array(vertices), np.array(tris, dtype=np.int64),
                      boundary_tags, generation=mesh.generation + 1,
                      parent_elements=np.array(parents))


def unit_square_mesh(n, tag=0):
    """Structured 2*n^2 triangulation of the unit square.

    Cells are split along the (i+1, j)-(i, j+1) diagonal; each
    triangle's longest edge (the hypotenuse) is its initial refinement
    edge, so newest-vertex bisection starts from a compatible state.
    """
    if n < 1:
        raise MeshError("n must be positive")
    xs = np.linspace(0.0, 1.0, n + 1)
    vid = lambda i, j: j * (n + 1) + i
    vertices = np.array([(xs[i], xs[j]) for j in range(n + 1) for i in range(n + 1)])
    tris = []
    for j in range(n):
        for i in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v10, v01))
            tris.append((v10, v11, v01))
    boundary_tags = {}
    for i in range(n):
        boundary_tags[(vid(i, 0), vid(i + 1, 0))] = tag
        boundary_tags[(vid(i, n), vid(i + 1, n))] = tag
        boundary_tags[(vid(0, i), vid(0, i + 1))] = tag
        boundary_tags[(vid(n, i), vid(n, i + 1))] = tag
    return build_mesh(vertices, np.array(tris, dtype=np.int64), boundary_tags)


def write_mesh(mesh, path):
    """Write the plain-text node/element format (17 significant digits)."""
    with open(path, "w") as fh:
        fh.write("%d %d %d\n" % (len(mesh.vertices), mesh.n_elements,
                                 mesh.n_boundary_edges))
        for x, y in mesh.vertices:
            fh.write("%.17g %.17g\n" % (x, y))
        for tri in mesh.elements:
            fh.write("%d %d %d\n" % tuple(tri))
        for edge in mesh.boundary_edges:
            fh.write("%d %d %d\n" % (edge.vertices[0], edge.vertices[1], edge.tag))


def read_mesh(path):
    """Read the plain-text node/element format written by write_mesh."""
    with open(path) as fh:
        tokens = fh.read().split()
    it = iter(tokens)
    nv, ne, nb = int(next(it)), int(next(it)), int(next(it))
    vertices = np.array([[float(next(it)), float(next(it))] for _ in range(nv)])
    tris = np.array([[int(next(it)) for _ in range(3)] for _ in range(ne)],
                    dtype=np.int64)
    boundary_tags = {}
    for _ in range(nb):
        a, b, tag = int(next(it)), int(next(it)), int(next(it))
        boundary_tags[(a, b)] = tag
    return build_mesh(vertices, tris, boundary_tags)
