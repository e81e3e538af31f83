"""Triangle mesh with edge-centric adjacency, plus the overlapping-part partition.

The mesh stores, besides vertices and faces, an explicit edge list with the
four adjacent edges of every edge (the other two edges of each incident
triangle).  That 4-neighbor stencil is what the edge convolutions consume.
Connectivity is immutable after construction; only vertex positions may be
replaced (`with_vertices`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass(eq=False)
class PointCloud:
    """Fixed optimization target: points with optional unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None
    oriented: bool = False

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise ValueError(f"points must be a non-empty (N,3) array, got {self.points.shape}")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals must match points in shape")
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.abs(lengths - 1.0).max() > 1e-6:
                raise ValueError("normals must have unit length (within 1e-6)")

    def __len__(self):
        return len(self.points)

    def bbox_diagonal(self):
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


def draw_face_samples(areas, count, rng):
    """Area-proportional face picks plus uniform in-triangle coordinates.

    Returns (face indices (S,), barycentric pairs (S,2)).  Coordinate pairs
    falling outside the triangle (a1+a2 >= 1) are reflected back, which keeps
    the in-triangle distribution uniform without rejection loops.
    """
    areas = np.asarray(areas, dtype=np.float64)
    total = areas.sum()
    if total <= 0:
        raise ValueError("cannot sample a zero-area surface")
    face_idx = rng.choice(len(areas), size=count, p=areas / total)
    bary = rng.random((count, 2))
    over = bary.sum(axis=1) >= 1.0
    bary[over] = 1.0 - bary[over]
    return face_idx.astype(np.int64), bary


class NonManifoldError(ValueError):
    """An edge is shared by three or more faces."""

    def __init__(self, edge, faces):
        self.edge = tuple(int(v) for v in edge)
        self.faces = [int(f) for f in faces]
        super().__init__(
            f"non-manifold edge {self.edge} shared by faces {self.faces}"
        )


def build_edge_adjacency(faces, vertex_count):
    """Build the canonical edge list and per-edge adjacency from a face list.

    Edges are unordered vertex pairs stored as (lo, hi) and sorted
    lexicographically, so identical faces always produce bit-identical
    output.  For every edge the neighbor order is (a, b, c, d) = (next and
    previous edge in the first incident face, next and previous edge in the
    second).  "First" is the incident face with the lower index.  Boundary
    edges duplicate their two in-face neighbors into the (c, d) slots.

    Returns (edges (E,2), edge_neighbors (E,4), edge_faces (E,2)); the second
    face slot is -1 for boundary edges.  Raises NonManifoldError when an edge
    has three or more incident faces.
    """
    faces = np.asarray(faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ValueError(f"faces must be (F,3), got {faces.shape}")
    if faces.size:
        if faces.min() < 0 or faces.max() >= vertex_count:
            raise ValueError("face references a vertex outside [0, vertex_count)")
        degen = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 2] == faces[:, 0])
        if degen.any():
            raise ValueError(f"degenerate face(s) repeating a vertex: {np.nonzero(degen)[0][:8].tolist()}")

    # occurrences[key] = list of (face index, slot of the edge within the face)
    occurrences: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for fi, (v0, v1, v2) in enumerate(faces):
        for slot, (a, b) in enumerate(((v0, v1), (v1, v2), (v2, v0))):
            key = (a, b) if a < b else (b, a)
            occ = occurrences.setdefault(key, [])
            occ.append((fi, slot))
            if len(occ) > 2:
                raise NonManifoldError(key, [f for f, _ in occ])

    keys = sorted(occurrences)
    edge_index = {k: i for i, k in enumerate(keys)}
    n_edges = len(keys)
    edges = np.array(keys, dtype=np.int64).reshape(n_edges, 2)
    edge_faces = np.full((n_edges, 2), -1, dtype=np.int64)
    edge_neighbors = np.full((n_edges, 4), -1, dtype=np.int64)

    def face_edge(fi, slot):
        a, b = faces[fi, slot], faces[fi, (slot + 1) % 3]
        return edge_index[(a, b) if a < b else (b, a)]

    for ei, key in enumerate(keys):
        occ = sorted(occurrences[key])  # lower face index first
        for j, (fi, _) in enumerate(occ):
            edge_faces[ei, j] = fi
        fi, slot = occ[0]
        nxt = face_edge(fi, (slot + 1) % 3)
        prv = face_edge(fi, (slot + 2) % 3)
        if len(occ) == 2:
            fi2, slot2 = occ[1]
            nxt2 = face_edge(fi2, (slot2 + 1) % 3)
            prv2 = face_edge(fi2, (slot2 + 2) % 3)
        else:
            nxt2, prv2 = nxt, prv  # boundary edge: duplicate in-face neighbors
        edge_neighbors[ei] = (nxt, prv, nxt2, prv2)

    return edges, edge_neighbors, edge_faces


@dataclass(eq=False)
class Mesh:
    """Triangle mesh: positions plus the edge-centric connectivity tables."""

    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray
    edge_neighbors: np.ndarray
    edge_faces: np.ndarray

    @classmethod
    def from_arrays(cls, vertices, faces):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V,3), got {vertices.shape}")
        edges, edge_neighbors, edge_faces = build_edge_adjacency(faces, len(vertices))
        return cls(vertices, np.asarray(faces, dtype=np.int64), edges, edge_neighbors, edge_faces)

    def with_vertices(self, vertices):
        """Same connectivity, new positions (no adjacency rebuild)."""
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise ValueError(f"vertex array shape {vertices.shape} != {self.vertices.shape}")
        return Mesh(vertices, self.faces, self.edges, self.edge_neighbors, self.edge_faces)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def euler_characteristic(self):
        return self.n_vertices - self.n_edges + self.n_faces

    def genus(self):
        """Genus of a closed connected orientable mesh (chi = 2 - 2g)."""
        chi = self.euler_characteristic
        if chi % 2:
            raise ValueError(f"odd Euler characteristic {chi}; mesh is not closed")
        return (2 - chi) // 2

    def face_corners(self):
        return self.vertices[self.faces]  # (F, 3, 3)

    def face_cross(self):
        c = self.face_corners()
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self):
        """Unit face normals (zero vector for degenerate faces)."""
        cr = self.face_cross()
        n = np.linalg.norm(cr, axis=1, keepdims=True)
        return np.divide(cr, n, out=np.zeros_like(cr), where=n > 0)

    def total_area(self):
        return float(self.face_areas().sum())

    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self):
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def signed_volume(self):
        c = self.face_corners()
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)


def is_watertight(mesh):
    """True iff every edge has exactly two incident faces and the mesh is orientable.

    Orientability is tested by greedily assigning a consistent orientation
    over face adjacency; a contradiction means a non-orientable surface.
    """
    if mesh.n_faces == 0:
        return False
    if (mesh.edge_faces[:, 1] < 0).any():
        return False

    # flip[f] = whether face f must be flipped relative to its stored winding.
    flip = np.full(mesh.n_faces, -1, dtype=np.int8)
    directed = _directed_edge_signs(mesh)
    for seed in range(mesh.n_faces):
        if flip[seed] >= 0:
            continue
        flip[seed] = 0
        stack = [seed]
        while stack:
            f = stack.pop()
            for ei in _face_edge_ids(mesh, f):
                fa, fb = mesh.edge_faces[ei]
                other = fb if fa == f else fa
                # Faces agree iff they traverse the shared edge in opposite
                # directions; same direction forces a relative flip.
                same_dir = directed[ei, 0 if fa == f else 1] == directed[ei, 1 if fa == f else 0]
                want = flip[f] ^ (1 if same_dir else 0)
                if flip[other] < 0:
                    flip[other] = want
                    stack.append(other)
                elif flip[other] != want:
                    return False
    return True


def _face_edge_ids(mesh, f):
    # The three edge ids of face f, via edge_faces lookup cache.
    if not hasattr(mesh, "_face_edges"):
        fe = np.full((mesh.n_faces, 3), -1, dtype=np.int64)
        counts = np.zeros(mesh.n_faces, dtype=np.int64)
        for ei, (fa, fb) in enumerate(mesh.edge_faces):
            for fc in (fa, fb):
                if fc >= 0:
                    fe[fc, counts[fc]] = ei
                    counts[fc] += 1
        mesh._face_edges = fe
    return mesh._face_edges[f]


def _directed_edge_signs(mesh):
    """For each edge and incident-face slot: True if the face traverses the
    edge as (lo, hi), False as (hi, lo)."""
    signs = np.zeros((mesh.n_edges, 2), dtype=bool)
    for ei, (lo, hi) in enumerate(mesh.edges):
        for j in range(2):
            f = mesh.edge_faces[ei, j]
            if f < 0:
                continue
            tri = mesh.faces[f]
            for k in range(3):
                if tri[k] == lo and tri[(k + 1) % 3] == hi:
                    signs[ei, j] = True
                    break
    return signs


@dataclass(eq=False)
class MeshPart:
    """One sub-mesh of a PartMesh, with index maps back into the parent."""

    mesh: Mesh
    vertex_map: np.ndarray  # local vertex -> parent vertex
    face_map: np.ndarray    # local face -> parent face
    edge_map: np.ndarray    # local edge -> parent edge


@dataclass(eq=False)
class PartMesh:
    parent: Mesh
    parts: list[MeshPart] = field(default_factory=list)

    @property
    def n_parts(self):
        return len(self.parts)


def split_into_parts(mesh, grid_n, overlap_margin=0.05):
    """Partition a mesh into overlapping sub-meshes over an n-by-n grid.

    The grid spans the two largest bounding-box axes.  Each bin is dilated by
    `overlap_margin` times the bbox diagonal, and a part takes every face
    with at least one vertex inside its dilated bin; vertices near bin
    boundaries therefore belong to several parts.  grid_n=1 returns a single
    part identical to the parent.
    """
    if grid_n < 1:
        raise ValueError("grid_n must be >= 1")
    lo, hi = mesh.bbox()
    extents = hi - lo
    axes = np.argsort(-extents, kind="stable")[:2]
    axes = np.sort(axes)  # deterministic axis order
    margin = overlap_margin * mesh.bbox_diagonal()

    edge_index = {(int(a), int(b)): i for i, (a, b) in enumerate(mesh.edges)}
    parts = []
    for gi in range(grid_n):
        for gj in range(grid_n):
            inside = np.ones(mesh.n_vertices, dtype=bool)
            for axis, g in ((axes[0], gi), (axes[1], gj)):
                width = extents[axis] / grid_n
                b_lo = lo[axis] + g * width - margin
                b_hi = lo[axis] + (g + 1) * width + margin
                v = mesh.vertices[:, axis]
                inside &= (v >= b_lo) & (v <= b_hi)
            face_mask = inside[mesh.faces].any(axis=1)
            if not face_mask.any():
                warnings.warn(f"part ({gi},{gj}) is empty and was dropped")
                continue
            face_ids = np.nonzero(face_mask)[0]
            vert_ids = np.unique(mesh.faces[face_ids])
            local = np.full(mesh.n_vertices, -1, dtype=np.int64)
            local[vert_ids] = np.arange(len(vert_ids))
            sub = Mesh.from_arrays(mesh.vertices[vert_ids], local[mesh.faces[face_ids]])
            emap = np.array(
                [edge_index[tuple(sorted((int(vert_ids[a]), int(vert_ids[b]))))] for a, b in sub.edges],
                dtype=np.int64,
            )
            parts.append(MeshPart(sub, vert_ids, face_ids, emap))

    pm = PartMesh(mesh, parts)
    covered = np.zeros(mesh.n_vertices, dtype=bool)
    for p in parts:
        covered[p.vertex_map] = True
    if not covered.all():
        raise ValueError("some parent vertices are not covered by any part")
    union = np.unique(np.concatenate([p.face_map for p in parts]))
    if len(union) != mesh.n_faces:
        raise ValueError("union of part faces does not equal the parent face set")
    return pm


def merge_parts(part_mesh, displaced_parts):
    """Recombine per-part vertex positions into the parent mesh.

    Every parent vertex position becomes the arithmetic mean of its positions
    across all parts that contain it; connectivity is taken from the parent.
    """
    if len(displaced_parts) != part_mesh.n_parts:
        raise ValueError(
            f"got {len(displaced_parts)} position arrays for {part_mesh.n_parts} parts"
        )
    parent = part_mesh.parent
    acc = np.zeros_like(parent.vertices)
    cnt = np.zeros(parent.n_vertices, dtype=np.int64)
    for part, pos in zip(part_mesh.parts, displaced_parts):
        pos = np.asarray(pos, dtype=np.float64)
        if pos.shape != part.mesh.vertices.shape:
            raise ValueError("displaced part positions do not match part topology")
        np.add.at(acc, part.vertex_map, pos)
        np.add.at(cnt, part.vertex_map, 1)
    return parent.with_vertices(acc / cnt[:, None])
