"""Mutable triangle connectivity supporting manifold-preserving edge collapses.

Both the feature pooling of the network and quadric simplification need the
same mechanics: collapse an interior edge, merge its endpoint vertices, drop
the two incident faces, and fuse the side-edge pairs.  Legality is the
standard link condition (the endpoints' shared neighbors are exactly the two
opposite vertices), which keeps the surface manifold and preserves genus.
"""

from __future__ import annotations

import numpy as np

from .mesh import Mesh


class EdgeCollapser:
    def __init__(self, mesh):
        self.verts = mesh.vertices.copy()
        self.faces = mesh.faces.copy()
        self.face_alive = np.ones(len(self.faces), dtype=bool)
        self.vert_alive = np.ones(len(self.verts), dtype=bool)
        self.n_faces = len(self.faces)
        self.n_verts = len(self.verts)

        self.edge_pair = [tuple(int(v) for v in e) for e in mesh.edges]
        self.pair_eid = {p: i for i, p in enumerate(self.edge_pair)}
        self.edge_alive = np.ones(len(self.edge_pair), dtype=bool)
        self.n_edges = len(self.edge_pair)

        self.nbr = {v: set() for v in range(len(self.verts))}
        for a, b in self.edge_pair:
            self.nbr[a].add(b)
            self.nbr[b].add(a)

        self.vfaces = {v: set() for v in range(len(self.verts))}
        for fi, tri in enumerate(self.faces):
            for v in tri:
                self.vfaces[int(v)].add(fi)

        self.edge_faces = {i: set() for i in range(len(self.edge_pair))}
        for ei, (fa, fb) in enumerate(mesh.edge_faces):
            for f in (fa, fb):
                if f >= 0:
                    self.edge_faces[ei].add(int(f))

    # -- queries ------------------------------------------------------------

    def eid(self, u, v):
        return self.pair_eid.get((u, v) if u < v else (v, u))

    def edge_ids_of_vertex(self, v):
        return [self.eid(v, x) for x in self.nbr[v]]

    def check_collapse(self, ei):
        """Link-condition test.  Returns (u, v, f1, w1, f2, w2) when the
        collapse is legal, None otherwise."""
        if not self.edge_alive[ei]:
            return None
        if self.n_faces <= 4 or self.n_verts <= 4:
            return None
        u, v = self.edge_pair[ei]
        fs = sorted(self.edge_faces[ei])
        if len(fs) != 2:
            return None
        common = self.nbr[u] & self.nbr[v]
        if len(common) != 2:
            return None
        opp = []
        for f in fs:
            w = [int(x) for x in self.faces[f] if x != u and x != v]
            if len(w) != 1:
                return None
            opp.append(w[0])
        w1, w2 = opp
        if w1 == w2 or {w1, w2} != common:
            return None
        # Side edges must be interior (keeps part-boundary regions intact).
        for w in (w1, w2):
            for x in (u, v):
                se = self.eid(x, w)
                if se is None or len(self.edge_faces[se]) != 2:
                    return None
        return u, v, fs[0], w1, fs[1], w2

    # -- mutation -----------------------------------------------------------

    def collapse(self, ei, new_pos=None, on_merge=None):
        """Collapse edge `ei` (must have passed check_collapse).

        Merges vertex v into u (u < v), removes the two incident faces, and
        fuses each dying side edge (v,w) into its kept twin (u,w).  The
        callback `on_merge(dead_eid, kept_eid)` fires for every edge identity
        that disappears: the two fused side edges and the collapsed edge
        itself (reported against the first face's kept side).
        """
        info = self.check_collapse(ei)
        if info is None:
            raise ValueError(f"illegal collapse of edge {ei}")
        u, v, f1, w1, f2, w2 = info

        kept1, dead1 = self.eid(u, w1), self.eid(v, w1)
        kept2, dead2 = self.eid(u, w2), self.eid(v, w2)

        # retire the two faces
        for f, w in ((f1, w1), (f2, w2)):
            self.face_alive[f] = False
            for x in (u, v, w):
                self.vfaces[x].discard(f)
            for e in (ei, self.eid(u, w), self.eid(v, w)):
                self.edge_faces[e].discard(f)
        self.n_faces -= 2

        # fuse side edges: surviving faces of (v,w) now border (u,w)
        for kept, dead in ((kept1, dead1), (kept2, dead2)):
            self.edge_faces[kept] |= self.edge_faces[dead]
            self.edge_faces[dead] = set()
            self._kill_edge(dead)
            if on_merge:
                on_merge(dead, kept)
        self._kill_edge(ei)
        if on_merge:
            on_merge(ei, kept1)

        # move v's remaining faces and edges onto u
        for f in list(self.vfaces[v]):
            tri = self.faces[f]
            self.faces[f] = [u if int(x) == v else int(x) for x in tri]
            self.vfaces[u].add(f)
        for x in list(self.nbr[v]):
            if x in (u, w1, w2):
                continue
            e = self.eid(v, x)
            self._rename_edge(e, (v, x), (u, x))
        for x in self.nbr[v]:
            self.nbr[x].discard(v)
            if x != u:
                self.nbr[x].add(u)
                self.nbr[u].add(x)
        self.nbr[u].discard(v)
        self.nbr[u].discard(u)
        del self.nbr[v]
        self.vfaces[v] = set()
        self.vert_alive[v] = False
        self.n_verts -= 1

        self.verts[u] = 0.5 * (self.verts[u] + self.verts[v]) if new_pos is None else new_pos
        return u, v

    def _kill_edge(self, ei):
        a, b = self.edge_pair[ei]
        del self.pair_eid[(a, b) if a < b else (b, a)]
        self.edge_alive[ei] = False
        self.n_edges -= 1

    def _rename_edge(self, ei, old, new):
        a, b = old
        del self.pair_eid[(a, b) if a < b else (b, a)]
        a, b = new
        key = (a, b) if a < b else (b, a)
        if key in self.pair_eid:
            raise ValueError(f"edge rename collides at {key}")
        self.pair_eid[key] = ei
        self.edge_pair[ei] = key

    # -- extraction ---------------------------------------------------------

    def to_mesh(self):
        """Compacted mesh plus maps (old vertex -> new, alive edge id -> new
        edge index in the rebuilt canonical ordering)."""
        vmap = np.full(len(self.verts), -1, dtype=np.int64)
        alive_v = np.nonzero(self.vert_alive)[0]
        vmap[alive_v] = np.arange(len(alive_v))
        faces = self.faces[self.face_alive]
        mesh = Mesh.from_arrays(self.verts[alive_v], vmap[faces])
        new_edge_index = {tuple(e): i for i, e in enumerate(mesh.edges.tolist())}
        eid_map = {}
        for ei in np.nonzero(self.edge_alive)[0]:
            a, b = self.edge_pair[ei]
            a, b = int(vmap[a]), int(vmap[b])
            key = (a, b) if a < b else (b, a)
            eid_map[int(ei)] = new_edge_index[key]
        return mesh, vmap, eid_map
