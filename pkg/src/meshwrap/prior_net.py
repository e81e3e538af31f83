"""The self-prior network: a U-shaped stack of edge convolutions with
collapse-based pooling, mapping a fixed random per-edge code to displacement
pairs for every edge.

Each edge convolution sees an edge and its four adjacent edges through the
order-invariant stencil (e, |a-c|, a+c, |b-d|, b+d), so swapping the edges
within either triangle never changes the output.  The final layer starts at
exactly zero, which makes the first forward pass of a level a no-op on the
mesh.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import SparseLinear, Tensor
from .collapse import EdgeCollapser
from .mesh import Mesh


# ---------------------------------------------------------------------------
# edge code


@dataclass(eq=False)
class EdgeCode:
    """Fixed random network input: one six-vector per edge, uniform [0,1)."""

    values: Tensor

    @property
    def n_edges(self):
        return self.values.shape[0]


def sample_edge_code(mesh, rng, channels=6, dtype=np.float32):
    vals = rng.random((mesh.n_edges, channels)).astype(dtype)
    return EdgeCode(ad.tensor(vals))


# ---------------------------------------------------------------------------
# convolution stencil


def _neighbor_ops(mesh):
    """Four sparse maps per mesh: sums and differences of the (a,c) and (b,d)
    neighbor pairs.  Cached on the mesh; connectivity never changes."""
    ops = getattr(mesh, "_stencil_ops", None)
    if ops is not None:
        return ops
    e = mesh.n_edges
    rows = np.repeat(np.arange(e, dtype=np.int64), 2)
    ones = np.ones(2 * e)
    alt = np.tile([1.0, -1.0], e)
    nb = mesh.edge_neighbors

    def pair(i, j, values):
        cols = np.stack([nb[:, i], nb[:, j]], axis=1).reshape(-1)
        return SparseLinear(rows, cols, values, (e, e))

    ops = (pair(0, 2, ones), pair(0, 2, alt), pair(1, 3, ones), pair(1, 3, alt))
    mesh._stencil_ops = ops
    return ops


def edge_conv(features, mesh, weight, bias=None):
    """One learned linear map over the symmetric 4-neighbor stencil."""
    if features.shape[0] != mesh.n_edges:
        raise ValueError(f"features for {features.shape[0]} edges, mesh has {mesh.n_edges}")
    cin = features.shape[1]
    if weight.shape[0] != 5 * cin:
        raise ValueError(f"weight expects {weight.shape[0] // 5} channels, features have {cin}")
    sum_ac, dif_ac, sum_bd, dif_bd = _neighbor_ops(mesh)
    stencil = ad.concat(
        [
            features,
            ad.absval(ad.spmm(dif_ac, features)),
            ad.spmm(sum_ac, features),
            ad.absval(ad.spmm(dif_bd, features)),
            ad.spmm(sum_bd, features),
        ],
        axis=1,
    )
    out = ad.matmul(stencil, weight)
    if bias is not None:
        out = ad.add(out, bias)
    return out


# ---------------------------------------------------------------------------
# pooling


@dataclass(eq=False)
class PoolRecord:
    """Inverse data for one pooling step: which coarse edge each fine edge
    merged into."""

    fine_mesh: Mesh
    coarse_mesh: Mesh
    fine_to_coarse: np.ndarray


def pool(features, mesh, target_edges):
    """Collapse lowest-feature-norm edges until `target_edges` remain.

    Collapses that would break manifoldness are skipped; if every remaining
    candidate is illegal, pooling stops early at the achieved edge count.
    Features of merged edges are averaged (each coarse edge carries the mean
    of the fine edges that folded into it).  Returns (coarse features,
    record); with target >= current edge count this is the identity.
    """
    e = mesh.n_edges
    if target_edges >= e:
        ident = np.arange(e, dtype=np.int64)
        return features, PoolRecord(mesh, mesh, ident)

    norms = np.sqrt((features.data.astype(np.float64) ** 2).sum(axis=1))
    heap = [(float(n), i) for i, n in enumerate(norms)]
    heapq.heapify(heap)

    ed = EdgeCollapser(mesh)
    parent = np.arange(e, dtype=np.int64)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def on_merge(dead, kept):
        parent[find(dead)] = find(kept)

    while ed.n_edges > target_edges and heap:
        _, ei = heapq.heappop(heap)
        if ed.check_collapse(ei) is None:
            continue
        ed.collapse(ei, on_merge=on_merge)

    coarse_mesh, _, eid_map = ed.to_mesh()
    fine_to_coarse = np.array([eid_map[find(i)] for i in range(e)], dtype=np.int64)
    record = PoolRecord(mesh, coarse_mesh, fine_to_coarse)
    return ad.scatter_mean(features, fine_to_coarse, coarse_mesh.n_edges), record


def unpool(features, record):
    """Broadcast coarse features back to the pre-collapse edges."""
    if features.shape[0] != record.coarse_mesh.n_edges:
        raise ValueError(
            f"features for {features.shape[0]} edges, record expects {record.coarse_mesh.n_edges}"
        )
    return ad.gather(features, record.fine_to_coarse)


# ---------------------------------------------------------------------------
# network


@dataclass
class NetConfig:
    """Architecture knobs; defaults follow the capacity regime that produced
    detailed reconstructions in the capacity sweep (wide bottleneck, ~20%
    pooling, two residual sub-blocks)."""

    channels: tuple = (32, 64, 96, 128, 128, 128)
    res_blocks: int = 2
    pool_fraction: float = 0.2
    leaky_slope: float = 0.01
    group_size: int = 32
    code_channels: int = 6
    out_channels: int = 6
    min_pool_edges: int = 24


class _ResStage:
    """conv0 followed by `res` sub-convolutions with a residual connection."""

    def __init__(self, cin, cout, res, rng, dtype, name):
        self.name = name
        self.cout = cout
        self.res = res
        self.w0 = _conv_param(cin, cout, rng, dtype, f"{name}.w0")
        self.b0 = ad.parameter(np.zeros(cout, dtype=dtype), name=f"{name}.b0")
        self.sub = []
        for j in range(res):
            self.sub.append(
                (
                    ad.parameter(np.ones(cout, dtype=dtype), name=f"{name}.g{j}"),
                    ad.parameter(np.zeros(cout, dtype=dtype), name=f"{name}.s{j}"),
                    _conv_param(cout, cout, rng, dtype, f"{name}.w{j + 1}"),
                    ad.parameter(np.zeros(cout, dtype=dtype), name=f"{name}.b{j + 1}"),
                )
            )

    def params(self):
        out = [self.w0, self.b0]
        for gamma, beta, w, b in self.sub:
            out += [gamma, beta, w, b]
        return out

    def __call__(self, x, mesh, groups, slope):
        x = edge_conv(x, mesh, self.w0, self.b0)
        x1 = x
        for gamma, beta, w, b in self.sub:
            x = ad.group_norm(ad.leaky_relu(x, slope), gamma, beta, groups)
            x = edge_conv(x, mesh, w, b)
        return ad.leaky_relu(ad.add(x, x1), slope)


def _conv_param(cin, cout, rng, dtype, name):
    fan_in = 5 * cin
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, cout)).astype(dtype)
    return ad.parameter(w, name=name)


class PriorNet:
    """U-shaped edge-convolution network with pooling, unpooling and skip
    connections; the zero-initialized head guarantees a zero first output."""

    def __init__(self, config, rng, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        ch = list(config.channels)
        self.encoder = []
        cin = config.code_channels
        for i, c in enumerate(ch):
            self.encoder.append(_ResStage(cin, c, config.res_blocks, rng, dtype, f"enc{i}"))
            cin = c
        self.decoder = []
        for i in range(len(ch) - 2, -1, -1):
            cin = ch[i + 1] + ch[i]  # unpooled deeper features + skip
            self.decoder.append(_ResStage(cin, ch[i], config.res_blocks, rng, dtype, f"dec{i}"))
        self.head_w = ad.parameter(
            np.zeros((5 * ch[0], config.out_channels), dtype=dtype), name="head.w"
        )
        self.head_b = ad.parameter(np.zeros(config.out_channels, dtype=dtype), name="head.b")

    def parameters(self):
        out = []
        for s in self.encoder + self.decoder:
            out += s.params()
        out += [self.head_w, self.head_b]
        return out

    def n_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def _groups(self, c):
        return max(1, c // min(self.config.group_size, c))

    def forward(self, mesh, code):
        cfg = self.config
        x = code.values if isinstance(code, EdgeCode) else code
        if x.shape[0] != mesh.n_edges:
            raise ValueError(f"code has {x.shape[0]} rows, mesh has {mesh.n_edges} edges")
        slope = cfg.leaky_slope

        skips, records = [], []
        cur = mesh
        n_enc = len(self.encoder)
        for i, stage in enumerate(self.encoder):
            x = stage(x, cur, self._groups(stage.cout), slope)
            _check_finite(x, stage.name)
            if i < n_enc - 1:
                skips.append(x)
                target = max(cfg.min_pool_edges, int(round(cur.n_edges * (1.0 - cfg.pool_fraction))))
                x, rec = pool(x, cur, target)
                records.append(rec)
                cur = rec.coarse_mesh

        for stage in self.decoder:
            rec = records.pop()
            x = unpool(x, rec)
            x = ad.concat([x, skips.pop()], axis=1)
            cur = rec.fine_mesh
            x = stage(x, cur, self._groups(stage.cout), slope)
            _check_finite(x, stage.name)

        out = edge_conv(x, mesh, self.head_w, self.head_b)
        _check_finite(out, "head")
        return out


def _check_finite(t, name):
    if not np.isfinite(t.data).all():
        raise FloatingPointError(f"non-finite activation in layer {name}")


def predict_displacements(net, code, mesh):
    """Full U-pass: per-edge displacement pairs, shape (E, 6) viewed as
    (E, 2, 3) with slot order matching the stored (lo, hi) edge vertices."""
    return net.forward(mesh, code)


def build_delta_v(delta_e, mesh):
    """Average the per-edge endpoint displacements into per-vertex ones.

    Vertex i receives the mean over every edge slot that references it, so a
    valence-n vertex averages n predictions.
    """
    if delta_e.shape != (mesh.n_edges, 6):
        raise ValueError(f"delta_e shape {delta_e.shape}, expected ({mesh.n_edges}, 6)")
    ids = np.concatenate([mesh.edges[:, 0], mesh.edges[:, 1]])
    counts = np.bincount(ids, minlength=mesh.n_vertices)
    if (counts == 0).any():
        lonely = int(np.nonzero(counts == 0)[0][0])
        raise ValueError(f"vertex {lonely} has no incident edge")
    slots = ad.concat([ad.cols(delta_e, 0, 3), ad.cols(delta_e, 3, 6)], axis=0)
    return ad.scatter_mean(slots, ids, mesh.n_vertices)


def apply_displacements(mesh, delta_v):
    """Shift vertex positions; connectivity is untouched."""
    dv = delta_v.data if isinstance(delta_v, Tensor) else np.asarray(delta_v)
    return mesh.with_vertices(mesh.vertices + dv)


@dataclass(eq=False)
class LevelState:
    """Everything one optimization level owns: the level's base mesh, the
    frozen code, freshly initialized weights, and the optimizer state."""

    mesh: Mesh
    code: EdgeCode
    net: PriorNet
    optimizer: object
    base_vertices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.base_vertices is None:
            self.base_vertices = self.mesh.vertices.copy()
