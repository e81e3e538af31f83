"""Differentiable surface sampling and the three loss terms: bidirectional
point-set distance, the beam penalty that pulls bridging faces into cavities,
and the unoriented-normal alignment penalty.

Nearest-neighbor pairings and beam hits are recomputed every iteration but
excluded from differentiation (standard subgradient treatment of the min);
gradients flow only through the sampled positions and face normals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mesh import draw_face_samples
from .spatial import PointIndex, beam_intersect_batch, mutual_knn_mask, nearest_batch


@dataclass
class LossWeights:
    chamfer: float = 1.0
    beam: float = 0.05
    normal: float = 0.1
    beam_every: int = 5        # apply the beam term every Nth iteration
    beam_start_level: int = 1  # first level (0-based) on which beams activate

    def __post_init__(self):
        if min(self.chamfer, self.beam, self.normal) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(eq=False)
class SampleBatch:
    """Differentiable surface samples: positions carry tape provenance to the
    three vertices of their source face, normals to all face vertices."""

    positions: Tensor       # (S, 3)
    face_index: np.ndarray  # (S,)
    bary: np.ndarray        # (S, 2) in-triangle coordinates, a1 + a2 < 1
    normals: Tensor         # (S, 3) unit normal of the source face

    def __len__(self):
        return self.positions.shape[0]


def unit_face_normals(vertices, faces):
    """Differentiable unit face normals for all faces: (F, 3)."""
    vertices = ad.as_tensor(vertices)
    v = vertices.data
    c0, c1, c2 = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    u = c1 - c0
    w = c2 - c0
    raw = np.cross(u, w)
    nn = np.linalg.norm(raw, axis=1, keepdims=True)
    safe = np.where(nn > 0, nn, 1.0)
    n = raw / safe * (nn > 0)

    def vjp(g):
        graw = (g - n * (n * g).sum(axis=1, keepdims=True)) / safe
        gu = np.cross(w, graw)
        gw = np.cross(graw, u)
        gv = np.zeros_like(v)
        np.add.at(gv, faces[:, 0], -gu - gw)
        np.add.at(gv, faces[:, 1], gu)
        np.add.at(gv, faces[:, 2], gw)
        return (gv,)

    return ad.make_op(n.astype(v.dtype, copy=False), (vertices,), vjp)


def sample_surface(vertices, mesh, count, rng):
    """Draw `count` uniform surface samples from the mesh at the given vertex
    positions (faces weighted by area, uniform within each face)."""
    vertices = ad.as_tensor(vertices)
    faces = mesh.faces
    v = vertices.data
    cr = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
    areas = 0.5 * np.linalg.norm(cr, axis=1)
    face_idx, bary = draw_face_samples(areas, count, rng)

    dt = v.dtype
    a1 = bary[:, 0:1].astype(dt)
    a2 = bary[:, 1:2].astype(dt)
    w0 = (1.0 - bary.sum(axis=1, keepdims=True)).astype(dt)
    g0 = ad.gather(vertices, faces[face_idx, 0])
    g1 = ad.gather(vertices, faces[face_idx, 1])
    g2 = ad.gather(vertices, faces[face_idx, 2])
    positions = ad.add(ad.add(ad.mul(g0, w0), ad.mul(g1, a1)), ad.mul(g2, a2))

    normals = ad.gather(unit_face_normals(vertices, faces), face_idx)
    return SampleBatch(positions, face_idx, bary, normals)


# ---------------------------------------------------------------------------
# bidirectional point-set distance


def chamfer_frozen(positions, x_points, idx_sample_for_x, idx_x_for_sample, squared=False):
    """The distance sum with both nearest-neighbor pairings fixed."""
    dt = positions.dtype
    x = np.asarray(x_points, dtype=dt)
    d1 = ad.sub(ad.gather(positions, idx_sample_for_x), ad.tensor(x))
    d2 = ad.sub(positions, ad.tensor(x[idx_x_for_sample]))
    if squared:
        t1 = ad.reduce_sum(ad.mul(d1, d1))
        t2 = ad.reduce_sum(ad.mul(d2, d2))
    else:
        t1 = ad.reduce_sum(ad.rownorm(d1))
        t2 = ad.reduce_sum(ad.rownorm(d2))
    return ad.add(t1, t2)


def chamfer_with_pairings(cloud, batch, index_x=None, index_y=None, squared=False):
    """Distance plus the pairings it used: (loss, nearest sample per cloud
    point, nearest cloud point per sample)."""
    p = batch.positions.data.astype(np.float64, copy=False)
    if index_x is None:
        index_x = PointIndex(cloud.points)
    if index_y is None:
        index_y = PointIndex(p)
    idx_sample_for_x, _ = nearest_batch(index_y, cloud.points)
    idx_x_for_sample, _ = nearest_batch(index_x, p)
    loss = chamfer_frozen(batch.positions, cloud.points, idx_sample_for_x, idx_x_for_sample, squared)
    return loss, idx_sample_for_x, idx_x_for_sample


def chamfer(cloud, batch, index_x=None, index_y=None, squared=False):
    """Sum of nearest-neighbor distances in both directions (gradients flow
    to the sampled positions only; the cloud is fixed)."""
    loss, _, _ = chamfer_with_pairings(cloud, batch, index_x, index_y, squared)
    return loss


# ---------------------------------------------------------------------------
# beam penalty


def beam_gap_frozen(positions, sample_ids, targets):
    """Squared distance from selected samples to their fixed beam hits."""
    t = ad.tensor(np.asarray(targets, dtype=positions.dtype))
    d = ad.sub(ad.gather(positions, sample_ids), t)
    return ad.reduce_sum(ad.mul(d, d))


def beam_gap(batch, index_x, epsilon, k=5, inward=True):
    """Penalty pulling poorly fit samples toward the first cloud point inside
    an epsilon-cylinder along the sample's face normal.

    Samples passing the mutual-k-NN good-fit test are exempt; samples whose
    beam hits nothing contribute zero.  Beams are cast inward (against the
    outward face normal) since unexplained points of a shrink-wrapped target
    lie inside the current surface.
    """
    p = batch.positions.data.astype(np.float64, copy=False)
    good = mutual_knn_mask(p, index_x, k)
    active = np.nonzero(~good)[0]
    zero = ad.tensor(np.zeros((), dtype=batch.positions.dtype))
    if len(active) == 0:
        return zero
    dirs = batch.normals.data[active].astype(np.float64, copy=False)
    if inward:
        dirs = -dirs
    hit, points, _ = beam_intersect_batch(index_x, p[active], dirs, epsilon)
    sel = active[hit]
    if len(sel) == 0:
        return zero
    return beam_gap_frozen(batch.positions, sel, points[hit])


# ---------------------------------------------------------------------------
# normal alignment


def normal_penalty(cloud, batch, pairing):
    """Cosine misalignment between cloud normals and the face normals of
    their paired samples; `pairing` maps each cloud point to a sample index.

    Unoriented clouds use the absolute dot product, so flipped normals incur
    no penalty.  Clouds without normals skip the term with a warning.
    """
    if cloud.normals is None:
        warnings.warn("point cloud has no normals; normal penalty skipped")
        return ad.tensor(np.zeros((), dtype=batch.positions.dtype))
    ns = ad.gather(batch.normals, pairing)
    nx = ad.tensor(cloud.normals.astype(batch.positions.dtype))
    dots = ad.reduce_sum(ad.mul(ns, nx), axis=1)
    if cloud.oriented:
        pen = ad.sub(1.0, dots)
    else:
        pen = ad.sub(1.0, ad.absval(dots))
    return ad.reduce_mean(pen)


# ---------------------------------------------------------------------------
# combination


def beam_applies(weights, iteration, level):
    return (
        weights.beam > 0
        and level >= weights.beam_start_level
        and iteration % weights.beam_every == 0
    )


def total_loss(chamfer_term, beam_term, normal_term, weights, iteration, level=None):
    """Weighted sum; the beam term participates only on iterations matching
    its cadence (and, when `level` is given, from its start level onward)."""
    total = ad.scale(chamfer_term, weights.chamfer)
    lvl = weights.beam_start_level if level is None else level
    if beam_term is not None and beam_applies(weights, iteration, lvl):
        total = ad.add(total, ad.scale(beam_term, weights.beam))
    if normal_term is not None and weights.normal > 0:
        total = ad.add(total, ad.scale(normal_term, weights.normal))
    return total
