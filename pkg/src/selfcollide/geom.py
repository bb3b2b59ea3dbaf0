"""Exact self-collision oracle for triangle meshes.

A BVH over triangle boxes prunes the quadratic pair search; surviving
non-adjacent pairs are tested exactly (Moller interval test with a coplanar
fallback).  The report carries a signed penetration measure: the maximum
per-pair separating-axis depth when any pair intersects, or the negated
minimum separation over non-adjacent pairs otherwise.  Per-domain depths
aggregate pair depths over the vertex->domain map by max.

All queries are read-only over an immutable BVH and can run concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .mesh import Mesh


class GeomError(ValueError):
    pass


class DegenerateTriangleError(GeomError):
    """Zero-area triangle where a geometric predicate needs a plane."""


# ---------------------------------------------------------------------------
# small vector helpers (batched over leading axis)

def _dot(u, v):
    return (u * v).sum(axis=-1)


def _cross(u, v):
    out = np.empty(np.broadcast(u, v).shape, dtype=np.float64)
    out[..., 0] = u[..., 1] * v[..., 2] - u[..., 2] * v[..., 1]
    out[..., 1] = u[..., 2] * v[..., 0] - u[..., 0] * v[..., 2]
    out[..., 2] = u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
    return out


def _check_not_degenerate(tri_stacks, where=""):
    a0, a1, a2 = tri_stacks
    n = _cross(a1 - a0, a2 - a0)
    area2 = np.linalg.norm(n, axis=-1)
    scale = np.linalg.norm(a1 - a0, axis=-1) * np.linalg.norm(a2 - a0, axis=-1)
    bad = area2 <= 1e-14 * np.maximum(scale, 1e-300)
    if np.any(bad):
        idx = int(np.nonzero(np.atleast_1d(bad))[0][0])
        raise DegenerateTriangleError(f"zero-area triangle{where} (batch index {idx})")


# ---------------------------------------------------------------------------
# triangle-triangle intersection (Moller interval test, batched)

def _plane_interval(p0, p1, p2, d0, d1, d2, axis_proj):
    """Projection interval, onto the plane-intersection line, of one triangle's
    cut through the other triangle's plane.

    Candidates are vertices lying exactly on the plane and edges whose
    endpoints straddle it; an empty candidate set means no crossing.
    """
    n = d0.shape[0]
    ts = np.full((n, 6), np.nan)
    valid = np.zeros((n, 6), dtype=bool)
    ds = (d0, d1, d2)
    ps = axis_proj
    for k in range(3):
        on_plane = ds[k] == 0.0
        valid[:, k] = on_plane
        ts[:, k] = np.where(on_plane, ps[k], 0.0)
    pairs = ((0, 1), (1, 2), (2, 0))
    for m, (i, j) in enumerate(pairs):
        di, dj = ds[i], ds[j]
        crossing = di * dj < 0.0
        denom = np.where(crossing, di - dj, 1.0)
        t = ps[i] + (ps[j] - ps[i]) * (di / denom)
        valid[:, 3 + m] = crossing
        ts[:, 3 + m] = np.where(crossing, t, 0.0)
    any_valid = valid.any(axis=1)
    tmin = np.where(valid, ts, np.inf).min(axis=1)
    tmax = np.where(valid, ts, -np.inf).max(axis=1)
    return any_valid, tmin, tmax


def _coplanar_overlap_2d(a, b, normal):
    """Exact 2D overlap test for a coplanar triangle pair (scalar path)."""
    drop = int(np.argmax(np.abs(normal)))
    u, v = ((1, 2), (0, 2), (0, 1))[drop]
    pa = [(float(p[u]), float(p[v])) for p in a]
    pb = [(float(p[u]), float(p[v])) for p in b]

    # cheap reject: projected boxes
    if max(p[0] for p in pa) < min(p[0] for p in pb) or max(p[0] for p in pb) < min(p[0] for p in pa):
        return False
    if max(p[1] for p in pa) < min(p[1] for p in pb) or max(p[1] for p in pb) < min(p[1] for p in pa):
        return False

    def cross(o, d, p):
        return (d[0] - o[0]) * (p[1] - o[1]) - (d[1] - o[1]) * (p[0] - o[0])

    def on_segment(p, q, c):
        # c assumed collinear with p-q
        return (
            min(p[0], q[0]) <= c[0] <= max(p[0], q[0])
            and min(p[1], q[1]) <= c[1] <= max(p[1], q[1])
        )

    def seg_intersect(p, q, r, s):
        if max(r[0], s[0]) < min(p[0], q[0]) or max(p[0], q[0]) < min(r[0], s[0]):
            return False
        if max(r[1], s[1]) < min(p[1], q[1]) or max(p[1], q[1]) < min(r[1], s[1]):
            return False
        d1 = cross(p, q, r)
        d2 = cross(p, q, s)
        d3 = cross(r, s, p)
        d4 = cross(r, s, q)
        if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
            (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
        ):
            return True
        if d1 == 0 and on_segment(p, q, r):
            return True
        if d2 == 0 and on_segment(p, q, s):
            return True
        if d3 == 0 and on_segment(r, s, p):
            return True
        if d4 == 0 and on_segment(r, s, q):
            return True
        return False

    def contains(tri, pt):
        s1 = cross(tri[0], tri[1], pt)
        s2 = cross(tri[1], tri[2], pt)
        s3 = cross(tri[2], tri[0], pt)
        return (s1 >= 0 and s2 >= 0 and s3 >= 0) or (s1 <= 0 and s2 <= 0 and s3 <= 0)

    for i in range(3):
        for j in range(3):
            if seg_intersect(pa[i], pa[(i + 1) % 3], pb[j], pb[(j + 1) % 3]):
                return True
    return contains(pa, pb[0]) or contains(pb, pa[0])


def tri_tri_intersect_many(a0, a1, a2, b0, b1, b2) -> np.ndarray:
    """Closed-triangle intersection tests for stacked pairs, shape (N,)."""
    a0, a1, a2, b0, b1, b2 = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (a0, a1, a2, b0, b1, b2))
    _check_not_degenerate((a0, a1, a2), " in first operand")
    _check_not_degenerate((b0, b1, b2), " in second operand")

    n1 = _cross(a1 - a0, a2 - a0)
    db = np.stack([_dot(n1, b - a0) for b in (b0, b1, b2)], axis=1)
    n2 = _cross(b1 - b0, b2 - b0)
    da = np.stack([_dot(n2, a - b0) for a in (a0, a1, a2)], axis=1)

    # snap construction-noise plane distances to zero so exactly-tessellated
    # coplanar strips do not fall into the ill-conditioned general path
    reach_b = np.maximum.reduce([np.linalg.norm(b - a0, axis=-1) for b in (b0, b1, b2)])
    reach_a = np.maximum.reduce([np.linalg.norm(a - b0, axis=-1) for a in (a0, a1, a2)])
    eps_b = 1e-12 * np.linalg.norm(n1, axis=-1) * reach_b
    eps_a = 1e-12 * np.linalg.norm(n2, axis=-1) * reach_a
    db = np.where(np.abs(db) <= eps_b[:, None], 0.0, db)
    da = np.where(np.abs(da) <= eps_a[:, None], 0.0, da)

    out = np.zeros(a0.shape[0], dtype=bool)
    separated = (db > 0).all(axis=1) | (db < 0).all(axis=1) | (da > 0).all(axis=1) | (da < 0).all(axis=1)
    coplanar = (da == 0).all(axis=1) & (db == 0).all(axis=1)
    general = ~separated & ~coplanar

    if np.any(general):
        idx = np.nonzero(general)[0]
        d = _cross(n1[idx], n2[idx])
        pa = [_dot(d, a[idx]) for a in (a0, a1, a2)]
        pb = [_dot(d, b[idx]) for b in (b0, b1, b2)]
        okA, loA, hiA = _plane_interval(a0[idx], a1[idx], a2[idx], da[idx, 0], da[idx, 1], da[idx, 2], pa)
        okB, loB, hiB = _plane_interval(b0[idx], b1[idx], b2[idx], db[idx, 0], db[idx, 1], db[idx, 2], pb)
        hit = okA & okB & (np.maximum(loA, loB) <= np.minimum(hiA, hiB))
        out[idx] = hit

    if np.any(coplanar):
        for i in np.nonzero(coplanar)[0]:
            a = np.stack([a0[i], a1[i], a2[i]])
            b = np.stack([b0[i], b1[i], b2[i]])
            out[i] = _coplanar_overlap_2d(a, b, n1[i])
    return out


def tri_tri_intersect(a, b) -> bool:
    """True iff the closed triangles a, b (each (3,3)) share at least one point."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return bool(tri_tri_intersect_many(a[0], a[1], a[2], b[0], b[1], b[2])[0])


# ---------------------------------------------------------------------------
# separating-axis penetration (intersecting pairs)

def _sat_penetration_many(a0, a1, a2, b0, b1, b2) -> np.ndarray:
    """Minimal separating translation over the 11 candidate axes.

    For convex pairs the minimum over face normals and edge cross products
    is the exact local penetration depth; per-axis translation is the
    smaller of the two push-out distances, so containment along an axis is
    handled correctly.
    """
    ea = (a1 - a0, a2 - a1, a0 - a2)
    eb = (b1 - b0, b2 - b1, b0 - b2)
    axes = [_cross(ea[0], ea[1]), _cross(eb[0], eb[1])]
    for u in ea:
        for v in eb:
            axes.append(_cross(u, v))
    axes = np.stack(axes, axis=1)  # (N, 11, 3)
    norms = np.linalg.norm(axes, axis=-1)
    valid = norms > 1e-12
    safe = np.where(valid, norms, 1.0)[..., None]
    unit = axes / safe

    va = np.stack([a0, a1, a2], axis=1)  # (N, 3, 3)
    vb = np.stack([b0, b1, b2], axis=1)
    pa = np.einsum("nkd,nad->nka", va, unit)  # (N, 3 verts, 11 axes)
    pb = np.einsum("nkd,nad->nka", vb, unit)
    min_a, max_a = pa.min(axis=1), pa.max(axis=1)
    min_b, max_b = pb.min(axis=1), pb.max(axis=1)
    t = np.minimum(max_a - min_b, max_b - min_a)
    t = np.where(valid, t, np.inf)
    return np.maximum(t.min(axis=1), 0.0)


# ---------------------------------------------------------------------------
# triangle-triangle distance (disjoint pairs)

def _seg_seg_dist2(p1, q1, p2, q2):
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = _dot(d1, d1)
    e = _dot(d2, d2)
    f = _dot(d2, r)
    c = _dot(d1, r)
    b = _dot(d1, d2)
    denom = a * e - b * b
    s = np.where(denom > 0, np.clip((b * f - c * e) / np.where(denom > 0, denom, 1.0), 0.0, 1.0), 0.0)
    t = (b * s + f) / np.where(e > 0, e, 1.0)
    t_clamped = np.clip(t, 0.0, 1.0)
    s = np.where(
        t != t_clamped,
        np.clip((t_clamped * b - c) / np.where(a > 0, a, 1.0), 0.0, 1.0),
        s,
    )
    c1 = p1 + s[..., None] * d1
    c2 = p2 + t_clamped[..., None] * d2
    diff = c1 - c2
    return _dot(diff, diff)


def _point_tri_dist2(p, a, b, c):
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    bp = p - b
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    cp = p - c
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def safe_div(num, den):
        return num / np.where(den != 0, den, 1.0)

    v_ab = np.clip(safe_div(d1, d1 - d3), 0.0, 1.0)
    w_ac = np.clip(safe_div(d2, d2 - d6), 0.0, 1.0)
    w_bc = np.clip(safe_div(d4 - d3, (d4 - d3) + (d5 - d6)), 0.0, 1.0)
    denom = np.where(va + vb + vc != 0, va + vb + vc, 1.0)
    v_in = vb / denom
    w_in = vc / denom

    cand = [
        ((d1 <= 0) & (d2 <= 0), ap),
        ((d3 >= 0) & (d4 <= d3), bp),
        ((d6 >= 0) & (d5 <= d6), cp),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), ap - v_ab[..., None] * ab),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), ap - w_ac[..., None] * ac),
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), bp - w_bc[..., None] * (c - b)),
    ]
    diff_in = ap - (v_in[..., None] * ab + w_in[..., None] * ac)
    out = _dot(diff_in, diff_in)
    taken = np.zeros(out.shape, dtype=bool)
    for cond, diff in cand:
        use = cond & ~taken
        out = np.where(use, _dot(diff, diff), out)
        taken |= cond
    return out


def tri_tri_dist_many(a0, a1, a2, b0, b1, b2) -> np.ndarray:
    """Exact distance between disjoint triangle pairs (0 if touching).

    Minimum over the 9 edge-edge and 6 vertex-triangle distances, evaluated
    as broadcast batches.
    """
    pa = np.stack([a0, a1, a2], axis=1)  # (N, 3, 3) edge starts
    qa = np.stack([a1, a2, a0], axis=1)
    pb = np.stack([b0, b1, b2], axis=1)
    qb = np.stack([b1, b2, b0], axis=1)
    seg = _seg_seg_dist2(
        np.repeat(pa, 3, axis=1), np.repeat(qa, 3, axis=1),
        np.tile(pb, (1, 3, 1)), np.tile(qb, (1, 3, 1)),
    )  # (N, 9)
    pt_ab = _point_tri_dist2(pa, b0[:, None, :], b1[:, None, :], b2[:, None, :])  # (N, 3)
    pt_ba = _point_tri_dist2(pb, a0[:, None, :], a1[:, None, :], a2[:, None, :])
    best = np.minimum(seg.min(axis=1), np.minimum(pt_ab.min(axis=1), pt_ba.min(axis=1)))
    return np.sqrt(best)


def pair_penetration(a, b) -> float:
    """Signed penetration for one triangle pair.

    Positive: minimal separating translation over the axis candidate set.
    Negative: minus the exact distance between the (disjoint) triangles.
    Zero only for exact touching.  Symmetric in its arguments by canonical
    argument ordering.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if tuple(b.ravel()) < tuple(a.ravel()):
        a, b = b, a
    hit = tri_tri_intersect(a, b)
    args = (a[None, 0], a[None, 1], a[None, 2], b[None, 0], b[None, 1], b[None, 2])
    if hit:
        return float(_sat_penetration_many(*args)[0])
    return -float(tri_tri_dist_many(*args)[0])


# ---------------------------------------------------------------------------
# BVH

@dataclass
class Bvh:
    """Binary AABB tree over triangles; median split on the longest axis.

    Leaves own disjoint slices of ``order``; every node box contains all
    descendant triangle boxes.  Immutable after construction.
    """

    bounds_min: np.ndarray  # (M, 3)
    bounds_max: np.ndarray  # (M, 3)
    left: np.ndarray        # (M,) child index or -1 at leaves
    right: np.ndarray
    start: np.ndarray       # (M,) leaf slice into order
    count: np.ndarray
    order: np.ndarray       # (T,) permutation of triangle indices
    tri_min: np.ndarray     # (T, 3) per-triangle boxes, triangle-indexed
    tri_max: np.ndarray
    leaf_pad: np.ndarray    # (M, leaf_size) leaf triangles, -1 padded
    internal_levels: list   # internal node ids grouped by depth, deepest first
    adjacent_keys: np.ndarray  # sorted lo*T+hi keys of vertex-sharing pairs
    leaf_size: int

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    @property
    def n_triangles(self) -> int:
        return len(self.tri_min)

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0


def _adjacency_keys(triangles: np.ndarray) -> np.ndarray:
    """Sorted canonical keys (lo*T+hi) of all vertex-sharing triangle pairs."""
    t = len(triangles)
    flat = triangles.ravel()
    owner = np.repeat(np.arange(t), 3)
    srt = np.argsort(flat, kind="stable")
    flat, owner = flat[srt], owner[srt]
    boundaries = np.nonzero(np.diff(flat))[0] + 1
    groups = np.split(owner, boundaries)
    keys = []
    for g in groups:
        g = np.unique(g)
        if len(g) > 1:
            ii, jj = np.triu_indices(len(g), k=1)
            keys.append(g[ii] * t + g[jj])
    if not keys:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(keys))


def _drop_adjacent_keys(pairs: np.ndarray, adj_keys: np.ndarray, t: int) -> np.ndarray:
    if len(pairs) == 0 or len(adj_keys) == 0:
        return pairs
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keys = lo * t + hi
    pos = np.clip(np.searchsorted(adj_keys, keys), 0, len(adj_keys) - 1)
    return pairs[adj_keys[pos] != keys]


def build_bvh(mesh: Mesh, leaf_size: int = 4) -> Bvh:
    if mesh.n_triangles == 0:
        raise GeomError("cannot build a BVH over an empty mesh")
    corners = mesh.vertices[mesh.triangles]  # (T, 3, 3)
    tri_min = corners.min(axis=1)
    tri_max = corners.max(axis=1)
    centroids = corners.mean(axis=1)

    order = np.arange(mesh.n_triangles)
    b_min, b_max, left, right, start, count, depth = [], [], [], [], [], [], []

    def new_node(d):
        for arr in (b_min, b_max):
            arr.append(None)
        for arr in (left, right, start, count):
            arr.append(-1)
        depth.append(d)
        return len(left) - 1

    def build(lo: int, hi: int, d: int) -> int:
        node = new_node(d)
        seg = order[lo:hi]
        count[node] = hi - lo
        if hi - lo <= leaf_size:
            b_min[node] = tri_min[seg].min(axis=0)
            b_max[node] = tri_max[seg].max(axis=0)
            start[node] = lo
            return node
        cen = centroids[seg]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        order[lo:hi] = seg[np.argsort(cen[:, axis], kind="stable")]
        mid = lo + (hi - lo) // 2
        l = build(lo, mid, d + 1)
        r = build(mid, hi, d + 1)
        left[node], right[node] = l, r
        b_min[node] = np.minimum(b_min[l], b_min[r])
        b_max[node] = np.maximum(b_max[l], b_max[r])
        return node

    build(0, mesh.n_triangles, 0)
    left_arr = np.asarray(left, dtype=np.int32)
    start_arr = np.asarray(start, dtype=np.int32)
    count_arr = np.asarray(count, dtype=np.int32)
    depth_arr = np.asarray(depth, dtype=np.int32)
    leaf_pad = np.full((len(left), leaf_size), -1, dtype=np.int64)
    for node in np.nonzero(left_arr < 0)[0]:
        s, c = start_arr[node], count_arr[node]
        leaf_pad[node, :c] = order[s : s + c]
    internal = left_arr >= 0
    levels = [
        np.nonzero(internal & (depth_arr == d))[0]
        for d in range(depth_arr.max(initial=0), -1, -1)
    ]
    return Bvh(
        bounds_min=np.asarray(b_min),
        bounds_max=np.asarray(b_max),
        left=left_arr,
        right=np.asarray(right, dtype=np.int32),
        start=start_arr,
        count=count_arr,
        order=order,
        tri_min=tri_min,
        tri_max=tri_max,
        leaf_pad=leaf_pad,
        internal_levels=[lv for lv in levels if len(lv)],
        adjacent_keys=_adjacency_keys(mesh.triangles),
        leaf_size=leaf_size,
    )


_EMPTY_PAIRS = np.empty((0, 2), dtype=np.int64)


def refit_bvh(bvh: Bvh, mesh: Mesh) -> Bvh:
    """Same tree, boxes recomputed for new vertex positions.

    Splits stay optimal for the pose the tree was built on; containment
    (the only property queries rely on) holds for any pose of the same
    topology.  Children are created after parents, so one reverse sweep
    refits every internal node.
    """
    corners = mesh.vertices[mesh.triangles]
    tri_min = corners.min(axis=1)
    tri_max = corners.max(axis=1)
    n = bvh.n_nodes
    bounds_min = np.empty((n, 3))
    bounds_max = np.empty((n, 3))
    leaves = np.nonzero(bvh.left < 0)[0]
    pad = bvh.leaf_pad[leaves]
    safe = np.where(pad >= 0, pad, pad.max(initial=0))
    valid = (pad >= 0)[:, :, None]
    bounds_min[leaves] = np.where(valid, tri_min[safe], np.inf).min(axis=1)
    bounds_max[leaves] = np.where(valid, tri_max[safe], -np.inf).max(axis=1)
    for level in bvh.internal_levels:
        l, r = bvh.left[level], bvh.right[level]
        bounds_min[level] = np.minimum(bounds_min[l], bounds_min[r])
        bounds_max[level] = np.maximum(bounds_max[l], bounds_max[r])
    return Bvh(
        bounds_min=bounds_min, bounds_max=bounds_max, left=bvh.left, right=bvh.right,
        start=bvh.start, count=bvh.count, order=bvh.order,
        tri_min=tri_min, tri_max=tri_max, leaf_pad=bvh.leaf_pad,
        internal_levels=bvh.internal_levels, adjacent_keys=bvh.adjacent_keys,
        leaf_size=bvh.leaf_size,
    )


def _self_leaf_pairs(bvh: Bvh, nodes: np.ndarray) -> np.ndarray:
    """Within-leaf triangle combinations for a batch of leaf nodes."""
    ls = bvh.leaf_size
    if len(nodes) == 0 or ls < 2:
        return _EMPTY_PAIRS
    tp = bvh.leaf_pad[nodes]
    ii, jj = np.triu_indices(ls, k=1)
    a = tp[:, ii].ravel()
    b = tp[:, jj].ravel()
    ok = (a >= 0) & (b >= 0)
    return np.column_stack([a[ok], b[ok]])


def _cross_leaf_pairs(bvh: Bvh, ni: np.ndarray, nj: np.ndarray) -> np.ndarray:
    """All triangle combinations between two batches of distinct leaves."""
    if len(ni) == 0:
        return _EMPTY_PAIRS
    ls = bvh.leaf_size
    ta = bvh.leaf_pad[ni]
    tb = bvh.leaf_pad[nj]
    k = len(ni)
    a = np.broadcast_to(ta[:, :, None], (k, ls, ls)).ravel()
    b = np.broadcast_to(tb[:, None, :], (k, ls, ls)).ravel()
    ok = (a >= 0) & (b >= 0)
    return np.column_stack([a[ok], b[ok]])


def _traverse_generation(bvh: Bvh, arr: np.ndarray):
    """Expand one frontier generation of node pairs.

    Returns (next frontier, leaf nodes paired with themselves,
    (leaf, leaf) cross pair arrays).  Every unordered node pair is visited
    at most once across the whole traversal.
    """
    i, j = arr[:, 0], arr[:, 1]
    same = i == j
    leaf_i = bvh.left[i] < 0
    leaf_j = bvh.left[j] < 0

    self_leaves = i[same & leaf_i]
    si = i[same & ~leaf_i]
    l, r = bvh.left[si], bvh.right[si]

    diff = ~same
    di, dj = i[diff], j[diff]
    dli, dlj = leaf_i[diff], leaf_j[diff]
    both = dli & dlj
    split_i = ~both & ~dli & (dlj | (bvh.count[di] >= bvh.count[dj]))
    split_j = ~both & ~split_i
    ii, jj = di[split_i], dj[split_i]
    ii2, jj2 = di[split_j], dj[split_j]

    n_same, n_i, n_j = len(si), len(ii), len(ii2)
    nxt = np.empty((3 * n_same + 2 * n_i + 2 * n_j, 2), dtype=np.int64)
    nxt[0:n_same, 0] = l
    nxt[0:n_same, 1] = l
    nxt[n_same : 2 * n_same, 0] = l
    nxt[n_same : 2 * n_same, 1] = r
    nxt[2 * n_same : 3 * n_same, 0] = r
    nxt[2 * n_same : 3 * n_same, 1] = r
    o = 3 * n_same
    nxt[o : o + n_i, 0] = bvh.left[ii]
    nxt[o : o + n_i, 1] = jj
    nxt[o + n_i : o + 2 * n_i, 0] = bvh.right[ii]
    nxt[o + n_i : o + 2 * n_i, 1] = jj
    o += 2 * n_i
    nxt[o : o + n_j, 0] = ii2
    nxt[o : o + n_j, 1] = bvh.left[jj2]
    nxt[o + n_j : o + 2 * n_j, 0] = ii2
    nxt[o + n_j : o + 2 * n_j, 1] = bvh.right[jj2]
    return nxt, self_leaves, (di[both], dj[both])


def _candidate_pairs_overlap(bvh: Bvh) -> np.ndarray:
    """Triangle index pairs whose leaf and triangle boxes overlap, via
    BVH self-traversal."""
    frontier = np.zeros((1, 2), dtype=np.int64)
    blocks = []
    while len(frontier):
        i, j = frontier[:, 0], frontier[:, 1]
        overlap = (i == j) | (
            (bvh.bounds_min[i] <= bvh.bounds_max[j]) & (bvh.bounds_min[j] <= bvh.bounds_max[i])
        ).all(axis=1)
        frontier, self_leaves, (ci, cj) = _traverse_generation(bvh, frontier[overlap])
        blocks.append(_self_leaf_pairs(bvh, self_leaves))
        blocks.append(_cross_leaf_pairs(bvh, ci, cj))
    pairs = np.concatenate(blocks) if blocks else _EMPTY_PAIRS
    if len(pairs) == 0:
        return _EMPTY_PAIRS
    box_hit = (
        (bvh.tri_min[pairs[:, 0]] <= bvh.tri_max[pairs[:, 1]])
        & (bvh.tri_min[pairs[:, 1]] <= bvh.tri_max[pairs[:, 0]])
    ).all(axis=1)
    pairs = pairs[box_hit]
    if len(pairs) == 0:
        return _EMPTY_PAIRS
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def _filter_narrow_phase(mesh: Mesh, bvh: Bvh, pairs: np.ndarray) -> np.ndarray:
    """Drop vertex-sharing pairs and box-separated pairs, then run the exact test."""
    pairs = _drop_adjacent_keys(pairs, bvh.adjacent_keys, bvh.n_triangles)
    if len(pairs) == 0:
        return pairs
    box_hit = (
        (bvh.tri_min[pairs[:, 0]] <= bvh.tri_max[pairs[:, 1]])
        & (bvh.tri_min[pairs[:, 1]] <= bvh.tri_max[pairs[:, 0]])
    ).all(axis=1)
    pairs = pairs[box_hit]
    if len(pairs) == 0:
        return pairs
    ca = mesh.vertices[mesh.triangles[pairs[:, 0]]]
    cb = mesh.vertices[mesh.triangles[pairs[:, 1]]]
    hit = tri_tri_intersect_many(ca[:, 0], ca[:, 1], ca[:, 2], cb[:, 0], cb[:, 1], cb[:, 2])
    return pairs[hit]


def intersecting_pairs(mesh: Mesh, bvh: Bvh) -> np.ndarray:
    """All non-adjacent intersecting triangle pairs, sorted, BVH-pruned."""
    return _filter_narrow_phase(mesh, bvh, _candidate_pairs_overlap(bvh))


def brute_force_intersecting_pairs(mesh: Mesh) -> np.ndarray:
    """O(T^2) reference enumeration with the same narrow phase."""
    t = mesh.n_triangles
    ii, jj = np.triu_indices(t, k=1)
    pairs = np.column_stack([ii, jj]).astype(np.int64)
    corners = mesh.vertices[mesh.triangles]
    bvh_like = Bvh(
        bounds_min=np.empty(0), bounds_max=np.empty(0), left=np.empty(0),
        right=np.empty(0), start=np.empty(0), count=np.empty(0),
        order=np.empty(0), tri_min=corners.min(axis=1), tri_max=corners.max(axis=1),
        leaf_pad=np.empty((0, 0), dtype=np.int64), internal_levels=[],
        adjacent_keys=_adjacency_keys(mesh.triangles), leaf_size=0,
    )
    return _filter_narrow_phase(mesh, bvh_like, pairs)


# ---------------------------------------------------------------------------
# minimum separation (branch-and-bound over the BVH)

def _box_dist2(bvh, i, j):
    gap = np.maximum(
        bvh.bounds_min[i] - bvh.bounds_max[j], bvh.bounds_min[j] - bvh.bounds_max[i]
    )
    gap = np.maximum(gap, 0.0)
    return (gap * gap).sum(axis=-1)


def _exact_pair_distances(mesh: Mesh, pairs: np.ndarray) -> np.ndarray:
    ca = mesh.vertices[mesh.triangles[pairs[:, 0]]]
    cb = mesh.vertices[mesh.triangles[pairs[:, 1]]]
    return tri_tri_dist_many(ca[:, 0], ca[:, 1], ca[:, 2], cb[:, 0], cb[:, 1], cb[:, 2])


def _separation_upper_bound(mesh: Mesh, bvh: Bvh, n_probe: int = 8) -> float:
    """Exact distance of a few centroid-nearest non-adjacent pairs."""
    t = mesh.n_triangles
    cen = (bvh.tri_min + bvh.tri_max) * 0.5
    probes = np.arange(0, t, max(1, t // n_probe))
    d2 = ((cen[probes, None, :] - cen[None, :, :]) ** 2).sum(axis=-1)
    if len(bvh.adjacent_keys):
        all_t = np.arange(t)
        lo = np.minimum(probes[:, None], all_t[None, :])
        hi = np.maximum(probes[:, None], all_t[None, :])
        keys = (lo * t + hi).ravel()
        pos = np.clip(np.searchsorted(bvh.adjacent_keys, keys), 0, len(bvh.adjacent_keys) - 1)
        shares = (bvh.adjacent_keys[pos] == keys).reshape(d2.shape)
        d2[shares] = np.inf
    d2[np.arange(len(probes)), probes] = np.inf
    nearest = d2.argmin(axis=1)
    pairs = np.column_stack([probes, nearest])
    pairs = pairs[np.isfinite(d2[np.arange(len(probes)), nearest])]
    if len(pairs) == 0:
        return np.inf
    return float(_exact_pair_distances(mesh, pairs).min())


def _near_pairs(bvh: Bvh, bound: float) -> np.ndarray:
    """Triangle pairs whose boxes lie closer than ``bound`` (overlap included)."""
    bound2 = bound * bound
    frontier = np.zeros((1, 2), dtype=np.int64)
    blocks = []
    while len(frontier):
        i, j = frontier[:, 0], frontier[:, 1]
        d2 = _box_dist2(bvh, i, j)
        near = (i == j) | (d2 < bound2) | (d2 == 0.0)
        frontier, self_leaves, (ci, cj) = _traverse_generation(bvh, frontier[near])
        blocks.append(_self_leaf_pairs(bvh, self_leaves))
        blocks.append(_cross_leaf_pairs(bvh, ci, cj))
    return np.concatenate(blocks) if blocks else _EMPTY_PAIRS


def _tri_box_dist2(bvh: Bvh, pairs: np.ndarray) -> np.ndarray:
    gap = np.maximum(
        bvh.tri_min[pairs[:, 0]] - bvh.tri_max[pairs[:, 1]],
        bvh.tri_min[pairs[:, 1]] - bvh.tri_max[pairs[:, 0]],
    )
    gap = np.maximum(gap, 0.0)
    return (gap * gap).sum(axis=1)


def _chunked_min_distance(mesh: Mesh, pairs: np.ndarray, boxd2: np.ndarray, best: float) -> float:
    """Exact min distance over candidates, nearest-box-first with cutoff."""
    order = np.argsort(boxd2, kind="stable")
    chunk = 2048
    for pos in range(0, len(order), chunk):
        idx = order[pos : pos + chunk]
        if boxd2[idx[0]] >= best * best:
            break
        idx = idx[boxd2[idx] < best * best]
        if len(idx):
            best = min(best, float(_exact_pair_distances(mesh, pairs[idx]).min()))
    return best


def min_separation(mesh: Mesh, bvh: Bvh) -> float:
    """Exact minimum distance over non-adjacent triangle pairs.

    Branch-and-bound: a probe pass seeds a true upper bound, the traversal
    prunes node pairs whose box distance exceeds it, and surviving pairs are
    evaluated nearest-box-first until the bound certifies the rest.
    """
    best = _separation_upper_bound(mesh, bvh)
    pairs = _drop_adjacent_keys(_near_pairs(bvh, best), bvh.adjacent_keys, bvh.n_triangles)
    if len(pairs) == 0:
        return best
    return _chunked_min_distance(mesh, pairs, _tri_box_dist2(bvh, pairs), best)


# ---------------------------------------------------------------------------
# collision reports

@dataclass
class CollisionReport:
    """Result of one self-collision query.

    label == 1 iff pd > 0; pairs is empty iff pd <= 0; for penetrating
    meshes max(pd_per_domain) == pd.
    """

    pd: float
    pd_per_domain: np.ndarray  # (n_domains,)
    pairs: np.ndarray          # (K, 2) non-adjacent intersecting triangle pairs
    label: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "pd": self.pd,
                "label": self.label,
                "pair_count": int(len(self.pairs)),
                "pd_per_domain": [float(x) for x in self.pd_per_domain],
            }
        )


@dataclass
class CollisionSample:
    """One labeled latent point: the unit of the detector's training set."""

    z: np.ndarray              # flat latent code
    pd: float
    pd_per_domain: np.ndarray  # (n_domains,)
    label: int


def _pair_penetrations(mesh: Mesh, pairs: np.ndarray) -> np.ndarray:
    ca = mesh.vertices[mesh.triangles[pairs[:, 0]]]
    cb = mesh.vertices[mesh.triangles[pairs[:, 1]]]
    return _sat_penetration_many(ca[:, 0], ca[:, 1], ca[:, 2], cb[:, 0], cb[:, 1], cb[:, 2])


def _check_domain_map(domain_of: np.ndarray, n_vertices: int, n_domains: int):
    domain_of = np.asarray(domain_of, dtype=np.int64)
    if domain_of.shape != (n_vertices,):
        raise GeomError(f"domain map must cover all {n_vertices} vertices")
    if domain_of.size and (domain_of.min() < 1 or domain_of.max() > n_domains):
        raise GeomError(f"domain ids must lie in [1, {n_domains}]")
    return domain_of


def self_collide(mesh: Mesh, bvh: Bvh, domain_of: np.ndarray, n_domains: int) -> CollisionReport:
    """BVH-pruned self-collision query with signed depth and per-domain depths.

    One traversal collects every non-adjacent pair within the separation
    bound; its box-overlap subset feeds the exact intersection test, and the
    rest only matters when no pair intersects.  ``domain_of`` maps every
    vertex to a 1-based domain id; a pair touches a domain when any of its
    six vertices does.
    """
    domain_of = _check_domain_map(domain_of, mesh.n_vertices, n_domains)
    bound = _separation_upper_bound(mesh, bvh)
    cand = _drop_adjacent_keys(_near_pairs(bvh, bound), bvh.adjacent_keys, bvh.n_triangles)
    per_domain = np.zeros(n_domains)

    if len(cand):
        overlap = (
            (bvh.tri_min[cand[:, 0]] <= bvh.tri_max[cand[:, 1]])
            & (bvh.tri_min[cand[:, 1]] <= bvh.tri_max[cand[:, 0]])
        ).all(axis=1)
        touching = cand[overlap]
    else:
        touching = _EMPTY_PAIRS
    pairs = _EMPTY_PAIRS
    if len(touching):
        touching = np.unique(np.sort(touching, axis=1), axis=0)
        ca = mesh.vertices[mesh.triangles[touching[:, 0]]]
        cb = mesh.vertices[mesh.triangles[touching[:, 1]]]
        hit = tri_tri_intersect_many(ca[:, 0], ca[:, 1], ca[:, 2], cb[:, 0], cb[:, 1], cb[:, 2])
        pairs = touching[hit]

    if len(pairs):
        pens = _pair_penetrations(mesh, pairs)
        pd = float(pens.max())
        if pd <= 0.0:  # exact-touch pairs only: report as collision-free
            return CollisionReport(pd=0.0, pd_per_domain=per_domain, pairs=pairs[:0], label=0)
        pair_domains = domain_of[mesh.triangles[pairs].reshape(len(pairs), 6)]  # (K, 6)
        for k in range(len(pairs)):
            for d in np.unique(pair_domains[k]):
                per_domain[d - 1] = max(per_domain[d - 1], pens[k])
        return CollisionReport(pd=pd, pd_per_domain=per_domain, pairs=pairs, label=1)

    if len(cand) == 0:
        pd = -bound
    else:
        pd = -_chunked_min_distance(mesh, cand, _tri_box_dist2(bvh, cand), bound)
    return CollisionReport(pd=pd, pd_per_domain=per_domain, pairs=pairs, label=0)


def collision_label(mesh: Mesh, bvh: Bvh) -> int:
    """Binary self-collision state only; skips the depth computations."""
    pairs = intersecting_pairs(mesh, bvh)
    if len(pairs) == 0:
        return 0
    return int(_pair_penetrations(mesh, pairs).max() > 0.0)


def positive_pd(mesh: Mesh, bvh: Bvh) -> float:
    """max(PD, 0): penetration depth with the separation branch skipped."""
    pairs = intersecting_pairs(mesh, bvh)
    if len(pairs) == 0:
        return 0.0
    return max(float(_pair_penetrations(mesh, pairs).max()), 0.0)


class LatentOracle:
    """Labels latent codes by decoding and running the exact oracle.

    Pure function of (decode, rest, domain map); safe to call from parallel
    workers as long as results are merged by sample index.
    """

    def __init__(self, decode, rest: Mesh, domain_of: np.ndarray, n_domains: int, leaf_size: int = 4):
        self.decode = decode
        self.rest = rest
        self.domain_of = _check_domain_map(domain_of, rest.n_vertices, n_domains)
        self.n_domains = n_domains
        self.leaf_size = leaf_size
        self._template = build_bvh(rest, leaf_size)
        self.labels_issued = 0

    def _decoded(self, z: np.ndarray) -> tuple[Mesh, Bvh]:
        from .mesh import feature_inverse

        features = self.decode(np.asarray(z, dtype=np.float64))
        if features.size != 3 * self.rest.n_vertices:
            raise GeomError(
                f"decoder produced {features.size} values for a mesh needing "
                f"{3 * self.rest.n_vertices}"
            )
        mesh = feature_inverse(features, self.rest)
        return mesh, refit_bvh(self._template, mesh)

    def label_latent(self, z: np.ndarray) -> CollisionSample:
        mesh, bvh = self._decoded(z)
        report = self_collide(mesh, bvh, self.domain_of, self.n_domains)
        self.labels_issued += 1
        return CollisionSample(
            z=np.asarray(z, dtype=np.float64).copy(),
            pd=report.pd,
            pd_per_domain=report.pd_per_domain,
            label=report.label,
        )

    def label_many(self, zs: np.ndarray) -> list:
        return [self.label_latent(z) for z in np.atleast_2d(zs)]

    def binary_label(self, z: np.ndarray) -> int:
        mesh, bvh = self._decoded(z)
        self.labels_issued += 1
        return collision_label(mesh, bvh)

    def positive_pd(self, z: np.ndarray) -> float:
        mesh, bvh = self._decoded(z)
        return positive_pd(mesh, bvh)


def label_latent(z, decode, rest: Mesh, domain_of, n_domains: int) -> CollisionSample:
    """One-shot convenience wrapper around LatentOracle.label_latent."""
    return LatentOracle(decode, rest, domain_of, n_domains).label_latent(z)
