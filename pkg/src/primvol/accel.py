"""
Bounding volume hierarchy over the oriented primitive boxes.

Traversal is vectorized over rays: the frontier of (ray, node) pairs is
expanded level by level, leaves emit candidate (ray, primitive) pairs, and an
exact slab test in each primitive's local frame produces the final intervals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, List, Tuple

import numpy as np

from .geomcore import Ray
from .scene import PrimitiveSet, to_local

logger = logging.getLogger(__name__)

LEAF_SIZE = 2


@dataclass(frozen=True)
class Bvh:
    lo: np.ndarray  # (nodes, 3)
    hi: np.ndarray  # (nodes, 3)
    left: np.ndarray  # (nodes,) child index, -1 for leaves
    right: np.ndarray  # (nodes,)
    start: np.ndarray  # (nodes,) offset into ``order`` for leaves
    count: np.ndarray  # (nodes,) primitives in the leaf, 0 for inner nodes
    order: np.ndarray  # (N,) primitive indices in leaf order

    @property
    def n_nodes(self) -> int:
        return int(self.lo.shape[0])

    @property
    def root_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.lo[0], self.hi[0]

    def leaves(self) -> List[int]:
        return [int(i) for i in np.nonzero(self.left < 0)[0]]

    def leaf_primitives(self, node: int) -> np.ndarray:
        s = int(self.start[node])
        return self.order[s : s + int(self.count[node])]


@dataclass(frozen=True)
class RayHitList:
    """Hits of one ray, sorted by entry distance and clipped to the ray bounds."""

    prims: np.ndarray
    t_enter: np.ndarray
    t_exit: np.ndarray

    @property
    def entries(self) -> List[Tuple[int, float, float]]:
        return [(int(k), float(a), float(b)) for k, a, b in zip(self.prims, self.t_enter, self.t_exit)]

    def __len__(self) -> int:
        return int(self.prims.shape[0])

    def __iter__(self) -> Iterator[Tuple[int, float, float]]:
        return iter(self.entries)


@dataclass(frozen=True)
class HitArrays:
    """Hits of a batch of rays, sorted by (ray, t_enter, primitive)."""

    ray: np.ndarray
    prim: np.ndarray
    t_enter: np.ndarray
    t_exit: np.ndarray

    def __len__(self) -> int:
        return int(self.ray.shape[0])

    def for_ray(self, i: int) -> RayHitList:
        sel = self.ray == i
        return RayHitList(self.prim[sel], self.t_enter[sel], self.t_exit[sel])

    @classmethod
    def from_list(cls, hits: RayHitList, ray_index: int = 0) -> "HitArrays":
        n = len(hits)
        return cls(
            ray=np.full(n, ray_index, dtype=np.int64),
            prim=np.asarray(hits.prims, dtype=np.int64),
            t_enter=np.asarray(hits.t_enter, dtype=np.float64),
            t_exit=np.asarray(hits.t_exit, dtype=np.float64),
        )


def primitive_bounds(scene: PrimitiveSet) -> Tuple[np.ndarray, np.ndarray]:
    """World-space AABBs of the oriented boxes, t +/- |R| s, with a relative pad."""
    extent = np.einsum("nij,nj->ni", np.abs(scene.rotations), scene.scales)
    pad = 1e-9 * (1.0 + np.abs(scene.positions) + extent)
    return scene.positions - extent - pad, scene.positions + extent + pad


def build_bvh(scene: PrimitiveSet, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Median split on the largest centroid axis; deterministic for a fixed scene."""
    box_lo, box_hi = primitive_bounds(scene)
    centroids = 0.5 * (box_lo + box_hi)
    lo: List[np.ndarray] = []
    hi: List[np.ndarray] = []
    left: List[int] = []
    right: List[int] = []
    start: List[int] = []
    count: List[int] = []
    order: List[int] = []

    def new_node() -> int:
        lo.append(np.zeros(3))
        hi.append(np.zeros(3))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(lo) - 1

    def build(prims: np.ndarray) -> int:
        node = new_node()
        if prims.size <= leaf_size:
            start[node] = len(order)
            count[node] = int(prims.size)
            order.extend(int(p) for p in prims)
            lo[node] = box_lo[prims].min(axis=0)
            hi[node] = box_hi[prims].max(axis=0)
            return node
        spread = centroids[prims].max(axis=0) - centroids[prims].min(axis=0)
        axis = int(np.argmax(spread))
        sorted_prims = prims[np.argsort(centroids[prims, axis], kind="stable")]
        half = sorted_prims.size // 2
        a = build(sorted_prims[:half])
        b = build(sorted_prims[half:])
        left[node], right[node] = a, b
        lo[node] = np.minimum(lo[a], lo[b])
        hi[node] = np.maximum(hi[a], hi[b])
        return node

    build(np.arange(len(scene), dtype=np.int64))
    bvh = Bvh(
        lo=np.stack(lo),
        hi=np.stack(hi),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        start=np.asarray(start, dtype=np.int64),
        count=np.asarray(count, dtype=np.int64),
        order=np.asarray(order, dtype=np.int64),
    )
    logger.debug("BVH: %d primitives, %d nodes", len(scene), bvh.n_nodes)
    return bvh


def _slab(o: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    parallel = d == 0.0
    inside = (o >= lo) & (o <= hi)
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
    return near.max(axis=-1), far.min(axis=-1)


def _oriented_hits(
    scene: PrimitiveSet,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_min: np.ndarray,
    t_max: np.ndarray,
    ray: np.ndarray,
    prim: np.ndarray,
) -> HitArrays:
    pos = scene.positions[prim]
    rot = scene.rotations[prim]
    scl = scene.scales[prim]
    o_local = to_local(origins[ray], pos, rot, scl)
    d_local = to_local(dirs[ray], np.zeros_like(pos), rot, scl)
    near, far = _slab(o_local, d_local, -1.0, 1.0)
    enter = np.maximum(near, t_min[ray])
    leave = np.minimum(far, t_max[ray])
    keep = leave > enter
    ray, prim, enter, leave = ray[keep], prim[keep], enter[keep], leave[keep]
    order = np.lexsort((prim, enter, ray))
    return HitArrays(ray[order], prim[order], enter[order], leave[order])


def _ray_bounds(t: float | np.ndarray, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))


def intersect_rays(
    origins: np.ndarray,
    dirs: np.ndarray,
    t_min: float | np.ndarray,
    t_max: float | np.ndarray,
    scene: PrimitiveSet,
    bvh: Bvh,
) -> HitArrays:
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    tmin = _ray_bounds(t_min, n)
    tmax = _ray_bounds(t_max, n)

    ray = np.arange(n, dtype=np.int64)
    node = np.zeros(n, dtype=np.int64)
    cand_ray: List[np.ndarray] = []
    cand_prim: List[np.ndarray] = []
    while ray.size:
        near, far = _slab(origins[ray], dirs[ray], bvh.lo[node], bvh.hi[node])
        keep = np.minimum(far, tmax[ray]) >= np.maximum(near, tmin[ray])
        ray, node = ray[keep], node[keep]
        leaf = bvh.left[node] < 0
        if leaf.any():
            leaf_ray, leaf_node = ray[leaf], node[leaf]
            counts = bvh.count[leaf_node]
            total = int(counts.sum())
            first = np.repeat(np.cumsum(counts) - counts, counts)
            offsets = np.repeat(bvh.start[leaf_node], counts) + (np.arange(total) - first)
            cand_ray.append(np.repeat(leaf_ray, counts))
            cand_prim.append(bvh.order[offsets])
        inner = ~leaf
        ray = np.concatenate([ray[inner], ray[inner]])
        node = np.concatenate([bvh.left[node[inner]], bvh.right[node[inner]]])

    if not cand_ray:
        empty_i = np.zeros(0, dtype=np.int64)
        empty_f = np.zeros(0)
        return HitArrays(empty_i, empty_i, empty_f, empty_f)
    return _oriented_hits(scene, origins, dirs, tmin, tmax, np.concatenate(cand_ray), np.concatenate(cand_prim))


def intersect_brute_rays(
    origins: np.ndarray,
    dirs: np.ndarray,
    t_min: float | np.ndarray,
    t_max: float | np.ndarray,
    scene: PrimitiveSet,
) -> HitArrays:
    """Slab test of every ray against every primitive, no hierarchy."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    ray = np.repeat(np.arange(n, dtype=np.int64), len(scene))
    prim = np.tile(np.arange(len(scene), dtype=np.int64), n)
    return _oriented_hits(scene, origins, dirs, _ray_bounds(t_min, n), _ray_bounds(t_max, n), ray, prim)


def intersect(ray: Ray, scene: PrimitiveSet, bvh: Bvh) -> RayHitList:
    hits = intersect_rays(ray.origin[None], ray.direction[None], ray.t_min, ray.t_max, scene, bvh)
    return hits.for_ray(0)


def intersect_brute(ray: Ray, scene: PrimitiveSet) -> RayHitList:
    hits = intersect_brute_rays(ray.origin[None], ray.direction[None], ray.t_min, ray.t_max, scene)
    return hits.for_ray(0)
