"""Binary BVH over primitive bounding boxes with hit-queue traversal.

The tree is rebuilt from scratch between optimizer steps (refit is cheaper
but loosens boxes as primitives move; a config flag on build selects it for
experiments). Traversal accumulates candidate hits in a fixed-capacity
queue drained in ascending t_enter order; when the queue overflows, the
trace re-enters with the continuation key advanced past the last confirmed
hit, so callers always see the complete, globally ordered stream.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import HitPair, Ray, aabbs_of_arrays
from .scene import Scene, SceneArrays

DEFAULT_LEAF_MAX = 4
DEFAULT_SAH_BINS = 16
DEFAULT_QUEUE_CAPACITY = 16


@dataclass
class BvhNode:
    box_lo: np.ndarray
    box_hi: np.ndarray
    left: int = -1  # child node index, -1 for leaves
    right: int = -1
    start: int = 0  # leaf range into prim_order
    count: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass
class HitQueue:
    """Fixed-capacity buffer of hit candidates, drained in ascending t_enter.

    Candidates are keyed by (t_enter, primitive_index) so that ties are
    deterministic and the continuation key never skips or repeats a hit.
    """

    capacity: int = DEFAULT_QUEUE_CAPACITY
    items: list = field(default_factory=list)  # (t_enter, prim_index, t_exit)
    overflowed: bool = False

    def offer(self, t_enter: float, t_exit: float, prim_index: int):
        key = (t_enter, prim_index)
        if len(self.items) == self.capacity:
            worst = max(self.items)[:2]
            if key >= worst:
                self.overflowed = True
                return
            self.items.remove(max(self.items))
            self.overflowed = True
        self.items.append((t_enter, prim_index, t_exit))

    @property
    def worst_key(self):
        if len(self.items) < self.capacity:
            return None
        return max(self.items)[:2]

    def drain(self):
        return sorted(self.items)


class Bvh:
    def __init__(self, nodes, prim_order, arrays: SceneArrays):
        self.nodes = nodes
        self.prim_order = prim_order
        self.arrays = arrays

    @property
    def node_count(self) -> int:
        return len(self.nodes)


def build(scene_or_arrays, method: str = "sah", sah_bins: int = DEFAULT_SAH_BINS,
          leaf_max: int = DEFAULT_LEAF_MAX) -> Bvh:
    """Build a BVH over the scene's primitive AABBs.

    method is "sah" (binned surface-area heuristic, default) or "median".
    The build is deterministic for a fixed primitive order.
    """
    arrays = (
        scene_or_arrays
        if isinstance(scene_or_arrays, SceneArrays)
        else SceneArrays.from_scene(scene_or_arrays)
    )
    n = arrays.count
    nodes = []
    if n == 0:
        return Bvh(nodes, np.zeros(0, dtype=np.int64), arrays)
    lo, hi = aabbs_of_arrays(arrays)
    centroids = 0.5 * (lo + hi)
    order = np.arange(n, dtype=np.int64)

    def node_bounds(idx):
        return lo[idx].min(axis=0), hi[idx].max(axis=0)

    def surface(blo, bhi):
        d = np.maximum(bhi - blo, 0.0)
        return 2.0 * (d[0] * d[1] + d[1] * d[2] + d[2] * d[0])

    # Iterative build; each stack entry carves a slice of `order`.
    nodes.append(None)
    stack = [(0, 0, n)]
    while stack:
        node_idx, start, end = stack.pop()
        idx = order[start:end]
        blo, bhi = node_bounds(idx)
        count = end - start
        if count <= leaf_max:
            nodes[node_idx] = BvhNode(blo, bhi, start=start, count=count)
            continue
        split_mask = None
        if method == "sah":
            best_cost = math.inf
            cent = centroids[idx]
            clo, chi = cent.min(axis=0), cent.max(axis=0)
            for axis in range(3):
                extent = chi[axis] - clo[axis]
                if extent <= 0:
                    continue
                rel = (cent[:, axis] - clo[axis]) / extent
                bins = np.minimum((rel * sah_bins).astype(np.int64), sah_bins - 1)
                for b in range(1, sah_bins):
                    left_mask = bins < b
                    nl = int(left_mask.sum())
                    if nl == 0 or nl == count:
                        continue
                    llo, lhi = node_bounds(idx[left_mask])
                    rlo, rhi = node_bounds(idx[~left_mask])
                    cost = surface(llo, lhi) * nl + surface(rlo, rhi) * (count - nl)
                    if cost < best_cost:
                        best_cost = cost
                        split_mask = left_mask
        if split_mask is None:
            # Median split on the widest centroid axis; stable for determinism.
            cent = centroids[idx]
            axis = int(np.argmax(cent.max(axis=0) - cent.min(axis=0)))
            half = count // 2
            sorted_local = np.argsort(cent[:, axis], kind="stable")
            split_mask = np.zeros(count, dtype=bool)
            split_mask[sorted_local[:half]] = True
        left_idx = idx[split_mask]
        right_idx = idx[~split_mask]
        order[start : start + len(left_idx)] = left_idx
        order[start + len(left_idx) : end] = right_idx
        li = len(nodes)
        nodes.append(None)
        ri = len(nodes)
        nodes.append(None)
        nodes[node_idx] = BvhNode(blo, bhi, left=li, right=ri)
        stack.append((ri, start + len(left_idx), end))
        stack.append((li, start, start + len(left_idx)))
    return Bvh(nodes, order, arrays)


def refit(bvh: Bvh, arrays: SceneArrays) -> Bvh:
    """Update node boxes in place for moved primitives, keeping the topology."""
    lo, hi = aabbs_of_arrays(arrays)
    bvh.arrays = arrays
    for node in reversed(bvh.nodes):
        if node.is_leaf:
            idx = bvh.prim_order[node.start : node.start + node.count]
            node.box_lo = lo[idx].min(axis=0)
            node.box_hi = hi[idx].max(axis=0)
        else:
            node.box_lo = np.minimum(bvh.nodes[node.left].box_lo, bvh.nodes[node.right].box_lo)
            node.box_hi = np.maximum(bvh.nodes[node.left].box_hi, bvh.nodes[node.right].box_hi)
    return bvh


def _slab_test(node, origin, inv_dir, t_min, t_max):
    t0 = (node.box_lo - origin) * inv_dir
    t1 = (node.box_hi - origin) * inv_dir
    near = np.minimum(t0, t1)
    far = np.maximum(t0, t1)
    tn = max(near.max(), t_min)
    tf = min(far.min(), t_max)
    return tn, tf


def _intersect_prim(arrays, p, origin, direction, t_min, t_max):
    R = arrays.rotations[p]
    o = (R.T @ (origin - arrays.means[p])) / arrays.scales[p]
    d = (R.T @ direction) / arrays.scales[p]
    a = float(d @ d)
    half_b = float(o @ d)
    c = float(o @ o) - 1.0
    disc4 = half_b * half_b - a * c
    if disc4 <= 1e-12:
        return None
    sq = math.sqrt(disc4)
    q = -half_b - math.copysign(sq, half_b) if half_b != 0.0 else -sq
    t1 = q / a
    t2 = c / q
    te, tx = (t1, t2) if t1 <= t2 else (t2, t1)
    if tx <= t_min or te >= t_max:
        return None
    te = max(te, t_min)
    tx = min(tx, t_max)
    if tx <= te:
        return None
    return te, tx


def trace_pairs(bvh: Bvh, ray: Ray, queue_capacity: int = DEFAULT_QUEUE_CAPACITY, stats=None):
    """Yield HitPairs of every primitive the ray intersects, ordered by t_enter.

    Implemented as chunked traversal through HitQueue windows: each pass
    gathers up to queue_capacity candidates beyond the continuation key,
    yields them sorted, and re-traces until no candidate overflows. Ties in
    t_enter break by primitive index, so the stream is deterministic.
    stats, when given, is a dict accumulating "node_visits" and "passes".
    """
    if bvh.node_count == 0:
        return
    origin = ray.origin
    direction = ray.direction
    with np.errstate(divide="ignore"):
        inv_dir = 1.0 / direction
    arrays = bvh.arrays
    last_key = (-math.inf, -1)
    while True:
        queue = HitQueue(capacity=queue_capacity)
        stack = [0]
        while stack:
            node = bvh.nodes[stack.pop()]
            if stats is not None:
                stats["node_visits"] = stats.get("node_visits", 0) + 1
            tn, tf = _slab_test(node, origin, inv_dir, ray.t_min, ray.t_max)
            if tn > tf:
                continue
            worst = queue.worst_key
            if worst is not None and tn > worst[0]:
                # Every primitive below starts at or after tn; cannot improve the window.
                queue.overflowed = True
                continue
            if node.is_leaf:
                for p in bvh.prim_order[node.start : node.start + node.count]:
                    hit = _intersect_prim(arrays, int(p), origin, direction, ray.t_min, ray.t_max)
                    if hit is None:
                        continue
                    te, tx = hit
                    if (te, int(p)) <= last_key:
                        continue
                    queue.offer(te, tx, int(p))
            else:
                stack.append(node.right)
                stack.append(node.left)
        if stats is not None:
            stats["passes"] = stats.get("passes", 0) + 1
        drained = queue.drain()
        for te, p, tx in drained:
            yield HitPair(te, tx, p)
        if not queue.overflowed or not drained:
            return
        last_key = (drained[-1][0], drained[-1][1])


def all_pairs(scene: Scene, ray: Ray):
    """Brute-force intersect-all reference: the same pairs without any tree."""
    from .geometry import intersect_ellipsoid

    pairs = []
    for i, prim in enumerate(scene.primitives):
        hit = intersect_ellipsoid(ray, prim, i)
        if hit is not None:
            pairs.append(hit)
    pairs.sort(key=lambda h: (h.t_enter, h.primitive_index))
    return pairs


def dump_boxes(bvh: Bvh) -> Scene:
    """Debug view: node boxes as axis-aligned ellipsoid primitives in a Scene."""
    from .scene import EllipsoidPrimitive

    prims = []
    for node in bvh.nodes:
        center = 0.5 * (node.box_lo + node.box_hi)
        half = np.maximum(0.5 * (node.box_hi - node.box_lo), 1e-9)
        prims.append(
            EllipsoidPrimitive(center, (1.0, 0.0, 0.0, 0.0), half, 0.05, np.zeros((1, 3)))
        )
    return Scene(prims, np.zeros(3), 0)
