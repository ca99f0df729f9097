"""Binary Gaussian hierarchy: construction by median split, moment-matched
parent merging, BFS LoD cuts, densification spawn/respawn and validation.

Nodes live in index-stable structure-of-arrays storage; tree surgery only
rewires parent/child pointers and never moves a node to a different slot.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    AttributeArrays,
    Camera,
    EmptySceneError,
    Frustum,
    GaussianAttributes,
    LodConfig,
    covariance_from_batch,
    min_distance_batch,
    rotmat_to_quat,
    sphere_intersects_frustum,
)

NONE = -1

# Child placement for the two-for-one leaf split used by densification:
# offset along the dominant covariance axis (in units of the dominant
# standard deviation) and the shrink factor applied to that axis.
SPLIT_OFFSET = 0.6
SPLIT_SHRINK = 1.6


class InvalidTargetError(ValueError):
    pass


class CannotRespawnRootError(ValueError):
    pass


@dataclass
class CutSet:
    node_ids: np.ndarray

    def __len__(self):
        return self.node_ids.size


@dataclass
class Hierarchy:
    attrs: AttributeArrays
    parent: np.ndarray          # (N,) int32, NONE for the root
    children: np.ndarray        # (N, 2) int32, NONE/NONE for leaves
    root: int
    free: list = field(default_factory=list)

    @property
    def capacity(self) -> int:
        return self.parent.shape[0]

    @property
    def node_count(self) -> int:
        return self.capacity - len(self.free)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.children[:, 0] == NONE

    @property
    def leaf_ids(self) -> np.ndarray:
        mask = self.is_leaf
        if self.free:
            mask = mask.copy()
            mask[np.asarray(self.free, dtype=np.int64)] = False
        return np.nonzero(mask)[0]

    @property
    def leaf_count(self) -> int:
        return self.leaf_ids.size

    def gaussian(self, i: int) -> GaussianAttributes:
        return self.attrs.gaussian(i)

    def bfs_order(self) -> np.ndarray:
        """All reachable nodes, parents before children."""
        order = []
        frontier = np.array([self.root], dtype=np.int64)
        while frontier.size:
            order.append(frontier)
            ch = self.children[frontier]
            frontier = ch[ch[:, 0] != NONE].ravel()
        return np.concatenate(order) if order else np.empty(0, dtype=np.int64)

    def subtree_leaf_counts(self) -> np.ndarray:
        """Per-node number of reachable leaves below (and including) it."""
        levels = []
        frontier = np.array([self.root], dtype=np.int64)
        while frontier.size:
            levels.append(frontier)
            ch = self.children[frontier]
            frontier = ch[ch[:, 0] != NONE].ravel()
        counts = np.zeros(self.capacity, dtype=np.int64)
        leaf = self.is_leaf
        for lvl in reversed(levels):
            counts[lvl[leaf[lvl]]] = 1
            up = lvl[self.parent[lvl] != NONE]
            np.add.at(counts, self.parent[up], counts[up])
        return counts

    def subtree_node_counts(self) -> np.ndarray:
        """Per-node number of reachable nodes in its subtree (incl. itself)."""
        levels = []
        frontier = np.array([self.root], dtype=np.int64)
        while frontier.size:
            levels.append(frontier)
            ch = self.children[frontier]
            frontier = ch[ch[:, 0] != NONE].ravel()
        counts = np.zeros(self.capacity, dtype=np.int64)
        for lvl in reversed(levels):
            counts[lvl] += 1
            up = lvl[self.parent[lvl] != NONE]
            np.add.at(counts, self.parent[up], counts[up])
        return counts

    def subtree_nodes(self, node: int) -> np.ndarray:
        out = []
        frontier = np.array([node], dtype=np.int64)
        while frontier.size:
            out.append(frontier)
            ch = self.children[frontier]
            frontier = ch[ch[:, 0] != NONE].ravel()
        return np.concatenate(out)


def _mixture_moments(attrs: AttributeArrays, a_idx, b_idx):
    """Weighted two-component mixture mean/covariance plus blended payload."""
    wa = attrs.opacities[a_idx] * np.prod(attrs.scales[a_idx], axis=1)
    wb = attrs.opacities[b_idx] * np.prod(attrs.scales[b_idx], axis=1)
    total = wa + wb
    zero = total <= 0
    wa = np.where(zero, 0.5, wa)
    wb = np.where(zero, 0.5, wb)
    total = wa + wb
    fa = (wa / total)[:, None]
    fb = (wb / total)[:, None]
    mean = fa * attrs.means[a_idx] + fb * attrs.means[b_idx]
    cov_a = covariance_from_batch(attrs.scales[a_idx], attrs.rotations[a_idx])
    cov_b = covariance_from_batch(attrs.scales[b_idx], attrs.rotations[b_idx])
    da = attrs.means[a_idx] - mean
    db = attrs.means[b_idx] - mean
    cov = (fa[..., None] * (cov_a + np.einsum("ni,nj->nij", da, da))
           + fb[..., None] * (cov_b + np.einsum("ni,nj->nij", db, db)))
    base = fa * attrs.base_colors[a_idx] + fb * attrs.base_colors[b_idx]
    sh = fa * attrs.sh_rest[a_idx] + fb * attrs.sh_rest[b_idx]
    opacity = np.maximum(attrs.opacities[a_idx], attrs.opacities[b_idx])
    return mean, cov, opacity, base, sh


def _cov_to_scale_rot(cov: np.ndarray):
    vals, vecs = np.linalg.eigh(cov)
    scales = np.sqrt(np.clip(vals, 1e-18, None))
    flip = np.linalg.det(vecs) < 0
    vecs[flip, :, 2] *= -1.0
    return scales, rotmat_to_quat(vecs)


def merge_into(attrs: AttributeArrays, dst_idx, a_idx, b_idx):
    """Moment-match pairs (a, b) and write the merged Gaussians at dst."""
    mean, cov, opacity, base, sh = _mixture_moments(attrs, a_idx, b_idx)
    scales, quats = _cov_to_scale_rot(cov)
    attrs.means[dst_idx] = mean
    attrs.scales[dst_idx] = scales
    attrs.rotations[dst_idx] = quats
    attrs.opacities[dst_idx] = opacity
    attrs.base_colors[dst_idx] = base
    attrs.sh_rest[dst_idx] = sh


def merge_children(a: GaussianAttributes, b: GaussianAttributes) -> GaussianAttributes:
    """Merged approximation of two Gaussians (opacity-volume weighted
    moment matching; opacity takes the max, colors the weighted average)."""
    attrs = AttributeArrays.from_gaussians([a, b])
    extra = AttributeArrays.zeros(1, dtype=np.float64)
    extra.sh_rest = np.zeros((1, attrs.sh_rest.shape[1]))
    attrs = AttributeArrays.concat([attrs, extra])
    merge_into(attrs, np.array([2]), np.array([0]), np.array([1]))
    return attrs.gaussian(2)


def build_hierarchy(leaves) -> Hierarchy:
    """Top-down median split on the longest bounding-box axis; parents are
    moment-matched merges computed level by level."""
    if not isinstance(leaves, AttributeArrays):
        leaves = AttributeArrays.from_gaussians(leaves)
    n = len(leaves)
    if n == 0:
        raise EmptySceneError("cannot build a hierarchy from zero Gaussians")
    total = 2 * n - 1
    attrs = AttributeArrays.zeros(total, dtype=np.float64)
    if leaves.sh_rest.shape[1] != attrs.sh_rest.shape[1]:
        attrs.sh_rest = np.zeros((total, leaves.sh_rest.shape[1]))
    attrs.put(np.arange(n), leaves.astype(np.float64))
    parent = np.full(total, NONE, dtype=np.int32)
    children = np.full((total, 2), NONE, dtype=np.int32)
    if n == 1:
        return Hierarchy(attrs=attrs, parent=parent, children=children, root=0)

    depth = np.zeros(total, dtype=np.int32)
    means = leaves.means
    next_slot = n
    root = next_slot
    next_slot += 1
    jobs = [(np.arange(n), root, 0)]
    while jobs:
        idx, slot, d = jobs.pop()
        depth[slot] = d
        sub = means[idx]
        axis = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
        half = idx.size // 2
        part = np.argpartition(sub[:, axis], half)
        sides = (idx[part[:half]], idx[part[half:]])
        kids = []
        for side in sides:
            if side.size == 1:
                kid = int(side[0])
            else:
                kid = next_slot
                next_slot += 1
                jobs.append((side, kid, d + 1))
            kids.append(kid)
        children[slot] = kids
        parent[kids] = slot

    # Merge internal nodes deepest-first so children are always ready.
    internal = np.arange(n, total)
    for d in range(depth[internal].max(), -1, -1):
        batch = internal[depth[internal] == d]
        merge_into(attrs, batch, children[batch, 0], children[batch, 1])
    return Hierarchy(attrs=attrs, parent=parent, children=children, root=root)


def bfs_cut(h: Hierarchy, cam: Camera, cfg: LodConfig,
            frustum: Frustum | None = None, start: int | None = None) -> CutSet:
    """Breadth-first LoD cut: a node is kept once the camera is at least its
    minimum viewing distance away, leaves are kept unconditionally, and
    subtrees whose 3-sigma sphere misses the frustum are pruned."""
    selected = []
    frontier = np.array([h.root if start is None else start], dtype=np.int64)
    p = cam.position
    while frontier.size:
        if frustum is not None:
            radius = 3.0 * np.max(h.attrs.scales[frontier], axis=1)
            keep = sphere_intersects_frustum(h.attrs.means[frontier], radius, frustum)
            frontier = frontier[keep]
            if frontier.size == 0:
                break
        dist = np.linalg.norm(h.attrs.means[frontier] - p, axis=1)
        md = min_distance_batch(h.attrs.scales[frontier], cfg)
        leaf = h.children[frontier, 0] == NONE
        take = (dist >= md) | leaf
        selected.append(frontier[take])
        frontier = h.children[frontier[~take]].ravel()
    ids = np.concatenate(selected) if selected else np.empty(0, dtype=np.int64)
    return CutSet(node_ids=np.sort(ids))


def split_attributes(attrs: AttributeArrays, leaf: int, rng: np.random.Generator):
    """Two child Gaussians jointly approximating a leaf: placed at +/- the
    scaled dominant axis, shrunk along it, opacity set so the stacked pair
    peaks near the parent's density."""
    g_scale = attrs.scales[leaf]
    axis_k = int(np.argmax(g_scale))
    from .core import quat_to_rotmat

    r = quat_to_rotmat(attrs.rotations[leaf])
    v = r[:, axis_k]
    s_max = g_scale[axis_k]
    offset = SPLIT_OFFSET * s_max * v
    sign = 1.0 if rng.integers(2) == 0 else -1.0
    means = np.stack([attrs.means[leaf] + sign * offset,
                      attrs.means[leaf] - sign * offset])
    scales = np.stack([g_scale, g_scale])
    scales[:, axis_k] /= SPLIT_SHRINK
    sigma = float(attrs.opacities[leaf])
    child_op = 1.0 - np.sqrt(max(1.0 - min(sigma, 1.0), 0.0))
    child_op = min(max(child_op, 0.5 * sigma), 1.0)
    rotations = np.stack([attrs.rotations[leaf]] * 2)
    base = np.stack([attrs.base_colors[leaf]] * 2)
    sh = np.stack([attrs.sh_rest[leaf]] * 2)
    return AttributeArrays(means=means, scales=scales, rotations=rotations,
                           opacities=np.array([child_op, child_op]),
                           base_colors=base, sh_rest=sh)


def _grow(h: Hierarchy, extra: int):
    old = h.capacity
    block = AttributeArrays.zeros(extra, dtype=np.float64)
    if block.sh_rest.shape[1] != h.attrs.sh_rest.shape[1]:
        block.sh_rest = np.zeros((extra, h.attrs.sh_rest.shape[1]))
    h.attrs = AttributeArrays.concat([h.attrs, block])
    h.parent = np.concatenate([h.parent, np.full(extra, NONE, dtype=np.int32)])
    h.children = np.concatenate(
        [h.children, np.full((extra, 2), NONE, dtype=np.int32)])
    return list(range(old, old + extra))


def _alloc2(h: Hierarchy):
    slots = []
    while h.free and len(slots) < 2:
        slots.append(h.free.pop())
    if len(slots) < 2:
        slots += _grow(h, 2 - len(slots))
    return sorted(slots)


def densify_spawn(h: Hierarchy, leaf: int, rng: np.random.Generator):
    """Turn a leaf into an internal node with two spawned children."""
    if h.children[leaf, 0] != NONE:
        raise InvalidTargetError(f"node {leaf} is internal, cannot spawn")
    left, right = _alloc2(h)
    h.attrs.put(np.array([left, right]), split_attributes(h.attrs, leaf, rng))
    h.children[leaf] = (left, right)
    h.parent[left] = leaf
    h.parent[right] = leaf
    return left, right


def respawn_dead(h: Hierarchy, dead_leaf: int, target_leaf: int,
                 rng: np.random.Generator):
    """Remove a dead leaf (sibling replaces its parent) and reuse the two
    freed slots as spawned children of the target leaf."""
    if dead_leaf == h.root:
        raise CannotRespawnRootError("root cannot be respawned")
    if h.children[dead_leaf, 0] != NONE:
        raise InvalidTargetError(f"node {dead_leaf} is not a leaf")
    if h.children[target_leaf, 0] != NONE:
        raise InvalidTargetError(f"target {target_leaf} is not a leaf")
    p = int(h.parent[dead_leaf])
    l, r = h.children[p]
    sibling = int(r if l == dead_leaf else l)
    if target_leaf in (dead_leaf, p):
        raise InvalidTargetError("target must be a distinct live leaf")
    g = int(h.parent[p])
    if g == NONE:
        h.root = sibling
        h.parent[sibling] = NONE
    else:
        gl, gr = h.children[g]
        h.children[g, 0 if gl == p else 1] = sibling
        h.parent[sibling] = g
    left, right = sorted((dead_leaf, p))
    h.attrs.put(np.array([left, right]),
                split_attributes(h.attrs, target_leaf, rng))
    h.children[left] = (NONE, NONE)
    h.children[right] = (NONE, NONE)
    h.children[target_leaf] = (left, right)
    h.parent[left] = target_leaf
    h.parent[right] = target_leaf


@dataclass
class Diagnostics:
    cycles: int
    arity_violations: int
    orphans: int
    pointer_mismatches: int
    monotonicity_violations: int

    @property
    def structural_ok(self) -> bool:
        return (self.cycles == 0 and self.arity_violations == 0
                and self.orphans == 0 and self.pointer_mismatches == 0)


def validate(h: Hierarchy, cfg: LodConfig) -> Diagnostics:
    """Structural checks plus the (allowed, reported) count of nodes whose
    minimum distance is not smaller than their parent's."""
    cap = h.capacity
    visited = np.zeros(cap, dtype=bool)
    cycles = 0
    frontier = np.array([h.root], dtype=np.int64)
    while frontier.size:
        rep = visited[frontier]
        cycles += int(rep.sum())
        frontier = frontier[~rep]
        visited[frontier] = True
        ch = h.children[frontier]
        frontier = ch[ch[:, 0] != NONE].ravel()

    allocated = np.ones(cap, dtype=bool)
    if h.free:
        allocated[np.asarray(h.free, dtype=np.int64)] = False
    arity = int(np.sum(allocated & ((h.children[:, 0] == NONE)
                                    != (h.children[:, 1] == NONE))))
    orphans = int(np.sum(allocated & ~visited))

    internal = np.nonzero(visited & (h.children[:, 0] != NONE))[0]
    mism = 0
    for col in (0, 1):
        kids = h.children[internal, col]
        mism += int(np.sum(h.parent[kids] != internal))
    if h.root < cap and h.parent[h.root] != NONE:
        mism += 1

    non_root = np.nonzero(visited & (h.parent != NONE))[0]
    md = min_distance_batch(h.attrs.scales[non_root], cfg)
    md_parent = min_distance_batch(h.attrs.scales[h.parent[non_root]], cfg)
    mono = int(np.sum(md >= md_parent))
    return Diagnostics(cycles=cycles, arity_violations=arity, orphans=orphans,
                       pointer_mismatches=mism, monotonicity_violations=mono)
