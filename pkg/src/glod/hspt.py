"""Hierarchical SPT: the hierarchy is cut by Gaussian volume into an upper
tree plus SPT-converted (or passthrough) subtrees, and view cuts run as a
frustum-culled BFS over the upper tree followed by per-SPT prefix cuts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, Frustum, LodConfig, min_distance_batch, sphere_intersects_frustum
from .hierarchy import NONE, CutSet, Hierarchy, bfs_cut
from .spt import Spt, build_spt, cut_spt

DEFAULT_MIN_SUBTREE = 32


@dataclass
class Hspt:
    upper_nodes: np.ndarray          # sorted node ids of the upper hierarchy
    spts: list                       # Spt, index == spt_id
    passthrough_roots: np.ndarray    # cut-set roots kept as raw hierarchy
    size_threshold: float
    min_subtree: int
    lod: LodConfig                   # metric/threshold the SPT keys use
    spt_id_of: dict = field(default_factory=dict)  # root node -> spt_id

    @property
    def passthrough_leaves(self) -> np.ndarray:
        return self.passthrough_roots


@dataclass
class SptSelection:
    spt_id: int
    d_root: float
    prefix_len: int
    selected: np.ndarray


@dataclass
class RenderSet:
    upper: np.ndarray
    passthrough: np.ndarray
    per_spt: list  # of SptSelection

    @property
    def spt_nodes(self) -> np.ndarray:
        parts = [s.selected for s in self.per_spt]
        return (np.concatenate(parts) if parts
                else np.empty(0, dtype=np.int64))

    @property
    def nodes(self) -> np.ndarray:
        return np.concatenate([self.upper, self.passthrough, self.spt_nodes])

    def source_tags(self) -> dict:
        return {"upper": self.upper, "passthrough": self.passthrough,
                "spt": self.spt_nodes}

    def __len__(self):
        return self.upper.size + self.passthrough.size + self.spt_nodes.size


def build_hspt(h: Hierarchy, size_threshold: float, min_subtree: int,
               cfg: LodConfig) -> Hspt:
    """Volume-threshold BFS cut; cut subtrees of at least min_subtree nodes
    become SPTs, smaller ones passthrough, everything above stays upper."""
    if size_threshold <= 0:
        raise ValueError("size_threshold must be > 0")
    if min_subtree < 1:
        raise ValueError("min_subtree must be >= 1")
    node_counts = h.subtree_node_counts()
    upper = []
    cut_roots = []
    frontier = np.array([h.root], dtype=np.int64)
    while frontier.size:
        volume = np.prod(h.attrs.scales[frontier], axis=1)
        in_cut = volume < size_threshold
        cut_roots.append(frontier[in_cut])
        stay = frontier[~in_cut]
        upper.append(stay)
        ch = h.children[stay]
        frontier = ch[ch[:, 0] != NONE].ravel()
    upper = np.sort(np.concatenate(upper)) if upper else np.empty(0, dtype=np.int64)
    cut_roots = np.sort(np.concatenate(cut_roots)) if cut_roots else np.empty(0, dtype=np.int64)
    big = node_counts[cut_roots] >= min_subtree
    spt_roots = cut_roots[big]
    passthrough = cut_roots[~big]
    spts = [build_spt(h, int(r), cfg) for r in spt_roots]
    spt_id_of = {int(r): i for i, r in enumerate(spt_roots)}
    return Hspt(upper_nodes=upper, spts=spts, passthrough_roots=passthrough,
                size_threshold=float(size_threshold), min_subtree=int(min_subtree),
                lod=cfg, spt_id_of=spt_id_of)


def default_size_threshold(h: Hierarchy) -> float:
    """(scene bounding-box diagonal / 64)^3 over the leaf means."""
    leaves = h.leaf_ids
    span = h.attrs.means[leaves].max(axis=0) - h.attrs.means[leaves].min(axis=0)
    diag = float(np.linalg.norm(span))
    return max((diag / 64.0) ** 3, 1e-30)


def cut_hspt(hspt: Hspt, h: Hierarchy, cam: Camera, cfg: LodConfig,
             cull: bool = True) -> RenderSet:
    """Two-stage view cut: BFS over the upper hierarchy (with 3-sigma sphere
    frustum culling), falling back to raw BFS cuts for passthrough subtrees
    and to prefix cuts for selected SPTs."""
    frustum = Frustum.from_camera(cam) if cull else None
    p = cam.position
    upper_sel = []
    passthrough_sel = []
    selected_spts = []
    is_spt_root = np.zeros(h.capacity, dtype=bool)
    spt_root_list = list(hspt.spt_id_of)
    if spt_root_list:
        is_spt_root[np.asarray(spt_root_list, dtype=np.int64)] = True
    is_pass_root = np.zeros(h.capacity, dtype=bool)
    if hspt.passthrough_roots.size:
        is_pass_root[hspt.passthrough_roots] = True

    frontier = np.array([h.root], dtype=np.int64)
    while frontier.size:
        if frustum is not None:
            radius = 3.0 * np.max(h.attrs.scales[frontier], axis=1)
            keep = sphere_intersects_frustum(h.attrs.means[frontier], radius, frustum)
            frontier = frontier[keep]
            if frontier.size == 0:
                break
        spt_mask = is_spt_root[frontier]
        selected_spts.extend(int(n) for n in frontier[spt_mask])
        pass_mask = is_pass_root[frontier]
        for root in frontier[pass_mask]:
            sub_cut = bfs_cut(h, cam, cfg, frustum=frustum, start=int(root))
            passthrough_sel.append(sub_cut.node_ids)
        rest = frontier[~(spt_mask | pass_mask)]
        if rest.size == 0:
            break
        dist = np.linalg.norm(h.attrs.means[rest] - p, axis=1)
        md = min_distance_batch(h.attrs.scales[rest], cfg)
        leaf = h.children[rest, 0] == NONE
        take = (dist >= md) | leaf
        upper_sel.append(rest[take])
        frontier = h.children[rest[~take]].ravel()

    per_spt = []
    for root in sorted(selected_spts):
        spt_id = hspt.spt_id_of[root]
        spt = hspt.spts[spt_id]
        d_root = float(np.linalg.norm(spt.root_center - p))
        prefix_len, sel = cut_spt(spt, d_root)
        per_spt.append(SptSelection(spt_id=spt_id, d_root=d_root,
                                    prefix_len=prefix_len, selected=sel))
    upper_ids = (np.sort(np.concatenate(upper_sel)) if upper_sel
                 else np.empty(0, dtype=np.int64))
    pass_ids = (np.sort(np.concatenate(passthrough_sel)) if passthrough_sel
                else np.empty(0, dtype=np.int64))
    return RenderSet(upper=upper_ids, passthrough=pass_ids, per_spt=per_spt)


def rebuild_after_densify(hspt: Hspt, h: Hierarchy) -> Hspt:
    """Fresh build on the mutated hierarchy; keys use the surface-area
    minimum-distance metric."""
    cfg = LodConfig(threshold=hspt.lod.threshold, metric="surface_area")
    return build_hspt(h, hspt.size_threshold, hspt.min_subtree, cfg)


def hspt_equal(a: Hspt, b: Hspt) -> bool:
    if not (np.array_equal(a.upper_nodes, b.upper_nodes)
            and np.array_equal(a.passthrough_roots, b.passthrough_roots)
            and len(a.spts) == len(b.spts)):
        return False
    for sa, sb in zip(a.spts, b.spts):
        if not (sa.root == sb.root
                and np.array_equal(sa.nodes, sb.nodes)
                and np.array_equal(sa.key_self, sb.key_self)
                and np.array_equal(sa.key_parent, sb.key_parent)):
            return False
    return True
