"""Sequential Point Tree: a hierarchy subtree flattened into records sorted
by parent key, so a view-distance cut is a binary-searched prefix plus a
per-record interval test."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, LodConfig, min_distance_batch
from .hierarchy import NONE, Hierarchy

RECORD_DTYPE = np.dtype([("key_self", "<f4"), ("key_parent", "<f4"),
                         ("node", "<u4")])
RECORD_BYTES = RECORD_DTYPE.itemsize  # 12


@dataclass
class Spt:
    root: int
    root_center: np.ndarray
    nodes: np.ndarray        # record order, descending key_parent
    key_self: np.ndarray
    key_parent: np.ndarray

    @property
    def subtree_size(self) -> int:
        return self.nodes.size

    def packed(self) -> np.ndarray:
        rec = np.empty(self.subtree_size, dtype=RECORD_DTYPE)
        rec["key_self"] = self.key_self.astype(np.float32)
        rec["key_parent"] = self.key_parent.astype(np.float32)
        rec["node"] = self.nodes.astype(np.uint32)
        return rec

    @staticmethod
    def from_packed(root: int, root_center: np.ndarray, rec: np.ndarray) -> "Spt":
        return Spt(root=root, root_center=np.asarray(root_center, dtype=np.float64),
                   nodes=rec["node"].astype(np.int64),
                   key_self=rec["key_self"].astype(np.float64),
                   key_parent=rec["key_parent"].astype(np.float64))


def build_spt(h: Hierarchy, subtree_root: int, cfg: LodConfig,
              corrected: bool = True) -> Spt:
    """Flatten the subtree. Keys add the node-to-root distance so that a
    single root-distance comparison is conservative for every record;
    corrected=False keeps the raw minimum distance (diagnostics only)."""
    sub = h.subtree_nodes(subtree_root)
    root_center = h.attrs.means[subtree_root].copy()
    md = min_distance_batch(h.attrs.scales[sub], cfg)
    if corrected:
        key_self = md + np.linalg.norm(h.attrs.means[sub] - root_center, axis=1)
    else:
        key_self = md
    key_of = np.full(h.capacity, np.nan)
    key_of[sub] = key_self
    parents = h.parent[sub]
    key_parent = np.where(sub == subtree_root, np.inf, key_of[parents])
    order = np.lexsort((sub, -key_parent))
    return Spt(root=int(subtree_root), root_center=root_center,
               nodes=sub[order], key_self=key_self[order],
               key_parent=key_parent[order])


def cut_spt(spt: Spt, d_root: float):
    """Prefix length from binary search over the parent keys, then the
    interval test on the prefix. Returns (prefix_len, selected node ids)."""
    n = int(np.searchsorted(-spt.key_parent, -d_root, side="left"))
    root_rec = np.nonzero(spt.nodes == spt.root)[0][0]
    if d_root >= spt.key_self[root_rec]:
        return n, np.array([spt.root], dtype=np.int64)
    sel = spt.nodes[:n][spt.key_self[:n] <= d_root]
    return n, sel


def conservative_guarantee_check(spt: Spt, h: Hierarchy, cam: Camera,
                                 cfg: LodConfig) -> bool:
    """True iff every record selected at the root distance is individually
    far enough away for its own minimum distance."""
    d_root = float(np.linalg.norm(spt.root_center - cam.position))
    _, sel = cut_spt(spt, d_root)
    if sel.size == 0:
        return True
    md = min_distance_batch(h.attrs.scales[sel], cfg)
    dist = np.linalg.norm(h.attrs.means[sel] - cam.position, axis=1)
    return bool(np.all(md <= dist + 1e-9))
