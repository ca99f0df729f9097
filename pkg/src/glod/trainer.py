"""Desk-scale training loop: initialization from a point cloud, view
scheduling, HSPT cuts, cache/store gather, render + analytic backward, ADAM
updates on exactly the gathered nodes, write-back caching and periodic
densification with HSPT rebuild.

Scales are optimized in log space and opacities in logit space; the stored
attributes remain plain (scale, opacity) values.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cache import CacheConfig, CacheEntry, DeviceCache
from .core import AttributeArrays, Camera, EmptySceneError, LodConfig
from .hierarchy import (
    Hierarchy,
    build_hierarchy,
    densify_spawn,
    respawn_dead,
)
from .hspt import (
    DEFAULT_MIN_SUBTREE,
    Hspt,
    build_hspt,
    cut_hspt,
    default_size_threshold,
    rebuild_after_densify,
)
from .renderer import backward, loss, render_forward
from .scheduler import (
    DEFAULT_K,
    DEFAULT_RANDOM_EVERY,
    ViewGraph,
    build_view_graph,
    next_view,
)
from .spt import cut_spt
from .store import MemoryBacking, Scene, open_scene, write_scene

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

DEFAULT_LEARNING_RATES = {
    "means": 1.6e-4,        # scaled by scene extent at state creation
    "scales": 5e-3,         # log-space
    "rotations": 1e-3,
    "opacities": 5e-2,      # logit-space
    "base_colors": 2.5e-3,
    "sh_rest": 2.5e-3 / 20.0,
}

_OPACITY_FLOOR = 1e-4
_OPACITY_CEIL = 1.0 - 1e-4


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_iterations: int
    init_iterations: int = 2000
    densify_interval: int = 500
    dead_opacity_threshold: float = 0.005
    spawns_per_densify: int | None = None   # None -> 0.5% of leaf count
    loss_lambda: float = 0.2
    learning_rates: dict = field(
        default_factory=lambda: dict(DEFAULT_LEARNING_RATES))
    lod: LodConfig = field(default_factory=lambda: LodConfig(threshold=1.0))
    cache: CacheConfig = field(
        default_factory=lambda: CacheConfig(budget_bytes=64 << 20))
    scheduler_k: int = DEFAULT_K
    scheduler_exploration: float | None = None
    scheduler_random_every: int = DEFAULT_RANDOM_EVERY
    skybox_points: int = 0
    size_threshold: float | None = None     # None -> default from the scene
    min_subtree: int = DEFAULT_MIN_SUBTREE
    seed: int = 0

    def __post_init__(self):
        if self.densify_interval < 1:
            raise ValueError("densify_interval must be >= 1")
        for name, lr in self.learning_rates.items():
            if not lr > 0:
                raise ValueError(f"learning rate for {name} must be > 0")


@dataclass
class OptimizerState:
    """Per-node ADAM moments mirroring every attribute array, plus per-node
    step counts (new/respawned nodes restart their bias correction)."""

    m: dict
    v: dict
    step: np.ndarray

    @staticmethod
    def zeros(attrs: AttributeArrays) -> "OptimizerState":
        m = {name: np.zeros_like(arr) for name, arr in attrs.arrays()}
        v = {name: np.zeros_like(arr) for name, arr in attrs.arrays()}
        return OptimizerState(m=m, v=v, step=np.zeros(len(attrs), dtype=np.int64))

    def grow_to(self, attrs: AttributeArrays):
        n = len(attrs)
        if n == self.step.size:
            return
        for name, arr in attrs.arrays():
            pad_shape = (n - self.step.size,) + arr.shape[1:]
            self.m[name] = np.concatenate([self.m[name], np.zeros(pad_shape)])
            self.v[name] = np.concatenate([self.v[name], np.zeros(pad_shape)])
        self.step = np.concatenate(
            [self.step, np.zeros(n - self.step.size, dtype=np.int64)])

    def reset_nodes(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        for name in self.m:
            self.m[name][ids] = 0.0
            self.v[name][ids] = 0.0
        self.step[ids] = 0


@dataclass
class TrainState:
    config: TrainConfig
    hierarchy: Hierarchy
    hspt: Hspt
    scene: Scene
    cache: DeviceCache
    graph: ViewGraph
    views: list                      # (Camera, target image) pairs
    opt: OptimizerState
    rng: np.random.Generator
    extent: float
    skybox_ids: np.ndarray
    current_view: int = 0
    iteration: int = 0

    @property
    def mean_lr(self) -> float:
        return self.config.learning_rates["means"] * self.extent


def skybox_gaussians(center: np.ndarray, radius: float, count: int,
                     sh_cols: int = 9) -> AttributeArrays:
    """Evenly spread Gaussians on a sphere (Fibonacci lattice), sized so the
    shell is watertight, colored neutral gray."""
    out = AttributeArrays.zeros(count)
    if sh_cols != out.sh_rest.shape[1]:
        out.sh_rest = np.zeros((count, sh_cols))
    if count == 0:
        return out
    i = np.arange(count, dtype=np.float64)
    phi = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * (i + 0.5) / count
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    theta = phi * i
    dirs = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    out.means = center + radius * dirs
    spacing = radius * np.sqrt(4.0 * np.pi / count)
    out.scales = np.full((count, 3), spacing)
    out.opacities = np.full(count, 0.5)
    out.base_colors = np.full((count, 3), 0.7)
    return out


def point_cloud_gaussians(points: np.ndarray,
                          colors: np.ndarray | None) -> AttributeArrays:
    """One isotropic Gaussian per point; scale from the mean 3-NN distance,
    opacity 0.1, color from the cloud or mid-gray."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        raise EmptySceneError("empty point cloud")
    out = AttributeArrays.zeros(n)
    out.means = points.copy()
    if n == 1:
        s = 0.1
        out.scales[:] = s
    else:
        d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        k = min(3, n - 1)
        nn = np.sort(d, axis=1)[:, :k].mean(axis=1)
        out.scales = np.repeat(np.maximum(nn, 1e-6)[:, None], 3, axis=1)
    out.opacities = np.full(n, 0.1)
    out.base_colors = (np.array(colors, dtype=np.float64, copy=True)
                       if colors is not None else np.full((n, 3), 0.5))
    return out


def _scene_extent(points: np.ndarray) -> float:
    span = points.max(axis=0) - points.min(axis=0)
    return max(float(np.linalg.norm(span)), 1e-6)


def initialize(points, colors, views, cfg: TrainConfig,
               scene_target=None) -> TrainState:
    """Build leaves from the cloud plus skybox, pre-optimize them flat (no
    hierarchy, no densification), then build hierarchy/HSPT and open the
    scene store. `scene_target` is a path or MemoryBacking (default memory)."""
    points = np.asarray(points, dtype=np.float64)
    leaves = point_cloud_gaussians(points, colors)
    extent = _scene_extent(points)
    if cfg.skybox_points > 0:
        center = points.mean(axis=0)
        sky = skybox_gaussians(center, 10.0 * extent, cfg.skybox_points,
                               sh_cols=leaves.sh_rest.shape[1])
        leaves = AttributeArrays.concat([leaves, sky])
    n_leaves = len(leaves)
    skybox_ids = np.arange(points.shape[0], n_leaves, dtype=np.int64)

    rng = np.random.default_rng(cfg.seed)
    positions = np.stack([np.asarray(c.position) for c, _ in views])
    graph = build_view_graph(positions, k=cfg.scheduler_k,
                             exploration=cfg.scheduler_exploration,
                             random_every=cfg.scheduler_random_every)

    # Flat pre-optimization of the raw leaf set.
    opt_flat = OptimizerState.zeros(leaves)
    view_i = 0
    lrs = dict(cfg.learning_rates)
    lrs["means"] = lrs["means"] * extent
    all_ids = np.arange(n_leaves)
    for it in range(1, cfg.init_iterations + 1):
        view_i = next_view(graph, view_i, it, rng)
        cam, target = views[view_i]
        ctx = render_forward(leaves, cam)
        value, dimg = loss(ctx.image, target, cfg.loss_lambda)
        if not np.isfinite(value):
            raise NonFiniteLossError(f"init iteration {it}: loss {value}")
        grads = backward(ctx, dimg)
        _adam_update(leaves, opt_flat, all_ids, grads, all_ids, lrs)

    h = build_hierarchy(leaves)
    size_thr = (cfg.size_threshold if cfg.size_threshold is not None
                else default_size_threshold(h))
    hspt = build_hspt(h, size_thr, cfg.min_subtree, cfg.lod)
    target_backing = scene_target if scene_target is not None else MemoryBacking()
    write_scene(h, hspt, target_backing)
    scene = open_scene(target_backing)
    opt = OptimizerState.zeros(h.attrs)
    return TrainState(config=cfg, hierarchy=h, hspt=hspt, scene=scene,
                      cache=DeviceCache(config=cfg.cache), graph=graph,
                      views=list(views), opt=opt, rng=rng, extent=extent,
                      skybox_ids=skybox_ids, current_view=view_i, iteration=0)


def _adam_update(attrs: AttributeArrays, opt: OptimizerState, ids, grads,
                 grad_rows, lrs: dict):
    """One ADAM step on attrs[ids] from grads[grad_rows]; scales in log
    space, opacities in logit space, everything else raw."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return
    opt.step[ids] += 1
    t = opt.step[ids].astype(np.float64)
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t

    sigma = np.clip(attrs.opacities[ids], _OPACITY_FLOOR, _OPACITY_CEIL)
    params = {
        "means": attrs.means[ids],
        "scales": np.log(attrs.scales[ids]),
        "rotations": attrs.rotations[ids],
        "opacities": np.log(sigma / (1.0 - sigma)),
        "base_colors": attrs.base_colors[ids],
        "sh_rest": attrs.sh_rest[ids],
    }
    gs = {
        "means": grads.means[grad_rows],
        "scales": grads.scales[grad_rows] * attrs.scales[ids],
        "rotations": grads.rotations[grad_rows],
        "opacities": grads.opacities[grad_rows] * sigma * (1.0 - sigma),
        "base_colors": grads.base_colors[grad_rows],
        "sh_rest": grads.sh_rest[grad_rows],
    }
    for name, g in gs.items():
        bc1, bc2 = (c1, c2) if g.ndim == 1 else (c1[:, None], c2[:, None])
        m = opt.m[name][ids]
        v = opt.v[name][ids]
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        opt.m[name][ids] = m
        opt.v[name][ids] = v
        params[name] = params[name] - lrs[name] * (m / bc1) / (
            np.sqrt(v / bc2) + ADAM_EPS)

    attrs.means[ids] = params["means"]
    attrs.scales[ids] = np.clip(np.exp(params["scales"]), 1e-9, 1e9)
    attrs.rotations[ids] = params["rotations"]
    attrs.opacities[ids] = np.clip(
        1.0 / (1.0 + np.exp(-params["opacities"])), _OPACITY_FLOOR, _OPACITY_CEIL)
    attrs.base_colors[ids] = params["base_colors"]
    attrs.sh_rest[ids] = params["sh_rest"]


def _spt_positions(spt, d_root: float):
    """Record positions (within the cut prefix) selected at d_root."""
    prefix_len, selected = cut_spt(spt, d_root)
    if selected.size == 1 and selected[0] == spt.root:
        pos = np.nonzero(spt.nodes[:prefix_len] == spt.root)[0]
    else:
        pos = np.nonzero(spt.key_self[:prefix_len] <= d_root)[0]
    return prefix_len, pos, spt.nodes[pos]


def train_step(state: TrainState, iteration: int) -> dict:
    """One training iteration; returns exact per-step counters."""
    cfg = state.config
    h = state.hierarchy
    state.current_view = next_view(state.graph, state.current_view, iteration,
                                   state.rng)
    cam, target = state.views[state.current_view]
    rs = cut_hspt(state.hspt, h, cam, cfg.lod, cull=True)

    bytes_before = state.scene.attribute_bytes_read
    hits_before = state.cache.hits
    loaded = 0

    mem_ids = np.concatenate([rs.upper, rs.passthrough])
    parts = [h.attrs.take(mem_ids)]
    spt_rows = []  # (entry, positions, node_ids, rows offset)
    offset = mem_ids.size
    for sel in rs.per_spt:
        spt = state.hspt.spts[sel.spt_id]
        entry = state.cache.lookup(sel.spt_id, sel.d_root)
        if entry is None:
            block = state.scene.load_spt_prefix(sel.spt_id, sel.prefix_len)
            block.attrs = block.attrs.astype(np.float64)
            loaded += sel.prefix_len
            entry = CacheEntry(
                spt_id=sel.spt_id, cached_distance=sel.d_root,
                prefix_len=sel.prefix_len, block=block,
                nbytes=sel.prefix_len * state.scene.bytes_per_gaussian)
            for spt_id, dirty_block in state.cache.insert(entry):
                state.scene.write_back(dirty_block)
        _, pos, node_ids = _spt_positions(spt, entry.cached_distance)
        parts.append(entry.block.attrs.take(pos))
        spt_rows.append((entry, pos, node_ids, offset))
        offset += pos.size

    render_attrs = AttributeArrays.concat(parts)
    ctx = render_forward(render_attrs, cam)
    value, dimg = loss(ctx.image, target, cfg.loss_lambda)
    if not np.isfinite(value):
        raise NonFiniteLossError(
            f"iteration {iteration}: non-finite loss rendering view "
            f"{state.current_view} with {len(render_attrs)} gaussians")
    grads = backward(ctx, dimg)

    lrs = dict(cfg.learning_rates)
    lrs["means"] = state.mean_lr
    _adam_update(h.attrs, state.opt, mem_ids, grads,
                 np.arange(mem_ids.size), lrs)
    for entry, pos, node_ids, off in spt_rows:
        _adam_update(h.attrs, state.opt, node_ids, grads,
                     np.arange(off, off + pos.size), lrs)
        entry.block.attrs.put(pos, h.attrs.take(node_ids))
        entry.dirty = True

    for spt_id, dirty_block in state.cache.tick_and_maybe_flush(iteration):
        state.scene.write_back(dirty_block)

    state.iteration = iteration
    return {
        "iteration": iteration,
        "view": state.current_view,
        "loss": float(value),
        "gaussians_rendered": int(len(render_attrs)),
        "gaussians_loaded_from_store": int(loaded),
        "cache_hits": int(state.cache.hits - hits_before),
        "bytes_streamed": int(state.scene.attribute_bytes_read - bytes_before),
    }


def _sample_leaves(h: Hierarchy, count: int, rng: np.random.Generator,
                   exclude=()) -> np.ndarray:
    """Distinct leaves sampled with probability proportional to opacity."""
    leaves = h.leaf_ids
    if exclude:
        leaves = leaves[~np.isin(leaves, np.asarray(list(exclude)))]
    if leaves.size == 0 or count == 0:
        return np.empty(0, dtype=np.int64)
    w = np.maximum(h.attrs.opacities[leaves], 1e-12)
    p = w / w.sum()
    count = min(count, leaves.size)
    return rng.choice(leaves, size=count, replace=False, p=p)


def _sync_scene(state: TrainState):
    """Flush the cache and rewrite the store from the (authoritative)
    in-memory hierarchy; byte counters survive the rewrite."""
    consumed = state.scene.attribute_bytes_read
    backing = state.scene.backing
    write_scene(state.hierarchy, state.hspt, backing
                if isinstance(backing, MemoryBacking) else backing.path)
    if not isinstance(backing, MemoryBacking):
        backing.close()
        state.scene = open_scene(backing.path)
    else:
        state.scene = open_scene(backing)
    state.scene.attribute_bytes_read = consumed
    state.cache = DeviceCache(config=state.config.cache)


def densify(state: TrainState) -> dict:
    """Respawn dead leaves into opacity-sampled targets, spawn extra leaves,
    zero new nodes' moments, rebuild the HSPT and resync the store."""
    cfg = state.config
    h = state.hierarchy
    leaves = h.leaf_ids
    dead = leaves[h.attrs.opacities[leaves] < cfg.dead_opacity_threshold]
    respawned = 0
    for d in dead:
        d = int(d)
        if h.children[d, 0] != -1 or d == h.root:
            continue  # structure changed under a previous respawn
        parent = int(h.parent[d])
        targets = _sample_leaves(h, 1, state.rng, exclude={d, parent})
        if targets.size == 0:
            continue
        respawn_dead(h, d, int(targets[0]), state.rng)
        state.opt.reset_nodes([d, parent])
        respawned += 1

    n_spawn = (cfg.spawns_per_densify if cfg.spawns_per_densify is not None
               else max(h.leaf_count // 200, 0))
    spawned = 0
    for leaf in _sample_leaves(h, n_spawn, state.rng):
        left, right = densify_spawn(h, int(leaf), state.rng)
        state.opt.grow_to(h.attrs)
        state.opt.reset_nodes([left, right])
        spawned += 1
    state.opt.grow_to(h.attrs)

    state.hspt = rebuild_after_densify(state.hspt, h)
    _sync_scene(state)
    return {"spawned": spawned, "respawned": respawned}


def train(state: TrainState, metrics_out=None) -> list:
    """Run the configured schedule; one metrics record per step (JSON-lines
    when metrics_out is a writable stream)."""
    records = []
    for it in range(state.iteration + 1, state.config.total_iterations + 1):
        rec = train_step(state, it)
        if it % state.config.densify_interval == 0 \
                and it < state.config.total_iterations:
            rec.update(densify(state))
        records.append(rec)
        if metrics_out is not None:
            metrics_out.write(json.dumps(rec) + "\n")
    return records


def save_checkpoint(state: TrainState, scene_path: str, sidecar_path: str):
    """Scene file + optimizer sidecar (moments, step counts, iteration, RNG
    state) — enough to resume bit-identically."""
    for spt_id, block in state.cache.tick_and_maybe_flush(0):
        state.scene.write_back(block)
    write_scene(state.hierarchy, state.hspt, scene_path)
    payload = {f"m_{k}": v for k, v in state.opt.m.items()}
    payload.update({f"v_{k}": v for k, v in state.opt.v.items()})
    np.savez_compressed(
        sidecar_path, step=state.opt.step, iteration=state.iteration,
        current_view=state.current_view, extent=state.extent,
        skybox_ids=state.skybox_ids,
        rng_state=np.frombuffer(
            json.dumps(state.rng.bit_generator.state).encode(), dtype=np.uint8),
        **payload)


def load_checkpoint(scene_path: str, sidecar_path: str, views,
                    cfg: TrainConfig) -> TrainState:
    scene = open_scene(scene_path)
    h = scene.read_hierarchy()
    hspt = scene.read_hspt()
    data = np.load(sidecar_path)
    opt = OptimizerState.zeros(h.attrs)
    for name in opt.m:
        opt.m[name] = data[f"m_{name}"]
        opt.v[name] = data[f"v_{name}"]
    opt.step = data["step"]
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(data["rng_state"].tobytes().decode())
    positions = np.stack([np.asarray(c.position) for c, _ in views])
    graph = build_view_graph(positions, k=cfg.scheduler_k,
                             exploration=cfg.scheduler_exploration,
                             random_every=cfg.scheduler_random_every)
    return TrainState(config=cfg, hierarchy=h, hspt=hspt, scene=scene,
                      cache=DeviceCache(config=cfg.cache), graph=graph,
                      views=list(views), opt=opt, rng=rng,
                      extent=float(data["extent"]),
                      skybox_ids=data["skybox_ids"].astype(np.int64),
                      current_view=int(data["current_view"]),
                      iteration=int(data["iteration"]))
