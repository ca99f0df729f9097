"""Hierarchy construction, merging, BFS cuts, densification, validation."""
from __future__ import annotations

import numpy as np
import pytest

from glod.core import (
    AttributeArrays,
    EmptySceneError,
    GaussianAttributes,
    LodConfig,
    covariance_from,
    min_distance,
)
from glod.hierarchy import (
    NONE,
    CannotRespawnRootError,
    InvalidTargetError,
    bfs_cut,
    build_hierarchy,
    densify_spawn,
    merge_children,
    respawn_dead,
    validate,
)

from .conftest import (
    look_at_camera,
    random_camera,
    random_hierarchy,
    random_leaves,
)


def _gauss(mean, scale=(0.2, 0.2, 0.2), opacity=0.8, color=(1, 0, 0)):
    return GaussianAttributes(mean=mean, scale=scale, rotation=(1, 0, 0, 0),
                              opacity=opacity, base_color=color)


class TestBuild:
    def test_single_leaf(self):
        h = build_hierarchy([_gauss((0, 0, 0))])
        assert h.node_count == 1
        assert h.root == 0
        assert h.leaf_count == 1

    def test_empty_rejected(self):
        with pytest.raises(EmptySceneError):
            build_hierarchy([])

    def test_two_identical_gaussians(self):
        g = _gauss((1.0, 2.0, 3.0), scale=(0.5, 0.4, 0.3))
        h = build_hierarchy([g, g])
        np.testing.assert_allclose(h.attrs.means[h.root], g.mean, atol=1e-12)
        root_cov = covariance_from(h.attrs.scales[h.root],
                                   h.attrs.rotations[h.root])
        child_cov = covariance_from(g.scale, g.rotation)
        # Loewner order: root covariance - child covariance is PSD
        assert np.linalg.eigvalsh(root_cov - child_cov).min() >= -1e-9

    def test_every_leaf_reachable_exactly_once(self, rng):
        n = 1000
        h = random_hierarchy(rng, n)
        order = h.bfs_order()
        assert order.size == 2 * n - 1
        assert np.unique(order).size == order.size
        leaves = order[h.is_leaf[order]]
        np.testing.assert_array_equal(np.sort(leaves), np.arange(n))

    def test_depth_bound(self, rng):
        n = 700
        h = random_hierarchy(rng, n)
        depth = np.zeros(h.capacity, dtype=int)
        for node in h.bfs_order():
            p = h.parent[node]
            if p != NONE:
                depth[node] = depth[p] + 1
        assert depth.max() <= int(np.ceil(np.log2(n))) + 2

    def test_internal_nodes_are_merges_of_children(self, rng):
        h = random_hierarchy(rng, 64)
        internal = np.nonzero(~h.is_leaf)[0]
        for node in internal[:10]:
            l, r = h.children[node]
            merged = merge_children(h.attrs.gaussian(l), h.attrs.gaussian(r))
            np.testing.assert_allclose(h.attrs.means[node], merged.mean,
                                       atol=1e-9)
            np.testing.assert_allclose(
                covariance_from(h.attrs.scales[node], h.attrs.rotations[node]),
                covariance_from(merged.scale, merged.rotation), atol=1e-9)


class TestMerge:
    def test_idempotent_moments(self):
        g = _gauss((1, 2, 3), scale=(0.5, 0.3, 0.2), opacity=0.7,
                   color=(0.1, 0.5, 0.9))
        m = merge_children(g, g)
        np.testing.assert_allclose(m.mean, g.mean, atol=1e-12)
        np.testing.assert_allclose(m.base_color, g.base_color, atol=1e-12)
        np.testing.assert_allclose(
            covariance_from(m.scale, m.rotation),
            covariance_from(g.scale, g.rotation), atol=1e-10)
        assert m.opacity == pytest.approx(g.opacity)

    def test_two_point_variance(self):
        eps = 1e-3
        a = _gauss((1, 0, 0), scale=(eps, eps, eps), opacity=1.0)
        b = _gauss((-1, 0, 0), scale=(eps, eps, eps), opacity=1.0)
        m = merge_children(a, b)
        np.testing.assert_allclose(m.mean, 0, atol=1e-12)
        assert max(m.scale) ** 2 == pytest.approx(eps**2 + 1.0, rel=1e-9)

    def test_matches_mixture_moments(self, rng):
        """Oracle: independent analytic mixture moments of the weighted
        two-component mixture."""
        for _ in range(100):
            leaves = random_leaves(rng, 2)
            a, b = leaves.gaussian(0), leaves.gaussian(1)
            m = merge_children(a, b)
            wa = a.opacity * np.prod(a.scale)
            wb = b.opacity * np.prod(b.scale)
            fa, fb = wa / (wa + wb), wb / (wa + wb)
            mean = fa * a.mean + fb * b.mean
            cov = np.zeros((3, 3))
            for g, f in ((a, fa), (b, fb)):
                d = g.mean - mean
                cov += f * (covariance_from(g.scale, g.rotation)
                            + np.outer(d, d))
            np.testing.assert_allclose(m.mean, mean, rtol=1e-6, atol=1e-12)
            np.testing.assert_allclose(
                covariance_from(m.scale, m.rotation), cov, rtol=1e-6,
                atol=1e-10)
            assert m.opacity == pytest.approx(max(a.opacity, b.opacity))

    def test_zero_weight_fallback(self):
        a = _gauss((2, 0, 0), opacity=0.0)
        b = _gauss((0, 0, 0), opacity=0.0)
        m = merge_children(a, b)
        np.testing.assert_allclose(m.mean, (1, 0, 0), atol=1e-12)


def _recursive_cut_oracle(h, cam, cfg, node=None):
    """Independent recursive-descent implementation of the BFS cut."""
    if node is None:
        node = h.root
    dist = float(np.linalg.norm(h.attrs.means[node] - cam.position))
    leaf = h.children[node, 0] == NONE
    if dist >= min_distance(h.attrs.scales[node], cfg) or leaf:
        return [int(node)]
    out = []
    for child in h.children[node]:
        out += _recursive_cut_oracle(h, cam, cfg, int(child))
    return out


def assert_proper_cut(h, ids):
    ids = np.asarray(ids)
    in_cut = np.zeros(h.capacity, dtype=bool)
    in_cut[ids] = True
    for node in ids:
        p = h.parent[node]
        while p != NONE:
            assert not in_cut[p], f"{node} and ancestor {p} both selected"
            p = h.parent[p]


class TestBfsCut:
    def test_far_camera_selects_root(self, rng):
        h = random_hierarchy(rng, 50)
        cfg = LodConfig(threshold=1.0)
        cam = look_at_camera(np.array([1e5, 0, 0]), np.zeros(3))
        cut = bfs_cut(h, cam, cfg)
        np.testing.assert_array_equal(cut.node_ids, [h.root])

    def test_close_camera_selects_leaves(self, rng):
        """The minimum distance grows as scales shrink toward the leaves, so
        a camera inside the scene descends all the way down."""
        h = random_hierarchy(rng, 64, span=2.0)
        cfg = LodConfig(threshold=1e9)
        cam = look_at_camera(np.zeros(3) + 0.01, np.ones(3))
        cut = bfs_cut(h, cam, cfg)
        np.testing.assert_array_equal(cut.node_ids, np.sort(h.leaf_ids))

    def test_matches_recursive_oracle(self, rng):
        for _ in range(30):
            h = random_hierarchy(rng, int(rng.integers(2, 200)))
            cfg = LodConfig(threshold=float(rng.uniform(0.1, 100.0)))
            cam = random_camera(rng)
            cut = bfs_cut(h, cam, cfg)
            oracle = np.sort(_recursive_cut_oracle(h, cam, cfg))
            np.testing.assert_array_equal(cut.node_ids, oracle)
            assert_proper_cut(h, cut.node_ids)

    def test_leaf_coverage_partition(self, rng):
        counts_cache = None
        for _ in range(10):
            h = random_hierarchy(rng, 128)
            cfg = LodConfig(threshold=float(rng.uniform(0.5, 50.0)))
            cam = random_camera(rng)
            cut = bfs_cut(h, cam, cfg)
            counts_cache = h.subtree_leaf_counts()
            assert counts_cache[cut.node_ids].sum() == h.leaf_count


class TestDensify:
    def test_spawn_structure(self, rng):
        h = random_hierarchy(rng, 20)
        leaf = int(h.leaf_ids[0])
        n0, l0 = h.node_count, h.leaf_count
        left, right = densify_spawn(h, leaf, rng)
        assert h.node_count == n0 + 2
        assert h.leaf_count == l0 + 1
        assert tuple(h.children[leaf]) == (left, right)
        assert h.parent[left] == leaf and h.parent[right] == leaf

    def test_spawn_children_symmetric(self, rng):
        h = build_hierarchy([_gauss((0, 0, 0), scale=(0.3, 0.3, 0.3))])
        left, right = densify_spawn(h, 0, rng)
        mid = 0.5 * (h.attrs.means[left] + h.attrs.means[right])
        np.testing.assert_allclose(mid, 0, atol=1e-12)
        np.testing.assert_array_equal(h.attrs.scales[left],
                                      h.attrs.scales[right])

    def test_spawn_on_internal_rejected(self, rng):
        h = random_hierarchy(rng, 8)
        with pytest.raises(InvalidTargetError):
            densify_spawn(h, h.root, rng)

    def test_spawn_render_pair_close(self, rng):
        """Render-pair oracle: parent alone vs its two spawned children."""
        from glod.renderer import render

        h = build_hierarchy([_gauss((0, 0, 5.0), scale=(0.5, 0.3, 0.2),
                                    opacity=0.8)])
        cam = look_at_camera((0, 0, 0), (0, 0, 5.0), resolution=(32, 32))
        before = render(h.attrs.take([0]), cam)
        left, right = densify_spawn(h, 0, rng)
        after = render(h.attrs.take([left, right]), cam)
        assert np.abs(before - after).mean() < 0.05

    def test_respawn_smallest_case(self, rng):
        h = build_hierarchy([_gauss((0, 0, 0)), _gauss((4, 0, 0))])
        dead, survivor = 0, 1
        old_root = h.root
        respawn_dead(h, dead, survivor, rng)
        assert h.node_count == 3
        assert h.root == survivor
        assert h.parent[survivor] == NONE
        # the freed slots (dead leaf + old root) are the target's children
        assert sorted(h.children[survivor]) == sorted([dead, old_root])
        d = validate(h, LodConfig(threshold=1.0))
        assert d.structural_ok

    def test_respawn_leaf_set_arithmetic(self, rng):
        h = random_hierarchy(rng, 32)
        leaves = set(int(x) for x in h.leaf_ids)
        dead = int(h.leaf_ids[0])
        parent = int(h.parent[dead])
        sibling = [int(c) for c in h.children[parent] if c != dead][0]
        choices = [x for x in leaves if x not in (dead, parent, sibling)]
        target = choices[0]
        respawn_dead(h, dead, target, rng)
        new_leaves = set(int(x) for x in h.leaf_ids)
        freed = {dead, parent}
        assert new_leaves == (leaves - {dead, target}) | freed
        assert h.children[target, 0] != NONE

    def test_respawn_root_rejected(self, rng):
        h = build_hierarchy([_gauss((0, 0, 0))])
        with pytest.raises(CannotRespawnRootError):
            respawn_dead(h, h.root, h.root, rng)

    def test_respawn_invalid_targets(self, rng):
        h = random_hierarchy(rng, 8)
        dead = int(h.leaf_ids[0])
        with pytest.raises(InvalidTargetError):
            respawn_dead(h, dead, int(h.root), rng)  # internal target
        with pytest.raises(InvalidTargetError):
            respawn_dead(h, dead, dead, rng)

    def test_structural_fuzzing(self, rng):
        h = random_hierarchy(rng, 200)
        cfg = LodConfig(threshold=1.0)
        for i in range(500):
            leaves = h.leaf_ids
            if rng.random() < 0.5:
                densify_spawn(h, int(rng.choice(leaves)), rng)
            else:
                dead = int(rng.choice(leaves))
                if dead == h.root:
                    continue
                parent = int(h.parent[dead])
                pool = leaves[(leaves != dead) & (leaves != parent)]
                if pool.size == 0:
                    continue
                respawn_dead(h, dead, int(rng.choice(pool)), rng)
            if i % 100 == 0:
                assert validate(h, cfg).structural_ok
        assert validate(h, cfg).structural_ok


class TestValidate:
    def test_fresh_hierarchy_clean(self, rng):
        h = random_hierarchy(rng, 100)
        d = validate(h, LodConfig(threshold=1.0))
        assert d.structural_ok

    def test_monotonicity_counted(self):
        # parent larger scale than the child => child's m_d smaller than the
        # parent's under the inverted metric; craft the opposite
        a = _gauss((0, 0, 0), scale=(1.0, 1.0, 1.0))
        b = _gauss((1, 0, 0), scale=(1.0, 1.0, 1.0))
        h = build_hierarchy([a, b])
        cfg = LodConfig(threshold=1.0)
        h.attrs.scales[h.root] = (10.0, 10.0, 10.0)
        d = validate(h, cfg)
        # equal child scales, larger parent scale: both children's minimum
        # distances exceed the parent's
        assert d.monotonicity_violations == 2
        assert d.structural_ok

    def test_violation_count_matches_bruteforce(self, rng):
        h = random_hierarchy(rng, 64)
        cfg = LodConfig(threshold=2.0)
        h.attrs.scales = rng.uniform(0.05, 2.0, h.attrs.scales.shape)
        d = validate(h, cfg)
        count = 0
        for node in h.bfs_order():
            p = h.parent[node]
            if p == NONE:
                continue
            if min_distance(h.attrs.scales[node], cfg) >= \
                    min_distance(h.attrs.scales[p], cfg):
                count += 1
        assert d.monotonicity_violations == count


def test_attribute_array_roundtrip(rng):
    leaves = random_leaves(rng, 10)
    g = leaves.gaussian(3)
    again = AttributeArrays.from_gaussians(
        [leaves.gaussian(i) for i in range(10)])
    np.testing.assert_array_equal(again.means, leaves.means)
    np.testing.assert_array_equal(again.rotations[3], g.rotation)
