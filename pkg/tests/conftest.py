"""Shared builders for randomized hierarchies, cameras and scenes."""
from __future__ import annotations

import numpy as np
import pytest

from glod.core import AttributeArrays, Camera, rotmat_to_quat
from glod.hierarchy import Hierarchy, build_hierarchy


def random_leaves(rng, n, span=10.0, scale_lo=0.05, scale_hi=0.5):
    leaves = AttributeArrays.zeros(n)
    leaves.means = rng.uniform(-span, span, (n, 3))
    leaves.scales = rng.uniform(scale_lo, scale_hi, (n, 3))
    q = rng.normal(size=(n, 4))
    leaves.rotations = q / np.linalg.norm(q, axis=1, keepdims=True)
    leaves.opacities = rng.uniform(0.05, 1.0, n)
    leaves.base_colors = rng.uniform(0.0, 1.0, (n, 3))
    return leaves


def random_hierarchy(rng, n, span=10.0, **kw) -> Hierarchy:
    return build_hierarchy(random_leaves(rng, n, span=span, **kw))


def random_scale_hierarchy(rng, n, span=10.0) -> Hierarchy:
    """Hierarchy whose node scales are re-randomized after construction, so
    LoD keys are not tied to the merge geometry (stress for cut logic)."""
    h = random_hierarchy(rng, n, span=span)
    h.attrs.scales = rng.uniform(0.05, 2.0, h.attrs.scales.shape)
    return h


def look_at_camera(position, target, focal=(40.0, 40.0), resolution=(32, 32),
                   near=0.1) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    if abs(fwd @ up) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(up, fwd)
    right = right / np.linalg.norm(right)
    upv = np.cross(fwd, right)
    rot = np.stack([right, upv, fwd], axis=1)
    w, h = resolution
    return Camera(position=position, orientation=rotmat_to_quat(rot),
                  focal=focal, principal_point=(w / 2.0, h / 2.0),
                  resolution=resolution, near=near)


def random_camera(rng, span=10.0, resolution=(32, 32)) -> Camera:
    pos = rng.uniform(-3 * span, 3 * span, 3)
    target = rng.uniform(-span, span, 3)
    while np.linalg.norm(target - pos) < 1e-3:
        target = rng.uniform(-span, span, 3)
    focal = tuple(rng.uniform(20.0, 80.0, 2))
    return look_at_camera(pos, target, focal=focal, resolution=resolution)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
