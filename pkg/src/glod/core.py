"""Fundamental math and domain types: Gaussian parameters, cameras,
projection, minimum-distance metrics and frustum tests.

Everything here is a pure function over immutable inputs; batch variants
operate on structure-of-arrays numpy data and are the primitives the rest
of the engine is built on.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_SCALE = "max_scale"
SURFACE_AREA = "surface_area"

# Anti-aliasing floor added to the projected covariance diagonal (px^2).
LOWPASS_FLOOR = 0.3

SH_C1 = 0.4886025119029199


class InvalidParameterError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


class EmptySceneError(ValueError):
    pass


@dataclass
class GaussianAttributes:
    """A single Gaussian primitive.

    mean: world-space center; scale: per-axis standard deviations (> 0);
    rotation: unit quaternion (w, x, y, z); opacity in [0, 1];
    base_color: RGB; sh_rest: 3 * ((d+1)^2 - 1) view-dependence coefficients.
    """

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    base_color: np.ndarray
    sh_rest: np.ndarray = field(default_factory=lambda: np.zeros(9))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.base_color = np.asarray(self.base_color, dtype=np.float64)
        self.sh_rest = np.asarray(self.sh_rest, dtype=np.float64)


@dataclass
class AttributeArrays:
    """Structure-of-arrays block of N Gaussians.

    The canonical in-memory layout shared by the hierarchy, the scene store
    and the renderer. sh_rest has 3 * ((d+1)^2 - 1) columns for SH degree d.
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    base_colors: np.ndarray
    sh_rest: np.ndarray

    def __len__(self):
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_rest.shape[1] // 3 + 1))) - 1

    @staticmethod
    def zeros(n: int, sh_degree: int = 1, dtype=np.float64) -> "AttributeArrays":
        rot = np.zeros((n, 4), dtype=dtype)
        rot[:, 0] = 1.0
        return AttributeArrays(
            means=np.zeros((n, 3), dtype=dtype),
            scales=np.ones((n, 3), dtype=dtype),
            rotations=rot,
            opacities=np.zeros(n, dtype=dtype),
            base_colors=np.zeros((n, 3), dtype=dtype),
            sh_rest=np.zeros((n, 3 * ((sh_degree + 1) ** 2 - 1)), dtype=dtype),
        )

    @staticmethod
    def from_gaussians(gaussians) -> "AttributeArrays":
        gaussians = list(gaussians)
        k = max((g.sh_rest.size for g in gaussians), default=9)
        out = AttributeArrays.zeros(len(gaussians))
        if k > out.sh_rest.shape[1]:
            out.sh_rest = np.zeros((len(gaussians), k))
        for i, g in enumerate(gaussians):
            out.means[i] = g.mean
            out.scales[i] = g.scale
            out.rotations[i] = g.rotation
            out.opacities[i] = g.opacity
            out.base_colors[i] = g.base_color
            out.sh_rest[i, : g.sh_rest.size] = g.sh_rest
        return out

    def gaussian(self, i: int) -> GaussianAttributes:
        return GaussianAttributes(
            mean=self.means[i].copy(),
            scale=self.scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity=float(self.opacities[i]),
            base_color=self.base_colors[i].copy(),
            sh_rest=self.sh_rest[i].copy(),
        )

    def take(self, idx) -> "AttributeArrays":
        return AttributeArrays(
            means=self.means[idx],
            scales=self.scales[idx],
            rotations=self.rotations[idx],
            opacities=self.opacities[idx],
            base_colors=self.base_colors[idx],
            sh_rest=self.sh_rest[idx],
        )

    def put(self, idx, block: "AttributeArrays"):
        self.means[idx] = block.means
        self.scales[idx] = block.scales
        self.rotations[idx] = block.rotations
        self.opacities[idx] = block.opacities
        self.base_colors[idx] = block.base_colors
        self.sh_rest[idx] = block.sh_rest

    def copy(self) -> "AttributeArrays":
        return AttributeArrays(
            self.means.copy(), self.scales.copy(), self.rotations.copy(),
            self.opacities.copy(), self.base_colors.copy(), self.sh_rest.copy())

    def astype(self, dtype) -> "AttributeArrays":
        return AttributeArrays(
            self.means.astype(dtype), self.scales.astype(dtype),
            self.rotations.astype(dtype), self.opacities.astype(dtype),
            self.base_colors.astype(dtype), self.sh_rest.astype(dtype))

    @staticmethod
    def concat(blocks) -> "AttributeArrays":
        blocks = list(blocks)
        return AttributeArrays(
            means=np.concatenate([b.means for b in blocks]),
            scales=np.concatenate([b.scales for b in blocks]),
            rotations=np.concatenate([b.rotations for b in blocks]),
            opacities=np.concatenate([b.opacities for b in blocks]),
            base_colors=np.concatenate([b.base_colors for b in blocks]),
            sh_rest=np.concatenate([b.sh_rest for b in blocks]),
        )

    def arrays(self):
        """(name, array) pairs in canonical section order."""
        return [
            ("means", self.means), ("scales", self.scales),
            ("rotations", self.rotations), ("opacities", self.opacities),
            ("base_colors", self.base_colors), ("sh_rest", self.sh_rest),
        ]


@dataclass(frozen=True)
class LodConfig:
    threshold: float
    metric: str = MAX_SCALE

    def __post_init__(self):
        if not self.threshold > 0:
            raise InvalidParameterError("LoD threshold must be > 0")
        if self.metric not in (MAX_SCALE, SURFACE_AREA):
            raise InvalidParameterError(f"unknown LoD metric {self.metric!r}")


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from quaternion(s) (w, x, y, z), normalized internally.

    Accepts (4,) or (N, 4); returns (3, 3) or (N, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m[0] if single else m


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """Quaternion(s) (w, x, y, z) from rotation matrix/matrices.

    Branch-free batched Shepperd method; output has w >= 0.
    """
    m = np.asarray(m, dtype=np.float64)
    single = m.ndim == 2
    m = m.reshape((-1, 3, 3))
    n = m.shape[0]
    q = np.empty((n, 4))
    t = np.einsum("nii->n", m)
    # Four candidate formulations; pick the numerically safest per matrix.
    cand = np.stack(
        [t, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    choice = np.argmax(cand, axis=1)
    for c in range(4):
        idx = np.nonzero(choice == c)[0]
        if idx.size == 0:
            continue
        a = m[idx]
        if c == 0:
            r = np.sqrt(1.0 + t[idx])
            s = 0.5 / r
            q[idx, 0] = 0.5 * r
            q[idx, 1] = (a[:, 2, 1] - a[:, 1, 2]) * s
            q[idx, 2] = (a[:, 0, 2] - a[:, 2, 0]) * s
            q[idx, 3] = (a[:, 1, 0] - a[:, 0, 1]) * s
        elif c == 1:
            r = np.sqrt(1.0 + a[:, 0, 0] - a[:, 1, 1] - a[:, 2, 2])
            s = 0.5 / r
            q[idx, 0] = (a[:, 2, 1] - a[:, 1, 2]) * s
            q[idx, 1] = 0.5 * r
            q[idx, 2] = (a[:, 0, 1] + a[:, 1, 0]) * s
            q[idx, 3] = (a[:, 0, 2] + a[:, 2, 0]) * s
        elif c == 2:
            r = np.sqrt(1.0 - a[:, 0, 0] + a[:, 1, 1] - a[:, 2, 2])
            s = 0.5 / r
            q[idx, 0] = (a[:, 0, 2] - a[:, 2, 0]) * s
            q[idx, 1] = (a[:, 0, 1] + a[:, 1, 0]) * s
            q[idx, 2] = 0.5 * r
            q[idx, 3] = (a[:, 1, 2] + a[:, 2, 1]) * s
        else:
            r = np.sqrt(1.0 - a[:, 0, 0] - a[:, 1, 1] + a[:, 2, 2])
            s = 0.5 / r
            q[idx, 0] = (a[:, 1, 0] - a[:, 0, 1]) * s
            q[idx, 1] = (a[:, 0, 2] + a[:, 2, 0]) * s
            q[idx, 2] = (a[:, 1, 2] + a[:, 2, 1]) * s
            q[idx, 3] = 0.5 * r
    sign = np.where(q[:, 0] < 0, -1.0, 1.0)
    q *= sign[:, None]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q[0] if single else q


@dataclass
class Camera:
    """Pinhole camera. `orientation` rotates camera frame to world frame;
    camera space is x right, y down, z forward (positive depth)."""

    position: np.ndarray
    orientation: np.ndarray
    focal: tuple
    principal_point: tuple
    resolution: tuple
    near: float = 0.01
    far: float = 1e6

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.orientation = np.asarray(self.orientation, dtype=np.float64)
        n = np.linalg.norm(self.orientation)
        if not np.isfinite(n) or n < 1e-12:
            raise InvalidParameterError("degenerate camera orientation")
        self.orientation = self.orientation / n
        if not (self.near < self.far and self.near > 0):
            raise InvalidParameterError("camera requires 0 < near < far")
        w, h = self.resolution
        if w < 1 or h < 1:
            raise InvalidParameterError("camera resolution must be >= 1")

    @property
    def world_to_cam(self) -> np.ndarray:
        return quat_to_rotmat(self.orientation).T

    def to_camera_space(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.position) @ self.world_to_cam.T


@dataclass(frozen=True)
class Frustum:
    """6 world-space plane equations (nx, ny, nz, d), normals pointing
    outward; a point p is outside plane k when n_k . p + d_k > 0."""

    planes: np.ndarray

    @staticmethod
    def from_camera(cam: Camera) -> "Frustum":
        fx, fy = cam.focal
        cx, cy = cam.principal_point
        w, h = cam.resolution
        le = (0.0 - cx) / fx
        ri = (w - cx) / fx
        to = (0.0 - cy) / fy
        bo = (h - cy) / fy
        # Camera-space planes; apex plane at z >= 0 keeps the test
        # conservative for spheres touching the camera position.
        planes_c = [
            (0.0, 0.0, -1.0, 0.0),          # behind apex
            (0.0, 0.0, 1.0, -cam.far),      # beyond far
            (-1.0, 0.0, le, 0.0),           # left of image
            (1.0, 0.0, -ri, 0.0),           # right of image
            (0.0, -1.0, to, 0.0),           # above image
            (0.0, 1.0, -bo, 0.0),           # below image
        ]
        r = quat_to_rotmat(cam.orientation)
        out = np.empty((6, 4))
        for i, (nx, ny, nz, d) in enumerate(planes_c):
            n_c = np.array([nx, ny, nz])
            n_c = n_c / np.linalg.norm(n_c)
            n_w = r @ n_c
            out[i, :3] = n_w
            out[i, 3] = d / np.linalg.norm([nx, ny, nz]) - n_w @ cam.position
        return Frustum(planes=out)


def covariance_from(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """3x3 covariance R diag(s^2) R^T from scale and unit quaternion."""
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(rotation))):
        raise InvalidParameterError("non-finite scale or rotation")
    if np.any(scale <= 0):
        raise InvalidParameterError("scale components must be > 0")
    r = quat_to_rotmat(rotation)
    return (r * scale**2) @ r.T


def covariance_from_batch(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    r = quat_to_rotmat(rotations)
    return np.einsum("nij,nj,nkj->nik", r, np.asarray(scales, dtype=np.float64) ** 2, r)


def min_distance(scale: np.ndarray, cfg: LodConfig) -> float:
    """Closest acceptable viewing distance for a Gaussian of the given scale."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
        raise InvalidParameterError("scale components must be positive finite")
    return float(min_distance_batch(scale[None, :], cfg)[0])


def min_distance_batch(scales: np.ndarray, cfg: LodConfig) -> np.ndarray:
    scales = np.asarray(scales, dtype=np.float64)
    if cfg.metric == MAX_SCALE:
        return cfg.threshold / np.max(scales, axis=-1)
    s1, s2, s3 = scales[..., 0], scales[..., 1], scales[..., 2]
    return cfg.threshold / np.sqrt(s1 * s2 + s1 * s3 + s2 * s3)


def sphere_intersects_frustum(center, radius, frustum: Frustum):
    """Conservative sphere/frustum overlap (6-plane test, no corner
    refinement): False only when strictly outside some plane."""
    center = np.asarray(center, dtype=np.float64)
    single = center.ndim == 1
    c = np.atleast_2d(center)
    signed = c @ frustum.planes[:, :3].T + frustum.planes[:, 3]
    inside = np.all(signed <= np.asarray(radius).reshape(-1, 1), axis=1)
    return bool(inside[0]) if single else inside


def project_gaussian(g: GaussianAttributes, cam: Camera):
    """EWA projection of one Gaussian: pixel mean and 2x2 screen covariance
    (with the low-pass diagonal floor applied)."""
    mean2d, cov2d, _ = project_batch(
        g.mean[None, :], g.scale[None, :], g.rotation[None, :], cam)
    if np.any(np.isnan(mean2d)):
        raise BehindCameraError("Gaussian behind camera near plane")
    return mean2d[0], cov2d[0]


def project_batch(means, scales, rotations, cam: Camera):
    """Vectorized projection. Returns (mean2d (N,2), cov2d (N,2,2), depth (N,)).

    Entries with camera-space depth <= near get NaN mean/cov.
    """
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    t = cam.to_camera_space(means)
    depth = t[:, 2]
    ok = depth > cam.near
    tz = np.where(ok, depth, 1.0)
    mean2d = np.stack([fx * t[:, 0] / tz + cx, fy * t[:, 1] / tz + cy], axis=1)
    sigma = covariance_from_batch(scales, rotations)
    wc = cam.world_to_cam
    m = np.einsum("ij,njk,lk->nil", wc, sigma, wc)
    n = means.shape[0]
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * t[:, 0] / tz**2
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * t[:, 1] / tz**2
    cov2d = np.einsum("nij,njk,nlk->nil", jac, m, jac)
    cov2d[:, 0, 0] += LOWPASS_FLOOR
    cov2d[:, 1, 1] += LOWPASS_FLOOR
    bad = ~ok
    mean2d[bad] = np.nan
    cov2d[bad] = np.nan
    return mean2d, cov2d, depth


def eval_sh_color(base_color, sh_rest, view_dir):
    """View-dependent color, spherical harmonics capped at degree 1.

    base_color is the degree-0 term; sh_rest holds 3 coefficients per basis
    function in (y, z, x) basis order, color-major layout [r..., g..., b...]
    per basis is NOT used: layout is (n_basis, 3) flattened row-major.
    Coefficients beyond the first 3 basis functions are carried but ignored.
    """
    base_color = np.asarray(base_color, dtype=np.float64)
    sh_rest = np.asarray(sh_rest, dtype=np.float64)
    v = np.asarray(view_dir, dtype=np.float64)
    color = base_color.copy()
    if sh_rest.size >= 9:
        f = sh_rest[:9].reshape(3, 3)
        color = color + SH_C1 * (-v[1] * f[0] + v[2] * f[1] - v[0] * f[2])
    return color
