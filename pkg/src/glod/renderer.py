"""Deterministic CPU splatter: front-to-back alpha compositing of projected
Gaussians, an analytic backward pass for every attribute, and the L1+SSIM
training loss.

Computation is float64 regardless of input dtype; the depth sort breaks
ties by input index so identical inputs give bit-identical images.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import SH_C1, AttributeArrays, Camera, quat_to_rotmat

ALPHA_CLAMP = 0.99
TRANSMITTANCE_EPS = 1e-4
FOOTPRINT_SIGMA = 3.0
Q_CUTOFF = 2.0 * (FOOTPRINT_SIGMA + 1.0) ** 2

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class InvalidInputError(ValueError):
    pass


@dataclass
class GaussianGradients:
    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    base_colors: np.ndarray
    sh_rest: np.ndarray

    @staticmethod
    def zeros(n: int, sh_cols: int) -> "GaussianGradients":
        return GaussianGradients(
            means=np.zeros((n, 3)), scales=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)), opacities=np.zeros(n),
            base_colors=np.zeros((n, 3)), sh_rest=np.zeros((n, sh_cols)))


@dataclass
class _Splat:
    idx: int
    ys: slice
    xs: slice
    alpha: np.ndarray        # effective alpha (post clamp, mask)
    t_front: np.ndarray
    color: np.ndarray


@dataclass
class RenderContext:
    attrs: AttributeArrays
    cam: Camera
    image: np.ndarray
    splats: list


def _check_finite(attrs: AttributeArrays):
    for name, arr in attrs.arrays():
        bad = ~np.isfinite(np.asarray(arr, dtype=np.float64))
        if bad.any():
            i = int(np.argwhere(bad)[0][0])
            raise InvalidInputError(f"non-finite {name} on Gaussian {i}")


def _projection(attrs: AttributeArrays, cam: Camera):
    """Per-Gaussian camera-space position, 2D mean/covariance and color.

    Kept local to the renderer because the backward pass needs every
    intermediate (J, M, view direction) that the public projection hides.
    """
    means = np.asarray(attrs.means, dtype=np.float64)
    wc = cam.world_to_cam
    t = (means - cam.position) @ wc.T
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    depth = t[:, 2]
    ok = depth > cam.near
    tz = np.where(ok, depth, 1.0)
    mean2d = np.stack([fx * t[:, 0] / tz + cx, fy * t[:, 1] / tz + cy], axis=1)
    from .core import LOWPASS_FLOOR, covariance_from_batch

    sigma = covariance_from_batch(attrs.scales, attrs.rotations)
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

    rel = means - cam.position
    rng = np.linalg.norm(rel, axis=1, keepdims=True)
    vdir = rel / np.where(rng > 0, rng, 1.0)
    colors = np.asarray(attrs.base_colors, dtype=np.float64).copy()
    sh = np.asarray(attrs.sh_rest, dtype=np.float64)
    if sh.shape[1] >= 9:
        f = sh[:, :9].reshape(n, 3, 3)
        colors = colors + SH_C1 * (-vdir[:, 1:2] * f[:, 0]
                                   + vdir[:, 2:3] * f[:, 1]
                                   - vdir[:, 0:1] * f[:, 2])
    return t, ok, mean2d, m, jac, cov2d, vdir, rng[:, 0], colors, sigma


def render_forward(attrs: AttributeArrays, cam: Camera) -> RenderContext:
    _check_finite(attrs)
    w, h = cam.resolution
    image = np.zeros((h, w, 3))
    n = len(attrs)
    if n == 0:
        return RenderContext(attrs=attrs, cam=cam, image=image, splats=[])
    t, ok, mean2d, _, _, cov2d, _, _, colors, _ = _projection(attrs, cam)
    depth = t[:, 2]
    vis = np.nonzero(ok)[0]
    order = vis[np.lexsort((vis, depth[vis]))]
    transmittance = np.ones((h, w))
    opac = np.asarray(attrs.opacities, dtype=np.float64)
    splats = []
    for gi in order:
        c = cov2d[gi]
        det = c[0, 0] * c[1, 1] - c[0, 1] ** 2
        if det <= 0:
            continue
        # conservative footprint from the largest eigenvalue
        half = (c[0, 0] + c[1, 1]) / 2
        lmax = half + np.sqrt(max(half * half - det, 0.0))
        rad = FOOTPRINT_SIGMA * np.sqrt(lmax)
        x0 = max(int(np.floor(mean2d[gi, 0] - rad)), 0)
        x1 = min(int(np.ceil(mean2d[gi, 0] + rad)) + 1, w)
        y0 = max(int(np.floor(mean2d[gi, 1] - rad)), 0)
        y1 = min(int(np.ceil(mean2d[gi, 1] + rad)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        a = c[1, 1] / det
        b = -c[0, 1] / det
        cc = c[0, 0] / det
        dx = np.arange(x0, x1) - mean2d[gi, 0]
        dy = np.arange(y0, y1) - mean2d[gi, 1]
        q = (a * dx[None, :] ** 2 + cc * dy[:, None] ** 2
             + 2 * b * dy[:, None] * dx[None, :])
        g = np.exp(-0.5 * q)
        alpha = np.minimum(opac[gi] * g, ALPHA_CLAMP)
        alpha[q > Q_CUTOFF] = 0.0
        tf = transmittance[y0:y1, x0:x1]
        alpha = np.where(tf > TRANSMITTANCE_EPS, alpha, 0.0)
        if not alpha.any():
            continue
        tf = tf.copy()  # snapshot: the slice below is a view we overwrite
        weight = alpha * tf
        image[y0:y1, x0:x1] += weight[:, :, None] * colors[gi]
        transmittance[y0:y1, x0:x1] = tf * (1.0 - alpha)
        splats.append(_Splat(idx=int(gi), ys=slice(y0, y1), xs=slice(x0, x1),
                             alpha=alpha, t_front=tf, color=colors[gi]))
    return RenderContext(attrs=attrs, cam=cam, image=image, splats=splats)


def render(attrs: AttributeArrays, cam: Camera) -> np.ndarray:
    """Composited RGB image (h, w, 3) float64, linear, unclamped."""
    return render_forward(attrs, cam).image


_DR_DQ = None


def _dR_dq():
    """d(rotation matrix)/d(unit quaternion) builder, cached closures."""
    def dw(w, x, y, z):
        return 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=float)

    def dx_(w, x, y, z):
        return 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
                            dtype=float)

    def dy_(w, x, y, z):
        return 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
                            dtype=float)

    def dz_(w, x, y, z):
        return 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
                            dtype=float)

    return (dw, dx_, dy_, dz_)


def backward(ctx: RenderContext, dl_dimage: np.ndarray) -> GaussianGradients:
    """Analytic gradients of the compositing sum for every attribute of
    every rendered Gaussian."""
    attrs = ctx.attrs
    cam = ctx.cam
    w, h = cam.resolution
    if dl_dimage.shape != (h, w, 3):
        raise InvalidInputError("upstream gradient does not match image size")
    n = len(attrs)
    grads = GaussianGradients.zeros(n, attrs.sh_rest.shape[1])
    if n == 0 or not ctx.splats:
        return grads
    (t, _, mean2d, m3d, jac, cov2d, vdir, rng, _, _) = _projection(attrs, cam)
    wc = cam.world_to_cam
    fx, fy = cam.focal
    opac = np.asarray(attrs.opacities, dtype=np.float64)
    quats = np.asarray(attrs.rotations, dtype=np.float64)
    scales = np.asarray(attrs.scales, dtype=np.float64)
    sh = np.asarray(attrs.sh_rest, dtype=np.float64)
    rot = quat_to_rotmat(quats)
    dq_funcs = _dR_dq()

    rear = np.zeros((h, w, 3))
    for sp in reversed(ctx.splats):
        gi = sp.idx
        ys, xs = sp.ys, sp.xs
        g_up = dl_dimage[ys, xs]
        alpha = sp.alpha
        tf = sp.t_front
        contrib = alpha > 0.0
        weight = alpha * tf

        # color gradient and the alpha gradient via the rear accumulator
        dl_dcolor = np.einsum("yx,yxc->c", weight, g_up)
        dl_dalpha = (np.einsum("yxc,c->yx", g_up, sp.color) * tf
                     - np.einsum("yxc,yxc->yx", g_up, rear[ys, xs])
                     / (1.0 - alpha))
        dl_dalpha = np.where(contrib, dl_dalpha, 0.0)
        rear[ys, xs] += weight[:, :, None] * sp.color

        c = cov2d[gi]
        det = c[0, 0] * c[1, 1] - c[0, 1] ** 2
        a = c[1, 1] / det
        b = -c[0, 1] / det
        cc = c[0, 0] / det
        dx = np.arange(xs.start, xs.stop) - mean2d[gi, 0]
        dy = np.arange(ys.start, ys.stop) - mean2d[gi, 1]
        q = (a * dx[None, :] ** 2 + cc * dy[:, None] ** 2
             + 2 * b * dy[:, None] * dx[None, :])
        gauss = np.exp(-0.5 * q)
        live = contrib & (opac[gi] * gauss < ALPHA_CLAMP)

        grads.opacities[gi] += float(np.sum(gauss * dl_dalpha * live))
        dl_dq = -0.5 * opac[gi] * gauss * dl_dalpha * live

        dxg = dx[None, :] * np.ones_like(dy)[:, None]
        dyg = dy[:, None] * np.ones_like(dx)[None, :]
        dl_dmx = -np.sum(dl_dq * (2 * a * dxg + 2 * b * dyg))
        dl_dmy = -np.sum(dl_dq * (2 * b * dxg + 2 * cc * dyg))
        daa = np.sum(dl_dq * dxg * dxg)
        dbb = np.sum(dl_dq * dxg * dyg)
        dcc_ = np.sum(dl_dq * dyg * dyg)
        dl_dconic = np.array([[daa, dbb], [dbb, dcc_]])
        conic = np.array([[a, b], [b, cc]])
        dl_dcov2d = -conic @ dl_dconic @ conic

        # cov2d = J M J^T (+ const floor)
        jg = jac[gi]
        mg = m3d[gi]
        dl_dm = jg.T @ dl_dcov2d @ jg
        dl_dsigma = wc.T @ dl_dm @ wc
        dl_dj = (dl_dcov2d + dl_dcov2d.T) @ jg @ mg

        tx, ty, tz = t[gi]
        dl_dt = np.zeros(3)
        dl_dt[0] += dl_dmx * fx / tz + dl_dj[0, 2] * (-fx / tz**2)
        dl_dt[1] += dl_dmy * fy / tz + dl_dj[1, 2] * (-fy / tz**2)
        dl_dt[2] += (dl_dmx * (-fx * tx / tz**2) + dl_dmy * (-fy * ty / tz**2)
                     + dl_dj[0, 0] * (-fx / tz**2) + dl_dj[1, 1] * (-fy / tz**2)
                     + dl_dj[0, 2] * (2 * fx * tx / tz**3)
                     + dl_dj[1, 2] * (2 * fy * ty / tz**3))
        dl_dmean = wc.T @ dl_dt

        # color path: base, SH coefficients and the view-direction term
        grads.base_colors[gi] += dl_dcolor
        v = vdir[gi]
        if sh.shape[1] >= 9:
            f = sh[gi, :9].reshape(3, 3)
            grads.sh_rest[gi, 0:3] += -SH_C1 * v[1] * dl_dcolor
            grads.sh_rest[gi, 3:6] += SH_C1 * v[2] * dl_dcolor
            grads.sh_rest[gi, 6:9] += -SH_C1 * v[0] * dl_dcolor
            dl_dv = SH_C1 * np.array([-f[2] @ dl_dcolor,
                                      -f[0] @ dl_dcolor,
                                      f[1] @ dl_dcolor])
            dl_dmean += (dl_dv - v * (v @ dl_dv)) / rng[gi]
        grads.means[gi] += dl_dmean

        # covariance -> scale and (normalized) quaternion
        sym = 0.5 * (dl_dsigma + dl_dsigma.T)
        r = rot[gi]
        s = scales[gi]
        grads.scales[gi] += 2 * s * np.einsum("ik,ij,jk->k", r, sym, r)
        dl_dr = 2 * sym @ r @ np.diag(s**2)
        qn = quats[gi] / np.linalg.norm(quats[gi])
        dl_dqn = np.array([np.sum(dl_dr * fn(*qn)) for fn in dq_funcs])
        norm = np.linalg.norm(quats[gi])
        grads.rotations[gi] += (dl_dqn - qn * (qn @ dl_dqn)) / norm
    return grads


def _gauss_kernel():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _filt(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")
    return correlate1d(out, _KERNEL, axis=1, mode="constant")


def loss(rendered: np.ndarray, target: np.ndarray, lam: float = 0.2):
    """(1 - lam) * L1 + lam * (1 - SSIM); returns (value, d/d rendered)."""
    if rendered.shape != target.shape:
        raise InvalidInputError("image dimensions differ")
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError("lambda must lie in [0, 1]")
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    npix = x.size
    diff = x - y
    l1 = float(np.abs(diff).mean())
    dl1 = np.sign(diff) / npix

    mu_x = _filt(x)
    mu_y = _filt(y)
    ux2 = _filt(x * x)
    uxy = _filt(x * y)
    var_x = ux2 - mu_x**2
    var_y = _filt(y * y) - mu_y**2
    cov = uxy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    mssim = float(s.mean())

    g = 1.0 / npix
    ds_dmu = (2 * mu_y * a2) / (b1 * b2) - s * 2 * mu_x / b1
    ds_dvarx = -s / b2
    ds_dcov = 2 * a1 / (b1 * b2)
    d_ux2 = ds_dvarx * g
    d_uxy = ds_dcov * g
    d_mux = (ds_dmu - 2 * mu_x * ds_dvarx - mu_y * ds_dcov) * g
    dmssim = _filt(d_mux) + 2 * x * _filt(d_ux2) + y * _filt(d_uxy)

    value = (1 - lam) * l1 + lam * (1 - mssim)
    grad = (1 - lam) * dl1 - lam * dmssim
    return value, grad


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(rendered, dtype=np.float64)
                         - np.asarray(target, dtype=np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * np.log10(mse)
