"""Loss terms and their per-pixel upstream gradients.

Four terms compose the training objective: photometric (L1 + D-SSIM),
minimum-scale regularization, rendered-normal supervision, and the
confidence-weighted consistency between the rendered normal and the
pseudo-normal differentiated out of the rendered depth. Each op returns
its scalar value together with the gradient w.r.t. its direct input;
chaining those gradients back into Gaussian parameters is the gradients
module's job.

The confidence weight is deliberately treated as a constant per step:
letting gradients flow through it would reward degrading normal agreement
to shrink the weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import Camera
from .scene import Scene

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CONFIDENCE_FLOOR = 1e-30
CROSS_EPS = 1e-12


@dataclass
class LossWeights:
    """Weights of the total objective and the confidence sharpness."""
    lambda1: float = 1.0      # minimum-scale term
    lambda2: float = 0.01     # rendered-normal term
    lambda3: float = 0.015    # depth-normal consistency term
    gamma: float = 0.005      # confidence sharpness
    dssim_weight: float = 0.2

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if not 0.0 <= self.dssim_weight <= 1.0:
            raise ValueError("dssim_weight must be in [0, 1]")


@dataclass
class PseudoNormalFrame:
    """Per-pixel unit normal prior in the camera frame.

    normals: (H, W, 3), unit length and camera-facing (z < 0) on valid
    pixels; valid: (H, W) bool.
    """
    normals: np.ndarray
    valid: np.ndarray


def _gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_SSIM_RADIUS = (SSIM_WIN - 1) // 2
_K1 = _gaussian_kernel1d(SSIM_SIGMA, _SSIM_RADIUS)


def _filt(img: np.ndarray) -> np.ndarray:
    # separable 11x11 Gaussian, valid windows only: two zero-boundary 1-D
    # passes, then crop the border that touched the padding
    r = _SSIM_RADIUS
    f = correlate1d(img, _K1, axis=0, mode="constant")
    f = correlate1d(f, _K1, axis=1, mode="constant")
    return f[r:-r, r:-r]


def _filt_adjoint(g: np.ndarray) -> np.ndarray:
    # exact adjoint of _filt: zero-pad back to full size, then the same
    # two passes (the kernel is symmetric, so each pass is self-adjoint)
    r = _SSIM_RADIUS
    p = np.zeros((g.shape[0] + 2 * r, g.shape[1] + 2 * r))
    p[r:-r, r:-r] = g
    p = correlate1d(p, _K1, axis=0, mode="constant")
    p = correlate1d(p, _K1, axis=1, mode="constant")
    return p


def ssim(x: np.ndarray, y: np.ndarray):
    """Mean SSIM over valid windows plus its gradient w.r.t. x.

    11x11 Gaussian window, sigma 1.5, C1=(0.01)^2, C2=(0.03)^2 on [0,1]
    intensities, population covariance. Multichannel images are averaged
    over channels. Matches scikit-image's gaussian-weighted SSIM on the
    cropped interior.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    H, W, C = x.shape
    if H < SSIM_WIN or W < SSIM_WIN:
        raise ValueError("image smaller than the SSIM window")

    grad = np.zeros_like(x)
    total = 0.0
    hv, wv = H - SSIM_WIN + 1, W - SSIM_WIN + 1
    scale = 1.0 / (C * hv * wv)
    for c in range(C):
        xc, yc = x[..., c], y[..., c]
        ux, uy = _filt(xc), _filt(yc)
        uxx, uyy, uxy = _filt(xc * xc), _filt(yc * yc), _filt(xc * yc)
        vx = uxx - ux * ux
        vy = uyy - uy * uy
        vxy = uxy - ux * uy
        a1 = 2.0 * ux * uy + SSIM_C1
        a2 = 2.0 * vxy + SSIM_C2
        b1 = ux * ux + uy * uy + SSIM_C1
        b2 = vx + vy + SSIM_C2
        s = (a1 * a2) / (b1 * b2)
        total += s.sum() * scale

        d = b1 * b2
        ds_da1 = a2 / d
        ds_da2 = a1 / d
        ds_db1 = -s / b1
        ds_db2 = -s / b2
        ds_dux = 2.0 * uy * ds_da1 + 2.0 * ux * ds_db1 \
            - 2.0 * ux * ds_db2 - uy * 2.0 * ds_da2
        ds_duxx = ds_db2
        ds_duxy = 2.0 * ds_da2
        grad[..., c] = (_filt_adjoint(ds_dux * scale)
                        + 2.0 * xc * _filt_adjoint(ds_duxx * scale)
                        + yc * _filt_adjoint(ds_duxy * scale))
    return total, grad


def loss_rgb(rendered: np.ndarray, target: np.ndarray,
             dssim_weight: float = 0.2):
    """(1 - w) L1 + w (1 - SSIM)/2 with gradient w.r.t. the rendering."""
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = np.abs(diff).mean()
    grad = (1.0 - dssim_weight) * np.sign(diff) / diff.size
    value = (1.0 - dssim_weight) * l1
    if dssim_weight > 0.0:
        s, gs = ssim(rendered, target)
        value += dssim_weight * (1.0 - s) / 2.0
        grad = grad - dssim_weight / 2.0 * gs
    return value, grad


def loss_scale(scene: Scene):
    """Mean absolute minimum scale; gradient only on the argmin log-scale."""
    if len(scene) == 0:
        raise ValueError("empty scene")
    s = scene.scales
    k = np.argmin(s, axis=1)
    idx = np.arange(len(scene))
    mins = s[idx, k]
    value = float(np.abs(mins).mean())
    grad = np.zeros_like(scene.log_scales)
    # d|s_min|/d log s_min = s_min (scales are positive)
    grad[idx, k] = mins / len(scene)
    return value, grad


def loss_rendered_normal(n_hat: np.ndarray, frame: PseudoNormalFrame,
                         mask: np.ndarray):
    """Mean of |N_hat - N|_1 + (1 - N_hat . N) over masked valid pixels.

    n_hat must be unit length on masked pixels. Gradient is w.r.t. n_hat.
    """
    eff = mask & frame.valid
    grad = np.zeros_like(n_hat)
    m = int(eff.sum())
    if m == 0:
        return 0.0, grad
    nh = n_hat[eff]
    n = frame.normals[eff]
    diff = nh - n
    per = np.abs(diff).sum(axis=1) + (1.0 - np.einsum("pd,pd->p", nh, n))
    grad[eff] = (np.sign(diff) - n) / m
    return float(per.sum() / m), grad


def _backproject_dirs(cam: Camera) -> np.ndarray:
    """Unnormalized K^-1 (u+.5, v+.5, 1) directions per pixel, (H, W, 3)."""
    xs = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    ys = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy, np.ones_like(gx)], axis=-1)


def _axis_diffs(points: np.ndarray, mask: np.ndarray, axis: int):
    """Finite differences of back-projected points along one image axis.

    Central where both neighbors are masked, one-sided at mask borders.
    Returns (diff (H, W, 3), code (H, W)) with code 0 central, 1 forward,
    2 backward, 3 undefined.
    """
    plus = np.zeros_like(points)
    minus = np.zeros_like(points)
    has_plus = np.zeros_like(mask)
    has_minus = np.zeros_like(mask)
    if axis == 1:
        plus[:, :-1] = points[:, 1:]
        has_plus[:, :-1] = mask[:, 1:]
        minus[:, 1:] = points[:, :-1]
        has_minus[:, 1:] = mask[:, :-1]
    else:
        plus[:-1] = points[1:]
        has_plus[:-1] = mask[1:]
        minus[1:] = points[:-1]
        has_minus[1:] = mask[:-1]

    code = np.full(mask.shape, 3, dtype=np.int8)
    code[has_plus & ~has_minus] = 1
    code[~has_plus & has_minus] = 2
    code[has_plus & has_minus] = 0
    diff = np.zeros_like(points)
    c0 = code == 0
    c1 = code == 1
    c2 = code == 2
    diff[c0] = plus[c0] - minus[c0]
    diff[c1] = plus[c1] - points[c1]
    diff[c2] = points[c2] - minus[c2]
    return diff, code


def d_normal(depth: np.ndarray, cam: Camera, mask: np.ndarray):
    """Pseudo-normal of a depth image by cross-differencing back-projections.

    Each masked pixel is lifted to a camera-frame point depth * K^-1 u;
    the normal is normalize(vertical diff x horizontal diff), oriented
    camera-facing (z < 0). Pixels without a valid neighbor along either
    axis, or with a degenerate cross product, are dropped from the output
    validity mask.
    """
    dirs = _backproject_dirs(cam)
    points = depth[..., None] * dirs
    dv, cv = _axis_diffs(points, mask, axis=0)
    dh, ch = _axis_diffs(points, mask, axis=1)
    cross = np.cross(dv, dh)
    norm = np.linalg.norm(cross, axis=-1)
    valid = mask & (cv < 3) & (ch < 3) & (norm >= CROSS_EPS)
    flip = np.where(cross[..., 2] > 0.0, -1.0, 1.0)
    safe = np.where(valid, norm, 1.0)
    out = cross * (flip / safe)[..., None]
    out[~valid] = 0.0
    return out, valid


def d_normal_backward(depth: np.ndarray, cam: Camera, mask: np.ndarray,
                      upstream: np.ndarray) -> np.ndarray:
    """Chain per-pixel pseudo-normal gradients back to the depth image.

    upstream: (H, W, 3) gradient w.r.t. the oriented unit pseudo-normal;
    must be zero outside d_normal's validity mask. Replays the forward
    branch decisions exactly.
    """
    dirs = _backproject_dirs(cam)
    points = depth[..., None] * dirs
    dv, cv = _axis_diffs(points, mask, axis=0)
    dh, ch = _axis_diffs(points, mask, axis=1)
    cross = np.cross(dv, dh)
    norm = np.linalg.norm(cross, axis=-1)
    valid = mask & (cv < 3) & (ch < 3) & (norm >= CROSS_EPS)

    flip = np.where(cross[..., 2] > 0.0, -1.0, 1.0)
    safe = np.where(valid, norm, 1.0)
    unit = cross * (flip / safe)[..., None]
    # d(normalize)/dcross with the orientation sign folded in
    # n = flip * c/|c|; dn/dc = flip (I - cc^T/|c|^2)/|c|, and the unit
    # cross c/|c| = flip * n, whose sign squares away in the projector
    g = upstream * valid[..., None]
    g_cross = (flip / safe)[..., None] * (
        g - unit * np.einsum("hwd,hwd->hw", g, unit)[..., None])

    g_dv = np.cross(dh, g_cross)
    g_dh = np.cross(g_cross, dv)

    g_points = np.zeros_like(points)
    for axis, g_d, code in ((0, g_dv, cv), (1, g_dh, ch)):
        c0 = code == 0
        c1 = code == 1
        c2 = code == 2
        gp = np.zeros_like(points)   # toward the + neighbor
        gm = np.zeros_like(points)   # toward the - neighbor
        gp[c0] = g_d[c0]
        gm[c0] = -g_d[c0]
        gp[c1] = g_d[c1]
        g_points[c1] -= g_d[c1]
        g_points[c2] += g_d[c2]
        gm[c2] = -g_d[c2]
        if axis == 1:
            g_points[:, 1:] += gp[:, :-1]
            g_points[:, :-1] += gm[:, 1:]
        else:
            g_points[1:] += gp[:-1]
            g_points[:-1] += gm[1:]

    return np.einsum("hwd,hwd->hw", g_points, dirs)


def confidence(n_hat: np.ndarray, prior: np.ndarray, gamma: float) -> np.ndarray:
    """Per-pixel weight exp((N_hat . N - 1)/gamma), floored at 1e-30.

    Constant for gradient purposes; both inputs unit length.
    """
    dot = np.einsum("...d,...d->...", n_hat, prior)
    return np.maximum(np.exp((dot - 1.0) / gamma), CONFIDENCE_FLOOR)


def loss_d_normal(depth: np.ndarray, n_hat: np.ndarray,
                  frame: PseudoNormalFrame, cam: Camera, mask: np.ndarray,
                  gamma: float, confidence_source: str = "rendered",
                  w_override: np.ndarray = None):
    """Confidence-weighted consistency of the depth pseudo-normal with the prior.

    Returns (value, gradient w.r.t. the depth image, weight map, pixel mask).
    confidence_source picks the normal the weight is computed from:
    "rendered" (the text reading) or "depth" (the symbol reading).
    w_override substitutes a precomputed weight map; the finite-difference
    oracle uses it to hold w at the base parameters, mirroring the
    stop-gradient the analytic backward applies.
    """
    nd, nd_valid = d_normal(depth, cam, mask)
    eff = mask & frame.valid & nd_valid
    m = int(eff.sum())
    if m == 0:
        return 0.0, np.zeros_like(depth), np.zeros(depth.shape), eff

    if w_override is not None:
        w = w_override
    elif confidence_source == "rendered":
        w = confidence(n_hat, frame.normals, gamma)
    elif confidence_source == "depth":
        w = confidence(nd, frame.normals, gamma)
    else:
        raise ValueError(f"unknown confidence source {confidence_source!r}")
    w = np.where(eff, w, 0.0)

    n = frame.normals
    diff = nd - n
    per = np.abs(diff).sum(axis=-1) + (1.0 - np.einsum("hwd,hwd->hw", nd, n))
    value = float((w * per)[eff].sum() / m)

    g_nd = (np.sign(diff) - n) * (w / m)[..., None]
    g_nd[~eff] = 0.0
    d_depth = d_normal_backward(depth, cam, mask, g_nd)
    return value, d_depth, w, eff


def loss_total(l_rgb: float, l_s: float, l_n: float, l_dn: float,
               weights: LossWeights):
    """Weighted objective; returns the scalar and a per-term breakdown."""
    total = (l_rgb + weights.lambda1 * l_s + weights.lambda2 * l_n
             + weights.lambda3 * l_dn)
    return total, {"rgb": l_rgb, "scale": l_s, "normal": l_n,
                   "d_normal": l_dn, "total": total}
