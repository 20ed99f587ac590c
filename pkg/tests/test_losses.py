"""Loss terms: SSIM against a windowed oracle, depth pseudo-normals,
confidence weighting, and the weighted total."""

import numpy as np
import pytest

from helpers import axial_camera
from splatsurf.losses import (LossWeights, PseudoNormalFrame, confidence,
                              d_normal, loss_d_normal, loss_rendered_normal,
                              loss_rgb, loss_scale, loss_total, ssim)
from splatsurf.scene import Scene


# --- brute-force SSIM oracle ----------------------------------------------

def _ssim_oracle(x, y):
    """Mean SSIM by explicit 11x11 windows, built from scratch."""
    i = np.arange(-5, 6, dtype=np.float64)
    k1 = np.exp(-0.5 * (i / 1.5) ** 2)
    w = np.outer(k1, k1)
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    h, wd, nc = x.shape
    vals = []
    for c in range(nc):
        for r in range(h - 10):
            for q in range(wd - 10):
                xa = x[r:r + 11, q:q + 11, c]
                ya = y[r:r + 11, q:q + 11, c]
                ux, uy = (w * xa).sum(), (w * ya).sum()
                vx = (w * xa * xa).sum() - ux * ux
                vy = (w * ya * ya).sum() - uy * uy
                vxy = (w * xa * ya).sum() - ux * uy
                vals.append((2 * ux * uy + c1) * (2 * vxy + c2)
                            / ((ux * ux + uy * uy + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_window_oracle():
    rng = np.random.default_rng(30)
    x = rng.uniform(0.0, 1.0, (16, 16, 3))
    y = np.clip(x + rng.normal(0.0, 0.1, x.shape), 0.0, 1.0)
    s, _ = ssim(x, y)
    assert abs(s - _ssim_oracle(x, y)) < 1e-12


def test_ssim_checkerboard_vs_inverse():
    g = np.indices((15, 15)).sum(axis=0) % 2
    x = g.astype(np.float64)
    s, _ = ssim(x, 1.0 - x)
    assert abs(s - _ssim_oracle(x, 1.0 - x)) < 1e-12
    assert s < 0.0   # anticorrelated structure


def test_ssim_identical_images():
    rng = np.random.default_rng(31)
    x = rng.uniform(0.0, 1.0, (12, 13))
    s, g = ssim(x, x.copy())
    assert abs(s - 1.0) < 1e-12
    assert np.abs(g).max() < 1e-12


def test_ssim_gradient_finite_difference():
    rng = np.random.default_rng(32)
    x = rng.uniform(0.2, 0.8, (13, 12))
    y = rng.uniform(0.2, 0.8, (13, 12))
    _, g = ssim(x, y)
    h = 1e-6
    for v, u in ((0, 0), (6, 5), (12, 11), (3, 9)):
        xp, xm = x.copy(), x.copy()
        xp[v, u] += h
        xm[v, u] -= h
        fd = (ssim(xp, y)[0] - ssim(xm, y)[0]) / (2 * h)
        assert abs(fd - g[v, u]) < 1e-6 * max(1.0, abs(fd))


def test_ssim_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# --- photometric loss -----------------------------------------------------

def test_loss_rgb_pure_l1():
    x = np.full((12, 12, 3), 0.75)
    y = np.full((12, 12, 3), 0.25)
    value, grad = loss_rgb(x, y, dssim_weight=0.0)
    assert abs(value - 0.5) < 1e-15
    assert np.allclose(grad, 1.0 / x.size, atol=1e-18)


def test_loss_rgb_blend_matches_parts():
    rng = np.random.default_rng(33)
    x = rng.uniform(0.0, 1.0, (14, 14, 3))
    y = rng.uniform(0.0, 1.0, (14, 14, 3))
    value, _ = loss_rgb(x, y)
    l1 = np.abs(x - y).mean()
    s = _ssim_oracle(x, y)
    assert abs(value - (0.8 * l1 + 0.2 * (1.0 - s) / 2.0)) < 1e-12


def test_loss_rgb_gradient_finite_difference():
    rng = np.random.default_rng(34)
    x = rng.uniform(0.1, 0.9, (12, 12, 3))
    y = rng.uniform(0.1, 0.9, (12, 12, 3))
    _, g = loss_rgb(x, y)
    h = 1e-6
    for v, u, c in ((2, 3, 0), (8, 10, 1), (11, 0, 2)):
        xp, xm = x.copy(), x.copy()
        xp[v, u, c] += h
        xm[v, u, c] -= h
        fd = (loss_rgb(xp, y)[0] - loss_rgb(xm, y)[0]) / (2 * h)
        assert abs(fd - g[v, u, c]) < 1e-6 * max(1.0, abs(fd))


# --- flatness loss ---------------------------------------------------------

def _scene_with_log_scales(log_scales):
    ls = np.asarray(log_scales, dtype=np.float64)
    n = len(ls)
    return Scene(positions=np.zeros((n, 3)),
                 quats=np.tile([1.0, 0, 0, 0], (n, 1)),
                 log_scales=ls,
                 opacity_logits=np.zeros(n),
                 colors=np.zeros((n, 12)),
                 cuboid=np.array([[-1.0, -1, -1], [1.0, 1, 1]]))


def test_loss_scale_known_values():
    scene = _scene_with_log_scales([[0.0, -1.0, -2.0], [1.0, 3.0, 0.5]])
    value, grad = loss_scale(scene)
    expect = (np.exp(-2.0) + np.exp(0.5)) / 2.0
    assert abs(value - expect) < 1e-15
    ref = np.zeros((2, 3))
    ref[0, 2] = np.exp(-2.0) / 2.0
    ref[1, 2] = np.exp(0.5) / 2.0
    assert np.allclose(grad, ref, atol=1e-15)


def test_loss_scale_flat_splat_vanishes():
    scene = _scene_with_log_scales([[0.0, 0.0, -700.0]])
    value, grad = loss_scale(scene)
    assert value < 1e-250
    assert grad[0, 0] == 0.0 and grad[0, 1] == 0.0


def test_loss_scale_empty_scene_raises():
    with pytest.raises(ValueError):
        loss_scale(_scene_with_log_scales(np.zeros((0, 3))))


# --- rendered-normal loss ---------------------------------------------------

def test_loss_rendered_normal_at_minimum():
    n = np.zeros((6, 6, 3))
    n[..., 2] = -1.0
    frame = PseudoNormalFrame(normals=n.copy(), valid=np.ones((6, 6), bool))
    mask = np.zeros((6, 6), bool)
    mask[2:4, 2:5] = True
    value, grad = loss_rendered_normal(n, frame, mask)
    assert value == 0.0
    # euclidean gradient at the minimum is radial: (sign(0) - n) / m
    assert np.allclose(grad[mask], [0.0, 0.0, 1.0 / 6.0], atol=1e-15)
    assert not grad[~mask].any()


def test_loss_rendered_normal_hand_value():
    n_hat = np.zeros((1, 2, 3))
    n_hat[0, 0] = [0.0, 0.0, -1.0]
    n_hat[0, 1] = [1.0, 0.0, 0.0]
    prior = np.zeros((1, 2, 3))
    prior[:] = [0.0, 0.0, -1.0]
    frame = PseudoNormalFrame(normals=prior, valid=np.ones((1, 2), bool))
    value, grad = loss_rendered_normal(n_hat, frame, np.ones((1, 2), bool))
    # pixel 0: 0; pixel 1: |(1,0,1)|_1 + (1 - 0) = 3; mean 1.5
    assert abs(value - 1.5) < 1e-15
    assert np.allclose(grad[0, 1], [0.5, 0.0, 1.0], atol=1e-15)


def test_loss_rendered_normal_empty_mask():
    n = np.zeros((4, 4, 3))
    frame = PseudoNormalFrame(normals=n, valid=np.zeros((4, 4), bool))
    value, grad = loss_rendered_normal(n, frame, np.ones((4, 4), bool))
    assert value == 0.0 and not grad.any()


# --- depth pseudo-normal ----------------------------------------------------

def test_d_normal_constant_depth():
    cam = axial_camera(8)
    out, valid = d_normal(np.full((8, 8), 1.7), cam, np.ones((8, 8), bool))
    assert valid.all()   # borders fall back to one-sided differences
    assert np.array_equal(out, np.broadcast_to([0.0, 0.0, -1.0], (8, 8, 3)))


def test_d_normal_constant_depth_half_mask():
    cam = axial_camera(8)
    mask = np.zeros((8, 8), bool)
    mask[4:] = True
    out, valid = d_normal(np.full((8, 8), 2.0), cam, mask)
    assert (valid == mask).all()
    assert np.array_equal(out[valid],
                          np.broadcast_to([0.0, 0.0, -1.0], (32, 3)))


def _plane_depth(cam, normal, point):
    """Exact per-pixel depth of an unbounded plane in the camera frame."""
    xs = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    ys = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    gx, gy = np.meshgrid(xs, ys)
    dirs = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    return np.dot(point, normal) / (dirs @ normal)


def test_d_normal_tilted_plane_exact():
    cam = axial_camera(16)
    n = np.array([0.0, -1.0, -1.0]) / np.sqrt(2.0)
    depth = _plane_depth(cam, n, np.array([0.0, 0.0, 2.0]))
    out, valid = d_normal(depth, cam, np.ones((16, 16), bool))
    assert valid.all()
    assert np.abs(out - n).max() < 1e-9


def test_d_normal_degenerate_cross_dropped():
    # micro-baseline differences: cross norm ~1e-14 falls under the guard
    cam = axial_camera(8, fx=1e4)
    out, valid = d_normal(np.full((8, 8), 1e-3), cam, np.ones((8, 8), bool))
    assert not valid.any()
    assert not out.any()


def test_d_normal_isolated_pixels_dropped():
    cam = axial_camera(8)
    depth = np.full((8, 8), 2.0)
    single = np.zeros((8, 8), bool)
    single[3, 3] = True
    _, valid = d_normal(depth, cam, single)
    assert not valid.any()
    row = np.zeros((8, 8), bool)
    row[3] = True       # no vertical neighbors anywhere
    _, valid = d_normal(depth, cam, row)
    assert not valid.any()


# --- confidence and the consistency loss ------------------------------------

def test_confidence_values():
    n = np.array([[[0.0, 0.0, -1.0]]])
    assert confidence(n, n, 0.005)[0, 0] == 1.0
    tilted = np.array([[[0.0, np.sin(0.2), -np.cos(0.2)]]])
    w = confidence(n, tilted, 0.05)
    assert abs(w[0, 0] - np.exp((np.cos(0.2) - 1.0) / 0.05)) < 1e-15
    assert confidence(n, -n, 0.005)[0, 0] == 1e-30   # floored underflow


def test_loss_d_normal_at_minimum():
    cam = axial_camera(16)
    n = np.array([0.0, -1.0, -1.0]) / np.sqrt(2.0)
    depth = _plane_depth(cam, n, np.array([0.0, 0.0, 2.0]))
    mask = np.ones((16, 16), bool)
    nd, ndv = d_normal(depth, cam, mask)
    frame = PseudoNormalFrame(normals=nd.copy(), valid=ndv.copy())
    value, d_depth, w, eff = loss_d_normal(depth, nd, frame, cam, mask,
                                           gamma=0.005)
    assert eff.all()
    assert w.min() > 1.0 - 1e-12
    assert abs(value) < 1e-12
    assert np.abs(d_depth).max() < 1e-12


def test_loss_d_normal_depth_gradient_finite_difference():
    rng = np.random.default_rng(35)
    cam = axial_camera(12)
    gy, gx = np.mgrid[0:12, 0:12]
    depth = 2.0 + 0.3 * np.sin(gx * 0.7) + 0.2 * np.cos(gy * 0.9)
    mask = np.ones((12, 12), bool)
    prior = rng.normal(size=(12, 12, 3))
    prior[..., 2] = -np.abs(prior[..., 2]) - 1.0
    prior /= np.linalg.norm(prior, axis=-1, keepdims=True)
    frame = PseudoNormalFrame(normals=prior, valid=mask.copy())
    n_hat = np.zeros((12, 12, 3))
    n_hat[..., 2] = -1.0

    value, d_depth, _, _ = loss_d_normal(depth, n_hat, frame, cam, mask,
                                         gamma=0.5)
    assert value > 0.0
    h = 1e-6
    for v, u in ((0, 0), (5, 6), (11, 11), (3, 8), (7, 2)):
        dp, dm = depth.copy(), depth.copy()
        dp[v, u] += h
        dm[v, u] -= h
        fp = loss_d_normal(dp, n_hat, frame, cam, mask, gamma=0.5)[0]
        fm = loss_d_normal(dm, n_hat, frame, cam, mask, gamma=0.5)[0]
        fd = (fp - fm) / (2 * h)
        assert abs(fd - d_depth[v, u]) < 1e-5 * max(1.0, abs(fd))


def test_loss_d_normal_downweights_corrupted_prior():
    cam = axial_camera(16)
    n = np.array([0.0, -np.sin(0.5), -np.cos(0.5)])
    depth = _plane_depth(cam, n, np.array([0.0, 0.0, 2.0]))
    mask = np.ones((16, 16), bool)
    nd, _ = d_normal(depth, cam, mask)

    # rotate the prior away from the true normal by a fixed angle
    def tilt(vecs, angle):
        axis = np.cross(vecs, [1.0, 0.0, 0.0])
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        return np.cos(angle) * vecs + np.sin(angle) * axis

    corrupted = np.zeros((16, 16), bool)
    corrupted[:8] = True
    prior = np.where(corrupted[..., None],
                     tilt(nd, np.arccos(0.9)),       # dot exactly 0.9
                     tilt(nd, np.deg2rad(0.5)))      # mild prior noise
    frame = PseudoNormalFrame(normals=prior, valid=mask.copy())

    _, _, w, eff = loss_d_normal(depth, nd, frame, cam, mask, gamma=0.005)
    per = np.abs(nd - prior).sum(axis=-1) + (1.0 - np.sum(nd * prior, -1))
    contrib = w * per
    assert w[corrupted & eff].max() < 1e-8          # ~exp(-20)
    assert w[~corrupted & eff].min() > 0.98
    ratio = contrib[corrupted & eff].sum() / contrib[~corrupted & eff].sum()
    assert ratio < 1e-6


def test_loss_d_normal_empty_mask():
    cam = axial_camera(12)
    depth = np.full((12, 12), 2.0)
    frame = PseudoNormalFrame(normals=np.zeros((12, 12, 3)),
                              valid=np.zeros((12, 12), bool))
    value, d_depth, w, eff = loss_d_normal(
        depth, np.zeros((12, 12, 3)), frame, cam, np.ones((12, 12), bool),
        gamma=0.005)
    assert value == 0.0 and not d_depth.any() and not eff.any()


# --- total -------------------------------------------------------------------

def test_loss_total_weighting_and_keys():
    total, values = loss_total(0.5, 0.3, 0.2, 0.1, LossWeights())
    assert abs(total - (0.5 + 1.0 * 0.3 + 0.01 * 0.2 + 0.015 * 0.1)) < 1e-15
    assert set(values) == {"rgb", "scale", "normal", "d_normal", "total"}
    assert values["total"] == total


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda2=-0.1)
    with pytest.raises(ValueError):
        LossWeights(gamma=0.0)
    with pytest.raises(ValueError):
        LossWeights(dssim_weight=1.5)
