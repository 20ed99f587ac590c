"""Analytic parameter gradients against the central-difference oracle."""

import numpy as np
import pytest

from helpers import axial_camera, flat_scene
from splatsurf.gradients import (InvisibleGaussianError, PARAM_CLASSES,
                                 PARAM_DIMS, PixelGrads, backward,
                                 compute_losses, finite_diff_oracle,
                                 gradcheck, loss_gradients, perturb_scene,
                                 position_gradient_direction_stats,
                                 random_direction_probe_problem,
                                 random_gradcheck_problem)
from splatsurf.losses import LossWeights, PseudoNormalFrame
from splatsurf.rasterizer import rasterize


def test_perturb_scene_only_touches_one_coordinate():
    rng = np.random.default_rng(40)
    scene, _, _, _ = random_gradcheck_problem(rng)
    out = perturb_scene(scene, "quat", 2, 1, 0.25)
    assert out.quats[2, 1] == scene.quats[2, 1] + 0.25
    out.quats[2, 1] = scene.quats[2, 1]
    for field in ("positions", "quats", "log_scales", "opacity_logits",
                  "colors"):
        assert np.array_equal(getattr(out, field), getattr(scene, field))


def test_finite_diff_oracle_stepsize_guard():
    rng = np.random.default_rng(41)
    scene, _, _, _ = random_gradcheck_problem(rng)
    fn = lambda s: float(s.positions[0, 0] ** 2)
    with pytest.raises(ValueError):
        finite_diff_oracle(fn, scene, "position", 0, 0, 1e-7)
    with pytest.raises(ValueError):
        finite_diff_oracle(fn, scene, "position", 0, 0, 1e-2)
    fd = finite_diff_oracle(fn, scene, "position", 0, 0, 1e-5)
    assert abs(fd - 2.0 * scene.positions[0, 0]) < 1e-9


def test_backward_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(42)
    scene, cam, _, _ = random_gradcheck_problem(rng)
    buf = rasterize(scene, cam)
    grads = backward(scene, cam, buf, PixelGrads.zeros(cam.height, cam.width))
    for cls in PARAM_CLASSES:
        assert not grads.by_class(cls).any()


def test_total_objective_matches_finite_differences():
    # freeze the confidence map, then every parameter class must agree
    # with the oracle on the full objective
    rng = np.random.default_rng(43)
    scene, cam, target, frame = random_gradcheck_problem(rng)
    weights = LossWeights()
    w0 = compute_losses(scene, cam, target, frame, weights).w_map
    _, grads, _ = loss_gradients(scene, cam, target, frame, weights,
                                 w_override=w0)

    def total(s):
        return compute_losses(s, cam, target, frame, weights,
                              w_override=w0).values["total"]

    checked = 0
    for param in PARAM_CLASSES:
        g = grads.by_class(param)
        for coord in range(min(PARAM_DIMS[param], 3)):
            idx = (1 + coord) % len(scene)
            fd = finite_diff_oracle(total, scene, param, idx, coord, 1e-5)
            an = g[idx] if param == "opacity" else g[idx, coord]
            if abs(an) < 1e-10 and abs(fd) < 1e-10:
                continue
            rel = abs(an - fd) / max(abs(an), abs(fd))
            assert rel < 1e-3, (param, idx, coord, an, fd)
            checked += 1
    assert checked >= 8


def test_gradcheck_driver_two_scenes():
    result = gradcheck(np.random.default_rng(44), n_scenes=2)
    assert len(result["rows"]) == 20
    terms = {r[0] for r in result["rows"]}
    classes = {r[1] for r in result["rows"]}
    assert terms == {"rgb", "scale", "normal", "d_normal"}
    assert classes == set(PARAM_CLASSES)
    assert result["evaluated"] > 200
    assert result["worst"] < 1e-3
    for _, _, err, skipped in result["rows"]:
        assert err <= result["worst"]
        assert skipped >= 0


def test_scale_term_adds_into_log_scale_grads():
    rng = np.random.default_rng(45)
    scene, cam, target, frame = random_gradcheck_problem(rng)
    _, with_l1, bundle = loss_gradients(scene, cam, target, frame,
                                        LossWeights())
    _, without_l1, _ = loss_gradients(scene, cam, target, frame,
                                      LossWeights(lambda1=0.0))
    diff = with_l1.d_log_scales - without_l1.d_log_scales
    assert np.allclose(diff, bundle.scale_grads, atol=1e-15)
    assert np.array_equal(with_l1.d_positions, without_l1.d_positions)


def test_direction_stats_requires_single_visible_gaussian():
    rng = np.random.default_rng(46)
    scene, cam, target, frame = random_gradcheck_problem(rng, n_gauss=2)
    with pytest.raises(ValueError):
        position_gradient_direction_stats(scene, cam, "normal", target,
                                          frame, LossWeights())
    hidden = flat_scene([[0.0, 0.0, -5.0]])
    cam = axial_camera(16)
    target = np.zeros((16, 16, 3))
    n = np.zeros((16, 16, 3))
    n[..., 2] = -1.0
    frame = PseudoNormalFrame(normals=n, valid=np.ones((16, 16), bool))
    with pytest.raises(InvisibleGaussianError):
        position_gradient_direction_stats(hidden, cam, "normal", target,
                                          frame, LossWeights())


def test_normal_term_position_gradient_vanishes_head_on():
    # the normalized rendered normal of a lone splat is independent of its
    # position, so the normal term cannot move it
    scene = flat_scene([[0.0, 0.0, 2.0]], in_plane=0.8, opacity=0.97)
    cam = axial_camera(16)
    target = np.full((16, 16, 3), 0.3)
    prior = np.zeros((16, 16, 3))
    prior[:] = [0.0, np.sin(0.35), -np.cos(0.35)]
    frame = PseudoNormalFrame(normals=prior, valid=np.ones((16, 16), bool))
    tang, along = position_gradient_direction_stats(
        scene, cam, "normal", target, frame, LossWeights())
    assert tang < 1e-12 and along < 1e-12


def test_d_normal_term_position_gradient_alive_at_grazing():
    hits = 0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        scene, cam, target, frame = random_direction_probe_problem(rng)
        try:
            tang, along = position_gradient_direction_stats(
                scene, cam, "d_normal", target, frame, LossWeights())
        except InvisibleGaussianError:
            continue
        hits += (tang + along) > 1e-10
    assert hits >= 4
