"""Synthetic-scene harness: primitives, ground truth, noise, optimizer."""

import numpy as np
import pytest

from splatsurf.gradients import ParamGrads
from splatsurf.harness import (LIGHT_DIR, LOSS_CSV_HEADER, NormalNoiseSpec,
                               OptimState, Primitive, SceneSpec, adam_step,
                               corrupt_normals, init_scene_from_spec,
                               position_lr, render_ground_truth,
                               rotation_about_axis, train)
from splatsurf.scene import load_ply


def test_rotation_about_axis():
    R = rotation_about_axis(np.array([0.0, 0, 1]), 90.0)
    assert np.allclose(R @ [1.0, 0, 0], [0.0, 1, 0], atol=1e-12)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)


# --- primitives -------------------------------------------------------------

def test_plane_intersection():
    p = Primitive(kind="plane", albedo=[0.5, 0.5, 0.5],
                  point=[0.0, 0, 0], normal=[0.0, 0, 1])
    t, n = p.intersect(np.array([0.0, 0, 2]),
                       np.array([[[0.0, 0, -1.0], [1.0, 0, 0]]]))
    assert t[0, 0] == 2.0
    assert np.allclose(n[0, 0], [0.0, 0, 1], atol=1e-15)
    assert np.isinf(t[0, 1])            # parallel ray misses


def test_bounded_plane_misses_outside_patch():
    p = Primitive(kind="plane", albedo=[0.5, 0.5, 0.5],
                  point=[0.0, 0, 0], normal=[0.0, 0, 1], half_size=1.0)
    dirs = np.array([[[0.0, 0, -1.0], [0.4, 0, -1.0], [0.6, 0, -1.0]]])
    t, _ = p.intersect(np.array([0.0, 0, 2]), dirs)
    assert np.isfinite(t[0, 0]) and np.isfinite(t[0, 1])   # x = 0, 0.8
    assert np.isinf(t[0, 2])            # lands at x = 1.2 > half_size


def test_sphere_intersection():
    s = Primitive(kind="sphere", albedo=[0.5, 0.5, 0.5],
                  center=[0.0, 0, 0], radius=1.0)
    t, n = s.intersect(np.array([0.0, 0, -3]),
                       np.array([[[0.0, 0, 1.0], [1.0, 0, 0]]]))
    assert abs(t[0, 0] - 2.0) < 1e-12
    assert np.allclose(n[0, 0], [0.0, 0, -1.0], atol=1e-12)   # outward
    assert np.isinf(t[0, 1])


def test_box_intersection():
    b = Primitive(kind="box", albedo=[0.5, 0.5, 0.5],
                  center=[0.0, 0, 0], half_sizes=[1.0, 1.0, 1.0])
    t, n = b.intersect(np.array([3.0, 0.2, -0.3]),
                       np.array([[[-1.0, 0, 0], [1.0, 0, 0]]]))
    assert abs(t[0, 0] - 2.0) < 1e-12
    assert np.allclose(n[0, 0], [1.0, 0, 0], atol=1e-12)
    assert np.isinf(t[0, 1])            # pointing away


def test_primitive_validation():
    with pytest.raises(ValueError):
        Primitive(kind="torus", albedo=[0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        Primitive(kind="sphere", albedo=[0.5, 0.5, 0.5], center=[0.0, 0, 0],
                  radius=0.0)
    with pytest.raises(ValueError):
        Primitive(kind="box", albedo=[0.5, 0.5, 0.5], center=[0.0, 0, 0],
                  half_sizes=[1.0, -1.0, 1.0])


def test_surface_points_lie_on_surface():
    rng = np.random.default_rng(60)
    plane = Primitive(kind="plane", albedo=[0.5, 0.5, 0.5],
                      point=[0.0, 0, 1.0], normal=[0.0, 0, 1], half_size=2.0)
    pts = plane.surface_points(200, rng)
    assert np.abs(pts[:, 2] - 1.0).max() < 1e-12
    assert np.abs(pts[:, :2]).max() <= 2.0 + 1e-12

    sphere = Primitive(kind="sphere", albedo=[0.5, 0.5, 0.5],
                       center=[1.0, 0, 0], radius=0.7)
    pts = sphere.surface_points(200, rng)
    assert np.abs(np.linalg.norm(pts - [1.0, 0, 0], axis=1) - 0.7).max() < 1e-9

    box = Primitive(kind="box", albedo=[0.5, 0.5, 0.5],
                    center=[0.0, 0, 0], half_sizes=[1.0, 0.5, 0.25])
    pts = box.surface_points(200, rng)
    rel = np.abs(pts) / [1.0, 0.5, 0.25]
    assert np.abs(rel.max(axis=1) - 1.0).max() < 1e-9


# --- scene specs --------------------------------------------------------------

def _plane_spec(size=16, elevation=0.0, radius=2.0):
    plane = Primitive(kind="plane", albedo=[0.6, 0.5, 0.4],
                      point=[0.0, 0, 0], normal=[1.0, 0, 0])
    return SceneSpec(primitives=[plane],
                     rig={"kind": "orbit", "count": 2, "radius": radius,
                          "elevation": elevation},
                     image_size=size)


def test_scene_spec_yaml_round_trip():
    spec = _plane_spec()
    spec.noise = NormalNoiseSpec(mode="patch-corruption", magnitude=20.0,
                                 corrupted_fraction=0.4, seed=3)
    back = SceneSpec.from_yaml(spec.to_yaml())
    assert back.image_size == spec.image_size
    assert back.rig == spec.rig
    assert np.array_equal(back.cuboid, spec.cuboid)
    assert back.noise == spec.noise
    assert back.primitives[0].kind == "plane"
    assert np.array_equal(back.primitives[0].normal, [1.0, 0, 0])


def test_scene_spec_needs_two_cameras():
    plane = Primitive(kind="plane", albedo=[0.5, 0.5, 0.5],
                      point=[0.0, 0, 0], normal=[1.0, 0, 0])
    with pytest.raises(ValueError):
        SceneSpec(primitives=[plane],
                  rig={"kind": "orbit", "count": 1, "radius": 2.0})


def test_orbit_camera_geometry():
    spec = _plane_spec(elevation=30.0, radius=2.5)
    cams = spec.cameras()
    assert len(cams) == 2
    for cam in cams:
        assert abs(np.linalg.norm(cam.center_world) - 2.5) < 1e-12
        looked = cam.to_camera(np.zeros((1, 3)))[0]
        assert np.allclose(looked, [0.0, 0, 2.5], atol=1e-12)
    e = np.radians(30.0)
    assert np.allclose(cams[0].center_world,
                       [2.5 * np.cos(e), 0.0, 2.5 * np.sin(e)], atol=1e-12)


# --- ground truth ---------------------------------------------------------------

def test_ground_truth_fronto_plane():
    spec = _plane_spec(size=16)
    cams, views = render_ground_truth(spec)
    lam_lit = 0.25 + 0.75 * max(0.0, float(-np.array([-1.0, 0, 0]) @ LIGHT_DIR))
    expected_rgb = [0.25 * np.array([0.6, 0.5, 0.4]),     # facing away from light
                    lam_lit * np.array([0.6, 0.5, 0.4])]
    for view, rgb in zip(views, expected_rgb):
        assert view.mask.all()
        assert np.abs(view.depth - 2.0).max() < 1e-12
        assert np.abs(view.normal - [0.0, 0, -1.0]).max() < 1e-12
        assert np.abs(view.rgb - rgb).max() < 1e-12
        assert np.abs(np.linalg.norm(view.rays, axis=-1) - 1.0).max() < 1e-12


def test_ground_truth_sphere_silhouette():
    sphere = Primitive(kind="sphere", albedo=[0.3, 0.5, 0.8],
                       center=[0.0, 0, 0], radius=0.5)
    spec = SceneSpec(primitives=[sphere],
                     rig={"kind": "orbit", "count": 2, "radius": 3.0,
                          "elevation": 0.0},
                     image_size=64)
    _, views = render_ground_truth(spec)
    predicted = 64 * 0.5 / np.sqrt(9.0 - 0.25)       # fx r / sqrt(d^2 - r^2)
    for view in views:
        r_eff = np.sqrt(view.mask.sum() / np.pi)
        assert abs(r_eff - predicted) < 1.0
        assert (view.depth[view.mask] > 0).all()
        assert not view.depth[~view.mask].any()


def test_ground_truth_occlusion():
    plane = Primitive(kind="plane", albedo=[0.5, 0.5, 0.5],
                      point=[0.7, 0, 0], normal=[1.0, 0, 0])
    sphere = Primitive(kind="sphere", albedo=[0.6, 0.2, 0.2],
                       center=[0.0, 0, 0], radius=0.5)
    spec = SceneSpec(primitives=[plane, sphere],
                     rig={"kind": "orbit", "count": 2, "radius": 3.0,
                          "elevation": 0.0},
                     image_size=32)
    _, views = render_ground_truth(spec)
    # camera 0 looks from +x: the plane hides the sphere entirely
    assert np.abs(views[0].depth - 2.3).max() < 1e-12
    # camera 1 looks from -x: the sphere's near pole sits 2.5 in front
    # (the center pixel ray is half a pixel off axis, hence the slack)
    assert abs(views[1].depth[16, 16] - 2.5) < 5e-3


def test_ground_truth_unseen_primitive_raises():
    plane = Primitive(kind="plane", albedo=[0.5, 0.5, 0.5],
                      point=[0.0, 0, 0], normal=[0.0, 0, 1])
    buried = Primitive(kind="sphere", albedo=[0.6, 0.2, 0.2],
                       center=[0.0, 0, -1.0], radius=0.3)
    spec = SceneSpec(primitives=[plane, buried],
                     rig={"kind": "orbit", "count": 2, "radius": 3.0,
                          "elevation": 89.9},
                     image_size=16)
    with pytest.raises(ValueError, match="outside every camera"):
        render_ground_truth(spec)


def test_ground_truth_allows_one_empty_view():
    sphere = Primitive(kind="sphere", albedo=[0.3, 0.5, 0.8],
                       center=[3.5, 0.3, 0.0], radius=0.2)
    spec = SceneSpec(primitives=[sphere],
                     rig={"kind": "orbit", "count": 2, "radius": 3.0,
                          "elevation": 0.0},
                     image_size=32)
    _, views = render_ground_truth(spec)
    assert not views[0].mask.any()      # behind the first camera
    assert views[1].mask.any()


# --- normal corruption ------------------------------------------------------------

def test_corrupt_normals_none_is_identity():
    spec = _plane_spec()
    _, views = render_ground_truth(spec)
    frames = corrupt_normals(views, NormalNoiseSpec())
    for frame, view in zip(frames, views):
        assert np.array_equal(frame.normals, view.normal)
        assert np.array_equal(frame.valid, view.mask)


def test_corrupt_normals_per_view_rotation_bound():
    spec = _plane_spec(size=16)
    _, views = render_ground_truth(spec)
    noise = NormalNoiseSpec(mode="per-view-rotation", magnitude=10.0, seed=4)
    frames = corrupt_normals(views, noise)
    moved = 0
    for frame, view in zip(frames, views):
        n = frame.normals[view.mask]
        assert np.abs(np.linalg.norm(n, axis=1) - 1.0).max() < 1e-9
        dots = np.einsum("pd,pd->p", n, view.normal[view.mask])
        assert dots.min() > np.cos(np.radians(10.0)) - 1e-9
        facing = np.einsum("pd,pd->p", n, view.rays[view.mask])
        assert facing.max() <= 0.0
        moved += dots.max() < 1.0 - 1e-6
    assert moved >= 1


def test_corrupt_normals_patch_exact_tilt():
    spec = _plane_spec(size=64)
    _, views = render_ground_truth(spec)
    noise = NormalNoiseSpec(mode="patch-corruption", magnitude=25.0,
                            corrupted_fraction=0.3, seed=5)
    frames, corrupted = corrupt_normals(views, noise, return_corrupted=True)
    for frame, view, corr in zip(frames, views, corrupted):
        dots = np.einsum("hwd,hwd->hw", frame.normals, view.normal)
        hit = corr & view.mask
        clean = view.mask & ~corr
        assert hit.any() and clean.any()
        assert np.abs(dots[hit] - np.cos(np.radians(25.0))).max() < 1e-9
        assert np.abs(dots[clean] - 1.0).max() < 1e-12
        frac = hit.sum() / view.mask.sum()
        assert abs(frac - 0.3) < 0.02


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NormalNoiseSpec(mode="speckle")
    with pytest.raises(ValueError):
        NormalNoiseSpec(magnitude=-1.0)
    with pytest.raises(ValueError):
        NormalNoiseSpec(corrupted_fraction=1.5)


# --- optimizer ----------------------------------------------------------------------

def test_optim_state_lifecycle(tmp_path):
    spec = _plane_spec()
    scene = init_scene_from_spec(spec, np.random.default_rng(0), n_points=6)
    state = OptimState.for_scene(scene)
    assert state.m["positions"].shape == (len(scene), 3)
    assert state.v["colors"].shape == (len(scene), 12)

    state.m["positions"][:] = np.arange(len(scene) * 3).reshape(-1, 3)
    state.step = 17
    state.remap(np.array([2, 0]), n_new=2)
    assert state.m["positions"].shape == (4, 3)
    assert np.array_equal(state.m["positions"][0], [6.0, 7, 8])
    assert np.array_equal(state.m["positions"][1], [0.0, 1, 2])
    assert not state.m["positions"][2:].any()

    path = str(tmp_path / "optim.npz")
    state.save(path)
    back = OptimState.load(path)
    assert back.step == 17
    for k in state.m:
        assert np.array_equal(back.m[k], state.m[k])
        assert np.array_equal(back.v[k], state.v[k])

    np.savez(str(tmp_path / "bad.npz"), version=np.array([2]),
             step=np.array([0]))
    with pytest.raises(ValueError):
        OptimState.load(str(tmp_path / "bad.npz"))


def test_position_lr_schedule():
    assert abs(position_lr(0, 3000) - 1.6e-4) < 1e-19
    assert abs(position_lr(3000, 3000) - 1.6e-6) < 1e-19
    assert abs(position_lr(1500, 3000) - 1.6e-5) < 1e-12
    lrs = [position_lr(i, 100) for i in range(0, 101, 10)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_adam_step_textbook():
    spec = _plane_spec()
    scene = init_scene_from_spec(spec, np.random.default_rng(0), n_points=4)
    state = OptimState.for_scene(scene)
    grads = ParamGrads.zeros(len(scene))
    grads.d_colors[0, 0] = 0.5
    before = scene.colors.copy()
    adam_step(scene, grads, state, iteration=0, total_iters=100)
    # bias-corrected first step: lr * g / (|g| + eps)
    step1 = 2.5e-3 * 0.5 / (0.5 + 1e-8)
    assert abs(scene.colors[0, 0] - (before[0, 0] - step1)) < 1e-15
    assert np.array_equal(scene.colors.ravel()[1:], before.ravel()[1:])
    assert state.step == 1
    # constant gradient keeps the normalized step constant
    adam_step(scene, grads, state, iteration=0, total_iters=100)
    assert abs(scene.colors[0, 0] - (before[0, 0] - 2 * step1)) < 1e-12


# --- initialization and training -------------------------------------------------------

def test_init_scene_from_spec_properties():
    spec = _plane_spec()
    spec.primitives.append(Primitive(kind="sphere", albedo=[0.3, 0.5, 0.8],
                                     center=[0.0, 0, 0], radius=0.4))
    a = init_scene_from_spec(spec, np.random.default_rng(3), n_points=100)
    b = init_scene_from_spec(spec, np.random.default_rng(3), n_points=100)
    assert len(a) == 100
    assert np.array_equal(a.positions, b.positions)
    lo, hi = spec.cuboid
    assert (a.positions >= lo - 1e-12).all() and (a.positions <= hi + 1e-12).all()
    assert (a.colors[:, 0:3] == 0.5).all()
    assert np.array_equal(a.cuboid, spec.cuboid)


def test_train_zero_iters_matches_init():
    spec = _plane_spec(size=24)
    result = train(spec, iters=0, seed=9, n_init_points=40)
    ref = init_scene_from_spec(spec, np.random.default_rng(9), n_points=40)
    assert np.array_equal(result.scene.positions, ref.positions)
    assert np.array_equal(result.scene.log_scales, ref.log_scales)
    assert result.loss_rows == [LOSS_CSV_HEADER]


def test_train_smoke_writes_outputs(tmp_path):
    spec = _plane_spec(size=24)
    out = str(tmp_path / "run")
    result = train(spec, iters=3, seed=1, out_dir=out, n_init_points=30,
                   max_gaussians=50)
    assert len(result.loss_rows) == 4          # header + one row per iter
    lines = (tmp_path / "run" / "loss.csv").read_text().strip().split("\n")
    assert lines[0] == LOSS_CSV_HEADER
    assert len(lines) == 4
    for line in lines[1:]:
        fields = line.split(",")
        assert len(fields) == 7
        assert int(fields[0]) >= 1
        assert all(np.isfinite(float(x)) for x in fields[1:])
    final = load_ply((tmp_path / "run" / "final.ply").read_bytes())
    assert len(final) == len(result.scene)
    densify = (tmp_path / "run" / "densify.csv").read_text().strip()
    assert densify.split("\n")[0].startswith("iteration,")
