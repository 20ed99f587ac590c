"""Synthetic scenes, noisy pseudo-normal generation, and the training loop.

Ground truth comes from analytic ray-primitive intersection (plane,
sphere, axis-aligned box) with Lambertian shading, so every rendered
quantity has a closed form to test against. The pseudo-normal generator
stands in for a monocular estimator and can inject view-consistent bias
(per-view rotation) or localized corruption (patches) deterministically.
Training is plain Adam with per-class learning rates and the adaptive
population control co-scheduled every fixed interval.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .adaptive import (DENSIFY_INTERVAL, DensifyConfig, DensifyStats,
                       apply_axis_splits, baseline_densify_prune,
                       surface_densify)
from .geometry import Camera, lookat_camera
from .gradients import ParamGrads, loss_gradients
from .losses import LossWeights, PseudoNormalFrame
from .rasterizer import rasterize
from .scene import Scene, init_from_points, save_ply

RAY_EPS = 1e-9
LIGHT_DIR = np.array([0.4, 0.3, -0.85]) / np.linalg.norm([0.4, 0.3, -0.85])
AMBIENT = 0.25
DIFFUSE = 0.75

LEARNING_RATES = {
    "positions": 1.6e-4,       # decays exponentially to POSITION_LR_FINAL
    "quats": 1e-3,
    "log_scales": 5e-3,
    "opacity_logits": 5e-2,
    "colors": 2.5e-3,
}
POSITION_LR_FINAL = 1.6e-6
ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


def rotation_about_axis(axis: np.ndarray, degrees: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    ang = np.radians(degrees)
    K = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(ang) * K + (1.0 - np.cos(ang)) * (K @ K)


# ---------------------------------------------------------------------------
# analytic primitives

@dataclass
class Primitive:
    """plane {point, normal, half_size?} | sphere {center, radius} |
    box {center, half_sizes} (axis aligned), each with an RGB albedo."""
    kind: str
    albedo: np.ndarray
    point: np.ndarray = None
    normal: np.ndarray = None
    half_size: float = None       # None = unbounded plane
    center: np.ndarray = None
    radius: float = None
    half_sizes: np.ndarray = None

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if self.kind == "plane":
            self.point = np.asarray(self.point, dtype=np.float64).reshape(3)
            self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
            self.normal = self.normal / np.linalg.norm(self.normal)
        elif self.kind == "sphere":
            self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
            if not self.radius or self.radius <= 0:
                raise ValueError("sphere needs positive radius")
        elif self.kind == "box":
            self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
            self.half_sizes = np.asarray(self.half_sizes,
                                         dtype=np.float64).reshape(3)
            if (self.half_sizes <= 0).any():
                raise ValueError("box needs positive half sizes")
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")

    def intersect(self, origin: np.ndarray, dirs: np.ndarray):
        """First hit along unit rays from a common origin.

        Returns (t, normals) with t = +inf on miss; normals are outward
        world-frame, not yet camera-facing.
        """
        flat = dirs.reshape(-1, 3)
        t = np.full(len(flat), np.inf)
        n = np.zeros_like(flat)
        if self.kind == "plane":
            denom = flat @ self.normal
            num = (self.point - origin) @ self.normal
            ok = np.abs(denom) > 1e-12
            cand = np.where(ok, num / np.where(ok, denom, 1.0), np.inf)
            ok &= cand > RAY_EPS
            if self.half_size is not None:
                a = np.array([1.0, 0, 0]) if abs(self.normal[0]) < 0.9 \
                    else np.array([0.0, 1, 0])
                e1 = np.cross(a, self.normal)
                e1 /= np.linalg.norm(e1)
                e2 = np.cross(self.normal, e1)
                x = origin + cand[:, None] * flat - self.point
                ok &= (np.abs(x @ e1) <= self.half_size) \
                    & (np.abs(x @ e2) <= self.half_size)
            t[ok] = cand[ok]
            n[ok] = self.normal
        elif self.kind == "sphere":
            oc = origin - self.center
            b = flat @ oc
            disc = b ** 2 - (oc @ oc - self.radius ** 2)
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = -b - sq
            t1 = -b + sq
            cand = np.where(t0 > RAY_EPS, t0, t1)
            ok &= cand > RAY_EPS
            t[ok] = cand[ok]
            x = origin + t[ok, None] * flat[ok]
            n[ok] = (x - self.center) / self.radius
        else:  # box: slab method
            lo = self.center - self.half_sizes
            hi = self.center + self.half_sizes
            safe = np.where(np.abs(flat) > 1e-15, flat, 1e-15)
            t_lo = (lo - origin) / safe
            t_hi = (hi - origin) / safe
            t1 = np.minimum(t_lo, t_hi)
            t2 = np.maximum(t_lo, t_hi)
            enter_ax = np.argmax(t1, axis=1)
            t_enter = t1[np.arange(len(flat)), enter_ax]
            t_exit = t2.min(axis=1)
            ok = (t_enter <= t_exit) & (t_enter > RAY_EPS)
            t[ok] = t_enter[ok]
            sign = -np.sign(flat[ok, enter_ax[ok]])
            n[ok, enter_ax[ok]] = sign
        return t.reshape(dirs.shape[:-1]), n.reshape(dirs.shape)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "albedo": self.albedo.tolist()}
        if self.kind == "plane":
            d["point"] = self.point.tolist()
            d["normal"] = self.normal.tolist()
            if self.half_size is not None:
                d["half_size"] = float(self.half_size)
        elif self.kind == "sphere":
            d["center"] = self.center.tolist()
            d["radius"] = float(self.radius)
        else:
            d["center"] = self.center.tolist()
            d["half_sizes"] = self.half_sizes.tolist()
        return d

    def surface_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform-ish samples on the primitive surface."""
        if self.kind == "plane":
            h = self.half_size if self.half_size is not None else 1.0
            a = np.array([1.0, 0, 0]) if abs(self.normal[0]) < 0.9 \
                else np.array([0.0, 1, 0])
            e1 = np.cross(a, self.normal)
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(self.normal, e1)
            uv = rng.uniform(-h, h, (n, 2))
            return self.point + uv[:, :1] * e1 + uv[:, 1:] * e2
        if self.kind == "sphere":
            v = rng.normal(size=(n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return self.center + self.radius * v
        face = rng.integers(0, 6, n)
        p = rng.uniform(-1.0, 1.0, (n, 3)) * self.half_sizes
        ax = face // 2
        p[np.arange(n), ax] = np.where(face % 2, 1.0, -1.0) * self.half_sizes[ax]
        return self.center + p


@dataclass
class NormalNoiseSpec:
    mode: str = "none"            # none | per-view-rotation | patch-corruption
    magnitude: float = 0.0        # degrees
    corrupted_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "per-view-rotation", "patch-corruption"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")
        if not 0.0 <= self.corrupted_fraction <= 1.0:
            raise ValueError("corrupted_fraction must be in [0, 1]")


@dataclass
class SceneSpec:
    primitives: list
    rig: dict                     # orbit | cuboid-random
    image_size: int = 64
    noise: NormalNoiseSpec = field(default_factory=NormalNoiseSpec)
    cuboid: np.ndarray = None
    fx_factor: float = 1.0        # fx = fx_factor * image_size

    def __post_init__(self):
        if self.cuboid is None:
            self.cuboid = np.array([[-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]])
        self.cuboid = np.asarray(self.cuboid, dtype=np.float64).reshape(2, 3)
        if self.camera_count() < 2:
            raise ValueError("need at least 2 cameras")

    def camera_count(self) -> int:
        return int(self.rig["count"])

    def cameras(self) -> list:
        center = 0.5 * (self.cuboid[0] + self.cuboid[1])
        fx = self.fx_factor * self.image_size
        kind = self.rig.get("kind", "orbit")
        out = []
        if kind == "orbit":
            radius = float(self.rig["radius"])
            elev = np.radians(float(self.rig.get("elevation", 20.0)))
            for k in range(self.camera_count()):
                az = 2 * np.pi * k / self.camera_count()
                eye = center + radius * np.array([np.cos(az) * np.cos(elev),
                                                  np.sin(az) * np.cos(elev),
                                                  np.sin(elev)])
                out.append(lookat_camera(eye, center, fx=fx,
                                         width=self.image_size,
                                         height=self.image_size))
        elif kind == "cuboid-random":
            rng = np.random.default_rng(int(self.rig.get("seed", 0)))
            half = 0.5 * (self.cuboid[1] - self.cuboid[0])
            for _ in range(self.camera_count()):
                v = rng.normal(size=3)
                v /= np.linalg.norm(v)
                eye = center + 1.4 * np.linalg.norm(half) * v
                up = np.array([0.0, 0.0, 1.0])
                if abs(v @ up) > 0.98:
                    up = np.array([0.0, 1.0, 0.0])
                out.append(lookat_camera(eye, center, fx=fx,
                                         width=self.image_size,
                                         height=self.image_size, up=up))
        else:
            raise ValueError(f"unknown rig kind {kind!r}")
        return out

    def to_yaml(self) -> str:
        doc = {
            "primitives": [p.to_dict() for p in self.primitives],
            "rig": dict(self.rig),
            "image_size": int(self.image_size),
            "noise": {"mode": self.noise.mode,
                      "magnitude": float(self.noise.magnitude),
                      "corrupted_fraction": float(self.noise.corrupted_fraction),
                      "seed": int(self.noise.seed)},
            "cuboid": self.cuboid.tolist(),
            "fx_factor": float(self.fx_factor),
        }
        return yaml.safe_dump(doc, sort_keys=False)

    @staticmethod
    def from_yaml(text: str) -> "SceneSpec":
        doc = yaml.safe_load(text)
        prims = [Primitive(**d) for d in doc["primitives"]]
        noise = NormalNoiseSpec(**doc.get("noise", {}))
        return SceneSpec(primitives=prims, rig=doc["rig"],
                         image_size=int(doc.get("image_size", 64)),
                         noise=noise,
                         cuboid=np.array(doc["cuboid"]) if "cuboid" in doc else None,
                         fx_factor=float(doc.get("fx_factor", 1.0)))


@dataclass
class GroundTruthView:
    rgb: np.ndarray       # (H, W, 3)
    depth: np.ndarray     # (H, W) camera z, 0 where empty
    normal: np.ndarray    # (H, W, 3) camera frame, camera facing
    mask: np.ndarray      # (H, W) bool
    rays: np.ndarray      # (H, W, 3) camera-frame unit pixel rays


def render_ground_truth(spec: SceneSpec):
    """Analytic first-hit render of every rig camera.

    Returns (cameras, views). Raises if some primitive is hit by no view.
    """
    cameras = spec.cameras()
    views = []
    hit_any = np.zeros(len(spec.primitives), dtype=bool)
    for cam in cameras:
        dirs_cam = cam.pixel_ray_grid()
        dirs_world = dirs_cam @ cam.world_to_cam_rot   # R^T applied rowwise
        origin = cam.center_world
        H, W = cam.height, cam.width
        best_t = np.full((H, W), np.inf)
        best_n = np.zeros((H, W, 3))
        best_albedo = np.zeros((H, W, 3))
        for j, prim in enumerate(spec.primitives):
            t, n = prim.intersect(origin, dirs_world)
            closer = t < best_t
            if closer.any():
                hit_any[j] = True
                best_t[closer] = t[closer]
                best_n[closer] = n[closer]
                best_albedo[closer] = prim.albedo
        mask = np.isfinite(best_t)
        # orient normals toward the camera before shading
        flip = np.einsum("hwd,hwd->hw", best_n, dirs_world) > 0
        best_n[flip] *= -1.0
        lam = AMBIENT + DIFFUSE * np.clip(-(best_n @ LIGHT_DIR), 0.0, None)
        rgb = np.where(mask[..., None], best_albedo * lam[..., None], 0.0)
        hits = origin + best_t[..., None] * dirs_world
        p_cam = np.einsum("ij,hwj->hwi", cam.world_to_cam_rot, hits) \
            + cam.world_to_cam_trans
        depth = np.where(mask, p_cam[..., 2], 0.0)
        n_cam = np.einsum("ij,hwj->hwi", cam.world_to_cam_rot, best_n)
        n_cam = np.where(mask[..., None], n_cam, 0.0)
        views.append(GroundTruthView(rgb=np.clip(rgb, 0.0, 1.0), depth=depth,
                                     normal=n_cam, mask=mask, rays=dirs_cam))
    if not hit_any.all():
        missing = [i for i, h in enumerate(hit_any) if not h]
        raise ValueError(f"primitives {missing} outside every camera frustum")
    return cameras, views


def _tilt_exactly(normals: np.ndarray, degrees: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Rotate each unit normal by exactly `degrees` about a perpendicular
    axis (random in the tangent plane), so dot(out, in) = cos(degrees)."""
    v = rng.normal(size=normals.shape)
    axes = np.cross(normals, v)
    bad = np.linalg.norm(axes, axis=-1) < 1e-9
    if bad.any():
        axes[bad] = np.cross(normals[bad], normals[bad] + [0.7, 0.3, 0.1])
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    ang = np.radians(degrees)
    # Rodrigues with axis perpendicular to n: n cos + (a x n) sin
    return normals * np.cos(ang) + np.cross(axes, normals) * np.sin(ang)


def corrupt_normals(views: list, spec: NormalNoiseSpec,
                    return_corrupted: bool = False):
    """Per-view pseudo-normal frames with controlled corruption.

    per-view-rotation rotates a whole view's normals by one seeded
    axis-angle (view-consistent bias, different per view; per-pixel
    deviation angle is at most the magnitude). Patch corruption tilts
    normals inside random rectangles covering corrupted_fraction of the
    masked area by exactly the magnitude, via per-pixel axes
    perpendicular to the normal. Outputs are unit length and re-oriented
    to face the camera along each pixel ray.
    """
    rng = np.random.default_rng(spec.seed)
    frames = []
    corrupted_masks = []
    for view in views:
        n = view.normal.copy()
        mask = view.mask
        corrupted = np.zeros_like(mask)
        if spec.mode == "per-view-rotation" and spec.magnitude > 0:
            axis = rng.normal(size=3)
            R = rotation_about_axis(axis, spec.magnitude)
            n = n @ R.T
            corrupted = mask.copy()
        elif spec.mode == "patch-corruption" and spec.corrupted_fraction > 0:
            H, W = mask.shape
            target = spec.corrupted_fraction * mask.sum()
            guard = 0
            while corrupted[mask].sum() < target and guard < 200:
                guard += 1
                ph = int(rng.integers(H // 8 + 1, max(H // 3, H // 8 + 2)))
                pw = int(rng.integers(W // 8 + 1, max(W // 3, W // 8 + 2)))
                py = int(rng.integers(0, H - ph + 1))
                px = int(rng.integers(0, W - pw + 1))
                patch = np.zeros_like(mask)
                patch[py:py + ph, px:px + pw] = True
                new = patch & mask & ~corrupted
                overshoot = corrupted[mask].sum() + new.sum() - target
                if overshoot > 0:   # trim the last patch row by row
                    rows = np.flatnonzero(new.any(axis=1))
                    for r in rows[::-1]:
                        if overshoot <= 0:
                            break
                        row_count = new[r].sum()
                        new[r] = False
                        overshoot -= row_count
                corrupted |= new
            if corrupted.any() and spec.magnitude > 0:
                n[corrupted] = _tilt_exactly(n[corrupted], spec.magnitude, rng)
        # unit length + camera facing along the pixel ray
        norm = np.linalg.norm(n, axis=-1)
        ok = norm > 1e-12
        n[ok] /= norm[ok][:, None]
        facing = np.einsum("hwd,hwd->hw", n, view.rays) > 0
        n[facing & mask] *= -1.0
        frames.append(PseudoNormalFrame(normals=n, valid=mask.copy()))
        corrupted_masks.append(corrupted)
    if return_corrupted:
        return frames, corrupted_masks
    return frames


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0

    @staticmethod
    def for_scene(scene: Scene) -> "OptimState":
        params = scene.params()
        return OptimState(m={k: np.zeros_like(p) for k, p in params.items()},
                          v={k: np.zeros_like(p) for k, p in params.items()})

    def remap(self, survivors: np.ndarray, n_new: int):
        """Carry moments of surviving rows, zero-init appended rows."""
        for k in self.m:
            kept_m = self.m[k][survivors]
            kept_v = self.v[k][survivors]
            pad = (n_new,) + kept_m.shape[1:]
            self.m[k] = np.concatenate([kept_m, np.zeros(pad)])
            self.v[k] = np.concatenate([kept_v, np.zeros(pad)])

    def save(self, path: str):
        blob = {"version": np.array([1]), "step": np.array([self.step])}
        for k in self.m:
            blob[f"m_{k}"] = self.m[k]
            blob[f"v_{k}"] = self.v[k]
        np.savez(path, **blob)

    @staticmethod
    def load(path: str) -> "OptimState":
        with np.load(path) as z:
            if int(z["version"][0]) != 1:
                raise ValueError("unknown optimizer blob version")
            m = {k[2:]: z[k].copy() for k in z.files if k.startswith("m_")}
            v = {k[2:]: z[k].copy() for k in z.files if k.startswith("v_")}
            return OptimState(m=m, v=v, step=int(z["step"][0]))


def position_lr(iteration: int, total_iters: int) -> float:
    """Exponential decay from the base rate to POSITION_LR_FINAL."""
    frac = min(max(iteration / max(total_iters, 1), 0.0), 1.0)
    lr0 = LEARNING_RATES["positions"]
    return lr0 * (POSITION_LR_FINAL / lr0) ** frac


def adam_step(scene: Scene, grads: ParamGrads, state: OptimState,
              iteration: int, total_iters: int):
    """One exact bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    gmap = {"positions": grads.d_positions, "quats": grads.d_quats,
            "log_scales": grads.d_log_scales,
            "opacity_logits": grads.d_opacity_logits, "colors": grads.d_colors}
    params = scene.params()
    for k, g in gmap.items():
        lr = position_lr(iteration, total_iters) if k == "positions" \
            else LEARNING_RATES[k]
        m = state.m[k]
        v = state.v[k]
        m *= ADAM_B1
        m += (1 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1 - ADAM_B2) * g * g
        m_hat = m / (1 - ADAM_B1 ** t)
        v_hat = v / (1 - ADAM_B2 ** t)
        params[k] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# training

class TrainAbort(RuntimeError):
    """Raised when a loss term turns non-finite; names term and iteration."""

    def __init__(self, iteration: int, term: str):
        super().__init__(f"non-finite loss term {term!r} at iteration {iteration}")
        self.iteration = iteration
        self.term = term


LOSS_CSV_HEADER = "iteration,L_RGB,L_s,L_n,L_dn,total,mean_w"
DENSIFY_CSV_HEADER = "iteration,n_surface_split,n_grad_clone,n_grad_split,n_pruned,total"


@dataclass
class TrainResult:
    scene: Scene
    loss_rows: list
    densify_rows: list
    cameras: list
    views: list
    frames: list


def init_scene_from_spec(spec: SceneSpec, rng: np.random.Generator,
                         n_points: int = 600,
                         jitter_frac: float = 0.02) -> Scene:
    """Surface samples + jitter as the SfM-point stand-in."""
    per = max(1, n_points // len(spec.primitives))
    pts = np.concatenate([p.surface_points(per, rng) for p in spec.primitives])
    extent = float(np.linalg.norm(spec.cuboid[1] - spec.cuboid[0]))
    pts = pts + rng.normal(0.0, jitter_frac * extent, pts.shape)
    lo, hi = spec.cuboid
    pts = np.clip(pts, lo, hi)
    colors = np.full((len(pts), 3), 0.5)
    return init_from_points(pts, colors, cuboid=spec.cuboid.copy())


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def train(spec: SceneSpec, weights: LossWeights = None,
          cfg: DensifyConfig = None, iters: int = 1500, seed: int = 0,
          out_dir: str = None, threads: int = 1, deterministic: bool = False,
          confidence_source: str = "rendered", checkpoint_every: int = 0,
          n_init_points: int = 600, max_gaussians: int = 5000) -> TrainResult:
    """Optimize a splat scene against the spec's synthetic ground truth.

    Cameras are visited round-robin; Adam runs with per-class learning
    rates; population control fires every DENSIFY_INTERVAL iterations
    until cfg.densify_until_iter. Emits loss and densify CSVs plus PLY
    checkpoints under out_dir when given.
    """
    weights = weights if weights is not None else LossWeights()
    cfg = cfg if cfg is not None else DensifyConfig()
    if deterministic:
        threads = 1
    rng = np.random.default_rng(seed)
    cameras, views = render_ground_truth(spec)
    frames = corrupt_normals(views, spec.noise)
    scene = init_scene_from_spec(spec, rng, n_points=n_init_points)
    state = OptimState.for_scene(scene)

    loss_rows = [LOSS_CSV_HEADER]
    densify_rows = [DENSIFY_CSV_HEADER]
    grad_accum = np.zeros(len(scene))
    grad_count = 0

    for it in range(1, iters + 1):
        k = (it - 1) % len(cameras)
        values, grads, bundle = loss_gradients(
            scene, cameras[k], views[k].rgb, frames[k], weights,
            confidence_source=confidence_source, threads=threads)
        for term in ("rgb", "scale", "normal", "d_normal", "total"):
            if not np.isfinite(values[term]):
                raise TrainAbort(it, term)
        if not grads.all_finite():
            raise TrainAbort(it, "gradient")
        adam_step(scene, grads, state, it, iters)
        grad_accum += np.linalg.norm(grads.d_positions, axis=1)
        grad_count += 1
        loss_rows.append(",".join([str(it)] + [_fmt(values[t]) for t in
                                               ("rgb", "scale", "normal",
                                                "d_normal", "total", "mean_w")]))

        if it % DENSIFY_INTERVAL == 0 and it <= cfg.densify_until_iter:
            mean_grads = grad_accum / max(grad_count, 1)
            scene, survivors, n_pruned, clone_idx, split_idx = \
                baseline_densify_prune(scene, mean_grads, cfg,
                                       budget=max_gaussians - len(scene))
            state.remap(survivors, len(clone_idx) + 2 * len(split_idx))
            n_surface = 0
            if len(scene) < max_gaussians:
                surf_idx = surface_densify(scene, cameras, cfg, rng,
                                           budget=max_gaussians - len(scene))
                if len(surf_idx):
                    scene = apply_axis_splits(scene, surf_idx)
                    keep = np.ones(len(state.m["positions"]), dtype=bool)
                    keep[surf_idx] = False
                    state.remap(keep, 2 * len(surf_idx))
                    n_surface = len(surf_idx)
            densify_rows.append(DensifyStats(
                iteration=it, n_surface_split=n_surface,
                n_grad_clone=len(clone_idx), n_grad_split=len(split_idx),
                n_pruned=n_pruned, total=len(scene)).csv_row())
            grad_accum = np.zeros(len(scene))
            grad_count = 0

        if out_dir and checkpoint_every and it % checkpoint_every == 0:
            _write_checkpoint(out_dir, it, scene, state)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "loss.csv"), "w") as f:
            f.write("\n".join(loss_rows) + "\n")
        with open(os.path.join(out_dir, "densify.csv"), "w") as f:
            f.write("\n".join(densify_rows) + "\n")
        with open(os.path.join(out_dir, "final.ply"), "wb") as f:
            f.write(save_ply(scene))
    return TrainResult(scene=scene, loss_rows=loss_rows,
                       densify_rows=densify_rows, cameras=cameras,
                       views=views, frames=frames)


def _write_checkpoint(out_dir: str, iteration: int, scene: Scene,
                      state: OptimState):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"ckpt_{iteration:06d}.ply"), "wb") as f:
        f.write(save_ply(scene))
    state.save(os.path.join(out_dir, f"ckpt_{iteration:06d}_optim.npz"))
