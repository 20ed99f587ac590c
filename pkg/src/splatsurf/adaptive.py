"""Gaussian population management.

Baseline clone/split/prune driven by accumulated position-gradient norms,
plus surface densification: splats that show up as the first intersection
from sampled viewpoints and are larger than a scale threshold get split
deterministically along their largest axis. Mutations run with exclusive
scene access between render/optimize phases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, lookat_camera, quat_to_rotation
from .rasterizer import first_intersection_map
from .scene import Gaussian, Scene

# baseline 3DGS small/large cutoff as a fraction of scene extent
PERCENT_DENSE = 0.01
DENSIFY_INTERVAL = 100
VIRTUAL_CAMERAS = 8


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    scale_threshold: float = 0.002     # fraction of the cuboid diagonal
    densify_until_iter: int = 15000
    opacity_prune: float = 0.005
    camera_sampling: str = "cuboid"    # or "training_views"

    def __post_init__(self):
        if self.grad_threshold <= 0 or self.scale_threshold <= 0:
            raise ValueError("thresholds must be positive")
        if self.opacity_prune <= 0:
            raise ValueError("opacity_prune must be positive")
        if self.camera_sampling not in ("cuboid", "training_views"):
            raise ValueError(f"unknown camera_sampling {self.camera_sampling!r}")


def _virtual_cameras(scene: Scene, cameras: list, cfg: DensifyConfig,
                     rng: np.random.Generator) -> list:
    """K viewpoints for the first-intersection probe."""
    if cfg.camera_sampling == "training_views":
        if not cameras:
            raise ValueError("training_views sampling needs training cameras")
        picks = rng.integers(0, len(cameras), size=VIRTUAL_CAMERAS)
        return [cameras[i] for i in picks]
    # cuboid mode: positions on the cuboid surface looking at the center
    lo, hi = scene.cuboid
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    width = cameras[0].width if cameras else 64
    height = cameras[0].height if cameras else 64
    fx = cameras[0].fx if cameras else 0.9 * width
    out = []
    for _ in range(VIRTUAL_CAMERAS):
        face = int(rng.integers(0, 6))
        p = center + rng.uniform(-1.0, 1.0, 3) * half
        p[face // 2] = center[face // 2] + (1.0 if face % 2 else -1.0) * half[face // 2]
        # nudge outward so the frustum covers the cuboid interior
        eye = center + 1.6 * (p - center)
        if np.linalg.norm(eye - center) < 1e-9:
            eye = center + np.array([0.0, 0.0, 1.6 * half[2] + 1e-3])
        up = np.array([0.0, 0.0, 1.0])
        if abs((eye - center) @ up) > 0.98 * np.linalg.norm(eye - center):
            up = np.array([0.0, 1.0, 0.0])
        out.append(lookat_camera(eye, center, fx=fx, width=width,
                                 height=height, up=up))
    return out


def surface_densify(scene: Scene, cameras: list, cfg: DensifyConfig,
                    rng: np.random.Generator,
                    budget: int = None) -> np.ndarray:
    """Indices of oversized first-intersection splats, sorted, deduplicated.

    With a budget, only the largest-scale candidates are kept (ties go to
    the lowest index), so one round never grows the scene by more than
    budget splats.
    """
    if len(scene) == 0 or budget is not None and budget <= 0:
        return np.empty(0, dtype=np.int64)
    seen = set()
    for cam in _virtual_cameras(scene, cameras, cfg, rng):
        hits = first_intersection_map(scene, cam)
        seen.update(int(i) for i in np.unique(hits) if i >= 0)
    if not seen:
        return np.empty(0, dtype=np.int64)
    idx = np.array(sorted(seen), dtype=np.int64)
    big = scene.scales[idx].max(axis=1) > cfg.scale_threshold * scene.extent
    idx = idx[big]
    if budget is not None and len(idx) > budget:
        order = np.argsort(-scene.scales[idx].max(axis=1), kind="stable")
        idx = np.sort(idx[order[:budget]])
    return idx


def axis_split(g: Gaussian) -> tuple:
    """Split one splat along its largest-scale axis into two children.

    Children sit at p +- (s_max/2)*a where a is the rotation-frame axis of
    the maximum scale; that axis' scale is halved, everything else copied.
    Ties break toward the lowest axis index.
    """
    scales = g.scales
    k = int(np.argmax(scales))    # first max wins ties
    R = quat_to_rotation(g.quat[None, :])[0]
    a = R[:, k]
    s_max = scales[k]
    child_logs = g.log_scales.copy()
    child_logs[k] = np.log(s_max / 2.0)

    def child(sign):
        return Gaussian(position=g.position + sign * (s_max / 2.0) * a,
                        quat=g.quat.copy(),
                        log_scales=child_logs.copy(),
                        opacity_logit=g.opacity_logit,
                        color=g.color.copy())

    return child(-1.0), child(+1.0)


def apply_axis_splits(scene: Scene, indices: np.ndarray) -> Scene:
    """Replace each selected parent with its two axis_split children.

    Survivors keep their relative order and come first; children are
    appended in parent order. Net +1 Gaussian per split.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        return scene.copy()
    keep = np.ones(len(scene), dtype=bool)
    keep[indices] = False
    kids = []
    for i in indices:
        kids.extend(axis_split(scene[int(i)]))
    base = Scene(positions=scene.positions[keep], quats=scene.quats[keep],
                 log_scales=scene.log_scales[keep],
                 opacity_logits=scene.opacity_logits[keep],
                 colors=scene.colors[keep], cuboid=scene.cuboid.copy())
    added = Scene.from_gaussians(kids, scene.cuboid.copy())
    return Scene(positions=np.concatenate([base.positions, added.positions]),
                 quats=np.concatenate([base.quats, added.quats]),
                 log_scales=np.concatenate([base.log_scales, added.log_scales]),
                 opacity_logits=np.concatenate([base.opacity_logits,
                                                added.opacity_logits]),
                 colors=np.concatenate([base.colors, added.colors]),
                 cuboid=scene.cuboid.copy())


@dataclass
class DensifyStats:
    iteration: int
    n_surface_split: int
    n_grad_clone: int
    n_grad_split: int
    n_pruned: int
    total: int

    def csv_row(self) -> str:
        return (f"{self.iteration},{self.n_surface_split},{self.n_grad_clone},"
                f"{self.n_grad_split},{self.n_pruned},{self.total}")


def baseline_densify_prune(scene: Scene, grad_norm_means: np.ndarray,
                           cfg: DensifyConfig, allow_grow: bool = True,
                           budget: int = None):
    """3DGS-style clone/split by gradient magnitude, then prune.

    Small high-gradient splats (max scale below PERCENT_DENSE of extent)
    are cloned in place; large ones are axis_split. Splats with opacity
    below the prune cut, or outside the expanded cuboid, are removed.
    A budget keeps only the highest-gradient candidates (ties to the
    lowest index); clone and split both grow the scene by one.

    Returns (new scene, survivors, n_pruned, clone_idx, split_idx). The
    new row order is old[survivors] ++ clones ++ split children, which is
    the contract optimizer-state remapping relies on; survivors excludes
    both pruned rows and split parents.
    """
    grad_norm_means = np.asarray(grad_norm_means, dtype=np.float64).reshape(len(scene))
    if budget is not None and budget <= 0:
        allow_grow = False
    hot = (grad_norm_means > cfg.grad_threshold) if allow_grow \
        else np.zeros(len(scene), dtype=bool)
    if budget is not None and hot.sum() > budget:
        cand = np.flatnonzero(hot)
        order = np.argsort(-grad_norm_means[cand], kind="stable")
        hot = np.zeros(len(scene), dtype=bool)
        hot[cand[order[:budget]]] = True
    small = scene.scales.max(axis=1) <= PERCENT_DENSE * scene.extent
    clone_idx = np.flatnonzero(hot & small)
    split_idx = np.flatnonzero(hot & ~small)

    keep = (scene.opacities >= cfg.opacity_prune) & scene.inside_expanded_cuboid()
    # parents being split are replaced by their children
    keep_after_split = keep.copy()
    keep_after_split[split_idx] = False

    rows = [scene.positions[keep_after_split]]
    quats = [scene.quats[keep_after_split]]
    logs = [scene.log_scales[keep_after_split]]
    opac = [scene.opacity_logits[keep_after_split]]
    cols = [scene.colors[keep_after_split]]

    clone_live = clone_idx[keep[clone_idx]]
    if len(clone_live):
        rows.append(scene.positions[clone_live])
        quats.append(scene.quats[clone_live])
        logs.append(scene.log_scales[clone_live])
        opac.append(scene.opacity_logits[clone_live])
        cols.append(scene.colors[clone_live])

    split_live = split_idx[keep[split_idx]]
    kids = []
    for i in split_live:
        kids.extend(axis_split(scene[int(i)]))
    if kids:
        added = Scene.from_gaussians(kids, scene.cuboid.copy())
        rows.append(added.positions)
        quats.append(added.quats)
        logs.append(added.log_scales)
        opac.append(added.opacity_logits)
        cols.append(added.colors)

    new_scene = Scene(positions=np.concatenate(rows),
                      quats=np.concatenate(quats),
                      log_scales=np.concatenate(logs),
                      opacity_logits=np.concatenate(opac),
                      colors=np.concatenate(cols),
                      cuboid=scene.cuboid.copy())
    return new_scene, keep_after_split, int((~keep).sum()), clone_live, split_live
