"""Tile-based forward splatting.

Per camera, Gaussians are projected to 2D splats, binned into 16x16 pixel
tiles, sorted front-to-back by center depth (ties by index), and
alpha-composited. Per-pixel blended color is left unnormalized; depth and
normal are alpha-weighted means. Depth per contributor is the ray/plane
intersection depth of the flattened splat, not its center depth.

The per-tile contributor matrices kept on the buffers are the exact record
the backward pass replays, so forward and backward always see the same
branch decisions (skip, clamp, termination).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import (COV2D_DILATION, NEAR_PLANE, PARALLEL_EPS, Camera,
                       Ray, quat_to_rotation)
from .scene import SH_C1, Scene, scene_normal_axes, sigmoid

TILE_SIZE = 16
ALPHA_SKIP = 1.0 / 255.0
ALPHA_CLAMP = 0.99
T_TERMINATE = 1e-4
# Intersection depths clamped to this window around the center depth so
# plane-grazing rays cannot poison the depth blend.
DEPTH_CLAMP_LO = 0.2
DEPTH_CLAMP_HI = 5.0


def intersection_depth(n: np.ndarray, p: np.ndarray, ray: Ray) -> float:
    """Depth (camera z) where a ray meets the plane through p with normal n.

    Solves n . (r t - p) = 0 and returns r_z * t. Falls back to the center
    depth p_z when the ray is parallel to the plane within PARALLEL_EPS.
    """
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(ray.direction, dtype=np.float64)
    ndr = float(n @ r)
    if abs(ndr) < PARALLEL_EPS:
        return float(p[2])
    return float(r[2] * (n @ p) / ndr)


@dataclass
class SplatProjection:
    """Per-camera 2D splat data for the visible subset of a scene.

    All arrays are indexed by visible-splat slot; ``indices`` maps slots
    back to scene rows.
    """
    indices: np.ndarray        # (K,) scene row of each visible splat
    mean2d: np.ndarray         # (K, 2) projected center, pixels
    inv_cov2d: np.ndarray      # (K, 2, 2) inverse dilated 2D covariance
    depth: np.ndarray          # (K,) camera z of the center (sort key)
    p_cam: np.ndarray          # (K, 3) center in camera coordinates
    normal_cam: np.ndarray     # (K, 3) camera-facing unit normal
    plane_offset: np.ndarray   # (K,) n . p in camera coordinates
    color_eval: np.ndarray     # (K, 3) SH-evaluated color for this view
    opacity: np.ndarray        # (K,)
    bbox: np.ndarray           # (K, 4) inclusive pixel bounds u0,u1,v0,v1
    normal_axis: np.ndarray    # (K,) argmin scale axis
    flip_sign: np.ndarray      # (K,) +-1 applied to face the camera
    view_dir_world: np.ndarray  # (K, 3) unit camera->center, world frame
    cov2d: np.ndarray          # (K, 2, 2) dilated 2D covariance


def prepare_splats(scene: Scene, cam: Camera) -> SplatProjection:
    """Project, cull, and orient every potentially-visible Gaussian."""
    p_cam_all = scene.positions @ cam.world_to_cam_rot.T + cam.world_to_cam_trans
    opac_all = sigmoid(scene.opacity_logits)
    # A splat can never reach the 1/255 contribution cut if its peak
    # opacity is already below it.
    keep = (p_cam_all[:, 2] > NEAR_PLANE) & (opac_all * 255.0 > 1.0)
    idx = np.nonzero(keep)[0]
    k = len(idx)
    if k == 0:
        return SplatProjection(
            indices=idx, mean2d=np.zeros((0, 2)), inv_cov2d=np.zeros((0, 2, 2)),
            depth=np.zeros(0), p_cam=np.zeros((0, 3)), normal_cam=np.zeros((0, 3)),
            plane_offset=np.zeros(0), color_eval=np.zeros((0, 3)), opacity=np.zeros(0),
            bbox=np.zeros((0, 4), dtype=np.int64), normal_axis=np.zeros(0, dtype=np.int64),
            flip_sign=np.zeros(0), view_dir_world=np.zeros((0, 3)),
            cov2d=np.zeros((0, 2, 2)))

    p_cam = p_cam_all[idx]
    opacity = opac_all[idx]
    z = p_cam[:, 2]
    mean2d = np.stack([cam.fx * p_cam[:, 0] / z + cam.cx,
                       cam.fy * p_cam[:, 1] / z + cam.cy], axis=1)

    R = quat_to_rotation(scene.quats[idx])
    scales = np.exp(scene.log_scales[idx])
    RS = R * scales[:, None, :]
    cov3 = RS @ np.swapaxes(RS, 1, 2)

    J = np.zeros((k, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * p_cam[:, 0] / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * p_cam[:, 1] / (z * z)
    U = J @ cam.world_to_cam_rot[None, :, :]
    cov2 = U @ cov3 @ np.swapaxes(U, 1, 2)
    cov2[:, 0, 0] += COV2D_DILATION
    cov2[:, 1, 1] += COV2D_DILATION

    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] * cov2[:, 1, 0]
    inv = np.empty_like(cov2)
    inv[:, 0, 0] = cov2[:, 1, 1] / det
    inv[:, 1, 1] = cov2[:, 0, 0] / det
    inv[:, 0, 1] = -cov2[:, 0, 1] / det
    inv[:, 1, 0] = -cov2[:, 1, 0] / det

    # Support radius of the alpha >= 1/255 region: mahalanobis <= 2 ln(255 o).
    m_cut = 2.0 * np.log(255.0 * opacity)
    half_u = np.sqrt(np.maximum(m_cut * cov2[:, 0, 0], 0.0))
    half_v = np.sqrt(np.maximum(m_cut * cov2[:, 1, 1], 0.0))
    u0 = np.floor(mean2d[:, 0] - half_u - 0.5).astype(np.int64)
    u1 = np.ceil(mean2d[:, 0] + half_u - 0.5).astype(np.int64)
    v0 = np.floor(mean2d[:, 1] - half_v - 0.5).astype(np.int64)
    v1 = np.ceil(mean2d[:, 1] + half_v - 0.5).astype(np.int64)
    bbox = np.stack([np.clip(u0, 0, cam.width - 1), np.clip(u1, 0, cam.width - 1),
                     np.clip(v0, 0, cam.height - 1), np.clip(v1, 0, cam.height - 1)],
                    axis=1)
    on_screen = (u1 >= 0) & (u0 <= cam.width - 1) & (v1 >= 0) & (v0 <= cam.height - 1)

    n_world, axis = scene_normal_axes(scene)
    n_world = n_world[idx]
    axis = axis[idx]
    view_dir = scene.positions[idx] - cam.center_world
    view_dir = view_dir / np.linalg.norm(view_dir, axis=1, keepdims=True)
    flip = np.where(np.einsum("kd,kd->k", n_world, view_dir) > 0.0, -1.0, 1.0)
    normal_cam = (flip[:, None] * n_world) @ cam.world_to_cam_rot.T
    plane_offset = np.einsum("kd,kd->k", normal_cam, p_cam)

    x, y, zc = view_dir[:, 0], view_dir[:, 1], view_dir[:, 2]
    col = scene.colors[idx]
    color_eval = (col[:, 0:3]
                  + SH_C1 * (-y)[:, None] * col[:, 3:6]
                  + SH_C1 * zc[:, None] * col[:, 6:9]
                  + SH_C1 * (-x)[:, None] * col[:, 9:12])

    sel = np.nonzero(on_screen)[0]
    return SplatProjection(
        indices=idx[sel], mean2d=mean2d[sel], inv_cov2d=inv[sel], depth=z[sel],
        p_cam=p_cam[sel], normal_cam=normal_cam[sel], plane_offset=plane_offset[sel],
        color_eval=color_eval[sel], opacity=opacity[sel], bbox=bbox[sel],
        normal_axis=axis[sel], flip_sign=flip[sel], view_dir_world=view_dir[sel],
        cov2d=cov2[sel])


def splat_alpha(splats: SplatProjection, rows, px: np.ndarray, py: np.ndarray):
    """Alpha of the given splat rows at pixel centers (px, py).

    Returns (alpha, clamped) with the skip (< 1/255) rule applied; both are
    (len(rows), len(px)) arrays. This is the single evaluation path shared
    by the tiled rasterizer, the reference rasterizer, and the backward
    pass, so branch decisions always agree bit-for-bit.
    """
    dx = px[None, :] - splats.mean2d[rows, 0][:, None]
    dy = py[None, :] - splats.mean2d[rows, 1][:, None]
    a = splats.inv_cov2d[rows, 0, 0][:, None]
    b = splats.inv_cov2d[rows, 0, 1][:, None]
    c = splats.inv_cov2d[rows, 1, 1][:, None]
    # m = a dx^2 + 2 b dx dy + c dy^2, built in place
    m = a * dx
    t = b * dy
    t *= 2.0
    m += t
    m *= dx
    np.multiply(c, dy, out=t)
    t *= dy
    m += t
    m *= -0.5
    np.exp(m, out=m)
    m *= splats.opacity[rows][:, None]
    clamped = m > ALPHA_CLAMP
    alpha = np.where(clamped, ALPHA_CLAMP, m)
    alpha[alpha < ALPHA_SKIP] = 0.0
    return alpha, clamped


def splat_pixel_depths(splats: SplatProjection, rows, rays: np.ndarray):
    """Intersection depth of splat planes along per-pixel rays.

    rays: (P, 3) unit directions. Returns (depth, branch) where branch is
    0 = plane intersection, 1 = parallel fallback to the center depth,
    2 = clamped low, 3 = clamped high.
    """
    n = splats.normal_cam[rows]
    ndr = n @ rays.T                                  # (K, P)
    rz = rays[:, 2][None, :]
    off = splats.plane_offset[rows][:, None]
    pz = splats.depth[rows][:, None]
    parallel = np.abs(ndr) < PARALLEL_EPS
    safe = np.where(parallel, 1.0, ndr)
    d = rz * off
    d /= safe
    lo, hi = DEPTH_CLAMP_LO * pz, DEPTH_CLAMP_HI * pz
    branch = np.zeros(d.shape, dtype=np.int8)
    branch[d < lo] = 2
    branch[d > hi] = 3
    np.clip(d, lo, hi, out=d)
    d = np.where(parallel, pz, d)
    branch[parallel] = 1
    return d, branch


@dataclass
class TileRecord:
    """Contributor matrices of one tile, in front-to-back order.

    depths/branch/weights/t_before are the forward pass's intermediates,
    kept so the backward replay never recomputes them.
    """
    y0: int
    y1: int
    x0: int
    x1: int
    rows: np.ndarray     # (K,) slots into the SplatProjection
    alphas: np.ndarray   # (K, P) effective alpha; 0 = skipped or terminated
    clamped: np.ndarray  # (K, P) alpha hit the 0.99 clamp
    depths: np.ndarray   # (K, P) per-pixel plane-intersection depth
    branch: np.ndarray   # (K, P) int8 depth branch (0 plane, 1 parallel, 2/3 clamps)
    weights: np.ndarray  # (K, P) alpha * transmittance-before
    t_before: np.ndarray # (K, P)


@dataclass
class RenderBuffers:
    """Per-pixel outputs of one forward pass plus its replayable records."""
    color: np.ndarray        # (H, W, 3) unnormalized blend over black
    alpha: np.ndarray        # (H, W)
    depth_raw: np.ndarray    # (H, W) alpha-weighted depth sum
    normal_raw: np.ndarray   # (H, W, 3) alpha-weighted normal sum
    first_hit: np.ndarray    # (H, W) scene row of the front contributor, -1 none
    splats: SplatProjection
    tiles: list = field(default_factory=list)
    camera: Camera = None

    @property
    def depth_mean(self) -> np.ndarray:
        """Alpha-normalized blended depth; 0 where nothing rendered."""
        out = np.zeros_like(self.depth_raw)
        np.divide(self.depth_raw, self.alpha, out=out, where=self.alpha > 0)
        return out

    @property
    def normal_mean(self) -> np.ndarray:
        """Alpha-normalized blended normal (norm <= 1); 0 where empty."""
        out = np.zeros_like(self.normal_raw)
        np.divide(self.normal_raw, self.alpha[..., None], out=out,
                  where=self.alpha[..., None] > 0)
        return out

    def contributors(self, u: int, v: int):
        """Ordered (scene row, alpha, transmittance) records at pixel (u, v)."""
        for rec in self.tiles:
            if rec.y0 <= v < rec.y1 and rec.x0 <= u < rec.x1:
                p = (v - rec.y0) * (rec.x1 - rec.x0) + (u - rec.x0)
                out = []
                t = 1.0
                for k in range(len(rec.rows)):
                    a = rec.alphas[k, p]
                    if a > 0.0:
                        out.append((int(self.splats.indices[rec.rows[k]]), float(a), t))
                        t *= 1.0 - a
                return out
        return []


def _tile_ranges(size: int):
    edges = list(range(0, size, TILE_SIZE)) + [size]
    return list(zip(edges[:-1], edges[1:]))


def _composite_tile(splats, rows, y0, y1, x0, x1, rays_tile, dtype):
    """Forward-composite the sorted splat rows over one tile's pixels."""
    px = (np.arange(x0, x1) + 0.5).astype(np.float64)
    py = (np.arange(y0, y1) + 0.5).astype(np.float64)
    pu, pv = np.meshgrid(px, py)
    pu, pv = pu.ravel(), pv.ravel()

    alpha, clamped = splat_alpha(splats, rows, pu, pv)
    alpha = alpha.astype(dtype, copy=False)
    one_minus = 1.0 - alpha
    t_after = np.cumprod(one_minus, axis=0)
    t_before = np.vstack([np.ones((1, alpha.shape[1]), dtype=dtype), t_after[:-1]])
    include = t_after >= T_TERMINATE
    alpha_eff = np.where(include, alpha, 0.0)
    weights = alpha_eff * t_before

    d, branch = splat_pixel_depths(splats, rows, rays_tile)
    d = d.astype(dtype, copy=False)
    color = weights.T @ splats.color_eval[rows].astype(dtype, copy=False)
    normal = weights.T @ splats.normal_cam[rows].astype(dtype, copy=False)
    depth = np.einsum("kp,kp->p", weights, d)
    acc_alpha = weights.sum(axis=0)

    contrib = alpha_eff > 0.0
    has = contrib.any(axis=0)
    first_k = np.argmax(contrib, axis=0)
    first = np.where(has, splats.indices[rows][first_k], -1)

    rec = TileRecord(y0=y0, y1=y1, x0=x0, x1=x1, rows=rows,
                     alphas=alpha_eff, clamped=clamped & include,
                     depths=d, branch=branch, weights=weights,
                     t_before=t_before)
    return color, acc_alpha, depth, normal, first, rec


def rasterize(scene: Scene, cam: Camera, dtype=np.float64, threads: int = 1) -> RenderBuffers:
    """Render color/alpha/depth/normal buffers for one camera.

    Deterministic for any thread count: tiles are independent and written
    to disjoint pixel ranges.
    """
    H, W = cam.height, cam.width
    splats = prepare_splats(scene, cam)
    order = np.lexsort((splats.indices, splats.depth))

    buf = RenderBuffers(
        color=np.zeros((H, W, 3), dtype=dtype),
        alpha=np.zeros((H, W), dtype=dtype),
        depth_raw=np.zeros((H, W), dtype=dtype),
        normal_raw=np.zeros((H, W, 3), dtype=dtype),
        first_hit=np.full((H, W), -1, dtype=np.int64),
        splats=splats, tiles=[], camera=cam)
    if len(order) == 0:
        return buf

    rays = cam.pixel_ray_grid()
    bbox = splats.bbox[order]
    tiles = []
    for y0, y1 in _tile_ranges(H):
        for x0, x1 in _tile_ranges(W):
            hit = ((bbox[:, 0] < x1) & (bbox[:, 1] >= x0) &
                   (bbox[:, 2] < y1) & (bbox[:, 3] >= y0))
            rows = order[hit]
            if len(rows):
                tiles.append((y0, y1, x0, x1, rows))

    def run(tile):
        y0, y1, x0, x1, rows = tile
        rays_tile = rays[y0:y1, x0:x1].reshape(-1, 3)
        return tile, _composite_tile(splats, rows, y0, y1, x0, x1, rays_tile, dtype)

    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tiles))
    else:
        results = [run(t) for t in tiles]

    for (y0, y1, x0, x1, rows), (color, acc, depth, normal, first, rec) in results:
        shape = (y1 - y0, x1 - x0)
        buf.color[y0:y1, x0:x1] = color.reshape(shape + (3,))
        buf.alpha[y0:y1, x0:x1] = acc.reshape(shape)
        buf.depth_raw[y0:y1, x0:x1] = depth.reshape(shape)
        buf.normal_raw[y0:y1, x0:x1] = normal.reshape(shape + (3,))
        buf.first_hit[y0:y1, x0:x1] = first.reshape(shape)
        buf.tiles.append(rec)
    return buf


def rasterize_reference(scene: Scene, cam: Camera) -> RenderBuffers:
    """Brute-force per-pixel rasterizer used as the correctness oracle.

    No tiles, no bounding boxes: every splat is evaluated at every pixel,
    globally sorted by (center depth, index), composited front to back
    with the same skip/clamp/termination rules as the tiled path.
    """
    H, W = cam.height, cam.width
    splats = prepare_splats(scene, cam)
    order = np.lexsort((splats.indices, splats.depth))
    rays = cam.pixel_ray_grid()

    buf = RenderBuffers(
        color=np.zeros((H, W, 3)), alpha=np.zeros((H, W)),
        depth_raw=np.zeros((H, W)), normal_raw=np.zeros((H, W, 3)),
        first_hit=np.full((H, W), -1, dtype=np.int64),
        splats=splats, tiles=[], camera=cam)

    for v in range(H):
        for u in range(W):
            pu = np.array([u + 0.5])
            pv = np.array([v + 0.5])
            alpha, _ = splat_alpha(splats, order, pu, pv)
            d, _ = splat_pixel_depths(splats, order, rays[v, u][None, :])
            t = 1.0
            for k in range(len(order)):
                a = float(alpha[k, 0])
                if a <= 0.0:
                    continue
                t_after = t * (1.0 - a)
                if t_after < T_TERMINATE:
                    break
                if buf.first_hit[v, u] < 0:
                    buf.first_hit[v, u] = splats.indices[order[k]]
                w = a * t
                buf.color[v, u] += w * splats.color_eval[order[k]]
                buf.normal_raw[v, u] += w * splats.normal_cam[order[k]]
                buf.depth_raw[v, u] += w * float(d[k, 0])
                buf.alpha[v, u] += w
                t = t_after
    return buf


def first_intersection_map(scene: Scene, cam: Camera) -> np.ndarray:
    """Scene row of the front-most splat with alpha above 1/255 per pixel.

    -1 where no splat passes the cut.
    """
    return rasterize(scene, cam).first_hit
