"""Gaussian container: parameterization, derived normals, init, PLY I/O.

Scales are stored as logs and opacity as a logit so unconstrained
optimization keeps them in-domain. Storage is struct-of-arrays; ``scene[i]``
materializes a single-splat view for convenience.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import quat_to_rotation

# 3 base color channels + 9 degree-1 SH coefficients.
COLOR_DIM = 12
SH_C1 = 0.4886025119029199

INIT_OPACITY = 0.1
INIT_SCALE_MIN = 1e-4

PLY_PROPERTIES = (
    "x", "y", "z",
    "quat_w", "quat_x", "quat_y", "quat_z",
    "log_scale_1", "log_scale_2", "log_scale_3",
    "opacity_logit",
) + tuple(f"c_{i}" for i in range(COLOR_DIM))


class PlyError(ValueError):
    pass


class PlyHeaderError(PlyError):
    pass


class PlyPropertyError(PlyError):
    pass


class PlyTruncatedError(PlyError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


@dataclass
class Gaussian:
    """A single splat (copy of one Scene row)."""
    position: np.ndarray
    quat: np.ndarray
    log_scales: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class Scene:
    """All Gaussians of one reconstruction plus the scene bounding cuboid.

    ``cuboid`` is a (2, 3) array of [min corner; max corner], world units.
    Single-writer: mutate only between render/optimize phases.
    """
    positions: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    cuboid: np.ndarray

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, COLOR_DIM)
        self.cuboid = np.asarray(self.cuboid, dtype=np.float64).reshape(2, 3)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i].copy(),
            quat=self.quats[i].copy(),
            log_scales=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            color=self.colors[i].copy(),
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def extent(self) -> float:
        """Cuboid diagonal length; the scene-relative scale reference."""
        return float(np.linalg.norm(self.cuboid[1] - self.cuboid[0]))

    def params(self) -> dict:
        """Parameter arrays by class, in optimizer order."""
        return {
            "positions": self.positions,
            "quats": self.quats,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "colors": self.colors,
        }

    def copy(self) -> "Scene":
        return Scene(self.positions.copy(), self.quats.copy(), self.log_scales.copy(),
                     self.opacity_logits.copy(), self.colors.copy(), self.cuboid.copy())

    def inside_expanded_cuboid(self, factor: float = 1.5) -> np.ndarray:
        """Boolean mask of Gaussians inside the cuboid expanded about its center."""
        center = 0.5 * (self.cuboid[0] + self.cuboid[1])
        half = 0.5 * factor * (self.cuboid[1] - self.cuboid[0])
        return np.all(np.abs(self.positions - center) <= half + 1e-12, axis=1)

    @staticmethod
    def from_gaussians(gaussians: list, cuboid) -> "Scene":
        n = len(gaussians)
        scene = Scene(
            positions=np.array([g.position for g in gaussians]).reshape(n, 3),
            quats=np.array([g.quat for g in gaussians]).reshape(n, 4),
            log_scales=np.array([g.log_scales for g in gaussians]).reshape(n, 3),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]).reshape(n),
            colors=np.array([g.color for g in gaussians]).reshape(n, COLOR_DIM),
            cuboid=cuboid,
        )
        return scene


def gaussian_normal(g: Gaussian, view_dir: np.ndarray) -> np.ndarray:
    """Unit normal of a splat: the rotation column of its smallest scale
    axis (the eigenvector of R diag(s^2) R^T with minimal eigenvalue),
    sign-flipped to face the camera (n . view_dir < 0).

    Scale ties break toward the lowest axis index (np.argmin convention).
    """
    R = quat_to_rotation(g.quat)
    k = int(np.argmin(g.scales))
    n = R[:, k].copy()
    if float(n @ view_dir) > 0.0:
        n = -n
    return n


def scene_normal_axes(scene: Scene):
    """Per-Gaussian min-scale axis columns (world frame, unflipped) and indices."""
    R = quat_to_rotation(scene.quats)
    k = np.argmin(np.exp(scene.log_scales), axis=1)
    idx = np.arange(len(scene))
    return R[idx, :, k], k


def init_from_points(points: np.ndarray, colors: np.ndarray, cuboid=None) -> Scene:
    """Build an isotropic-splat scene from a sparse point cloud.

    Initial scale per point is the mean distance to its 3 nearest
    neighbors, clamped to [1e-4, cuboid_diagonal / 10]; opacity starts at
    0.1, rotation at identity, base color from ``colors`` with zero SH.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise ValueError("need at least one input point")
    if len(colors) != n:
        raise ValueError("points and colors length mismatch")

    if cuboid is None:
        cuboid = np.stack([points.min(axis=0), points.max(axis=0)])
    cuboid = np.asarray(cuboid, dtype=np.float64).reshape(2, 3)
    diag = float(np.linalg.norm(cuboid[1] - cuboid[0]))
    scale_hi = max(diag / 10.0, INIT_SCALE_MIN)

    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(points).query(points, k=k)
        nn = dist[:, 1:]  # drop self
        mean_nn = nn.mean(axis=1)
    else:
        mean_nn = np.zeros(1)
    scales = np.clip(mean_nn, INIT_SCALE_MIN, scale_hi)

    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    color_block = np.zeros((n, COLOR_DIM))
    color_block[:, :3] = colors
    return Scene(
        positions=points.copy(),
        quats=quats,
        log_scales=np.log(scales)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(n, logit(INIT_OPACITY)),
        colors=color_block,
        cuboid=cuboid,
    )


def shade_color(color: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Evaluate base + degree-1 SH color for a unit view direction.

    Layout of the 12 coefficients: [base rgb, c1 rgb, c2 rgb, c3 rgb] with
    basis (-C1*y, +C1*z, -C1*x) in the 3DGS ordering.
    """
    x, y, z = view_dir
    return (color[..., 0:3]
            + SH_C1 * (-y) * color[..., 3:6]
            + SH_C1 * z * color[..., 6:9]
            + SH_C1 * (-x) * color[..., 9:12])


# --- binary PLY ---------------------------------------------------------

def save_ply(scene: Scene) -> bytes:
    """Serialize a scene to binary little-endian PLY (double precision)."""
    n = len(scene)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property double {name}" for name in PLY_PROPERTIES]
    header += ["element cuboid 2", "property double x", "property double y",
               "property double z", "end_header"]
    body = np.hstack([
        scene.positions,
        scene.quats,
        scene.log_scales,
        scene.opacity_logits[:, None],
        scene.colors,
    ]).astype("<f8")
    out = ("\n".join(header) + "\n").encode("ascii")
    return out + body.tobytes() + scene.cuboid.astype("<f8").tobytes()


def load_ply(data: bytes) -> Scene:
    """Parse bytes written by save_ply back into a Scene (bit-exact)."""
    end_marker = b"end_header\n"
    end = data.find(end_marker)
    if not data.startswith(b"ply\n") or end < 0:
        raise PlyHeaderError("malformed PLY header")
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(end_marker):]

    if "format binary_little_endian 1.0" not in header_lines[1:]:
        raise PlyHeaderError("expected binary_little_endian format")

    elements = []  # (name, count, [property names])
    for line in header_lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyHeaderError(f"malformed element line: {line!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyHeaderError("property before any element")
            if parts[1] != "double":
                raise PlyPropertyError(f"property {parts[-1]!r} is not double")
            elements[-1][2].append(parts[2])

    by_name = {name: (count, props) for name, count, props in elements}
    if "vertex" not in by_name:
        raise PlyHeaderError("missing vertex element")
    n, props = by_name["vertex"]
    for want in PLY_PROPERTIES:
        if want not in props:
            raise PlyPropertyError(f"missing vertex property {want!r}")
    if tuple(props) != PLY_PROPERTIES:
        raise PlyPropertyError("unexpected vertex property set or order")
    if "cuboid" not in by_name or by_name["cuboid"][0] != 2:
        raise PlyHeaderError("missing cuboid element")

    n_props = len(PLY_PROPERTIES)
    need = n * n_props * 8 + 2 * 3 * 8
    if len(body) < need:
        raise PlyTruncatedError(f"body truncated: need {need} bytes, have {len(body)}")
    vertex = np.frombuffer(body[:n * n_props * 8], dtype="<f8").reshape(n, n_props)
    cuboid = np.frombuffer(body[n * n_props * 8:need], dtype="<f8").reshape(2, 3)
    return Scene(
        positions=vertex[:, 0:3],
        quats=vertex[:, 3:7],
        log_scales=vertex[:, 7:10],
        opacity_logits=vertex[:, 10],
        colors=vertex[:, 11:11 + COLOR_DIM],
        cuboid=cuboid,
    )
