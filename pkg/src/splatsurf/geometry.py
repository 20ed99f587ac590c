"""Rotation algebra, covariance construction, and the pinhole camera model.

Conventions used throughout the package:

- Quaternions are (w, x, y, z), normalized on use; q and -q encode the same
  rotation.
- Camera frame is +z forward, y down (image row direction), x right.
- Depth always means the camera-frame z coordinate, not ray length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Near-plane depth below which a Gaussian center is culled, world units.
NEAR_PLANE = 0.01
# Low-pass dilation added to the projected 2D covariance diagonal, px^2.
COV2D_DILATION = 0.3
# |n . r| below this counts as a ray parallel to a splat plane.
PARALLEL_EPS = 1e-6


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm. Raises on (near-)zero quaternions."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("zero-norm quaternion")
    return q / norm


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion.

    Accepts a single (4,) quaternion or a batch (..., 4); the input is
    normalized first, so q and -q map to the same matrix.
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of quat_to_rotation up to sign (w is made non-negative)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


def quat_rotation_jacobian(q_unit: np.ndarray) -> np.ndarray:
    """dR/dq at a unit quaternion, shape (4, 3, 3).

    Derivative of the unit-quaternion rotation formula; chain through
    quat_normalize separately when q is stored unnormalized.
    """
    w, x, y, z = q_unit
    dw = 2.0 * np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    dx = 2.0 * np.array([[0.0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = 2.0 * np.array([[-2 * y, x, w], [x, 0.0, z], [-w, z, -2 * y]])
    dz = 2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0.0]])
    return np.stack([dw, dx, dy, dz])


def build_covariance(q: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """3D covariance R diag(s^2) R^T of one Gaussian (or a batch)."""
    scales = np.asarray(scales, dtype=np.float64)
    if np.any(scales <= 0.0):
        raise ValueError("scales must be strictly positive")
    R = quat_to_rotation(q)
    RS = R * scales[..., None, :]
    return RS @ np.swapaxes(RS, -1, -2)


def perspective_jacobian(p_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """2x3 Jacobian of (fx*x/z + cx, fy*y/z + cy) at a camera-frame point."""
    x, y, z = p_cam
    return np.array([
        [fx / z, 0.0, -fx * x / (z * z)],
        [0.0, fy / z, -fy * y / (z * z)],
    ])


@dataclass(frozen=True)
class Ray:
    """A ray in camera coordinates; origin is the camera center."""
    origin: np.ndarray
    direction: np.ndarray


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera transform.

    ``world_to_cam_rot`` is orthonormal; a world point p maps to camera
    coordinates as ``R @ p + t``.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam_rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    world_to_cam_trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        self.world_to_cam_rot = np.asarray(self.world_to_cam_rot, dtype=np.float64)
        self.world_to_cam_trans = np.asarray(self.world_to_cam_trans, dtype=np.float64)
        RtR = self.world_to_cam_rot.T @ self.world_to_cam_rot
        if not np.allclose(RtR, np.eye(3), atol=1e-8):
            raise ValueError("world_to_cam rotation is not orthonormal")

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera coordinates."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.world_to_cam_rot.T + self.world_to_cam_trans

    @property
    def center_world(self) -> np.ndarray:
        """Camera center expressed in world coordinates."""
        return -self.world_to_cam_rot.T @ self.world_to_cam_trans

    def pixel_ray(self, u: int, v: int) -> Ray:
        """Unit ray through the center of pixel (u, v), camera frame."""
        if not (0 <= u < self.width and 0 <= v < self.height):
            raise ValueError(f"pixel ({u}, {v}) outside {self.width}x{self.height} image")
        d = np.array([(u + 0.5 - self.cx) / self.fx,
                      (v + 0.5 - self.cy) / self.fy,
                      1.0])
        return Ray(origin=np.zeros(3), direction=d / np.linalg.norm(d))

    def pixel_ray_grid(self) -> np.ndarray:
        """Unit directions through every pixel center, shape (H, W, 3)."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        d = np.empty((self.height, self.width, 3))
        d[..., 0] = u[None, :]
        d[..., 1] = v[:, None]
        d[..., 2] = 1.0
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, p_cam: np.ndarray) -> np.ndarray:
        """Camera-frame points (..., 3) to pixel coordinates (..., 2)."""
        p_cam = np.asarray(p_cam, dtype=np.float64)
        z = p_cam[..., 2]
        return np.stack([self.fx * p_cam[..., 0] / z + self.cx,
                         self.fy * p_cam[..., 1] / z + self.cy], axis=-1)


def project_covariance(cov3: np.ndarray, cam: Camera, p_cam: np.ndarray):
    """Project a world-frame 3D covariance to the dilated 2D splat covariance.

    Returns the 2x2 matrix J W cov3 W^T J^T + dilation, or None when the
    point is behind the near plane (culled, not an error).
    """
    p_cam = np.asarray(p_cam, dtype=np.float64)
    if p_cam[2] <= NEAR_PLANE:
        return None
    J = perspective_jacobian(p_cam, cam.fx, cam.fy)
    U = J @ cam.world_to_cam_rot
    cov2 = U @ cov3 @ U.T
    return cov2 + COV2D_DILATION * np.eye(2)


def lookat_camera(eye, target, fx: float, width: int, height: int,
                  up=(0.0, 0.0, 1.0), fy: float = None) -> Camera:
    """Camera at eye looking toward target, +z forward, image y downward.

    up fixes the roll; it must not be parallel to the view direction.
    Principal point sits at the image center.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n == 0.0:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-8:
        raise ValueError("up direction parallel to the view direction")
    right = right / rn
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return Camera(fx=fx, fy=fx if fy is None else fy,
                  cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height,
                  world_to_cam_rot=rot, world_to_cam_trans=-rot @ eye)
