"""Shared scene/camera builders for the test suite."""

import numpy as np

from splatsurf.geometry import Camera
from splatsurf.scene import Scene, logit

UNIT_CUBOID = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def axial_camera(size=16, fx=None, cx=None, cy=None):
    """Identity-pose pinhole camera at the world origin looking down +z.

    cx defaults to (size - 1) / 2 + 0.5 so the center pixel's ray is exactly
    the optical axis.
    """
    fx = float(size) if fx is None else float(fx)
    cx = size / 2.0 - 0.5 if cx is None else cx
    cy = cx if cy is None else cy
    return Camera(fx=fx, fy=fx, cx=cx, cy=cy, width=size, height=size)


def flat_scene(positions, in_plane=0.6, flat=1e-3, opacity=0.9, colors=None,
               quats=None, cuboid=None):
    """Fronto-parallel flattened splats (normal axis = z) at given centers."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    if quats is None:
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
    log_scales = np.tile(np.log([in_plane, in_plane, flat]), (n, 1))
    color_block = np.zeros((n, 12))
    if colors is None:
        color_block[:, 0:3] = 0.5
    else:
        color_block[:, 0:3] = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if cuboid is None:
        lo = positions.min(axis=0) - 2.0
        hi = positions.max(axis=0) + 2.0
        cuboid = np.stack([lo, hi])
    return Scene(positions=positions.copy(), quats=np.asarray(quats, float),
                 log_scales=log_scales,
                 opacity_logits=np.full(n, logit(opacity)),
                 colors=color_block, cuboid=np.asarray(cuboid, float))


def empty_scene(cuboid=None):
    if cuboid is None:
        cuboid = UNIT_CUBOID
    return Scene(positions=np.zeros((0, 3)), quats=np.zeros((0, 4)),
                 log_scales=np.zeros((0, 3)), opacity_logits=np.zeros(0),
                 colors=np.zeros((0, 12)), cuboid=np.asarray(cuboid, float))
