"""Pinhole camera model: projection, FOV-derived intrinsics, camera rings.

Extrinsics use the world-to-camera convention: x_cam = R @ x_world + t, with
the camera looking down +z and pixel v growing downward.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, RigfitError
from .optim import dual as dm
from .optim.dual import Dual

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3,3) world-to-camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise RigfitError("focal lengths must be positive")
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (3, 3):
            raise RigfitError("rotation must be 3x3")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or np.linalg.det(R) < 0:
            raise RigfitError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points):
        return np.atleast_2d(points) @ self.rotation.T + self.translation

    def matrix34(self):
        """3x4 projection matrix K [R|t]."""
        K = np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])
        return K @ np.hstack([self.rotation, self.translation[:, None]])


def project(cam, points):
    """Project world points (K,3) or (3,) to pixels; raises behind the camera."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    Xc = cam.to_camera(pts)
    z = Xc[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCameraError(f"point depth {z.min():.3g} <= {MIN_DEPTH:g}")
    uv = np.stack([cam.fx * Xc[:, 0] / z + cam.cx, cam.fy * Xc[:, 1] / z + cam.cy], axis=1)
    return uv[0] if single else uv


def project_depths(cam, points):
    """Camera-frame depths of world points (no behind-camera check)."""
    return cam.to_camera(np.asarray(points, dtype=float))[:, 2]


def project_clamped(cam_R, cam_t, intr, points):
    """Differentiable projection used inside fitting residuals.

    Depth is clamped at MIN_DEPTH instead of raising so the residual vector
    keeps a fixed size; callers exclude keypoints that start behind the
    camera. Any argument may be Dual.
    """
    fx, fy, cx, cy = intr
    Xc = dm.rotate(cam_R, points) + cam_t
    x, y, z = Xc[..., 0], Xc[..., 1], Xc[..., 2]
    zv = z.val if isinstance(z, Dual) else z
    z = dm.where(zv > MIN_DEPTH, z, np.full_like(zv, MIN_DEPTH))
    return dm.stack_last([x / z * fx + cx, y / z * fy + cy])


def unproject(cam, pixel, depth):
    """World point on the ray through a pixel at the given camera depth."""
    u, v = pixel
    ray = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    return cam.rotation.T @ (ray * depth - cam.translation)


def intrinsics_from_fov(hfov_deg, width, height):
    """Focal and principal point from a horizontal field of view in degrees."""
    if not 0.0 < hfov_deg < 180.0:
        raise RigfitError(f"horizontal FOV must be in (0, 180), got {hfov_deg}")
    f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    return {"fx": f, "fy": f, "cx": width / 2.0, "cy": height / 2.0}


def camera_from_fov(hfov_deg, width, height, rotation=None, translation=None):
    intr = intrinsics_from_fov(hfov_deg, width, height)
    return Camera(
        rotation=np.eye(3) if rotation is None else rotation,
        translation=np.zeros(3) if translation is None else translation,
        width=width, height=height, **intr,
    )


def look_at(position, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera rotation/translation with the target on the optical axis."""
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise RigfitError("camera position coincides with its target")
    forward = forward / fn
    right = np.cross(forward, np.asarray(up, dtype=float))
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise RigfitError("up vector is parallel to the view direction")
    right = right / rn
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ position


def camera_ring(n, radius, target, hfov_deg=60.0, width=512, height=512, tilt=0.0):
    """n cameras evenly spaced in azimuth, all looking at the target."""
    if n < 1:
        raise RigfitError("camera ring needs n >= 1")
    if radius <= 0:
        raise RigfitError("camera ring needs radius > 0")
    target = np.asarray(target, dtype=float)
    intr = intrinsics_from_fov(hfov_deg, width, height)
    cams = []
    for k in range(n):
        phi = 2.0 * math.pi * k / n
        pos = target + radius * np.array(
            [math.cos(tilt) * math.cos(phi), math.sin(tilt), math.cos(tilt) * math.sin(phi)])
        R, t = look_at(pos, target)
        cams.append(Camera(rotation=R, translation=t, width=width, height=height, **intr))
    return cams


__all__ = [
    "Camera", "project", "project_depths", "project_clamped", "unproject",
    "intrinsics_from_fov", "camera_from_fov", "camera_ring", "look_at",
    "MIN_DEPTH",
]
