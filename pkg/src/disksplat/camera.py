"""Pinhole cameras. OpenCV-style convention: +x right, +y down, +z forward."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SceneFormatError


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # 4x4, row-major

    def __post_init__(self):
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise SceneFormatError(f"world_to_camera must be 4x4, got {w2c.shape}")
        object.__setattr__(self, "world_to_camera", w2c)
        if self.width <= 0 or self.height <= 0:
            raise SceneFormatError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise SceneFormatError("focal lengths must be positive")
        R = w2c[:3, :3]
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > 1e-6:
            raise SceneFormatError(
                f"world_to_camera rotation is not orthonormal (deviation {err:.2e})")
        if not np.allclose(w2c[3], [0, 0, 0, 1], atol=1e-9):
            raise SceneFormatError("world_to_camera bottom row must be [0, 0, 0, 1]")

    @property
    def R(self):
        return self.world_to_camera[:3, :3]

    @property
    def t(self):
        return self.world_to_camera[:3, 3]

    @property
    def center(self):
        """Camera position in world coordinates, -R^T t."""
        return -self.R.T @ self.t

    def ray_directions(self):
        """World-space ray direction per pixel, (H, W, 3), unnormalized.

        Directions have unit z in camera space, so the ray parameter of a
        hit equals its camera-space depth. Pixel (i, j) samples at
        (j + 0.5, i + 0.5).
        """
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        d_cam = np.empty((self.height, self.width, 3))
        d_cam[..., 0] = xs[None, :]
        d_cam[..., 1] = ys[:, None]
        d_cam[..., 2] = 1.0
        return d_cam @ self.R  # (R^T d)^T row-applied

    def project(self, points):
        """World points (N, 3) -> pixel coords (N, 2) and depths (N,)."""
        p = np.asarray(points, dtype=np.float64)
        cam = p @ self.R.T + self.t
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self.fx * cam[:, 0] / z + self.cx
            py = self.fy * cam[:, 1] / z + self.cy
        return np.stack([px, py], axis=1), z

    def to_dict(self):
        return {
            "width": self.width, "height": self.height,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "world_to_camera": [float(v) for v in self.world_to_camera.reshape(-1)],
        }

    @staticmethod
    def from_dict(d):
        required = ("width", "height", "fx", "fy", "cx", "cy", "world_to_camera")
        missing = [k for k in required if k not in d]
        if missing:
            raise SceneFormatError(f"camera missing fields: {', '.join(missing)}")
        w2c = np.asarray(d["world_to_camera"], dtype=np.float64)
        if w2c.size != 16:
            raise SceneFormatError(
                f"world_to_camera must have 16 entries, got {w2c.size}")
        return Camera(int(d["width"]), int(d["height"]),
                      float(d["fx"]), float(d["fy"]),
                      float(d["cx"]), float(d["cy"]),
                      w2c.reshape(4, 4))


def look_at(eye, target, up=(0.0, 0.0, 1.0), *, width=64, height=64,
            fov_deg=60.0):
    """Camera at `eye` looking toward `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    dist = np.linalg.norm(fwd)
    if dist < 1e-12:
        raise ValueError("look_at eye and target coincide")
    fwd = fwd / dist
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-8:
        # view axis parallel to up; pick any perpendicular
        up = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: camera axes in world coords
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ eye
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) * 0.5)
    return Camera(width, height, f, f, width / 2.0, height / 2.0, w2c)
