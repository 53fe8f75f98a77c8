"""Pinhole cameras and ray generation.

Camera frame follows the OpenCV convention: +x right, +y down, +z forward.
Orientation quaternions are camera-to-world, stored scalar-last (x, y, z, w).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraPose:
    position: np.ndarray
    orientation: np.ndarray  # unit quaternion, xyzw
    vertical_fov: float = np.deg2rad(50.0)
    resolution: tuple = (64, 64)

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=np.float64)
        n = np.linalg.norm(q)
        if n == 0:
            raise ValueError("zero quaternion")
        object.__setattr__(self, "orientation", q / n)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        h, w = (int(v) for v in self.resolution)
        if h < 1 or w < 1:
            raise ValueError(f"resolution must be >= 1, got {self.resolution}")
        object.__setattr__(self, "resolution", (h, w))

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.orientation).as_matrix()

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    @property
    def focal(self) -> float:
        return 0.5 * self.resolution[0] / np.tan(0.5 * self.vertical_fov)

    def to_dict(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "quat_xyzw": [float(v) for v in self.orientation],
            "vertical_fov": float(self.vertical_fov),
            "resolution": list(self.resolution),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(
            position=np.array(d["position"], dtype=np.float64),
            orientation=np.array(d["quat_xyzw"], dtype=np.float64),
            vertical_fov=float(d["vertical_fov"]),
            resolution=tuple(d["resolution"]),
        )


def look_at(position, target, vertical_fov=np.deg2rad(50.0), resolution=(64, 64), up=WORLD_UP) -> CameraPose:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return CameraPose(position, Rotation.from_matrix(rot).as_quat(), vertical_fov, resolution)


def pixel_grid(h: int, w: int) -> np.ndarray:
    """Pixel-center coordinates (u, v) for every pixel, row-major, shape (h*w, 2)."""
    v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


def cell_centers(pose: CameraPose, n: int) -> np.ndarray:
    """Continuous pixel coordinates of the centers of an n x n grid laid over the image."""
    h, w = pose.resolution
    gv, gu = np.meshgrid((np.arange(n) + 0.5) * h / n, (np.arange(n) + 0.5) * w / n, indexing="ij")
    return np.stack([gu.ravel(), gv.ravel()], axis=1)


def pixel_rays(pose: CameraPose, uv: np.ndarray):
    """World-space ray origins and unit directions through continuous pixel coords."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    h, w = pose.resolution
    f = pose.focal
    cam = np.stack([(uv[:, 0] - 0.5 * w) / f, (uv[:, 1] - 0.5 * h) / f, np.ones(len(uv))], axis=1)
    dirs = cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return origins, dirs


def project(pose: CameraPose, points: np.ndarray):
    """World points to continuous pixel coords; second output is camera-space depth."""
    cam = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - pose.position) @ pose.rotation
    z = cam[:, 2]
    h, w = pose.resolution
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pose.focal * cam[:, 0] / z + 0.5 * w
        v = pose.focal * cam[:, 1] / z + 0.5 * h
    return np.stack([u, v], axis=1), z


def rotation_angle(qa, qb) -> float:
    """Geodesic angle in [0, pi] between two orientations."""
    dot = abs(float(np.dot(qa, qb)) / (np.linalg.norm(qa) * np.linalg.norm(qb)))
    return 2.0 * np.arccos(min(1.0, dot))


def ray_box(origins, dirs, lo, hi):
    """Slab intersection; returns (near, far) with near >= 0 and far < near on a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (np.asarray(lo) - origins) * inv
        t1 = (np.asarray(hi) - origins) * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
    near = np.maximum(tmin.max(axis=1), 0.0)
    far = tmax.min(axis=1)
    return near, far
