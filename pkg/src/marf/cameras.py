"""Orthographic cameras and view-direction sampling.

All cameras here model an observer at infinity: every pixel ray is parallel
to the view direction and originates on the canvas plane through the world
origin. The canvas spans [-1, 1]^2, which together with the unit-sphere
shape normalization guarantees the whole object is in frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def camera_frame(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic orthonormal frame (right, up, forward) for a view direction.

    The helper axis switches from +z to +x near the poles so the frame is
    defined for every direction.
    """
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.999 else np.array([1.0, 0.0, 0.0])
    right = np.cross(helper, d)
    right /= np.linalg.norm(right)
    up = np.cross(d, right)
    return right, up, d


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Canvas coordinates of pixel centers over [-1, 1]^2.

    Column j maps to u = -1 + (j + 0.5) * 2/W (left to right) and row i maps
    to v = 1 - (i + 0.5) * 2/H (top to bottom), image convention.
    """
    u = -1.0 + (np.arange(width, dtype=np.float64) + 0.5) * (2.0 / width)
    v = 1.0 - (np.arange(height, dtype=np.float64) + 0.5) * (2.0 / height)
    return np.meshgrid(u, v)  # (H, W) each


@dataclass
class OrbitCamera:
    """Orthographic camera described by a view direction and canvas size."""

    direction: np.ndarray
    width: int = 256
    height: int = 256
    up_hint: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if n == 0.0:
            raise ValueError("camera direction must be nonzero")
        self.direction = self.direction / n
        self.up_hint = np.asarray(self.up_hint, dtype=np.float64)
        if np.linalg.norm(np.cross(self.direction, self.up_hint)) < 1e-12:
            raise ValueError("camera direction and up hint must not be parallel")

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = self.direction
        right = np.cross(self.up_hint, d)
        right /= np.linalg.norm(right)
        up = np.cross(d, right)
        return right, up, d

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel ray origins and directions, flattened row-major (H*W, 3)."""
        right, up, d = self.frame()
        uu, vv = pixel_grid(self.width, self.height)
        origins = uu[..., None] * right + vv[..., None] * up
        dirs = np.broadcast_to(d, origins.shape)
        return origins.reshape(-1, 3), np.ascontiguousarray(dirs.reshape(-1, 3))

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points to fractional pixel coordinates (col, row)."""
        right, up, _ = self.frame()
        pts = np.asarray(points, dtype=np.float64)
        u = pts @ right
        v = pts @ up
        col = (u + 1.0) * 0.5 * self.width - 0.5
        row = (1.0 - v) * 0.5 * self.height - 0.5
        return col, row


def fibonacci_sphere(count: int) -> np.ndarray:
    """Approximately equidistant unit directions from a Fibonacci spiral.

    Uses the endpoint variant (latitudes run from +1 to -1 inclusive), so
    count=2 yields an exactly antipodal pair. Deterministic in count.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if count == 1:
        return np.array([[0.0, 0.0, 1.0]])
    i = np.arange(count, dtype=np.float64)
    z = 1.0 - 2.0 * i / (count - 1)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
    golden = math.pi * (3.0 - math.sqrt(5.0))
    phi = i * golden
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
