"""Camera pose sampling and view/projection matrices.

Convention: right-handed world, +Y up, azimuth measured in the XZ plane
(azimuth 0 puts the camera on +Z looking toward -Z). The camera looks down
its local -Z axis; depth of a point is the positive distance along the
viewing direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class CameraPose:
    azimuth: float  # radians
    elevation: float  # radians
    radius: float  # world units
    fov_y: float  # radians
    look_at: tuple = (0.0, 0.0, 0.0)
    resolution: tuple = (256, 256)  # (width, height)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")
        if not 0 < self.fov_y < math.pi:
            raise ValueError(f"fov_y must lie in (0, pi), got {self.fov_y}")
        if self.resolution[0] < 1 or self.resolution[1] < 1:
            raise ValueError(f"resolution components must be >= 1, got {self.resolution}")

    @property
    def eye(self) -> np.ndarray:
        """Camera center in world coordinates."""
        ce = math.cos(self.elevation)
        offset = np.array(
            [
                ce * math.sin(self.azimuth),
                math.sin(self.elevation),
                ce * math.cos(self.azimuth),
            ]
        )
        return np.asarray(self.look_at, dtype=np.float64) + self.radius * offset

    def with_resolution(self, width: int, height: int) -> "CameraPose":
        return replace(self, resolution=(width, height))


@dataclass
class CameraConfig:
    """Sampling ranges for random training cameras."""

    elevation_range: tuple = (math.radians(-10.0), math.radians(45.0))
    radius: float = 2.5
    fov_y: float = math.radians(49.1)
    resolution: tuple = (256, 256)


def matrices(pose: CameraPose):
    """(view, projection) 4x4 matrices for the pose.

    view maps world to camera (camera looks down -Z); projection is a
    standard perspective transform from fov_y and the aspect ratio.
    """
    eye = pose.eye
    target = np.asarray(pose.look_at, dtype=np.float64)
    forward = target - eye
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(forward, up)) > 1.0 - 1e-9:
        up = np.array([0.0, 0.0, 1.0])  # looking straight up/down
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, forward)

    view = np.eye(4)
    view[0, :3] = right
    view[1, :3] = cam_up
    view[2, :3] = -forward
    view[:3, 3] = -view[:3, :3] @ eye

    w, h = pose.resolution
    aspect = w / h
    f = 1.0 / math.tan(pose.fov_y / 2.0)
    near, far = 0.01, 100.0
    proj = np.zeros((4, 4))
    proj[0, 0] = f / aspect
    proj[1, 1] = f
    proj[2, 2] = (far + near) / (near - far)
    proj[2, 3] = 2.0 * far * near / (near - far)
    proj[3, 2] = -1.0
    return view, proj


def sample_random_camera(rng: np.random.Generator, config: CameraConfig) -> CameraPose:
    """Single view: azimuth uniform on the circle, elevation from the config range."""
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    elevation = rng.uniform(*config.elevation_range)
    return CameraPose(
        azimuth=azimuth,
        elevation=elevation,
        radius=config.radius,
        fov_y=config.fov_y,
        resolution=config.resolution,
    )


def sample_orthogonal_batch(rng: np.random.Generator, config: CameraConfig) -> list:
    """Four views at a shared random elevation, azimuths 90 degrees apart.

    This is the joint multi-view batch shape the stage-1 guidance model
    consumes.
    """
    base = rng.uniform(0.0, 2.0 * math.pi)
    elevation = rng.uniform(*config.elevation_range)
    return [
        CameraPose(
            azimuth=(base + k * math.pi / 2.0) % (2.0 * math.pi),
            elevation=elevation,
            radius=config.radius,
            fov_y=config.fov_y,
            resolution=config.resolution,
        )
        for k in range(4)
    ]


def yaw_ring(
    n: int,
    elevation: float = 0.0,
    radius: float = 2.5,
    fov_y: float = math.radians(49.1),
    resolution: tuple = (256, 256),
) -> list:
    """n poses evenly spaced around the yaw axis at constant elevation."""
    if n < 1:
        raise ValueError(f"view count must be >= 1, got {n}")
    return [
        CameraPose(
            azimuth=i * 2.0 * math.pi / n,
            elevation=elevation,
            radius=radius,
            fov_y=fov_y,
            resolution=resolution,
        )
        for i in range(n)
    ]
