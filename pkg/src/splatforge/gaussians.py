"""3D Gaussian splat cloud: raw (unconstrained) storage plus activated views.

Raw parameters are what optimizers touch; activations (exp, sigmoid, quaternion
normalization) enforce the geometric constraints. Arrays are float32 so that
PLY round-trips are bit-exact; numerical kernels upcast internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion. Normalizes first.

    Accepts a single quaternion (4,) or a batch (N, 4); returns (3, 3) or (N, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero-norm quaternion cannot be normalized")
    w, x, y, z = (q / norm).T
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


@dataclass
class EffectiveSplat:
    """Activated view of one splat: covariance R diag(s)^2 R^T, opacity in (0,1)."""

    mean: np.ndarray
    covariance: np.ndarray
    opacity: float
    color: np.ndarray


@dataclass
class GaussianCloud:
    """Raw per-splat parameter arrays.

    positions (N,3), log_scales (N,3), rotations (N,4) as unnormalized
    (w,x,y,z) quaternions, opacity_logits (N,), colors (N,3) pre-sigmoid.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    FIELDS = ("positions", "log_scales", "rotations", "opacity_logits", "colors")

    def __post_init__(self):
        for name in self.FIELDS:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))
        self.validate()

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def validate(self):
        n = self.positions.shape[0]
        shapes = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacity_logits": (n,),
            "colors": (n, 3),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if n > 0 and np.any(np.linalg.norm(self.rotations, axis=-1) == 0):
            raise ValueError("rotations contain a zero-norm quaternion")

    # Activated views --------------------------------------------------------

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits.astype(np.float64))

    @property
    def rgb(self) -> np.ndarray:
        return sigmoid(self.colors.astype(np.float64))

    def covariances(self) -> np.ndarray:
        """(N, 3, 3) effective covariances R diag(s^2) R^T."""
        R = quat_to_rotation(self.rotations)
        s2 = self.scales**2
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def effective(self, index: int) -> EffectiveSplat:
        if not 0 <= index < self.count:
            raise IndexError(f"splat index {index} out of range for count {self.count}")
        R = quat_to_rotation(self.rotations[index])
        s2 = self.scales[index] ** 2
        cov = R @ np.diag(s2) @ R.T
        return EffectiveSplat(
            mean=self.positions[index].astype(np.float64),
            covariance=cov,
            opacity=float(self.opacities[index]),
            color=self.rgb[index],
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).copy() for f in self.FIELDS))

    def raw_fields(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}

    def __eq__(self, other):
        if not isinstance(other, GaussianCloud):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self.FIELDS)


def init_random_cloud(
    n: int,
    seed: int,
    radius: float = 0.5,
    initial_opacity: float = 0.1,
    initial_scale: float = 0.02,
) -> GaussianCloud:
    """Seeded random cloud: positions uniform in a ball of the given radius.

    Opacity and scale start small so early optimization can move splats
    freely; colors are random pre-sigmoid values near gray.
    """
    if n < 1:
        raise ValueError(f"splat count must be >= 1, got {n}")
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    rng = np.random.default_rng(seed)
    # Uniform in the ball: direction times radius * u^(1/3).
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    positions = d * r[:, None]
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        positions=positions,
        log_scales=np.full((n, 3), np.log(initial_scale)),
        rotations=rotations,
        opacity_logits=np.full(n, inverse_sigmoid(initial_opacity)),
        colors=rng.normal(0.0, 0.5, (n, 3)),
    )
