"""Adaptive density control: clone/split densification, opacity pruning, and
opacity reset, driven by accumulated view-space positional gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianCloud, inverse_sigmoid, quat_to_rotation
from .rasterizer import RenderOutput


@dataclass
class DensifyConfig:
    interval: int = 55
    grad_threshold: float = 0.01
    prune_opacity: float = 0.005
    split_scale_threshold: float = 0.01  # fraction of scene extent
    split_factor: float = 1.6
    reset_cap: float = 0.01
    # Opacity reset timing: fixed step (stage 1) or repeating interval (stage 2).
    reset_at_step: int = None
    reset_interval: int = None
    max_splats: int = None  # densification stops growing past this, pruning still runs

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError(f"interval must be >= 1, got {self.interval}")
        for name in ("grad_threshold", "prune_opacity", "split_scale_threshold", "split_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    def reset_due(self, step: int) -> bool:
        if self.reset_at_step is not None and step == self.reset_at_step:
            return True
        if self.reset_interval is not None and step > 0 and step % self.reset_interval == 0:
            return True
        return False


@dataclass
class GradStats:
    """Running per-splat sums of screen-space positional gradient norms."""

    accum_norm: np.ndarray
    denom: np.ndarray

    @classmethod
    def zeros(cls, count: int) -> "GradStats":
        return cls(np.zeros(count), np.zeros(count))

    @property
    def count(self) -> int:
        return self.accum_norm.shape[0]

    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.denom > 0, self.accum_norm / np.maximum(self.denom, 1), 0.0)


@dataclass
class DensifyReport:
    """Index bookkeeping so optimizer moments can follow a structural change.

    keep_indices are the surviving original splat ids, in output order before
    the n_new appended splats.
    """

    keep_indices: np.ndarray
    n_new: int
    cloned: int = 0
    split: int = 0
    pruned: int = 0


def accumulate(stats: GradStats, output: RenderOutput) -> GradStats:
    """Add each contributing splat's screen-gradient norm; bump its denom."""
    if stats.count != output.splat_count:
        raise ValueError(
            f"stats sized for {stats.count} splats but render saw {output.splat_count}"
        )
    if output.screen_grad_accum is None:
        raise ValueError("render output has no screen gradients; run backward first")
    norms = np.linalg.norm(output.screen_grad_accum, axis=-1)
    mask = output.contributed
    stats.accum_norm[mask] += norms[mask]
    stats.denom[mask] += 1
    return stats


def scene_extent(cloud: GaussianCloud) -> float:
    """Bounding-sphere radius of splat positions around their centroid."""
    pos = cloud.positions.astype(np.float64)
    center = pos.mean(axis=0)
    return float(np.linalg.norm(pos - center, axis=-1).max())


def densify_and_prune(
    cloud: GaussianCloud,
    stats: GradStats,
    config: DensifyConfig,
    extent: float = None,
    rng: np.random.Generator = None,
):
    """Clone small / split large high-gradient splats, prune transparent ones.

    Returns (new_cloud, fresh GradStats, DensifyReport).
    """
    if stats.count != cloud.count:
        raise ValueError(f"stats sized for {stats.count} splats, cloud has {cloud.count}")
    if extent is None:
        extent = scene_extent(cloud)
    if rng is None:
        rng = np.random.default_rng(0)

    mean_grad = stats.mean()
    max_scale = cloud.scales.max(axis=-1)
    hot = mean_grad >= config.grad_threshold
    if config.max_splats is not None and cloud.count >= config.max_splats:
        hot = np.zeros_like(hot)
    small = max_scale < config.split_scale_threshold * extent
    clone_mask = hot & small
    split_mask = hot & ~small
    prune_mask = cloud.opacities < config.prune_opacity

    keep_mask = ~(split_mask | prune_mask)
    keep_indices = np.nonzero(keep_mask)[0]

    fields = {k: [getattr(cloud, k)[keep_mask]] for k in cloud.FIELDS}
    n_new = 0

    clone_ids = np.nonzero(clone_mask & ~prune_mask)[0]
    for k in cloud.FIELDS:
        fields[k].append(getattr(cloud, k)[clone_ids])
    n_new += clone_ids.size

    split_ids = np.nonzero(split_mask & ~prune_mask)[0]
    if split_ids.size:
        covs = cloud.covariances()[split_ids]
        chol = np.linalg.cholesky(covs)
        for _ in range(2):
            z = rng.standard_normal((split_ids.size, 3))
            child_pos = cloud.positions[split_ids].astype(np.float64)
            child_pos = child_pos + np.einsum("nij,nj->ni", chol, z)
            fields["positions"].append(child_pos.astype(np.float32))
            fields["log_scales"].append(
                cloud.log_scales[split_ids] - np.float32(np.log(config.split_factor))
            )
            for k in ("rotations", "opacity_logits", "colors"):
                fields[k].append(getattr(cloud, k)[split_ids])
        n_new += 2 * split_ids.size

    new_cloud = GaussianCloud(*(np.concatenate(fields[k]) for k in cloud.FIELDS))
    report = DensifyReport(
        keep_indices=keep_indices,
        n_new=n_new,
        cloned=int(clone_ids.size),
        split=int(split_ids.size),
        pruned=int(prune_mask.sum()),
    )
    return new_cloud, GradStats.zeros(new_cloud.count), report


def reset_opacity(cloud: GaussianCloud, cap: float = 0.01) -> GaussianCloud:
    """Clamp every effective opacity to at most `cap` (idempotent)."""
    if not 0.0 < cap < 1.0:
        raise ValueError(f"cap must lie in (0, 1), got {cap}")
    cap_logit = np.float32(inverse_sigmoid(cap))
    np.minimum(cloud.opacity_logits, cap_logit, out=cloud.opacity_logits)
    return cloud
