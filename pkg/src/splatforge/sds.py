"""Score distillation: timestep schedules, the w(t) weighting, and the
per-step gradient assembly that chains oracle residuals through the
rasterizer's backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import adam, density, guidance, rasterizer
from .gaussians import GaussianCloud

WEIGHT_CONSTANT = "constant"
WEIGHT_SIGMA_SQUARED = "sigma_squared"

BACKGROUND_RANDOM_GRAY = "random_gray"


@dataclass(frozen=True)
class LinearAnneal:
    hi: float
    lo: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"LinearAnneal requires hi > lo, got {self.hi} <= {self.lo}")


@dataclass(frozen=True)
class UniformRange:
    lo: float
    hi: float


@dataclass
class TimestepSchedule:
    """Ordered (start, stop, rule) segments partitioning [0, total_steps)."""

    total_steps: int
    segments: Sequence[tuple]

    def __post_init__(self):
        expected = 0
        for start, stop, rule in self.segments:
            if start != expected or stop <= start:
                raise ValueError("segments must partition [0, total_steps) in order")
            for bound in (getattr(rule, "hi"), getattr(rule, "lo")):
                if not 0.0 < bound < 1.0:
                    raise ValueError(f"timestep bound {bound} outside (0, 1)")
            expected = stop
        if expected != self.total_steps:
            raise ValueError(f"segments cover [0, {expected}), expected [0, {self.total_steps})")

    def timestep(self, step: int, rng: np.random.Generator) -> float:
        if not 0 <= step < self.total_steps:
            raise IndexError(f"step {step} outside [0, {self.total_steps})")
        for start, stop, rule in self.segments:
            if start <= step < stop:
                if isinstance(rule, LinearAnneal):
                    length = stop - start
                    if length == 1 or step == start:
                        return rule.hi
                    if step == stop - 1:
                        return rule.lo  # endpoints attained exactly
                    frac = (step - start) / (length - 1)
                    return rule.hi - (rule.hi - rule.lo) * frac
                return float(rng.uniform(rule.lo, rule.hi))
        raise AssertionError("unreachable: segments partition the range")


def stage1_schedule(steps: int = 700) -> TimestepSchedule:
    return TimestepSchedule(steps, [(0, steps, LinearAnneal(0.98, 0.02))])


def stage2_schedule(steps: int = 700) -> TimestepSchedule:
    """Anneal for the first 2/7 of the stage, wide uniform until 3/7, then
    low-noise uniform (boundaries 200/300 at the canonical 700 steps)."""
    if steps < 7:
        raise ValueError("refinement schedule needs at least 7 steps")
    a = round(steps * 2 / 7)
    b = round(steps * 3 / 7)
    return TimestepSchedule(
        steps,
        [
            (0, a, LinearAnneal(0.98, 0.02)),
            (a, b, UniformRange(0.02, 0.98)),
            (b, steps, UniformRange(0.02, 0.50)),
        ],
    )


def texture_schedule(steps: int = 2000) -> TimestepSchedule:
    return TimestepSchedule(steps, [(0, steps, UniformRange(0.02, 0.98))])


@dataclass
class SdsConfig:
    cfg_scale: float = 100.0
    weight_strategy: str = WEIGHT_CONSTANT
    background: object = BACKGROUND_RANDOM_GRAY  # or a fixed RGB triple
    joint_views: bool = False  # stage 1 sends all views in one oracle call
    prompt: str = ""
    negative_prompt: str = ""

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.weight_strategy not in (WEIGHT_CONSTANT, WEIGHT_SIGMA_SQUARED):
            raise ValueError(f"unknown weight strategy {self.weight_strategy!r}")


def weight(
    t: float,
    strategy: str = WEIGHT_CONSTANT,
    schedule: guidance.NoiseSchedule = guidance.DEFAULT_SCHEDULE,
) -> float:
    if strategy == WEIGHT_CONSTANT:
        return 1.0
    if strategy == WEIGHT_SIGMA_SQUARED:
        return 1.0 - schedule.alpha_bar(t)
    raise ValueError(f"unknown weight strategy {strategy!r}")


def sds_image_gradient(
    eps_pred: np.ndarray,
    eps: np.ndarray,
    t: float,
    config: SdsConfig,
    schedule: guidance.NoiseSchedule = guidance.DEFAULT_SCHEDULE,
) -> np.ndarray:
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps_pred.shape != eps.shape:
        raise ValueError(f"shape mismatch: {eps_pred.shape} vs {eps.shape}")
    return weight(t, config.weight_strategy, schedule) * (eps_pred - eps)


def _background(config: SdsConfig, rng: np.random.Generator) -> np.ndarray:
    if config.background == BACKGROUND_RANDOM_GRAY:
        return np.full(3, rng.random())
    return np.asarray(config.background, dtype=np.float64)


def render_views(cloud, poses, background):
    return [rasterizer.render(cloud, pose, background) for pose in poses]


def sds_step(
    cloud: GaussianCloud,
    oracle,
    poses: Sequence,
    schedule: TimestepSchedule,
    step: int,
    opt_state: adam.AdamState,
    config: SdsConfig,
    rng: np.random.Generator,
    noise_schedule: guidance.NoiseSchedule = guidance.DEFAULT_SCHEDULE,
    stats: Optional[density.GradStats] = None,
    group_lrs: dict = None,
) -> dict:
    """One optimization step: render, noise, query the oracle, backpropagate
    the weighted residual, average over views, apply one Adam update.

    Returns diagnostics (timestep, render outputs, mean |grad|).
    """
    t = schedule.timestep(step, rng)
    background = _background(config, rng)
    noise_seed = int(rng.integers(0, 2**63 - 1))

    outputs = render_views(cloud, poses, background)
    images = np.stack([o.rgb for o in outputs])

    def make_request(imgs, pose_batch, seed):
        return guidance.GuidanceRequest(
            images=imgs,
            timestep=t,
            prompt=config.prompt,
            negative_prompt=config.negative_prompt,
            poses=pose_batch,
            cfg_scale=config.cfg_scale,
            noise_seed=seed,
        )

    if config.joint_views or len(poses) == 1:
        requests = [make_request(images, list(poses), noise_seed)]
        spans = [(0, len(poses))]
    else:
        requests = [
            make_request(images[i : i + 1], [poses[i]], noise_seed + i)
            for i in range(len(poses))
        ]
        spans = [(i, i + 1) for i in range(len(poses))]

    grad_images = np.empty_like(images)
    for req, (lo, hi) in zip(requests, spans):
        response = oracle.predict(req)
        response.validate_against(req)
        if response.kind == guidance.IMAGE_GRAD_KIND:
            grad_images[lo:hi] = response.tensors
        else:
            eps = guidance.noise_from_seed(req.noise_seed, req.images.shape)
            grad_images[lo:hi] = sds_image_gradient(
                response.tensors, eps, t, config, noise_schedule
            )

    accum = None
    for out, grad_img in zip(outputs, grad_images):
        grads = rasterizer.backward(out, grad_img)
        if stats is not None:
            density.accumulate(stats, out)
        if accum is None:
            accum = grads
        else:
            for k in accum:
                accum[k] += grads[k]
    for k in accum:
        accum[k] /= len(outputs)

    adam.apply_update(
        cloud,
        accum,
        opt_state,
        group_lrs=group_lrs,
        position_learning_rate=adam.position_lr(step),
    )
    return {
        "timestep": t,
        "outputs": outputs,
        "grad_norm": float(np.mean([np.abs(v).mean() for v in accum.values()])),
    }
