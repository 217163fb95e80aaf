"""Adam updates with per-parameter-group learning rates.

The position group follows a linear learning-rate decay; the remaining
groups use fixed rates. Moment accumulators track the cloud's shapes and are
resized after densification (survivors keep their moments, new splats start
at zero).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianCloud

POSITION_LR_INITIAL = 1e-3
POSITION_LR_FINAL = 1.6e-6
POSITION_LR_DECAY_STEPS = 300

DEFAULT_GROUP_LRS = {
    "colors": 0.005,  # the "feature" group in a degree-0 color model
    "opacity_logits": 0.05,
    "log_scales": 0.005,
    "rotations": 0.001,
}


def position_lr(
    step: int,
    initial: float = POSITION_LR_INITIAL,
    final: float = POSITION_LR_FINAL,
    decay_steps: int = POSITION_LR_DECAY_STEPS,
) -> float:
    """Linear decay from `initial` at step 0 to `final` at `decay_steps`, constant after."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    frac = min(step, decay_steps) / decay_steps
    # Convex-combination form so both endpoints are attained exactly.
    return initial * (1.0 - frac) + final * frac


@dataclass
class AdamState:
    """First/second moment accumulators per raw field, plus the step counter."""

    shapes: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud, **kw) -> "AdamState":
        state = cls(shapes={k: v.shape for k, v in cloud.raw_fields().items()}, **kw)
        for k, shape in state.shapes.items():
            state.m[k] = np.zeros(shape)
            state.v[k] = np.zeros(shape)
        return state

    def resize(self, keep_indices: np.ndarray, n_new: int):
        """Keep survivors' moments (reindexed), append zero moments for new splats."""
        for k in self.m:
            kept_m = self.m[k][keep_indices]
            kept_v = self.v[k][keep_indices]
            tail = (n_new,) + kept_m.shape[1:]
            self.m[k] = np.concatenate([kept_m, np.zeros(tail)])
            self.v[k] = np.concatenate([kept_v, np.zeros(tail)])
            self.shapes[k] = self.m[k].shape


def adam_step(state: AdamState, grads: dict, lrs: dict) -> dict:
    """Advance the moments one step; returns the update to subtract per field."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    updates = {}
    for k in state.m:
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != state.m[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {state.m[k].shape}")
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        updates[k] = lrs[k] * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + state.eps)
    return updates


def apply_update(
    cloud: GaussianCloud,
    grads: dict,
    state: AdamState,
    group_lrs: dict = None,
    position_learning_rate: float = None,
) -> GaussianCloud:
    """One bias-corrected Adam step over all raw fields, in place.

    `position_learning_rate` defaults to the decayed rate at the current
    optimizer step.
    """
    lrs = dict(DEFAULT_GROUP_LRS)
    if group_lrs:
        lrs.update(group_lrs)
    if position_learning_rate is None:
        position_learning_rate = position_lr(state.step)
    lrs["positions"] = position_learning_rate

    updates = adam_step(state, grads, lrs)
    for k in cloud.FIELDS:
        arr = getattr(cloud, k)
        arr -= updates[k].astype(np.float32)
    cloud.validate()
    return cloud
