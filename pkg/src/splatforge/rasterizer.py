"""Differentiable splat rasterizer: forward alpha compositing and the exact
backward pass from an image-space gradient to every raw splat parameter.

The forward pass is written in torch (float64) so the backward is the exact
vector-Jacobian product of the forward definition, including the chain
through activations (exp, sigmoid, quaternion normalization) and the EWA
perspective projection. No GPU kernels; pixels are processed in row chunks
to bound memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import torch

from .cameras import CameraPose, matrices
from .gaussians import EffectiveSplat, GaussianCloud

# Contributions below this alpha are dropped in the forward pass and carry no
# gradient, keeping forward/backward consistent.
ALPHA_SKIP = 1.0 / 255.0
ALPHA_MAX = 0.99
ANTIALIAS_FLOOR = 0.3  # px^2, added to the 2D covariance diagonal
NEAR_PLANE = 0.01
_ROW_CHUNK = 4096  # pixels per compositing chunk


def _as_raw(cloud) -> dict:
    if isinstance(cloud, GaussianCloud):
        return cloud.raw_fields()
    return dict(cloud)


def _check_finite(raw: dict):
    for name, arr in raw.items():
        arr = np.asarray(arr)
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = int(np.argwhere(bad.reshape(arr.shape[0], -1).any(axis=1))[0, 0])
            raise ValueError(f"non-finite value in {name} at splat {idx}")


def _quat_rotation_t(q: torch.Tensor) -> torch.Tensor:
    """(N,4) raw quaternions -> (N,3,3) rotation matrices, normalizing first."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(-1, 3, 3)


def _focal(pose: CameraPose) -> float:
    _, h = pose.resolution
    return (h / 2.0) / math.tan(pose.fov_y / 2.0)


def _project_t(positions, covariances, pose: CameraPose):
    """Project all splats: pixel means, 2D covariances, depths (torch)."""
    view, _ = matrices(pose)
    W_rot = torch.as_tensor(view[:3, :3], dtype=positions.dtype)
    t = torch.as_tensor(view[:3, 3], dtype=positions.dtype)
    cam = positions @ W_rot.T + t
    depth = -cam[:, 2]
    w_px, h_px = pose.resolution
    f = _focal(pose)
    safe_depth = torch.clamp(depth, min=1e-8)
    u = f * cam[:, 0] / safe_depth + w_px / 2.0
    v = h_px / 2.0 - f * cam[:, 1] / safe_depth
    mean2d = torch.stack([u, v], dim=-1)

    # Perspective Jacobian of (u, v) wrt camera coordinates at the mean.
    zeros = torch.zeros_like(depth)
    J = torch.stack(
        [
            torch.stack([f / safe_depth, zeros, f * cam[:, 0] / safe_depth**2], -1),
            torch.stack([zeros, -f / safe_depth, -f * cam[:, 1] / safe_depth**2], -1),
        ],
        dim=-2,
    )  # (N, 2, 3)
    JW = J @ W_rot
    cov2d = JW @ covariances @ JW.transpose(-1, -2)
    eye = torch.eye(2, dtype=positions.dtype) * ANTIALIAS_FLOOR
    return mean2d, cov2d + eye, depth


def project_splat(splat: EffectiveSplat, pose: CameraPose):
    """Project one activated splat. Returns (mean2d, cov2d, depth) or None if culled."""
    pos = torch.as_tensor(splat.mean, dtype=torch.float64).reshape(1, 3)
    cov = torch.as_tensor(splat.covariance, dtype=torch.float64).reshape(1, 3, 3)
    mean2d, cov2d, depth = _project_t(pos, cov, pose)
    visible = _visible_mask(mean2d, cov2d, depth, pose)
    if not bool(visible[0]):
        return None
    return (
        mean2d[0].numpy(),
        cov2d[0].numpy(),
        float(depth[0]),
    )


def _visible_mask(mean2d, cov2d, depth, pose: CameraPose) -> torch.Tensor:
    """Cull splats behind the near plane or whose 3-sigma ellipse misses the image."""
    with torch.no_grad():
        w_px, h_px = pose.resolution
        a = cov2d[:, 0, 0]
        b = cov2d[:, 0, 1]
        c = cov2d[:, 1, 1]
        mid = 0.5 * (a + c)
        disc = torch.sqrt(torch.clamp((0.5 * (a - c)) ** 2 + b * b, min=0.0))
        r = 3.0 * torch.sqrt(torch.clamp(mid + disc, min=0.0))
        u, v = mean2d[:, 0], mean2d[:, 1]
        inside = (u + r > 0) & (u - r < w_px) & (v + r > 0) & (v - r < h_px)
        return (depth > NEAR_PLANE) & inside


@dataclass
class RenderOutput:
    """Forward result plus the saved state the backward pass consumes."""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W) in [0, 1]
    pose: CameraPose
    visible: np.ndarray  # indices of non-culled splats
    contributed: np.ndarray  # bool per splat: wrote at least one pixel
    mean2d: np.ndarray  # (N, 2) pixel-space means (culled rows are nan)
    cov2d: np.ndarray  # (N, 2, 2)
    depth: np.ndarray  # (N,)
    screen_grad_accum: Optional[np.ndarray] = None  # (N, 2), filled by backward
    _graph: dict = field(default_factory=dict, repr=False)

    @property
    def splat_count(self) -> int:
        return self.depth.shape[0]

    def contributions(self, ix: int, iy: int):
        """Ordered (splat id, alpha, transmittance-before) records at pixel (ix, iy)."""
        g = self._graph
        order = g["order_idx"]  # global splat ids, front to back
        px = np.array([ix + 0.5, iy + 0.5])
        out = []
        T = 1.0
        for sid in order:
            d = px - self.mean2d[sid]
            inv = np.linalg.inv(self.cov2d[sid])
            a = min(
                float(1.0 / (1.0 + np.exp(-g["raw"]["opacity_logits"][sid])))
                * math.exp(-0.5 * d @ inv @ d),
                ALPHA_MAX,
            )
            if a < ALPHA_SKIP:
                continue
            out.append((int(sid), a, T))
            T *= 1.0 - a
        return out


def render(cloud, pose: CameraPose, background) -> RenderOutput:
    """Alpha-composite the cloud front to back over depth-sorted visible splats.

    `cloud` is a GaussianCloud or a mapping of its raw field arrays (the
    latter lets tests drive the renderer with float64 parameters directly).
    """
    raw = _as_raw(cloud)
    _check_finite(raw)
    bg = np.asarray(background, dtype=np.float64)
    w_px, h_px = pose.resolution
    n = np.asarray(raw["positions"]).shape[0]

    leaves = {
        k: torch.tensor(np.asarray(v), dtype=torch.float64, requires_grad=True)
        for k, v in raw.items()
    }
    if n == 0:
        rgb = np.broadcast_to(bg, (h_px, w_px, 3)).copy()
        return RenderOutput(
            rgb=rgb, alpha=np.zeros((h_px, w_px)), pose=pose,
            visible=np.empty(0, dtype=np.int64), contributed=np.zeros(0, dtype=bool),
            mean2d=np.empty((0, 2)), cov2d=np.empty((0, 2, 2)), depth=np.empty(0),
            screen_grad_accum=np.zeros((0, 2)),
            _graph={"leaves": leaves, "order_idx": np.empty(0, dtype=np.int64), "raw": raw},
        )

    scales = torch.exp(leaves["log_scales"])
    R = _quat_rotation_t(leaves["rotations"])
    cov3d = R @ torch.diag_embed(scales**2) @ R.transpose(-1, -2)
    opac = torch.sigmoid(leaves["opacity_logits"])
    colors = torch.sigmoid(leaves["colors"])

    mean2d_all, cov2d_all, depth_all = _project_t(leaves["positions"], cov3d, pose)
    vis_mask = _visible_mask(mean2d_all, cov2d_all, depth_all, pose)
    vis_idx = torch.nonzero(vis_mask, as_tuple=False).squeeze(-1)

    bg_t = torch.as_tensor(bg, dtype=torch.float64)
    if vis_idx.numel() == 0:
        rgb_t = bg_t.expand(h_px * w_px, 3)
        alpha_t = torch.zeros(h_px * w_px, dtype=torch.float64)
        order_global = np.empty(0, dtype=np.int64)
        contributed = np.zeros(n, dtype=bool)
        mean2d_grad_target = None
    else:
        depth_vis = depth_all[vis_idx]
        order = torch.argsort(depth_vis.detach(), stable=True)
        order_global = vis_idx[order].numpy()
        mean2d = mean2d_all[vis_idx][order]
        cov2d = cov2d_all[vis_idx][order]
        o_sorted = opac[vis_idx][order]
        c_sorted = colors[vis_idx][order]

        a = cov2d[:, 0, 0]
        b = cov2d[:, 0, 1]
        c = cov2d[:, 1, 1]
        det = a * c - b * b
        ia, ib, ic = c / det, -b / det, a / det

        xs = torch.arange(w_px, dtype=torch.float64) + 0.5
        ys = torch.arange(h_px, dtype=torch.float64) + 0.5
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        px = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)  # (P, 2)

        rgb_chunks = []
        alpha_chunks = []
        contributed_sorted = torch.zeros(mean2d.shape[0], dtype=torch.bool)
        for start in range(0, px.shape[0], _ROW_CHUNK):
            p = px[start : start + _ROW_CHUNK]
            dx = p[:, 0:1] - mean2d[None, :, 0]
            dy = p[:, 1:2] - mean2d[None, :, 1]
            power = -0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)
            alpha = torch.clamp(o_sorted[None, :] * torch.exp(power), max=ALPHA_MAX)
            alpha = torch.where(alpha >= ALPHA_SKIP, alpha, torch.zeros(()).double())
            with torch.no_grad():
                contributed_sorted |= (alpha > 0).any(dim=0)
            T = torch.cumprod(1.0 - alpha, dim=1)
            T_excl = torch.cat([torch.ones(alpha.shape[0], 1, dtype=torch.float64), T[:, :-1]], dim=1)
            wgt = alpha * T_excl
            color = wgt @ c_sorted + T[:, -1:] * bg_t[None, :]
            rgb_chunks.append(color)
            alpha_chunks.append(1.0 - T[:, -1])
        rgb_t = torch.cat(rgb_chunks, dim=0)
        alpha_t = torch.cat(alpha_chunks, dim=0)
        contributed = np.zeros(n, dtype=bool)
        contributed[order_global[contributed_sorted.numpy()]] = True
        mean2d_grad_target = mean2d

    rgb_img = rgb_t.detach().numpy().reshape(h_px, w_px, 3)
    alpha_img = alpha_t.detach().numpy().reshape(h_px, w_px)

    mean2d_np = np.full((n, 2), np.nan)
    cov2d_np = np.full((n, 2, 2), np.nan)
    with torch.no_grad():
        mean2d_np[vis_mask.numpy()] = mean2d_all[vis_idx].numpy()
        cov2d_np[vis_mask.numpy()] = cov2d_all[vis_idx].numpy()

    return RenderOutput(
        rgb=rgb_img,
        alpha=alpha_img,
        pose=pose,
        visible=vis_idx.numpy(),
        contributed=contributed,
        mean2d=mean2d_np,
        cov2d=cov2d_np,
        depth=depth_all.detach().numpy(),
        _graph={
            "leaves": leaves,
            "rgb_t": rgb_t,
            "order_idx": order_global,
            "order_pos": order_global,  # sorted order equals global-id order per row above
            "mean2d_sorted": mean2d_grad_target,
            "raw": raw,
        },
    )


def backward(output: RenderOutput, grad_rgb: np.ndarray) -> dict:
    """Gradients of <grad_rgb, rgb> wrt every raw parameter array.

    Also fills output.screen_grad_accum with per-splat pixel-space positional
    gradients (consumed by adaptive density control).
    """
    g = output._graph
    leaves = g["leaves"]
    h_px, w_px = output.rgb.shape[:2]
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    if grad_rgb.shape != (h_px, w_px, 3):
        raise ValueError(f"grad_rgb has shape {grad_rgb.shape}, expected {(h_px, w_px, 3)}")
    n = output.splat_count
    names = list(leaves)
    screen = np.zeros((n, 2))
    if "rgb_t" not in g:
        output.screen_grad_accum = screen
        return {k: np.zeros_like(np.asarray(g["raw"][k]), dtype=np.float64) for k in names}

    grad_t = torch.as_tensor(grad_rgb.reshape(-1, 3))
    targets = [leaves[k] for k in names]
    mean2d_sorted = g["mean2d_sorted"]
    if mean2d_sorted is not None:
        targets = targets + [mean2d_sorted]
    grads = torch.autograd.grad(
        g["rgb_t"], targets, grad_outputs=grad_t, retain_graph=True, allow_unused=True
    )
    out = {}
    for k, gr in zip(names, grads):
        out[k] = (gr.numpy() if gr is not None else np.zeros(leaves[k].shape))
    if mean2d_sorted is not None and grads[-1] is not None:
        screen[g["order_idx"]] = grads[-1].numpy()
    output.screen_grad_accum = screen
    return out
