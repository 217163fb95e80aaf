"""Mesh texture stage: z-buffered rasterization into a G-buffer, Cook-Torrance
GGX shading over the three material maps, and SDS-driven texel optimization.

Visibility is fixed per step (non-differentiable); shading is written in
torch so texel gradients are the exact vector-Jacobian product through the
bilinear texture taps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import guidance, sds
from .adam import AdamState, adam_step
from .cameras import CameraConfig, CameraPose, matrices, sample_random_camera, yaw_ring
from .meshing import TexturedMesh


@dataclass
class MaterialMaps:
    """Diffuse k_d, packed roughness/metallic k_rm, tangent-space normal k_n."""

    k_d: np.ndarray  # (T, T, 3) in [0, 1]
    k_rm: np.ndarray  # (T, T, 2)
    k_n: np.ndarray  # (T, T, 3), decoded as 2 * k_n - 1

    FIELDS = ("k_d", "k_rm", "k_n")

    def __post_init__(self):
        t = self.k_d.shape[0]
        if t & (t - 1) != 0:
            raise ValueError(f"texture size must be a power of two, got {t}")
        for name in self.FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape[:2] != (t, t) or arr.min() < 0 or arr.max() > 1:
                raise ValueError(f"{name} must be ({t}, {t}, c) with values in [0, 1]")
            setattr(self, name, arr)

    @property
    def size(self) -> int:
        return self.k_d.shape[0]

    def copy(self) -> "MaterialMaps":
        return MaterialMaps(self.k_d.copy(), self.k_rm.copy(), self.k_n.copy())


def init_materials(size: int = 256) -> MaterialMaps:
    return MaterialMaps(
        k_d=np.full((size, size, 3), 0.5),
        k_rm=np.tile(np.array([0.5, 0.0]), (size, size, 1)),
        k_n=np.tile(np.array([0.5, 0.5, 1.0]), (size, size, 1)),
    )


@dataclass
class LightRig:
    directions: np.ndarray  # (L, 3) unit vectors toward the lights
    intensities: np.ndarray  # (L,)
    ambient: float = 0.2

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        self.directions /= np.linalg.norm(self.directions, axis=-1, keepdims=True)
        self.intensities = np.asarray(self.intensities, dtype=np.float64).reshape(-1)


def default_lights(ambient: float = 0.2) -> LightRig:
    """Four directional lights in a tetrahedral arrangement plus ambient."""
    dirs = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    return LightRig(directions=dirs, intensities=np.ones(4), ambient=ambient)


@dataclass
class GBuffer:
    pose: CameraPose
    tri_id: np.ndarray  # (H, W), -1 on miss
    bary: np.ndarray  # (H, W, 3) perspective-correct, sums to 1 on hits
    world: np.ndarray  # (H, W, 3)
    normal: np.ndarray  # (H, W, 3) geometric, facing the camera
    tangent: np.ndarray  # (H, W, 3)
    bitangent: np.ndarray  # (H, W, 3)
    uv: np.ndarray  # (H, W, 2)
    depth: np.ndarray  # (H, W)

    @property
    def hit(self) -> np.ndarray:
        return self.tri_id >= 0


def _tangent_frames(mesh: TexturedMesh):
    """Per-face orthonormal (tangent, bitangent, normal) from UV derivatives."""
    c = mesh.face_corners()
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    nl = np.linalg.norm(n, axis=-1, keepdims=True)
    nl[nl == 0] = 1.0
    n = n / nl
    e1 = c[:, 1] - c[:, 0]
    e2 = c[:, 2] - c[:, 0]
    duv1 = mesh.uvs[:, 1] - mesh.uvs[:, 0]
    duv2 = mesh.uvs[:, 2] - mesh.uvs[:, 0]
    det = duv1[:, 0] * duv2[:, 1] - duv2[:, 0] * duv1[:, 1]
    det = np.where(np.abs(det) < 1e-20, 1e-20, det)
    t = (e1 * duv2[:, 1:2] - e2 * duv1[:, 1:2]) / det[:, None]
    # Gram-Schmidt against the normal; fall back to any perpendicular.
    t = t - (t * n).sum(-1, keepdims=True) * n
    tl = np.linalg.norm(t, axis=-1, keepdims=True)
    fallback = np.cross(n, np.where(np.abs(n[:, 0:1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]]))
    t = np.where(tl > 1e-12, t / np.maximum(tl, 1e-12), fallback / np.linalg.norm(fallback, axis=-1, keepdims=True))
    b = np.cross(n, t)
    return t, b, n


def rasterize_mesh(mesh: TexturedMesh, pose: CameraPose, resolution=None) -> GBuffer:
    """Z-buffered triangle rasterization with perspective-correct barycentrics.

    Depth ties are broken by triangle index (earlier wins).
    """
    if mesh.uvs is None and not mesh.is_empty:
        raise ValueError("mesh has no UVs; run uv_unwrap first")
    if resolution is not None:
        pose = pose.with_resolution(*resolution)
    w_px, h_px = pose.resolution
    view, _ = matrices(pose)
    f = (h_px / 2.0) / math.tan(pose.fov_y / 2.0)

    tri_id = np.full((h_px, w_px), -1, dtype=np.int64)
    bary = np.zeros((h_px, w_px, 3))
    world = np.zeros((h_px, w_px, 3))
    normal = np.zeros((h_px, w_px, 3))
    tangent = np.zeros((h_px, w_px, 3))
    bitangent = np.zeros((h_px, w_px, 3))
    uv = np.zeros((h_px, w_px, 2))
    zbuf = np.full((h_px, w_px), np.inf)
    out = GBuffer(pose, tri_id, bary, world, normal, tangent, bitangent, uv, zbuf)
    if mesh.is_empty:
        return out

    verts = mesh.vertices
    cam = verts @ view[:3, :3].T + view[:3, 3]
    depth = -cam[:, 2]
    u = f * cam[:, 0] / np.maximum(depth, 1e-8) + w_px / 2.0
    v = h_px / 2.0 - f * cam[:, 1] / np.maximum(depth, 1e-8)
    pix = np.stack([u, v], axis=-1)

    face_t, face_b, face_n = _tangent_frames(mesh)
    eye = pose.eye

    for fi, tri in enumerate(mesh.triangles):
        d = depth[tri]
        if np.any(d <= 1e-4):
            continue  # behind or grazing the near plane
        p = pix[tri]  # (3, 2)
        x0 = max(int(np.floor(p[:, 0].min())), 0)
        x1 = min(int(np.ceil(p[:, 0].max())) + 1, w_px)
        y0 = max(int(np.floor(p[:, 1].min())), 0)
        y1 = min(int(np.ceil(p[:, 1].max())) + 1, h_px)
        if x0 >= x1 or y0 >= y1:
            continue
        area2 = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        if abs(area2) < 1e-12:
            continue
        gx, gy = np.meshgrid(
            np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5, indexing="xy"
        )
        w0 = ((p[1, 0] - gx) * (p[2, 1] - gy) - (p[2, 0] - gx) * (p[1, 1] - gy)) / area2
        w1 = ((p[2, 0] - gx) * (p[0, 1] - gy) - (p[0, 0] - gx) * (p[2, 1] - gy)) / area2
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        inv_d = w0 / d[0] + w1 / d[1] + w2 / d[2]
        pdepth = 1.0 / inv_d
        # Perspective-correct barycentrics.
        b0 = (w0 / d[0]) * pdepth
        b1 = (w1 / d[1]) * pdepth
        b2 = 1.0 - b0 - b1
        sub_z = zbuf[y0:y1, x0:x1]
        win = inside & (pdepth < sub_z)
        if not win.any():
            continue
        sub = (slice(y0, y1), slice(x0, x1))
        zbuf[sub][win] = pdepth[win]
        tri_id[sub][win] = fi
        bw = np.stack([b0, b1, b2], axis=-1)
        bary[sub][win] = bw[win]
        world[sub][win] = bw[win] @ verts[tri]
        uv[sub][win] = bw[win] @ mesh.uvs[fi]
        n = face_n[fi]
        # Face the camera so shading sees a front side.
        flip = np.sign((eye - world[sub][win]) @ n)
        flip[flip == 0] = 1.0
        normal[sub][win] = n[None, :] * flip[:, None]
        tangent[sub][win] = face_t[fi]
        bitangent[sub][win] = np.cross(normal[sub][win], face_t[fi][None, :])
    return out


def _bilinear(tex: torch.Tensor, uvs: torch.Tensor) -> torch.Tensor:
    """Sample (T, T, C) at (P, 2) UVs with clamped bilinear taps."""
    t = tex.shape[0]
    x = uvs[:, 0] * t - 0.5
    y = uvs[:, 1] * t - 0.5
    x0 = torch.clamp(torch.floor(x), 0, t - 1)
    y0 = torch.clamp(torch.floor(y), 0, t - 1)
    x1 = torch.clamp(x0 + 1, 0, t - 1)
    y1 = torch.clamp(y0 + 1, 0, t - 1)
    fx = torch.clamp(x - x0, 0.0, 1.0).unsqueeze(-1)
    fy = torch.clamp(y - y0, 0.0, 1.0).unsqueeze(-1)
    x0l, x1l, y0l, y1l = x0.long(), x1.long(), y0.long(), y1.long()
    v00 = tex[y0l, x0l]
    v01 = tex[y0l, x1l]
    v10 = tex[y1l, x0l]
    v11 = tex[y1l, x1l]
    return (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )


def _shade_t(gbuffer: GBuffer, tex: dict, lights: LightRig, background) -> torch.Tensor:
    """Cook-Torrance GGX shading of hit pixels; returns the (H, W, 3) image tensor."""
    h, w = gbuffer.tri_id.shape
    hit = gbuffer.hit
    img = torch.as_tensor(np.broadcast_to(np.asarray(background, dtype=np.float64), (h, w, 3)).copy())
    if not hit.any():
        return img
    uvs = torch.as_tensor(gbuffer.uv[hit])
    kd = _bilinear(tex["k_d"], uvs)
    krm = _bilinear(tex["k_rm"], uvs)
    kn = _bilinear(tex["k_n"], uvs)

    n_geo = torch.as_tensor(gbuffer.normal[hit])
    t_vec = torch.as_tensor(gbuffer.tangent[hit])
    b_vec = torch.as_tensor(gbuffer.bitangent[hit])
    local = 2.0 * kn - 1.0
    n = local[:, 0:1] * t_vec + local[:, 1:2] * b_vec + local[:, 2:3] * n_geo
    n = n / torch.clamp(torch.linalg.norm(n, dim=-1, keepdim=True), min=1e-12)

    eye = torch.as_tensor(gbuffer.pose.eye)
    view_dir = eye[None, :] - torch.as_tensor(gbuffer.world[hit])
    view_dir = view_dir / torch.clamp(torch.linalg.norm(view_dir, dim=-1, keepdim=True), min=1e-12)

    rough = torch.clamp(krm[:, 0:1], min=0.04)
    metal = krm[:, 1:2]
    f0 = 0.04 * (1.0 - metal) + kd * metal
    diffuse = kd * (1.0 - metal) / math.pi

    color = lights.ambient * kd
    ndv = torch.clamp((n * view_dir).sum(-1, keepdim=True), min=1e-4)
    for ld, li in zip(lights.directions, lights.intensities):
        l = torch.as_tensor(ld)[None, :]
        ndl = torch.clamp((n * l).sum(-1, keepdim=True), min=0.0)
        h_vec = l + view_dir
        h_vec = h_vec / torch.clamp(torch.linalg.norm(h_vec, dim=-1, keepdim=True), min=1e-12)
        ndh = torch.clamp((n * h_vec).sum(-1, keepdim=True), min=0.0)
        hdv = torch.clamp((h_vec * view_dir).sum(-1, keepdim=True), min=0.0)
        a2 = (rough**2) ** 2
        dist = a2 / (math.pi * (ndh**2 * (a2 - 1.0) + 1.0) ** 2)
        fres = f0 + (1.0 - f0) * (1.0 - hdv) ** 5
        k = (rough + 1.0) ** 2 / 8.0
        g1l = ndl / (ndl * (1.0 - k) + k)
        g1v = ndv / (ndv * (1.0 - k) + k)
        spec = dist * fres * g1l * g1v / (4.0 * ndl * ndv + 1e-8)
        color = color + (diffuse + spec) * ndl * float(li)
    color = torch.clamp(color, 0.0, 1.0)
    img[torch.as_tensor(hit)] = color
    return img


def _tex_leaves(materials: MaterialMaps) -> dict:
    return {
        k: torch.tensor(getattr(materials, k), dtype=torch.float64, requires_grad=True)
        for k in MaterialMaps.FIELDS
    }


def shade(gbuffer: GBuffer, materials: MaterialMaps, lights: LightRig, background=(0, 0, 0)) -> np.ndarray:
    with torch.no_grad():
        tex = {k: torch.as_tensor(getattr(materials, k)) for k in MaterialMaps.FIELDS}
        return _shade_t(gbuffer, tex, lights, background).numpy()


def shade_backward(
    gbuffer: GBuffer,
    materials: MaterialMaps,
    lights: LightRig,
    grad_image: np.ndarray,
    background=(0, 0, 0),
) -> dict:
    """Gradients of <grad_image, shade(...)> wrt the three texel maps."""
    h, w = gbuffer.tri_id.shape
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != (h, w, 3):
        raise ValueError(f"grad_image has shape {grad_image.shape}, expected {(h, w, 3)}")
    tex = _tex_leaves(materials)
    img = _shade_t(gbuffer, tex, lights, background)
    grads = torch.autograd.grad(
        img, list(tex.values()), grad_outputs=torch.as_tensor(grad_image), allow_unused=True
    )
    return {
        k: (g.numpy() if g is not None else np.zeros_like(getattr(materials, k)))
        for k, g in zip(tex, grads)
    }


@dataclass
class TextureConfig:
    iterations: int = 2000
    batch: int = 4
    texture_size: int = 256
    render_resolution: tuple = (512, 512)
    lr: float = 0.01
    seed: int = 0
    camera: CameraConfig = field(default_factory=CameraConfig)
    camera_pool: int = 0  # >0 caches G-buffers for a fixed seeded pose pool
    lights: LightRig = field(default_factory=default_lights)
    sds: sds.SdsConfig = field(default_factory=lambda: sds.SdsConfig(background=(1.0, 1.0, 1.0)))
    schedule: object = None
    noise_schedule: guidance.NoiseSchedule = field(default_factory=lambda: guidance.DEFAULT_SCHEDULE)


def optimize_texture(mesh: TexturedMesh, oracle, config: TextureConfig,
                     materials: Optional[MaterialMaps] = None) -> MaterialMaps:
    """SDS loop over texel parameters; texels clamped to [0, 1] after each step."""
    if mesh.uvs is None:
        raise ValueError("mesh has no UVs; run uv_unwrap first")
    if materials is None:
        materials = init_materials(config.texture_size)
    schedule = config.schedule or sds.texture_schedule(config.iterations)
    rng = np.random.default_rng(config.seed)
    cam = CameraConfig(
        elevation_range=config.camera.elevation_range,
        radius=config.camera.radius,
        fov_y=config.camera.fov_y,
        resolution=config.render_resolution,
    )

    gbuffer_cache = {}
    if config.camera_pool > 0:
        pool = [sample_random_camera(rng, cam) for _ in range(config.camera_pool)]
        for i, p in enumerate(pool):
            gbuffer_cache[i] = rasterize_mesh(mesh, p)

    state = AdamState(shapes={k: getattr(materials, k).shape for k in MaterialMaps.FIELDS})
    for k, shape in state.shapes.items():
        state.m[k] = np.zeros(shape)
        state.v[k] = np.zeros(shape)
    lrs = {k: config.lr for k in MaterialMaps.FIELDS}

    for step in range(config.iterations):
        t = schedule.timestep(step, rng)
        if config.camera_pool > 0:
            picks = rng.integers(0, config.camera_pool, size=config.batch)
            gbuffers = [gbuffer_cache[int(i)] for i in picks]
        else:
            gbuffers = [rasterize_mesh(mesh, sample_random_camera(rng, cam)) for _ in range(config.batch)]
        noise_seed = int(rng.integers(0, 2**63 - 1))
        background = sds._background(config.sds, rng)
        images = np.stack([shade(g, materials, config.lights, background) for g in gbuffers])
        request = guidance.GuidanceRequest(
            images=images,
            timestep=t,
            prompt=config.sds.prompt,
            negative_prompt=config.sds.negative_prompt,
            poses=[g.pose for g in gbuffers],
            cfg_scale=config.sds.cfg_scale,
            noise_seed=noise_seed,
        )
        response = oracle.predict(request)
        response.validate_against(request)
        if response.kind == guidance.IMAGE_GRAD_KIND:
            grad_images = response.tensors
        else:
            eps = guidance.noise_from_seed(noise_seed, images.shape)
            grad_images = sds.sds_image_gradient(
                response.tensors, eps, t, config.sds, config.noise_schedule
            )
        accum = {k: np.zeros_like(getattr(materials, k)) for k in MaterialMaps.FIELDS}
        for g, grad_img in zip(gbuffers, grad_images):
            grads = shade_backward(g, materials, config.lights, grad_img, background)
            for k in accum:
                accum[k] += grads[k] / len(gbuffers)
        updates = adam_step(state, accum, lrs)
        for k in MaterialMaps.FIELDS:
            arr = getattr(materials, k)
            arr -= updates[k]
            np.clip(arr, 0.0, 1.0, out=arr)
    mesh.material = materials
    return materials
