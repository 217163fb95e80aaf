"""Stage orchestration: prior generation, refinement, mesh extraction,
texture optimization, checkpointing, and evaluation entry points.

Each stage draws from its own seed stream derived from (seed, stage index),
so resuming from a stage checkpoint reproduces an uninterrupted run
bit-for-bit.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import adam, density, fid, guidance, mesh_io, meshing, ply_io, sds, texture
from .cameras import CameraConfig, CameraPose, yaw_ring, sample_orthogonal_batch, sample_random_camera
from .config import OracleConfig, PipelineConfig
from .gaussians import GaussianCloud, init_random_cloud

ORACLE_URL_ENV = "GAD_ORACLE_URL"

_STAGE_SEEDS = {"prior": 1, "refine": 2, "mesh": 3, "texture": 4}


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([seed, _STAGE_SEEDS[stage]])


def build_oracle(cfg: OracleConfig, resolution: int):
    if cfg.kind == "constant":
        target = np.tile(np.asarray(cfg.color, dtype=np.float64), (resolution, resolution, 1))
        return guidance.AnalyticOracle(target=target)
    if cfg.kind == "image":
        img = np.asarray(Image.open(cfg.target).convert("RGB"), dtype=np.float64) / 255.0
        img = fid.resize_area(img, (resolution, resolution))
        return guidance.AnalyticOracle(target=img)
    if cfg.kind == "remote":
        endpoint = os.environ.get(ORACLE_URL_ENV) or cfg.endpoint
        oracle = guidance.RemoteOracle(endpoint)
        oracle.check_reachable()
        return oracle
    raise ValueError(f"unknown oracle kind {cfg.kind!r}")


def _camera_config(config: PipelineConfig, resolution: int) -> CameraConfig:
    cam = config.camera
    return CameraConfig(
        elevation_range=(math.radians(cam.elevation_min_deg), math.radians(cam.elevation_max_deg)),
        radius=cam.radius,
        fov_y=math.radians(cam.fov_y_deg),
        resolution=(resolution, resolution),
    )


def _run_splat_stage(
    cloud: GaussianCloud,
    oracle,
    schedule: sds.TimestepSchedule,
    sds_config: sds.SdsConfig,
    cam: CameraConfig,
    dcfg: density.DensifyConfig,
    rng: np.random.Generator,
    steps: int,
    batch: int,
    joint_views: bool,
):
    opt_state = adam.AdamState.for_cloud(cloud)
    stats = density.GradStats.zeros(cloud.count)
    for step in range(steps):
        if joint_views:
            poses = [p for _ in range(batch) for p in sample_orthogonal_batch(rng, cam)]
        else:
            poses = [sample_random_camera(rng, cam) for _ in range(batch)]
        sds.sds_step(
            cloud, oracle, poses, schedule, step, opt_state, sds_config, rng, stats=stats
        )
        done = step + 1
        if done % dcfg.interval == 0 and done < steps:
            cloud, stats, report = density.densify_and_prune(cloud, stats, dcfg, rng=rng)
            opt_state.resize(report.keep_indices, report.n_new)
        if dcfg.reset_due(done):
            density.reset_opacity(cloud, dcfg.reset_cap)
    return cloud, opt_state


def run_stage1(config: PipelineConfig, oracle=None) -> tuple:
    s = config.stage1
    rng = stage_rng(config.seed, "prior")
    cloud = init_random_cloud(s.init_points, seed=config.seed, radius=s.init_radius)
    if oracle is None:
        oracle = build_oracle(s.oracle, s.resolution)
    return _run_splat_stage(
        cloud,
        oracle,
        sds.stage1_schedule(s.steps),
        sds.SdsConfig(cfg_scale=config.cfg_scale, joint_views=True,
                      prompt=config.prompt, negative_prompt=config.negative_prompt),
        _camera_config(config, s.resolution),
        density.DensifyConfig(
            interval=s.densify_interval,
            grad_threshold=s.grad_threshold,
            reset_at_step=s.opacity_reset_step,
            max_splats=s.max_splats,
        ),
        rng,
        s.steps,
        s.batch,
        joint_views=True,
    )


def run_stage2(config: PipelineConfig, cloud: GaussianCloud, oracle=None) -> tuple:
    s = config.stage2
    rng = stage_rng(config.seed, "refine")
    if oracle is None:
        oracle = build_oracle(s.oracle, s.resolution)
    return _run_splat_stage(
        cloud,
        oracle,
        sds.stage2_schedule(s.steps),
        sds.SdsConfig(cfg_scale=config.cfg_scale, joint_views=False,
                      prompt=config.prompt, negative_prompt=config.negative_prompt),
        _camera_config(config, s.resolution),
        density.DensifyConfig(
            interval=s.densify_interval,
            grad_threshold=s.grad_threshold,
            reset_interval=s.opacity_reset_interval,
            max_splats=s.max_splats,
        ),
        rng,
        s.steps,
        s.batch,
        joint_views=False,
    )


def run_mesh_extraction(config: PipelineConfig, cloud: GaussianCloud) -> meshing.TexturedMesh:
    return meshing.extract_mesh(
        cloud,
        resolution=config.mesh.grid_resolution,
        threshold=config.mesh.threshold,
    )


def run_stage3(config: PipelineConfig, mesh: meshing.TexturedMesh, oracle=None) -> texture.MaterialMaps:
    s = config.stage3
    if oracle is None:
        oracle = build_oracle(s.oracle, s.render_resolution)
    tex_config = texture.TextureConfig(
        iterations=s.iterations,
        batch=s.batch,
        texture_size=s.texture_size,
        render_resolution=(s.render_resolution, s.render_resolution),
        lr=s.texel_lr,
        seed=int(stage_rng(config.seed, "texture").integers(0, 2**31)),
        camera=_camera_config(config, s.render_resolution),
        camera_pool=s.camera_pool,
        sds=sds.SdsConfig(
            cfg_scale=config.cfg_scale,
            weight_strategy=s.weight_strategy,
            background=(1.0, 1.0, 1.0),
            prompt=config.prompt,
            negative_prompt=config.negative_prompt,
        ),
    )
    return texture.optimize_texture(mesh, oracle, tex_config)


def save_optimizer_state(state: adam.AdamState, path):
    arrays = {f"m_{k}": v for k, v in state.m.items()}
    arrays.update({f"v_{k}": v for k, v in state.v.items()})
    np.savez(path, version=1, step=state.step, **arrays)


def load_optimizer_state(path) -> adam.AdamState:
    data = np.load(path)
    if int(data["version"]) != 1:
        raise ValueError(f"{path}: unsupported optimizer-state version {data['version']}")
    m = {k[2:]: data[k] for k in data.files if k.startswith("m_")}
    v = {k[2:]: data[k] for k in data.files if k.startswith("v_")}
    return adam.AdamState(
        shapes={k: arr.shape for k, arr in m.items()}, step=int(data["step"]), m=m, v=v
    )


def run_pipeline(config: PipelineConfig, out_dir, oracles: dict = None) -> dict:
    """Full run: prior -> refine -> mesh -> texture, checkpointing each stage.

    `oracles` may inject in-process oracles per stage name (used by tests);
    remote endpoints are probed before any optimization starts.
    """
    oracles = oracles or {}
    os.makedirs(out_dir, exist_ok=True)
    # Fail fast on unreachable endpoints before spending any compute.
    for name, stage_cfg in (("prior", config.stage1), ("refine", config.stage2),
                            ("texture", config.stage3)):
        if name not in oracles and stage_cfg.oracle.kind == "remote":
            res = getattr(stage_cfg, "resolution", getattr(stage_cfg, "render_resolution", 256))
            oracles[name] = build_oracle(stage_cfg.oracle, res)

    paths = {}
    cloud, opt1 = run_stage1(config, oracle=oracles.get("prior"))
    paths["stage1_ply"] = os.path.join(out_dir, "stage1.ply")
    ply_io.export_ply(cloud, paths["stage1_ply"])
    save_optimizer_state(opt1, os.path.join(out_dir, "stage1_optim.npz"))

    cloud, opt2 = run_stage2(config, cloud, oracle=oracles.get("refine"))
    paths["stage2_ply"] = os.path.join(out_dir, "stage2.ply")
    ply_io.export_ply(cloud, paths["stage2_ply"])
    save_optimizer_state(opt2, os.path.join(out_dir, "stage2_optim.npz"))

    mesh = run_mesh_extraction(config, cloud)
    if mesh.is_empty:
        raise FloatingPointError(
            "mesh extraction produced no surface; the density field never crosses the threshold"
        )
    materials = run_stage3(config, mesh, oracle=oracles.get("texture"))
    asset_dir = os.path.join(out_dir, "asset")
    mesh_io.export_mesh(mesh, materials, asset_dir)
    paths["asset_dir"] = asset_dir
    return paths


def load_reference_images(directory, resolution: int):
    files = sorted(
        f for f in os.listdir(directory) if f.lower().endswith(".png")
    )
    if not files:
        raise ValueError(f"no PNG reference images found in {directory}")
    images = []
    for name in files:
        img = np.asarray(Image.open(os.path.join(directory, name)).convert("RGB"), dtype=np.float64)
        images.append(fid.resize_area(img / 255.0, (resolution, resolution)))
    return images


def render_asset_views(asset_path, views: int = 10, resolution: int = 256):
    """White-background yaw-ring renders of a splat PLY or an exported mesh dir."""
    from . import rasterizer

    ring = yaw_ring(views, elevation=0.0, resolution=(resolution, resolution))
    if os.path.isdir(asset_path):
        obj = os.path.join(asset_path, "mesh.obj")
        ply_candidates = [f for f in os.listdir(asset_path) if f.endswith(".ply")]
        if os.path.exists(obj):
            mesh = mesh_io.import_obj(obj)
            materials = _load_asset_materials(asset_path)
            lights = texture.default_lights()
            return [
                texture.shade(texture.rasterize_mesh(mesh, p), materials, lights, (1.0, 1.0, 1.0))
                for p in ring
            ]
        if ply_candidates:
            asset_path = os.path.join(asset_path, sorted(ply_candidates)[-1])
        else:
            raise ValueError(f"{asset_path}: no mesh.obj or .ply asset found")
    cloud = ply_io.import_ply(asset_path)
    return [rasterizer.render(cloud, p, (1.0, 1.0, 1.0)).rgb for p in ring]


def _load_asset_materials(asset_dir) -> texture.MaterialMaps:
    def load(name):
        return np.asarray(Image.open(os.path.join(asset_dir, name)), dtype=np.float64) / 255.0

    return texture.MaterialMaps(
        k_d=load("diffuse.png"),
        k_rm=load("roughness_metallic.png")[..., :2],
        k_n=load("normal.png"),
    )


def evaluate_fid(asset_path, reference_dir, views: int = 10, resolution: int = 256) -> float:
    renders = render_asset_views(asset_path, views=views, resolution=resolution)
    references = load_reference_images(reference_dir, resolution)
    return fid.fid3d(renders, references)
