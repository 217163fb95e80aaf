"""Command-line surface.

Exit codes: 0 success, 2 configuration error, 3 oracle/transport error,
4 numerical failure.
"""

from __future__ import annotations

import math
import sys

import click
import numpy as np

from . import guidance, mesh_io, meshing, pipeline, ply_io, texture
from .cameras import CameraPose
from .config import ConfigError, load_config

EXIT_CONFIG = 2
EXIT_ORACLE = 3
EXIT_NUMERICAL = 4


def _run(fn):
    try:
        fn()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (guidance.TransportError, guidance.OracleProtocolError, guidance.OracleDataError) as exc:
        click.echo(f"oracle error: {exc}", err=True)
        sys.exit(EXIT_ORACLE)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except (ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG if isinstance(exc, ValueError) else 1)


@click.group()
def main():
    """Text-to-3D generation engine: splat optimization, mesh extraction,
    texture refinement, and multi-view FID evaluation."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), default="out")
@click.option("--seed", type=int, default=None)
def generate(config_path, out_dir, seed):
    """Run the full three-stage pipeline and export the asset bundle."""

    def go():
        overrides = {"seed": seed} if seed is not None else None
        cfg = load_config(config_path, overrides)
        paths = pipeline.run_pipeline(cfg, out_dir)
        click.echo(f"asset bundle written to {paths['asset_dir']}")

    _run(go)


@main.command()
@click.argument("which", type=click.Choice(["prior", "refine", "texture"]))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--in", "in_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
def stage(which, config_path, in_path, out_path):
    """Run a single pipeline stage between checkpoints."""

    def go():
        cfg = load_config(config_path)
        if which == "prior":
            cloud, _ = pipeline.run_stage1(cfg)
            ply_io.export_ply(cloud, out_path)
        elif which == "refine":
            if in_path is None:
                raise ConfigError("stage refine requires --in <stage1 ply>")
            cloud = ply_io.import_ply(in_path)
            cloud, _ = pipeline.run_stage2(cfg, cloud)
            ply_io.export_ply(cloud, out_path)
        else:
            if in_path is None:
                raise ConfigError("stage texture requires --in <stage2 ply>")
            cloud = ply_io.import_ply(in_path)
            mesh = pipeline.run_mesh_extraction(cfg, cloud)
            if mesh.is_empty:
                raise FloatingPointError("density field never crosses the mesh threshold")
            materials = pipeline.run_stage3(cfg, mesh)
            mesh_io.export_mesh(mesh, materials, out_path)
        click.echo(f"stage {which} checkpoint written to {out_path}")

    _run(go)


@main.command("extract-mesh")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--res", type=int, default=64)
@click.option("--threshold", type=float, default=1.0)
def extract_mesh_cmd(in_path, out_dir, res, threshold):
    """Extract a UV-unwrapped mesh from a splat PLY."""

    def go():
        cloud = ply_io.import_ply(in_path)
        mesh = meshing.extract_mesh(cloud, resolution=res, threshold=threshold)
        if mesh.is_empty:
            raise FloatingPointError("density field never crosses the mesh threshold")
        mesh_io.export_mesh(mesh, texture.init_materials(256), out_dir)
        click.echo(
            f"mesh with {len(mesh.vertices)} vertices / {len(mesh.triangles)} triangles "
            f"written to {out_dir}"
        )

    _run(go)


@main.group()
def evaluate():
    """Evaluation metrics."""


@evaluate.command("fid")
@click.option("--asset", "asset_path", type=click.Path(exists=True), required=True)
@click.option("--refs", "refs_dir", type=click.Path(exists=True), required=True)
@click.option("--views", type=int, default=10)
@click.option("--resolution", type=int, default=256)
def evaluate_fid_cmd(asset_path, refs_dir, views, resolution):
    """Multi-view Fréchet distance of an asset against reference images."""

    def go():
        score = pipeline.evaluate_fid(asset_path, refs_dir, views=views, resolution=resolution)
        click.echo(f"3D-FID: {score:.6f}")

    _run(go)


@main.command("render")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--azimuth", type=float, default=0.0, help="degrees")
@click.option("--elevation", type=float, default=0.0, help="degrees")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--resolution", type=int, default=256)
def render_cmd(in_path, azimuth, elevation, out_path, resolution):
    """Render one view of a splat PLY or exported mesh to a PNG."""

    def go():
        from PIL import Image

        from . import rasterizer

        pose = CameraPose(
            azimuth=math.radians(azimuth),
            elevation=math.radians(elevation),
            radius=2.5,
            fov_y=math.radians(49.1),
            resolution=(resolution, resolution),
        )
        import os

        if os.path.isdir(in_path):
            mesh = mesh_io.import_obj(os.path.join(in_path, "mesh.obj"))
            materials = pipeline._load_asset_materials(in_path)
            img = texture.shade(
                texture.rasterize_mesh(mesh, pose), materials, texture.default_lights(),
                (1.0, 1.0, 1.0),
            )
        else:
            cloud = ply_io.import_ply(in_path)
            img = rasterizer.render(cloud, pose, (1.0, 1.0, 1.0)).rgb
        Image.fromarray((np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)).save(out_path)
        click.echo(f"render written to {out_path}")

    _run(go)


if __name__ == "__main__":
    main()
