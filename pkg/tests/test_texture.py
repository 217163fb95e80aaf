import math

import numpy as np
import pytest

from conftest import fd_shade_grad, rel_err
from splatforge import guidance, sds, texture
from splatforge.cameras import CameraPose
from splatforge.gaussians import init_random_cloud, inverse_sigmoid
from splatforge.meshing import TexturedMesh, extract_mesh
from splatforge.uvatlas import uv_unwrap


def make_pose(res=16, azimuth=0.4, elevation=0.2):
    return CameraPose(
        azimuth=azimuth, elevation=elevation, radius=2.5,
        fov_y=math.radians(49.1), resolution=(res, res),
    )


def sphere_mesh(resolution=24, scale=0.25):
    cloud = init_random_cloud(1, seed=0)
    cloud.positions[:] = 0.0
    cloud.log_scales[:] = np.float32(np.log(scale))
    cloud.opacity_logits[:] = np.float32(inverse_sigmoid(0.9))
    return extract_mesh(cloud, resolution=resolution, threshold=0.5)


def ambient_rig(ambient=1.0):
    return texture.LightRig(
        directions=np.zeros((0, 3)), intensities=np.zeros(0), ambient=ambient
    )


class TestMaterials:
    def test_init_values(self):
        mats = texture.init_materials(16)
        assert np.all(mats.k_d == 0.5)
        assert np.all(mats.k_rm == [0.5, 0.0])
        assert np.all(mats.k_n == [0.5, 0.5, 1.0])

    def test_power_of_two_required(self):
        with pytest.raises(ValueError):
            texture.MaterialMaps(
                k_d=np.zeros((12, 12, 3)), k_rm=np.zeros((12, 12, 2)), k_n=np.zeros((12, 12, 3))
            )

    def test_range_enforced(self):
        mats = texture.init_materials(8)
        with pytest.raises(ValueError):
            texture.MaterialMaps(k_d=mats.k_d + 1.0, k_rm=mats.k_rm, k_n=mats.k_n)


class TestGBuffer:
    def test_sphere_center_depth(self):
        mesh = sphere_mesh()
        pose = make_pose(res=32, azimuth=0.0, elevation=0.0)
        g = texture.rasterize_mesh(mesh, pose)
        center_depth = g.depth[16, 16]
        r = np.linalg.norm(mesh.vertices, axis=-1).mean()
        assert center_depth == pytest.approx(2.5 - r, abs=0.05)

    def test_barycentrics_sum_to_one_on_hits(self):
        g = texture.rasterize_mesh(sphere_mesh(), make_pose(res=32))
        hits = g.hit
        assert hits.any()
        assert np.allclose(g.bary[hits].sum(-1), 1.0, atol=1e-9)
        assert np.all(g.bary[hits] >= -1e-9)

    def test_normals_face_camera(self):
        g = texture.rasterize_mesh(sphere_mesh(), make_pose(res=32))
        hits = g.hit
        to_eye = g.pose.eye[None, :] - g.world[hits]
        assert np.all((to_eye * g.normal[hits]).sum(-1) > 0)

    def test_miss_pixels_marked(self):
        g = texture.rasterize_mesh(sphere_mesh(), make_pose(res=32))
        assert np.all(g.tri_id[~g.hit] == -1)
        assert np.all(np.isinf(g.depth[~g.hit]))

    def test_world_points_lie_on_their_triangles(self):
        mesh = sphere_mesh()
        g = texture.rasterize_mesh(mesh, make_pose(res=32))
        hits = np.argwhere(g.hit)
        corners = mesh.face_corners()
        fn = mesh.face_normals()
        fn = fn / np.linalg.norm(fn, axis=-1, keepdims=True)
        tri = g.tri_id[g.hit]
        offset = ((g.world[g.hit] - corners[tri, 0]) * fn[tri]).sum(-1)
        assert np.abs(offset).max() < 1e-9
        assert hits.shape[0] > 0

    def test_requires_uvs(self):
        mesh = sphere_mesh()
        mesh.uvs = None
        with pytest.raises(ValueError):
            texture.rasterize_mesh(mesh, make_pose())


class TestShadeClosedForms:
    def test_ambient_only_equals_kd(self):
        mesh = sphere_mesh()
        g = texture.rasterize_mesh(mesh, make_pose(res=32))
        mats = texture.init_materials(64)
        mats.k_d[:] = [0.3, 0.6, 0.9]
        img = texture.shade(g, mats, ambient_rig(1.0), (0, 0, 0))
        assert np.allclose(img[g.hit], [0.3, 0.6, 0.9], atol=1e-12)
        assert np.allclose(img[~g.hit], 0.0)

    def test_all_dark_when_unlit(self):
        g = texture.rasterize_mesh(sphere_mesh(), make_pose(res=32))
        mats = texture.init_materials(64)
        img = texture.shade(g, mats, ambient_rig(0.0), (1, 1, 1))
        assert np.allclose(img[g.hit], 0.0)
        assert np.allclose(img[~g.hit], 1.0)

    def test_headlight_on_flat_facing_quad(self):
        # A quad facing the camera lit head-on: ndl = ndv = ndh = 1, so the
        # GGX terms collapse to D = 1/(pi a^2)... evaluated symbolically below.
        verts = np.array([[-1, -1, 0], [1, -1, 0], [-1, 1, 0], [1, 1, 0]], dtype=np.float64)
        tris = np.array([[0, 1, 3], [0, 3, 2]])
        mesh = uv_unwrap(TexturedMesh(vertices=verts, triangles=tris))
        # A 9x9 image puts pixel (4, 4)'s center exactly on the optical axis,
        # where ndl = ndv = ndh = hdv = 1 holds exactly.
        pose = make_pose(azimuth=0.0, elevation=0.0).with_resolution(9, 9)
        g = texture.rasterize_mesh(mesh, pose)
        mats = texture.init_materials(16)
        kd, rough, metal = 0.5, 0.5, 0.0
        lights = texture.LightRig(directions=[[0.0, 0.0, 1.0]], intensities=[1.0], ambient=0.2)
        img = texture.shade(g, mats, lights, (0, 0, 0))
        a2 = rough**4
        dist = a2 / (math.pi * (1.0 * (a2 - 1.0) + 1.0) ** 2)
        f0 = 0.04
        fres = f0  # hdv = 1 kills the Schlick term
        k = (rough + 1.0) ** 2 / 8.0
        g1 = 1.0 / (1.0 * (1.0 - k) + k)
        spec = dist * fres * g1 * g1 / (4.0 + 1e-8)
        expected = 0.2 * kd + (kd * (1 - metal) / math.pi + spec) * 1.0
        center = img[4, 4]
        assert np.allclose(center, expected, atol=1e-9)

    def test_shade_invariant_under_triangle_reorder(self):
        mesh = sphere_mesh()
        pose = make_pose(res=24)
        mats = texture.init_materials(32)
        mats.k_d[:] = np.random.default_rng(0).random(mats.k_d.shape)
        img_a = texture.shade(texture.rasterize_mesh(mesh, pose), mats, texture.default_lights(), (0, 0, 0))
        perm = np.random.default_rng(1).permutation(mesh.triangles.shape[0])
        shuffled = TexturedMesh(
            vertices=mesh.vertices, triangles=mesh.triangles[perm],
            normals=mesh.normals, uvs=mesh.uvs[perm], chart_ids=mesh.chart_ids[perm],
            charts=mesh.charts,
        )
        img_b = texture.shade(texture.rasterize_mesh(shuffled, pose), mats, texture.default_lights(), (0, 0, 0))
        assert np.allclose(img_a, img_b, atol=1e-12)


class TestShadeBackward:
    def make_scene(self):
        mesh = sphere_mesh()
        g = texture.rasterize_mesh(mesh, make_pose(res=16))
        rng = np.random.default_rng(5)
        # Stay away from the clamp corners and the roughness floor so the
        # shading is smooth over the finite-difference interval.
        mats = texture.MaterialMaps(
            k_d=rng.uniform(0.2, 0.8, (8, 8, 3)),
            k_rm=rng.uniform(0.2, 0.8, (8, 8, 2)),
            k_n=rng.uniform(0.35, 0.65, (8, 8, 3)),
        )
        lights = texture.LightRig(
            directions=[[1, 1, 1], [-1, 0.5, 0.5]], intensities=[0.4, 0.3], ambient=0.2
        )
        return g, mats, lights

    def test_zero_grad_image_gives_zero(self):
        g, mats, lights = self.make_scene()
        grads = texture.shade_backward(g, mats, lights, np.zeros((16, 16, 3)))
        for v in grads.values():
            assert np.all(v == 0.0)

    def test_linearity_in_grad_image(self):
        g, mats, lights = self.make_scene()
        rng = np.random.default_rng(0)
        g1 = rng.normal(size=(16, 16, 3))
        g2 = rng.normal(size=(16, 16, 3))
        a = texture.shade_backward(g, mats, lights, g1)
        b = texture.shade_backward(g, mats, lights, g2)
        c = texture.shade_backward(g, mats, lights, 2.0 * g1 - 0.5 * g2)
        for k in a:
            assert np.allclose(c[k], 2.0 * a[k] - 0.5 * b[k], atol=1e-12)

    def test_matches_finite_differences(self):
        g, mats, lights = self.make_scene()
        grad_image = np.random.default_rng(1).normal(size=(16, 16, 3))
        analytic = texture.shade_backward(g, mats, lights, grad_image, (0, 0, 0))
        for field in texture.MaterialMaps.FIELDS:
            fd = fd_shade_grad(g, mats, lights, (0, 0, 0), grad_image, field)
            assert rel_err(analytic[field], fd, floor=1e-4).max() < 1e-4, field

    def test_shape_mismatch(self):
        g, mats, lights = self.make_scene()
        with pytest.raises(ValueError):
            texture.shade_backward(g, mats, lights, np.zeros((8, 8, 3)))


class TestOptimizeTexture:
    def base_config(self, iterations=20, **kw):
        defaults = dict(
            iterations=iterations, batch=2, texture_size=32,
            render_resolution=(24, 24), seed=0, camera_pool=4,
            lights=ambient_rig(1.0), lr=0.05,
            sds=sds.SdsConfig(background=(1.0, 1.0, 1.0)),
        )
        defaults.update(kw)
        return texture.TextureConfig(**defaults)

    def test_zero_gradient_oracle_leaves_maps_unchanged(self):
        mesh = sphere_mesh()
        stub = guidance.StubOracle(kind=guidance.IMAGE_GRAD_KIND, value=0.0)
        mats = texture.optimize_texture(mesh, stub, self.base_config())
        init = texture.init_materials(32)
        for f in texture.MaterialMaps.FIELDS:
            assert np.array_equal(getattr(mats, f), getattr(init, f))

    def test_deterministic_across_runs(self):
        oracle = guidance.AnalyticOracle(target=np.tile([0.9, 0.1, 0.1], (24, 24, 1)))
        a = texture.optimize_texture(sphere_mesh(), oracle, self.base_config())
        b = texture.optimize_texture(sphere_mesh(), oracle, self.base_config())
        for f in texture.MaterialMaps.FIELDS:
            assert np.array_equal(getattr(a, f), getattr(b, f))

    def test_untouched_texels_keep_initialization(self):
        oracle = guidance.AnalyticOracle(target=np.tile([0.9, 0.1, 0.1], (24, 24, 1)))
        mats = texture.optimize_texture(sphere_mesh(), oracle, self.base_config())
        init = texture.init_materials(32)
        changed = np.any(mats.k_d != init.k_d, axis=-1)
        assert changed.any() and not changed.all()
        assert np.all(mats.k_d[~changed] == 0.5)

    def test_error_decreases_toward_target(self):
        target = np.tile([1.0, 0.0, 0.0], (24, 24, 1))
        oracle = guidance.AnalyticOracle(target=target)
        mesh = sphere_mesh()
        mats = texture.optimize_texture(mesh, oracle, self.base_config(iterations=60))
        init = texture.init_materials(32)
        changed = np.any(mats.k_d != init.k_d, axis=-1)
        err = np.abs(mats.k_d[changed] - np.array([1.0, 0, 0])).max(-1)
        assert err.mean() < 0.25  # started at 0.5 everywhere

    def test_texels_stay_clamped(self):
        oracle = guidance.AnalyticOracle(target=np.tile([2.0, -1.0, 0.5], (24, 24, 1)))
        mats = texture.optimize_texture(sphere_mesh(), oracle, self.base_config(iterations=30))
        for f in texture.MaterialMaps.FIELDS:
            arr = getattr(mats, f)
            assert arr.min() >= 0.0 and arr.max() <= 1.0

    def test_requires_uvs(self):
        mesh = sphere_mesh()
        mesh.uvs = None
        with pytest.raises(ValueError):
            texture.optimize_texture(mesh, guidance.StubOracle(), self.base_config())
