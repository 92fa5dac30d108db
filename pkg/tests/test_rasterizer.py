"""Forward rasterizer tests against a brute-force per-pixel oracle.

The oracle shares the projection stage (tested independently below against
the matrix formulas) but reimplements sorting and compositing with plain
per-pixel loops in float64, with no tiling and no early-skip machinery.
"""

import numpy as np
import pytest

from splatfield.geometry import GaussianCloud, PinholeCamera, Se3Pose, quat_from_rotvec
from splatfield.rasterizer import (
    ALPHA_MAX,
    bruteforce_render,
    project_cloud,
    project_gaussian,
    render,
)


def random_cloud(rng, n, spread=1.0, features=None):
    means = rng.normal(0.0, spread, (n, 3)) + [0.0, 0.0, 3.0]
    log_scales = rng.uniform(np.log(0.02), np.log(0.25), (n, 3))
    rotations = rng.normal(0.0, 1.0, (n, 4))
    opacity = rng.uniform(-2.0, 3.0, n)
    colors = rng.uniform(0.0, 1.0, (n, 3))
    return GaussianCloud(
        means=means,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=opacity,
        colors=colors,
        anchors=np.zeros(n, np.int64),
        features=features,
    )


def small_camera(w=32, h=32):
    return PinholeCamera(fx=0.8 * w, fy=0.8 * w, cx=w / 2, cy=h / 2, width=w, height=h)


class TestProjection:
    def test_cov2d_matches_matrix_formula(self):
        rng = np.random.default_rng(7)
        cloud = random_cloud(rng, 20)
        cam = small_camera()
        pose = Se3Pose(t=np.array([0.1, -0.2, 0.05]), q=quat_from_rotvec(np.array([0.1, 0.2, -0.1])))
        sp = project_cloud(cloud, cam, pose)

        w_rot = pose.rotation_matrix().T
        for i in range(len(cloud)):
            if not sp.valid[i]:
                continue
            q = cloud.rotations[i] / np.linalg.norm(cloud.rotations[i])
            w, x, y, z = q
            r = np.array([
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ])
            s = np.diag(np.exp(cloud.log_scales[i]))
            sigma = r @ s @ s @ r.T
            p = w_rot @ (cloud.means[i] - pose.t)
            px, py, pz = p
            j = np.array([
                [cam.fx / pz, 0.0, -cam.fx * px / pz**2],
                [0.0, cam.fy / pz, -cam.fy * py / pz**2],
            ])
            cov = j @ w_rot @ sigma @ w_rot.T @ j.T + 0.3 * np.eye(2)
            a, b, c = sp.cov2d[i]
            np.testing.assert_allclose([[a, b], [b, c]], cov, rtol=1e-10, atol=1e-12)
            conic = np.linalg.inv(cov)
            np.testing.assert_allclose(
                [sp.conic[i, 0], sp.conic[i, 1], sp.conic[i, 2]],
                [conic[0, 0], conic[0, 1], conic[1, 1]], rtol=1e-9,
            )
            lam = np.linalg.eigvalsh(cov).max()
            np.testing.assert_allclose(sp.radius[i], 3.0 * np.sqrt(lam), rtol=1e-10)

    def test_near_plane_culls(self):
        cam = small_camera()
        cloud = random_cloud(np.random.default_rng(0), 3)
        cloud.means[0] = [0.0, 0.0, -1.0]
        cloud.means[1] = [0.0, 0.0, 0.005]
        cloud.means[2] = [0.0, 0.0, 2.0]
        sp = project_cloud(cloud, cam, Se3Pose.identity())
        assert not sp.valid[0]
        assert not sp.valid[1]
        assert sp.valid[2]

    def test_offscreen_culls(self):
        cam = small_camera()
        cloud = random_cloud(np.random.default_rng(1), 2)
        cloud.means[0] = [50.0, 0.0, 2.0]  # far right of the frustum
        cloud.means[1] = [0.0, 0.0, 2.0]
        sp = project_cloud(cloud, cam, Se3Pose.identity())
        assert not sp.valid[0]
        assert sp.valid[1]

    def test_transparent_culls(self):
        cam = small_camera()
        cloud = random_cloud(np.random.default_rng(2), 2)
        cloud.means[:] = [0.0, 0.0, 2.0]
        cloud.opacity_logits[0] = -9.0  # sigmoid ~ 1.2e-4 < 1/255
        cloud.opacity_logits[1] = 0.0
        sp = project_cloud(cloud, cam, Se3Pose.identity())
        assert not sp.valid[0]
        assert sp.valid[1]

    def test_single_gaussian_helper(self):
        cam = small_camera()
        cloud = random_cloud(np.random.default_rng(3), 4)
        cloud.means[2] = [0.0, 0.0, -1.0]
        assert project_gaussian(cloud, 2, cam, Se3Pose.identity()) is None
        splat = project_gaussian(cloud, 1, cam, Se3Pose.identity())
        sp = project_cloud(cloud, cam, Se3Pose.identity())
        np.testing.assert_allclose(splat.mean2d, sp.mean2d[1])
        np.testing.assert_allclose(splat.depth, sp.z[1])


class TestSingleSplat:
    def test_center_pixel_alpha(self):
        # camera with cx, cy on an exact pixel center: the Gaussian term is
        # exp(0) there, so the pixel value equals sigmoid(opacity_logit)
        cam = PinholeCamera(fx=20.0, fy=20.0, cx=8.5, cy=8.5, width=16, height=16)
        cloud = GaussianCloud(
            means=np.array([[0.0, 0.0, 2.0]]),
            log_scales=np.full((1, 3), np.log(0.1)),
            rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
            opacity_logits=np.array([0.7]),
            colors=np.array([[1.0, 1.0, 1.0]]),
            anchors=np.zeros(1, np.int64),
        )
        out = render(cloud, cam, Se3Pose.identity())
        expected = 1.0 / (1.0 + np.exp(-0.7))
        np.testing.assert_allclose(out.image[8, 8], expected, rtol=1e-12)
        np.testing.assert_allclose(out.transmittance[8, 8], 1.0 - expected, rtol=1e-12)
        assert out.contributors[8, 8] == 1

    def test_alpha_clamp(self):
        cam = PinholeCamera(fx=20.0, fy=20.0, cx=8.5, cy=8.5, width=16, height=16)
        cloud = GaussianCloud(
            means=np.array([[0.0, 0.0, 2.0]]),
            log_scales=np.full((1, 3), np.log(0.3)),
            rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
            opacity_logits=np.array([20.0]),  # sigmoid ~ 1, clamped to 0.99
            colors=np.array([[0.5, 0.5, 0.5]]),
            anchors=np.zeros(1, np.int64),
        )
        out = render(cloud, cam, Se3Pose.identity(), background=np.array([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(out.image[8, 8], 0.99 * 0.5 + 0.01 * 1.0, rtol=1e-12)
        np.testing.assert_allclose(out.transmittance[8, 8], 0.01, rtol=1e-10)

    def test_weights_and_transmittance_sum_to_one(self):
        # with all-white splats over a white background every pixel is 1
        rng = np.random.default_rng(11)
        cloud = random_cloud(rng, 60)
        cloud.colors[:] = 1.0
        cam = small_camera(48, 40)
        out = render(cloud, cam, Se3Pose.identity(), background=np.ones(3))
        np.testing.assert_allclose(out.image, 1.0, atol=1e-12)


class TestCompositing:
    def test_empty_cloud_renders_background(self):
        cam = small_camera()
        cloud = GaussianCloud.empty()
        bg = np.array([0.2, 0.4, 0.6])
        out = render(cloud, cam, Se3Pose.identity(), background=bg)
        assert np.all(out.image == bg)
        assert np.all(out.transmittance == 1.0)
        assert np.all(out.contributors == 0)

    def test_uncovered_tiles_get_background(self):
        # cluster in one corner so far tiles have no candidates at all
        rng = np.random.default_rng(5)
        cloud = random_cloud(rng, 10, spread=0.05)
        cam = small_camera(64, 64)
        pose = Se3Pose(t=np.array([-1.2, -1.2, 0.0]), q=np.array([1.0, 0.0, 0.0, 0.0]))
        bg = np.array([0.1, 0.2, 0.3])
        out = render(cloud, cam, pose, background=bg)
        assert np.all(out.image[0, 0] == bg)
        assert out.transmittance[0, 0] == 1.0

    def test_equal_depth_ties_blend_in_index_order(self):
        cam = PinholeCamera(fx=20.0, fy=20.0, cx=8.5, cy=8.5, width=16, height=16)
        base = dict(
            log_scales=np.full((2, 3), np.log(0.2)),
            rotations=np.tile([1.0, 0.0, 0.0, 0.0], (2, 1)),
            opacity_logits=np.zeros(2),
            anchors=np.zeros(2, np.int64),
        )
        cloud = GaussianCloud(
            means=np.tile([0.0, 0.0, 2.0], (2, 1)),
            colors=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
            **base,
        )
        out = render(cloud, cam, Se3Pose.identity())
        # index 0 in front: 0.5 red, then 0.5 * 0.5 green
        np.testing.assert_allclose(out.image[8, 8], [0.5, 0.25, 0.0], atol=1e-12)

    def test_feature_mode_requires_features(self):
        cloud = random_cloud(np.random.default_rng(0), 3)
        with pytest.raises(ValueError, match="features"):
            render(cloud, small_camera(), Se3Pose.identity(), mode="feature")

    def test_background_channel_mismatch_raises(self):
        cloud = random_cloud(np.random.default_rng(0), 3)
        with pytest.raises(ValueError, match="channels"):
            render(cloud, small_camera(), Se3Pose.identity(), background=np.zeros(4))

    def test_unknown_mode_raises(self):
        cloud = random_cloud(np.random.default_rng(0), 3)
        with pytest.raises(ValueError, match="mode"):
            render(cloud, small_camera(), Se3Pose.identity(), mode="normals")


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_color_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, 40)
        cam = small_camera(32, 24)
        pose = Se3Pose(t=rng.normal(0, 0.1, 3), q=quat_from_rotvec(rng.normal(0, 0.05, 3)))
        bg = rng.uniform(0, 1, 3)
        out = render(cloud, cam, pose, background=bg)
        ref, t_ref, n_ref = bruteforce_render(cloud, cam, pose, "color", bg)
        np.testing.assert_allclose(out.image, ref, atol=1e-12)
        np.testing.assert_allclose(out.transmittance, t_ref, atol=1e-12)
        np.testing.assert_array_equal(out.contributors, n_ref)

    def test_feature_matches_bruteforce(self):
        rng = np.random.default_rng(9)
        feats = rng.normal(0, 1, (30, 8))
        cloud = random_cloud(rng, 30, features=feats)
        cam = small_camera(32, 32)
        out = render(cloud, cam, Se3Pose.identity(), mode="feature")
        ref, t_ref, _ = bruteforce_render(cloud, cam, Se3Pose.identity(), "feature", np.zeros(8))
        np.testing.assert_allclose(out.image, ref, atol=1e-12)
        np.testing.assert_allclose(out.transmittance, t_ref, atol=1e-12)

    def test_depth_matches_bruteforce(self):
        rng = np.random.default_rng(13)
        cloud = random_cloud(rng, 30)
        cam = small_camera(32, 32)
        out = render(cloud, cam, Se3Pose.identity(), mode="depth")
        ref, _, _ = bruteforce_render(cloud, cam, Se3Pose.identity(), "depth", np.zeros(1))
        np.testing.assert_allclose(out.image, ref, atol=1e-12)

    def test_dense_overlap_hits_termination(self):
        # near-opaque stacked splats drive transmittance under the cutoff,
        # exercising the early-termination path against the oracle
        rng = np.random.default_rng(21)
        cloud = random_cloud(rng, 50, spread=0.15)
        cloud.opacity_logits[:] = 4.0
        cam = small_camera(32, 32)
        out = render(cloud, cam, Se3Pose.identity())
        ref, t_ref, n_ref = bruteforce_render(cloud, cam, Se3Pose.identity(), "color", np.zeros(3))
        assert t_ref.min() < 1e-4  # scene actually triggers the cutoff
        np.testing.assert_allclose(out.image, ref, atol=1e-12)
        np.testing.assert_array_equal(out.contributors, n_ref)

    def test_clamped_alpha_region(self):
        rng = np.random.default_rng(31)
        cloud = random_cloud(rng, 20)
        cloud.opacity_logits[:] = 12.0
        cam = small_camera(24, 24)
        out = render(cloud, cam, Se3Pose.identity())
        ref, _, _ = bruteforce_render(cloud, cam, Se3Pose.identity(), "color", np.zeros(3))
        assert ALPHA_MAX == 0.99
        np.testing.assert_allclose(out.image, ref, atol=1e-12)
