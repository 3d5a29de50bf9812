import numpy as np
import pytest

from splatflight.geom import CameraIntrinsics, Quat, RigidTransform, quat_multiply, rotate_vector
from splatflight.splat import (
    Gaussian3D,
    SimilarityTransform,
    SplatScene,
    project_gaussian,
    render,
    render_reference,
)

from conftest import make_room_scene, random_room_pose, small_intrinsics

IDENTITY = RigidTransform.identity()


def single_gaussian_scene(mean, scale, opacity, color, background=(0.0, 0.0, 0.0)):
    g = Gaussian3D(np.asarray(mean, float), np.asarray(scale, float), Quat.identity(), opacity, np.asarray(color, float))
    return SplatScene.from_gaussians([g], background=background)


def frac_within(img_a, img_b, tol_255=2):
    diff = np.abs(img_a.pixels.astype(np.int32) - img_b.pixels.astype(np.int32))
    return np.mean(np.all(diff <= tol_255, axis=2))


class TestProjectGaussian:
    def test_on_axis_isotropic_matches_analytic_jacobian(self):
        k = small_intrinsics()
        s, d = 0.05, 1.0
        g = Gaussian3D(np.array([0.0, 0.0, d]), np.full(3, s), Quat.identity(), 0.9, np.full(3, 0.5))
        out = project_gaussian(g, IDENTITY, k)
        expected = (k.fx * s / d) ** 2
        np.testing.assert_allclose(np.diag(out.cov2d) - 0.3, expected, rtol=0.01)
        assert abs(out.cov2d[0, 1]) < 0.01 * expected
        np.testing.assert_allclose(out.mean2d, [k.cx, k.cy], atol=1e-9)
        assert abs(out.depth - d) < 1e-12

    def test_behind_camera_not_visible(self):
        k = small_intrinsics()
        g = Gaussian3D(np.array([0.0, 0.0, -1.0]), np.full(3, 0.1), Quat.identity(), 0.9, np.full(3, 0.5))
        assert project_gaussian(g, IDENTITY, k) is None
        g_near = Gaussian3D(np.array([0.0, 0.0, 0.005]), np.full(3, 0.1), Quat.identity(), 0.9, np.full(3, 0.5))
        assert project_gaussian(g_near, IDENTITY, k) is None

    def test_doubling_depth_halves_projected_std(self):
        k = small_intrinsics()
        s = 0.05
        sig = []
        for d in (2.0, 4.0):
            g = Gaussian3D(np.array([0.0, 0.0, d]), np.full(3, s), Quat.identity(), 0.9, np.full(3, 0.5))
            out = project_gaussian(g, IDENTITY, k)
            sig.append(np.sqrt(out.cov2d[0, 0] - 0.3))
        assert abs(sig[0] / sig[1] - 2.0) < 0.02

    def test_camera_pose_respected(self):
        # Camera displaced and yawed; a point on its boresight projects to the center.
        k = small_intrinsics()
        cam = RigidTransform(Quat.from_axis_angle([0, 0, 1], 0.8), np.array([1.0, -2.0, 0.5]))
        p_world = cam.apply([0.0, 0.0, 3.0])
        g = Gaussian3D(p_world, np.full(3, 0.1), Quat.identity(), 0.9, np.full(3, 0.5))
        out = project_gaussian(g, cam, k)
        np.testing.assert_allclose(out.mean2d, [k.cx, k.cy], atol=1e-6)
        assert abs(out.depth - 3.0) < 1e-9


class TestRenderBasics:
    def test_empty_scene_exact_background(self):
        k = small_intrinsics()
        scene = SplatScene.from_gaussians([], background=(0.2, 0.4, 0.6))
        for renderer in (render, render_reference):
            img = renderer(scene, IDENTITY, IDENTITY, k)
            expected = np.rint(np.array([0.2, 0.4, 0.6]) * 255).astype(np.uint8)
            assert np.all(img.pixels == expected)

    def test_single_gaussian_centered_and_symmetric(self, warm_kernels):
        k = small_intrinsics()
        scene = single_gaussian_scene([0, 0, 2.0], [0.3, 0.3, 0.3], 0.95, [1.0, 1.0, 1.0])
        img = render(scene, IDENTITY, IDENTITY, k, workers=1)
        # The principal-point pixel carries the largest blend weight (the peak
        # may be shared with immediate neighbours after 8-bit quantization).
        assert img.pixels[int(k.cy), int(k.cx), 0] == img.pixels[:, :, 0].max()
        body = img.pixels[:, 1:, :].astype(np.int32)
        assert np.max(np.abs(body - body[:, ::-1, :])) <= 1

    def test_occlusion_order(self, warm_kernels):
        k = small_intrinsics()
        near_red = Gaussian3D(np.array([0, 0, 1.0]), np.full(3, 0.2), Quat.identity(), 0.9, np.array([1.0, 0, 0]))
        far_blue = Gaussian3D(np.array([0, 0, 2.0]), np.full(3, 0.4), Quat.identity(), 0.9, np.array([0, 0, 1.0]))
        center = (int(k.cy), int(k.cx))

        img = render(SplatScene.from_gaussians([near_red, far_blue]), IDENTITY, IDENTITY, k, workers=1)
        r, _, b = img.pixels[center]
        assert r > b

        swapped = [
            Gaussian3D(np.array([0, 0, 2.0]), np.full(3, 0.4), Quat.identity(), 0.9, np.array([1.0, 0, 0])),
            Gaussian3D(np.array([0, 0, 1.0]), np.full(3, 0.2), Quat.identity(), 0.9, np.array([0, 0, 1.0])),
        ]
        img2 = render(SplatScene.from_gaussians(swapped), IDENTITY, IDENTITY, k, workers=1)
        r2, _, b2 = img2.pixels[center]
        assert b2 > r2

    def test_two_term_blend_matches_hand_formula(self, warm_kernels):
        k = small_intrinsics()
        scene = SplatScene.from_gaussians(
            [
                Gaussian3D(np.array([0, 0, 1.0]), np.full(3, 0.5), Quat.identity(), 0.6, np.array([1.0, 0, 0])),
                Gaussian3D(np.array([0, 0, 2.0]), np.full(3, 1.0), Quat.identity(), 0.7, np.array([0, 1.0, 0])),
            ]
        )
        img = render(scene, IDENTITY, IDENTITY, k, workers=1)
        # At the shared center: alpha1 = 0.6, alpha2 = 0.7; C = a1 c1 + (1-a1) a2 c2.
        r, g, b = img.pixels[int(k.cy), int(k.cx)].astype(float) / 255.0
        assert abs(r - 0.6) < 2 / 255
        assert abs(g - 0.4 * 0.7) < 2 / 255
        assert b == 0

    def test_opacity_monotone_at_mean_pixel(self, warm_kernels):
        k = small_intrinsics()
        values = []
        for op in np.linspace(0.05, 0.95, 10):
            scene = single_gaussian_scene([0, 0, 2.0], [0.2] * 3, float(op), [1.0, 1.0, 1.0])
            img = render(scene, IDENTITY, IDENTITY, k, workers=1)
            values.append(int(img.pixels[int(k.cy), int(k.cx), 0]))
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert values[-1] > values[0]

    def test_deterministic_across_calls_and_workers(self, warm_kernels):
        scene = make_room_scene(800, seed=11)
        pose = random_room_pose(np.random.default_rng(3))
        k = small_intrinsics()
        imgs = [render(scene, pose, IDENTITY, k, workers=w) for w in (1, 1, 4, 7)]
        for other in imgs[1:]:
            np.testing.assert_array_equal(imgs[0].pixels, other.pixels)


class TestRendererEquivalence:
    def test_single_gaussian_matches_reference_exactly(self, warm_kernels):
        k = small_intrinsics()
        scene = single_gaussian_scene([0.3, -0.2, 1.5], [0.3, 0.1, 0.2], 0.8, [0.9, 0.6, 0.1], background=(0.1, 0.1, 0.1))
        a = render(scene, IDENTITY, IDENTITY, k, workers=1)
        b = render_reference(scene, IDENTITY, IDENTITY, k)
        assert np.max(np.abs(a.pixels.astype(int) - b.pixels.astype(int))) <= 1

    @pytest.mark.parametrize("seed,n", [(0, 300), (1, 800), (2, 2000)])
    def test_random_scenes_match_reference(self, warm_kernels, seed, n):
        scene = make_room_scene(n, seed=seed)
        pose = random_room_pose(np.random.default_rng(seed + 100))
        k = small_intrinsics()
        a = render(scene, pose, IDENTITY, k, workers=2)
        b = render_reference(scene, pose, IDENTITY, k)
        assert frac_within(a, b, 2) >= 0.999

    def test_rigid_invariance(self, warm_kernels):
        # Rotating/translating scene and camera together leaves the image unchanged.
        scene = make_room_scene(600, seed=21)
        rng = np.random.default_rng(22)
        pose = random_room_pose(rng)
        k = small_intrinsics()
        move = RigidTransform(
            Quat.from_array(rng.normal(size=4)).normalized(), rng.uniform(-3, 3, size=3)
        )
        moved_means = scene.means @ move.rotation.to_matrix().T + move.translation
        ax, ay, az, aw = (move.rotation.x, move.rotation.y, move.rotation.z, move.rotation.w)
        bx, by, bz, bw = scene.rotations.T
        moved_rots = np.column_stack(
            [
                aw * bx + ax * bw + ay * bz - az * by,
                aw * by + ay * bw + az * bx - ax * bz,
                aw * bz + az * bw + ax * by - ay * bx,
                aw * bw - ax * bx - ay * by - az * bz,
            ]
        )
        moved_scene = SplatScene(
            moved_means, scene.scales, moved_rots, scene.opacities, scene.colors, background=scene.background
        )
        moved_pose = move.compose(pose)
        img_a = render(scene, pose, IDENTITY, k, workers=1)
        img_b = render(moved_scene, moved_pose, IDENTITY, k, workers=1)
        assert frac_within(img_a, img_b, 2) >= 0.999

    def test_alignment_equivalent_to_pretransformed_scene(self, warm_kernels):
        # A scene stored in a scaled/rotated/shifted frame plus the alignment
        # mapping world into that frame renders identically to the same scene
        # expressed directly in world coordinates.
        rng = np.random.default_rng(31)
        world_scene = make_room_scene(500, seed=31)
        pose = random_room_pose(rng)
        k = small_intrinsics()

        align = SimilarityTransform(
            scale=2.5,
            rotation=Quat.from_array(rng.normal(size=4)).normalized(),
            translation=rng.uniform(-2, 2, size=3),
        )
        r_a = align.rotation.to_matrix()
        splat_means = align.apply(world_scene.means)
        ax, ay, az, aw = (align.rotation.x, align.rotation.y, align.rotation.z, align.rotation.w)
        bx, by, bz, bw = world_scene.rotations.T
        splat_rots = np.column_stack(
            [
                aw * bx + ax * bw + ay * bz - az * by,
                aw * by + ay * bw + az * bx - ax * bz,
                aw * bz + az * bw + ax * by - ay * bx,
                aw * bw - ax * bx - ay * by - az * bz,
            ]
        )
        aligned_scene = SplatScene(
            splat_means,
            world_scene.scales * align.scale,
            splat_rots,
            world_scene.opacities,
            world_scene.colors,
            alignment=align,
            background=world_scene.background,
        )
        img_world = render(world_scene, pose, IDENTITY, k, workers=1)
        img_aligned = render(aligned_scene, pose, IDENTITY, k, workers=1)
        assert frac_within(img_world, img_aligned, 1) >= 0.999

    def test_body_camera_mount_applied(self, warm_kernels):
        from splatflight.geom import body_camera_pose

        k = small_intrinsics()
        body = RigidTransform(Quat.from_axis_angle([0, 0, 1], 0.4), np.array([0.5, -0.2, -1.0]))
        mount = RigidTransform(Quat.from_axis_angle([0, 1, 0], 0.3), np.array([0.05, 0.0, 0.0]))
        # Place a sharp gaussian on the mounted camera's boresight, 2 m out.
        target = body_camera_pose(body, mount).apply([0.0, 0.0, 2.0])
        scene = single_gaussian_scene(target, [0.05] * 3, 0.95, [1.0, 1.0, 1.0])
        img = render(scene, body, mount, k, workers=1)
        peak = np.unravel_index(np.argmax(img.pixels[:, :, 0]), img.pixels.shape[:2])
        assert abs(peak[0] - k.cy) <= 1 and abs(peak[1] - k.cx) <= 1
        # Ignoring the mount has to move the blob well off the principal point.
        img_no_mount = render(scene, body, IDENTITY, k, workers=1)
        peak_no = np.unravel_index(np.argmax(img_no_mount.pixels[:, :, 0]), img_no_mount.pixels.shape[:2])
        assert abs(peak_no[0] - k.cy) + abs(peak_no[1] - k.cx) > 5
        # Reference agrees on the mounted-camera image.
        img_ref = render_reference(scene, body, mount, k)
        assert frac_within(img, img_ref, 2) >= 0.999


class TestImage:
    def test_png_ppm_roundtrip(self, tmp_path, warm_kernels):
        from PIL import Image as PILImage

        scene = make_room_scene(300, seed=51)
        pose = random_room_pose(np.random.default_rng(52))
        img = render(scene, pose, IDENTITY, small_intrinsics(), workers=1)
        png = tmp_path / "frame.png"
        ppm = tmp_path / "frame.ppm"
        img.save(png)
        img.save(ppm)
        back = np.asarray(PILImage.open(png))
        np.testing.assert_array_equal(back, img.pixels)
        raw = ppm.read_bytes()
        header = f"P6\n{img.width} {img.height}\n255\n".encode()
        assert raw == header + img.pixels.tobytes()

    def test_shape_validation(self):
        from splatflight.splat import Image

        with pytest.raises(ValueError):
            Image(4, 4, np.zeros((4, 4, 3), dtype=np.float64))
