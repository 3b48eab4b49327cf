import math

import allure
import numpy as np
import pytest

from primvol.geomcore import (
    PSNR_IDENTICAL_DB,
    ROTATION_ANGLE_CLAMP,
    ArgumentError,
    Camera,
    ImageBuffer,
    Ray,
    Rotation,
    Vec3,
    axis_angle_to_rotation,
    camera_ray,
    camera_rays,
    clamp_axis_angle,
    euler_xyz_degrees,
    psnr,
    rotation_compose,
    rotation_to_axis_angle,
    so3_exp,
    so3_log,
)


@allure.feature("Rotations")
class TestRotations:
    def test_exp_of_zero_is_identity(self):
        assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))

    def test_exp_is_orthonormal(self, rng):
        r = so3_exp(rng.normal(size=(16, 3)))
        eye = np.broadcast_to(np.eye(3), r.shape)
        np.testing.assert_allclose(np.swapaxes(r, -1, -2) @ r, eye, atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-12)

    def test_log_inverts_exp(self, rng):
        v = rng.normal(size=(8, 3))
        v *= (2.5 / np.linalg.norm(v, axis=-1))[:, None] * rng.uniform(0.01, 1.0, size=(8, 1))
        np.testing.assert_allclose(so3_log(so3_exp(v)), v, atol=1e-9)

    def test_axis_angle_is_clamped(self):
        clamped, flag = clamp_axis_angle(np.array([4.0, 0.0, 0.0]))
        assert flag
        assert math.isclose(np.linalg.norm(clamped), ROTATION_ANGLE_CLAMP)

    def test_quaternion_sign_is_irrelevant(self):
        q = Rotation(0.5, 0.5, 0.5, 0.5)
        assert q == Rotation(-0.5, -0.5, -0.5, -0.5)
        assert hash(q) == hash(Rotation(-0.5, -0.5, -0.5, -0.5))

    def test_compose_with_inverse_is_identity(self):
        r = axis_angle_to_rotation([0.3, -0.2, 0.9])
        assert rotation_compose(r, r.inverse()).is_close(Rotation.identity(), tol=1e-12)

    def test_quaternion_matches_rodrigues(self, rng):
        v = rng.normal(size=3)
        np.testing.assert_allclose(axis_angle_to_rotation(v).matrix(), so3_exp(v), atol=1e-12)
        np.testing.assert_allclose(rotation_to_axis_angle(axis_angle_to_rotation(v)), v, atol=1e-9)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ArgumentError):
            Rotation(0.0, 0.0, 0.0, 0.0)

    def test_euler_angles(self):
        np.testing.assert_allclose(euler_xyz_degrees(so3_exp([0.0, 0.0, math.pi / 2])), [0.0, 0.0, 90.0], atol=1e-9)
        np.testing.assert_allclose(euler_xyz_degrees(so3_exp([math.pi / 6, 0.0, 0.0])), [30.0, 0.0, 0.0], atol=1e-9)


@allure.feature("Rays and cameras")
class TestCamera:
    def test_vec3_rejects_non_finite(self):
        with pytest.raises(ArgumentError):
            Vec3(0.0, float("nan"), 1.0)

    def test_ray_requires_unit_direction(self):
        with pytest.raises(ArgumentError):
            Ray(origin=(0, 0, 0), direction=(0, 0, 2), t_min=0.0, t_max=1.0)

    def test_ray_requires_ordered_bounds(self):
        with pytest.raises(ArgumentError):
            Ray(origin=(0, 0, 0), direction=(0, 0, 1), t_min=1.0, t_max=1.0)

    def test_look_at_points_at_target(self, camera):
        np.testing.assert_allclose(camera.forward, [0.0, 0.0, -1.0], atol=1e-12)
        np.testing.assert_allclose(camera.center, [0.0, 0.0, 3.0])

    def test_rays_are_unit_and_forward(self, camera):
        origins, dirs = camera_rays(camera)
        assert dirs.shape == (camera.width * camera.height, 3)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-12)
        assert np.all(dirs @ camera.forward > 0.0)
        np.testing.assert_allclose(origins, np.broadcast_to(camera.center, origins.shape))

    def test_rays_are_row_major(self, camera):
        _, dirs = camera_rays(camera)
        _, one = camera_rays(camera, np.array([[3, 5]]))
        np.testing.assert_array_equal(dirs[5 * camera.width + 3], one[0])

    def test_pixel_y_points_down(self, camera):
        _, dirs = camera_rays(camera, np.array([[6, 0], [6, 11]]))
        assert dirs[0, 1] > 0.0 > dirs[1, 1]

    def test_camera_ray_bounds(self, camera):
        ray = camera_ray(camera, (0, 0), 0.1, 6.0)
        assert ray.t_min == 0.1 and ray.t_max == 6.0
        with pytest.raises(ArgumentError):
            camera_ray(camera, (12, 0), 0.1, 6.0)

    def test_record_round_trip(self, camera):
        again = Camera.from_record(camera.to_record())
        np.testing.assert_array_equal(again.pose, camera.pose)
        assert (again.focal, again.principal_point, again.resolution) == (
            camera.focal,
            camera.principal_point,
            camera.resolution,
        )

    def test_invalid_record(self):
        with pytest.raises(ArgumentError):
            Camera.from_record({"pose": [0.0] * 15, "focal": 1.0})

    def test_with_resolution_scales_intrinsics(self, camera):
        half = camera.with_resolution(6, 6)
        assert half.focal == camera.focal / 2
        assert half.principal_point == (3.0, 3.0)


@allure.feature("Images")
class TestImages:
    def test_psnr_identical(self):
        img = np.full((4, 4, 3), 0.3)
        assert psnr(img, img) == PSNR_IDENTICAL_DB

    def test_psnr_constant_offset(self):
        a = np.zeros((4, 4, 3))
        assert math.isclose(psnr(a, a + 0.1), 20.0, rel_tol=1e-9)

    def test_psnr_shape_mismatch(self):
        with pytest.raises(ArgumentError):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_image_buffer_validation(self):
        assert ImageBuffer(np.zeros((2, 3))).shape == (2, 3, 1)
        with pytest.raises(ArgumentError):
            ImageBuffer(np.full((2, 2, 3), np.nan))
        with pytest.raises(ArgumentError):
            ImageBuffer(np.zeros((2, 2, 2)))

    def test_image_buffer_is_read_only(self):
        img = ImageBuffer.filled(2, 2, (0.1, 0.2, 0.3))
        with pytest.raises(ValueError):
            img.data[0, 0, 0] = 1.0
