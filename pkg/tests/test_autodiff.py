import json

import allure
import numpy as np
import pytest
import torch

from conftest import box_scene
from primvol.autodiff import SceneGrads, backward, grad_check, perturb, relative_error, render_differentiable
from primvol.fade import FadeParams
from primvol.geomcore import ArgumentError, Camera, so3_exp
from primvol.render import RenderOptions, TapeMismatchError, render
from primvol.scene import random_scene


@pytest.fixture
def soft_scene(rng):
    return random_scene(rng, 4, resolution=3, extent=0.35, scale_range=(0.25, 0.4), density=0.5, background=(0.1, 0.2, 0.3))


@pytest.fixture
def rotated_boxes():
    scene = box_scene(
        [[0.0, 0.0, 0.0], [0.25, -0.1, 0.3], [-0.3, 0.2, -0.2]],
        [[0.4, 0.3, 0.35], [0.3, 0.3, 0.25], [0.35, 0.25, 0.3]],
        [[0.8, 0.2, 0.1], [0.1, 0.7, 0.3], [0.2, 0.3, 0.9]],
        [0.3, 0.4, 0.25],
        background=(0.3, 0.3, 0.3),
    )
    rots = so3_exp(np.array([[0.3, -0.2, 0.5], [-0.4, 0.6, 0.1], [0.2, 0.2, -0.7]]))
    return scene.replace(rotations=rots)


@allure.feature("Backward pass")
class TestBackward:
    def test_grads_are_finite(self, camera, soft_scene, opts):
        tape = render(camera, soft_scene, opts=opts.with_(record_tape=True)).tape
        grads = backward(tape, soft_scene, np.ones((12, 12, 3)))
        assert isinstance(grads, SceneGrads)
        assert grads.is_finite()
        assert np.abs(grads.alpha).sum() > 0.0

    def test_rgb_gradient_is_exact_for_linear_loss(self, camera, soft_scene, opts):
        tape = render(camera, soft_scene, opts=opts.with_(record_tape=True)).tape
        g = np.random.default_rng(3).normal(size=(12, 12, 3))
        grads = backward(tape, soft_scene, g)
        index = np.unravel_index(np.argmax(np.abs(grads.rgb)), grads.rgb.shape)
        h = 1e-3

        def loss(delta):
            return float(np.sum(g * tape.replay(perturb(soft_scene, "rgb", index, delta)).data))

        numeric = (loss(h) - loss(-h)) / (2 * h)
        assert relative_error(float(grads.rgb[index]), numeric) < 1e-7

    def test_upstream_shape_mismatch(self, camera, soft_scene, opts):
        tape = render(camera, soft_scene, opts=opts.with_(record_tape=True)).tape
        with pytest.raises(TapeMismatchError):
            backward(tape, soft_scene, np.zeros((4, 4, 3)))

    def test_other_scene_rejected(self, camera, soft_scene, opts):
        tape = render(camera, soft_scene, opts=opts.with_(record_tape=True)).tape
        with pytest.raises(TapeMismatchError):
            backward(tape, soft_scene.replace(scales=soft_scene.scales * 1.1), np.zeros((12, 12, 3)))

    def test_zero_upstream_gives_zero_grads(self, camera, rotated_boxes, opts):
        tape = render(camera, rotated_boxes, opts=opts.with_(record_tape=True)).tape
        grads = backward(tape, rotated_boxes, np.zeros((12, 12, 3)))
        for name in ("rgb", "alpha", "position", "rotation", "scale", "rotation_matrix"):
            assert np.all(grads.of_class(name) == 0.0), name

    def test_linear_in_upstream(self, camera, rotated_boxes, opts):
        tape = render(camera, rotated_boxes, opts=opts.with_(record_tape=True)).tape
        rng = np.random.default_rng(5)
        g1 = rng.normal(size=(12, 12, 3))
        g2 = rng.normal(size=(12, 12, 3))
        a = backward(tape, rotated_boxes, g1)
        b = backward(tape, rotated_boxes, g2)
        both = backward(tape, rotated_boxes, g1 + g2)
        for name in ("rgb", "alpha", "position", "rotation", "scale", "rotation_matrix"):
            total = both.of_class(name)
            parts = a.of_class(name) + b.of_class(name)
            scale = max(1.0, float(np.abs(total).max()))
            assert np.max(np.abs(total - parts)) <= 1e-12 * scale, name

    def test_face_terms_match_finite_differences(self, camera, opts):
        # no fade: the density stays constant up to the box faces
        flat = opts.with_(fade=FadeParams(enabled=False))
        scene = box_scene([0.05, -0.03, 0.02], [0.4, 0.35, 0.3], [0.7, 0.2, 0.4], 0.4, background=(0.2, 0.2, 0.2))
        tape = render(camera, scene, opts=flat.with_(record_tape=True)).tape
        g = np.random.default_rng(2).normal(size=(12, 12, 3))
        grads = backward(tape, scene, g)
        h = 1e-6

        def loss(name, index, delta):
            return float(np.sum(g * render(camera, perturb(scene, name, index, delta), opts=flat).image.data))

        for name, index in (("scale", (0, 2)), ("position", (0, 0)), ("scale", (0, 0)), ("rotation", (0, 1))):
            numeric = (loss(name, index, h) - loss(name, index, -h)) / (2 * h)
            if index == (0, 2):
                assert abs(numeric) > 1e-3
            assert relative_error(float(grads.of_class(name)[index]), numeric, floor=1e-4) < 5e-3, (name, index)

    def test_transparent_scene_still_gets_alpha_gradient(self, camera, opts):
        scene = box_scene([0, 0, 0], 0.5, [0.9, 0.1, 0.1], 0.0, background=(0.2, 0.2, 0.2))
        tape = render(camera, scene, opts=opts.with_(record_tape=True)).tape
        grads = backward(tape, scene, np.ones((12, 12, 3)))
        assert grads.is_finite()
        assert grads.alpha.min() < 0.0
        assert not grads.rgb.any()


@allure.feature("Gradient check")
class TestGradCheck:
    def test_payload_classes(self, camera, soft_scene, opts):
        report = grad_check(soft_scene, camera, opts, probes=6, classes=("rgb", "alpha"))
        assert report.classes["rgb"].passed, report.classes["rgb"].failures
        assert report.classes["alpha"].passed, report.classes["alpha"].failures
        assert report.classes["rgb"].checked > 0

    def test_spatial_classes(self, camera, rotated_boxes, opts):
        report = grad_check(rotated_boxes, camera, opts, probes=6, h=1e-5, classes=("position", "rotation", "scale"))
        for name, result in report.classes.items():
            assert result.passed, (name, result.failures)

    def test_report_save(self, tmp_path, camera, soft_scene, opts):
        report = grad_check(soft_scene, camera, opts, probes=2, classes=("rgb",))
        path = report.save(tmp_path / "gradcheck.json")
        data = json.loads(path.read_text())
        assert data["passed"] is report.passed
        assert set(data["classes"]) == {"rgb"}
        assert data["h"] == report.h

    def test_saturated_alpha_checks_are_skipped(self, camera, opts):
        scene = box_scene([0, 0, 0], 0.5, [0.6, 0.3, 0.2], 20.0)
        report = grad_check(scene, camera, opts, probes=4, classes=("alpha",))
        result = report.classes["alpha"]
        assert result.skipped == 4
        assert result.checked == 0
        assert result.passed and not result.failures

    def test_dropped_gradient_is_caught(self, monkeypatch, camera, rotated_boxes, opts):
        from primvol import autodiff

        exact = autodiff.backward

        def without_first_scale(tape, scene, grad_image):
            grads = exact(tape, scene, grad_image)
            grads.scale[0] = 0.0
            return grads

        monkeypatch.setattr(autodiff, "backward", without_first_scale)
        report = grad_check(rotated_boxes, camera, opts, probes=9, h=1e-5, classes=("scale",))
        result = report.classes["scale"]
        assert not result.passed
        assert {failure["index"][0] for failure in result.failures} == {0}

    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-9) == 1.0
        assert relative_error(0.0, 1e-9, floor=1e-3) == pytest.approx(1e-6)

    def test_check_count_must_be_positive(self, camera, soft_scene, opts):
        with pytest.raises(ArgumentError):
            grad_check(soft_scene, camera, opts, probes=0)

    def test_perturb_leaves_original(self, soft_scene):
        moved = perturb(soft_scene, "position", (1, 2), 0.5)
        assert moved.positions[1, 2] == soft_scene.positions[1, 2] + 0.5
        assert moved.positions[0, 0] == soft_scene.positions[0, 0]

    @pytest.mark.slow
    def test_five_hundred_checks(self, rng):
        camera = Camera.look_at((0.0, 0.5, 3.0), (0.0, 0.0, 0.0), focal=40.0, width=32, height=32)
        scene = random_scene(rng, 8, resolution=4, extent=0.5, scale_range=(0.2, 0.4), density=0.6)
        report = grad_check(scene, camera, RenderOptions(step=0.02), probes=100)
        assert sum(c.checked + c.skipped for c in report.classes.values()) >= 500
        assert report.passed


@allure.feature("Torch bridge")
class TestTorchBridge:
    def test_matches_backward(self, camera, rotated_boxes, opts):
        tensors = [
            torch.tensor(np.array(a), dtype=torch.float64, requires_grad=True)
            for a in (rotated_boxes.positions, rotated_boxes.rotations, rotated_boxes.scales, rotated_boxes.rgb, rotated_boxes.alpha)
        ]
        image = render_differentiable(*tensors, camera=camera, opts=opts, background=tuple(rotated_boxes.background))
        g = np.random.default_rng(1).normal(size=(12, 12, 3))
        (image * torch.from_numpy(g)).sum().backward()

        result = render(camera, rotated_boxes, opts=opts.with_(record_tape=True))
        np.testing.assert_array_equal(image.detach().numpy(), result.image.data)
        grads = backward(result.tape, rotated_boxes, g)
        np.testing.assert_allclose(tensors[0].grad.numpy(), grads.position)
        np.testing.assert_allclose(tensors[1].grad.numpy(), grads.rotation_matrix)
        np.testing.assert_allclose(tensors[2].grad.numpy(), grads.scale)
        np.testing.assert_allclose(tensors[3].grad.numpy(), grads.rgb)
        np.testing.assert_allclose(tensors[4].grad.numpy(), grads.alpha)

    def test_float32_inputs(self, camera, rotated_boxes, opts):
        tensors = [
            torch.tensor(np.array(a), dtype=torch.float32, requires_grad=True)
            for a in (rotated_boxes.positions, rotated_boxes.rotations, rotated_boxes.scales, rotated_boxes.rgb, rotated_boxes.alpha)
        ]
        image = render_differentiable(*tensors, camera=camera, opts=opts)
        assert image.dtype == torch.float32 and image.shape == (12, 12, 3)
        image.sum().backward()
        assert tensors[0].grad.dtype == torch.float32
