from dataclasses import replace

import allure
import numpy as np
import pytest
import torch

from primvol import training
from primvol.dataset import DatasetError, MultiViewDataset
from primvol.generator import PrimitiveGenerator, load_checkpoint
from primvol.geomcore import ArgumentError
from primvol.losses import LossTerms, LossWeights
from primvol.training import (
    DivergenceError,
    InterpolationResult,
    distill,
    evaluate_psnr,
    fit_scene,
    interpolate,
    invert_image,
    state_path,
)


def _generator(settings, anchors, seed=3):
    return PrimitiveGenerator(settings.generator_config(anchors.count), seed=seed)


@pytest.fixture
def fit_views(tiny_teacher):
    return tiny_teacher.for_sample(0).split("train")


@allure.feature("Scene fitting")
class TestFit:
    def test_full_batch_loss_decreases(self, fit_views, anchors4, tiny_settings):
        tiny_settings.fit.batch_views = len(fit_views)
        result = fit_scene(fit_views, anchors4, tiny_settings, weights=LossWeights.reconstruction_only(), iters=15)
        assert result.final_loss < result.initial_loss
        assert len(result.scene) == anchors4.count
        assert result.log[0].step == 0 and result.log[-1].step == 15

    def test_is_deterministic(self, fit_views, anchors4, tiny_settings):
        a = fit_scene(fit_views, anchors4, tiny_settings, iters=3)
        b = fit_scene(fit_views, anchors4, tiny_settings, iters=3)
        np.testing.assert_array_equal(a.scene.positions, b.scene.positions)
        np.testing.assert_array_equal(a.scene.alpha, b.scene.alpha)
        assert a.final_loss == b.final_loss

    def test_payloads_stay_in_range(self, fit_views, anchors4, tiny_settings):
        scene = fit_scene(fit_views, anchors4, tiny_settings, iters=4).scene
        assert scene.rgb.min() >= 0.0 and scene.rgb.max() <= 1.0
        assert scene.alpha.min() >= 0.0

    def test_starts_from_initial_scene(self, fit_views, small_scene, tiny_settings):
        result = fit_scene(fit_views, None, tiny_settings, init=small_scene, iters=0)
        np.testing.assert_allclose(result.scene.positions, small_scene.positions)
        assert result.initial_loss == result.final_loss

    def test_needs_two_views(self, fit_views, anchors4, tiny_settings):
        single = MultiViewDataset(fit_views.root, [fit_views[0]])
        with pytest.raises(DatasetError):
            fit_scene(single, anchors4, tiny_settings, iters=1)

    def test_needs_anchors_or_scene(self, fit_views, tiny_settings):
        with pytest.raises(ArgumentError):
            fit_scene(fit_views, None, tiny_settings, iters=1)

    def test_divergence_keeps_log(self, monkeypatch, fit_views, anchors4, tiny_settings):
        def nan_loss(*args, **kwargs):
            return LossTerms(total=torch.tensor(float("nan"), dtype=torch.float64), terms={"total": float("nan")})

        monkeypatch.setattr(training, "total_loss", nan_loss)
        with pytest.raises(DivergenceError) as info:
            fit_scene(fit_views, anchors4, tiny_settings, iters=5)
        assert [r.step for r in info.value.log] == [0]

    def test_evaluate_psnr(self, fit_views, anchors4, tiny_settings):
        scene = fit_scene(fit_views, anchors4, tiny_settings, iters=0).scene
        score = evaluate_psnr(scene, fit_views, tiny_settings.render_options())
        assert np.isfinite(score) and score > 0.0


@allure.feature("Distillation")
class TestDistill:
    def test_resume_matches_uninterrupted_run(self, tmp_path, tiny_teacher, anchors4, tiny_settings):
        tiny_settings.distill.checkpoint_every = 2
        full = distill(
            tiny_teacher, anchors4, _generator(tiny_settings, anchors4), tiny_settings, iters=4, checkpoint=tmp_path / "a.ckpt"
        )
        distill(tiny_teacher, anchors4, _generator(tiny_settings, anchors4), tiny_settings, iters=2, checkpoint=tmp_path / "b.ckpt")
        assert state_path(tmp_path / "b.ckpt").exists()
        resumed = distill(
            tiny_teacher,
            anchors4,
            _generator(tiny_settings, anchors4),
            tiny_settings,
            iters=4,
            checkpoint=tmp_path / "b.ckpt",
            resume=True,
        )
        assert resumed.step == 4
        for p, q in zip(full.generator.parameters(), resumed.generator.parameters()):
            torch.testing.assert_close(p, q, rtol=0.0, atol=1e-12)
        assert [r.step for r in resumed.log] == [r.step for r in full.log]

    def test_checkpoint_records_training_step(self, tmp_path, tiny_teacher, anchors4, tiny_settings):
        distill(tiny_teacher, anchors4, _generator(tiny_settings, anchors4), tiny_settings, iters=1, checkpoint=tmp_path / "g.ckpt")
        _, meta = load_checkpoint(tmp_path / "g.ckpt")
        assert meta["step"] == 1 and meta["latent_mode"] == "teacher"

    def test_trains_on_train_split_only(self, monkeypatch, tiny_teacher, anchors4, tiny_settings):
        seen = []
        original = training.render_tensors

        def spy(tensors, camera, opts, background):
            seen.append(camera)
            return original(tensors, camera, opts, background)

        monkeypatch.setattr(training, "render_tensors", spy)
        distill(tiny_teacher, anchors4, _generator(tiny_settings, anchors4), tiny_settings, iters=2)
        holdout = [r.camera for r in tiny_teacher.split("holdout")]
        assert seen and not any(cam is h for cam in seen for h in holdout)

    def test_autodecode_learns_latents(self, tiny_teacher, anchors4, tiny_settings):
        result = distill(
            tiny_teacher, anchors4, _generator(tiny_settings, anchors4), tiny_settings, iters=2, latent_mode="autodecode"
        )
        assert result.latents.shape == (2, 2)
        assert np.all(np.isfinite(result.latents))

    def test_teacher_mode_needs_latents(self, tiny_teacher, anchors4, tiny_settings):
        bare = MultiViewDataset(tiny_teacher.root, [replace(r, w=None) for r in tiny_teacher])
        with pytest.raises(DatasetError):
            distill(bare, anchors4, _generator(tiny_settings, anchors4), tiny_settings, iters=1)

    def test_unknown_latent_mode(self, tiny_teacher, anchors4, tiny_settings):
        with pytest.raises(ArgumentError):
            distill(tiny_teacher, anchors4, _generator(tiny_settings, anchors4), tiny_settings, iters=1, latent_mode="other")

    def test_adversarial_terms_logged(self, tiny_teacher, anchors4, tiny_settings):
        tiny_settings.loss.adversarial = True
        result = distill(tiny_teacher, anchors4, _generator(tiny_settings, anchors4), tiny_settings, iters=1)
        assert {"adv", "disc", "r1"} <= set(result.log[0].losses)


@allure.feature("Inversion")
class TestInvert:
    def test_returns_best_iterate(self, tiny_teacher, anchors4, tiny_settings):
        generator = _generator(tiny_settings, anchors4)
        before = [p.detach().clone() for p in generator.parameters()]
        result = invert_image(
            tiny_teacher.image(0),
            tiny_teacher[0].camera,
            generator,
            anchors4,
            tiny_settings,
            latent_iters=3,
            joint_iters=2,
        )
        assert result.loss <= result.log[0].losses["total"]
        assert result.w.shape == (2,)
        assert result.phase in ("latent", "joint")
        assert np.isfinite(result.psnr)
        for p, q in zip(before, generator.parameters()):
            torch.testing.assert_close(p, q.detach(), rtol=0.0, atol=0.0)

    def test_latent_only(self, tiny_teacher, anchors4, tiny_settings):
        result = invert_image(
            tiny_teacher.image(0),
            tiny_teacher[0].camera,
            _generator(tiny_settings, anchors4),
            anchors4,
            tiny_settings,
            latent_iters=2,
            joint_iters=0,
        )
        assert result.phase == "latent"
        assert all(r.metrics["joint"] == 0.0 for r in result.log)


@allure.feature("Interpolation")
class TestInterpolate:
    def test_constant_path_is_smooth(self, camera, anchors4, tiny_settings):
        generator = _generator(tiny_settings, anchors4)
        w = np.array([0.3, -0.2])
        result = interpolate(generator, anchors4, w, w, camera, tiny_settings.render_options(), steps=3)
        assert len(result.frames) == 3
        assert result.step_l1.shape == (2,)
        assert result.max_ratio == 0.0 and result.smooth
        assert result.monotone and result.endpoint_l1.tolist() == [0.0, 0.0, 0.0]
        assert result.to_dict()["steps"] == 3

    def test_linear_ramp_is_monotone(self):
        frames = [np.full((2, 2, 3), v) for v in np.linspace(0.0, 0.8, 5)]
        result = InterpolationResult.from_frames(frames)
        np.testing.assert_allclose(result.endpoint_l1, np.linspace(0.0, 0.8, 5))
        assert result.monotone and result.smooth
        assert result.to_dict()["monotone"] is True

    def test_path_turning_back_is_not_smooth(self):
        values = [0.0, 0.2, 0.4, 0.2, 0.4]
        result = InterpolationResult.from_frames([np.full((2, 2, 3), v) for v in values])
        assert result.max_ratio <= 3.0
        assert not result.monotone
        assert not result.smooth
        assert result.to_dict()["smooth"] is False

    def test_endpoints(self, camera, anchors4, tiny_settings):
        generator = _generator(tiny_settings, anchors4)
        opts = tiny_settings.render_options()
        w_a, w_b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        result = interpolate(generator, anchors4, w_a, w_b, camera, opts, steps=4)
        direct = interpolate(generator, anchors4, w_b, w_b, camera, opts, steps=2)
        np.testing.assert_array_equal(result.frames[-1], direct.frames[0])

    def test_needs_two_frames(self, camera, anchors4, tiny_settings):
        with pytest.raises(ArgumentError):
            interpolate(_generator(tiny_settings, anchors4), anchors4, np.zeros(2), np.zeros(2), camera, tiny_settings.render_options(), steps=1)
