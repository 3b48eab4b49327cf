import allure
import numpy as np
import pytest

from conftest import box_scene
from primvol.accel import build_bvh, intersect
from primvol.fade import FadeParams
from primvol.geomcore import ArgumentError, Camera, Ray
from primvol.render import (
    RenderOptions,
    TapeMismatchError,
    cell_lattice,
    integrate_ray,
    palette,
    render,
    render_dense_oracle,
    render_primitive_overlay,
)
from primvol.scene import demo_scene, random_scene

NO_FADE = FadeParams(enabled=False)
AXIS_RAY = Ray(origin=(0, 0, 3), direction=(0, 0, -1), t_min=0.1, t_max=6.0)
RED = (1.0, 0.0, 0.0)
BLUE = (0.0, 0.0, 1.0)
GREY = (0.5, 0.5, 0.5)


def _integrate(scene, opts, ray=AXIS_RAY):
    hits = intersect(ray, scene, build_bvh(scene))
    color, coverage, _ = integrate_ray(ray, hits, scene, opts)
    return color, coverage


@allure.feature("Cell lattice")
class TestLattice:
    def test_last_cell_is_clipped(self):
        lattice = cell_lattice(0.1, 0.2, 0.03, 100)
        assert lattice.n == 4
        np.testing.assert_allclose(lattice.dt, [0.03, 0.03, 0.03, 0.01], atol=1e-15)
        assert lattice.mid[0] == pytest.approx(0.115)

    def test_exact_multiple_has_no_sliver(self):
        assert cell_lattice(0.0, 0.1, 0.05, 100).n == 2

    def test_sample_cap(self):
        lattice = cell_lattice(0.0, 1.0, 0.01, 10)
        assert lattice.n == 10
        np.testing.assert_allclose(lattice.dt, 0.01)

    def test_tiny_range_has_one_cell(self):
        assert cell_lattice(0.0, 1e-6, 0.5, 100).n == 1


@allure.feature("Transmittance")
class TestIntegration:
    def test_half_covered_slab(self):
        scene = box_scene([0, 0, 0], 0.5, RED, 0.5, background=BLUE)
        color, coverage = _integrate(scene, RenderOptions(step=0.02, fade=NO_FADE))
        assert coverage == pytest.approx(0.5, abs=1e-9)
        np.testing.assert_allclose(color, [0.5, 0.0, 0.5], atol=1e-9)

    def test_dense_slab_saturates(self):
        scene = box_scene([0, 0, 0], 0.5, RED, 5.0, background=BLUE)
        color, coverage = _integrate(scene, RenderOptions(step=0.02, fade=NO_FADE))
        assert coverage == 1.0
        np.testing.assert_allclose(color, RED, atol=1e-12)

    def test_two_slabs_add_linearly(self):
        scene = box_scene([[0, 0, 0.755], [0, 0, -0.745]], [0.5, 0.5, 0.15], [RED, BLUE], 1.0, background=(0.0, 1.0, 0.0))
        color, coverage = _integrate(scene, RenderOptions(step=0.02, fade=NO_FADE))
        assert coverage == pytest.approx(0.6, abs=1e-9)
        np.testing.assert_allclose(color, [0.3, 0.4, 0.3], atol=1e-9)

    def test_occluded_slab_contributes_nothing(self):
        scene = box_scene([[0, 0, 0.7], [0, 0, -0.7]], [0.5, 0.5, 0.2], [RED, BLUE], 10.0)
        color, coverage = _integrate(scene, RenderOptions(step=0.02, fade=NO_FADE))
        assert coverage == 1.0
        np.testing.assert_allclose(color, RED, atol=1e-12)

    @pytest.mark.parametrize("step", [0.07, 0.03, 0.013, 0.0065])
    def test_boundary_cells_charge_covered_length(self, step):
        sigma = 0.5
        scene = box_scene([0, 0, 0], 0.5, GREY, sigma)
        _, coverage = _integrate(scene, RenderOptions(step=step, fade=NO_FADE))
        assert coverage == pytest.approx(sigma * 1.0, abs=1e-12)

    @pytest.mark.parametrize("step", [0.07, 0.013])
    def test_two_slabs_exact_off_grid(self, step):
        scene = box_scene([[0, 0, 0.7], [0, 0, -0.8]], [0.5, 0.5, 0.15], [RED, BLUE], 1.0, background=(0.0, 1.0, 0.0))
        color, coverage = _integrate(scene, RenderOptions(step=step, fade=NO_FADE))
        assert coverage == pytest.approx(0.6, abs=1e-12)
        np.testing.assert_allclose(color, [0.3, 0.4, 0.3], atol=1e-12)

    def test_sample_rows_cover_the_chord(self):
        scene = box_scene([0, 0, 0], 0.5, GREY, 0.5)
        ray = AXIS_RAY
        hits = intersect(ray, scene, build_bvh(scene))
        _, _, rows = integrate_ray(ray, hits, scene, RenderOptions(step=0.013, fade=NO_FADE, record_tape=True))
        assert rows.dt.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(rows.dt > 0.0) and np.all(rows.cover <= 1.0 + 1e-12)
        assert rows.enter_face[0] == 5 and rows.exit_face[-1] == 4
        assert np.all(rows.enter_face[1:] == -1) and np.all(rows.exit_face[:-1] == -1)

    @pytest.mark.parametrize(
        "positions, scales, sigma, steps",
        [
            ([[0, 0, 0]], [0.5, 0.5, 0.5], 0.5, (0.02, 0.01)),
            ([[0, 0, 0.7], [0, 0, -0.8]], [0.5, 0.5, 0.15], 1.0, (0.006, 0.003)),
        ],
        ids=["single-slab", "two-slabs"],
    )
    def test_error_at_least_halves_with_step(self, positions, scales, sigma, steps):
        # along the box axis the window is 1 - |z|^8, whose integral over [-1, 1] is 16/9
        scene = box_scene(positions, scales, GREY, sigma)
        exact = sigma * len(positions) * scales[2] * 16.0 / 9.0
        errors = []
        for step in steps:
            _, coverage = _integrate(scene, RenderOptions(step=step, max_samples=4096))
            errors.append(abs(coverage - exact))
        assert errors[0] > 1e-8
        assert errors[1] <= 0.6 * errors[0]

    def test_empty_ray_shows_background(self):
        scene = box_scene([0, 0, 0], 0.5, RED, 1.0, background=BLUE)
        ray = Ray(origin=(0, 2, 3), direction=(0, 0, -1), t_min=0.1, t_max=6.0)
        color, coverage = _integrate(scene, RenderOptions(), ray)
        assert coverage == 0.0
        np.testing.assert_array_equal(color, BLUE)

    def test_background_override(self):
        scene = box_scene([0, 0, 0], 0.5, RED, 1.0, background=BLUE)
        ray = Ray(origin=(0, 2, 3), direction=(0, 0, -1), t_min=0.1, t_max=6.0)
        color, _ = _integrate(scene, RenderOptions(background=(0.0, 1.0, 0.0)), ray)
        np.testing.assert_array_equal(color, [0.0, 1.0, 0.0])

    def test_zero_density_is_transparent(self):
        scene = box_scene([0, 0, 0], 0.5, RED, 0.0, background=BLUE)
        color, coverage = _integrate(scene, RenderOptions())
        assert coverage == 0.0
        np.testing.assert_array_equal(color, BLUE)


@allure.feature("Image rendering")
class TestRender:
    def test_matches_dense_oracle(self, camera, small_scene, opts):
        fast = render(camera, small_scene, opts=opts)
        dense = render_dense_oracle(camera, small_scene, opts)
        assert np.max(np.abs(fast.image.data - dense.image.data)) < 1e-10
        np.testing.assert_allclose(fast.coverage, dense.coverage, atol=1e-10)

    def test_demo_matches_dense_oracle(self):
        camera = Camera.look_at((0.0, 0.8, 2.6), (0.0, 0.0, 0.0), focal=19.0, width=16, height=16)
        scene = demo_scene(n_prim=16, resolution=4)
        opts = RenderOptions(step=0.05)
        diff = render(camera, scene, opts=opts).image.data - render_dense_oracle(camera, scene, opts).image.data
        assert np.max(np.abs(diff)) < 1e-10

    def test_rendered_values_in_range(self, camera, small_scene, opts):
        result = render(camera, small_scene, opts=opts)
        assert result.image.data.min() >= 0.0 and result.image.data.max() <= 1.0 + 1e-12
        assert result.coverage.min() >= 0.0 and result.coverage.max() <= 1.0
        assert result.samples > 0
        assert result.rgba().shape == (12, 12, 4)

    def test_thread_count_does_not_change_output(self, camera, small_scene, opts):
        single = render(camera, small_scene, opts=opts.with_(tile_size=4))
        multi = render(camera, small_scene, opts=opts.with_(tile_size=4, threads=4))
        np.testing.assert_array_equal(single.image.data, multi.image.data)

    def test_tile_size_does_not_change_output(self, camera, small_scene, opts):
        a = render(camera, small_scene, opts=opts.with_(tile_size=5))
        b = render(camera, small_scene, opts=opts.with_(tile_size=32))
        np.testing.assert_array_equal(a.image.data, b.image.data)

    def test_tape_replay_is_bitwise(self, camera, small_scene, opts):
        result = render(camera, small_scene, opts=opts.with_(record_tape=True, tile_size=5))
        assert result.tape is not None
        assert result.tape.n_samples == result.samples
        np.testing.assert_array_equal(result.tape.replay(small_scene).data, result.image.data)

    def test_tape_rejects_other_scene(self, camera, small_scene, opts):
        tape = render(camera, small_scene, opts=opts.with_(record_tape=True)).tape
        moved = small_scene.replace(positions=small_scene.positions + 0.01)
        with pytest.raises(TapeMismatchError):
            tape.replay(moved)

    def test_tape_accepts_new_payload(self, camera, small_scene, opts):
        tape = render(camera, small_scene, opts=opts.with_(record_tape=True)).tape
        brighter = small_scene.replace(alpha=small_scene.alpha * 2.0)
        expected = render(camera, brighter, opts=opts).image.data
        np.testing.assert_array_equal(tape.replay(brighter).data, expected)

    def test_no_tape_by_default(self, camera, small_scene, opts):
        assert render(camera, small_scene, opts=opts).tape is None

    def test_prebuilt_bvh(self, camera, small_scene, opts):
        a = render(camera, small_scene, build_bvh(small_scene), opts)
        b = render(camera, small_scene, opts=opts)
        np.testing.assert_array_equal(a.image.data, b.image.data)


@allure.feature("Primitive overlay")
class TestOverlay:
    def test_palette_is_distinct(self):
        colors = palette(np.arange(1024))
        assert np.unique(colors, axis=0).shape[0] == 1024
        assert colors.min() >= 0.0 and colors.max() <= 1.0

    def test_palette_is_deterministic(self):
        np.testing.assert_array_equal(palette(7), palette(np.array([7]))[0])

    def test_overlay_uses_palette(self, camera):
        scene = box_scene([[5.0, 5.0, 5.0], [0.0, 0.0, 0.0]], 0.5, GREY, 20.0)
        result = render_primitive_overlay(camera, scene, opts=RenderOptions(step=0.02))
        assert result.coverage[6, 6] == 1.0
        np.testing.assert_allclose(result.image.data[6, 6], palette(1), atol=1e-12)


@allure.feature("Render options")
class TestOptions:
    @pytest.mark.parametrize(
        "changes",
        [{"step": 0.0}, {"step": float("nan")}, {"near": 2.0, "far": 1.0}, {"max_samples": 0}, {"threads": 0}, {"tile_size": 0}],
    )
    def test_invalid(self, changes):
        with pytest.raises(ArgumentError):
            RenderOptions(**changes)

    def test_random_scene_render_smoke(self, rng):
        scene = random_scene(rng, 3, resolution=2)
        cam = Camera.look_at((0.0, 0.0, 4.0), (0.0, 0.0, 0.0), focal=4.0, width=4, height=3)
        assert render(cam, scene).image.shape == (3, 4, 3)
