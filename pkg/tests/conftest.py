from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from primvol.config import Settings
from primvol.dataset import TeacherSpec, make_teacher
from primvol.fade import FadeParams
from primvol.geomcore import Camera
from primvol.guidemesh import anchor_primitives, uv_sphere
from primvol.render import RenderOptions
from primvol.scene import PrimitiveSet, random_scene

REPO_ROOT = Path(__file__).resolve().parents[1]


def box_scene(
    positions,
    scales,
    colors,
    densities,
    resolution: int = 2,
    background=(0.0, 0.0, 0.0),
) -> PrimitiveSet:
    """Axis-aligned boxes with constant payloads."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n, m = positions.shape[0], resolution
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
    colors = np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3))
    densities = np.broadcast_to(np.asarray(densities, dtype=np.float64), (n,))
    rgb = np.broadcast_to(colors[:, None, None, None, :], (n, m, m, m, 3)).copy()
    alpha = np.broadcast_to(densities[:, None, None, None], (n, m, m, m)).copy()
    rotations = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    return PrimitiveSet(positions, rotations, scales, rgb, alpha, background=background)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def camera() -> Camera:
    return Camera.look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0), focal=14.0, width=12, height=12)


@pytest.fixture
def opts() -> RenderOptions:
    return RenderOptions(step=0.05, near=0.1, far=6.0)


@pytest.fixture
def no_fade_opts() -> RenderOptions:
    return RenderOptions(step=0.02, near=0.1, far=6.0, fade=FadeParams(enabled=False))


@pytest.fixture
def small_scene(rng) -> PrimitiveSet:
    return random_scene(rng, 5, resolution=3, extent=0.4, scale_range=(0.2, 0.4), density=1.0)


@pytest.fixture
def anchors4():
    return anchor_primitives(uv_sphere(radius=0.6), 2)


@pytest.fixture
def tiny_settings() -> Settings:
    settings = Settings(progress=False, nprim_grid=2)
    settings.render.step = 0.1
    settings.render.far = 5.0
    settings.generator.latent_dim = 2
    settings.generator.geo_widths = [8]
    settings.generator.payload_widths = [8]
    settings.generator.code_dim = 4
    settings.generator.resolution = 2
    settings.fit.log_every = 1
    settings.distill.log_every = 1
    settings.distill.batch_size = 2
    return settings


@pytest.fixture
def tiny_teacher_spec() -> TeacherSpec:
    return TeacherSpec(
        latent_dim=2,
        samples=2,
        views=4,
        blobs=3,
        width=8,
        height=8,
        payload_resolution=4,
        holdout_views=1,
        step=0.1,
        far=5.0,
        seed=7,
    )


@pytest.fixture
def tiny_teacher(tmp_path, tiny_teacher_spec):
    return make_teacher(tiny_teacher_spec, tmp_path / "teacher", progress=False)
