from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv

from .fade import FadeParams, FadeSchedule
from .generator import GeneratorConfig
from .losses import LossWeights
from .render import RenderOptions

THREADS_ENV = "PRIMVOL_THREADS"


@dataclass
class RenderSettings:
    step: float = 0.02
    near: float = 0.1
    far: float = 6.0
    max_samples: int = 1024
    tile_size: int = 32
    fade_exponent: float = 8.0
    fade_enabled: bool = True
    fade_schedule: str = "constant"
    fade_max_exponent: float = 64.0
    background: Optional[List[float]] = None
    debug_checks: bool = False


@dataclass
class LossSettings:
    lambda_perc: float = 20.0
    lambda_reg: float = 1e-4
    lambda_fade: float = 1e-2
    lambda_vol: float = 1e-2
    adversarial: bool = False
    perc_levels: int = 4


@dataclass
class OptimizerSettings:
    lr: float = 1e-3
    rgb_lr: float = 1e-2
    alpha_lr: float = 1e-1
    critic_lr: float = 1e-5
    latent_lr: float = 1e-2


@dataclass
class GeneratorSettings:
    latent_dim: int = 2
    geo_widths: List[int] = field(default_factory=lambda: [128, 128])
    payload_widths: List[int] = field(default_factory=lambda: [128])
    code_dim: int = 32
    resolution: int = 8
    view_frequencies: int = 0
    alpha_scale: float = 4.0
    alpha_bias: float = 0.0
    position_range: float = 0.25
    rotation_range: float = 0.5
    scale_range: float = 0.05


@dataclass
class TeacherSettings:
    latent_dim: int = 2
    samples: int = 100
    views: int = 16
    blobs: int = 4
    width: int = 64
    height: int = 64
    payload_resolution: int = 8
    camera_radius: float = 3.0
    holdout_views: int = 4
    holdout_radius_scale: float = 1.0


@dataclass
class FitSettings:
    iters: int = 2000
    batch_views: int = 2
    init_alpha: float = 2.0
    log_every: int = 10


@dataclass
class DistillSettings:
    iters: int = 5000
    batch_size: int = 8
    latent_mode: str = "teacher"
    checkpoint_every: int = 500
    log_every: int = 10


@dataclass
class InvertSettings:
    latent_iters: int = 1200
    joint_iters: int = 800


@dataclass
class Settings:
    seed: int = 42
    threads: Optional[int] = None
    torch_threads: int = 1
    artifacts_dir: str = "artifacts"
    nprim_grid: int = 32
    progress: bool = True
    render: RenderSettings = field(default_factory=RenderSettings)
    loss: LossSettings = field(default_factory=LossSettings)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    teacher: TeacherSettings = field(default_factory=TeacherSettings)
    fit: FitSettings = field(default_factory=FitSettings)
    distill: DistillSettings = field(default_factory=DistillSettings)
    invert: InvertSettings = field(default_factory=InvertSettings)

    def resolved_threads(self, override: Optional[int] = None) -> int:
        if override is not None:
            return max(1, int(override))
        if self.threads is not None:
            return max(1, int(self.threads))
        env = os.getenv(THREADS_ENV)
        if env:
            try:
                return max(1, int(env))
            except ValueError as exc:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
        return 1

    def render_options(self, threads: int = 1, step: Optional[float] = None) -> RenderOptions:
        r = self.render
        return RenderOptions(
            step=step if step is not None else r.step,
            near=r.near,
            far=r.far,
            max_samples=r.max_samples,
            background=tuple(r.background) if r.background is not None else None,
            fade=FadeParams(exponent=r.fade_exponent, enabled=r.fade_enabled),
            tile_size=r.tile_size,
            threads=threads,
            debug_checks=r.debug_checks,
        )

    def fade_schedule(self) -> FadeSchedule:
        r = self.render
        return FadeSchedule(
            base=FadeParams(exponent=r.fade_exponent, enabled=r.fade_enabled),
            mode=r.fade_schedule,
            rate=self.loss.lambda_fade,
            max_exponent=r.fade_max_exponent,
        )

    def loss_weights(self) -> LossWeights:
        l = self.loss  # noqa: E741
        return LossWeights(
            lambda_perc=l.lambda_perc,
            lambda_reg=l.lambda_reg,
            lambda_fade=l.lambda_fade,
            lambda_vol=l.lambda_vol,
            adversarial_enabled=l.adversarial,
            perc_levels=l.perc_levels,
        )

    def generator_config(self, n_prim: int, latent_dim: Optional[int] = None) -> GeneratorConfig:
        g = self.generator
        return GeneratorConfig(
            latent_dim=latent_dim if latent_dim is not None else g.latent_dim,
            n_prim=n_prim,
            resolution=g.resolution,
            geo_widths=tuple(g.geo_widths),
            payload_widths=tuple(g.payload_widths),
            code_dim=g.code_dim,
            view_frequencies=g.view_frequencies,
            alpha_scale=g.alpha_scale,
            alpha_bias=g.alpha_bias,
            position_range=g.position_range,
            rotation_range=g.rotation_range,
            scale_range=g.scale_range,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_FLAGS = {"checkpoint": "ckpt"}


@dataclass
class RunConfig:
    command: str
    settings: Settings
    threads: int
    scene: Optional[Path] = None
    mesh: Optional[Path] = None
    dataset: Optional[Path] = None
    checkpoint: Optional[Path] = None
    out: Optional[Path] = None
    resolution: Optional[Tuple[int, int]] = None
    iters: Optional[int] = None

    def require(self, *names: str) -> None:
        missing = [f"--{_FLAGS.get(n, n)}" for n in names if getattr(self, n) is None]
        if missing:
            raise ConfigError(f"{self.command} requires {', '.join(missing)}")

    def output_dir(self) -> Path:
        return self.out if self.out is not None else Path(self.settings.artifacts_dir) / self.command


class ConfigError(RuntimeError):
    """Raised when configuration cannot be loaded."""


def _section(raw: Dict[str, Any], key: str) -> Dict[str, Any]:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"Config section '{key}' must be a mapping")
    return value


def _float_list(value: Any) -> Optional[List[float]]:
    return None if value is None else [float(v) for v in value]


def load_settings(config_path: str | os.PathLike[str] | None = None) -> Settings:
    """Read YAML settings (camelCase keys); no path means built-in defaults."""
    load_dotenv(override=False)
    if config_path is None:
        return Settings()
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")

    with path.open("r", encoding="utf-8") as handle:
        try:
            raw = yaml.safe_load(handle) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"Config file is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("Config root must be a mapping")

    try:
        render_raw = _section(raw, "render")
        loss_raw = _section(raw, "loss")
        optim_raw = _section(raw, "optimizer")
        gen_raw = _section(raw, "generator")
        teacher_raw = _section(raw, "teacher")
        fit_raw = _section(raw, "fit")
        distill_raw = _section(raw, "distill")
        invert_raw = _section(raw, "invert")
        settings = Settings(
            seed=int(raw.get("seed", 42)),
            threads=int(raw["threads"]) if raw.get("threads") is not None else None,
            torch_threads=int(raw.get("torchThreads", 1)),
            artifacts_dir=str(raw.get("artifactsDir", "artifacts")),
            nprim_grid=int(raw.get("nprimGrid", 32)),
            progress=bool(raw.get("progress", True)),
            render=RenderSettings(
                step=float(render_raw.get("step", 0.02)),
                near=float(render_raw.get("near", 0.1)),
                far=float(render_raw.get("far", 6.0)),
                max_samples=int(render_raw.get("maxSamples", 1024)),
                tile_size=int(render_raw.get("tileSize", 32)),
                fade_exponent=float(render_raw.get("fadeExponent", 8.0)),
                fade_enabled=bool(render_raw.get("fadeEnabled", True)),
                fade_schedule=str(render_raw.get("fadeSchedule", "constant")),
                fade_max_exponent=float(render_raw.get("fadeMaxExponent", 64.0)),
                background=_float_list(render_raw.get("background")),
                debug_checks=bool(render_raw.get("debugChecks", False)),
            ),
            loss=LossSettings(
                lambda_perc=float(loss_raw.get("lambdaPerc", 20.0)),
                lambda_reg=float(loss_raw.get("lambdaReg", 1e-4)),
                lambda_fade=float(loss_raw.get("lambdaFade", 1e-2)),
                lambda_vol=float(loss_raw.get("lambdaVol", 1e-2)),
                adversarial=bool(loss_raw.get("adversarial", False)),
                perc_levels=int(loss_raw.get("percLevels", 4)),
            ),
            optimizer=OptimizerSettings(
                lr=float(optim_raw.get("lr", 1e-3)),
                rgb_lr=float(optim_raw.get("rgbLr", 1e-2)),
                alpha_lr=float(optim_raw.get("alphaLr", 1e-1)),
                critic_lr=float(optim_raw.get("criticLr", 1e-5)),
                latent_lr=float(optim_raw.get("latentLr", 1e-2)),
            ),
            generator=GeneratorSettings(
                latent_dim=int(gen_raw.get("latentDim", 2)),
                geo_widths=[int(v) for v in gen_raw.get("geoWidths", [128, 128])],
                payload_widths=[int(v) for v in gen_raw.get("payloadWidths", [128])],
                code_dim=int(gen_raw.get("codeDim", 32)),
                resolution=int(gen_raw.get("resolution", 8)),
                view_frequencies=int(gen_raw.get("viewFrequencies", 0)),
                alpha_scale=float(gen_raw.get("alphaScale", 4.0)),
                alpha_bias=float(gen_raw.get("alphaBias", 0.0)),
                position_range=float(gen_raw.get("positionRange", 0.25)),
                rotation_range=float(gen_raw.get("rotationRange", 0.5)),
                scale_range=float(gen_raw.get("scaleRange", 0.05)),
            ),
            teacher=TeacherSettings(
                latent_dim=int(teacher_raw.get("latentDim", 2)),
                samples=int(teacher_raw.get("samples", 100)),
                views=int(teacher_raw.get("views", 16)),
                blobs=int(teacher_raw.get("blobs", 4)),
                width=int(teacher_raw.get("width", 64)),
                height=int(teacher_raw.get("height", 64)),
                payload_resolution=int(teacher_raw.get("payloadResolution", 8)),
                camera_radius=float(teacher_raw.get("cameraRadius", 3.0)),
                holdout_views=int(teacher_raw.get("holdoutViews", 4)),
                holdout_radius_scale=float(teacher_raw.get("holdoutRadiusScale", 1.0)),
            ),
            fit=FitSettings(
                iters=int(fit_raw.get("iters", 2000)),
                batch_views=int(fit_raw.get("batchViews", 2)),
                init_alpha=float(fit_raw.get("initAlpha", 2.0)),
                log_every=int(fit_raw.get("logEvery", 10)),
            ),
            distill=DistillSettings(
                iters=int(distill_raw.get("iters", 5000)),
                batch_size=int(distill_raw.get("batchSize", 8)),
                latent_mode=str(distill_raw.get("latentMode", "teacher")),
                checkpoint_every=int(distill_raw.get("checkpointEvery", 500)),
                log_every=int(distill_raw.get("logEvery", 10)),
            ),
            invert=InvertSettings(
                latent_iters=int(invert_raw.get("latentIters", 1200)),
                joint_iters=int(invert_raw.get("jointIters", 800)),
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid config value: {exc}") from exc

    if settings.distill.latent_mode not in ("teacher", "autodecode"):
        raise ConfigError(f"distill.latentMode must be 'teacher' or 'autodecode', got {settings.distill.latent_mode!r}")
    if settings.render.fade_schedule not in ("constant", "anneal"):
        raise ConfigError(f"render.fadeSchedule must be 'constant' or 'anneal', got {settings.render.fade_schedule!r}")
    return settings
