"""
Optimization loops: single-scene fitting, generator distillation, latent
inversion and latent interpolation.

Every loop renders through ``autodiff.render_differentiable`` so gradients
reach primitive parameters via the hand-derived backward pass, and every
loop draws its randomness from one seeded numpy generator so runs are
reproducible.
"""

from __future__ import annotations

import copy
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from .autodiff import render_differentiable
from .config import Settings
from .dataset import DatasetError, MultiViewDataset
from .generator import (
    PrimitiveGenerator,
    generate_scene,
    generate_tensors,
    load_checkpoint,
    save_checkpoint,
    so3_exp_torch,
)
from .geomcore import ArgumentError, Camera, psnr
from .guidemesh import AnchorSet
from .losses import Critic, LossWeights, loss_disc, total_loss
from .render import RenderOptions, render
from .reporting import StepRecord
from .scene import SCALE_FLOOR, PrimitiveSet

logger = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-9  # mean-L1 rounding allowance


class DivergenceError(RuntimeError):
    """Raised when a loss turns NaN or infinite; carries the step log up to that point."""

    def __init__(self, message: str, log: Sequence[StepRecord]):
        super().__init__(message)
        self.log = list(log)


def _check_finite(value: float, step: int, log: List[StepRecord]) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"loss diverged at step {step}: {value}", log)


def _image_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.tensor(np.asarray(image, dtype=np.float64)[..., :3])


def _progress(settings: Settings, progress: Optional[bool]) -> bool:
    return settings.progress if progress is None else progress


# ===== Single-scene fitting ==================================================

@dataclass
class FitResult:
    scene: PrimitiveSet
    log: List[StepRecord]
    initial_loss: float
    final_loss: float


class _SceneParameters:
    """Deltas, rgb and alpha of a fixed-count primitive set as torch leaves."""

    def __init__(
        self,
        positions: np.ndarray,
        rotations: np.ndarray,
        scales: np.ndarray,
        rgb: np.ndarray,
        alpha: np.ndarray,
        background: np.ndarray,
    ):
        n = positions.shape[0]
        self.base_pos = torch.tensor(positions, dtype=torch.float64)
        self.base_rot = torch.tensor(rotations, dtype=torch.float64)
        self.base_scale = torch.tensor(scales, dtype=torch.float64)
        self.dt = torch.zeros((n, 3), dtype=torch.float64, requires_grad=True)
        self.dr = torch.zeros((n, 3), dtype=torch.float64, requires_grad=True)
        self.ds = torch.zeros((n, 3), dtype=torch.float64, requires_grad=True)
        self.rgb = torch.tensor(rgb, dtype=torch.float64, requires_grad=True)
        self.alpha = torch.tensor(alpha, dtype=torch.float64, requires_grad=True)
        self.background = tuple(float(v) for v in background)

    def tensors(self) -> Dict[str, torch.Tensor]:
        return {
            "positions": self.base_pos + self.dt,
            "rotations": self.base_rot @ so3_exp_torch(self.dr),
            "scales": torch.clamp(self.base_scale + self.ds, min=SCALE_FLOOR),
            "rgb": self.rgb,
            "alpha": self.alpha,
        }

    def project(self) -> None:
        with torch.no_grad():
            self.rgb.clamp_(0.0, 1.0)
            self.alpha.clamp_(min=0.0)

    def scene(self) -> PrimitiveSet:
        with torch.no_grad():
            t = self.tensors()
            raw_scale = self.base_scale + self.ds
        return PrimitiveSet(
            positions=t["positions"].numpy(),
            rotations=t["rotations"].numpy(),
            scales=t["scales"].numpy(),
            rgb=t["rgb"].detach().numpy(),
            alpha=t["alpha"].detach().numpy(),
            background=self.background,
            scale_clamped=(raw_scale < SCALE_FLOOR).any(dim=1).numpy(),
        )


def render_tensors(tensors: Dict[str, torch.Tensor], camera: Camera, opts: RenderOptions, background) -> torch.Tensor:
    return render_differentiable(
        tensors["positions"],
        tensors["rotations"],
        tensors["scales"],
        tensors["rgb"],
        tensors["alpha"],
        camera,
        opts,
        background,
    )


def fit_scene(
    dataset: MultiViewDataset,
    anchors: Optional[AnchorSet],
    settings: Settings,
    init: Optional[PrimitiveSet] = None,
    opts: Optional[RenderOptions] = None,
    weights: Optional[LossWeights] = None,
    iters: Optional[int] = None,
    progress: Optional[bool] = None,
) -> FitResult:
    """Adam on the deltas and payloads of one scene against its training views."""
    if len(dataset) < 2:
        raise DatasetError("fit_scene needs at least two views")
    if init is None and anchors is None:
        raise ArgumentError("fit_scene needs anchors or an initial scene")
    opts = opts or settings.render_options()
    weights = weights or settings.loss_weights()
    iters = settings.fit.iters if iters is None else iters
    schedule = settings.fade_schedule()
    if opts.background is not None:
        background = np.asarray(opts.background, dtype=np.float64)
    else:
        background = init.background if init is not None else np.zeros(3)

    if init is not None:
        params = _SceneParameters(init.positions, init.rotations, init.scales, init.rgb, init.alpha, background)
    else:
        n, m = anchors.count, settings.generator.resolution
        params = _SceneParameters(
            anchors.positions,
            anchors.rotations,
            np.broadcast_to(anchors.scale, (n, 3)),
            np.full((n, m, m, m, 3), 0.5),
            np.full((n, m, m, m), settings.fit.init_alpha),
            background,
        )
    o = settings.optimizer
    optimizer = torch.optim.Adam(
        [
            {"params": [params.dt, params.dr, params.ds], "lr": o.lr},
            {"params": [params.rgb], "lr": o.rgb_lr},
            {"params": [params.alpha], "lr": o.alpha_lr},
        ]
    )
    rng = np.random.default_rng(settings.seed)
    batch = min(settings.fit.batch_views, len(dataset))
    log: List[StepRecord] = []
    started = time.perf_counter()
    initial = final = float("nan")

    for step in tqdm(range(iters + 1), desc="fit", disable=not _progress(settings, progress)):
        views = np.sort(rng.choice(len(dataset), size=batch, replace=False))
        step_opts = opts.with_(fade=schedule.at(step))
        optimizer.zero_grad()
        tensors = params.tensors()
        total = None
        terms: Dict[str, float] = {}
        for i in views:
            rendered = render_tensors(tensors, dataset[i].camera, step_opts, params.background)
            loss = total_loss(rendered, _image_tensor(dataset.image(i)), tensors["scales"], weights)
            total = loss.total if total is None else total + loss.total
            for k, v in loss.terms.items():
                terms[k] = terms.get(k, 0.0) + v / batch
        total = total / batch
        value = float(total.detach())
        if step == 0:
            initial = value
        final = value
        if step % settings.fit.log_every == 0 or step == iters or not math.isfinite(value):
            log.append(StepRecord(step=step, losses=terms, wall_time=time.perf_counter() - started))
        _check_finite(value, step, log)
        if step == iters:
            break
        total.backward()
        optimizer.step()
        params.project()
    logger.info("fit: loss %.6g -> %.6g over %d steps", initial, final, iters)
    return FitResult(scene=params.scene(), log=log, initial_loss=initial, final_loss=final)


def evaluate_psnr(scene: PrimitiveSet, dataset: MultiViewDataset, opts: RenderOptions) -> float:
    scores = []
    for i, record in enumerate(dataset):
        result = render(record.camera, scene, None, opts)
        scores.append(psnr(result.image.data, dataset.image(i)))
    return float(np.mean(scores))


# ===== Distillation ==========================================================

@dataclass
class DistillResult:
    generator: PrimitiveGenerator
    log: List[StepRecord]
    step: int
    latents: Optional[np.ndarray] = None


def state_path(checkpoint: str | os.PathLike[str]) -> Path:
    path = Path(checkpoint)
    return path.with_name(path.name + ".state")


def _save_training_state(
    checkpoint: Path,
    gen: PrimitiveGenerator,
    step: int,
    latent_mode: str,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
    latents: Optional[torch.Tensor],
    critic: Optional[Critic],
    critic_opt: Optional[torch.optim.Optimizer],
    log: List[StepRecord],
) -> None:
    save_checkpoint(gen, checkpoint, training={"step": step, "latent_mode": latent_mode})
    torch.save(
        {
            "step": step,
            "optimizer": optimizer.state_dict(),
            "rng": rng.bit_generator.state,
            "latents": None if latents is None else latents.detach().clone(),
            "critic": None if critic is None else critic.state_dict(),
            "critic_opt": None if critic_opt is None else critic_opt.state_dict(),
            "log": [r.to_dict() for r in log],
        },
        state_path(checkpoint),
    )


def distill(
    dataset: MultiViewDataset,
    anchors: AnchorSet,
    generator: PrimitiveGenerator,
    settings: Settings,
    opts: Optional[RenderOptions] = None,
    weights: Optional[LossWeights] = None,
    iters: Optional[int] = None,
    checkpoint: Optional[str | os.PathLike[str]] = None,
    resume: bool = False,
    latent_mode: Optional[str] = None,
    progress: Optional[bool] = None,
) -> DistillResult:
    """Train the generator to reproduce the dataset's posed views from their latents.

    ``latent_mode="autodecode"`` ignores the dataset latents and learns one code per
    sample jointly with the generator.
    """
    latent_mode = latent_mode or settings.distill.latent_mode
    if latent_mode not in ("teacher", "autodecode"):
        raise ArgumentError(f"unknown latent mode {latent_mode!r}")
    if latent_mode == "teacher" and not dataset.has_latents:
        raise DatasetError(f"{dataset.root}: distillation needs latents on every record")
    opts = opts or settings.render_options()
    weights = weights or settings.loss_weights()
    iters = settings.distill.iters if iters is None else iters
    schedule = settings.fade_schedule()
    background = tuple(opts.background) if opts.background is not None else (0.0, 0.0, 0.0)
    train = dataset.split("train") if dataset.has_split("train") else dataset

    rng = np.random.default_rng(settings.seed)
    samples = train.samples
    sample_index = {s: i for i, s in enumerate(samples)}
    latents: Optional[torch.Tensor] = None
    params = list(generator.parameters())
    if latent_mode == "autodecode":
        init = np.random.default_rng([settings.seed, 2]).normal(scale=0.01, size=(len(samples), generator.config.latent_dim))
        latents = torch.tensor(init, requires_grad=True)
        params.append(latents)
    optimizer = torch.optim.Adam(params, lr=settings.optimizer.lr)

    critic: Optional[Critic] = None
    critic_opt: Optional[torch.optim.Optimizer] = None
    if weights.adversarial_enabled:
        width, height = train.resolution
        critic = Critic(width, height, seed=settings.seed)
        critic_opt = torch.optim.Adam(critic.parameters(), lr=settings.optimizer.critic_lr)

    log: List[StepRecord] = []
    start = 0
    ckpt = Path(checkpoint) if checkpoint is not None else None
    if resume and ckpt is not None and state_path(ckpt).exists():
        loaded, _ = load_checkpoint(ckpt)
        generator.load_state_dict(loaded.state_dict())
        state = torch.load(state_path(ckpt), weights_only=False)
        if state["latents"] is not None and latents is not None:
            with torch.no_grad():
                latents.copy_(state["latents"])
        optimizer.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["rng"]
        if critic is not None and state["critic"] is not None:
            critic.load_state_dict(state["critic"])
            critic_opt.load_state_dict(state["critic_opt"])
        log = [StepRecord(**r) for r in state["log"]]
        start = int(state["step"])
        logger.info("Resuming distillation from step %d", start)

    batch = min(settings.distill.batch_size, len(train))
    started = time.perf_counter()
    for step in tqdm(range(start, iters), desc="distill", disable=not _progress(settings, progress)):
        picks = np.sort(rng.choice(len(train), size=batch, replace=False))
        step_opts = opts.with_(fade=schedule.at(step))
        optimizer.zero_grad()
        rendered, targets, scales = [], [], []
        for i in picks:
            record = train[i]
            if latents is not None:
                w = latents[sample_index[record.sample]]
            else:
                w = torch.tensor(record.w, dtype=torch.float64)
            tensors = generate_tensors(generator, anchors, w, record.camera.forward)
            rendered.append(render_tensors(tensors, record.camera, step_opts, background))
            targets.append(_image_tensor(train.image(i)))
            scales.append(tensors["scales"])
        images = torch.stack(rendered)
        real = torch.stack(targets)
        loss = total_loss(images, real, torch.stack(scales), weights, critic)
        value = float(loss.total.detach())
        _check_finite(value, step, log)
        loss.total.backward()
        optimizer.step()

        terms = dict(loss.terms)
        if critic is not None:
            critic_opt.zero_grad()
            disc = loss_disc(critic, images.detach(), real, weights.lambda_reg)
            disc.discriminator.backward()
            critic_opt.step()
            terms["disc"] = float(disc.discriminator.detach())
            terms["r1"] = float(disc.r1.detach())
        if step % settings.distill.log_every == 0 or step == iters - 1:
            log.append(StepRecord(step=step, losses=terms, wall_time=time.perf_counter() - started))
        done = step + 1
        if ckpt is not None and (done % settings.distill.checkpoint_every == 0 or done == iters):
            _save_training_state(ckpt, generator, done, latent_mode, optimizer, rng, latents, critic, critic_opt, log)

    table = None if latents is None else latents.detach().numpy().copy()
    return DistillResult(generator=generator, log=log, step=max(start, iters), latents=table)


def evaluate_generator(
    generator: PrimitiveGenerator,
    anchors: AnchorSet,
    dataset: MultiViewDataset,
    opts: RenderOptions,
    latents: Optional[Dict[int, np.ndarray]] = None,
) -> float:
    """Mean PSNR of generator renders against the dataset's views."""
    scores = []
    background = opts.background if opts.background is not None else (0.0, 0.0, 0.0)
    for i, record in enumerate(dataset):
        w = latents[record.sample] if latents is not None else record.w
        scene = generate_scene(generator, anchors, w, record.camera.forward, background=background)
        result = render(record.camera, scene, None, opts)
        scores.append(psnr(result.image.data, dataset.image(i)))
    return float(np.mean(scores))


# ===== Latent inversion ======================================================

@dataclass
class InversionResult:
    w: np.ndarray
    generator: PrimitiveGenerator
    loss: float
    psnr: float
    log: List[StepRecord] = field(default_factory=list)
    phase: str = "latent"


def invert_image(
    target: np.ndarray,
    camera: Camera,
    generator: PrimitiveGenerator,
    anchors: AnchorSet,
    settings: Settings,
    init_w: Optional[np.ndarray] = None,
    opts: Optional[RenderOptions] = None,
    latent_iters: Optional[int] = None,
    joint_iters: Optional[int] = None,
    progress: Optional[bool] = None,
) -> InversionResult:
    """Optimize w alone, then w jointly with a copy of the generator; return the best iterate."""
    opts = opts or settings.render_options()
    latent_iters = settings.invert.latent_iters if latent_iters is None else latent_iters
    joint_iters = settings.invert.joint_iters if joint_iters is None else joint_iters
    weights = LossWeights(
        lambda_perc=settings.loss.lambda_perc,
        lambda_vol=0.0,
        adversarial_enabled=False,
        perc_levels=settings.loss.perc_levels,
    )
    background = tuple(opts.background) if opts.background is not None else (0.0, 0.0, 0.0)
    target_t = _image_tensor(target)
    start_w = np.zeros(generator.config.latent_dim) if init_w is None else np.asarray(init_w, dtype=np.float64)
    w = torch.tensor(start_w, requires_grad=True)
    tuned = copy.deepcopy(generator)
    view_dir = camera.forward

    best = {"loss": math.inf, "w": start_w.copy(), "state": None, "phase": "latent"}
    log: List[StepRecord] = []
    started = time.perf_counter()

    def run(phase: str, count: int, optimizer: torch.optim.Optimizer, offset: int) -> None:
        for i in tqdm(range(count + 1), desc=phase, disable=not _progress(settings, progress)):
            step = offset + i
            optimizer.zero_grad()
            tensors = generate_tensors(tuned, anchors, w, view_dir)
            rendered = render_tensors(tensors, camera, opts, background)
            loss = total_loss(rendered, target_t, None, weights)
            value = float(loss.total.detach())
            _check_finite(value, step, log)
            if value < best["loss"]:
                best.update(
                    loss=value,
                    w=w.detach().numpy().copy(),
                    state=copy.deepcopy(tuned.state_dict()) if phase == "joint" else None,
                    phase=phase,
                )
            if i % 10 == 0 or i == count:
                log.append(
                    StepRecord(
                        step=step,
                        losses=loss.terms,
                        wall_time=time.perf_counter() - started,
                        metrics={"joint": float(phase == "joint")},
                    )
                )
            if i == count:
                break
            loss.total.backward()
            optimizer.step()

    run("latent", latent_iters, torch.optim.Adam([w], lr=settings.optimizer.latent_lr), 0)
    if joint_iters > 0:
        run("joint", joint_iters, torch.optim.Adam([w, *tuned.parameters()], lr=settings.optimizer.lr), latent_iters + 1)

    result_gen = copy.deepcopy(generator)
    if best["state"] is not None:
        result_gen.load_state_dict(best["state"])
    scene = generate_scene(result_gen, anchors, best["w"], view_dir, background=background)
    image = render(camera, scene, None, opts).image.data
    score = psnr(image, np.asarray(target, dtype=np.float64)[..., :3])
    logger.info("invert: best loss %.6g (%s phase), PSNR %.2f dB", best["loss"], best["phase"], score)
    return InversionResult(w=best["w"], generator=result_gen, loss=best["loss"], psnr=score, log=log, phase=best["phase"])


# ===== Interpolation =========================================================

@dataclass
class InterpolationResult:
    frames: List[np.ndarray]
    step_l1: np.ndarray
    median_step: float
    max_ratio: float
    endpoint_l1: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_frames(cls, frames: List[np.ndarray]) -> "InterpolationResult":
        step_l1 = np.array([np.mean(np.abs(b - a)) for a, b in zip(frames[:-1], frames[1:])])
        endpoint_l1 = np.array([np.mean(np.abs(f - frames[0])) for f in frames])
        median = float(np.median(step_l1))
        ratio = float(step_l1.max() / median) if median > 0 else (0.0 if step_l1.max() == 0 else math.inf)
        return cls(frames=frames, step_l1=step_l1, median_step=median, max_ratio=ratio, endpoint_l1=endpoint_l1)

    @property
    def monotone(self) -> bool:
        """Every frame is at least as far (mean L1) from the first frame as the one before it."""
        return bool(np.all(np.diff(self.endpoint_l1) >= -MONOTONE_SLACK))

    @property
    def smooth(self) -> bool:
        """Monotone away from the first frame, and no frame-to-frame L1 change exceeds 3x the median."""
        return self.max_ratio <= 3.0 and self.monotone

    def to_dict(self) -> Dict[str, object]:
        return {
            "steps": len(self.frames),
            "step_l1": [float(v) for v in self.step_l1],
            "endpoint_l1": [float(v) for v in self.endpoint_l1],
            "median_step": self.median_step,
            "max_ratio": self.max_ratio,
            "monotone": self.monotone,
            "smooth": self.smooth,
        }


def interpolate(
    generator: PrimitiveGenerator,
    anchors: AnchorSet,
    w_a: np.ndarray,
    w_b: np.ndarray,
    camera: Camera,
    opts: RenderOptions,
    steps: int = 9,
) -> InterpolationResult:
    if steps < 2:
        raise ArgumentError("interpolation needs at least two frames")
    background = opts.background if opts.background is not None else (0.0, 0.0, 0.0)
    w_a = np.asarray(w_a, dtype=np.float64)
    w_b = np.asarray(w_b, dtype=np.float64)
    frames = []
    for lam in np.linspace(0.0, 1.0, steps):
        scene = generate_scene(generator, anchors, (1.0 - lam) * w_a + lam * w_b, camera.forward, background=background)
        frames.append(render(camera, scene, None, opts).image.data)
    return InterpolationResult.from_frames(frames)


__all__ = [
    "DivergenceError",
    "FitResult",
    "DistillResult",
    "InversionResult",
    "InterpolationResult",
    "fit_scene",
    "evaluate_psnr",
    "distill",
    "evaluate_generator",
    "invert_image",
    "interpolate",
    "state_path",
]
