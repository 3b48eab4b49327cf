"""Image-space losses, the adversarial objective with R1, and scene regularizers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .geomcore import ArgumentError
from .scene import PrimitiveSet

DEFAULT_LAMBDA_PERC = 20.0
DEFAULT_LAMBDA_REG = 1e-4
DEFAULT_PYRAMID_LEVELS = 4

_BINOMIAL = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0], dtype=torch.float64) / 16.0


@dataclass(frozen=True)
class LossWeights:
    lambda_perc: float = DEFAULT_LAMBDA_PERC
    lambda_reg: float = DEFAULT_LAMBDA_REG
    lambda_fade: float = 1e-2
    lambda_vol: float = 1e-2
    adversarial_enabled: bool = False
    perc_levels: int = DEFAULT_PYRAMID_LEVELS

    def __post_init__(self) -> None:
        for name in ("lambda_perc", "lambda_reg", "lambda_fade", "lambda_vol"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ArgumentError(f"{name} must be >= 0, got {value}")
        if self.perc_levels < 1:
            raise ArgumentError("perc_levels must be >= 1")

    @classmethod
    def reconstruction_only(cls) -> "LossWeights":
        return cls(lambda_perc=0.0, lambda_reg=0.0, lambda_fade=0.0, lambda_vol=0.0, adversarial_enabled=False)


def _check_pair(rendered: torch.Tensor, target: torch.Tensor) -> None:
    if rendered.shape != target.shape:
        raise ArgumentError(f"Image shapes differ: {tuple(rendered.shape)} vs {tuple(target.shape)}")


def loss_rec(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error."""
    _check_pair(rendered, target)
    return torch.mean(torch.abs(rendered - target))


def f_logistic(u: torch.Tensor) -> torch.Tensor:
    """f(u) = -log(1 + exp(-u)), evaluated as a stable log-sigmoid."""
    return F.logsigmoid(u)


def value_and_grad(
    loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    rendered: np.ndarray,
    target: np.ndarray,
) -> Tuple[float, np.ndarray]:
    """Evaluate an image loss on arrays, returning the value and dL/drendered."""
    r = torch.tensor(np.asarray(rendered, dtype=np.float64), requires_grad=True)
    t = torch.tensor(np.asarray(target, dtype=np.float64))
    value = loss_fn(r, t)
    (grad,) = torch.autograd.grad(value, r)
    return float(value.detach()), grad.numpy()


# ===== Critics ===============================================================

def _nchw(images: torch.Tensor) -> torch.Tensor:
    if images.dim() == 3:
        images = images.unsqueeze(0)
    return images.permute(0, 3, 1, 2)


class Critic(nn.Module):
    """Two strided convolutions and a linear head; input (B, H, W, 3), output (B,)."""

    def __init__(self, width: int, height: int, channels: int = 16, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.features = nn.Sequential(
                nn.Conv2d(3, channels, 4, 2, 1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(channels, 2 * channels, 4, 2, 1),
                nn.LeakyReLU(0.2),
            )
            self.head = nn.Linear(2 * channels * (height // 4) * (width // 4), 1)
        self.double()

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.features(_nchw(images))
        return self.head(x.flatten(start_dim=1)).squeeze(-1)


class LinearCritic(nn.Module):
    """D(X) = <k, X>."""

    def __init__(self, kernel: torch.Tensor | np.ndarray):
        super().__init__()
        self.kernel = nn.Parameter(torch.as_tensor(np.asarray(kernel, dtype=np.float64)).clone())

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == self.kernel.dim():
            images = images.unsqueeze(0)
        return (images * self.kernel).flatten(start_dim=1).sum(dim=1)


@dataclass
class DiscTerms:
    generator: torch.Tensor  # f(D(rendered)), maximized by the generator
    discriminator: torch.Tensor  # f(-D(X)) + f(D(rendered)) + R1, minimized by the critic
    r1: torch.Tensor


def r1_penalty(critic: nn.Module, real: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ||grad_X D(X)||^2 on real images."""
    real = real.detach().requires_grad_(True)
    scores = critic(real)
    (grad,) = torch.autograd.grad(scores.sum(), real, create_graph=True)
    batch = grad.shape[0] if grad.dim() == 4 else 1
    return grad.pow(2).reshape(batch, -1).sum(dim=1).mean()


def loss_disc(critic: nn.Module, rendered: torch.Tensor, real: torch.Tensor, lambda_reg: float) -> DiscTerms:
    _check_pair(rendered, real)
    fake_scores = critic(rendered)
    generator = f_logistic(fake_scores).mean()
    detached = critic(rendered.detach())
    real_scores = critic(real)
    r1 = r1_penalty(critic, real)
    discriminator = (f_logistic(-real_scores) + f_logistic(detached)).mean() + lambda_reg * r1
    return DiscTerms(generator=generator, discriminator=discriminator, r1=r1)


# ===== Perceptual proxy ======================================================

def _blur(images: torch.Tensor) -> torch.Tensor:
    x = _nchw(images)
    kernel = _BINOMIAL.to(x.dtype)
    h = kernel.reshape(1, 1, 1, 5).expand(3, 1, 1, 5)
    v = kernel.reshape(1, 1, 5, 1).expand(3, 1, 5, 1)
    x = F.conv2d(F.pad(x, (2, 2, 0, 0), mode="replicate"), h, groups=3)
    x = F.conv2d(F.pad(x, (0, 0, 2, 2), mode="replicate"), v, groups=3)
    return x.permute(0, 2, 3, 1)


def gaussian_pyramid(images: torch.Tensor, levels: int) -> list[torch.Tensor]:
    batched = images if images.dim() == 4 else images.unsqueeze(0)
    pyramid = [batched]
    for _ in range(levels - 1):
        current = pyramid[-1]
        if min(current.shape[1], current.shape[2]) < 2:
            break
        pyramid.append(_blur(current)[:, ::2, ::2, :])
    return pyramid


def loss_perc_proxy(rendered: torch.Tensor, target: torch.Tensor, levels: int = DEFAULT_PYRAMID_LEVELS) -> torch.Tensor:
    """Mean over pyramid levels of the L1 distance; level 0 is the unblurred pair."""
    if levels < 1:
        raise ArgumentError("levels must be >= 1")
    _check_pair(rendered, target)
    terms = [loss_rec(a, b) for a, b in zip(gaussian_pyramid(rendered, levels), gaussian_pyramid(target, levels))]
    return torch.stack(terms).mean()


# ===== Regularizers ==========================================================

def volume_term(scales: torch.Tensor) -> torch.Tensor:
    """Sum of prod(s_k) over primitives, averaged over any leading batch dimensions."""
    return torch.prod(scales, dim=-1).sum(dim=-1).mean()


def prior_volume(scene: PrimitiveSet) -> Tuple[float, np.ndarray]:
    """Total primitive volume (up to the constant 8) and its gradient w.r.t. the scales."""
    s = scene.scales
    grad = np.stack([s[:, 1] * s[:, 2], s[:, 0] * s[:, 2], s[:, 0] * s[:, 1]], axis=-1)
    return float(np.prod(s, axis=1).sum()), grad


@dataclass
class LossTerms:
    total: torch.Tensor
    terms: Dict[str, float] = field(default_factory=dict)


def total_loss(
    rendered: torch.Tensor,
    target: torch.Tensor,
    scales: Optional[torch.Tensor],
    weights: LossWeights,
    critic: Optional[nn.Module] = None,
) -> LossTerms:
    """rec + lambda_perc * perc + lambda_vol * volume - f(D(rendered)); terms with zero weight are skipped."""
    rec = loss_rec(rendered, target)
    total = rec
    terms = {"rec": float(rec.detach())}
    if weights.lambda_perc > 0:
        perc = loss_perc_proxy(rendered, target, weights.perc_levels)
        total = total + weights.lambda_perc * perc
        terms["perc"] = float(perc.detach())
    if weights.lambda_vol > 0 and scales is not None:
        vol = volume_term(scales)
        total = total + weights.lambda_vol * vol
        terms["vol"] = float(vol.detach())
    if weights.adversarial_enabled and critic is not None:
        adv = f_logistic(critic(rendered)).mean()
        total = total - adv
        terms["adv"] = float(adv.detach())
    terms["total"] = float(total.detach())
    return LossTerms(total=total, terms=terms)
