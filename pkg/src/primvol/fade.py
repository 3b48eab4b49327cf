"""Opacity fade window applied to primitive densities."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .geomcore import ArgumentError

DEFAULT_FADE_EXPONENT = 8.0


@dataclass(frozen=True)
class FadeParams:
    exponent: float = DEFAULT_FADE_EXPONENT
    enabled: bool = True

    def __post_init__(self) -> None:
        if not math.isfinite(self.exponent) or self.exponent < 1.0:
            raise ArgumentError(f"fade exponent must be finite and >= 1, got {self.exponent}")


def fade(local: np.ndarray, rho: float | FadeParams) -> np.ndarray:
    """Per-axis polynomial window prod(1 - |x|^rho), clamped to [0, 1]."""
    if isinstance(rho, FadeParams):
        if not rho.enabled:
            return np.ones(np.asarray(local).shape[:-1])
        rho = rho.exponent
    local = np.asarray(local, dtype=np.float64)
    factors = np.clip(1.0 - np.abs(local) ** rho, 0.0, 1.0)
    return np.prod(factors, axis=-1)


def fade_with_grad(local: np.ndarray, params: FadeParams) -> Tuple[np.ndarray, np.ndarray]:
    """Window value and its gradient w.r.t. the local coordinate."""
    local = np.asarray(local, dtype=np.float64)
    if not params.enabled:
        return np.ones(local.shape[:-1]), np.zeros(local.shape)
    rho = params.exponent
    mag = np.abs(local)
    raw = 1.0 - mag**rho
    factors = np.clip(raw, 0.0, 1.0)
    active = (raw > 0.0) & (raw < 1.0)
    dfactor = np.where(active, -rho * mag ** (rho - 1.0) * np.sign(local), 0.0)
    value = np.prod(factors, axis=-1)
    grad = np.empty_like(local)
    for axis in range(3):
        others = np.prod(np.delete(factors, axis, axis=-1), axis=-1)
        grad[..., axis] = dfactor[..., axis] * others
    return value, grad


@dataclass(frozen=True)
class FadeSchedule:
    """Constant window, or a sharpening anneal rho(step) = min(rho_max, rho0 * (1 + rate * step))."""

    base: FadeParams = FadeParams()
    mode: str = "constant"
    rate: float = 1e-2
    max_exponent: float = 64.0

    def __post_init__(self) -> None:
        if self.mode not in ("constant", "anneal"):
            raise ArgumentError(f"Unknown fade schedule mode: {self.mode}")

    def at(self, step: int) -> FadeParams:
        if self.mode == "constant" or not self.base.enabled:
            return self.base
        rho = min(self.max_exponent, self.base.exponent * (1.0 + self.rate * step))
        return FadeParams(exponent=rho, enabled=True)
