"""
Latent-conditioned primitive generators.

Three fully-connected networks map a latent ``w`` to primitive deltas, alpha
payloads and view-conditioned rgb payloads. The payload networks emit one
code per primitive from an MLP trunk; a head shared across primitives turns
each code into an M^3 (alpha) or 3*M^3 (rgb) grid, so the final outputs have
the full N*M^3 shapes without an N*M^3-wide weight matrix.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .geomcore import ArgumentError
from .guidemesh import AnchorSet
from .scene import SCALE_FLOOR, DeltaSet, PrimitiveSet, compose
from .schemas import SchemaError, validate_record

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "primvol-generator"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when an input does not match the generator's dimensions."""


class CheckpointError(RuntimeError):
    """Raised when a generator checkpoint cannot be read."""


@dataclass(frozen=True)
class LatentCode:
    w: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if w.size == 0 or not np.all(np.isfinite(w)):
            raise ArgumentError("Latent code must be a non-empty finite vector")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def dim(self) -> int:
        return int(self.w.shape[0])

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.w.copy())


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 512
    n_prim: int = 1024
    resolution: int = 32
    geo_widths: Tuple[int, ...] = (256, 256)
    payload_widths: Tuple[int, ...] = (256,)
    code_dim: int = 32
    view_frequencies: int = 0
    alpha_scale: float = 1.0
    alpha_bias: float = 0.0
    position_range: float = 0.25
    rotation_range: float = 0.5
    scale_range: float = 0.05

    def __post_init__(self) -> None:
        if min(self.latent_dim, self.n_prim, self.resolution, self.code_dim) < 1:
            raise ArgumentError("latent_dim, n_prim, resolution and code_dim must be >= 1")
        if not 0.0 <= self.rotation_range < math.pi:
            raise ArgumentError(f"rotation_range must lie in [0, pi), got {self.rotation_range}")
        if self.position_range < 0 or self.scale_range < 0 or self.view_frequencies < 0:
            raise ArgumentError("ranges and view_frequencies must be >= 0")
        object.__setattr__(self, "geo_widths", tuple(int(v) for v in self.geo_widths))
        object.__setattr__(self, "payload_widths", tuple(int(v) for v in self.payload_widths))

    @property
    def view_dim(self) -> int:
        return 3 + 6 * self.view_frequencies

    def ranges(self) -> Dict[str, float]:
        return {"position": self.position_range, "rotation": self.rotation_range, "scale": self.scale_range}


def _mlp(in_dim: int, widths: Sequence[int], out_dim: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    prev = in_dim
    for width in widths:
        layers += [nn.Linear(prev, width), nn.LeakyReLU(0.2)]
        prev = width
    layers.append(nn.Linear(prev, out_dim))
    return nn.Sequential(*layers)


def encode_view(view_dir: torch.Tensor, frequencies: int) -> torch.Tensor:
    if frequencies == 0:
        return view_dir
    bands = [view_dir]
    for k in range(frequencies):
        bands += [torch.sin((2.0**k) * math.pi * view_dir), torch.cos((2.0**k) * math.pi * view_dir)]
    return torch.cat(bands, dim=-1)


def so3_exp_torch(v: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula on (..., 3) axis-angle tensors, safe at the origin."""
    theta2 = (v * v).sum(dim=-1, keepdim=True)
    small = theta2 < 1e-8
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / (theta * theta))
    x, y, z = v.unbind(dim=-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(v.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand_as(k)
    return eye + a[..., None] * k + b[..., None] * (k @ k)


class PrimitiveGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        n, m3 = config.n_prim, config.resolution**3
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.geo = _mlp(config.latent_dim, config.geo_widths, 9 * n)
            self.alpha_trunk = _mlp(config.latent_dim, config.payload_widths, n * config.code_dim)
            self.alpha_head = nn.Linear(config.code_dim, m3)
            self.rgb_trunk = _mlp(config.latent_dim + config.view_dim, config.payload_widths, n * config.code_dim)
            self.rgb_head = nn.Linear(config.code_dim, 3 * m3)
        # start from the anchor configuration
        nn.init.zeros_(self.geo[-1].weight)
        nn.init.zeros_(self.geo[-1].bias)
        self.double()

    def _check_latent(self, w: torch.Tensor) -> torch.Tensor:
        w = torch.as_tensor(w, dtype=torch.float64)
        if w.shape[-1:] != (self.config.latent_dim,):
            raise ShapeError(f"latent has shape {tuple(w.shape)}, expected (..., {self.config.latent_dim})")
        return w

    def geo_tensors(self, w: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        c = self.config
        w = self._check_latent(w)
        raw = self.geo(w).reshape(w.shape[:-1] + (c.n_prim, 9))
        dt = torch.tanh(raw[..., 0:3]) * c.position_range
        dr = torch.tanh(raw[..., 3:6]) * c.rotation_range
        ds = torch.tanh(raw[..., 6:9]) * c.scale_range
        return dt, dr, ds

    def alpha_tensor(self, w: torch.Tensor) -> torch.Tensor:
        c = self.config
        w = self._check_latent(w)
        codes = self.alpha_trunk(w).reshape(w.shape[:-1] + (c.n_prim, c.code_dim))
        grid = F.softplus(self.alpha_head(codes) + c.alpha_bias) * c.alpha_scale
        m = c.resolution
        return grid.reshape(w.shape[:-1] + (c.n_prim, m, m, m))

    def rgb_tensor(self, w: torch.Tensor, view_dir: torch.Tensor) -> torch.Tensor:
        c = self.config
        w = self._check_latent(w)
        view_dir = torch.as_tensor(view_dir, dtype=torch.float64)
        if view_dir.shape[-1:] != (3,):
            raise ShapeError(f"view direction has shape {tuple(view_dir.shape)}, expected (..., 3)")
        inputs = torch.cat([w, encode_view(view_dir, c.view_frequencies).expand(w.shape[:-1] + (c.view_dim,))], dim=-1)
        codes = self.rgb_trunk(inputs).reshape(w.shape[:-1] + (c.n_prim, c.code_dim))
        grid = torch.sigmoid(self.rgb_head(codes))
        m = c.resolution
        return grid.reshape(w.shape[:-1] + (c.n_prim, m, m, m, 3))

    def forward(self, w: torch.Tensor, view_dir: torch.Tensor) -> Dict[str, torch.Tensor]:
        dt, dr, ds = self.geo_tensors(w)
        return {"dt": dt, "dr": dr, "ds": ds, "alpha": self.alpha_tensor(w), "rgb": self.rgb_tensor(w, view_dir)}


def _latent_tensor(w: LatentCode | np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(w, LatentCode):
        return w.tensor()
    if isinstance(w, torch.Tensor):
        return w.to(torch.float64)
    return torch.from_numpy(np.asarray(w, dtype=np.float64).copy())


def _unit_view(view_dir) -> torch.Tensor:
    v = torch.as_tensor(np.asarray(view_dir, dtype=np.float64) if not isinstance(view_dir, torch.Tensor) else view_dir)
    v = v.to(torch.float64)
    if abs(float(torch.linalg.norm(v)) - 1.0) > 1e-6:
        raise ArgumentError("view direction must be unit length")
    return v


def geo_forward(gen: PrimitiveGenerator, w: LatentCode | np.ndarray) -> DeltaSet:
    with torch.no_grad():
        dt, dr, ds = gen.geo_tensors(_latent_tensor(w))
    return DeltaSet(dt.numpy(), dr.numpy(), ds.numpy())


def alpha_forward(gen: PrimitiveGenerator, w: LatentCode | np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return gen.alpha_tensor(_latent_tensor(w)).numpy()


def rgb_forward(gen: PrimitiveGenerator, w: LatentCode | np.ndarray, view_dir) -> np.ndarray:
    with torch.no_grad():
        return gen.rgb_tensor(_latent_tensor(w), _unit_view(view_dir)).numpy()


def generate_tensors(
    gen: PrimitiveGenerator,
    anchors: AnchorSet,
    w: torch.Tensor,
    view_dir,
) -> Dict[str, torch.Tensor]:
    """Differentiable composition of anchors and generator outputs."""
    if anchors.count != gen.config.n_prim:
        raise ShapeError(f"{anchors.count} anchors for a generator of {gen.config.n_prim} primitives")
    out = gen(_latent_tensor(w), _unit_view(view_dir))
    base_pos = torch.tensor(anchors.positions, dtype=torch.float64)
    base_rot = torch.tensor(anchors.rotations, dtype=torch.float64)
    base_scale = torch.tensor(anchors.scale, dtype=torch.float64)
    return {
        "positions": base_pos + out["dt"],
        "rotations": base_rot @ so3_exp_torch(out["dr"]),
        "scales": torch.clamp(base_scale + out["ds"], min=SCALE_FLOOR),
        "rgb": out["rgb"],
        "alpha": out["alpha"],
    }


def generate_scene(
    gen: PrimitiveGenerator,
    anchors: AnchorSet,
    w: LatentCode | np.ndarray,
    view_dir,
    background: Sequence[float] = (0.0, 0.0, 0.0),
) -> PrimitiveSet:
    if anchors.count != gen.config.n_prim:
        raise ShapeError(f"{anchors.count} anchors for a generator of {gen.config.n_prim} primitives")
    deltas = geo_forward(gen, w)
    payloads = (rgb_forward(gen, w, view_dir), alpha_forward(gen, w))
    return compose(anchors, deltas, payloads, background=background)


def lipschitz_bound(gen: PrimitiveGenerator) -> float:
    """Upper bound on |d deltas / d w|: product of layer spectral norms times the largest range."""
    bound = 1.0
    for layer in gen.geo:
        if isinstance(layer, nn.Linear):
            bound *= float(torch.linalg.matrix_norm(layer.weight.detach(), ord=2))
    return bound * max(gen.config.ranges().values())


# ===== Checkpoints ===========================================================

def save_checkpoint(
    gen: PrimitiveGenerator,
    path: str | os.PathLike[str],
    training: Optional[Dict[str, Any]] = None,
) -> Path:
    """Text header line (JSON) followed by little-endian float64 tensors in header order."""
    c = gen.config
    state = gen.state_dict()
    names = sorted(state)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "latent_dim": c.latent_dim,
        "n_prim": c.n_prim,
        "M": c.resolution,
        "geo_widths": list(c.geo_widths),
        "payload_widths": list(c.payload_widths),
        "code_dim": c.code_dim,
        "view_frequencies": c.view_frequencies,
        "alpha_scale": c.alpha_scale,
        "alpha_bias": c.alpha_bias,
        "ranges": c.ranges(),
        "tensors": [{"name": name, "shape": list(state[name].shape)} for name in names],
        "training": training or {},
    }
    validate_record("checkpoint_header", header)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("wb") as handle:
        handle.write(json.dumps(header).encode("utf-8") + b"\n")
        for name in names:
            handle.write(state[name].detach().cpu().to(torch.float64).numpy().astype("<f8").tobytes())
    return out


def read_checkpoint_header(path: str | os.PathLike[str]) -> Tuple[Dict[str, Any], bytes]:
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(file_path)
    raw = file_path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{file_path}: missing checkpoint header")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
        validate_record("checkpoint_header", header)
    except (UnicodeDecodeError, json.JSONDecodeError, SchemaError) as exc:
        raise CheckpointError(f"{file_path}: {exc}") from exc
    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{file_path}: unsupported checkpoint version {header['version']}")
    return header, raw[newline + 1 :]


def load_checkpoint(path: str | os.PathLike[str]) -> Tuple[PrimitiveGenerator, Dict[str, Any]]:
    header, body = read_checkpoint_header(path)
    ranges = header["ranges"]
    config = GeneratorConfig(
        latent_dim=header["latent_dim"],
        n_prim=header["n_prim"],
        resolution=header["M"],
        geo_widths=tuple(header["geo_widths"]),
        payload_widths=tuple(header["payload_widths"]),
        code_dim=header["code_dim"],
        view_frequencies=header.get("view_frequencies", 0),
        alpha_scale=header.get("alpha_scale", 1.0),
        alpha_bias=header.get("alpha_bias", 0.0),
        position_range=ranges["position"],
        rotation_range=ranges["rotation"],
        scale_range=ranges["scale"],
    )
    gen = PrimitiveGenerator(config)
    expected = {name: tuple(t.shape) for name, t in gen.state_dict().items()}
    listed = {t["name"]: tuple(t["shape"]) for t in header["tensors"]}
    if listed != expected:
        raise CheckpointError(f"{path}: tensor list does not match the configured architecture")
    total = sum(int(np.prod(shape)) for shape in listed.values()) * 8
    if len(body) != total:
        raise CheckpointError(f"{path}: weight block has {len(body)} bytes, expected {total}")
    values = np.frombuffer(body, dtype="<f8")
    state: Dict[str, torch.Tensor] = {}
    offset = 0
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"]))
        state[entry["name"]] = torch.from_numpy(values[offset : offset + size].astype(np.float64).reshape(entry["shape"]))
        offset += size
    gen.load_state_dict(state)
    return gen, header.get("training", {})
