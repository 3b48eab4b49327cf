"""
Scene representation: payloads, primitives, delta composition, the composed
volumetric field and the scene file format.

A PrimitiveSet is stored structure-of-arrays so both renderers can gather
per-primitive transforms and payload voxels with plain fancy indexing.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .fade import FadeParams, fade
from .geomcore import ArgumentError, Rotation, clamp_axis_angle, so3_exp
from .guidemesh import AnchorSet
from .schemas import SchemaError, validate_record

logger = logging.getLogger(__name__)

DEFAULT_PAYLOAD_RESOLUTION = 32
SCALE_FLOOR = 1e-4
SCENE_FORMAT = "primvol-scene"
SCENE_VERSION = 1


class SceneFormatError(RuntimeError):
    """Raised when a scene file cannot be read."""


class SceneVersionError(SceneFormatError):
    """Raised for scene files written by an unknown format version."""


class CorruptPayloadError(SceneFormatError):
    """Raised when the binary payload block is truncated or oversized."""


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, order="C", copy=True)
    array.setflags(write=False)
    return array


# ===== Types =================================================================

@dataclass(frozen=True)
class Payload:
    rgb: np.ndarray  # (M, M, M, 3) straight colour, indexed [ix, iy, iz]
    alpha: np.ndarray  # (M, M, M) density per world unit

    def __post_init__(self) -> None:
        rgb = np.asarray(self.rgb, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        m = alpha.shape[0]
        if alpha.shape != (m, m, m) or rgb.shape != (m, m, m, 3):
            raise ArgumentError(f"Payload must be MxMxM, got rgb {rgb.shape}, alpha {alpha.shape}")
        _check_payload_values(rgb, alpha)
        object.__setattr__(self, "rgb", _readonly(rgb.copy()))
        object.__setattr__(self, "alpha", _readonly(alpha.copy()))

    @property
    def resolution(self) -> int:
        return int(self.alpha.shape[0])

    @classmethod
    def constant(cls, rgb: Sequence[float], alpha: float, resolution: int = DEFAULT_PAYLOAD_RESOLUTION) -> "Payload":
        m = resolution
        return cls(
            rgb=np.broadcast_to(np.asarray(rgb, dtype=np.float64), (m, m, m, 3)).copy(),
            alpha=np.full((m, m, m), float(alpha)),
        )


def _check_payload_values(rgb: np.ndarray, alpha: np.ndarray) -> None:
    if not np.all(np.isfinite(rgb)) or not np.all(np.isfinite(alpha)):
        raise ArgumentError("Payload contains NaN or Inf")
    if np.any(alpha < 0):
        raise ArgumentError("Payload alpha must be >= 0")
    if np.any(rgb < 0) or np.any(rgb > 1):
        raise ArgumentError("Payload rgb must lie in [0, 1]")


@dataclass(frozen=True)
class Primitive:
    position: np.ndarray  # (3,)
    rotation: np.ndarray  # (3, 3), columns are the local axes in world space
    scale: np.ndarray  # (3,) half-extents
    payload: Payload

    def __post_init__(self) -> None:
        scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if np.any(scale <= 0):
            raise ArgumentError(f"Primitive scale must be positive, got {scale}")
        rot = self.rotation
        if isinstance(rot, Rotation):
            rot = rot.matrix()
        object.__setattr__(self, "position", _readonly(np.asarray(self.position).reshape(3).copy()))
        object.__setattr__(self, "rotation", _readonly(np.asarray(rot).reshape(3, 3).copy()))
        object.__setattr__(self, "scale", _readonly(scale.copy()))

    @property
    def quaternion(self) -> Rotation:
        return Rotation.from_matrix(self.rotation)


@dataclass(frozen=True)
class DeltaSet:
    dt: np.ndarray  # (N, 3) position deltas
    dr: np.ndarray  # (N, 3) axis-angle rotation deltas
    ds: np.ndarray  # (N, 3) scale deltas

    def __post_init__(self) -> None:
        arrays = [np.asarray(a, dtype=np.float64) for a in (self.dt, self.dr, self.ds)]
        n = arrays[0].shape[0]
        for a in arrays:
            if a.shape != (n, 3):
                raise ArgumentError(f"DeltaSet arrays must be (N, 3), got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ArgumentError("DeltaSet contains NaN or Inf")
        clamped, _ = clamp_axis_angle(arrays[1])
        object.__setattr__(self, "dt", _readonly(arrays[0].copy()))
        object.__setattr__(self, "dr", _readonly(clamped))
        object.__setattr__(self, "ds", _readonly(arrays[2].copy()))

    @property
    def count(self) -> int:
        return int(self.dt.shape[0])

    @classmethod
    def zeros(cls, n: int) -> "DeltaSet":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)))


class PrimitiveSet:
    """N posed primitives sharing a payload resolution M, plus a background colour."""

    def __init__(
        self,
        positions: np.ndarray,
        rotations: np.ndarray,
        scales: np.ndarray,
        rgb: np.ndarray,
        alpha: np.ndarray,
        background: Sequence[float] = (0.0, 0.0, 0.0),
        scale_clamped: Optional[np.ndarray] = None,
        validate: bool = True,
    ):
        positions = np.asarray(positions, dtype=np.float64)
        n = positions.shape[0] if positions.ndim == 2 else 0
        if n < 1:
            raise ArgumentError("A scene needs at least one primitive")
        rotations = np.asarray(rotations, dtype=np.float64)
        scales = np.asarray(scales, dtype=np.float64)
        rgb = np.asarray(rgb, dtype=np.float64)
        alpha = np.asarray(alpha, dtype=np.float64)
        m = alpha.shape[1] if alpha.ndim == 4 else 0
        if positions.shape != (n, 3) or rotations.shape != (n, 3, 3) or scales.shape != (n, 3):
            raise ArgumentError("Primitive transforms must be (N,3), (N,3,3), (N,3)")
        if alpha.shape != (n, m, m, m) or rgb.shape != (n, m, m, m, 3) or m < 1:
            raise ArgumentError(f"Payload arrays must be (N,M,M,M) and (N,M,M,M,3), got {alpha.shape}, {rgb.shape}")
        if validate:
            if not (np.all(np.isfinite(positions)) and np.all(np.isfinite(rotations)) and np.all(np.isfinite(scales))):
                raise ArgumentError("Primitive transforms must be finite")
            if np.any(scales <= 0):
                raise ArgumentError("Primitive scales must be positive")
            _check_payload_values(rgb, alpha)
        bg = np.asarray(background, dtype=np.float64).reshape(3)
        self.positions = _readonly(positions)
        self.rotations = _readonly(rotations)
        self.scales = _readonly(scales)
        self.rgb = _readonly(rgb)
        self.alpha = _readonly(alpha)
        self.background = _readonly(bg)
        flags = np.zeros(n, dtype=bool) if scale_clamped is None else np.asarray(scale_clamped, dtype=bool)
        flags = flags.copy()
        flags.setflags(write=False)
        self.scale_clamped = flags

    @classmethod
    def from_primitives(cls, primitives: Sequence[Primitive], background: Sequence[float] = (0.0, 0.0, 0.0)) -> "PrimitiveSet":
        if not primitives:
            raise ArgumentError("A scene needs at least one primitive")
        resolutions = {p.payload.resolution for p in primitives}
        if len(resolutions) != 1:
            raise ArgumentError(f"All payloads must share one resolution, got {sorted(resolutions)}")
        return cls(
            positions=np.stack([p.position for p in primitives]),
            rotations=np.stack([p.rotation for p in primitives]),
            scales=np.stack([p.scale for p in primitives]),
            rgb=np.stack([p.payload.rgb for p in primitives]),
            alpha=np.stack([p.payload.alpha for p in primitives]),
            background=background,
        )

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def __getitem__(self, k: int) -> Primitive:
        return Primitive(
            position=self.positions[k],
            rotation=self.rotations[k],
            scale=self.scales[k],
            payload=Payload(rgb=self.rgb[k], alpha=self.alpha[k]),
        )

    def __iter__(self) -> Iterator[Primitive]:
        for k in range(len(self)):
            yield self[k]

    @property
    def n_prim(self) -> int:
        return len(self)

    @property
    def resolution(self) -> int:
        return int(self.alpha.shape[1])

    @property
    def primitives(self) -> List[Primitive]:
        return list(self)

    def replace(self, **changes) -> "PrimitiveSet":
        fields = {
            "positions": self.positions,
            "rotations": self.rotations,
            "scales": self.scales,
            "rgb": self.rgb,
            "alpha": self.alpha,
            "background": self.background,
            "scale_clamped": self.scale_clamped,
        }
        fields.update(changes)
        return PrimitiveSet(**fields)

    def signature(self) -> Tuple[int, int, int]:
        """Cheap fingerprint of the transforms, used to pair render tapes with scenes."""
        digest = hash((self.positions.tobytes(), self.rotations.tobytes(), self.scales.tobytes()))
        return len(self), self.resolution, digest


# ===== Composition ===========================================================

def compose(
    anchors: AnchorSet,
    deltas: DeltaSet,
    payloads: Sequence[Payload] | Tuple[np.ndarray, np.ndarray],
    background: Sequence[float] = (0.0, 0.0, 0.0),
) -> PrimitiveSet:
    """t = t_hat + dt, R = R_hat . exp(dr), s = max(s_hat + ds, SCALE_FLOOR)."""
    n = anchors.count
    if isinstance(payloads, tuple):
        rgb, alpha = (np.asarray(a, dtype=np.float64) for a in payloads)
        count = rgb.shape[0]
    else:
        count = len(payloads)
    if deltas.count != n or count != n:
        raise ArgumentError(f"Count mismatch: {n} anchors, {deltas.count} deltas, {count} payloads")
    if not isinstance(payloads, tuple):
        rgb = np.stack([p.rgb for p in payloads])
        alpha = np.stack([p.alpha for p in payloads])
    positions = anchors.positions + deltas.dt
    rotations = anchors.rotations @ so3_exp(deltas.dr)
    raw = anchors.scale[None, :] + deltas.ds
    clamped = np.any(raw < SCALE_FLOOR, axis=1)
    if clamped.any():
        logger.warning("%d primitive scale(s) clamped to %g", int(clamped.sum()), SCALE_FLOOR)
    scales = np.maximum(raw, SCALE_FLOOR)
    return PrimitiveSet(positions, rotations, scales, rgb, alpha, background=background, scale_clamped=clamped)


# ===== Coordinates and sampling ==============================================

def to_local(points: np.ndarray, position: np.ndarray, rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """R^T (x - t) / s, row-wise; transforms may be per-row (K,...) or shared.

    Written out elementwise so every renderer gets bit-identical coordinates.
    """
    d = points - position
    r = rotation
    u = d[..., 0:1] * r[..., 0, :] + d[..., 1:2] * r[..., 1, :] + d[..., 2:3] * r[..., 2, :]
    return u / scale


def to_world(local: np.ndarray, position: np.ndarray, rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    u = local * scale
    return position + u[..., 0:1] * rotation[..., :, 0] + u[..., 1:2] * rotation[..., :, 1] + u[..., 2:3] * rotation[..., :, 2]


def world_to_local(p: Primitive, x: np.ndarray) -> np.ndarray:
    return to_local(np.asarray(x, dtype=np.float64), p.position, p.rotation, p.scale)


def local_to_world(p: Primitive, local: np.ndarray) -> np.ndarray:
    return to_world(np.asarray(local, dtype=np.float64), p.position, p.rotation, p.scale)


def inside_box(local: np.ndarray) -> np.ndarray:
    return np.all(np.abs(local) <= 1.0, axis=-1)


def trilinear_setup(local: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Corner voxel indices (K, 8) into a flattened M^3 grid and their weights (K, 8).

    Nodes are cell centred; queries in the outer half cell clamp to the edge node.
    Corner c = 4*bx + 2*by + bz.
    """
    f = np.clip((local + 1.0) * (0.5 * m) - 0.5, 0.0, m - 1.0)
    if m == 1:
        i0 = np.zeros(f.shape, dtype=np.int64)
        frac = np.zeros(f.shape)
        i1 = i0
    else:
        i0 = np.minimum(np.floor(f), m - 2).astype(np.int64)
        frac = f - i0
        i1 = i0 + 1
    idx = np.empty(f.shape[:-1] + (8,), dtype=np.int64)
    w = np.empty(f.shape[:-1] + (8,))
    for c in range(8):
        bx, by, bz = (c >> 2) & 1, (c >> 1) & 1, c & 1
        ix = i1[..., 0] if bx else i0[..., 0]
        iy = i1[..., 1] if by else i0[..., 1]
        iz = i1[..., 2] if bz else i0[..., 2]
        wx = frac[..., 0] if bx else 1.0 - frac[..., 0]
        wy = frac[..., 1] if by else 1.0 - frac[..., 1]
        wz = frac[..., 2] if bz else 1.0 - frac[..., 2]
        idx[..., c] = (ix * m + iy) * m + iz
        w[..., c] = wx * wy * wz
    return idx, w


def trilinear_weight_grads(local: np.ndarray, m: int) -> np.ndarray:
    """d weight / d local, shape (K, 8, 3); zero in the clamped outer half cells."""
    raw = (local + 1.0) * (0.5 * m) - 0.5
    f = np.clip(raw, 0.0, m - 1.0)
    active = (raw > 0.0) & (raw < m - 1.0)
    out = np.zeros(local.shape[:-1] + (8, 3))
    if m == 1:
        return out
    i0 = np.minimum(np.floor(f), m - 2)
    frac = f - i0
    dfrac = np.where(active, 0.5 * m, 0.0)
    for c in range(8):
        bits = ((c >> 2) & 1, (c >> 1) & 1, c & 1)
        factors = [frac[..., a] if b else 1.0 - frac[..., a] for a, b in enumerate(bits)]
        for a, b in enumerate(bits):
            sign = 1.0 if b else -1.0
            others = factors[(a + 1) % 3] * factors[(a + 2) % 3]
            out[..., c, a] = sign * dfrac[..., a] * others
    return out


def gather_weighted(values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """sum_c w[:, c] * values[idx[:, c]] accumulated corner by corner in fixed order."""
    acc = w[..., 0, None] * values[idx[..., 0]] if values.ndim > 1 else w[..., 0] * values[idx[..., 0]]
    for c in range(1, 8):
        if values.ndim > 1:
            acc = acc + w[..., c, None] * values[idx[..., c]]
        else:
            acc = acc + w[..., c] * values[idx[..., c]]
    return acc


def sample_payload(payload: Payload, local: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Trilinear (rgb, alpha) at local coordinates; zero outside [-1, 1]^3."""
    local = np.asarray(local, dtype=np.float64)
    single = local.ndim == 1
    pts = local.reshape(-1, 3)
    m = payload.resolution
    idx, w = trilinear_setup(pts, m)
    rgb = gather_weighted(payload.rgb.reshape(-1, 3), idx, w)
    alpha = gather_weighted(payload.alpha.reshape(-1), idx, w)
    inside = inside_box(pts)
    rgb = np.where(inside[:, None], rgb, 0.0)
    alpha = np.where(inside, alpha, 0.0)
    if single:
        return rgb[0], float(alpha[0])
    return rgb.reshape(local.shape[:-1] + (3,)), alpha.reshape(local.shape[:-1])


def field_eval_points(scene: PrimitiveSet, points: np.ndarray, fade_params: FadeParams) -> Tuple[np.ndarray, np.ndarray]:
    """Composed (premultiplied colour (P, 3), density (P,)) at world points.

    Densities and premultiplied colours add across overlapping primitives,
    accumulated in ascending primitive order.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = scene.resolution
    prem = np.zeros((points.shape[0], 3))
    density = np.zeros(points.shape[0])
    alpha_flat = scene.alpha.reshape(len(scene), -1)
    rgb_flat = scene.rgb.reshape(len(scene), -1, 3)
    for k in range(len(scene)):
        local = to_local(points, scene.positions[k], scene.rotations[k], scene.scales[k])
        hit = np.nonzero(inside_box(local))[0]
        if hit.size == 0:
            continue
        loc = local[hit]
        idx, w = trilinear_setup(loc, m)
        sigma = gather_weighted(alpha_flat[k], idx, w)
        color = gather_weighted(rgb_flat[k], idx, w)
        a = sigma * fade(loc, fade_params)
        density[hit] += a
        prem[hit] += a[:, None] * color
    return prem, density


def field_eval(scene: PrimitiveSet, x: np.ndarray, fade_params: FadeParams) -> Tuple[np.ndarray, float]:
    prem, density = field_eval_points(scene, np.asarray(x, dtype=np.float64).reshape(1, 3), fade_params)
    return prem[0], float(density[0])


# ===== Serialization =========================================================

def save_scene(scene: PrimitiveSet, path: str | os.PathLike[str]) -> None:
    """Text header line (JSON) followed by a little-endian float64 payload block."""
    m = scene.resolution
    block = bytearray()
    for k in range(len(scene)):
        block += scene.rgb[k].astype("<f8").tobytes()
        block += scene.alpha[k].astype("<f8").tobytes()
    header = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "n_prim": len(scene),
        "M": m,
        "background": [float(v) for v in scene.background],
        "positions": scene.positions.tolist(),
        "rotations": scene.rotations.reshape(-1, 9).tolist(),
        "scales": scene.scales.tolist(),
        "payload_bytes": len(block),
    }
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with file_path.open("wb") as handle:
        handle.write(json.dumps(header).encode("utf-8") + b"\n")
        handle.write(bytes(block))


def load_scene(path: str | os.PathLike[str]) -> PrimitiveSet:
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(file_path)
    raw = file_path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise SceneFormatError(f"{file_path}: missing scene header")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SceneFormatError(f"{file_path}: unreadable scene header: {exc}") from exc
    if isinstance(header, dict) and header.get("format") == SCENE_FORMAT and header.get("version") != SCENE_VERSION:
        raise SceneVersionError(f"{file_path}: unsupported scene version {header.get('version')!r}")
    try:
        validate_record("scene_header", header)
    except SchemaError as exc:
        raise SceneFormatError(f"{file_path}: {exc}") from exc

    n, m = header["n_prim"], header["M"]
    per_prim = m**3 * 4
    expected = n * per_prim * 8
    body = raw[newline + 1 :]
    if len(body) != expected or header["payload_bytes"] != expected:
        raise CorruptPayloadError(f"{file_path}: payload block has {len(body)} bytes, expected {expected}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(n, per_prim)
    rgb = values[:, : m**3 * 3].reshape(n, m, m, m, 3)
    alpha = values[:, m**3 * 3 :].reshape(n, m, m, m)
    try:
        return PrimitiveSet(
            positions=np.asarray(header["positions"], dtype=np.float64),
            rotations=np.asarray(header["rotations"], dtype=np.float64).reshape(n, 3, 3),
            scales=np.asarray(header["scales"], dtype=np.float64),
            rgb=rgb,
            alpha=alpha,
            background=header["background"],
        )
    except ArgumentError as exc:
        raise CorruptPayloadError(f"{file_path}: {exc}") from exc


# ===== Procedural scenes =====================================================

def smooth_payload(rng: np.random.Generator, m: int, density: float) -> Tuple[np.ndarray, np.ndarray]:
    """Low-frequency rgb in [0.1, 0.9] and positive density fields on an M^3 grid."""
    c = (np.arange(m) + 0.5) / m * 2.0 - 1.0
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    grid = np.stack([gx, gy, gz], axis=-1)
    freq = rng.uniform(0.5, 1.5, size=(4, 3))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=4)
    waves = np.sin(grid @ freq.T + phase)
    rgb = 0.5 + 0.4 * waves[..., :3]
    alpha = density * (0.6 + 0.4 * waves[..., 3])
    return rgb, alpha


def random_scene(
    rng: np.random.Generator,
    n_prim: int,
    resolution: int = 8,
    extent: float = 1.0,
    scale_range: Tuple[float, float] = (0.1, 0.3),
    density: float = 2.0,
    background: Sequence[float] = (0.0, 0.0, 0.0),
) -> PrimitiveSet:
    positions = rng.uniform(-extent, extent, size=(n_prim, 3))
    rotations = so3_exp(rng.normal(size=(n_prim, 3)))
    scales = rng.uniform(scale_range[0], scale_range[1], size=(n_prim, 3))
    payloads = [smooth_payload(rng, resolution, density) for _ in range(n_prim)]
    rgb = np.stack([p[0] for p in payloads])
    alpha = np.stack([p[1] for p in payloads])
    return PrimitiveSet(positions, rotations, scales, rgb, alpha, background=background)


def demo_scene(seed: int = 0, n_prim: int = 64, resolution: int = 16) -> PrimitiveSet:
    """Deterministic demo: primitives spread over a ring-shaped shell around the origin."""
    rng = np.random.default_rng(seed)
    angle = np.linspace(0.0, 2.0 * np.pi, n_prim, endpoint=False)
    height = rng.uniform(-0.4, 0.4, size=n_prim)
    positions = np.stack([0.7 * np.cos(angle), height, 0.7 * np.sin(angle)], axis=-1)
    rotations = so3_exp(rng.normal(scale=0.4, size=(n_prim, 3)))
    scales = rng.uniform(0.08, 0.16, size=(n_prim, 3))
    payloads = [smooth_payload(rng, resolution, 12.0) for _ in range(n_prim)]
    return PrimitiveSet(
        positions,
        rotations,
        scales,
        np.stack([p[0] for p in payloads]),
        np.stack([p[1] for p in payloads]),
        background=(0.05, 0.05, 0.08),
    )
