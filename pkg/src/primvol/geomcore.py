"""
Geometry and imaging primitives.

Everything here is immutable after construction. Scalar types (Vec3,
Rotation, Camera, Ray, ImageBuffer) carry the validated values; the
vectorized helpers (``so3_exp``, ``quat_to_matrix``, ``camera_rays``...)
work on plain float64 arrays and are what the renderers use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Sequence, Tuple

import numpy as np

ROTATION_ANGLE_CLAMP = math.pi - 1e-6
PSNR_IDENTICAL_DB = 100.0


class ArgumentError(ValueError):
    """Raised when an operation receives arguments outside its domain."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


# ===== Vec3 ==================================================================

@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ArgumentError(f"Vec3 components must be finite: {(self.x, self.y, self.z)}")

    @classmethod
    def of(cls, values: Iterable[float]) -> "Vec3":
        x, y, z = (float(v) for v in values)
        return cls(x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


def _as_vec(v: Vec3 | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(v, Vec3):
        return v.as_array()
    return np.asarray(v, dtype=np.float64).reshape(3)


# ===== Rotations =============================================================

def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (..., 4) quaternions stored as (w, x, y, z)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns quaternions with w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4), dtype=np.float64)
    for i, r in enumerate(flat):
        trace = r[0, 0] + r[1, 1] + r[2, 2]
        if trace > 0:
            s = 2.0 * math.sqrt(trace + 1.0)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        if q[0] < 0:
            q = -q
        out[i] = q / np.linalg.norm(q)
    return out.reshape(m.shape[:-2] + (4,))


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    zero = np.zeros(v.shape[:-1])
    x, y, z = np.moveaxis(v, -1, 0)
    return np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )


def clamp_axis_angle(v: np.ndarray, max_angle: float = ROTATION_ANGLE_CLAMP) -> Tuple[np.ndarray, np.ndarray]:
    """Rescale axis-angle vectors so |v| <= max_angle. Returns (clamped, was_clamped)."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    over = angle > max_angle
    scale = np.where(over, max_angle / np.where(over, angle, 1.0), 1.0)
    return v * scale, over[..., 0]


def so3_exp(v: np.ndarray, max_angle: float = ROTATION_ANGLE_CLAMP) -> np.ndarray:
    """Rodrigues exponential map for (..., 3) axis-angle vectors."""
    v, _ = clamp_axis_angle(v, max_angle)
    theta2 = np.sum(v * v, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta2 < 1e-12
    safe = np.where(small, 1.0, theta)
    # Taylor branches keep the map continuous at zero
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / np.where(small, 1.0, theta2))
    k = skew(v)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a * k + b * (k @ k)


def so3_log(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    q = matrix_to_quat(r)
    w = np.clip(q[..., 0], -1.0, 1.0)
    xyz = q[..., 1:]
    s = np.linalg.norm(xyz, axis=-1)
    angle = 2.0 * np.arctan2(s, w)
    factor = np.where(s < 1e-12, 2.0 / np.maximum(w, 1e-12), angle / np.where(s < 1e-12, 1.0, s))
    return xyz * factor[..., None]


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion (w, x, y, z). ``q`` and ``-q`` are the same rotation."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self) -> None:
        q = np.array([self.w, self.x, self.y, self.z], dtype=np.float64)
        if not np.all(np.isfinite(q)):
            raise ArgumentError("Rotation components must be finite")
        n = float(np.linalg.norm(q))
        if n < 1e-300:
            raise ArgumentError("Zero quaternion is not a rotation")
        q = q / n
        object.__setattr__(self, "w", float(q[0]))
        object.__setattr__(self, "x", float(q[1]))
        object.__setattr__(self, "y", float(q[2]))
        object.__setattr__(self, "z", float(q[3]))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_quat(cls, q: Sequence[float]) -> "Rotation":
        w, x, y, z = (float(c) for c in q)
        return cls(w, x, y, z)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Rotation":
        return cls.from_quat(matrix_to_quat(np.asarray(m, dtype=np.float64)))

    def quat(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat())

    def inverse(self) -> "Rotation":
        return Rotation(self.w, -self.x, -self.y, -self.z)

    def apply(self, v: Vec3 | Sequence[float] | np.ndarray) -> np.ndarray:
        return self.matrix() @ _as_vec(v)

    def log(self) -> np.ndarray:
        return so3_log(self.matrix())

    def is_close(self, other: "Rotation", tol: float = 1e-6) -> bool:
        return abs(abs(float(np.dot(self.quat(), other.quat()))) - 1.0) <= tol

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Rotation):
            return NotImplemented
        return self.is_close(other)

    def __hash__(self) -> int:
        q = self.quat()
        if q[0] < 0 or (q[0] == 0 and q[1] < 0):
            q = -q
        return hash(tuple(np.round(q, 9)))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return rotation_compose(self, other)


def rotation_compose(a: Rotation, b: Rotation) -> Rotation:
    """a·b, renormalized (the constructor normalizes)."""
    return Rotation.from_quat(quat_multiply(a.quat(), b.quat()))


def axis_angle_to_rotation(v: Vec3 | Sequence[float] | np.ndarray, max_angle: float = ROTATION_ANGLE_CLAMP) -> Rotation:
    vec, _ = clamp_axis_angle(_as_vec(v), max_angle)
    angle = float(np.linalg.norm(vec))
    half = 0.5 * angle
    if angle < 1e-12:
        # sin(half)/angle -> 1/2
        s = 0.5 - angle * angle / 48.0
    else:
        s = math.sin(half) / angle
    return Rotation(math.cos(half), vec[0] * s, vec[1] * s, vec[2] * s)


def rotation_to_axis_angle(r: Rotation) -> np.ndarray:
    q = r.quat()
    if q[0] < 0:
        q = -q
    s = float(np.linalg.norm(q[1:]))
    if s < 1e-12:
        return q[1:] * 2.0 / max(q[0], 1e-12)
    angle = 2.0 * math.atan2(s, q[0])
    return q[1:] * (angle / s)


def euler_xyz_degrees(m: np.ndarray) -> np.ndarray:
    """Intrinsic x-y-z Euler angles of a rotation matrix, in degrees."""
    m = np.asarray(m, dtype=np.float64)
    sy = np.clip(m[..., 0, 2], -1.0, 1.0)
    ry = np.arcsin(sy)
    rx = np.arctan2(-m[..., 1, 2], m[..., 2, 2])
    rz = np.arctan2(-m[..., 0, 1], m[..., 0, 0])
    return np.degrees(np.stack([rx, ry, rz], axis=-1))


# ===== Camera and rays =======================================================

@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float
    t_max: float

    def __post_init__(self) -> None:
        origin = _frozen(_as_vec(self.origin).copy())
        direction = _frozen(_as_vec(self.direction).copy())
        if abs(float(np.linalg.norm(direction)) - 1.0) > 1e-6:
            raise ArgumentError("Ray direction must be unit length")
        if not (0.0 <= self.t_min < self.t_max):
            raise ArgumentError(f"Ray bounds must satisfy 0 <= t_min < t_max, got {self.t_min}, {self.t_max}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``pose`` is camera-to-world; the camera looks along +z, y points down."""

    pose: np.ndarray
    focal: float
    principal_point: Tuple[float, float]
    width: int
    height: int

    def __post_init__(self) -> None:
        pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4).copy()
        if not np.all(np.isfinite(pose)):
            raise ArgumentError("Camera pose must be finite")
        if not self.focal > 0:
            raise ArgumentError(f"Camera focal must be positive, got {self.focal}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ArgumentError(f"Camera resolution must be at least 1x1, got {self.width}x{self.height}")
        object.__setattr__(self, "pose", _frozen(pose))
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "principal_point", (float(self.principal_point[0]), float(self.principal_point[1])))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float],
        up: Sequence[float] = (0.0, 1.0, 0.0),
        focal: float = 64.0,
        width: int = 64,
        height: int = 64,
    ) -> "Camera":
        eye_v = _as_vec(eye)
        forward = _as_vec(target) - eye_v
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, _as_vec(up))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        pose = np.eye(4)
        pose[:3, 0] = right
        pose[:3, 1] = down
        pose[:3, 2] = forward
        pose[:3, 3] = eye_v
        return cls(pose=pose, focal=focal, principal_point=(width / 2.0, height / 2.0), width=width, height=height)

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        f = self.pose[:3, 2]
        return f / np.linalg.norm(f)

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.width, self.height

    def with_resolution(self, width: int, height: int) -> "Camera":
        sx = width / self.width
        sy = height / self.height
        return Camera(
            pose=self.pose,
            focal=self.focal * sx,
            principal_point=(self.principal_point[0] * sx, self.principal_point[1] * sy),
            width=width,
            height=height,
        )

    def to_record(self) -> Dict[str, Any]:
        return {
            "pose": [float(v) for v in self.pose.reshape(-1)],
            "focal": self.focal,
            "principal_point": [self.principal_point[0], self.principal_point[1]],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "Camera":
        try:
            pose = np.asarray(record["pose"], dtype=np.float64).reshape(4, 4)
            return cls(
                pose=pose,
                focal=float(record["focal"]),
                principal_point=tuple(record["principal_point"]),
                width=int(record["width"]),
                height=int(record["height"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArgumentError(f"Invalid camera record: {exc}") from exc


def camera_ray(camera: Camera, px: Tuple[int, int], near: float, far: float) -> Ray:
    x, y = px
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise ArgumentError(f"Pixel {px} outside {camera.width}x{camera.height}")
    if not near < far:
        raise ArgumentError(f"near must be < far, got {near}, {far}")
    origins, dirs = camera_rays(camera, pixels=np.array([[x, y]]))
    return Ray(origin=origins[0], direction=dirs[0], t_min=near, t_max=far)


def camera_rays(camera: Camera, pixels: np.ndarray | None = None) -> Tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for the given (K, 2) pixel coords, or for every pixel row-major."""
    if pixels is None:
        ys, xs = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
        pixels = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)
    pixels = np.asarray(pixels, dtype=np.float64)
    cx, cy = camera.principal_point
    local = np.stack(
        [
            (pixels[:, 0] + 0.5 - cx) / camera.focal,
            (pixels[:, 1] + 0.5 - cy) / camera.focal,
            np.ones(pixels.shape[0]),
        ],
        axis=-1,
    )
    dirs = local @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return origins, dirs


# ===== Images ================================================================

@dataclass(frozen=True)
class ImageBuffer:
    """(height, width, channels) float64 image; colour data lives in [0, 1]."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or data.shape[2] not in (1, 3, 4):
            raise ArgumentError(f"Image must be HxWx{{1,3,4}}, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ArgumentError("Image contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(data.copy()))

    @classmethod
    def filled(cls, width: int, height: int, value: Sequence[float]) -> "ImageBuffer":
        value = np.asarray(value, dtype=np.float64).reshape(-1)
        return cls(np.broadcast_to(value, (height, width, value.size)).copy())

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.height, self.width, self.channels


def _image_array(image: ImageBuffer | np.ndarray) -> np.ndarray:
    if isinstance(image, ImageBuffer):
        return image.data
    return np.asarray(image, dtype=np.float64)


def psnr(a: ImageBuffer | np.ndarray, b: ImageBuffer | np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images."""
    x = _image_array(a)
    y = _image_array(b)
    if x.shape != y.shape:
        raise ArgumentError(f"Image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL_DB
    return min(PSNR_IDENTICAL_DB, 10.0 * math.log10(1.0 / mse))
