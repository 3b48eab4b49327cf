"""
Multi-view datasets and the procedural teacher.

The teacher maps a low-dimensional latent to a scene of soft ellipsoidal
blobs whose centres, sizes, orientations and colours are smooth functions of
the latent, then renders it with the dense oracle from a ring of cameras.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .geomcore import ArgumentError, Camera, so3_exp
from .imagefile import read_image, write_pfm
from .render import RenderOptions, render_dense_oracle
from .scene import PrimitiveSet
from .schemas import SchemaError, validate_record

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
TEACHER_NAME = "teacher.json"


class DatasetError(RuntimeError):
    """Raised when a dataset manifest is missing, malformed or inconsistent."""


@dataclass(frozen=True)
class TeacherSpec:
    latent_dim: int = 2
    samples: int = 100
    views: int = 16
    blobs: int = 4
    width: int = 64
    height: int = 64
    payload_resolution: int = 8
    camera_radius: float = 3.0
    elevation_deg: float = 20.0
    focal_scale: float = 1.2
    holdout_views: int = 0
    holdout_radius_scale: float = 1.0
    density: float = 6.0
    step: float = 0.02
    near: float = 0.1
    far: float = 8.0
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 42

    def __post_init__(self) -> None:
        if not 3 <= self.blobs <= 8:
            raise ArgumentError(f"blobs must lie in [3, 8], got {self.blobs}")
        if min(self.latent_dim, self.samples, self.views, self.width, self.height, self.payload_resolution) < 1:
            raise ArgumentError("latent_dim, samples, views, resolution and payload_resolution must be >= 1")
        if self.holdout_views < 0 or self.holdout_radius_scale <= 0:
            raise ArgumentError("holdout_views must be >= 0 and holdout_radius_scale > 0")

    def render_options(self) -> RenderOptions:
        return RenderOptions(step=self.step, near=self.near, far=self.far, background=self.background)


@dataclass(frozen=True)
class _BlobFamily:
    center: np.ndarray
    center_mix: np.ndarray
    color: np.ndarray
    color_mix: np.ndarray
    size: np.ndarray
    size_mix: np.ndarray
    rotation: np.ndarray
    rotation_mix: np.ndarray


def _family(spec: TeacherSpec) -> _BlobFamily:
    rng = np.random.default_rng([spec.seed, 0])
    b, d = spec.blobs, spec.latent_dim
    return _BlobFamily(
        center=rng.uniform(-0.5, 0.5, size=(b, 3)),
        center_mix=rng.normal(scale=0.6, size=(b, 3, d)),
        color=rng.normal(scale=1.0, size=(b, 3)),
        color_mix=rng.normal(scale=0.8, size=(b, 3, d)),
        size=rng.uniform(0.25, 0.45, size=(b, 3)),
        size_mix=rng.normal(scale=0.5, size=(b, 3, d)),
        rotation=rng.normal(scale=0.5, size=(b, 3)),
        rotation_mix=rng.normal(scale=0.5, size=(b, 3, d)),
    )


def teacher_latents(spec: TeacherSpec) -> np.ndarray:
    return np.random.default_rng([spec.seed, 1]).normal(size=(spec.samples, spec.latent_dim))


def teacher_scene(spec: TeacherSpec, w: np.ndarray) -> PrimitiveSet:
    """One primitive per blob, each carrying a soft-ellipsoid payload."""
    w = np.asarray(w, dtype=np.float64).reshape(spec.latent_dim)
    fam = _family(spec)
    centers = fam.center + 0.3 * np.tanh(fam.center_mix @ w)
    colors = 0.1 + 0.8 / (1.0 + np.exp(-(fam.color + fam.color_mix @ w)))
    sizes = fam.size * np.exp(0.25 * np.tanh(fam.size_mix @ w))
    rotations = so3_exp(fam.rotation + 0.5 * np.tanh(fam.rotation_mix @ w))

    m = spec.payload_resolution
    nodes = (2.0 * np.arange(m) + 1.0) / m - 1.0
    gx, gy, gz = np.meshgrid(nodes, nodes, nodes, indexing="ij")
    q = gx**2 + gy**2 + gz**2
    falloff = np.clip(1.0 - q, 0.0, 1.0)
    alpha = np.broadcast_to(spec.density * falloff**2, (spec.blobs, m, m, m))
    shade = (0.8 + 0.2 * falloff)[None, ..., None]
    rgb = np.clip(colors[:, None, None, None, :] * shade, 0.0, 1.0)
    return PrimitiveSet(centers, rotations, sizes, rgb, alpha, background=spec.background)


def teacher_cameras(spec: TeacherSpec, holdout: bool = False) -> List[Camera]:
    count = spec.holdout_views if holdout else spec.views
    radius = spec.camera_radius * (spec.holdout_radius_scale if holdout else 1.0)
    offset = math.pi / max(spec.views, 1) if holdout else 0.0
    focal = spec.focal_scale * spec.width
    cameras = []
    for j in range(count):
        azimuth = 2.0 * math.pi * j / count + offset
        elevation = math.radians(spec.elevation_deg) * (1.0 if j % 2 == 0 else -1.0)
        eye = radius * np.array(
            [math.cos(elevation) * math.sin(azimuth), math.sin(elevation), math.cos(elevation) * math.cos(azimuth)]
        )
        cameras.append(Camera.look_at(eye, (0.0, 0.0, 0.0), focal=focal, width=spec.width, height=spec.height))
    return cameras


# ===== Datasets ==============================================================

@dataclass(frozen=True)
class ViewRecord:
    image: Path
    camera: Camera
    w: Optional[np.ndarray] = None
    sample: int = 0
    view: int = 0
    split: str = "train"

    def to_record(self, root: Path) -> Dict[str, object]:
        record: Dict[str, object] = {
            "image": self.image.relative_to(root).as_posix() if self.image.is_relative_to(root) else str(self.image),
            "camera": self.camera.to_record(),
            "sample": self.sample,
            "view": self.view,
            "split": self.split,
        }
        if self.w is not None:
            record["w"] = [float(v) for v in self.w]
        return record


class MultiViewDataset:
    def __init__(self, root: str | os.PathLike[str], records: Sequence[ViewRecord]):
        self.root = Path(root)
        self.records: List[ViewRecord] = list(records)
        self._cache: Dict[Path, np.ndarray] = {}
        if not self.records:
            raise DatasetError(f"{self.root}: dataset has no records")
        sizes = {(r.camera.width, r.camera.height) for r in self.records}
        if len(sizes) != 1:
            raise DatasetError(f"{self.root}: images have mixed resolutions {sorted(sizes)}")
        with_latent = sum(r.w is not None for r in self.records)
        if with_latent not in (0, len(self.records)):
            raise DatasetError(f"{self.root}: latents must be present on all records or none")
        if with_latent and len({r.w.shape for r in self.records}) != 1:
            raise DatasetError(f"{self.root}: latents have mixed dimensions")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> ViewRecord:
        return self.records[index]

    def __iter__(self) -> Iterator[ViewRecord]:
        return iter(self.records)

    @property
    def resolution(self) -> Tuple[int, int]:
        cam = self.records[0].camera
        return cam.width, cam.height

    @property
    def has_latents(self) -> bool:
        return self.records[0].w is not None

    @property
    def latent_dim(self) -> int:
        if not self.has_latents:
            raise DatasetError(f"{self.root}: dataset carries no latents")
        return int(self.records[0].w.shape[0])

    @property
    def samples(self) -> List[int]:
        return sorted({r.sample for r in self.records})

    def image(self, index: int) -> np.ndarray:
        path = self.records[index].image
        if path not in self._cache:
            data = read_image(path).data
            if data.shape[:2] != (self.resolution[1], self.resolution[0]):
                raise DatasetError(f"{path}: image size {data.shape[1]}x{data.shape[0]} does not match its camera")
            self._cache[path] = data[..., :3]
        return self._cache[path]

    def latent(self, sample: int) -> np.ndarray:
        for r in self.records:
            if r.sample == sample:
                if r.w is None:
                    raise DatasetError(f"{self.root}: dataset carries no latents")
                return r.w
        raise DatasetError(f"{self.root}: unknown sample {sample}")

    def _subset(self, records: List[ViewRecord], what: str) -> "MultiViewDataset":
        if not records:
            raise DatasetError(f"{self.root}: no records for {what}")
        subset = MultiViewDataset(self.root, records)
        subset._cache = self._cache
        return subset

    def for_sample(self, sample: int) -> "MultiViewDataset":
        return self._subset([r for r in self.records if r.sample == sample], f"sample {sample}")

    def split(self, name: str) -> "MultiViewDataset":
        return self._subset([r for r in self.records if r.split == name], f"split {name!r}")

    def has_split(self, name: str) -> bool:
        return any(r.split == name for r in self.records)

    def for_samples(self, samples: Sequence[int]) -> "MultiViewDataset":
        wanted = set(samples)
        return self._subset([r for r in self.records if r.sample in wanted], f"samples {sorted(wanted)}")


def save_manifest(dataset: MultiViewDataset, path: str | os.PathLike[str] | None = None) -> Path:
    out = Path(path) if path is not None else dataset.root / MANIFEST_NAME
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as handle:
        for record in dataset.records:
            payload = record.to_record(dataset.root)
            validate_record("manifest_record", payload)
            handle.write(json.dumps(payload) + "\n")
    return out


def load_manifest(path: str | os.PathLike[str]) -> MultiViewDataset:
    """Read a JSON-lines manifest; a directory argument means ``<dir>/manifest.jsonl``."""
    manifest = Path(path)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(manifest)
    root = manifest.parent
    records: List[ViewRecord] = []
    with manifest.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                validate_record("manifest_record", raw)
                camera = Camera.from_record(raw["camera"])
            except (json.JSONDecodeError, SchemaError, ArgumentError) as exc:
                raise DatasetError(f"{manifest}:{lineno}: {exc}") from exc
            image = Path(raw["image"])
            records.append(
                ViewRecord(
                    image=image if image.is_absolute() else root / image,
                    camera=camera,
                    w=np.asarray(raw["w"], dtype=np.float64) if "w" in raw else None,
                    sample=int(raw.get("sample", 0)),
                    view=int(raw.get("view", lineno - 1)),
                    split=raw.get("split", "train"),
                )
            )
    return MultiViewDataset(root, records)


def make_teacher(spec: TeacherSpec, out_dir: str | os.PathLike[str], progress: bool = True) -> MultiViewDataset:
    """Render every (latent, view) pair with the dense oracle and write the manifest."""
    root = Path(out_dir)
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    opts = spec.render_options()
    train_cams = teacher_cameras(spec)
    holdout_cams = teacher_cameras(spec, holdout=True)
    latents = teacher_latents(spec)
    records: List[ViewRecord] = []
    for sample in tqdm(range(spec.samples), desc="teacher", disable=not progress):
        w = latents[sample]
        scene = teacher_scene(spec, w)
        views = [(cam, "train") for cam in train_cams] + [(cam, "holdout") for cam in holdout_cams]
        for view, (camera, split) in enumerate(views):
            path = images / f"s{sample:04d}_v{view:02d}.pfm"
            result = render_dense_oracle(camera, scene, opts)
            write_pfm(path, result.image)
            records.append(ViewRecord(image=path, camera=camera, w=w, sample=sample, view=view, split=split))
    dataset = MultiViewDataset(root, records)
    save_manifest(dataset)
    (root / TEACHER_NAME).write_text(json.dumps(asdict(spec), indent=2), encoding="utf-8")
    logger.info("Teacher dataset: %d samples, %d records at %s", spec.samples, len(records), root)
    return dataset


def load_teacher_spec(root: str | os.PathLike[str]) -> Optional[TeacherSpec]:
    path = Path(root) / TEACHER_NAME
    if not path.exists():
        return None
    raw = json.loads(path.read_text(encoding="utf-8"))
    raw["background"] = tuple(raw.get("background", (0.0, 0.0, 0.0)))
    return TeacherSpec(**raw)
