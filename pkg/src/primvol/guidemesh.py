"""
Guide mesh loading and primitive anchoring.

A guide mesh is a fixed UV-mapped triangle mesh. Primitives are laid out on
a g x g grid in UV space; each cell centre is looked up on the UV layout,
mapped to the 3D surface barycentrically, and given a tangent frame.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geomcore import ArgumentError

logger = logging.getLogger(__name__)

UV_AREA_EPS = 1e-12


class MeshError(RuntimeError):
    """Raised when a guide mesh is invalid or unusable."""


class MeshParseError(MeshError):
    def __init__(self, path: str | os.PathLike[str], line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class NoUVError(MeshError):
    """Raised when the mesh carries no texture coordinates."""


@dataclass(frozen=True)
class GuideMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) vertex indices
    uv: np.ndarray  # (T, 2) texture coordinates
    face_uv: np.ndarray  # (F, 3) texture-coordinate indices

    def __post_init__(self) -> None:
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        face_uv = np.asarray(self.face_uv, dtype=np.int64).reshape(-1, 3)
        if len(faces) == 0:
            raise MeshError("Mesh has no faces")
        if len(uv) == 0:
            raise NoUVError("Mesh has no texture coordinates")
        if face_uv.shape != faces.shape:
            raise NoUVError("Every face needs texture coordinates")
        if faces.min() < 0 or faces.max() >= len(vertices):
            raise MeshError("Face vertex index out of range")
        if face_uv.min() < 0 or face_uv.max() >= len(uv):
            raise MeshError("Face texture index out of range")
        if not np.all(np.isfinite(vertices)) or not np.all(np.isfinite(uv)):
            raise MeshError("Mesh contains non-finite values")
        areas = np.abs(_uv_signed_area(uv[face_uv]))
        degenerate = np.nonzero(areas <= UV_AREA_EPS)[0]
        if len(degenerate):
            raise MeshError(f"Degenerate UV triangle(s): faces {degenerate[:8].tolist()}")
        for name, value in (("vertices", vertices), ("faces", faces), ("uv", uv), ("face_uv", face_uv)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def num_faces(self) -> int:
        return int(self.faces.shape[0])

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


@dataclass(frozen=True)
class AnchorSet:
    positions: np.ndarray  # (N, 3) t_hat
    rotations: np.ndarray  # (N, 3, 3) R_hat, columns = tangent, bitangent, normal
    scale: np.ndarray  # (3,) shared s_hat
    grid_side: int
    inherited: np.ndarray  # (N,) bool, True when the cell had no UV coverage

    def __post_init__(self) -> None:
        n = self.grid_side * self.grid_side
        if self.positions.shape != (n, 3) or self.rotations.shape != (n, 3, 3):
            raise MeshError(f"AnchorSet count must be grid_side^2 = {n}")
        if not np.all(np.isfinite(self.positions)) or not np.all(np.isfinite(self.rotations)):
            raise MeshError("Anchors must be finite")
        if np.any(np.asarray(self.scale) <= 0):
            raise MeshError("Anchor base scale must be positive")
        for name in ("positions", "rotations", "scale", "inherited"):
            value = np.asarray(getattr(self, name)).copy()
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])


# ===== OBJ I/O ===============================================================

def load_mesh(path: str | os.PathLike[str]) -> GuideMesh:
    """Parse the OBJ subset: ``v``, ``vt`` and triangulated ``f a/b a/b a/b`` records."""
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(file_path)

    vertices: List[List[float]] = []
    texcoords: List[List[float]] = []
    faces: List[Tuple[int, int, int]] = []
    face_uv: List[Tuple[int, int, int]] = []
    face_lines: List[int] = []
    faces_without_uv: List[int] = []

    with file_path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            toks = line.split()
            if not toks or toks[0].startswith("#"):
                continue
            tag = toks[0]
            try:
                if tag == "v":
                    if len(toks) < 4:
                        raise MeshParseError(file_path, lineno, "vertex needs 3 coordinates")
                    vertices.append([float(t) for t in toks[1:4]])
                elif tag == "vt":
                    if len(toks) < 3:
                        raise MeshParseError(file_path, lineno, "texture coordinate needs 2 values")
                    texcoords.append([float(t) for t in toks[1:3]])
                elif tag == "f":
                    if len(toks) != 4:
                        raise MeshParseError(file_path, lineno, f"faces must be triangles, got {len(toks) - 1} corners")
                    vids = []
                    tids = []
                    for corner in toks[1:]:
                        parts = corner.split("/")
                        vids.append(_resolve_index(parts[0], len(vertices), file_path, lineno))
                        if len(parts) > 1 and parts[1]:
                            tids.append(_resolve_index(parts[1], len(texcoords), file_path, lineno))
                    faces.append(tuple(vids))
                    if len(tids) == 3:
                        face_uv.append(tuple(tids))
                    else:
                        faces_without_uv.append(lineno)
                    face_lines.append(lineno)
                # normals, groups, materials and everything else are ignored
            except ValueError as exc:
                raise MeshParseError(file_path, lineno, str(exc)) from exc

    if not texcoords or faces_without_uv:
        where = f" (first face without UV at line {faces_without_uv[0]})" if faces_without_uv else ""
        raise NoUVError(f"{file_path}: mesh has no-uv faces{where}")
    if not faces:
        raise MeshError(f"{file_path}: mesh has no faces")
    mesh = GuideMesh(
        vertices=np.asarray(vertices),
        faces=np.asarray(faces),
        uv=np.asarray(texcoords),
        face_uv=np.asarray(face_uv),
    )
    logger.debug("Loaded guide mesh %s: %d vertices, %d faces", file_path, len(vertices), len(faces))
    return mesh


def _resolve_index(token: str, count: int, path: Path, lineno: int) -> int:
    index = int(token)
    if index == 0:
        raise MeshParseError(path, lineno, "index 0 is invalid (OBJ indices are 1-based)")
    resolved = index - 1 if index > 0 else count + index
    if not 0 <= resolved < count:
        raise MeshParseError(path, lineno, f"index {index} refers to an undefined element")
    return resolved


def write_obj(mesh: GuideMesh, path: str | os.PathLike[str]) -> None:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with file_path.open("w", encoding="utf-8") as handle:
        for v in mesh.vertices:
            handle.write("v " + " ".join(repr(float(x)) for x in v) + "\n")
        for t in mesh.uv:
            handle.write("vt " + " ".join(repr(float(x)) for x in t) + "\n")
        for f, t in zip(mesh.faces, mesh.face_uv):
            handle.write("f " + " ".join(f"{a + 1}/{b + 1}" for a, b in zip(f, t)) + "\n")


def uv_sphere(radius: float = 1.0, segments: int = 16, rings: int = 12, polar_margin: float = 0.15) -> GuideMesh:
    """Latitude/longitude sphere whose UV layout covers the unit square.

    The polar caps (``polar_margin`` radians) are left open so no 3D triangle
    collapses to a point.
    """
    theta = np.linspace(polar_margin, math.pi - polar_margin, rings + 1)
    phi = np.linspace(0.0, 2.0 * math.pi, segments + 1)
    verts = []
    uvs = []
    for i, th in enumerate(theta):
        for j, ph in enumerate(phi):
            verts.append([radius * math.sin(th) * math.cos(ph), radius * math.cos(th), -radius * math.sin(th) * math.sin(ph)])
            uvs.append([j / segments, 1.0 - i / rings])
    faces = []
    row = segments + 1
    for i in range(rings):
        for j in range(segments):
            a = i * row + j
            b = a + 1
            c = a + row
            d = c + 1
            faces.append((a, c, b))
            faces.append((b, c, d))
    faces_arr = np.asarray(faces)
    return GuideMesh(vertices=np.asarray(verts), faces=faces_arr, uv=np.asarray(uvs), face_uv=faces_arr.copy())


# ===== Anchors ===============================================================

def _uv_signed_area(tri_uv: np.ndarray) -> np.ndarray:
    e1 = tri_uv[..., 1, :] - tri_uv[..., 0, :]
    e2 = tri_uv[..., 2, :] - tri_uv[..., 0, :]
    return 0.5 * (e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0])


def _barycentric(points: np.ndarray, tri_uv: np.ndarray) -> np.ndarray:
    """(P, F, 3) barycentric coordinates of each point in each UV triangle."""
    a = tri_uv[None, :, 0, :]
    v0 = tri_uv[None, :, 1, :] - a
    v1 = tri_uv[None, :, 2, :] - a
    v2 = points[:, None, :] - a
    denom = v0[..., 0] * v1[..., 1] - v1[..., 0] * v0[..., 1]
    b1 = (v2[..., 0] * v1[..., 1] - v1[..., 0] * v2[..., 1]) / denom
    b2 = (v0[..., 0] * v2[..., 1] - v2[..., 0] * v0[..., 1]) / denom
    return np.stack([1.0 - b1 - b2, b1, b2], axis=-1)


def _tangent_frames(tri_xyz: np.ndarray, tri_uv: np.ndarray) -> np.ndarray:
    """Orthonormal (tangent, bitangent, normal) frames, one per triangle, as rotation matrices."""
    e1 = tri_xyz[:, 1] - tri_xyz[:, 0]
    e2 = tri_xyz[:, 2] - tri_xyz[:, 0]
    d1 = tri_uv[:, 1] - tri_uv[:, 0]
    d2 = tri_uv[:, 2] - tri_uv[:, 0]
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    # dx/du from the UV parametrisation of the triangle
    tangent = (e1 * d2[:, 1:2] - e2 * d1[:, 1:2]) / det[:, None]
    normal = np.cross(e1, e2)
    nlen = np.linalg.norm(normal, axis=-1, keepdims=True)
    if np.any(nlen < 1e-300):
        raise MeshError("Mesh has a degenerate 3D triangle")
    normal = normal / nlen
    tangent = tangent - np.sum(tangent * normal, axis=-1, keepdims=True) * normal
    tlen = np.linalg.norm(tangent, axis=-1, keepdims=True)
    # fall back to any axis perpendicular to the normal
    fallback = np.cross(normal, np.where(np.abs(normal[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]]))
    tangent = np.where(tlen > 1e-12, tangent / np.maximum(tlen, 1e-300), fallback / np.linalg.norm(fallback, axis=-1, keepdims=True))
    bitangent = np.cross(normal, tangent)
    return np.stack([tangent, bitangent, normal], axis=-1)


def anchor_primitives(mesh: GuideMesh, grid_side: int, base_scale: Optional[Sequence[float] | float] = None) -> AnchorSet:
    if grid_side < 1:
        raise ArgumentError(f"grid_side must be >= 1, got {grid_side}")
    g = grid_side
    coords = (np.arange(g, dtype=np.float64) + 0.5) / g
    vv, uu = np.meshgrid(coords, coords, indexing="ij")
    cells = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1)  # index k = iv * g + iu

    tri_uv = mesh.uv[mesh.face_uv]
    tri_xyz = mesh.vertices[mesh.faces]
    frames = _tangent_frames(tri_xyz, tri_uv)

    n = g * g
    positions = np.zeros((n, 3))
    rotations = np.zeros((n, 3, 3))
    covered = np.zeros(n, dtype=bool)
    chunk = 256
    for start in range(0, n, chunk):
        pts = cells[start : start + chunk]
        bary = _barycentric(pts, tri_uv)
        inside = np.all(bary >= -1e-12, axis=-1)
        has = inside.any(axis=1)
        face = np.argmax(inside, axis=1)  # lowest covering face index
        rows = np.arange(len(pts))
        b = bary[rows, face]
        positions[start : start + chunk] = np.einsum("pk,pkd->pd", b, tri_xyz[face])
        rotations[start : start + chunk] = frames[face]
        covered[start : start + chunk] = has

    if not covered.any():
        raise MeshError("No UV grid cell is covered by the mesh UV layout")
    inherited = ~covered
    if inherited.any():
        src = np.nonzero(covered)[0]
        grid = np.stack(np.divmod(np.arange(n), g), axis=-1)
        for k in np.nonzero(inherited)[0]:
            d = np.sum((grid[src] - grid[k]) ** 2, axis=-1)
            nearest = src[int(np.argmin(d))]
            positions[k] = positions[nearest]
            rotations[k] = rotations[nearest]
        logger.warning("%d of %d UV cells have no coverage and inherit their nearest anchor", int(inherited.sum()), n)

    if base_scale is None:
        scale = np.full(3, mesh.bbox_diagonal() / (3.0 * g))
    else:
        scale = np.broadcast_to(np.asarray(base_scale, dtype=np.float64), (3,)).copy()
    return AnchorSet(positions=positions, rotations=rotations, scale=scale, grid_side=g, inherited=inherited)
