"""
Clamped-transmittance volume rendering.

Both renderers share one per-ray cell lattice: cell k spans
[near + k*step, min(near + (k+1)*step, far)]. A primitive contributes to a
cell over the part of the cell its box covers along the ray: the sample sits
at the midpoint of that covered part and its optical depth is charged for
the covered length only, so partial steps at box boundaries use the length
actually inside the box. The primitive renderer finds covering primitives
through the BVH; the dense oracle tests every primitive against every cell.
Per-cell depths and premultiplied colours are summed in ascending primitive
order in both, so the integrated images agree exactly.

Per ray, with x_k the optical depth of cell k (sum of density * covered length):

    S_k  = x_0 + ... + x_k
    T_k  = min(S_k, 1)
    dT_k = T_k - T_{k-1}
    pixel = sum_k e_k * dT_k + (1 - T_last) * background

where e_k is the emitted colour (premultiplied colour / density) of cell k.
Cells after saturation get dT = 0 and contribute nothing.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .accel import Bvh, HitArrays, RayHitList, build_bvh, intersect_rays
from .fade import FadeParams, fade, fade_with_grad  # noqa: F401  (re-exported)
from .geomcore import ArgumentError, Camera, ImageBuffer, Ray, camera_rays
from .scene import PrimitiveSet, gather_weighted, to_local, trilinear_setup

logger = logging.getLogger(__name__)


class TapeMismatchError(RuntimeError):
    """Raised when a render tape is replayed or differentiated against another scene."""


@dataclass(frozen=True)
class RenderOptions:
    step: float = 0.02
    near: float = 0.1
    far: float = 6.0
    max_samples: int = 1024
    background: Optional[Tuple[float, float, float]] = None  # None: use the scene's
    fade: FadeParams = FadeParams()
    record_tape: bool = False
    tile_size: int = 32
    threads: int = 1
    debug_checks: bool = False

    def __post_init__(self) -> None:
        if not (math.isfinite(self.step) and self.step > 0):
            raise ArgumentError(f"step must be > 0, got {self.step}")
        if self.max_samples < 1:
            raise ArgumentError(f"max_samples must be >= 1, got {self.max_samples}")
        if not (0.0 <= self.near < self.far):
            raise ArgumentError(f"need 0 <= near < far, got {self.near}, {self.far}")
        if self.tile_size < 1 or self.threads < 1:
            raise ArgumentError("tile_size and threads must be >= 1")

    def with_(self, **changes) -> "RenderOptions":
        return replace(self, **changes)


@dataclass(frozen=True)
class Lattice:
    mid: np.ndarray  # (n,) midpoint distances
    dt: np.ndarray  # (n,) effective cell lengths
    start: np.ndarray  # (n,)
    end: np.ndarray  # (n,)
    near: float
    step: float

    @property
    def n(self) -> int:
        return int(self.mid.shape[0])


def cell_lattice(near: float, far: float, step: float, max_samples: int) -> Lattice:
    n = max(1, min(int(math.ceil((far - near) / step - 1e-9)), int(max_samples)))
    k = np.arange(n, dtype=np.float64)
    a = near + k * step
    b = np.minimum(near + (k + 1.0) * step, far)
    return Lattice(mid=0.5 * (a + b), dt=b - a, start=a, end=b, near=float(near), step=float(step))


@dataclass
class SampleRows:
    """Samples of one tile, sorted by (ray, cell, primitive)."""

    ray: np.ndarray  # (K,) tile-local ray index
    cell: np.ndarray  # (K,)
    prim: np.ndarray  # (K,)
    point: np.ndarray  # (K, 3) world sample position
    local: np.ndarray  # (K, 3)
    direction: np.ndarray  # (K, 3) ray direction
    dt: np.ndarray  # (K,) covered length of the cell
    cover: np.ndarray  # (K,) dt / cell length
    enter_face: np.ndarray  # (K,) box face bounding the covered part from below, -1 for a cell edge
    exit_face: np.ndarray  # (K,) box face bounding it from above, -1 for a cell edge
    corner_idx: np.ndarray  # (K, 8) flat voxel index within the primitive's grid
    weights: np.ndarray  # (K, 8) trilinear weights
    fade: np.ndarray  # (K,)
    saturated: np.ndarray  # (K,) sample lies past the point where coverage reached 1

    def __len__(self) -> int:
        return int(self.ray.shape[0])

    def structure(self) -> np.ndarray:
        return np.stack([self.ray, self.cell, self.prim, self.enter_face, self.exit_face], axis=-1)


@dataclass
class TileTape:
    pixels: np.ndarray  # (R,) row-major pixel indices
    rows: SampleRows


@dataclass
class RenderTape:
    signature: Tuple[int, int, int]
    width: int
    height: int
    lattice: Lattice
    background: np.ndarray
    fade: FadeParams
    debug_checks: bool
    tiles: List[TileTape] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return sum(len(t.rows) for t in self.tiles)

    def check(self, scene: PrimitiveSet) -> None:
        if scene.signature() != self.signature:
            raise TapeMismatchError("render tape was recorded for a different scene")

    def replay(self, scene: PrimitiveSet) -> ImageBuffer:
        """Re-integrate the recorded samples; bitwise equal to the recorded render."""
        self.check(scene)
        out = np.zeros((self.height * self.width, 3))
        for tile in self.tiles:
            shaded = shade_tile(scene, tile, self.lattice, self.background, self.debug_checks)
            out[tile.pixels] = shaded.composite.color
        return ImageBuffer(out.reshape(self.height, self.width, 3))


@dataclass
class RenderResult:
    image: ImageBuffer
    coverage: np.ndarray  # (H, W)
    tape: Optional[RenderTape] = None
    samples: int = 0
    seconds: float = 0.0

    def rgba(self) -> np.ndarray:
        return np.concatenate([self.image.data, self.coverage[..., None]], axis=-1)


@dataclass
class Composite:
    alpha: np.ndarray  # (R, n) per-cell density, covered fraction weighted
    emitted: np.ndarray  # (R, n, 3)
    accum: np.ndarray  # (R, n) unclamped S
    trans: np.ndarray  # (R, n) clamped T
    delta: np.ndarray  # (R, n) dT
    color: np.ndarray  # (R, 3)
    coverage: np.ndarray  # (R,)


@dataclass
class ShadedTile:
    sigma: np.ndarray
    color: np.ndarray
    density: np.ndarray
    composite: Composite


# ===== Integration ===========================================================

def composite_cells(
    alpha_cell: np.ndarray,
    prem_cell: np.ndarray,
    dt: np.ndarray,
    background: np.ndarray,
    debug_checks: bool = False,
) -> Composite:
    x = alpha_cell * dt
    accum = np.cumsum(x, axis=1)
    trans = np.minimum(accum, 1.0)
    delta = np.diff(trans, axis=1, prepend=0.0)
    safe = np.where(alpha_cell > 0.0, alpha_cell, 1.0)
    emitted = np.where((alpha_cell > 0.0)[..., None], prem_cell / safe[..., None], 0.0)
    coverage = trans[:, -1]
    color = np.sum(emitted * delta[..., None], axis=1) + (1.0 - coverage)[:, None] * background
    if debug_checks:
        assert np.all(delta >= 0.0), "coverage decreased along a ray"
        assert np.all(trans <= 1.0), "coverage exceeded 1"
    return Composite(alpha_cell, emitted, accum, trans, delta, color, coverage)


def _accumulate_rows(rows: SampleRows, density: np.ndarray, color: np.ndarray, n_rays: int, n_cells: int):
    key = rows.ray * n_cells + rows.cell
    size = n_rays * n_cells
    covered = density * rows.cover
    alpha_cell = np.bincount(key, weights=covered, minlength=size).reshape(n_rays, n_cells)
    prem = covered[:, None] * color
    prem_cell = np.stack(
        [np.bincount(key, weights=prem[:, ch], minlength=size) for ch in range(3)], axis=-1
    ).reshape(n_rays, n_cells, 3)
    return alpha_cell, prem_cell


def shade_rows(scene: PrimitiveSet, rows: SampleRows) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(sigma, straight colour, faded density) of every sample row."""
    voxels = scene.resolution**3
    flat = rows.prim[:, None] * voxels + rows.corner_idx
    sigma = gather_weighted(scene.alpha.reshape(-1), flat, rows.weights)
    color = gather_weighted(scene.rgb.reshape(-1, 3), flat, rows.weights)
    return sigma, color, sigma * rows.fade


def shade_tile(
    scene: PrimitiveSet,
    tile: TileTape,
    lattice: Lattice,
    background: np.ndarray,
    debug_checks: bool = False,
) -> ShadedTile:
    sigma, color, density = shade_rows(scene, tile.rows)
    alpha_cell, prem_cell = _accumulate_rows(tile.rows, density, color, tile.pixels.shape[0], lattice.n)
    comp = composite_cells(alpha_cell, prem_cell, lattice.dt, background, debug_checks)
    return ShadedTile(sigma, color, density, comp)


@dataclass(frozen=True)
class Chords:
    """Box chords of (ray, primitive) pairs with the faces that bound them.

    Face codes are 2 * axis + side, side 1 for the +1 face of the local box.
    """

    t_enter: np.ndarray
    t_exit: np.ndarray
    enter_face: np.ndarray
    exit_face: np.ndarray


def box_chords(
    origins: np.ndarray, dirs: np.ndarray, position: np.ndarray, rotation: np.ndarray, scale: np.ndarray
) -> Chords:
    """Slab test in each primitive's local frame; empty chords have t_exit < t_enter."""
    o = to_local(origins, position, rotation, scale)
    d = to_local(dirs, np.zeros_like(position), rotation, scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-1.0 - o) * inv
        t2 = (1.0 - o) * inv
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    parallel = d == 0.0
    inside = np.abs(o) <= 1.0
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
    enter_axis = np.argmax(near, axis=-1)
    exit_axis = np.argmin(far, axis=-1)
    d_enter = np.take_along_axis(d, enter_axis[:, None], axis=-1)[:, 0]
    d_exit = np.take_along_axis(d, exit_axis[:, None], axis=-1)[:, 0]
    return Chords(
        t_enter=np.take_along_axis(near, enter_axis[:, None], axis=-1)[:, 0],
        t_exit=np.take_along_axis(far, exit_axis[:, None], axis=-1)[:, 0],
        enter_face=2 * enter_axis + (d_enter < 0.0),
        exit_face=2 * exit_axis + (d_exit > 0.0),
    )


def _candidate_rows(hits: HitArrays, lattice: Lattice) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ray, prim, cell) for every lattice cell near a hit interval, one cell of slack each side."""
    if len(hits) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    n = lattice.n
    lo = np.floor((hits.t_enter - lattice.near) / lattice.step).astype(np.int64) - 1
    hi = np.floor((hits.t_exit - lattice.near) / lattice.step).astype(np.int64) + 1
    lo = np.clip(lo, 0, n - 1)
    hi = np.clip(hi, -1, n - 1)
    counts = np.maximum(hi - lo + 1, 0)
    total = int(counts.sum())
    first = np.repeat(np.cumsum(counts) - counts, counts)
    cell = np.repeat(lo, counts) + (np.arange(total) - first)
    return np.repeat(hits.ray, counts), np.repeat(hits.prim, counts), cell


def _dense_candidate_rows(
    scene: PrimitiveSet, origins: np.ndarray, dirs: np.ndarray, lattice: Lattice
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ray, prim, cell) for every cell of every ray that any primitive's box overlaps, no BVH."""
    rays: List[np.ndarray] = []
    prims: List[np.ndarray] = []
    cells: List[np.ndarray] = []
    for k in range(len(scene)):
        chords = box_chords(origins, dirs, scene.positions[k], scene.rotations[k], scene.scales[k])
        overlap = (chords.t_enter[:, None] < lattice.end[None, :]) & (chords.t_exit[:, None] > lattice.start[None, :])
        ray, cell = np.nonzero(overlap)
        rays.append(ray)
        prims.append(np.full(ray.shape[0], k, dtype=np.int64))
        cells.append(cell)
    return np.concatenate(rays), np.concatenate(prims), np.concatenate(cells)


def _sample_rows(
    scene: PrimitiveSet,
    origins: np.ndarray,
    dirs: np.ndarray,
    ray: np.ndarray,
    prim: np.ndarray,
    cell: np.ndarray,
    lattice: Lattice,
    fade_params: FadeParams,
) -> SampleRows:
    pos, rot, scl = scene.positions[prim], scene.rotations[prim], scene.scales[prim]
    chords = box_chords(origins[ray], dirs[ray], pos, rot, scl)
    start, end = lattice.start[cell], lattice.end[cell]
    t_lo = np.maximum(start, chords.t_enter)
    t_hi = np.minimum(end, chords.t_exit)
    keep = t_hi > t_lo
    order = np.nonzero(keep)[0][np.lexsort((prim[keep], cell[keep], ray[keep]))]
    ray, prim, cell = ray[order], prim[order], cell[order]
    t_lo, t_hi = t_lo[order], t_hi[order]
    enter_face = np.where(chords.t_enter[order] > start[order], chords.enter_face[order], -1)
    exit_face = np.where(chords.t_exit[order] < end[order], chords.exit_face[order], -1)
    direction = dirs[ray]
    point = origins[ray] + (0.5 * (t_lo + t_hi))[:, None] * direction
    local = np.clip(to_local(point, pos[order], rot[order], scl[order]), -1.0, 1.0)
    dt = t_hi - t_lo
    idx, w = trilinear_setup(local, scene.resolution)
    return SampleRows(
        ray=ray,
        cell=cell,
        prim=prim,
        point=point,
        local=local,
        direction=direction,
        dt=dt,
        cover=dt / lattice.dt[cell],
        enter_face=enter_face.astype(np.int64),
        exit_face=exit_face.astype(np.int64),
        corner_idx=idx,
        weights=w,
        fade=fade(local, fade_params),
        saturated=np.zeros(ray.shape[0], dtype=bool),
    )


def _integrate_rows(
    scene: PrimitiveSet,
    rows: SampleRows,
    n_rays: int,
    lattice: Lattice,
    background: np.ndarray,
    debug_checks: bool,
) -> Composite:
    _, color, density = shade_rows(scene, rows)
    alpha_cell, prem_cell = _accumulate_rows(rows, density, color, n_rays, lattice.n)
    comp = composite_cells(alpha_cell, prem_cell, lattice.dt, background, debug_checks)
    before = comp.accum - alpha_cell * lattice.dt
    rows.saturated = before[rows.ray, rows.cell] >= 1.0
    return comp


def _march(
    scene: PrimitiveSet,
    origins: np.ndarray,
    dirs: np.ndarray,
    hits: HitArrays,
    lattice: Lattice,
    background: np.ndarray,
    opts: RenderOptions,
) -> Tuple[np.ndarray, np.ndarray, SampleRows]:
    ray, prim, cell = _candidate_rows(hits, lattice)
    rows = _sample_rows(scene, origins, dirs, ray, prim, cell, lattice, opts.fade)
    comp = _integrate_rows(scene, rows, origins.shape[0], lattice, background, opts.debug_checks)
    return comp.color, comp.coverage, rows


def _background(scene: PrimitiveSet, opts: RenderOptions) -> np.ndarray:
    if opts.background is None:
        return np.asarray(scene.background, dtype=np.float64)
    return np.asarray(opts.background, dtype=np.float64).reshape(3)


def integrate_ray(
    ray: Ray,
    hits: RayHitList,
    scene: PrimitiveSet,
    opts: RenderOptions,
) -> Tuple[np.ndarray, float, Optional[SampleRows]]:
    """Integrate one ray over its hit list on the lattice spanning [ray.t_min, ray.t_max]."""
    lattice = cell_lattice(ray.t_min, ray.t_max, opts.step, opts.max_samples)
    bg = _background(scene, opts)
    color, coverage, rows = _march(
        scene, ray.origin[None], ray.direction[None], HitArrays.from_list(hits), lattice, bg, opts
    )
    return color[0], float(coverage[0]), rows if opts.record_tape else None


# ===== Images ================================================================

def _tiles(camera: Camera, tile_size: int) -> List[np.ndarray]:
    tiles = []
    for y0 in range(0, camera.height, tile_size):
        for x0 in range(0, camera.width, tile_size):
            ys, xs = np.meshgrid(
                np.arange(y0, min(y0 + tile_size, camera.height)),
                np.arange(x0, min(x0 + tile_size, camera.width)),
                indexing="ij",
            )
            tiles.append(np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1))
    return tiles


def _run_tiles(fn, tiles: Sequence[np.ndarray], threads: int) -> list:
    if threads <= 1 or len(tiles) <= 1:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tiles))


def render(
    camera: Camera,
    scene: PrimitiveSet,
    bvh: Optional[Bvh] = None,
    opts: Optional[RenderOptions] = None,
) -> RenderResult:
    """Tile-parallel primitive renderer; the output does not depend on the thread count."""
    opts = opts or RenderOptions()
    bvh = bvh if bvh is not None else build_bvh(scene)
    lattice = cell_lattice(opts.near, opts.far, opts.step, opts.max_samples)
    bg = _background(scene, opts)
    started = time.perf_counter()

    def work(pixels: np.ndarray):
        origins, dirs = camera_rays(camera, pixels)
        hits = intersect_rays(origins, dirs, opts.near, opts.far, scene, bvh)
        color, coverage, rows = _march(scene, origins, dirs, hits, lattice, bg, opts)
        flat = pixels[:, 1] * camera.width + pixels[:, 0]
        return flat, color, coverage, rows

    results = _run_tiles(work, _tiles(camera, opts.tile_size), opts.threads)
    rgb = np.zeros((camera.height * camera.width, 3))
    cov = np.zeros(camera.height * camera.width)
    tape = None
    if opts.record_tape:
        tape = RenderTape(scene.signature(), camera.width, camera.height, lattice, bg, opts.fade, opts.debug_checks)
    samples = 0
    for flat, color, coverage, rows in results:
        rgb[flat] = color
        cov[flat] = coverage
        samples += len(rows)
        if tape is not None:
            tape.tiles.append(TileTape(pixels=flat, rows=rows))
    elapsed = time.perf_counter() - started
    logger.debug("render %dx%d: %d samples in %.3fs", camera.width, camera.height, samples, elapsed)
    return RenderResult(
        image=ImageBuffer(rgb.reshape(camera.height, camera.width, 3)),
        coverage=cov.reshape(camera.height, camera.width),
        tape=tape,
        samples=samples,
        seconds=elapsed,
    )


def render_dense_oracle(camera: Camera, scene: PrimitiveSet, opts: Optional[RenderOptions] = None) -> RenderResult:
    """Reference renderer: tests every primitive against every lattice cell of every ray, no BVH."""
    opts = opts or RenderOptions()
    lattice = cell_lattice(opts.near, opts.far, opts.step, opts.max_samples)
    bg = _background(scene, opts)
    started = time.perf_counter()

    def work(pixels: np.ndarray):
        origins, dirs = camera_rays(camera, pixels)
        ray, prim, cell = _dense_candidate_rows(scene, origins, dirs, lattice)
        rows = _sample_rows(scene, origins, dirs, ray, prim, cell, lattice, opts.fade)
        comp = _integrate_rows(scene, rows, origins.shape[0], lattice, bg, opts.debug_checks)
        flat = pixels[:, 1] * camera.width + pixels[:, 0]
        return flat, comp.color, comp.coverage

    results = _run_tiles(work, _tiles(camera, opts.tile_size), opts.threads)
    rgb = np.zeros((camera.height * camera.width, 3))
    cov = np.zeros(camera.height * camera.width)
    for flat, color, coverage in results:
        rgb[flat] = color
        cov[flat] = coverage
    elapsed = time.perf_counter() - started
    return RenderResult(
        image=ImageBuffer(rgb.reshape(camera.height, camera.width, 3)),
        coverage=cov.reshape(camera.height, camera.width),
        samples=camera.width * camera.height * lattice.n * len(scene),
        seconds=elapsed,
    )


# ===== Primitive overlay =====================================================

def palette(index: int | np.ndarray) -> np.ndarray:
    """Deterministic colour per primitive index; a bijection on 24-bit values."""
    k = np.asarray(index, dtype=np.int64) & 0xFFFFFF
    h = (k * 0x9E3779) & 0xFFFFFF
    h = h ^ (h >> 12)
    h = (h * 0x6A09E7) & 0xFFFFFF
    h = h ^ (h >> 11)
    rgb = np.stack([(h >> 16) & 0xFF, (h >> 8) & 0xFF, h & 0xFF], axis=-1)
    return rgb.astype(np.float64) / 255.0


def render_primitive_overlay(
    camera: Camera,
    scene: PrimitiveSet,
    bvh: Optional[Bvh] = None,
    opts: Optional[RenderOptions] = None,
) -> RenderResult:
    """Render every primitive in its palette colour, keeping the payload density."""
    m = scene.resolution
    colors = palette(np.arange(len(scene)))
    rgb = np.broadcast_to(colors[:, None, None, None, :], (len(scene), m, m, m, 3)).copy()
    overlay = scene.replace(rgb=rgb)
    return render(camera, overlay, bvh, opts)
