"""
Reverse-mode gradients of a rendered image, derived by hand from the
discrete forward rules in ``render``, plus a finite-difference checker and a
``torch.autograd.Function`` that exposes the renderer to torch.

For one ray with upstream pixel gradient g and G_k = <g, e_k>:

    dL/dS_k  = (G_k - G_{k+1}) * [S_k < 1]        (G_{n} := <g, background>)
    dL/dx_k  = sum_{i >= k} dL/dS_i
    r_k      = dT_k / alpha_k     (dt_k before saturation when alpha_k = 0)
    dL/dP_k  = g * r_k
    dL/dalpha_k = dL/dx_k * dt_k - G_k * r_k

alpha_k sums density * covered fraction over the samples of cell k. A sample
cut short by a box face carries the face's motion too: its covered length and
its sample point (the midpoint of the covered part) both depend on where the
ray crosses that face.

The clamp contributes a zero subgradient once a ray is saturated.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .accel import build_bvh
from .fade import fade_with_grad
from .geomcore import ArgumentError, Camera, ImageBuffer, so3_exp
from .render import RenderOptions, RenderTape, TapeMismatchError, render, shade_tile
from .scene import PrimitiveSet, trilinear_weight_grads
from .schemas import validate_record

logger = logging.getLogger(__name__)

__all__ = [
    "SceneGrads",
    "GradCheckReport",
    "ClassResult",
    "TapeMismatchError",
    "backward",
    "grad_check",
    "render_differentiable",
]

PARAMETER_CLASSES = ("rgb", "alpha", "position", "rotation", "scale")
PAYLOAD_TOLERANCE = 1e-5
SPATIAL_TOLERANCE = 5e-3
PASS_FRACTION = 0.95
ERROR_FLOOR_FRACTION = 1e-3


@dataclass
class SceneGrads:
    rgb: np.ndarray  # (N, M, M, M, 3)
    alpha: np.ndarray  # (N, M, M, M)
    position: np.ndarray  # (N, 3)
    rotation: np.ndarray  # (N, 3) right-tangent axis-angle at the current rotation
    scale: np.ndarray  # (N, 3)
    rotation_matrix: np.ndarray  # (N, 3, 3) gradient w.r.t. the rotation matrix entries

    @classmethod
    def zeros(cls, n: int, m: int) -> "SceneGrads":
        return cls(
            rgb=np.zeros((n, m, m, m, 3)),
            alpha=np.zeros((n, m, m, m)),
            position=np.zeros((n, 3)),
            rotation=np.zeros((n, 3)),
            scale=np.zeros((n, 3)),
            rotation_matrix=np.zeros((n, 3, 3)),
        )

    def of_class(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, c))) for c in PARAMETER_CLASSES)


def _upstream_array(grad_image: ImageBuffer | np.ndarray, tape: RenderTape) -> np.ndarray:
    g = grad_image.data if isinstance(grad_image, ImageBuffer) else np.asarray(grad_image, dtype=np.float64)
    if g.shape != (tape.height, tape.width, 3):
        raise TapeMismatchError(f"upstream gradient shape {g.shape} does not match {tape.height}x{tape.width}x3")
    return g.reshape(-1, 3)


def backward(tape: RenderTape, scene: PrimitiveSet, grad_image: ImageBuffer | np.ndarray) -> SceneGrads:
    """Exact reverse of the recorded forward render."""
    tape.check(scene)
    g_all = _upstream_array(grad_image, tape)
    n, m = len(scene), scene.resolution
    voxels = m**3
    grads = SceneGrads.zeros(n, m)
    alpha_flat = scene.alpha.reshape(-1)
    rgb_flat = scene.rgb.reshape(-1, 3)
    lattice = tape.lattice

    # per-tile contributions are merged in tile order
    for tile in tape.tiles:
        rows = tile.rows
        if len(rows) == 0:
            continue
        shaded = shade_tile(scene, tile, lattice, tape.background)
        comp = shaded.composite
        g = g_all[tile.pixels]  # (R, 3)

        G = np.einsum("rkc,rc->rk", comp.emitted, g)
        g_bg = g @ tape.background
        G_next = np.concatenate([G[:, 1:], g_bg[:, None]], axis=1)
        dS = np.where(comp.accum < 1.0, G - G_next, 0.0)
        dx = np.cumsum(dS[:, ::-1], axis=1)[:, ::-1]

        before = comp.accum - comp.alpha * lattice.dt
        safe = np.where(comp.alpha > 0.0, comp.alpha, 1.0)
        ratio = np.where(comp.alpha > 0.0, comp.delta / safe, np.where(before < 1.0, lattice.dt, 0.0))
        d_alpha_cell = dx * lattice.dt - G * ratio

        rr, cc = rows.ray, rows.cell
        d_prem_row = g[rr] * ratio[rr, cc][:, None]  # (K, 3)
        # per unit of covered density
        q = d_alpha_cell[rr, cc] + np.sum(d_prem_row * shaded.color, axis=1)
        d_density = q * rows.cover
        d_color = d_prem_row * (shaded.density * rows.cover)[:, None]
        d_sigma = d_density * rows.fade
        d_fade = d_density * shaded.sigma

        flat = rows.prim[:, None] * voxels + rows.corner_idx  # (K, 8)
        keys = flat.reshape(-1)
        grads.alpha += np.bincount(
            keys, weights=(d_sigma[:, None] * rows.weights).reshape(-1), minlength=n * voxels
        ).reshape(n, m, m, m)
        for ch in range(3):
            grads.rgb[..., ch] += np.bincount(
                keys, weights=(d_color[:, ch, None] * rows.weights).reshape(-1), minlength=n * voxels
            ).reshape(n, m, m, m)

        # local-coordinate gradient
        dw = trilinear_weight_grads(rows.local, m)  # (K, 8, 3)
        grad_sigma = np.einsum("kc,kca->ka", alpha_flat[flat], dw)
        grad_color = np.einsum("kcj,kca->kja", rgb_flat[flat], dw)
        _, grad_fade = fade_with_grad(rows.local, tape.fade)
        g_local = d_sigma[:, None] * grad_sigma + d_fade[:, None] * grad_fade + np.einsum("kj,kja->ka", d_color, grad_color)

        s = scene.scales[rows.prim]
        rot = scene.rotations[rows.prim]
        p = scene.positions[rows.prim]
        g_u = g_local / s
        g_point = np.einsum("kij,kj->ki", rot, g_u)
        g_position = -g_point
        g_scale = -g_local * rows.local / s
        g_matrix = (rows.point - p)[:, :, None] * g_u[:, None, :]

        # samples bounded by a box face: covered length and sample point move with the face
        g_length = shaded.density * q / lattice.dt[cc]
        g_mid = np.einsum("ka,ka->k", g_point, rows.direction)
        for faces, sign in ((rows.enter_face, -1.0), (rows.exit_face, 1.0)):
            k = np.nonzero(faces >= 0)[0]
            if k.size == 0:
                continue
            axis = faces[k] // 2
            side = np.where(faces[k] % 2 == 1, 1.0, -1.0)
            r_j = rot[k, :, axis]  # (F, 3) face normal in world space
            cos = np.einsum("ka,ka->k", r_j, rows.direction[k])
            coef = (sign * g_length[k] + 0.5 * g_mid[k]) / cos
            x_face = rows.point[k] + (sign * 0.5 * rows.dt[k])[:, None] * rows.direction[k]
            g_position[k] += coef[:, None] * r_j
            g_scale[k, axis] += coef * side
            g_matrix[k, :, axis] -= coef[:, None] * (x_face - p[k])

        a = np.einsum("kji,kjl->kil", rot, g_matrix)  # R^T dL/dR
        per_row = {
            "position": g_position,
            "scale": g_scale,
            "rotation": np.stack([a[:, 2, 1] - a[:, 1, 2], a[:, 0, 2] - a[:, 2, 0], a[:, 1, 0] - a[:, 0, 1]], axis=-1),
        }
        for name, values in per_row.items():
            target = getattr(grads, name)
            for axis in range(3):
                target[:, axis] += np.bincount(rows.prim, weights=values[:, axis], minlength=n)
        for i in range(3):
            for j in range(3):
                grads.rotation_matrix[:, i, j] += np.bincount(rows.prim, weights=g_matrix[:, i, j], minlength=n)
    return grads


# ===== Finite-difference check ===============================================

@dataclass
class ClassResult:
    max_rel_error: float = 0.0
    checked: int = 0
    skipped: int = 0
    pass_fraction: float = 1.0
    tolerance: float = 0.0
    passed: bool = True
    failures: List[Dict[str, float]] = field(default_factory=list)


@dataclass
class GradCheckReport:
    h: float
    seed: int
    classes: Dict[str, ClassResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.classes.values())

    def to_dict(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "h": self.h,
            "seed": self.seed,
            "classes": {
                name: {k: v for k, v in asdict(c).items() if k != "failures"} for name, c in self.classes.items()
            },
        }

    def save(self, path: str | os.PathLike[str]) -> Path:
        payload = self.to_dict()
        validate_record("gradcheck_report", payload)
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        return out


def relative_error(a: float, f: float, floor: float = 1e-8) -> float:
    """|a - f| relative to the larger magnitude, never below ``floor``."""
    return abs(a - f) / max(abs(a), abs(f), floor)


def perturb(scene: PrimitiveSet, name: str, index: Tuple[int, ...], delta: float) -> PrimitiveSet:
    """Copy of ``scene`` with one parameter moved by ``delta`` (rotations along the right tangent)."""
    fields = {
        "positions": scene.positions.copy(),
        "rotations": scene.rotations.copy(),
        "scales": scene.scales.copy(),
        "rgb": scene.rgb.copy(),
        "alpha": scene.alpha.copy(),
    }
    if name == "rotation":
        k, axis = index
        omega = np.zeros(3)
        omega[axis] = delta
        fields["rotations"][k] = scene.rotations[k] @ so3_exp(omega)
    else:
        key = {"rgb": "rgb", "alpha": "alpha", "position": "positions", "scale": "scales"}[name]
        fields[key][index] += delta
    return PrimitiveSet(**fields, background=scene.background, validate=False)


def _touched_entries(tape: RenderTape, name: str, shape: Tuple[int, ...]) -> np.ndarray:
    """Flat indices into a gradient array of every entry some recorded sample depends on."""
    if name in ("rgb", "alpha"):
        voxels = int(np.prod(shape[1:4]))
        keys = [
            (tile.rows.prim[:, None] * voxels + tile.rows.corner_idx)[tile.rows.weights > 0.0] for tile in tape.tiles
        ]
        touched = np.unique(np.concatenate(keys)) if keys else np.zeros(0, dtype=np.int64)
    else:
        prims = [tile.rows.prim for tile in tape.tiles]
        touched = np.unique(np.concatenate(prims)) if prims else np.zeros(0, dtype=np.int64)
    per_item = int(np.prod(shape[4:])) if name in ("rgb", "alpha") else int(np.prod(shape[1:]))
    return (touched[:, None] * per_item + np.arange(per_item)).reshape(-1)


def _pick_entries(
    values: np.ndarray, touched: np.ndarray, rng: np.random.Generator, count: int
) -> List[Tuple[int, ...]]:
    pool = touched if touched.size else np.arange(values.size)
    chosen = rng.choice(pool, size=min(count, pool.size), replace=False)
    return [tuple(int(i) for i in np.unravel_index(c, values.shape)) for c in np.sort(chosen)]


def _affected_pixels(tape: RenderTape, prim: int) -> np.ndarray:
    hits = [tile.pixels[np.unique(tile.rows.ray[tile.rows.prim == prim])] for tile in tape.tiles]
    return np.concatenate(hits) if hits else np.zeros(0, dtype=np.int64)


def _structure(tape: RenderTape) -> List[np.ndarray]:
    return [np.concatenate([tile.rows.structure(), tile.rows.saturated[:, None]], axis=1) for tile in tape.tiles]


def _same_structure(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    scene: PrimitiveSet,
    camera: Camera,
    opts: Optional[RenderOptions] = None,
    probes: int = 8,
    h: float = 1e-4,
    seed: int = 0,
    classes: Tuple[str, ...] = PARAMETER_CLASSES,
) -> GradCheckReport:
    """Compare ``backward`` with central differences of L = <g, image> for a random g.

    Entries whose affected rays are within 2h of saturation, or whose sample set
    changes between the two perturbed renders, are skipped rather than failed.
    """
    if probes < 1:
        raise ArgumentError("probes must be >= 1")
    opts = (opts or RenderOptions()).with_(record_tape=True)
    rng = np.random.default_rng(seed)
    base = render(camera, scene, build_bvh(scene), opts)
    g = rng.normal(size=(camera.height, camera.width, 3))
    grads = backward(base.tape, scene, g)
    coverage = base.coverage.reshape(-1)
    base_structure = _structure(base.tape)

    def loss(s: PrimitiveSet) -> Tuple[float, List[np.ndarray]]:
        result = render(camera, s, build_bvh(s), opts)
        return float(np.sum(g * result.image.data)), _structure(result.tape)

    report = GradCheckReport(h=h, seed=seed, classes={})
    for name in classes:
        tolerance = PAYLOAD_TOLERANCE if name in ("rgb", "alpha") else SPATIAL_TOLERANCE
        result = ClassResult(tolerance=tolerance)
        values = grads.of_class(name)
        # entries far below the class scale are compared against that scale, not themselves
        floor = max(ERROR_FLOOR_FRACTION * float(np.abs(values).max()), 1e-8)
        touched = _touched_entries(base.tape, name, values.shape)
        passed = 0
        for index in _pick_entries(values, touched, rng, probes):
            prim = index[0]
            pixels = _affected_pixels(base.tape, prim)
            if pixels.size and np.any(coverage[pixels] >= 1.0 - 2.0 * h):
                result.skipped += 1
                continue
            plus, plus_structure = loss(perturb(scene, name, index, h))
            minus, minus_structure = loss(perturb(scene, name, index, -h))
            if not (_same_structure(plus_structure, base_structure) and _same_structure(minus_structure, base_structure)):
                result.skipped += 1
                continue
            numeric = (plus - minus) / (2.0 * h)
            analytic = float(values[index])
            err = relative_error(analytic, numeric, floor)
            result.checked += 1
            result.max_rel_error = max(result.max_rel_error, err)
            if err < tolerance:
                passed += 1
            else:
                result.failures.append({"index": list(index), "analytic": analytic, "numeric": numeric, "error": err})
        result.pass_fraction = passed / result.checked if result.checked else 1.0
        result.passed = result.pass_fraction >= PASS_FRACTION
        logger.info(
            "gradcheck %-8s checked=%d skipped=%d max_rel=%.3g pass=%s",
            name,
            result.checked,
            result.skipped,
            result.max_rel_error,
            result.passed,
        )
        report.classes[name] = result
    return report


# ===== torch bridge ==========================================================

class _RenderFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, positions, rotations, scales, rgb, alpha, camera, opts, background):
        scene = PrimitiveSet(
            positions=positions.detach().cpu().double().numpy(),
            rotations=rotations.detach().cpu().double().numpy(),
            scales=scales.detach().cpu().double().numpy(),
            rgb=rgb.detach().cpu().double().numpy(),
            alpha=alpha.detach().cpu().double().numpy(),
            background=background,
            validate=False,
        )
        result = render(camera, scene, build_bvh(scene), opts.with_(record_tape=True))
        ctx.scene = scene
        ctx.tape = result.tape
        ctx.dtype = positions.dtype
        return torch.tensor(result.image.data, dtype=positions.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        grads = backward(ctx.tape, ctx.scene, grad_output.detach().cpu().double().numpy())
        as_tensor = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(ctx.dtype)  # noqa: E731
        return (
            as_tensor(grads.position),
            as_tensor(grads.rotation_matrix),
            as_tensor(grads.scale),
            as_tensor(grads.rgb),
            as_tensor(grads.alpha),
            None,
            None,
            None,
        )


def render_differentiable(
    positions: torch.Tensor,
    rotations: torch.Tensor,
    scales: torch.Tensor,
    rgb: torch.Tensor,
    alpha: torch.Tensor,
    camera: Camera,
    opts: Optional[RenderOptions] = None,
    background=(0.0, 0.0, 0.0),
) -> torch.Tensor:
    """Render torch-held primitive tensors to an (H, W, 3) image tensor with gradients."""
    return _RenderFunction.apply(positions, rotations, scales, rgb, alpha, camera, opts or RenderOptions(), background)
