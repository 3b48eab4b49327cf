from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import statistics
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import yaml

from .accel import build_bvh
from .autodiff import grad_check
from .config import ConfigError, RunConfig, Settings, load_settings
from .dataset import DatasetError, MultiViewDataset, TeacherSpec, load_manifest, make_teacher
from .generator import CheckpointError, PrimitiveGenerator, ShapeError, generate_scene, load_checkpoint
from .geomcore import ArgumentError, Camera, euler_xyz_degrees
from .guidemesh import AnchorSet, MeshError, anchor_primitives, load_mesh, uv_sphere
from .imagefile import ImageFileError, write_pfm, write_png
from .reporting import RunReport, StepRecord, render_html, save_report, write_step_log
from .render import RenderOptions, render, render_dense_oracle, render_primitive_overlay
from .scene import PrimitiveSet, SceneFormatError, demo_scene, load_scene, save_scene
from .schemas import SchemaError
from .training import (
    DivergenceError,
    distill,
    evaluate_generator,
    evaluate_psnr,
    fit_scene,
    interpolate,
    invert_image,
)

logger = logging.getLogger("primvol")

DEMO_SCENE = "demo"
DEFAULT_RESOLUTION = (64, 64)
SCENE_FILE = "scene.pvs"

INPUT_ERRORS = (
    ArgumentError,
    ShapeError,
    ConfigError,
    FileNotFoundError,
    SceneFormatError,
    MeshError,
    DatasetError,
    CheckpointError,
    SchemaError,
    ImageFileError,
)


def _resolution(raw: str) -> Tuple[int, int]:
    try:
        width, height = (int(v) for v in raw.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected WxH, got {raw!r}") from exc
    if width < 1 or height < 1:
        raise argparse.ArgumentTypeError(f"resolution must be positive, got {raw!r}")
    return width, height


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Path to a YAML config file")
    common.add_argument("--scene", help=f"Scene file, or '{DEMO_SCENE}' for the built-in demo scene")
    common.add_argument("--mesh", help="UV-mapped guide mesh (OBJ); a UV sphere is used when omitted")
    common.add_argument("--dataset", help="Dataset directory or manifest.jsonl")
    common.add_argument("--ckpt", help="Generator checkpoint")
    common.add_argument("--out", help="Output directory (default: <artifactsDir>/<command>)")
    common.add_argument("--res", type=_resolution, help="Image resolution as WxH")
    common.add_argument("--step", type=float, help="Ray-march step")
    common.add_argument("--nprim-grid", type=int, help="Side of the UV anchor grid (N = side^2)")
    common.add_argument("--seed", type=int, help="Random seed (default 42)")
    common.add_argument("--threads", type=int, help="Render worker threads (fallback: PRIMVOL_THREADS)")
    common.add_argument("--iters", type=int, help="Optimization steps")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="primvol", description="Volumetric primitive renderer and generator toolkit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("render", parents=[common], help="Render a scene to PNG and PFM")
    p.add_argument("--oracle", action="store_true", help="Also render the dense oracle and report max|diff|")

    p = sub.add_parser("bench", parents=[common], help="Time the primitive renderer against the dense oracle")
    p.add_argument("--frames", type=int, default=10, help="Timed frames per renderer")

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of the backward pass")
    p.add_argument("--probes", type=int, default=8, help="Probes per parameter class")
    p.add_argument("--fd-step", type=float, default=1e-4, help="Central-difference step")

    p = sub.add_parser("fit", parents=[common], help="Fit one scene to a multi-view dataset")
    p.add_argument("--sample", type=int, help="Dataset sample to fit (default: the first)")

    p = sub.add_parser("distill", parents=[common], help="Distill a generator from latent-paired views")
    p.add_argument("--resume", action="store_true", help="Resume from --ckpt if its training state exists")
    p.add_argument("--latent-mode", choices=("teacher", "autodecode"), help="Latent source")
    p.add_argument("--holdout-samples", type=int, default=0, help="Keep the last K samples out of training")

    p = sub.add_parser("invert", parents=[common], help="Invert a dataset view into a latent code")
    p.add_argument("--index", type=int, default=0, help="Dataset record to invert")

    p = sub.add_parser("inspect", parents=[common], help="Primitive overlay and per-primitive table")
    p.add_argument("--latent", type=float, nargs="+", help="Latent code for a generated scene (with --ckpt)")

    p = sub.add_parser("teacher", parents=[common], help="Render a procedural teacher dataset")
    p.add_argument("--samples", type=int, help="Number of latent samples")

    p = sub.add_parser("interpolate", parents=[common], help="Render a latent interpolation path")
    p.add_argument("--pair", type=int, nargs=2, metavar=("A", "B"), help="Dataset samples to interpolate between")
    p.add_argument("--steps", type=int, default=9, help="Frames along the path")
    return parser


def _configure_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("[primvol] %(levelname)s %(message)s"))
    root = logging.getLogger("primvol")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _run_config(args: argparse.Namespace, settings: Settings) -> RunConfig:
    if args.seed is not None:
        settings.seed = args.seed
    if args.nprim_grid is not None:
        settings.nprim_grid = args.nprim_grid
    as_path = lambda value: Path(value) if value is not None else None  # noqa: E731
    return RunConfig(
        command=args.command,
        settings=settings,
        threads=settings.resolved_threads(args.threads),
        scene=as_path(args.scene),
        mesh=as_path(args.mesh),
        dataset=as_path(args.dataset),
        checkpoint=as_path(args.ckpt),
        out=as_path(args.out),
        resolution=args.res,
        iters=args.iters,
    )


def _print_settings(run: RunConfig, step: Optional[float]) -> None:
    resolved = {
        "command": run.command,
        "threads": run.threads,
        "step": step if step is not None else run.settings.render.step,
        "resolution": list(run.resolution) if run.resolution else None,
        "settings": run.settings.to_dict(),
    }
    logger.info("Resolved configuration:\n%s", yaml.safe_dump(resolved, sort_keys=False).rstrip())


# ===== Shared inputs =========================================================

def _load_scene_arg(run: RunConfig) -> PrimitiveSet:
    run.require("scene")
    if str(run.scene) == DEMO_SCENE:
        return demo_scene(seed=run.settings.seed)
    return load_scene(run.scene)


def _camera(run: RunConfig) -> Camera:
    width, height = run.resolution or DEFAULT_RESOLUTION
    return Camera.look_at((0.0, 0.8, 2.6), (0.0, 0.0, 0.0), focal=1.2 * width, width=width, height=height)


def _anchors(run: RunConfig, n_prim: Optional[int] = None) -> AnchorSet:
    side = run.settings.nprim_grid
    if n_prim is not None:
        root = math.isqrt(n_prim)
        if root * root == n_prim:
            side = root
    mesh = load_mesh(run.mesh) if run.mesh is not None else uv_sphere()
    return anchor_primitives(mesh, side)


def _render_options(run: RunConfig, args: argparse.Namespace) -> RenderOptions:
    return run.settings.render_options(threads=run.threads, step=args.step)


def _finish_report(
    run: RunConfig,
    out: Path,
    started: datetime,
    summary: Dict[str, Any],
    steps: Optional[List[StepRecord]] = None,
    status: str = "passed",
    error: Optional[str] = None,
) -> Path:
    report = RunReport(
        command=run.command,
        meta=run.settings.to_dict(),
        status=status,
        started_at=started,
        finished_at=datetime.now(timezone.utc),
        summary=summary,
        steps=list(steps or []),
        error=error,
    )
    path = out / f"{run.command}_report.json"
    save_report(report, path)
    render_html(path, path.with_suffix(".html"))
    return path


def _say(message: str) -> None:
    print(f"[primvol] {message}")


# ===== Subcommands ===========================================================

def cmd_render(run: RunConfig, args: argparse.Namespace) -> int:
    scene = _load_scene_arg(run)
    camera = _camera(run)
    opts = _render_options(run, args)
    out = run.output_dir()
    result = render(camera, scene, build_bvh(scene), opts)
    write_pfm(out / "render.pfm", result.image)
    write_pfm(out / "coverage.pfm", result.coverage)
    write_png(out / "render.png", result.image)
    rays = camera.width * camera.height
    seconds = max(result.seconds, 1e-12)
    _say(f"render {camera.width}x{camera.height}: {result.seconds * 1e3:.2f} ms/frame, {rays / seconds:.0f} rays/sec")
    if args.oracle:
        oracle = render_dense_oracle(camera, scene, opts)
        write_pfm(out / "oracle.pfm", oracle.image)
        diff = float(np.max(np.abs(oracle.image.data - result.image.data)))
        _say(f"oracle {oracle.seconds * 1e3:.2f} ms/frame, max|diff| = {diff:.3e}")
    _say(f"wrote {out}")
    return 0


def cmd_bench(run: RunConfig, args: argparse.Namespace) -> int:
    if args.frames < 1:
        raise ArgumentError("--frames must be >= 1")
    started = datetime.now(timezone.utc)
    scene = _load_scene_arg(run)
    camera = _camera(run)
    opts = _render_options(run, args)
    bvh = build_bvh(scene)

    def timed(fn: Callable[[], Any]) -> List[float]:
        fn()
        times = []
        for _ in range(args.frames):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
        return times

    primitive_ms = timed(lambda: render(camera, scene, bvh, opts))
    oracle_ms = timed(lambda: render_dense_oracle(camera, scene, opts))
    sized = render(camera, scene, bvh, opts)
    lattice_cells = camera.width * camera.height * math.ceil((opts.far - opts.near) / opts.step - 1e-9)
    prim_median = statistics.median(primitive_ms)
    oracle_median = statistics.median(oracle_ms)
    summary = {
        "resolution": [camera.width, camera.height],
        "primitives": len(scene),
        "frames": args.frames,
        "threads": run.threads,
        "step": opts.step,
        "primitive_median_ms": prim_median,
        "oracle_median_ms": oracle_median,
        "speedup": oracle_median / prim_median if prim_median > 0 else None,
        "sample_occupancy": sized.samples / lattice_cells if lattice_cells else 0.0,
    }
    out = run.output_dir()
    _finish_report(run, out, started, summary)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_gradcheck(run: RunConfig, args: argparse.Namespace) -> int:
    started = datetime.now(timezone.utc)
    scene = _load_scene_arg(run)
    camera = _camera(run)
    report = grad_check(scene, camera, _render_options(run, args), probes=args.probes, h=args.fd_step, seed=run.settings.seed)
    out = run.output_dir()
    report.save(out / "gradcheck.json")
    for name, result in report.classes.items():
        _say(
            f"{name:<8} checked={result.checked} skipped={result.skipped} "
            f"pass={result.pass_fraction:.3f} max_rel={result.max_rel_error:.3g}"
        )
    _finish_report(run, out, started, report.to_dict(), status="passed" if report.passed else "failed")
    _say(f"gradcheck {'PASSED' if report.passed else 'FAILED'}")
    return 0 if report.passed else 1


def cmd_fit(run: RunConfig, args: argparse.Namespace) -> int:
    run.require("dataset")
    started = datetime.now(timezone.utc)
    dataset = load_manifest(run.dataset)
    sample = args.sample if args.sample is not None else dataset.samples[0]
    data = dataset.for_sample(sample)
    train = data.split("train") if data.has_split("train") else data
    init = load_scene(run.scene) if run.scene is not None and str(run.scene) != DEMO_SCENE else None
    anchors = None if init is not None else _anchors(run)
    opts = _render_options(run, args)
    out = run.output_dir()
    try:
        result = fit_scene(train, anchors, run.settings, init=init, opts=opts, iters=run.iters)
    except DivergenceError as exc:
        write_step_log(exc.log, out / "fit_log.jsonl")
        _finish_report(run, out, started, {"sample": sample}, exc.log, status="failed", error=str(exc))
        raise
    save_scene(result.scene, out / SCENE_FILE)
    write_step_log(result.log, out / "fit_log.jsonl")
    summary: Dict[str, Any] = {
        "sample": sample,
        "primitives": len(result.scene),
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "train_psnr": evaluate_psnr(result.scene, train, opts),
    }
    if data.has_split("holdout"):
        summary["holdout_psnr"] = evaluate_psnr(result.scene, data.split("holdout"), opts)
    _finish_report(run, out, started, summary, result.log)
    _say(json.dumps(summary))
    return 0


def cmd_distill(run: RunConfig, args: argparse.Namespace) -> int:
    run.require("dataset")
    started = datetime.now(timezone.utc)
    settings = run.settings
    dataset = load_manifest(run.dataset)
    latent_mode = args.latent_mode or settings.distill.latent_mode
    held: Optional[MultiViewDataset] = None
    train = dataset
    if args.holdout_samples > 0:
        samples = dataset.samples
        if args.holdout_samples >= len(samples):
            raise ArgumentError("--holdout-samples must leave at least one training sample")
        train = dataset.for_samples(samples[: -args.holdout_samples])
        held = dataset.for_samples(samples[-args.holdout_samples :])
    anchors = _anchors(run)
    latent_dim = dataset.latent_dim if latent_mode == "teacher" else settings.generator.latent_dim
    generator = PrimitiveGenerator(settings.generator_config(anchors.count, latent_dim), seed=settings.seed)
    out = run.output_dir()
    ckpt = run.checkpoint or out / "generator.ckpt"
    opts = _render_options(run, args)
    try:
        result = distill(
            train,
            anchors,
            generator,
            settings,
            opts=opts,
            iters=run.iters,
            checkpoint=ckpt,
            resume=args.resume,
            latent_mode=latent_mode,
        )
    except DivergenceError as exc:
        write_step_log(exc.log, out / "distill_log.jsonl")
        _finish_report(run, out, started, {"latent_mode": latent_mode}, exc.log, status="failed", error=str(exc))
        raise
    write_step_log(result.log, out / "distill_log.jsonl")
    summary: Dict[str, Any] = {"latent_mode": latent_mode, "steps": result.step, "checkpoint": str(ckpt)}
    if latent_mode == "teacher":
        if train.has_split("holdout"):
            summary["holdout_view_psnr"] = evaluate_generator(result.generator, anchors, train.split("holdout"), opts)
        if held is not None:
            summary["holdout_latent_psnr"] = evaluate_generator(result.generator, anchors, held, opts)
    else:
        fitted = train.split("train") if train.has_split("train") else train
        table = {s: result.latents[i] for i, s in enumerate(fitted.samples)}
        np.save(out / "latents.npy", result.latents)
        summary["train_psnr"] = evaluate_generator(result.generator, anchors, fitted, opts, latents=table)
    _finish_report(run, out, started, summary, result.log)
    _say(json.dumps(summary))
    return 0


def _load_generator(run: RunConfig) -> PrimitiveGenerator:
    run.require("checkpoint")
    generator, training = load_checkpoint(run.checkpoint)
    logger.debug("Loaded %s (training state %s)", run.checkpoint, training)
    return generator


def cmd_invert(run: RunConfig, args: argparse.Namespace) -> int:
    run.require("checkpoint", "dataset")
    started = datetime.now(timezone.utc)
    generator = _load_generator(run)
    dataset = load_manifest(run.dataset)
    if not 0 <= args.index < len(dataset):
        raise ArgumentError(f"--index must lie in [0, {len(dataset)})")
    record = dataset[args.index]
    anchors = _anchors(run, n_prim=generator.config.n_prim)
    opts = _render_options(run, args)
    latent_iters = joint_iters = None
    if run.iters is not None:
        latent_iters = run.iters
        joint_iters = run.iters
    result = invert_image(
        dataset.image(args.index),
        record.camera,
        generator,
        anchors,
        run.settings,
        opts=opts,
        latent_iters=latent_iters,
        joint_iters=joint_iters,
    )
    out = run.output_dir()
    scene = generate_scene(result.generator, anchors, result.w, record.camera.forward)
    image = render(record.camera, scene, None, opts).image
    write_pfm(out / "inverted.pfm", image)
    write_png(out / "inverted.png", image)
    summary = {"index": args.index, "loss": result.loss, "psnr": result.psnr, "phase": result.phase, "w": result.w.tolist()}
    if record.w is not None:
        summary["latent_error"] = float(np.linalg.norm(result.w - record.w))
    (out / "latent.json").write_text(json.dumps({"w": result.w.tolist()}), encoding="utf-8")
    _finish_report(run, out, started, summary, result.log)
    _say(f"invert: PSNR {result.psnr:.2f} dB ({result.phase} phase)")
    return 0


def _primitive_table(scene: PrimitiveSet) -> List[Dict[str, float]]:
    rows = []
    for k in range(len(scene)):
        t = scene.positions[k]
        e = euler_xyz_degrees(scene.rotations[k])
        s = scene.scales[k]
        rows.append(
            {
                "index": k,
                "tx": float(t[0]), "ty": float(t[1]), "tz": float(t[2]),
                "rx_deg": float(e[0]), "ry_deg": float(e[1]), "rz_deg": float(e[2]),
                "sx": float(s[0]), "sy": float(s[1]), "sz": float(s[2]),
            }
        )
    return rows


def cmd_inspect(run: RunConfig, args: argparse.Namespace) -> int:
    camera = _camera(run)
    if run.checkpoint is not None:
        generator = _load_generator(run)
        anchors = _anchors(run, n_prim=generator.config.n_prim)
        w = np.zeros(generator.config.latent_dim) if args.latent is None else np.asarray(args.latent, dtype=np.float64)
        scene = generate_scene(generator, anchors, w, camera.forward)
    else:
        scene = _load_scene_arg(run)
    opts = _render_options(run, args)
    overlay = render_primitive_overlay(camera, scene, build_bvh(scene), opts)
    out = run.output_dir()
    write_png(out / "overlay.png", overlay.image)
    write_pfm(out / "overlay.pfm", overlay.image)
    rows = _primitive_table(scene)
    with (out / "primitives.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    (out / "primitives.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
    _say(f"inspect: {len(rows)} primitives -> {out}")
    return 0


def cmd_teacher(run: RunConfig, args: argparse.Namespace) -> int:
    t = run.settings.teacher
    width, height = run.resolution or (t.width, t.height)
    spec = TeacherSpec(
        latent_dim=t.latent_dim,
        samples=args.samples if args.samples is not None else t.samples,
        views=t.views,
        blobs=t.blobs,
        width=width,
        height=height,
        payload_resolution=t.payload_resolution,
        camera_radius=t.camera_radius,
        holdout_views=t.holdout_views,
        holdout_radius_scale=t.holdout_radius_scale,
        step=args.step if args.step is not None else run.settings.render.step,
        seed=run.settings.seed,
    )
    out = run.output_dir()
    dataset = make_teacher(spec, out, progress=run.settings.progress)
    _say(f"teacher: {len(dataset)} views of {spec.samples} samples -> {out}")
    return 0


def cmd_interpolate(run: RunConfig, args: argparse.Namespace) -> int:
    run.require("checkpoint", "dataset")
    generator = _load_generator(run)
    dataset = load_manifest(run.dataset)
    samples = dataset.samples
    a, b = args.pair if args.pair else (samples[0], samples[min(1, len(samples) - 1)])
    camera = dataset.for_sample(a)[0].camera
    anchors = _anchors(run, n_prim=generator.config.n_prim)
    result = interpolate(
        generator, anchors, dataset.latent(a), dataset.latent(b), camera, _render_options(run, args), steps=args.steps
    )
    out = run.output_dir()
    for i, frame in enumerate(result.frames):
        write_png(out / f"frame_{i:02d}.png", frame)
    (out / "interpolation.json").write_text(json.dumps(dict(result.to_dict(), pair=[a, b]), indent=2), encoding="utf-8")
    verdict = "smooth" if result.smooth else ("spiky" if result.monotone else "not monotone")
    _say(f"interpolate {a} -> {b}: max step ratio {result.max_ratio:.2f} ({verdict})")
    return 0


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "render": cmd_render,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "fit": cmd_fit,
    "distill": cmd_distill,
    "invert": cmd_invert,
    "inspect": cmd_inspect,
    "teacher": cmd_teacher,
    "interpolate": cmd_interpolate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 0

    _configure_logging(args.verbose)
    try:
        settings = load_settings(args.config)
        run = _run_config(args, settings)
    except ConfigError as exc:
        print(f"Config error: {exc}", file=sys.stderr)
        return 2

    torch.set_num_threads(max(1, settings.torch_threads))
    torch.manual_seed(settings.seed)
    _print_settings(run, args.step)
    try:
        return COMMANDS[args.command](run, args)
    except INPUT_ERRORS as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.error("%s failed: %s", args.command, exc)
        logger.debug("Traceback", exc_info=True)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
