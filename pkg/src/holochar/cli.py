"""Command-line entry point.

    holochar <pose|texture|render|fit|train|infer|bench|serve|fixture> --config <path> ...

Exit codes: 0 ok, 2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import character, pipeline, texturing
from .containers import save_hctx, save_json, save_png
from .errors import NumericError, ValidationError

log = logging.getLogger("holochar")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="project config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the stage seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="holochar", description="character free-viewpoint rendering pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pose", help="pose one frame and write an OBJ")
    _add_common(p)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--no-fit", action="store_true", help="ignore fitted displacement sidecars")

    p = sub.add_parser("texture", help="stage 2: partial textures, masks, fused atlas")
    _add_common(p)
    p.add_argument("--frame", type=int, default=0)

    p = sub.add_parser("render", help="render a texture into a camera")
    _add_common(p)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--camera", default=None, help="camera id (default: first input view)")
    p.add_argument("--texture", default=None, help="HCTX texture to render (default: stage-2 baseline)")

    p = sub.add_parser("fit", help="optimize displacements against target surfaces")
    _add_common(p)
    p.add_argument("--frame", type=int, default=None, help="single frame (default: all)")
    p.add_argument("--frames", default=None, help="range start:end (end exclusive)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="train the refinement networks")
    _add_common(p)
    p.add_argument("--stop-below", type=float, default=None, help="early-stop masked L1 threshold")
    p.add_argument("--max-steps", type=int, default=None)

    p = sub.add_parser("infer", help="produce final frames")
    _add_common(p)
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--frames", default=None)
    p.add_argument("--camera", default=None)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("bench", help="per-stage timing table")
    _add_common(p)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--json-out", default=None)

    p = sub.add_parser("serve", help="run the interactive render service")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8099)

    p = sub.add_parser("fixture", help="generate a synthetic project")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["sphere", "cylinder"], default="cylinder")
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--texture-size", type=int, default=128)
    p.add_argument("--render-size", default="160x120")
    p.add_argument("--seed", type=int, default=0)
    return ap


def _frame_list(project: pipeline.Project, args) -> list[int]:
    if getattr(args, "frame", None) is not None:
        return [project.frame_checked(args.frame)]
    spec = getattr(args, "frames", None)
    if spec:
        try:
            start, end = (int(x) for x in spec.split(":"))
        except ValueError as exc:
            raise ValidationError(f"bad --frames range {spec!r}, want start:end") from exc
        return [project.frame_checked(f) for f in range(start, end)]
    return list(range(project.num_frames))


def _apply_seed(project: pipeline.Project, args) -> None:
    if getattr(args, "seed", None) is not None:
        project.config.fit.seed = args.seed
        project.config.train.seed = args.seed


def cmd_pose(args) -> int:
    project = pipeline.Project.open(args.config)
    _apply_seed(project, args)
    frame = project.frame_checked(args.frame)
    posed = project.posed(frame, use_fit=not args.no_fit)
    out = project.out_path("pose", f"f{frame:04d}.obj")
    from .geometry import save_obj

    save_obj(out, posed.vertices, posed.faces, posed.uv, posed.vertex_normals)
    print(f"pose frame {frame} -> {out}")
    return 0


def cmd_texture(args) -> int:
    project = pipeline.Project.open(args.config)
    _apply_seed(project, args)
    frame = project.frame_checked(args.frame)
    bundle = pipeline.texture_frame(project, frame)
    base = ("texture", f"f{frame:04d}")
    save_hctx(project.out_path(*base, "fused.hctx"), bundle.fused.colors)
    save_hctx(project.out_path(*base, "count.hctx"), bundle.fused.count.astype(np.float64))
    t_motion = np.concatenate(list(bundle.motion_normals), axis=2)
    save_hctx(project.out_path(*base, "motion_normals.hctx"), t_motion)
    for cid, part in bundle.partials.items():
        save_hctx(project.out_path(*base, f"partial_{cid}.hctx"), part.colors)
        save_png(project.out_path(*base, f"valid_{cid}.png"), part.valid.astype(np.float64))
        save_png(project.out_path(*base, f"vis_{cid}.png"), part.vis.astype(np.float64))
        save_png(project.out_path(*base, f"angle_{cid}.png"), part.angle.astype(np.float64))
    print(f"texture frame {frame}: {len(bundle.partials)} views -> {project.out_path(*base)}")
    return 0


def cmd_render(args) -> int:
    project = pipeline.Project.open(args.config)
    _apply_seed(project, args)
    frame = project.frame_checked(args.frame)
    camera_id = args.camera or project.config.input_views[0]
    if camera_id not in project.cameras:
        raise ValidationError(f"unknown camera {camera_id!r}; have {sorted(project.cameras)}")
    cam = project.cameras[camera_id]
    rw, rh = project.render_wh
    if args.texture:
        from .containers import load_hctx

        texture = load_hctx(args.texture)
        coverage = None
    else:
        bundle = pipeline.texture_frame(project, frame)
        texture = pipeline.baseline_texture(project, bundle)
        coverage = None  # completion already filled every texel
    fb = pipeline.render_frame(project, frame, cam, texture, coverage=coverage, width=rw, height=rh)
    if texture.shape[2] <= 3:
        out = project.out_path("render", f"f{frame:04d}_{camera_id}.png")
        save_png(out, fb.values)
    else:
        out = project.out_path("render", f"f{frame:04d}_{camera_id}.hctx")
        save_hctx(out, fb.values)
    print(f"render frame {frame} camera {camera_id} ({texture.shape[2]} channels) -> {out}")
    return 0


def _fit_one(config_path: str, frame: int) -> dict:
    project = pipeline.Project.open(config_path)
    return pipeline.fit_frame_to_target(project, frame)


def cmd_fit(args) -> int:
    project = pipeline.Project.open(args.config)
    _apply_seed(project, args)
    frames = _frame_list(project, args)
    reports = []
    if args.workers > 1 and len(frames) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            reports = list(pool.map(_fit_one, [args.config] * len(frames), frames))
    else:
        for f in frames:
            reports.append(pipeline.fit_frame_to_target(project, f))
    report = {"frames": reports, "units": "input world units"}
    save_json(project.out_path("fit_report.json"), report)
    for r in reports:
        print(
            "fit frame %d: loss %.6g -> %.6g, cd=%.6g hd=%.6g"
            % (r["frame"], r["initial_loss"], r["final_loss"], r["cd"], r["hd"])
        )
    return 0


def cmd_train(args) -> int:
    project = pipeline.Project.open(args.config)
    _apply_seed(project, args)
    curve = pipeline.train_refinement(project, stop_below=args.stop_below, max_steps=args.max_steps)
    last = curve[-1]
    print(
        "train: %d steps, loss %.6g, masked_l1 %.6g -> %s"
        % (len(curve), last["loss"], last["masked_l1"], project.out_path("weights.hcwt"))
    )
    return 0


def _infer_one(config_path: str, frame: int, camera_id: str) -> str:
    project = pipeline.Project.open(config_path)
    image, meta = pipeline.infer_frame(project, frame, camera_id)
    out = project.out_path("infer", f"f{frame:04d}_{camera_id}.png")
    save_png(out, image)
    return str(out)


def cmd_infer(args) -> int:
    project = pipeline.Project.open(args.config)
    _apply_seed(project, args)
    frames = _frame_list(project, args)
    camera_id = args.camera or project.config.input_views[0]
    nets = pipeline.load_trained_nets(project)
    if args.workers > 1 and len(frames) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            outs = list(pool.map(_infer_one, [args.config] * len(frames), frames, [camera_id] * len(frames)))
        for out in outs:
            print(f"infer -> {out}")
    else:
        for f in frames:
            image, meta = pipeline.infer_frame(project, f, camera_id, nets=nets)
            out = project.out_path("infer", f"f{f:04d}_{camera_id}.png")
            save_png(out, image)
            print(f"infer frame {f} ({meta['mode']}) -> {out}")
    return 0


def cmd_bench(args) -> int:
    project = pipeline.Project.open(args.config)
    result = pipeline.bench(project, frame=args.frame, repeats=args.repeats)
    header = f"{'stage':<10}{'median ms':>12}"
    print(header)
    for row in result["stages"]:
        print(f"{row['name']:<10}{row['median_ms']:>12.2f}")
    print(f"{'total':<10}{result['total_median_ms']:>12.2f}")
    if args.json_out:
        save_json(args.json_out, result)
    else:
        save_json(project.out_path("bench.json"), result)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.config)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_fixture(args) -> int:
    from .fixtures import generate_project

    try:
        rw, rh = (int(x) for x in args.render_size.split("x"))
    except ValueError as exc:
        raise ValidationError(f"bad --render-size {args.render_size!r}, want WxH") from exc
    generate_project(
        args.out,
        kind=args.kind,
        frames=args.frames,
        texture_size=args.texture_size,
        render_size=(rw, rh),
        seed=args.seed,
    )
    print(f"fixture project ({args.kind}) -> {args.out}")
    return 0


_COMMANDS = {
    "pose": cmd_pose,
    "texture": cmd_texture,
    "render": cmd_render,
    "fit": cmd_fit,
    "train": cmd_train,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "serve": cmd_serve,
    "fixture": cmd_fixture,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
