"""Stage orchestration: asset loading plus the pose / texture / render / fit /
train / infer / bench entry points shared by the CLI and the render service.

A `Project` owns immutable assets; heavyweight intermediates (posed meshes,
texel geometry) are cached per frame.  Every function here is deterministic
given the project config and seeds, and per-frame work is self-contained so
frame ranges can fan out across processes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import character, fitting, geometry, refine, texturing
from .config import ProjectConfig, load_config
from .containers import load_mask_png, load_png, save_hctx, save_png
from .errors import ValidationError
from .raster import (
    FrameBuffer,
    bake_texel_geometry,
    dilate_texture,
    rasterize_depth,
    render,
    render_gather,
)

log = logging.getLogger(__name__)


class Project:
    def __init__(self, config: ProjectConfig, base_dir):
        self.config = config
        self.base = Path(base_dir)
        self.template = geometry.load_obj(config.resolve("mesh", self.base))
        self.skeleton = geometry.load_skeleton(config.resolve("skeleton", self.base))
        self.graph = character.load_graph(config.resolve("graph", self.base))
        self.skinning = character.load_skinning(config.resolve("skinning", self.base))
        self.motion = geometry.load_motion(config.resolve("motion", self.base), self.skeleton.num_dofs)
        self.cameras = geometry.load_cameras(config.resolve("cameras", self.base))
        if config.hand_mask:
            self.hand_mask = character.load_hand_mask(config.resolve("hand_mask", self.base))
        else:
            self.hand_mask = character.HandMask.empty(self.graph)
        missing = [v for v in config.input_views if v not in self.cameras]
        if missing:
            raise ValidationError(f"input views missing from camera file: {missing}")
        self._posed: dict = {}
        self._texgeo: dict = {}

    @classmethod
    def open(cls, config_path) -> "Project":
        config_path = Path(config_path)
        return cls(load_config(config_path), config_path.parent)

    # -- resolved settings ------------------------------------------------

    @property
    def num_frames(self) -> int:
        return len(self.motion)

    @property
    def texture_wh(self) -> tuple[int, int]:
        return int(self.config.texture_size[0]), int(self.config.texture_size[1])

    @property
    def render_wh(self) -> tuple[int, int]:
        return int(self.config.render_size[0]), int(self.config.render_size[1])

    def epsilon(self) -> float:
        if self.config.epsilon is not None:
            return float(self.config.epsilon)
        return 0.005 * self.template.bbox_diagonal()

    def delta_rad(self) -> float:
        return float(np.deg2rad(self.config.delta_deg))

    def out_path(self, *parts) -> Path:
        p = self.config.resolve("out_dir", self.base).joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    # -- assets ------------------------------------------------------------

    def frame_checked(self, frame: int) -> int:
        if not (0 <= frame < self.num_frames):
            raise ValidationError(f"frame {frame} out of range [0, {self.num_frames})")
        return frame

    def image(self, frame: int, camera_id: str) -> np.ndarray:
        path = self.config.resolve("images_dir", self.base) / f"f{frame:04d}_{camera_id}.png"
        if not path.exists():
            raise ValidationError(f"missing view image {path}")
        return load_png(path)

    def mask(self, frame: int, camera_id: str) -> np.ndarray:
        path = self.config.resolve("masks_dir", self.base) / f"f{frame:04d}_{camera_id}.png"
        if not path.exists():
            raise ValidationError(f"missing matting mask {path}")
        return load_mask_png(path)

    def displacements(self, frame: int, use_fit: bool = True) -> np.ndarray:
        path = self.out_path("displacements", f"f{frame:04d}.json")
        if use_fit and path.exists():
            _, d = character.load_displacements(path)
            if d.shape != self.template.vertices.shape:
                raise ValidationError(f"{path}: displacement shape mismatch")
            return d
        return np.zeros_like(self.template.vertices)

    def target_surface(self, frame: int) -> fitting.SampledSurface:
        base = self.config.resolve("targets_dir", self.base)
        for ext in (".ply", ".xyz"):
            path = base / f"f{frame:04d}{ext}"
            if path.exists():
                from .containers import load_point_cloud

                return fitting.SampledSurface(load_point_cloud(path))
        raise ValidationError(f"no target surface for frame {frame} under {base}")

    # -- stage 1 -----------------------------------------------------------

    def posed(self, frame: int, use_fit: bool = True) -> character.PosedMesh:
        key = (frame, use_fit)
        if key not in self._posed:
            self._posed[key] = character.pose_frame(
                self.template,
                self.graph,
                self.skinning,
                self.skeleton,
                self.motion[self.frame_checked(frame)],
                displacements=self.displacements(frame, use_fit),
                hand_mask=self.hand_mask,
            )
        return self._posed[key]

    def window_frames(self, frame: int) -> list[int]:
        t = int(self.config.window)
        return [max(f, 0) for f in range(frame - t + 1, frame + 1)]

    def motion_normals(self, frame: int, use_fit: bool = True) -> np.ndarray:
        w, h = self.texture_wh
        meshes = [self.posed(f, use_fit) for f in self.window_frames(frame)]
        return character.bake_motion_normals(meshes, w, h)

    def texgeo(self, frame: int, use_fit: bool = True):
        key = (frame, use_fit)
        if key not in self._texgeo:
            w, h = self.texture_wh
            self._texgeo[key] = bake_texel_geometry(self.posed(frame, use_fit), w, h)
        return self._texgeo[key]

    def scene_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for f in range(self.num_frames):
            v = self.posed(f).vertices
            lo = np.minimum(lo, v.min(axis=0))
            hi = np.maximum(hi, v.max(axis=0))
        return lo, hi


@dataclass
class TextureBundle:
    texgeo: object
    partials: dict  # camera id -> PartialTexture
    fused: texturing.FusedTexture
    motion_normals: np.ndarray  # (T, H, W, 3)


def texture_frame(project: Project, frame: int, use_fit: bool = True) -> TextureBundle:
    """Stage 2 for one frame: per-view partials, masks, and the fused atlas."""
    posed = project.posed(frame, use_fit)
    texgeo = project.texgeo(frame, use_fit)
    eps = project.epsilon()
    delta = project.delta_rad()
    partials = {}
    for cid in project.config.input_views:
        cam = project.cameras[cid]
        depth = rasterize_depth(posed, cam, cam.width, cam.height)
        image = project.image(frame, cid)
        partials[cid] = texturing.make_partial_texture(image, cam, texgeo, depth, eps, delta)
    fused = texturing.fuse(partials)
    return TextureBundle(texgeo, partials, fused, project.motion_normals(frame, use_fit))


def baseline_texture(project: Project, bundle: TextureBundle) -> np.ndarray:
    """Hole-free render-ready color atlas from the fused texture alone."""
    return refine.complete_texture(bundle.fused.colors, bundle.fused.count)


def render_frame(project: Project, frame: int, camera: geometry.Camera, texture: np.ndarray,
                 coverage: np.ndarray | None = None, width: int | None = None, height: int | None = None) -> FrameBuffer:
    """Render a texture onto the posed frame; dilates chart borders first when
    a coverage mask is provided."""
    posed = project.posed(frame)
    if coverage is not None:
        texture, _ = dilate_texture(texture, coverage, radius=2)
    return render(posed, camera, texture, width, height)


# ---------------------------------------------------------------------------
# Fitting


def fit_frame_to_target(project: Project, frame: int) -> dict:
    cfgf = project.config.fit
    config = fitting.FitConfig(
        learning_rate=cfgf.learning_rate,
        iterations=cfgf.iterations,
        lambda_lap=cfgf.lambda_lap,
        chamfer_samples=cfgf.chamfer_samples,
        grid_cell=cfgf.grid_cell,
        optimize_graph=cfgf.optimize_graph,
        seed=cfgf.seed,
    )
    target = project.target_surface(frame)
    if len(target.points) > config.chamfer_samples:
        sub = fitting.poisson_disk_sample(target.points, count=config.chamfer_samples, seed=config.seed)
        target = sub
    result = fitting.fit_frame(
        project.template,
        project.graph,
        project.skinning,
        project.skeleton,
        project.motion[project.frame_checked(frame)],
        target,
        config,
        hand_mask=project.hand_mask,
    )
    path = project.out_path("displacements", f"f{frame:04d}.json")
    character.save_displacements(path, frame, result.displacements)
    posed = character.pose_frame(
        project.template, project.graph, project.skinning, project.skeleton,
        project.motion[frame], displacements=result.displacements, hand_mask=project.hand_mask,
    )
    report = fitting.chamfer_report(posed.vertices, target.points)
    return {
        "frame": frame,
        "initial_loss": result.initial_loss,
        "final_loss": result.best_loss,
        "best_iteration": result.best_iteration,
        "cd": report["cd"],
        "hd": report["hd"],
    }


# ---------------------------------------------------------------------------
# Refinement training and inference


def build_nets(project: Project, dtype=np.float32) -> tuple[refine.TexFeatNet, refine.SRNet]:
    t = project.config.train
    in_channels = 3 + 3 * int(project.config.window) + 3
    texfeat = refine.TexFeatNet(in_channels, base=t.texfeat_base, seed=t.seed, dtype=dtype)
    srnet = refine.SRNet(base=t.srnet_base, blocks=t.srnet_blocks, seed=t.seed + 1, dtype=dtype)
    return texfeat, srnet


@dataclass
class TrainSample:
    """Precomputed per-(frame, camera) tensors for the refinement loop."""

    tex_input: np.ndarray  # (H, W, Cin) float32
    gather: object  # csr (H'W', HW)
    gt_low: np.ndarray  # (H', W', 3)
    mask_low: np.ndarray  # (H', W')
    gt_high: np.ndarray  # (4H', 4W', 3)
    mask_high: np.ndarray  # (4H', 4W')
    rw: int
    rh: int


def prepare_train_sample(project: Project, frame: int, camera_id: str, dtype=np.float32) -> TrainSample:
    bundle = texture_frame(project, frame)
    cam = project.cameras[camera_id]
    t_cam = texturing.camera_encoding(bundle.texgeo, cam).directions
    t_motion = np.concatenate(list(bundle.motion_normals), axis=2)
    x = np.concatenate([bundle.fused.colors, t_motion, t_cam], axis=2).astype(dtype)
    w, h = project.texture_wh
    rw, rh = project.render_wh
    gather, _ = render_gather(project.posed(frame), cam, h, w, rw, rh)
    gt_low = project.image(frame, camera_id)
    mask_low = project.mask(frame, camera_id).astype(np.float64)
    hi_img = project.config.resolve("images_dir", project.base).parent / "images_high" / f"f{frame:04d}_{camera_id}.png"
    hi_mask = project.config.resolve("masks_dir", project.base).parent / "masks_high" / f"f{frame:04d}_{camera_id}.png"
    if not hi_img.exists():
        raise ValidationError(f"training needs a high-resolution ground truth at {hi_img}")
    gt_high = load_png(hi_img)
    mask_high = load_mask_png(hi_mask).astype(np.float64)
    return TrainSample(x, gather.astype(dtype), gt_low, mask_low, gt_high, mask_high, rw, rh)


def refinement_step(texfeat: refine.TexFeatNet, srnet: refine.SRNet, samples: list[TrainSample]) -> dict:
    """One full forward/backward over the batch; gradients accumulate in the nets."""
    texfeat.zero_grads()
    srnet.zero_grads()
    total = 0.0
    total_ren = 0.0
    total_sr = 0.0
    l1_acc = 0.0
    sr_l1_acc = 0.0
    for s in samples:
        t_dyn = texfeat.forward(s.tex_input)
        feat_flat = s.gather @ t_dyn.reshape(-1, refine.nets.DYN_CHANNELS)
        i_feat = feat_flat.reshape(s.rh, s.rw, refine.nets.DYN_CHANNELS)
        i_mesh = i_feat[:, :, :3].astype(np.float64)
        l_ren, g_ren = refine.loss_ren(i_mesh, s.gt_low, s.mask_low)
        i_sr = srnet.forward(i_feat)
        l_sr, g_sr = refine.loss_sr(i_sr.astype(np.float64), s.gt_high, s.mask_high)
        g_feat = srnet.backward(g_sr.astype(srnet.dtype))
        g_feat = g_feat.astype(np.float64)
        g_feat[:, :, :3] += g_ren
        g_tex = (s.gather.T @ g_feat.reshape(-1, refine.nets.DYN_CHANNELS).astype(texfeat.dtype)).reshape(t_dyn.shape)
        texfeat.backward(g_tex)
        total += l_ren + l_sr
        total_ren += l_ren
        total_sr += l_sr
        l1_acc += refine.masked_l1_mean(i_mesh, s.gt_low, s.mask_low)
        sr_l1_acc += refine.masked_l1_mean(i_sr, s.gt_high, s.mask_high)
    n = len(samples)
    return {
        "loss": total,
        "loss_ren": total_ren,
        "loss_sr": total_sr,
        "masked_l1": l1_acc / n,
        "sr_masked_l1": sr_l1_acc / n,
    }


def train_refinement(project: Project, stop_below: float | None = None, max_steps: int | None = None) -> list[dict]:
    """Joint TexFeatNet/SRNet training over the configured frames.

    `stop_below` ends training once the masked mean L1 of the mesh render
    drops under the threshold (the step budget still caps the loop).
    """
    t = project.config.train
    texfeat, srnet = build_nets(project)
    samples = [prepare_train_sample(project, f, t.target_camera) for f in t.frames]
    params = texfeat.parameters() + srnet.parameters()
    config = refine.TrainConfig(
        learning_rate=t.learning_rate,
        beta1=t.beta1,
        beta2=t.beta2,
        eps=t.eps,
        batch_size=t.batch_size,
        steps=t.steps if max_steps is None else min(t.steps, max_steps),
        seed=t.seed,
        checkpoint_interval=t.checkpoint_interval,
    )
    stop_fn = (lambda m: m["masked_l1"] < stop_below) if stop_below is not None else None
    curve = refine.train(
        lambda step: refinement_step(texfeat, srnet, samples),
        params,
        config,
        checkpoint_dir=project.out_path("checkpoints"),
        curve_path=project.out_path("loss_curve.csv"),
        stop_fn=stop_fn,
    )
    refine.save_weights(project.out_path("weights.hcwt"), params)
    return curve


def load_trained_nets(project: Project) -> tuple[refine.TexFeatNet, refine.SRNet] | None:
    path = None
    if project.config.weights:
        path = project.config.resolve("weights", project.base)
    else:
        candidate = project.out_path("weights.hcwt")
        if candidate.exists():
            path = candidate
    if path is None or not Path(path).exists():
        return None
    texfeat, srnet = build_nets(project)
    refine.load_weights_into(texfeat.parameters() + srnet.parameters(), path)
    return texfeat, srnet


def infer_frame(project: Project, frame: int, camera_id: str, nets=None) -> tuple[np.ndarray, dict]:
    """Produce the final image for one frame and camera.

    With trained weights: dynamic texture -> feature render -> super-resolved
    image at 4x.  Without: completed fused texture rendered directly.
    """
    if camera_id not in project.cameras:
        raise ValidationError(f"unknown camera {camera_id!r}; have {sorted(project.cameras)}")
    cam = project.cameras[camera_id]
    bundle = texture_frame(project, frame)
    if nets is None:
        nets = load_trained_nets(project)
    rw, rh = project.render_wh
    if nets is None:
        tex = baseline_texture(project, bundle)
        fb = render_frame(project, frame, cam, tex, coverage=bundle.texgeo.coverage, width=rw, height=rh)
        return fb.values, {"mode": "baseline", "width": rw, "height": rh}
    texfeat, srnet = nets
    t_cam = texturing.camera_encoding(bundle.texgeo, cam).directions
    t_dyn = refine.texfeat_forward(texfeat, bundle.fused.colors, bundle.motion_normals, t_cam)
    posed = project.posed(frame)
    fb = render(posed, cam, t_dyn.astype(np.float64), rw, rh)
    i_sr = refine.srnet_forward(srnet, fb.values.astype(srnet.dtype))
    return np.clip(i_sr.astype(np.float64), 0.0, 1.0), {"mode": "refined", "width": rw * 4, "height": rh * 4}


# ---------------------------------------------------------------------------
# Benchmark


def bench(project: Project, frame: int = 0, repeats: int = 5) -> dict:
    """Per-stage wall-clock medians for the core loop."""
    frame = project.frame_checked(frame)
    cams = [project.cameras[c] for c in project.config.input_views]
    images = [project.image(frame, c) for c in project.config.input_views]
    eps = project.epsilon()
    delta = project.delta_rad()
    w, h = project.texture_wh
    rw, rh = project.render_wh
    target_cam = cams[0]

    stages = {name: [] for name in ("pose", "bake", "partials", "fuse", "render")}
    for _ in range(repeats):
        t0 = time.perf_counter()
        posed = character.pose_frame(
            project.template, project.graph, project.skinning, project.skeleton,
            project.motion[frame], hand_mask=project.hand_mask,
        )
        t1 = time.perf_counter()
        texgeo = bake_texel_geometry(posed, w, h)
        t2 = time.perf_counter()
        partials = {}
        for cam, image, cid in zip(cams, images, project.config.input_views):
            depth = rasterize_depth(posed, cam, cam.width, cam.height)
            partials[cid] = texturing.make_partial_texture(image, cam, texgeo, depth, eps, delta)
        t3 = time.perf_counter()
        fused = texturing.fuse(partials)
        t4 = time.perf_counter()
        render(posed, target_cam, fused.colors, rw, rh)
        t5 = time.perf_counter()
        for name, dt in zip(stages, (t1 - t0, t2 - t1, t3 - t2, t4 - t3, t5 - t4)):
            stages[name].append(dt * 1e3)

    table = [
        {"name": name, "median_ms": float(np.median(runs)), "runs_ms": [float(x) for x in runs]}
        for name, runs in stages.items()
    ]
    return {
        "project": project.config.name,
        "frame": frame,
        "texture_size": [w, h],
        "render_size": [rw, rh],
        "repeats": repeats,
        "stages": table,
        "total_median_ms": float(sum(row["median_ms"] for row in table)),
    }


BENCH_SCHEMA = {
    "type": "object",
    "required": ["project", "frame", "texture_size", "render_size", "repeats", "stages", "total_median_ms"],
    "properties": {
        "project": {"type": "string"},
        "frame": {"type": "integer", "minimum": 0},
        "texture_size": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
        "render_size": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
        "repeats": {"type": "integer", "minimum": 1},
        "stages": {
            "type": "array",
            "minItems": 5,
            "maxItems": 5,
            "items": {
                "type": "object",
                "required": ["name", "median_ms", "runs_ms"],
                "properties": {
                    "name": {"enum": ["pose", "bake", "partials", "fuse", "render"]},
                    "median_ms": {"type": "number", "minimum": 0},
                    "runs_ms": {"type": "array", "items": {"type": "number"}},
                },
            },
        },
        "total_median_ms": {"type": "number", "minimum": 0},
    },
}
