"""Synthetic fixtures: textured sphere, articulated two-bone cylinder, ring
cameras, and full on-disk projects with rendered ground-truth views.

Everything is seeded and deterministic; no external data is involved.  The
generated projects exercise the same file formats real captures would use.
"""

from __future__ import annotations

import numpy as np

from pathlib import Path

from . import character, geometry
from .config import ProjectConfig, FitSettings, TrainSettings, save_config
from .containers import save_hctx, save_png, save_point_cloud
from .geometry import Camera, MotionFrame, Joint, Skeleton, TemplateMesh
from .raster import bake_texel_geometry, dilate_texture, render


def make_sphere_mesh(rows: int = 24, cols: int = 48, radius: float = 0.5, center=(0.0, 0.0, 0.0)) -> TemplateMesh:
    """Lat-long sphere whose uv chart fills [0,1] x [0,0.5].

    The half-height band matches the 2:1 azimuth/latitude span, so texel
    density is roughly isotropic on the surface.  Normals are analytic.
    """
    center = np.asarray(center, dtype=np.float64)
    verts = []
    for i in range(1, rows):
        lat = np.pi * i / rows
        for j in range(cols):
            az = 2 * np.pi * j / cols
            verts.append(
                [
                    radius * np.sin(lat) * np.cos(az),
                    radius * np.cos(lat),
                    radius * np.sin(lat) * np.sin(az),
                ]
            )
    top = len(verts)
    verts.append([0.0, radius, 0.0])
    bottom = len(verts)
    verts.append([0.0, -radius, 0.0])
    verts = np.asarray(verts) + center

    def ring(i, j):
        return (i - 1) * cols + (j % cols)

    def uv(i, j):
        return [j / cols, 0.5 * i / rows]

    faces = []
    uvs = []
    for j in range(cols):
        faces.append([top, ring(1, j + 1), ring(1, j)])
        uvs.append([[(j + 0.5) / cols, 0.0], uv(1, j + 1), uv(1, j)])
        faces.append([bottom, ring(rows - 1, j), ring(rows - 1, j + 1)])
        uvs.append([[(j + 0.5) / cols, 0.5], uv(rows - 1, j), uv(rows - 1, j + 1)])
    for i in range(1, rows - 1):
        for j in range(cols):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, b, d])
            uvs.append([uv(i, j), uv(i, j + 1), uv(i + 1, j + 1)])
            faces.append([a, d, c])
            uvs.append([uv(i, j), uv(i + 1, j + 1), uv(i + 1, j)])
    normals = (verts - center) / radius
    return TemplateMesh(verts, np.asarray(faces, dtype=np.int32), np.asarray(uvs), normals)


def make_cylinder_mesh(segments: int = 24, stacks: int = 16, radius: float = 0.12, length: float = 1.0) -> TemplateMesh:
    """Open cylinder along +y from 0 to `length`; uv chart in [0,1] x [0.02,0.93]."""
    verts = []
    for i in range(stacks + 1):
        y = length * i / stacks
        for j in range(segments):
            az = 2 * np.pi * j / segments
            verts.append([radius * np.cos(az), y, radius * np.sin(az)])
    verts = np.asarray(verts)

    def vid(i, j):
        return i * segments + (j % segments)

    v0, v1 = 0.02, 0.93

    def uv(i, j):
        return [j / segments, v0 + (v1 - v0) * i / stacks]

    faces = []
    uvs = []
    for i in range(stacks):
        for j in range(segments):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            faces.append([a, d, b])
            uvs.append([uv(i, j), uv(i + 1, j + 1), uv(i, j + 1)])
            faces.append([a, c, d])
            uvs.append([uv(i, j), uv(i + 1, j), uv(i + 1, j + 1)])
    normals = verts.copy()
    normals[:, 1] = 0.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return TemplateMesh(verts, np.asarray(faces, dtype=np.int32), np.asarray(uvs), normals)


def make_single_joint_skeleton() -> Skeleton:
    return Skeleton((Joint("root", -1, np.array([1.0, 0, 0, 0]), np.zeros(3), ("rx", "ry", "rz")),))


def make_two_bone_skeleton(length: float = 1.0) -> Skeleton:
    return Skeleton(
        (
            Joint("root", -1, np.array([1.0, 0, 0, 0]), np.zeros(3), ("rx", "ry", "rz")),
            Joint("elbow", 0, np.array([1.0, 0, 0, 0]), np.array([0.0, length / 2, 0.0]), ("rx",)),
        )
    )


def make_cylinder_skinning(mesh: TemplateMesh, length: float = 1.0, blend: float = 0.1) -> character.SkinningWeights:
    """Root below the elbow, elbow above, linear blend across a band."""
    y = mesh.vertices[:, 1]
    w_elbow = np.clip((y - (length / 2 - blend)) / (2 * blend), 0.0, 1.0)
    idx = np.tile(np.array([0, 1], dtype=np.int32), (mesh.num_vertices, 1))
    w = np.stack([1.0 - w_elbow, w_elbow], axis=1)
    only_root = w[:, 1] == 0.0
    idx[only_root, 1] = -1
    only_elbow = w[:, 0] == 0.0
    idx[only_elbow, 0] = -1
    return character.SkinningWeights(idx, w)


def make_sphere_skinning(mesh: TemplateMesh) -> character.SkinningWeights:
    return character.uniform_skinning_from_segments(np.zeros(mesh.num_vertices, dtype=np.int32))


def make_ring_cameras(
    count: int = 4,
    target=(0.0, 0.0, 0.0),
    distance: float = 2.2,
    height: float = 0.35,
    fov_deg: float = 32.0,
    width: int = 512,
    height_px: int = 384,
    start_azimuth: float = 0.0,
) -> dict[str, Camera]:
    target = np.asarray(target, dtype=np.float64)
    cams = {}
    for i in range(count):
        az = start_azimuth + 2 * np.pi * i / count
        pos = target + np.array([distance * np.cos(az), height, distance * np.sin(az)])
        cams[f"cam{i}"] = Camera.look_at(pos, target, (0.0, 1.0, 0.0), fov_deg, width, height_px)
    return cams


def checkerboard_texture(size: int, block: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """RGB checkerboard with per-channel phase so blocks are visibly colored."""
    idx = np.arange(size) // block
    out = np.empty((size, size, 3))
    for c in range(3):
        grid = ((idx[:, None] + idx[None, :] + c) % 2).astype(np.float64)
        out[:, :, c] = lo + (hi - lo) * grid
    return out


def smooth_texture(size: int) -> np.ndarray:
    """Smooth periodic color field in [0.15, 0.9]; easy overfit target."""
    u = np.linspace(0, 2 * np.pi, size, endpoint=False)
    uu, vv = np.meshgrid(u, u)
    r = 0.5 + 0.35 * np.sin(uu) * np.cos(2 * vv)
    g = 0.5 + 0.35 * np.sin(uu + 2.0) * np.sin(vv)
    b = 0.5 + 0.35 * np.cos(3 * uu) * np.cos(vv + 1.0)
    out = np.stack([r, g, b], axis=-1)
    return 0.15 + (0.9 - 0.15) * (out - out.min()) / (out.max() - out.min())


def cylinder_motion(skeleton: Skeleton, frames: int, max_bend: float = np.deg2rad(50)) -> tuple[MotionFrame, ...]:
    out = []
    for f in range(frames):
        t = f / max(frames - 1, 1)
        theta = np.zeros(skeleton.num_dofs)
        theta[3] = max_bend * t  # elbow rx
        out.append(MotionFrame(theta, np.zeros(3), np.zeros(3)))
    return tuple(out)


def static_motion(skeleton: Skeleton, frames: int) -> tuple[MotionFrame, ...]:
    return tuple(MotionFrame(np.zeros(skeleton.num_dofs), np.zeros(3), np.zeros(3)) for _ in range(frames))


def synthetic_bulge(mesh: TemplateMesh, amplitude: float = 0.03, seed: int = 0) -> np.ndarray:
    """Smooth radial displacement field used to fabricate fit targets."""
    v = mesh.vertices
    phase = np.random.default_rng(seed).uniform(0, 2 * np.pi, 3)
    bump = np.sin(4.0 * v[:, 0] + phase[0]) * np.sin(3.0 * v[:, 1] + phase[1]) * np.cos(2.0 * v[:, 2] + phase[2])
    return mesh.vertex_normals * (amplitude * bump)[:, None]


class FixtureKind:
    SPHERE = "sphere"
    CYLINDER = "cylinder"


def generate_project(
    root,
    kind: str = FixtureKind.CYLINDER,
    frames: int = 3,
    texture_size: int = 128,
    render_size: tuple[int, int] = (160, 120),
    n_cameras: int = 4,
    window: int = 3,
    train_frames: list | None = None,
    high_res_gt: bool = False,
    bulge_amplitude: float = 0.02,
    seed: int = 0,
) -> ProjectConfig:
    """Write a complete runnable project under `root` and return its config.

    The "captured" images are renders of the true textured surface (with a
    synthetic displacement field applied), so stage-2 reconstruction and the
    fit have a known answer.
    """
    root = Path(root)
    for sub in ("images", "masks", "targets", "out"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    if kind == FixtureKind.SPHERE:
        mesh = make_sphere_mesh()
        skeleton = make_single_joint_skeleton()
        skinning = make_sphere_skinning(mesh)
        motion = static_motion(skeleton, frames)
        target_center = (0.0, 0.0, 0.0)
        distance = 2.0
    elif kind == FixtureKind.CYLINDER:
        mesh = make_cylinder_mesh()
        skeleton = make_two_bone_skeleton()
        skinning = make_cylinder_skinning(mesh)
        motion = cylinder_motion(skeleton, frames)
        target_center = (0.0, 0.55, 0.0)
        distance = 1.9
    else:
        raise ValueError(f"unknown fixture kind {kind!r}")

    graph = character.build_embedded_graph(mesh)
    if kind == FixtureKind.CYLINDER:
        node_hand = graph.nodes[:, 1] > 0.85
        hand_mask = character.HandMask.from_nodes(graph, node_hand)
    else:
        hand_mask = character.HandMask.empty(graph)

    cams = make_ring_cameras(
        n_cameras, target_center, distance=distance, width=render_size[0], height_px=render_size[1]
    )
    true_texture = smooth_texture(texture_size)
    bulge = synthetic_bulge(mesh, amplitude=bulge_amplitude, seed=seed)

    from .geometry import save_cameras, save_motion, save_obj, save_skeleton

    save_obj(root / "template.obj", mesh.vertices, mesh.faces, mesh.uv, mesh.vertex_normals)
    save_skeleton(root / "skeleton.json", skeleton)
    save_motion(root / "motion.jsonl", motion)
    save_cameras(root / "cameras.json", cams)
    character.save_graph(root / "graph.json", graph)
    character.save_skinning(root / "skinning.json", skinning)
    character.save_hand_mask(root / "handmask.json", hand_mask)
    save_hctx(root / "true_texture.hctx", true_texture)

    train_frames = train_frames if train_frames is not None else [0]
    target_cam = sorted(cams)[0]

    for f, frame in enumerate(motion):
        posed_true = character.pose_frame(
            mesh, graph, skinning, skeleton, frame, displacements=bulge, hand_mask=hand_mask
        )
        texgeo = bake_texel_geometry(posed_true, texture_size, texture_size)
        tex_pad, _ = dilate_texture(true_texture, texgeo.coverage, radius=2)
        samples = _surface_point_samples(posed_true, 4000, seed=seed + f)
        save_point_cloud(root / "targets" / f"f{f:04d}.ply", samples)
        for cid, cam in cams.items():
            fb = render(posed_true, cam, tex_pad)
            save_png(root / "images" / f"f{f:04d}_{cid}.png", fb.values)
            save_png(root / "masks" / f"f{f:04d}_{cid}.png", fb.coverage.astype(np.float64))
        if high_res_gt and f in train_frames:
            cam = cams[target_cam]
            hi_cam = Camera(
                fx=cam.fx * 4, fy=cam.fy * 4, cx=cam.cx * 4, cy=cam.cy * 4,
                width=cam.width * 4, height=cam.height * 4,
                rotation=cam.rotation, translation=cam.translation,
            )
            fb = render(posed_true, hi_cam, tex_pad)
            (root / "images_high").mkdir(exist_ok=True)
            (root / "masks_high").mkdir(exist_ok=True)
            save_png(root / "images_high" / f"f{f:04d}_{target_cam}.png", fb.values)
            save_png(root / "masks_high" / f"f{f:04d}_{target_cam}.png", fb.coverage.astype(np.float64))

    # The depth test tolerance must cover the per-pixel depth footprint, which
    # grows as the render resolution shrinks; 0.5% of the bbox diagonal only
    # suits production-scale images.
    diag = mesh.bbox_diagonal()
    epsilon = max(0.005 * diag, 3.0 * diag / min(render_size))
    config = ProjectConfig(
        name=f"{kind}-fixture",
        hand_mask="handmask.json",
        texture_size=[texture_size, texture_size],
        render_size=[render_size[0], render_size[1]],
        epsilon=epsilon,
        window=window,
        input_views=sorted(cams),
        fit=FitSettings(seed=seed),
        train=TrainSettings(seed=seed, frames=list(train_frames), target_camera=target_cam),
    )
    save_config(root / "config.json", config)
    return config


def _surface_point_samples(mesh, count: int, seed: int) -> np.ndarray:
    """Cheap area-weighted random surface points (not blue-noise; fixture only)."""
    rng = np.random.default_rng(seed)
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    pick = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    w0, w1, w2 = 1.0 - r1, r1 * (1.0 - r2), r1 * r2
    return w0[:, None] * a[pick] + w1[:, None] * b[pick] + w2[:, None] * c[pick]
