"""Software rasterization: baking, depth, warp, and channel-generic rendering.

Ray casting (itself verified against a naive per-triangle loop) serves as the
independent oracle for depth buffers and rendered geometry.
"""

import numpy as np
import pytest

from holochar.character import PosedMesh
from holochar.errors import ValidationError
from holochar.fixtures import make_ring_cameras, make_sphere_mesh
from holochar.geometry import Camera, TemplateMesh, project, ray_cast_batch, unproject
from holochar.raster import (
    bake_texel_geometry,
    bake_vertex_attribute,
    compute_warp,
    dilate_texture,
    rasterize_depth,
    rasterize_ids,
    render,
    render_gather,
    sample_bilinear,
)

from conftest import make_cube_mesh


# -- texel geometry baking -----------------------------------------------------


def test_bake_identity_quad_is_regular_lattice(quad_mesh):
    tg = bake_texel_geometry(quad_mesh, 16, 16)
    assert tg.coverage.all()
    us = (np.arange(16) + 0.5) / 16
    expected_x = -1.0 + 2.0 * us
    assert np.abs(tg.positions[:, :, 0] - expected_x[None, :]).max() < 1e-6
    assert np.abs(tg.positions[:, :, 1] - expected_x[:, None]).max() < 1e-6
    assert np.abs(tg.positions[:, :, 2] - 0.5).max() < 1e-12


def test_bake_outside_charts_zero(quad_mesh):
    # Shrink the chart into the lower-left quadrant.
    uv = quad_mesh.uv * 0.5
    half = TemplateMesh(quad_mesh.vertices, quad_mesh.faces, uv, quad_mesh.vertex_normals)
    tg = bake_texel_geometry(half, 16, 16)
    outside = ~tg.coverage
    assert outside.any()
    assert np.abs(tg.positions[outside]).max() == 0.0
    assert tg.face[outside].max() == -1


def test_bake_random_triangle_against_barycentric_solve():
    rng = np.random.default_rng(9)
    v = rng.uniform(-1, 1, (3, 3))
    uv = np.array([[[0.1, 0.15], [0.9, 0.2], [0.45, 0.85]]])
    mesh = TemplateMesh(v, np.array([[0, 1, 2]], dtype=np.int32), uv, np.tile([0, 0, 1.0], (3, 1)))
    tg = bake_texel_geometry(mesh, 64, 64)
    covered = np.argwhere(tg.coverage)
    pick = covered[rng.choice(len(covered), size=20, replace=False)]
    corners = uv[0] * 64.0
    for iy, ix in pick:
        p = np.array([ix + 0.5, iy + 0.5])
        # Independent barycentric solve: lam solves the 2x2 system.
        m = np.stack([corners[1] - corners[0], corners[2] - corners[0]], axis=1)
        ab = np.linalg.solve(m, p - corners[0])
        lam = np.array([1 - ab.sum(), ab[0], ab[1]])
        expected = lam @ v
        assert np.abs(tg.positions[iy, ix] - expected).max() < 1e-9


def test_bake_detects_overlapping_charts(quad_mesh):
    uv = quad_mesh.uv.copy()
    uv[1] = uv[0]  # second face sits exactly on the first chart
    bad = TemplateMesh(quad_mesh.vertices, quad_mesh.faces, uv, quad_mesh.vertex_normals)
    with pytest.raises(ValidationError, match=r"overlap.*\(0, 1\)"):
        bake_texel_geometry(bad, 16, 16)


def test_bake_shared_edges_claimed_once():
    # A grid of quads: every texel center must land in exactly one face or the
    # overlap detector would have fired; away from the pole fans the band is
    # gap-free.
    mesh = make_sphere_mesh(rows=12, cols=24)
    tg = bake_texel_geometry(mesh, 64, 64)
    assert tg.coverage[4:28].all()
    assert tg.coverage[:32].mean() > 0.9


def test_bake_normals_unit(quad_mesh):
    tg = bake_texel_geometry(quad_mesh, 8, 8)
    norms = np.linalg.norm(tg.normals[tg.coverage], axis=-1)
    assert np.abs(norms - 1.0).max() < 1e-4


def test_bake_vertex_attribute_matches_positions(quad_mesh):
    out, covered = bake_vertex_attribute(quad_mesh.faces, quad_mesh.uv, quad_mesh.vertices, 16, 16)
    tg = bake_texel_geometry(quad_mesh, 16, 16)
    assert np.array_equal(covered, tg.coverage)
    assert np.abs(out - tg.positions).max() < 1e-12


# -- depth rasterization ----------------------------------------------------------


def test_depth_fronto_parallel_plane(quad_camera):
    verts = np.array([[-3.0, -3.0, -1.0], [3.0, -3.0, -1.0], [3.0, 3.0, -1.0], [-3.0, 3.0, -1.0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    uv = np.array([[[0, 0], [1, 0], [1, 1]], [[0, 0], [1, 1], [0, 1]]], dtype=float)
    mesh = TemplateMesh(verts, faces, uv, np.tile([0, 0, -1.0], (4, 1)))
    db = rasterize_depth(mesh, quad_camera, 64, 48)
    assert np.isfinite(db.values).all()
    assert np.abs(db.values - 2.0).max() < 1e-6


def test_depth_occlusion_order(quad_camera):
    def quad_at(z):
        return np.array([[-2.0, -2.0, z], [2.0, -2.0, z], [2.0, 2.0, z], [-2.0, 2.0, z]])

    verts = np.concatenate([quad_at(-1.0), quad_at(0.0)])  # depths 2 and 3 from camera
    faces = np.array([[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]], dtype=np.int32)
    uv = np.tile(np.array([[[0, 0], [1, 0], [1, 1]], [[0, 0], [1, 1], [0, 1]]], dtype=float), (2, 1, 1))
    uv[2:] *= 0.5  # keep charts disjoint
    mesh = TemplateMesh(verts, faces, uv, np.tile([0, 0, -1.0], (8, 1)))
    db = rasterize_depth(mesh, quad_camera, 64, 48)
    covered = np.isfinite(db.values)
    assert np.abs(db.values[covered] - 2.0).max() < 1e-6


def test_depth_tie_goes_to_lower_face_index(quad_camera):
    verts = np.array([[-2.0, -2.0, -1.0], [2.0, -2.0, -1.0], [2.0, 2.0, -1.0], [-2.0, 2.0, -1.0]])
    faces = np.array([[0, 1, 2], [0, 1, 2]], dtype=np.int32)  # identical triangles
    uv = np.zeros((2, 3, 2))
    uv[0] = [[0, 0], [0.4, 0], [0.4, 0.4]]
    uv[1] = [[0.6, 0.6], [1, 0.6], [1, 1]]
    mesh = TemplateMesh(verts, faces, uv, np.tile([0, 0, -1.0], (4, 1)))
    face, _, _ = rasterize_ids(mesh, quad_camera, 64, 48)
    assert set(np.unique(face)) <= {-1, 0}


def test_depth_sphere_against_ray_cast_oracle():
    mesh = make_sphere_mesh(rows=24, cols=48)
    cam = make_ring_cameras(1, (0, 0, 0), distance=2.0, width=256, height_px=192)["cam0"]
    db = rasterize_depth(mesh, cam, 256, 192)
    covered = np.argwhere(np.isfinite(db.values))
    rng = np.random.default_rng(4)
    pick = covered[rng.choice(len(covered), size=500, replace=False)]
    xy = pick[:, ::-1] + 0.5  # pixel centers (x, y)
    origins = np.tile(cam.origin, (500, 1))
    dirs = unproject(cam, xy.astype(np.float64), np.ones(500)) - cam.origin
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    faces, dists, _ = ray_cast_batch(mesh, origins, dirs)
    assert (faces >= 0).all()
    hits = origins + dirs * dists[:, None]
    cam_depth = hits @ cam.rotation[2] + cam.translation[2]
    buf = db.values[pick[:, 0], pick[:, 1]]
    assert np.abs(buf - cam_depth).max() < 1e-4


def test_depth_never_farther_than_ray_hit():
    mesh = make_cube_mesh()
    cam = Camera.look_at([1.6, 1.2, -2.2], [0, 0, 0], [0, 1, 0], 45, 96, 72)
    db = rasterize_depth(mesh, cam, 96, 72)
    covered = np.argwhere(np.isfinite(db.values))
    xy = covered[:, ::-1] + 0.5
    dirs = unproject(cam, xy.astype(np.float64), np.ones(len(xy))) - cam.origin
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    faces, dists, _ = ray_cast_batch(mesh, np.tile(cam.origin, (len(xy), 1)), dirs)
    hit = faces >= 0
    hits = cam.origin + dirs[hit] * dists[hit][:, None]
    cam_depth = hits @ cam.rotation[2] + cam.translation[2]
    buf = db.values[covered[hit, 0], covered[hit, 1]]
    assert (buf <= cam_depth + 1e-4).all()


# -- warp ---------------------------------------------------------------------------


def test_warp_affine_on_identity_quad(quad_mesh, quad_camera):
    tg = bake_texel_geometry(quad_mesh, 16, 16)
    w = compute_warp(tg, quad_camera)
    assert w.in_frame.all()
    # The quad is fronto-parallel, so texel -> pixel is affine; check corners
    # against direct projection.
    for iy, ix in ((0, 0), (0, 15), (15, 0), (15, 15)):
        expected = project(quad_camera, tg.positions[iy, ix]).xy
        assert np.abs(w.xy[iy, ix] - expected).max() == 0.0


def test_warp_behind_camera_flagged(quad_mesh):
    cam = Camera.look_at([0.0, 0.0, 3.0], [0.0, 0.0, 6.0], [0.0, 1.0, 0.0], 60.0, 64, 48)
    tg = bake_texel_geometry(quad_mesh, 8, 8)
    w = compute_warp(tg, cam)
    assert not w.in_frame.any()


def test_warp_equals_project_for_random_texels():
    mesh = make_sphere_mesh(rows=16, cols=32)
    cam = make_ring_cameras(1, (0, 0, 0), distance=2.0, width=128, height_px=96)["cam0"]
    tg = bake_texel_geometry(mesh, 64, 64)
    w = compute_warp(tg, cam)
    sel = np.argwhere(w.in_frame)
    rng = np.random.default_rng(8)
    pick = sel[rng.choice(len(sel), size=min(1000, len(sel)), replace=False)]
    pr = project(cam, tg.positions[pick[:, 0], pick[:, 1]])
    assert np.array_equal(w.xy[pick[:, 0], pick[:, 1]], pr.xy)


# -- rendering -----------------------------------------------------------------------


def test_render_constant_texture(quad_mesh, quad_camera):
    tex = np.zeros((8, 8, 3))
    tex[:, :, 0] = 1.0
    fb = render(quad_mesh, quad_camera, tex)
    assert fb.coverage.any()
    assert np.abs(fb.values[fb.coverage] - np.array([1.0, 0, 0])).max() < 1e-12
    assert np.abs(fb.values[~fb.coverage]).max() == 0.0


def test_render_positions_match_ray_cast():
    mesh = make_sphere_mesh(rows=24, cols=48)
    cam = make_ring_cameras(1, (0, 0, 0), distance=2.0, width=192, height_px=144)["cam0"]
    tg = bake_texel_geometry(mesh, 256, 256)
    tex, _ = dilate_texture(tg.positions, tg.coverage, radius=2)
    fb = render(mesh, cam, tex)
    covered = np.argwhere(fb.coverage)
    rng = np.random.default_rng(12)
    pick = covered[rng.choice(len(covered), size=300, replace=False)]
    xy = pick[:, ::-1] + 0.5
    dirs = unproject(cam, xy.astype(np.float64), np.ones(len(pick))) - cam.origin
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    faces, dists, _ = ray_cast_batch(mesh, np.tile(cam.origin, (len(pick), 1)), dirs)
    ok = faces >= 0
    hits = cam.origin + dirs[ok] * dists[ok][:, None]
    got = fb.values[pick[ok, 0], pick[ok, 1]]
    err = np.linalg.norm(got - hits, axis=1)
    # Bilinear smoothing near silhouettes can deviate; look at the bulk.
    assert np.percentile(err, 95) < 1e-3 * mesh.bbox_diagonal() * 10
    assert np.median(err) < 1e-3


def test_render_75_channels_first_three_match(quad_mesh, quad_camera):
    rng = np.random.default_rng(3)
    tex75 = rng.random((16, 16, 75))
    fb75 = render(quad_mesh, quad_camera, tex75)
    fb3 = render(quad_mesh, quad_camera, tex75[:, :, :3])
    assert fb75.values.shape[2] == 75
    assert np.array_equal(fb75.values[:, :, :3], fb3.values)


def test_render_normals_unit_within_tolerance():
    mesh = make_sphere_mesh(rows=24, cols=48)
    cam = make_ring_cameras(1, (0, 0, 0), distance=2.0, width=128, height_px=96)["cam0"]
    tg = bake_texel_geometry(mesh, 128, 128)
    tex, _ = dilate_texture(tg.normals, tg.coverage, radius=2)
    fb = render(mesh, cam, tex)
    norms = np.linalg.norm(fb.values[fb.coverage], axis=-1)
    assert np.abs(norms - 1.0).max() < 1e-2


def test_render_determinism(quad_mesh, quad_camera):
    rng = np.random.default_rng(0)
    tex = rng.random((32, 32, 3))
    a = render(quad_mesh, quad_camera, tex)
    b = render(quad_mesh, quad_camera, tex)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.coverage, b.coverage)


def test_render_gather_agrees_with_render(quad_mesh, quad_camera):
    rng = np.random.default_rng(1)
    tex = rng.random((16, 16, 5))
    fb = render(quad_mesh, quad_camera, tex)
    mat, coverage = render_gather(quad_mesh, quad_camera, 16, 16)
    flat = (mat @ tex.reshape(-1, 5)).reshape(fb.values.shape)
    assert np.array_equal(coverage, fb.coverage)
    assert np.abs(flat - fb.values).max() < 1e-12


def test_sample_bilinear_clamp_and_exactness():
    tex = np.arange(12, dtype=np.float64).reshape(3, 4)
    # At a texel center the fetch is exact.
    assert sample_bilinear(tex, np.array([1.5, 0.5])) == tex[0, 1]
    # Halfway between two centers: the mean.
    assert sample_bilinear(tex, np.array([2.0, 0.5])) == 0.5 * (tex[0, 1] + tex[0, 2])
    # Far outside: clamps to the corner.
    assert sample_bilinear(tex, np.array([-5.0, -5.0])) == tex[0, 0]


def test_dilate_texture_preserves_valid_and_fills_ring():
    tex = np.zeros((8, 8, 1))
    valid = np.zeros((8, 8), dtype=bool)
    tex[3:5, 3:5] = 7.0
    valid[3:5, 3:5] = True
    out, grown = dilate_texture(tex, valid, radius=2)
    assert np.array_equal(out[valid], tex[valid])
    assert grown[1:7, 1:7].all()
    assert np.abs(out[2, 2] - 7.0).max() < 1e-12
