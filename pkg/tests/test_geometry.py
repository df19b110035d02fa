"""Mesh/skeleton/camera/ray primitives.

Derived expectations are computed by independent means inside each test:
hand-multiplied matrices for kinematics, explicit pinhole arithmetic for
projection, and a plain per-triangle python loop for ray casting.
"""

import numpy as np
import pytest

from holochar.errors import ValidationError
from holochar.geometry import (
    Camera,
    Joint,
    MotionFrame,
    Skeleton,
    TemplateMesh,
    compute_vertex_normals,
    euler_to_matrix,
    forward_kinematics,
    load_motion,
    load_obj,
    load_skeleton,
    project,
    ray_cast,
    ray_cast_batch,
    save_motion,
    save_obj,
    save_skeleton,
    unproject,
)

from conftest import make_cube_mesh


# -- forward kinematics -----------------------------------------------------


def test_fk_zero_pose_is_rest(chain_skeleton):
    r, t = forward_kinematics(chain_skeleton, np.zeros(4), np.zeros(3), np.zeros(3))
    assert np.allclose(r[0], np.eye(3))
    assert np.allclose(t[0], 0)
    assert np.allclose(r[1], np.eye(3))
    assert np.allclose(t[1], [0, 1, 0])


def test_fk_single_joint_quarter_turn_matches_hand_composition(chain_skeleton):
    # Root rotates 90 degrees about x. Hand-composed: Rx(90) maps the child's
    # rest offset (0,1,0) to (0,0,1); child orientation equals Rx(90).
    theta = np.array([np.pi / 2, 0.0, 0.0, 0.0])
    r, t = forward_kinematics(chain_skeleton, theta, np.zeros(3), np.zeros(3))
    rx90 = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    assert np.abs(r[0] - rx90).max() < 1e-12
    assert np.abs(t[1] - np.array([0.0, 0.0, 1.0])).max() < 1e-12
    # Child hinge adds its own rotation after the parent's.
    theta2 = np.array([np.pi / 2, 0.0, 0.0, np.pi / 2])
    r2, _ = forward_kinematics(chain_skeleton, theta2, np.zeros(3), np.zeros(3))
    assert np.abs(r2[1] - rx90 @ rx90).max() < 1e-12


def test_fk_inverse_local_roundtrip(chain_skeleton):
    rng = np.random.default_rng(3)
    theta = rng.uniform(-np.pi, np.pi, 4)
    r, t = forward_kinematics(chain_skeleton, theta, np.zeros(3), np.zeros(3))
    # Unwind the child's local transform; what remains must be the parent.
    local_r = euler_to_matrix(np.array([theta[3], 0.0, 0.0]))
    child_local_r = np.eye(3) @ local_r  # rest rotation is identity
    child_local_t = np.array([0.0, 1.0, 0.0])
    parent_r = r[1] @ child_local_r.T
    parent_t = t[1] - parent_r @ child_local_t
    assert np.abs(parent_r - r[0]).max() < 1e-9
    assert np.abs(parent_t - t[0]).max() < 1e-9


def test_fk_preserves_bone_lengths(chain_skeleton):
    rng = np.random.default_rng(11)
    rest_r, rest_t = forward_kinematics(chain_skeleton, np.zeros(4), np.zeros(3), np.zeros(3))
    rest_len = np.linalg.norm(rest_t[1] - rest_t[0])
    for _ in range(20):
        theta = rng.uniform(-np.pi, np.pi, 4)
        alpha = rng.uniform(-2, 2, 3)
        z = rng.uniform(-np.pi, np.pi, 3)
        _, t = forward_kinematics(chain_skeleton, theta, alpha, z)
        posed_len = np.linalg.norm(t[1] - t[0])
        assert abs(posed_len - rest_len) < 1e-9 * max(rest_len, 1.0)


def test_fk_wrong_theta_length(chain_skeleton):
    with pytest.raises(ValidationError, match="dofs"):
        forward_kinematics(chain_skeleton, np.zeros(3), np.zeros(3), np.zeros(3))


def test_fk_root_translation_and_rotation_order(chain_skeleton):
    # rot(z) . trans(alpha): the whole chain translates, then rotates about
    # the world origin.
    alpha = np.array([1.0, 0.0, 0.0])
    z = np.array([0.0, 0.0, np.pi / 2])  # 90 degrees about world z
    _, t = forward_kinematics(chain_skeleton, np.zeros(4), alpha, z)
    # Root: Rz(90) applied to alpha -> (0, 1, 0).
    assert np.abs(t[0] - np.array([0.0, 1.0, 0.0])).max() < 1e-12


# -- projection ---------------------------------------------------------------


def test_project_optical_axis(quad_camera):
    p = project(quad_camera, np.array([0.0, 0.0, -2.0]))  # 1 unit in front
    assert np.allclose(p.xy, [quad_camera.cx, quad_camera.cy])
    assert np.isclose(p.depth, 1.0)
    assert p.in_front


def test_project_matches_hand_computed_pinhole():
    # Identity extrinsics; fx=100, fy=120, cx=32, cy=24.
    cam = Camera(fx=100.0, fy=120.0, cx=32.0, cy=24.0, width=64, height=48,
                 rotation=np.eye(3), translation=np.zeros(3))
    pts = np.array([[0.1, -0.2, 2.0], [0.5, 0.25, 4.0], [-0.3, 0.1, 1.0]])
    expected = np.array(
        [
            [100 * 0.1 / 2.0 + 32, 120 * -0.2 / 2.0 + 24],
            [100 * 0.5 / 4.0 + 32, 120 * 0.25 / 4.0 + 24],
            [100 * -0.3 / 1.0 + 32, 120 * 0.1 / 1.0 + 24],
        ]
    )
    got = project(cam, pts)
    assert np.abs(got.xy - expected).max() < 1e-6
    assert np.allclose(got.depth, pts[:, 2])


def test_project_behind_camera_flagged(quad_camera):
    p = project(quad_camera, np.array([0.0, 0.0, -5.0]))  # behind (origin at z=-3 facing +z)
    assert not p.in_front


def test_project_unproject_roundtrip(quad_camera):
    rng = np.random.default_rng(5)
    pts = rng.uniform(-0.5, 0.5, (200, 3))
    pr = project(quad_camera, pts)
    back = unproject(quad_camera, pr.xy, pr.depth)
    pr2 = project(quad_camera, back)
    assert np.abs(pr2.xy - pr.xy).max() < 1e-6
    assert np.abs(back - pts).max() < 1e-9


def test_camera_origin_consistency(quad_camera):
    o = quad_camera.origin
    assert np.abs(quad_camera.rotation @ o + quad_camera.translation).max() < 1e-12
    assert np.abs(o - np.array([0.0, 0.0, -3.0])).max() < 1e-9


def test_camera_validation():
    with pytest.raises(ValidationError, match="focal"):
        Camera(fx=-1, fy=1, cx=0, cy=0, width=4, height=4, rotation=np.eye(3), translation=np.zeros(3))
    bad_rot = np.eye(3) * 1.5
    with pytest.raises(ValidationError, match="orthonormal"):
        Camera(fx=1, fy=1, cx=0, cy=0, width=4, height=4, rotation=bad_rot, translation=np.zeros(3))
    with pytest.raises(ValidationError, match="parallel"):
        Camera.look_at([0, 0, -1], [0, 0, 1], [0, 0, 1], 45, 64, 48)


# -- ray casting --------------------------------------------------------------


def _naive_ray_hits(mesh, origin, direction):
    """Independent oracle: plain python Moller-Trumbore over every face."""
    hits = []
    for fi, tri in enumerate(mesh.faces):
        a, b, c = (mesh.vertices[tri[i]] for i in range(3))
        e1, e2 = b - a, c - a
        p = np.cross(direction, e2)
        det = float(e1 @ p)
        if abs(det) < 1e-12:
            continue
        s = np.asarray(origin, dtype=np.float64) - a
        u = float(s @ p) / det
        q = np.cross(s, e1)
        v = float(direction @ q) / det
        t = float(e2 @ q) / det
        if u >= -1e-12 and v >= -1e-12 and u + v <= 1 + 1e-12 and t > 1e-12:
            hits.append((t, fi))
    return sorted(hits)


def test_ray_cast_cube_center():
    cube = make_cube_mesh()
    hit = ray_cast(cube, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    assert hit is not None
    assert abs(hit.distance - 0.5) < 1e-12


def test_ray_cast_miss_is_none():
    cube = make_cube_mesh()
    assert ray_cast(cube, [0.0, 0.0, 2.0], [0.0, 0.0, 1.0]) is None


def test_ray_cast_edge_graze_is_deterministic_hit():
    cube = make_cube_mesh()
    # Aim exactly at the shared diagonal edge of the +x face's two triangles.
    hit = ray_cast(cube, [2.0, 0.0, 0.0], [-1.0, 0.0, 0.0])
    assert hit is not None and abs(hit.distance - 1.5) < 1e-12
    # Boundary barycentric: on the shared edge one coordinate is ~0.
    assert np.min(hit.bary) < 1e-9


def test_ray_cast_against_naive_loop():
    cube = make_cube_mesh()
    rng = np.random.default_rng(17)
    origins = rng.uniform(-2, 2, (100, 3))
    dirs = rng.standard_normal((100, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    faces, dists, _ = ray_cast_batch(cube, origins, dirs)
    for i in range(100):
        expected = _naive_ray_hits(cube, origins[i], dirs[i])
        if not expected:
            assert faces[i] == -1
        else:
            t, fi = expected[0]
            assert abs(dists[i] - t) < 1e-9
            assert faces[i] == fi or abs(_naive_ray_hits(cube, origins[i], dirs[i])[0][0] - dists[i]) < 1e-12


def test_ray_cast_order_independent():
    cube = make_cube_mesh()
    rng = np.random.default_rng(23)
    perm = rng.permutation(len(cube.faces))
    shuffled = TemplateMesh(cube.vertices, cube.faces[perm], cube.uv[perm], cube.vertex_normals)
    origins = rng.uniform(-2, 2, (50, 3))
    dirs = rng.standard_normal((50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    f1, d1, _ = ray_cast_batch(cube, origins, dirs)
    f2, d2, _ = ray_cast_batch(shuffled, origins, dirs)
    assert np.array_equal(d1, d2)
    # Same physical face regardless of list order.
    for i in range(50):
        if f1[i] < 0:
            assert f2[i] < 0
        else:
            tri1 = sorted(cube.faces[f1[i]])
            tri2 = sorted(shuffled.faces[f2[i]])
            assert tri1 == tri2


def test_ray_cast_zero_direction_rejected():
    cube = make_cube_mesh()
    with pytest.raises(ValidationError, match="nonzero"):
        ray_cast(cube, [0, 0, 0], [0.0, 0.0, 0.0])


# -- mesh validation and IO ---------------------------------------------------


def test_degenerate_faces_rejected_with_listing():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]])
    faces = np.array([[0, 1, 2], [0, 1, 3]], dtype=np.int32)  # face 0 is collinear
    uv = np.zeros((2, 3, 2))
    uv[1] = [[0, 0], [1, 0], [0, 1]]
    with pytest.raises(ValidationError, match=r"degenerate.*\[0\]"):
        TemplateMesh(v, faces, uv, np.tile([0, 0, 1.0], (4, 1)))


def test_face_index_out_of_range():
    v = np.zeros((3, 3))
    v[1, 0] = 1
    v[2, 1] = 1
    with pytest.raises(ValidationError, match="out of range"):
        TemplateMesh(v, np.array([[0, 1, 5]]), np.zeros((1, 3, 2)), np.zeros((3, 3)))


def test_obj_roundtrip(tmp_path, quad_mesh):
    path = tmp_path / "quad.obj"
    save_obj(path, quad_mesh.vertices, quad_mesh.faces, quad_mesh.uv, quad_mesh.vertex_normals)
    loaded = load_obj(path)
    assert np.abs(loaded.vertices - quad_mesh.vertices).max() < 1e-7
    assert np.array_equal(loaded.faces, quad_mesh.faces)
    assert np.abs(loaded.uv - quad_mesh.uv).max() < 1e-7


def test_obj_requires_full_triples(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    with pytest.raises(ValidationError, match="v/vt/vn"):
        load_obj(path)


def test_skeleton_json_roundtrip(tmp_path, chain_skeleton):
    path = tmp_path / "skel.json"
    save_skeleton(path, chain_skeleton)
    loaded = load_skeleton(path)
    assert loaded.num_joints == 2
    assert loaded.joints[1].parent == 0
    assert loaded.joints[1].dof_axes == ("rx",)


def test_skeleton_requires_single_root():
    with pytest.raises(ValidationError, match="exactly one root"):
        Skeleton(
            (
                Joint("a", -1, np.array([1.0, 0, 0, 0]), np.zeros(3), ()),
                Joint("b", -1, np.array([1.0, 0, 0, 0]), np.zeros(3), ()),
            )
        )


def test_motion_roundtrip_and_parse_error(tmp_path, chain_skeleton):
    path = tmp_path / "motion.jsonl"
    frames = (
        MotionFrame(np.zeros(4), np.zeros(3), np.zeros(3)),
        MotionFrame(np.ones(4), np.array([1.0, 2, 3]), np.zeros(3)),
    )
    save_motion(path, frames)
    loaded = load_motion(path, expected_dofs=4)
    assert len(loaded) == 2
    assert np.allclose(loaded[1].alpha, [1, 2, 3])

    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"theta": [0,0,0,0], "alpha": [0,0,0], "z": [0,0,0]}\n{"theta": oops\n')
    with pytest.raises(ValidationError, match="bad.jsonl:2"):
        load_motion(bad)


def test_motion_nonfinite_rejected():
    with pytest.raises(ValidationError, match="finite"):
        MotionFrame(np.array([np.nan]), np.zeros(3), np.zeros(3))
