"""Embedded-graph deformation, dual-quaternion posing, hand freezing, and
motion-normal baking.

The two-node deformation oracle evaluates the blending formula in its plain
textbook form (rotate about node, add node and translation, weight, sum) so a
bug in the production refactoring cannot cancel out.
"""

import numpy as np
import pytest

from holochar.character import (
    EmbeddedGraph,
    HandMask,
    SkinningWeights,
    _blend_dual_quats,
    apply_hand_freeze,
    bake_motion_normals,
    build_embedded_graph,
    dqs_pose,
    dqs_vertex_transforms,
    embedded_deform,
    load_graph,
    save_graph,
)
from holochar.errors import NumericError, ValidationError
from holochar.fixtures import make_sphere_mesh
from holochar.geometry import (
    Joint,
    MotionFrame,
    Skeleton,
    TemplateMesh,
    euler_to_matrix,
    quat_multiply,
)


def _single_node_graph(mesh, rotation=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
    n = mesh.num_vertices
    return EmbeddedGraph(
        nodes=np.zeros((1, 3)),
        vertex_nodes=np.zeros((n, 1), dtype=np.int32),
        vertex_weights=np.ones((n, 1)),
        rotations=np.asarray([rotation], dtype=np.float64),
        translations=np.asarray([translation], dtype=np.float64),
    )


# -- embedded deformation -----------------------------------------------------


def test_embedded_identity_is_bitwise(quad_mesh):
    graph = _single_node_graph(quad_mesh)
    y = embedded_deform(quad_mesh, graph, np.zeros((4, 3)))
    assert np.array_equal(y, quad_mesh.vertices)


def test_embedded_single_node_pure_translation(quad_mesh):
    graph = _single_node_graph(quad_mesh, translation=(1.0, 0.0, 0.0))
    y = embedded_deform(quad_mesh, graph, np.zeros((4, 3)))
    assert np.array_equal(y, quad_mesh.vertices + np.array([1.0, 0.0, 0.0]))


def test_embedded_two_node_blend_matches_direct_formula(quad_mesh):
    # Two nodes with hand-chosen rotations/translations; one vertex weighted
    # (0.5, 0.5). Oracle: the unrefactored formula evaluated literally.
    nodes = np.array([[0.2, -0.1, 0.4], [-0.3, 0.5, 0.1]])
    rot = np.array([[0.3, -0.2, 0.5], [-0.4, 0.1, 0.2]])
    tra = np.array([[0.05, 0.1, -0.2], [0.3, -0.1, 0.0]])
    n = quad_mesh.num_vertices
    graph = EmbeddedGraph(
        nodes=nodes,
        vertex_nodes=np.tile(np.array([0, 1], dtype=np.int32), (n, 1)),
        vertex_weights=np.tile([0.5, 0.5], (n, 1)),
        rotations=rot,
        translations=tra,
    )
    d = np.linspace(-0.1, 0.1, n * 3).reshape(n, 3)
    y = embedded_deform(quad_mesh, graph, d)

    r_mats = [euler_to_matrix(rot[k]) for k in range(2)]
    for i in range(n):
        v = quad_mesh.vertices[i]
        expected = d[i].copy()
        for k in range(2):
            expected = expected + 0.5 * (r_mats[k] @ (v - nodes[k]) + nodes[k] + tra[k])
        assert np.abs(y[i] - expected).max() < 1e-9


def test_embedded_translation_equivariance_dyadic_exact(quad_mesh):
    # Dyadic weights make the float sums exact, so equivariance holds bitwise.
    n = quad_mesh.num_vertices
    nodes = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
    graph = EmbeddedGraph(
        nodes=nodes,
        vertex_nodes=np.tile(np.array([0, 1, 2], dtype=np.int32), (n, 1)),
        vertex_weights=np.tile([0.5, 0.25, 0.25], (n, 1)),
        rotations=np.array([[0.1, 0.2, -0.3], [0.0, 0.4, 0.1], [-0.2, 0.0, 0.25]]),
        translations=np.zeros((3, 3)),
    )
    d = np.zeros((n, 3))
    y0 = embedded_deform(quad_mesh, graph, d)
    delta = np.array([0.375, -1.25, 2.5])  # dyadic components
    shifted = graph.with_params(graph.rotations, graph.translations + delta)
    y1 = embedded_deform(quad_mesh, shifted, d)
    assert np.array_equal(y1, y0 + delta)


def test_embedded_translation_equivariance_random(quad_mesh):
    rng = np.random.default_rng(2)
    n = quad_mesh.num_vertices
    w = rng.random((n, 2))
    w /= w.sum(axis=1, keepdims=True)
    graph = EmbeddedGraph(
        nodes=rng.standard_normal((2, 3)),
        vertex_nodes=np.tile(np.array([0, 1], dtype=np.int32), (n, 1)),
        vertex_weights=w,
        rotations=rng.standard_normal((2, 3)) * 0.3,
        translations=rng.standard_normal((2, 3)),
    )
    d = rng.standard_normal((n, 3)) * 0.01
    delta = rng.standard_normal(3)
    y0 = embedded_deform(quad_mesh, graph, d)
    y1 = embedded_deform(quad_mesh, graph.with_params(graph.rotations, graph.translations + delta), d)
    assert np.abs(y1 - (y0 + delta)).max() < 1e-12


def test_embedded_rejects_unnormalized_weights(quad_mesh):
    n = quad_mesh.num_vertices
    with pytest.raises(ValidationError, match="sum to 1"):
        EmbeddedGraph(
            nodes=np.zeros((1, 3)),
            vertex_nodes=np.zeros((n, 1), dtype=np.int32),
            vertex_weights=np.full((n, 1), 0.7),
            rotations=np.zeros((1, 3)),
            translations=np.zeros((1, 3)),
        )


def test_embedded_rejects_bad_displacements(quad_mesh):
    graph = _single_node_graph(quad_mesh)
    with pytest.raises(ValidationError, match="displacements"):
        embedded_deform(quad_mesh, graph, np.zeros((2, 3)))


# -- dual quaternion skinning ---------------------------------------------------


def _one_joint_skeleton():
    return Skeleton((Joint("root", -1, np.array([1.0, 0, 0, 0]), np.zeros(3), ("rx", "ry", "rz")),))


def _weights_all_on(joint: int, n: int) -> SkinningWeights:
    idx = np.full((n, 1), joint, dtype=np.int32)
    return SkinningWeights(idx, np.ones((n, 1)))


def test_dqs_identity_pose_adds_root_translation(quad_mesh):
    sk = _one_joint_skeleton()
    sw = _weights_all_on(0, quad_mesh.num_vertices)
    alpha = np.array([0.3, -1.0, 2.0])
    posed = dqs_pose(quad_mesh, quad_mesh.vertices, sk, sw, MotionFrame(np.zeros(3), alpha, np.zeros(3)))
    assert np.abs(posed.vertices - (quad_mesh.vertices + alpha)).max() < 1e-12


def test_dqs_single_joint_matches_rigid_transform(quad_mesh):
    sk = _one_joint_skeleton()
    sw = _weights_all_on(0, quad_mesh.num_vertices)
    theta = np.array([0.7, -0.3, 1.1])
    alpha = np.array([0.2, 0.4, -0.1])
    posed = dqs_pose(quad_mesh, quad_mesh.vertices, sk, sw, MotionFrame(theta, alpha, np.zeros(3)))
    r = euler_to_matrix(np.array([theta[0], 0, 0])) @ euler_to_matrix(np.array([0, theta[1], 0])) @ euler_to_matrix(np.array([0, 0, theta[2]]))
    expected = quad_mesh.vertices @ r.T + alpha
    assert np.abs(posed.vertices - expected).max() < 1e-6


def test_dqs_two_joint_blend_matches_slerp_oracle():
    # Two hinge joints at the origin rotated +90/-90 (and 0/+90) about x; a
    # half-weighted vertex must move by the slerp midpoint rotation.
    sk = Skeleton(
        (
            Joint("root", -1, np.array([1.0, 0, 0, 0]), np.zeros(3), ()),
            Joint("a", 0, np.array([1.0, 0, 0, 0]), np.zeros(3), ("rx",)),
            Joint("b", 0, np.array([1.0, 0, 0, 0]), np.zeros(3), ("rx",)),
        )
    )
    v = np.array([[0.0, 0.4, 0.7], [0.2, -0.3, 0.5]])
    idx = np.tile(np.array([1, 2], dtype=np.int32), (2, 1))
    sw = SkinningWeights(idx, np.tile([0.5, 0.5], (2, 1)))

    for ang_a, ang_b in ((np.pi / 2, -np.pi / 2), (0.0, np.pi / 2)):
        frame = MotionFrame(np.array([ang_a, ang_b]), np.zeros(3), np.zeros(3))
        rot, tra = dqs_vertex_transforms(sk, sw, frame)
        # Slerp oracle between the two joint rotations at t = 0.5.
        qa = np.array([np.cos(ang_a / 2), np.sin(ang_a / 2), 0, 0])
        qb = np.array([np.cos(ang_b / 2), np.sin(ang_b / 2), 0, 0])
        dot = float(qa @ qb)
        omega = np.arccos(np.clip(abs(dot), -1, 1))
        if omega < 1e-12:
            qm = qa
        else:
            sb = np.sign(dot) if dot != 0 else 1.0
            qm = (np.sin(0.5 * omega) * qa + np.sin(0.5 * omega) * sb * qb) / np.sin(omega)
        qm = qm / np.linalg.norm(qm)
        half = 0.5 * (ang_a + ang_b)
        expected_r = euler_to_matrix(np.array([half, 0.0, 0.0]))
        qm_r = np.array(
            [
                [1 - 2 * (qm[2] ** 2 + qm[3] ** 2), 2 * (qm[1] * qm[2] - qm[0] * qm[3]), 2 * (qm[1] * qm[3] + qm[0] * qm[2])],
                [2 * (qm[1] * qm[2] + qm[0] * qm[3]), 1 - 2 * (qm[1] ** 2 + qm[3] ** 2), 2 * (qm[2] * qm[3] - qm[0] * qm[1])],
                [2 * (qm[1] * qm[3] - qm[0] * qm[2]), 2 * (qm[2] * qm[3] + qm[0] * qm[1]), 1 - 2 * (qm[1] ** 2 + qm[2] ** 2)],
            ]
        )
        assert np.abs(qm_r - expected_r).max() < 1e-12  # oracle self-check: slerp mid == half angle
        for i in range(len(v)):
            assert np.abs(rot[i] - expected_r).max() < 1e-9
            assert np.abs(tra[i]).max() < 1e-9


def test_dqs_norm_preservation_under_global_rotation(quad_mesh):
    sk = _one_joint_skeleton()
    sw = _weights_all_on(0, quad_mesh.num_vertices)
    z = np.array([0.4, -0.8, 1.3])
    posed = dqs_pose(quad_mesh, quad_mesh.vertices, sk, sw, MotionFrame(np.zeros(3), np.zeros(3), z))
    before = np.linalg.norm(quad_mesh.vertices, axis=1)
    after = np.linalg.norm(posed.vertices, axis=1)
    assert np.abs(after - before).max() < 1e-9 * max(before.max(), 1.0)


def test_dqs_singular_blend_raises():
    # The public path cannot reach this (hemisphere alignment bounds the blend
    # norm below by the pivot weight), so exercise the guard directly with a
    # cancelling pair.
    qs = np.array([[[0.0, 1.0, 0.0, 0.0], [0.0, -1.0, 0.0, 0.0]]])
    dqs = np.zeros((1, 2, 4))
    w = np.array([[0.5, 0.5]])
    with pytest.raises(NumericError, match="vertex 0"):
        _blend_dual_quats(qs, dqs, w)


# -- hand freezing ---------------------------------------------------------------


def _two_node_graph(n):
    return EmbeddedGraph(
        nodes=np.array([[0.0, 0, 0], [1.0, 1, 1]]),
        vertex_nodes=np.tile(np.array([0, 1], dtype=np.int32), (n, 1)),
        vertex_weights=np.tile([0.5, 0.5], (n, 1)),
        rotations=np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]),
        translations=np.array([[1.0, 2, 3], [4.0, 5, 6]]),
    )


def test_hand_freeze_full_mask_reduces_to_skinning(quad_mesh):
    n = quad_mesh.num_vertices
    graph = _two_node_graph(n)
    mask = HandMask(np.ones(2, dtype=bool), np.ones(n, dtype=bool))
    frozen, d = apply_hand_freeze(graph, np.full((n, 3), 0.5), mask)
    assert np.array_equal(frozen.rotations, np.zeros((2, 3)))
    assert np.array_equal(frozen.translations, np.zeros((2, 3)))
    assert np.array_equal(d, np.zeros((n, 3)))
    y = embedded_deform(quad_mesh, frozen, d)
    assert np.array_equal(y, quad_mesh.vertices)


def test_hand_freeze_empty_mask_is_noop(quad_mesh):
    n = quad_mesh.num_vertices
    graph = _two_node_graph(n)
    d0 = np.linspace(0, 1, n * 3).reshape(n, 3)
    frozen, d = apply_hand_freeze(graph, d0, HandMask.empty(graph))
    assert np.array_equal(frozen.rotations, graph.rotations)
    assert np.array_equal(frozen.translations, graph.translations)
    assert np.array_equal(d, d0)


def test_hand_freeze_mixed_mask_field_by_field():
    # 3 nodes, 4 vertices; node 2 is hand. Vertices influenced only by node 2
    # are hand vertices; everything else must be bitwise untouched.
    nodes = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    vertex_nodes = np.array([[0, 1], [1, -1], [2, -1], [2, -1]], dtype=np.int32)
    vertex_weights = np.array([[0.5, 0.5], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    rot = np.array([[0.1, 0.0, 0.0], [0.0, 0.2, 0.0], [0.0, 0.0, 0.3]])
    tra = np.array([[1.0, 0, 0], [0.0, 2, 0], [0.0, 0, 3]])
    graph = EmbeddedGraph(nodes, vertex_nodes, vertex_weights, rot, tra)
    node_mask = np.array([False, False, True])
    mask = HandMask.from_nodes(graph, node_mask)
    assert mask.vertex_mask.tolist() == [False, False, True, True]
    d0 = np.arange(12, dtype=np.float64).reshape(4, 3) + 1
    frozen, d = apply_hand_freeze(graph, d0, mask)
    for k in range(3):
        if node_mask[k]:
            assert np.array_equal(frozen.rotations[k], np.zeros(3))
            assert np.array_equal(frozen.translations[k], np.zeros(3))
        else:
            assert np.array_equal(frozen.rotations[k], rot[k])
            assert np.array_equal(frozen.translations[k], tra[k])
    for i in range(4):
        if mask.vertex_mask[i]:
            assert np.array_equal(d[i], np.zeros(3))
        else:
            assert np.array_equal(d[i], d0[i])


def test_hand_mask_consistency_enforced():
    graph = _two_node_graph(4)
    bad = HandMask(np.array([True, False]), np.array([True, False, False, False]))
    with pytest.raises(ValidationError, match="iff"):
        bad.validate_against(graph)


# -- motion normal baking ----------------------------------------------------------


def test_bake_motion_normals_flat_quad(quad_mesh):
    from holochar.character import PosedMesh

    posed = PosedMesh(quad_mesh.vertices, np.tile([0.0, 0, 1.0], (4, 1)), quad_mesh.faces, quad_mesh.uv)
    out = bake_motion_normals([posed], 16, 16)
    assert out.shape == (1, 16, 16, 3)
    covered = np.linalg.norm(out[0], axis=-1) > 0
    assert covered.all()
    assert np.abs(out[0][covered] - np.array([0.0, 0, 1.0])).max() < 1e-12


def test_bake_motion_normals_sphere_analytic():
    from holochar.character import PosedMesh
    from holochar.raster import bake_texel_geometry

    mesh = make_sphere_mesh(rows=32, cols=64)
    posed = PosedMesh(mesh.vertices, mesh.vertex_normals, mesh.faces, mesh.uv)
    out = bake_motion_normals([posed], 128, 128)
    texgeo = bake_texel_geometry(mesh, 128, 128)
    cov = texgeo.coverage
    baked = out[0][cov]
    analytic = texgeo.positions[cov] / np.linalg.norm(texgeo.positions[cov], axis=1, keepdims=True)
    err = np.linalg.norm(baked - analytic, axis=1)
    assert err.max() < 0.02  # within tessellation error


def test_bake_motion_normals_static_window_identical_slices(quad_mesh):
    from holochar.character import PosedMesh

    posed = PosedMesh(quad_mesh.vertices, np.tile([0.0, 0, 1.0], (4, 1)), quad_mesh.faces, quad_mesh.uv)
    out = bake_motion_normals([posed, posed, posed], 16, 16)
    assert np.array_equal(out[0], out[1])
    assert np.array_equal(out[1], out[2])


def test_baked_normals_unit_where_nonzero():
    from holochar.character import PosedMesh

    mesh = make_sphere_mesh(rows=12, cols=24)
    posed = PosedMesh(mesh.vertices, mesh.vertex_normals, mesh.faces, mesh.uv)
    out = bake_motion_normals([posed], 64, 64)[0]
    norms = np.linalg.norm(out, axis=-1)
    nz = norms > 0
    assert np.abs(norms[nz] - 1.0).max() < 1e-4


# -- graph construction / io -------------------------------------------------------


def test_build_embedded_graph_invariants():
    mesh = make_sphere_mesh(rows=12, cols=24)
    graph = build_embedded_graph(mesh)
    assert 1 <= graph.num_nodes <= mesh.num_vertices
    sums = graph.vertex_weights.sum(axis=1)
    assert np.abs(sums - 1.0).max() < 1e-6
    counts = (graph.vertex_nodes >= 0).sum(axis=1)
    assert counts.min() >= 1 and counts.max() <= 8


def test_graph_json_roundtrip(tmp_path):
    mesh = make_sphere_mesh(rows=8, cols=12)
    graph = build_embedded_graph(mesh)
    save_graph(tmp_path / "g.json", graph)
    loaded = load_graph(tmp_path / "g.json")
    assert np.array_equal(loaded.vertex_nodes, graph.vertex_nodes)
    assert np.abs(loaded.vertex_weights - graph.vertex_weights).max() < 1e-12
