"""Skeleton-driven deformable character: coarse graph deformation, per-vertex
displacements, dual-quaternion posing, and hand freezing.

A posed vertex is produced in two steps, both in canonical space first:

1. ``embedded_deform``: each graph node k carries a rotation ``a_k`` (Euler,
   intrinsic XYZ) and translation ``t_k``; a vertex blends its neighbor nodes'
   rigid motions with normalized weights and then adds its own displacement.
2. ``dqs_pose``: the skeleton pose is applied by blending per-joint rigid
   transforms (posed global times inverse rest global) as dual quaternions,
   with hemisphere alignment against the largest-weight joint.

Hand regions are handled by zeroing the graph parameters of hand nodes and the
displacements of hand vertices, so hands stay on the pure skinning track.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import json

import numpy as np

from .errors import NumericError, ValidationError
from .geometry import (
    MotionFrame,
    Skeleton,
    TemplateMesh,
    _freeze,
    compute_vertex_normals,
    euler_to_matrix,
    forward_kinematics,
    matrix_to_quat,
    quat_multiply,
    quat_to_matrix,
)


def _check_sparse_rows(indices: np.ndarray, weights: np.ndarray, n_rows: int, n_cols: int, what: str,
                       max_per_row: int | None = None, nonneg: bool = False) -> None:
    if indices.shape != weights.shape or indices.ndim != 2 or len(indices) != n_rows:
        raise ValidationError(f"{what}: indices/weights must both be ({n_rows}, M)")
    valid = indices >= 0
    if not valid.any(axis=1).all():
        raise ValidationError(f"{what}: every row needs at least one entry")
    if max_per_row is not None and valid.sum(axis=1).max() > max_per_row:
        raise ValidationError(f"{what}: more than {max_per_row} entries in a row")
    if indices.max() >= n_cols:
        raise ValidationError(f"{what}: index out of range")
    if np.any(weights[~valid] != 0.0):
        raise ValidationError(f"{what}: padding weights must be zero")
    if nonneg and np.any(weights < 0):
        raise ValidationError(f"{what}: weights must be nonnegative")
    sums = weights.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValidationError(f"{what}: rows must sum to 1 within 1e-6 (max dev {np.abs(sums - 1).max():.2e})")


@dataclass(frozen=True)
class EmbeddedGraph:
    """Coarse deformation graph over a template mesh.

    ``vertex_nodes``/``vertex_weights`` are padded (N, M) arrays (-1 / 0.0 for
    padding); rows are normalized and each vertex has 1..8 influencing nodes.
    ``rotations`` and ``translations`` are the per-node parameter fields.
    """

    nodes: np.ndarray  # (K, 3)
    vertex_nodes: np.ndarray  # (N, M) int32
    vertex_weights: np.ndarray  # (N, M) float64
    rotations: np.ndarray  # (K, 3) Euler radians
    translations: np.ndarray  # (K, 3)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        vn = np.asarray(self.vertex_nodes, dtype=np.int32)
        vw = np.asarray(self.vertex_weights, dtype=np.float64)
        rot = np.asarray(self.rotations, dtype=np.float64)
        tra = np.asarray(self.translations, dtype=np.float64)
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise ValidationError("graph nodes must be (K, 3)")
        k = len(nodes)
        if rot.shape != (k, 3) or tra.shape != (k, 3):
            raise ValidationError("graph rotations/translations must be (K, 3)")
        _check_sparse_rows(vn, vw, len(vn), k, "graph weights", max_per_row=8)
        for name, arr in (("nodes", nodes), ("vertex_nodes", vn), ("vertex_weights", vw),
                          ("rotations", rot), ("translations", tra)):
            object.__setattr__(self, name, _freeze(arr))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def with_params(self, rotations: np.ndarray, translations: np.ndarray) -> "EmbeddedGraph":
        return replace(self, rotations=rotations, translations=translations)


@dataclass(frozen=True)
class SkinningWeights:
    joint_indices: np.ndarray  # (N, M) int32, -1 padding
    weights: np.ndarray  # (N, M) float64, nonnegative, rows sum to 1

    def __post_init__(self):
        ji = np.asarray(self.joint_indices, dtype=np.int32)
        w = np.asarray(self.weights, dtype=np.float64)
        _check_sparse_rows(ji, w, len(ji), int(ji.max()) + 1 if ji.size else 0, "skinning weights", nonneg=True)
        object.__setattr__(self, "joint_indices", _freeze(ji))
        object.__setattr__(self, "weights", _freeze(w))


@dataclass(frozen=True)
class HandMask:
    """Boolean hand markers per graph node and per vertex.

    Consistency rule: a vertex is hand-marked exactly when all of its
    influencing graph nodes are.
    """

    node_mask: np.ndarray  # (K,) bool
    vertex_mask: np.ndarray  # (N,) bool

    def __post_init__(self):
        object.__setattr__(self, "node_mask", _freeze(np.asarray(self.node_mask, dtype=bool)))
        object.__setattr__(self, "vertex_mask", _freeze(np.asarray(self.vertex_mask, dtype=bool)))

    def validate_against(self, graph: EmbeddedGraph) -> None:
        if len(self.node_mask) != graph.num_nodes or len(self.vertex_mask) != len(graph.vertex_nodes):
            raise ValidationError("hand mask sizes do not match the graph")
        padded = np.concatenate([self.node_mask, [False]])  # -1 padding maps to False
        influencing = padded[graph.vertex_nodes]
        influencing[graph.vertex_nodes < 0] = True  # padding must not veto
        expected = influencing.all(axis=1)
        if not np.array_equal(expected, self.vertex_mask):
            bad = np.nonzero(expected != self.vertex_mask)[0][:10]
            raise ValidationError(f"hand mask inconsistent at vertices {bad.tolist()}: "
                                  "a vertex is hand-marked iff all its nodes are")

    @classmethod
    def empty(cls, graph: EmbeddedGraph) -> "HandMask":
        return cls(np.zeros(graph.num_nodes, dtype=bool), np.zeros(len(graph.vertex_nodes), dtype=bool))

    @classmethod
    def from_nodes(cls, graph: EmbeddedGraph, node_mask: np.ndarray) -> "HandMask":
        node_mask = np.asarray(node_mask, dtype=bool)
        padded = np.concatenate([node_mask, [False]])
        influencing = padded[graph.vertex_nodes]
        influencing[graph.vertex_nodes < 0] = True
        return cls(node_mask, influencing.all(axis=1))


@dataclass(frozen=True)
class PosedMesh:
    """Posed vertices plus recomputed normals; topology/uv shared with the template."""

    vertices: np.ndarray  # (N, 3)
    vertex_normals: np.ndarray  # (N, 3) unit
    faces: np.ndarray  # (F, 3)
    uv: np.ndarray  # (F, 3, 2)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if not np.isfinite(v).all():
            raise ValidationError("posed vertices must be finite")
        object.__setattr__(self, "vertices", _freeze(v))
        object.__setattr__(self, "vertex_normals", _freeze(np.asarray(self.vertex_normals, dtype=np.float64)))
        object.__setattr__(self, "faces", _freeze(np.asarray(self.faces, dtype=np.int32)))
        object.__setattr__(self, "uv", _freeze(np.asarray(self.uv, dtype=np.float64)))

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


def embedded_deform(
    template: TemplateMesh,
    graph: EmbeddedGraph,
    displacements: np.ndarray,
) -> np.ndarray:
    """Canonical-space deformed vertices.

    y_i = d_i + sum_k w_ik [R(a_k)(v_i - g_k) + g_k + t_k], evaluated in the
    algebraically equal form
    v_i + d_i + sum_k w_ik (R(a_k) - I)(v_i - g_k) + sum_k w_ik t_k
    so the all-zero parameter case reproduces the template bitwise and the
    translation blend stays a separate sum (shifting every t_k shifts y).
    Requires normalized weight rows (validated at graph construction).
    """
    d = np.asarray(displacements, dtype=np.float64)
    if d.shape != template.vertices.shape:
        raise ValidationError(f"displacements must be {template.vertices.shape}, got {d.shape}")
    if not np.isfinite(d).all():
        raise ValidationError("displacements must be finite")
    rot = euler_to_matrix(graph.rotations) - np.eye(3)  # (K, 3, 3)
    idx = np.where(graph.vertex_nodes < 0, 0, graph.vertex_nodes)
    w = graph.vertex_weights  # zero on padding
    diff = template.vertices[:, None, :] - graph.nodes[idx]  # (N, M, 3)
    rotated = np.einsum("nmij,nmj->nmi", rot[idx], diff)
    shifted = np.einsum("nm,nmi->ni", w, graph.translations[idx])
    return template.vertices + d + np.einsum("nm,nmi->ni", w, rotated) + shifted


def apply_hand_freeze(
    graph: EmbeddedGraph,
    displacements: np.ndarray,
    hand_mask: HandMask,
) -> tuple[EmbeddedGraph, np.ndarray]:
    """Zero the graph parameters of hand nodes and displacements of hand vertices.

    Non-hand entries are passed through untouched (same bits).  During fitting
    the same mask also pins the corresponding gradients to zero.
    """
    hand_mask.validate_against(graph)
    rot = np.array(graph.rotations)
    tra = np.array(graph.translations)
    rot[hand_mask.node_mask] = 0.0
    tra[hand_mask.node_mask] = 0.0
    d = np.array(displacements, dtype=np.float64)
    d[hand_mask.vertex_mask] = 0.0
    return graph.with_params(rot, tra), d


def _joint_dual_quats(skeleton: Skeleton, frame: MotionFrame) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint skinning transforms (posed-global . rest-global^-1) as dual quaternions."""
    pr, pt = forward_kinematics(skeleton, frame.theta, frame.alpha, frame.z)
    rr, rt = forward_kinematics(skeleton, np.zeros(skeleton.num_dofs), np.zeros(3), np.zeros(3))
    rel_r = np.einsum("jab,jcb->jac", pr, rr)  # pr @ rr^T
    rel_t = pt - np.einsum("jab,jb->ja", rel_r, rt)
    q = matrix_to_quat(rel_r)  # (J, 4)
    tq = np.concatenate([np.zeros((len(q), 1)), rel_t], axis=1)
    dq = 0.5 * quat_multiply(tq, q)
    return q, dq


def _blend_dual_quats(qs: np.ndarray, dqs: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a weighted dual-quaternion sum into rigid transforms.

    `qs`/`dqs` are (N, M, 4) per-vertex contributions whose signs are already
    hemisphere-aligned; `weights` is (N, M).  Raises when a blend collapses
    (norm < 1e-8), naming the first offending vertex.
    """
    bq = np.einsum("nm,nmk->nk", weights, qs)
    bd = np.einsum("nm,nmk->nk", weights, dqs)
    norm = np.linalg.norm(bq, axis=1)
    bad = norm < 1e-8
    if bad.any():
        raise NumericError(f"singular dual-quaternion blend at vertex {int(np.nonzero(bad)[0][0])}")
    bq = bq / norm[:, None]
    bd = bd / norm[:, None]
    rot = quat_to_matrix(bq)
    conj = bq * np.array([1.0, -1.0, -1.0, -1.0])
    tra = 2.0 * quat_multiply(bd, conj)[:, 1:]
    return rot, tra


def dqs_vertex_transforms(
    skeleton: Skeleton,
    skinning: SkinningWeights,
    frame: MotionFrame,
) -> tuple[np.ndarray, np.ndarray]:
    """Blended per-vertex rigid transforms from dual-quaternion skinning.

    Each contributing joint's dual quaternion is flipped into the hemisphere
    of the vertex's largest-weight joint before the weighted sum; the blend is
    then renormalized.  Returns (rotations (N, 3, 3), translations (N, 3)).
    """
    q, dq = _joint_dual_quats(skeleton, frame)
    idx = np.where(skinning.joint_indices < 0, 0, skinning.joint_indices)
    w = skinning.weights  # (N, M)
    pivot = idx[np.arange(len(idx)), np.argmax(w, axis=1)]
    qs = q[idx]  # (N, M, 4)
    dqs = dq[idx]
    dots = np.einsum("nmk,nk->nm", qs, q[pivot])
    sign = np.where(dots < 0, -1.0, 1.0)
    return _blend_dual_quats(qs * sign[..., None], dqs * sign[..., None], w)


def dqs_pose(
    template: TemplateMesh,
    canonical_vertices: np.ndarray,
    skeleton: Skeleton,
    skinning: SkinningWeights,
    frame: MotionFrame,
) -> PosedMesh:
    """Pose canonical-space vertices with dual-quaternion skinning.

    Normals are recomputed from the posed geometry (area weighted), not
    transformed from the template, so they stay consistent with whatever the
    deformation produced.
    """
    y = np.asarray(canonical_vertices, dtype=np.float64)
    if y.shape != template.vertices.shape:
        raise ValidationError("canonical vertices must match the template")
    rot, tra = dqs_vertex_transforms(skeleton, skinning, frame)
    v = np.einsum("nij,nj->ni", rot, y) + tra
    return PosedMesh(v, compute_vertex_normals(v, template.faces), template.faces, template.uv)


def pose_frame(
    template: TemplateMesh,
    graph: EmbeddedGraph,
    skinning: SkinningWeights,
    skeleton: Skeleton,
    frame: MotionFrame,
    displacements: np.ndarray | None = None,
    hand_mask: HandMask | None = None,
) -> PosedMesh:
    """Full stage-1 evaluation: freeze hands, deform in canonical space, pose."""
    d = np.zeros_like(template.vertices) if displacements is None else displacements
    g = graph
    if hand_mask is not None:
        g, d = apply_hand_freeze(graph, d, hand_mask)
    y = embedded_deform(template, g, d)
    return dqs_pose(template, y, skeleton, skinning, frame)


def bake_motion_normals(
    posed_meshes: list[PosedMesh] | tuple[PosedMesh, ...],
    width: int,
    height: int,
) -> np.ndarray:
    """Bake posed-space unit normals of a motion window into texture slices.

    Returns (T, H, W, 3); texels outside all uv charts are zero.  All meshes
    must share topology and uvs.
    """
    from .raster import bake_vertex_attribute  # local import, raster sits above character

    if not posed_meshes:
        raise ValidationError("motion window is empty")
    first = posed_meshes[0]
    out = np.zeros((len(posed_meshes), height, width, 3))
    for ti, mesh in enumerate(posed_meshes):
        if mesh.faces.shape != first.faces.shape or not np.array_equal(mesh.faces, first.faces):
            raise ValidationError("window meshes must share topology")
        baked, covered = bake_vertex_attribute(mesh.faces, mesh.uv, mesh.vertex_normals, width, height)
        lengths = np.linalg.norm(baked, axis=-1, keepdims=True)
        lengths[lengths < 1e-12] = 1.0
        out[ti] = np.where(covered[..., None], baked / lengths, 0.0)
    return out


# ---------------------------------------------------------------------------
# Graph construction and sidecar files


def build_embedded_graph(mesh: TemplateMesh, target_nodes: int | None = None, max_influences: int = 4) -> EmbeddedGraph:
    """Construct a deformation graph by farthest-point sampling over mesh hops.

    Nodes are template vertices picked by BFS-hop farthest-point sampling
    (K ~ N/20 by default); each vertex weights its `max_influences` hop-nearest
    nodes by inverse (hop+1), normalized.
    """
    n = mesh.num_vertices
    k = max(1, n // 20) if target_nodes is None else min(target_nodes, n)
    adj: list[list[int]] = [[] for _ in range(n)]
    for tri in mesh.faces:
        for i in range(3):
            a, b = int(tri[i]), int(tri[(i + 1) % 3])
            adj[a].append(b)
            adj[b].append(a)
    adj = [sorted(set(x)) for x in adj]

    def bfs(seeds: list[int]) -> np.ndarray:
        dist = np.full(n, np.iinfo(np.int32).max, dtype=np.int64)
        frontier = list(seeds)
        for s in seeds:
            dist[s] = 0
        while frontier:
            nxt = []
            for u in frontier:
                for vtx in adj[u]:
                    if dist[vtx] > dist[u] + 1:
                        dist[vtx] = dist[u] + 1
                        nxt.append(vtx)
            frontier = nxt
        return dist

    nodes = [0]
    dist = bfs(nodes)
    while len(nodes) < k:
        far = int(np.argmax(dist))
        if dist[far] == 0:
            break
        nodes.append(far)
        dist = np.minimum(dist, bfs([far]))

    per_node = np.stack([bfs([s]) for s in nodes])  # (K, N) hops
    m = min(max_influences, len(nodes))
    order = np.argsort(per_node.T, axis=1, kind="stable")[:, :m]  # (N, m)
    hops = np.take_along_axis(per_node.T, order, axis=1).astype(np.float64)
    w = 1.0 / (hops + 1.0)
    w /= w.sum(axis=1, keepdims=True)
    node_pos = mesh.vertices[np.asarray(nodes)]
    return EmbeddedGraph(
        nodes=node_pos,
        vertex_nodes=order.astype(np.int32),
        vertex_weights=w,
        rotations=np.zeros((len(nodes), 3)),
        translations=np.zeros((len(nodes), 3)),
    )


def uniform_skinning_from_segments(vertex_joint: np.ndarray, blend: np.ndarray | None = None) -> SkinningWeights:
    """Single-joint skinning rows, optionally blended (N, M) arrays passed straight through."""
    vertex_joint = np.asarray(vertex_joint, dtype=np.int32)
    n = len(vertex_joint)
    idx = np.full((n, 1), -1, dtype=np.int32)
    idx[:, 0] = vertex_joint
    return SkinningWeights(idx, np.ones((n, 1)))


def save_graph(path, graph: EmbeddedGraph) -> None:
    data = {
        "nodes": graph.nodes.tolist(),
        "vertex_nodes": graph.vertex_nodes.tolist(),
        "vertex_weights": graph.vertex_weights.tolist(),
        "rotations": graph.rotations.tolist(),
        "translations": graph.translations.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh)
        fh.write("\n")


def load_graph(path) -> EmbeddedGraph:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return EmbeddedGraph(
        nodes=np.asarray(data["nodes"], dtype=np.float64),
        vertex_nodes=np.asarray(data["vertex_nodes"], dtype=np.int32),
        vertex_weights=np.asarray(data["vertex_weights"], dtype=np.float64),
        rotations=np.asarray(data["rotations"], dtype=np.float64),
        translations=np.asarray(data["translations"], dtype=np.float64),
    )


def save_skinning(path, sw: SkinningWeights) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"joint_indices": sw.joint_indices.tolist(), "weights": sw.weights.tolist()}, fh)
        fh.write("\n")


def load_skinning(path) -> SkinningWeights:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return SkinningWeights(
        np.asarray(data["joint_indices"], dtype=np.int32),
        np.asarray(data["weights"], dtype=np.float64),
    )


def save_hand_mask(path, mask: HandMask) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"node_mask": mask.node_mask.tolist(), "vertex_mask": mask.vertex_mask.tolist()}, fh)
        fh.write("\n")


def load_hand_mask(path) -> HandMask:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return HandMask(np.asarray(data["node_mask"], dtype=bool), np.asarray(data["vertex_mask"], dtype=bool))


def save_displacements(path, frame: int, displacements: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"frame": frame, "d": np.asarray(displacements, dtype=np.float64).tolist()}, fh)
        fh.write("\n")


def load_displacements(path) -> tuple[int, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return int(data["frame"]), np.asarray(data["d"], dtype=np.float64)
