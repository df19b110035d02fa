"""Mesh, skeleton, camera, and ray primitives.

Conventions (used by every module in this package):

* World space is right-handed; units are arbitrary but consistent.
* Euler angles are intrinsic X-Y-Z, radians: ``R = Rx(a) @ Ry(b) @ Rz(c)``
  acting on column vectors.  Imported motion data must already use this
  convention.
* Cameras look down +z in camera space, +x right, +y down.  World-to-camera:
  ``x_cam = R @ x_world + t``; the camera origin is ``o = -R.T @ t``.
* Images have the origin at the top-left corner, x right, y down, and pixel
  centers at half-integer coordinates: pixel (ix, iy) covers
  [ix, ix+1) x [iy, iy+1) with center (ix+0.5, iy+0.5).
* Texture atlases use uv in [0,1]^2 with the same half-integer center rule:
  texel (u, v) has center ((u+0.5)/W, (v+0.5)/H) and is stored at array
  index [v, u].

All container types are immutable after construction (their arrays are
marked read-only), so they are safe to share across worker processes and
threads without copying.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ValidationError

_AXES = {"rx": 0, "ry": 1, "rz": 2}


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def euler_to_matrix(angles: np.ndarray) -> np.ndarray:
    """Intrinsic XYZ Euler angles (radians) to rotation matrices.

    ``angles`` has shape (..., 3); returns (..., 3, 3).
    """
    angles = np.asarray(angles, dtype=np.float64)
    ax, ay, az = angles[..., 0], angles[..., 1], angles[..., 2]
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    out = np.empty(angles.shape[:-1] + (3, 3), dtype=np.float64)
    # Rx @ Ry @ Rz, expanded.
    out[..., 0, 0] = cy * cz
    out[..., 0, 1] = -cy * sz
    out[..., 0, 2] = sy
    out[..., 1, 0] = cx * sz + sx * sy * cz
    out[..., 1, 1] = cx * cz - sx * sy * sz
    out[..., 1, 2] = -sx * cy
    out[..., 2, 0] = sx * sz - cx * sy * cz
    out[..., 2, 1] = sx * cz + cx * sy * sz
    out[..., 2, 2] = cx * cy
    return out


def euler_to_matrix_jacobian(angles: np.ndarray) -> np.ndarray:
    """d R / d angle for intrinsic XYZ Euler angles.

    Returns (..., 3, 3, 3): leading axis of the trailing triple indexes the
    angle (x, y, z) being differentiated.
    """
    angles = np.asarray(angles, dtype=np.float64)
    ax, ay, az = angles[..., 0], angles[..., 1], angles[..., 2]

    def rx(a):
        c, s = np.cos(a), np.sin(a)
        m = np.zeros(a.shape + (3, 3))
        m[..., 0, 0] = 1
        m[..., 1, 1] = c
        m[..., 1, 2] = -s
        m[..., 2, 1] = s
        m[..., 2, 2] = c
        return m

    def ry(a):
        c, s = np.cos(a), np.sin(a)
        m = np.zeros(a.shape + (3, 3))
        m[..., 0, 0] = c
        m[..., 0, 2] = s
        m[..., 1, 1] = 1
        m[..., 2, 0] = -s
        m[..., 2, 2] = c
        return m

    def rz(a):
        c, s = np.cos(a), np.sin(a)
        m = np.zeros(a.shape + (3, 3))
        m[..., 0, 0] = c
        m[..., 0, 1] = -s
        m[..., 1, 0] = s
        m[..., 1, 1] = c
        m[..., 2, 2] = 1
        return m

    def drx(a):
        c, s = np.cos(a), np.sin(a)
        m = np.zeros(a.shape + (3, 3))
        m[..., 1, 1] = -s
        m[..., 1, 2] = -c
        m[..., 2, 1] = c
        m[..., 2, 2] = -s
        return m

    def dry(a):
        c, s = np.cos(a), np.sin(a)
        m = np.zeros(a.shape + (3, 3))
        m[..., 0, 0] = -s
        m[..., 0, 2] = c
        m[..., 2, 0] = -c
        m[..., 2, 2] = -s
        return m

    def drz(a):
        c, s = np.cos(a), np.sin(a)
        m = np.zeros(a.shape + (3, 3))
        m[..., 0, 0] = -s
        m[..., 0, 1] = -c
        m[..., 1, 0] = c
        m[..., 1, 1] = -s
        return m

    mx, my, mz = rx(ax), ry(ay), rz(az)
    out = np.empty(angles.shape[:-1] + (3, 3, 3))
    out[..., 0, :, :] = drx(ax) @ my @ mz
    out[..., 1, :, :] = mx @ dry(ay) @ mz
    out[..., 2, :, :] = mx @ my @ drz(az)
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix; shape (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrices to unit quaternions (w, x, y, z), w >= 0.

    Shepperd's method, branch chosen per element for stability.
    """
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    m = m.reshape((-1, 3, 3))
    n = m.shape[0]
    q = np.empty((n, 4))
    t = np.einsum("nii->n", m)
    for i in range(n):
        a = m[i]
        if t[i] > 0:
            s = np.sqrt(t[i] + 1.0) * 2
            q[i] = [0.25 * s, (a[2, 1] - a[1, 2]) / s, (a[0, 2] - a[2, 0]) / s, (a[1, 0] - a[0, 1]) / s]
        elif a[0, 0] >= a[1, 1] and a[0, 0] >= a[2, 2]:
            s = np.sqrt(1.0 + a[0, 0] - a[1, 1] - a[2, 2]) * 2
            q[i] = [(a[2, 1] - a[1, 2]) / s, 0.25 * s, (a[0, 1] + a[1, 0]) / s, (a[0, 2] + a[2, 0]) / s]
        elif a[1, 1] >= a[2, 2]:
            s = np.sqrt(1.0 + a[1, 1] - a[0, 0] - a[2, 2]) * 2
            q[i] = [(a[0, 2] - a[2, 0]) / s, (a[0, 1] + a[1, 0]) / s, 0.25 * s, (a[1, 2] + a[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + a[2, 2] - a[0, 0] - a[1, 1]) * 2
            q[i] = [(a[1, 0] - a[0, 1]) / s, (a[0, 2] + a[2, 0]) / s, (a[1, 2] + a[2, 1]) / s, 0.25 * s]
        if q[i, 0] < 0:
            q[i] = -q[i]
    return q.reshape(batch + (4,))


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def normalize(v: np.ndarray, axis: int = -1, eps: float = 0.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    if eps:
        n = np.maximum(n, eps)
    return v / n


def compute_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted per-vertex normals, unit length."""
    vertices = np.asarray(vertices, dtype=np.float64)
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    fn = np.cross(b - a, c - a)  # magnitude = 2 * area, the weighting
    out = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(out, faces[:, i], fn)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    norms[norms < 1e-20] = 1.0
    return out / norms


# ---------------------------------------------------------------------------
# Meshes


@dataclass(frozen=True)
class TemplateMesh:
    """Triangle mesh with per-face-corner uv coordinates.

    Per-corner uvs (rather than per-vertex) make atlas seams representable:
    two faces sharing a 3D vertex may place it at different atlas positions.
    """

    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray  # (F, 3) int32
    uv: np.ndarray  # (F, 3, 2) float64 in [0, 1]^2
    vertex_normals: np.ndarray  # (N, 3) float64, unit

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int32)
        uv = np.asarray(self.uv, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError(f"faces must be (F, 3), got {f.shape}")
        if uv.shape != (len(f), 3, 2):
            raise ValidationError(f"uv must be ({len(f)}, 3, 2), got {uv.shape}")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValidationError("face indices out of range")
        n = np.asarray(self.vertex_normals, dtype=np.float64)
        if n.shape != v.shape:
            raise ValidationError("vertex_normals must match vertices")
        if not (np.isfinite(v).all() and np.isfinite(uv).all() and np.isfinite(n).all()):
            raise ValidationError("mesh contains non-finite values")
        degenerate = _degenerate_faces(v, f)
        if degenerate:
            listing = ", ".join(str(i) for i in degenerate[:20])
            more = "" if len(degenerate) <= 20 else f" (+{len(degenerate) - 20} more)"
            raise ValidationError(f"degenerate (zero-area) faces rejected: [{listing}]{more}")
        object.__setattr__(self, "vertices", _freeze(v))
        object.__setattr__(self, "faces", _freeze(f))
        object.__setattr__(self, "uv", _freeze(uv))
        object.__setattr__(self, "vertex_normals", _freeze(n))

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


def _degenerate_faces(vertices: np.ndarray, faces: np.ndarray) -> list[int]:
    if not len(faces):
        return []
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    diag = np.linalg.norm(vertices.max(axis=0) - vertices.min(axis=0))
    thresh = max(diag, 1.0) ** 2 * 1e-14
    return [int(i) for i in np.nonzero(area2 <= thresh)[0]]


def load_obj(path) -> TemplateMesh:
    """Load the OBJ subset: v, vt, vn, and triangular f with v/vt/vn triples."""
    positions: list[list[float]] = []
    texcoords: list[list[float]] = []
    normals: list[list[float]] = []
    face_v: list[list[int]] = []
    face_vt: list[list[int]] = []
    face_vn: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    positions.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    texcoords.append([float(x) for x in parts[1:3]])
                elif tag == "vn":
                    normals.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    if len(parts) != 4:
                        raise ValidationError(f"{path}:{lineno}: only triangular faces are supported")
                    vi, ti, ni = [], [], []
                    for corner in parts[1:4]:
                        fields = corner.split("/")
                        if len(fields) != 3 or not (fields[0] and fields[1] and fields[2]):
                            raise ValidationError(f"{path}:{lineno}: faces must use v/vt/vn triples")
                        iv, it, inn = (int(x) for x in fields)
                        if iv <= 0 or it <= 0 or inn <= 0:
                            raise ValidationError(f"{path}:{lineno}: negative/zero OBJ indices unsupported")
                        vi.append(iv - 1)
                        ti.append(it - 1)
                        ni.append(inn - 1)
                    face_v.append(vi)
                    face_vt.append(ti)
                    face_vn.append(ni)
            except ValidationError:
                raise
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    if not face_v:
        raise ValidationError(f"{path}: no faces found")
    v = np.asarray(positions, dtype=np.float64)
    vt = np.asarray(texcoords, dtype=np.float64)
    vn = np.asarray(normals, dtype=np.float64)
    faces = np.asarray(face_v, dtype=np.int32)
    uv = vt[np.asarray(face_vt)]
    # Per-vertex normals: average the corner normals referenced for each vertex.
    acc = np.zeros_like(v)
    for fi, corners in enumerate(face_v):
        for ci, vert in enumerate(corners):
            acc[vert] += vn[face_vn[fi][ci]]
    lengths = np.linalg.norm(acc, axis=1, keepdims=True)
    missing = lengths[:, 0] < 1e-12
    if missing.any():
        acc[missing] = compute_vertex_normals(v, faces)[missing]
        lengths = np.linalg.norm(acc, axis=1, keepdims=True)
    return TemplateMesh(v, faces, uv, acc / lengths)


def save_obj(path, vertices: np.ndarray, faces: np.ndarray, uv: np.ndarray, normals: np.ndarray) -> None:
    """Write the same OBJ subset load_obj reads (per-corner vt, per-vertex vn)."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in vertices:
            fh.write("v %.8f %.8f %.8f\n" % (p[0], p[1], p[2]))
        for corner_uv in uv.reshape(-1, 2):
            fh.write("vt %.8f %.8f\n" % (corner_uv[0], corner_uv[1]))
        for n in normals:
            fh.write("vn %.8f %.8f %.8f\n" % (n[0], n[1], n[2]))
        for fi, face in enumerate(faces):
            corners = []
            for ci in range(3):
                vi = face[ci] + 1
                ti = fi * 3 + ci + 1
                corners.append(f"{vi}/{ti}/{vi}")
            fh.write("f " + " ".join(corners) + "\n")


# ---------------------------------------------------------------------------
# Skeleton and motion


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int  # -1 for the root
    rest_rotation: np.ndarray  # quaternion (w, x, y, z)
    rest_translation: np.ndarray  # (3,)
    dof_axes: tuple[str, ...]  # subset of rx/ry/rz, consumed from theta in order

    def __post_init__(self):
        q = np.asarray(self.rest_rotation, dtype=np.float64)
        t = np.asarray(self.rest_translation, dtype=np.float64)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValidationError(f"joint {self.name}: rest_rotation must be a unit quaternion")
        if t.shape != (3,):
            raise ValidationError(f"joint {self.name}: rest_translation must be a 3-vector")
        for ax in self.dof_axes:
            if ax not in _AXES:
                raise ValidationError(f"joint {self.name}: unknown dof axis {ax!r}")
        object.__setattr__(self, "rest_rotation", _freeze(q))
        object.__setattr__(self, "rest_translation", _freeze(t))
        object.__setattr__(self, "dof_axes", tuple(self.dof_axes))


@dataclass(frozen=True)
class Skeleton:
    joints: tuple[Joint, ...]

    def __post_init__(self):
        joints = tuple(self.joints)
        roots = [i for i, j in enumerate(joints) if j.parent < 0]
        if len(roots) != 1:
            raise ValidationError(f"skeleton must have exactly one root, found {len(roots)}")
        if roots[0] != 0:
            raise ValidationError("root joint must come first")
        for i, j in enumerate(joints):
            if j.parent >= i and j.parent >= 0 or j.parent >= len(joints):
                raise ValidationError(f"joint {i} parent {j.parent} must precede it (tree, topological order)")
        object.__setattr__(self, "joints", joints)

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def num_dofs(self) -> int:
        return sum(len(j.dof_axes) for j in self.joints)


@dataclass(frozen=True)
class MotionFrame:
    theta: np.ndarray  # (P,) joint angles, radians
    alpha: np.ndarray  # (3,) root translation
    z: np.ndarray  # (3,) root rotation, intrinsic XYZ Euler

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        al = np.asarray(self.alpha, dtype=np.float64).reshape(3)
        zz = np.asarray(self.z, dtype=np.float64).reshape(3)
        if not (np.isfinite(th).all() and np.isfinite(al).all() and np.isfinite(zz).all()):
            raise ValidationError("motion frame contains non-finite values")
        object.__setattr__(self, "theta", _freeze(th))
        object.__setattr__(self, "alpha", _freeze(al))
        object.__setattr__(self, "z", _freeze(zz))


def identity_frame(skeleton: Skeleton) -> MotionFrame:
    return MotionFrame(np.zeros(skeleton.num_dofs), np.zeros(3), np.zeros(3))


def load_skeleton(path) -> Skeleton:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    joints = []
    for entry in data["joints"]:
        parent = entry["parent"]
        joints.append(
            Joint(
                name=entry["name"],
                parent=-1 if parent is None else int(parent),
                rest_rotation=np.asarray(entry["rest_rotation"], dtype=np.float64),
                rest_translation=np.asarray(entry["rest_translation"], dtype=np.float64),
                dof_axes=tuple(entry["dof_axes"]),
            )
        )
    return Skeleton(tuple(joints))


def save_skeleton(path, skeleton: Skeleton) -> None:
    data = {
        "joints": [
            {
                "name": j.name,
                "parent": None if j.parent < 0 else j.parent,
                "rest_rotation": [float(x) for x in j.rest_rotation],
                "rest_translation": [float(x) for x in j.rest_translation],
                "dof_axes": list(j.dof_axes),
            }
            for j in skeleton.joints
        ]
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_motion(path, expected_dofs: int | None = None) -> tuple[MotionFrame, ...]:
    """Read JSON-lines motion: one {"theta": [...], "alpha": [...], "z": [...]} per line."""
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                frame = MotionFrame(np.asarray(rec["theta"], dtype=np.float64), rec["alpha"], rec["z"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad motion record: {exc}") from exc
            if expected_dofs is not None and len(frame.theta) != expected_dofs:
                raise ValidationError(
                    f"{path}:{lineno}: theta has {len(frame.theta)} entries, skeleton has {expected_dofs} dofs"
                )
            frames.append(frame)
    if not frames:
        raise ValidationError(f"{path}: empty motion file")
    return tuple(frames)


def save_motion(path, frames: Sequence[MotionFrame]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in frames:
            fh.write(
                json.dumps(
                    {
                        "theta": [float(x) for x in f.theta],
                        "alpha": [float(x) for x in f.alpha],
                        "z": [float(x) for x in f.z],
                    }
                )
                + "\n"
            )


def _compose(ra, ta, rb, tb):
    """Rigid composition (ra, ta) after (rb, tb): x -> ra @ (rb @ x + tb) + ta."""
    return ra @ rb, ra @ tb + ta


def forward_kinematics(
    skeleton: Skeleton, theta: np.ndarray, alpha: np.ndarray, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Global joint transforms for a pose.

    The root global transform is rot(z) . trans(alpha) . rest_root . dof(theta_root);
    every child is parent_global . rest_child . dof(theta_child).  Returns
    (rotations (J, 3, 3), translations (J, 3)).
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if len(theta) != skeleton.num_dofs:
        raise ValidationError(f"theta has {len(theta)} entries, skeleton has {skeleton.num_dofs} dofs")
    alpha = np.asarray(alpha, dtype=np.float64).reshape(3)
    z = np.asarray(z, dtype=np.float64).reshape(3)

    J = skeleton.num_joints
    rots = np.empty((J, 3, 3))
    trans = np.empty((J, 3))
    cursor = 0
    for i, joint in enumerate(skeleton.joints):
        r_local = quat_to_matrix(joint.rest_rotation)
        t_local = joint.rest_translation.copy()
        for ax in joint.dof_axes:
            ang = np.zeros(3)
            ang[_AXES[ax]] = theta[cursor]
            cursor += 1
            r_local = r_local @ euler_to_matrix(ang)
        if joint.parent < 0:
            rz = euler_to_matrix(z)
            # rot(z) . trans(alpha): x -> rz @ (x + alpha)
            r, t = _compose(rz, rz @ alpha, r_local, t_local)
        else:
            r, t = _compose(rots[joint.parent], trans[joint.parent], r_local, t_local)
        rots[i] = r
        trans[i] = t
    return rots, trans


# ---------------------------------------------------------------------------
# Camera


class Projection(NamedTuple):
    xy: np.ndarray  # (..., 2) continuous pixel coordinates
    depth: np.ndarray  # (...,) camera-space z
    in_front: np.ndarray  # (...,) bool, False for points behind the camera


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3) or np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValidationError("rotation must be orthonormal within 1e-6")
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    @property
    def origin(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(
        cls,
        position,
        target,
        up,
        fov_deg: float,
        width: int,
        height: int,
    ) -> "Camera":
        """Pinhole camera at `position` looking at `target`, vertical field of view in degrees."""
        if not (1.0 < fov_deg < 170.0):
            raise ValidationError(f"vertical fov must be in (1, 170) degrees, got {fov_deg}")
        position = np.asarray(position, dtype=np.float64).reshape(3)
        target = np.asarray(target, dtype=np.float64).reshape(3)
        up = np.asarray(up, dtype=np.float64).reshape(3)
        forward = target - position
        fl = np.linalg.norm(forward)
        if fl < 1e-12:
            raise ValidationError("camera position coincides with its target")
        forward = forward / fl
        right = np.cross(forward, up)
        rl = np.linalg.norm(right)
        if rl < 1e-6:
            raise ValidationError("up vector is parallel to the viewing direction")
        right = right / rl
        down = np.cross(forward, right)
        r = np.stack([right, down, forward])
        fy = (height / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(
            fx=fy,
            fy=fy,
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
            rotation=r,
            translation=-r @ position,
        )

    def to_json_dict(self) -> dict:
        k = [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        rt = np.concatenate([self.rotation, self.translation[:, None]], axis=1)
        return {
            "K": k,
            "Rt": [[float(x) for x in row] for row in rt],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Camera":
        k = np.asarray(data["K"], dtype=np.float64)
        rt = np.asarray(data["Rt"], dtype=np.float64)
        if k.shape != (3, 3) or rt.shape != (3, 4):
            raise ValidationError("camera record must carry 3x3 K and 3x4 Rt")
        return cls(
            fx=float(k[0, 0]),
            fy=float(k[1, 1]),
            cx=float(k[0, 2]),
            cy=float(k[1, 2]),
            width=int(data["width"]),
            height=int(data["height"]),
            rotation=rt[:, :3],
            translation=rt[:, 3],
        )


def load_cameras(path) -> dict[str, Camera]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return {entry["id"]: Camera.from_json_dict(entry) for entry in data["cameras"]}


def save_cameras(path, cameras: dict[str, Camera]) -> None:
    data = {"cameras": [{"id": cid, **cam.to_json_dict()} for cid, cam in cameras.items()]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def project(camera: Camera, points: np.ndarray) -> Projection:
    """Project world points to continuous pixel coordinates and camera depth.

    Points behind the camera (depth <= 0) are flagged rather than raised;
    their xy values are computed from the (meaningless) sign-flipped depth
    and should not be used.
    """
    points = np.asarray(points, dtype=np.float64)
    if not np.isfinite(points).all():
        raise ValidationError("project: points must be finite")
    cam = points @ camera.rotation.T + camera.translation
    depth = cam[..., 2]
    in_front = depth > 0
    safe = np.where(depth == 0.0, 1e-300, depth)
    x = camera.fx * cam[..., 0] / safe + camera.cx
    y = camera.fy * cam[..., 1] / safe + camera.cy
    return Projection(np.stack([x, y], axis=-1), depth, in_front)


def unproject(camera: Camera, xy: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Inverse of project at a known camera depth."""
    xy = np.asarray(xy, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (xy[..., 0] - camera.cx) / camera.fx * depth
    y = (xy[..., 1] - camera.cy) / camera.fy * depth
    cam = np.stack([x, y, depth], axis=-1)
    return (cam - camera.translation) @ camera.rotation


# ---------------------------------------------------------------------------
# Ray casting


class RayHit(NamedTuple):
    face: int
    bary: np.ndarray  # (3,)
    distance: float


def _face_tie_keys(mesh: TemplateMesh) -> np.ndarray:
    # Order-independent tiebreak identity for a face: its sorted vertex triple.
    return np.sort(np.asarray(mesh.faces, dtype=np.int64), axis=1)


def ray_cast_batch(
    mesh: TemplateMesh,
    origins: np.ndarray,
    directions: np.ndarray,
    chunk: int = 512,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest ray/triangle intersections, brute force over all faces.

    Returns (face (R,) int32 with -1 for misses, distance (R,), bary (R, 3)).
    Boundary rule: points exactly on an edge count as hits.  Distance ties are
    broken by the lexicographically smallest sorted vertex triple, so the
    result is independent of face ordering.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if np.any(np.linalg.norm(directions, axis=1) < 1e-300):
        raise ValidationError("ray direction must be nonzero")
    v = mesh.vertices
    f = mesh.faces
    a = v[f[:, 0]]
    e1 = v[f[:, 1]] - a
    e2 = v[f[:, 2]] - a
    keys = _face_tie_keys(mesh)

    n_rays = len(origins)
    out_face = np.full(n_rays, -1, dtype=np.int32)
    out_t = np.full(n_rays, np.inf)
    out_bary = np.zeros((n_rays, 3))

    eps = 1e-12
    for start in range(0, n_rays, chunk):
        o = origins[start : start + chunk]  # (r, 3)
        d = directions[start : start + chunk]
        r = len(o)
        # Moller-Trumbore, broadcast rays x faces.
        p = np.cross(d[:, None, :], e2[None, :, :])  # (r, F, 3)
        det = np.einsum("fk,rfk->rf", e1, p)
        ok = np.abs(det) > eps
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = o[:, None, :] - a[None, :, :]
        u = np.einsum("rfk,rfk->rf", s, p) * inv
        q = np.cross(s, e1[None, :, :])
        w = np.einsum("rk,rfk->rf", d, q) * inv
        t = np.einsum("fk,rfk->rf", e2, q) * inv
        hit = ok & (u >= -eps) & (w >= -eps) & (u + w <= 1 + eps) & (t > eps)
        t = np.where(hit, t, np.inf)
        best = np.argmin(t, axis=1)
        rows = np.arange(r)
        best_t = t[rows, best]
        # Resolve exact distance ties order-independently (rare path).
        tie_rows = np.nonzero((t == best_t[:, None]).sum(axis=1) > 1)[0]
        for ri in tie_rows:
            cand = np.nonzero(t[ri] == best_t[ri])[0]
            order = sorted(cand, key=lambda fi: tuple(keys[fi]))
            best[ri] = order[0]
        got = np.isfinite(best_t)
        idx = rows[got]
        out_face[start + idx] = best[idx]
        out_t[start + idx] = best_t[idx]
        uu = u[idx, best[idx]]
        ww = w[idx, best[idx]]
        out_bary[start + idx, 0] = 1.0 - uu - ww
        out_bary[start + idx, 1] = uu
        out_bary[start + idx, 2] = ww
    return out_face, out_t, out_bary


def ray_cast(mesh: TemplateMesh, origin, direction) -> RayHit | None:
    """Nearest intersection of one ray with the mesh, or None on a miss."""
    direction = np.asarray(direction, dtype=np.float64)
    n = np.linalg.norm(direction)
    if n < 1e-300:
        raise ValidationError("ray direction must be nonzero")
    face, t, bary = ray_cast_batch(mesh, np.asarray(origin)[None, :], (direction / n)[None, :])
    if face[0] < 0:
        return None
    return RayHit(int(face[0]), bary[0], float(t[0]))
