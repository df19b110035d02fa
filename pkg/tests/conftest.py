import numpy as np
import pytest

from holochar.geometry import Camera, Joint, Skeleton, TemplateMesh, compute_vertex_normals


@pytest.fixture
def quad_mesh() -> TemplateMesh:
    """Unit-ish quad at z=0.5 with the identity uv chart, facing -z."""
    verts = np.array([[-1.0, -1.0, 0.5], [1.0, -1.0, 0.5], [1.0, 1.0, 0.5], [-1.0, 1.0, 0.5]])
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    uv = np.array(
        [[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]], [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]]]
    )
    normals = np.tile([0.0, 0.0, -1.0], (4, 1))
    return TemplateMesh(verts, faces, uv, normals)


@pytest.fixture
def quad_camera() -> Camera:
    return Camera.look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 60.0, 64, 48)


@pytest.fixture
def chain_skeleton() -> Skeleton:
    """Root with full rotation dofs, one child one unit up with an rx hinge."""
    return Skeleton(
        (
            Joint("root", -1, np.array([1.0, 0, 0, 0]), np.zeros(3), ("rx", "ry", "rz")),
            Joint("child", 0, np.array([1.0, 0, 0, 0]), np.array([0.0, 1.0, 0.0]), ("rx",)),
        )
    )


def make_cube_mesh() -> TemplateMesh:
    """Axis-aligned unit cube centered at the origin, outward winding."""
    v = np.array(
        [
            [-0.5, -0.5, -0.5],
            [0.5, -0.5, -0.5],
            [0.5, 0.5, -0.5],
            [-0.5, 0.5, -0.5],
            [-0.5, -0.5, 0.5],
            [0.5, -0.5, 0.5],
            [0.5, 0.5, 0.5],
            [-0.5, 0.5, 0.5],
        ]
    )
    quads = [
        (0, 3, 2, 1),  # -z
        (4, 5, 6, 7),  # +z
        (0, 1, 5, 4),  # -y
        (2, 3, 7, 6),  # +y
        (1, 2, 6, 5),  # +x
        (0, 4, 7, 3),  # -x
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append([a, b, c])
        faces.append([a, c, d])
    faces = np.asarray(faces, dtype=np.int32)
    # 6 separate 0.16-size uv charts in a 3x2 grid, comfortably disjoint.
    uvs = []
    for qi in range(6):
        ox = 0.05 + (qi % 3) * 0.33
        oy = 0.05 + (qi // 3) * 0.5
        s = 0.26
        quad_uv = [(ox, oy), (ox + s, oy), (ox + s, oy + s), (ox, oy + s)]
        uvs.append([quad_uv[0], quad_uv[1], quad_uv[2]])
        uvs.append([quad_uv[0], quad_uv[2], quad_uv[3]])
    return TemplateMesh(v, faces, np.asarray(uvs), compute_vertex_normals(v, faces))
