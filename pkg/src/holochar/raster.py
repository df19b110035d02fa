"""Deterministic software rasterization.

Three rasterization surfaces share one triangle-fill core:

* screen-space id/depth buffers for a pinhole camera (perspective-correct),
* texture-atlas baking of per-vertex attributes at texel centers (affine in
  uv, since a uv chart is an affine map per face),
* channel-generic texture rendering (any C, bilinear fetch, clamp-to-edge).

Fill convention: a pixel/texel center exactly on an edge belongs to the
triangle for which that edge is a top or left edge, so adjacent triangles
partition boundary samples.  Depth ties go to the lower face index (faces are
processed in ascending order with a strict depth test).  Faces with any vertex
at camera depth <= 1e-9 are skipped entirely; there is no near-plane clipping.

Everything here is single-threaded and bit-deterministic across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import Camera, _freeze, project

_NEAR = 1e-9


@dataclass(frozen=True)
class DepthBuffer:
    """Camera-space depths per pixel; background texels hold +inf."""

    values: np.ndarray  # (H', W') float64

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(np.asarray(self.values, dtype=np.float64)))


@dataclass(frozen=True)
class FrameBuffer:
    values: np.ndarray  # (H', W', C)
    coverage: np.ndarray  # (H', W') bool

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(np.asarray(self.values, dtype=np.float64)))
        object.__setattr__(self, "coverage", _freeze(np.asarray(self.coverage, dtype=bool)))


@dataclass(frozen=True)
class WarpMap:
    """Texel-to-pixel mapping for one view."""

    xy: np.ndarray  # (H, W, 2) continuous pixel coordinates (0 where not covered)
    in_frame: np.ndarray  # (H, W) bool: covered, in front, and inside the image rectangle
    covered: np.ndarray  # (H, W) bool: texel lies on a uv chart

    def __post_init__(self):
        object.__setattr__(self, "xy", _freeze(np.asarray(self.xy, dtype=np.float64)))
        object.__setattr__(self, "in_frame", _freeze(np.asarray(self.in_frame, dtype=bool)))
        object.__setattr__(self, "covered", _freeze(np.asarray(self.covered, dtype=bool)))


@dataclass(frozen=True)
class TexelGeometry:
    """World position/normal of each covered texel center plus chart coverage."""

    positions: np.ndarray  # (H, W, 3)
    normals: np.ndarray  # (H, W, 3) unit where covered
    coverage: np.ndarray  # (H, W) bool
    face: np.ndarray  # (H, W) int32, -1 outside charts
    bary: np.ndarray  # (H, W, 3)

    def __post_init__(self):
        for name in ("positions", "normals", "bary"):
            object.__setattr__(self, name, _freeze(np.asarray(getattr(self, name), dtype=np.float64)))
        object.__setattr__(self, "coverage", _freeze(np.asarray(self.coverage, dtype=bool)))
        object.__setattr__(self, "face", _freeze(np.asarray(self.face, dtype=np.int32)))

    @property
    def width(self) -> int:
        return self.coverage.shape[1]

    @property
    def height(self) -> int:
        return self.coverage.shape[0]


def _top_left(ax, ay, bx, by) -> bool:
    # Positive-area orientation, y-down: top edge runs left-to-right at equal y,
    # left edge runs upward.
    return (ay == by and bx > ax) or (by < ay)


def _fill_triangle(corners: np.ndarray, width: int, height: int):
    """Sample centers covered by one triangle.

    `corners` is (3, 2) in continuous raster coordinates.  Returns
    (ix, iy, lam) index arrays plus barycentric weights (n, 3) ordered like
    the input corners, or None when nothing is covered.

    Each edge function is evaluated with the edge's endpoints in a canonical
    (lexicographic) order and sign-flipped afterwards, so two triangles
    sharing an edge compute bitwise-identical values with opposite signs and
    every boundary sample is claimed exactly once (top-left rule).
    """
    c = corners
    area = (c[1, 0] - c[0, 0]) * (c[2, 1] - c[0, 1]) - (c[1, 1] - c[0, 1]) * (c[2, 0] - c[0, 0])
    perm = (0, 1, 2)
    if area == 0.0:
        return None
    if area < 0.0:
        c = c[[0, 2, 1]]
        perm = (0, 2, 1)
        area = -area

    lo = np.maximum(np.ceil(c.min(axis=0) - 0.5), 0).astype(np.int64)
    hi = np.minimum(np.floor(c.max(axis=0) - 0.5), [width - 1, height - 1]).astype(np.int64)
    if lo[0] > hi[0] or lo[1] > hi[1]:
        return None
    xs = np.arange(lo[0], hi[0] + 1, dtype=np.float64) + 0.5
    ys = np.arange(lo[1], hi[1] + 1, dtype=np.float64) + 0.5
    px, py = np.meshgrid(xs, ys)

    inside = np.ones(px.shape, dtype=bool)
    w = np.empty((3,) + px.shape)
    for i in range(3):
        a = c[(i + 1) % 3]
        b = c[(i + 2) % 3]
        if (a[0], a[1]) <= (b[0], b[1]):
            wi = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        else:
            wi = -((a[0] - b[0]) * (py - b[1]) - (a[1] - b[1]) * (px - b[0]))
        w[i] = wi
        if _top_left(a[0], a[1], b[0], b[1]):
            inside &= wi >= 0.0
        else:
            inside &= wi > 0.0
    if not inside.any():
        return None
    sel = np.nonzero(inside)
    lam = np.empty((len(sel[0]), 3))
    for i in range(3):
        lam[:, perm[i]] = w[i][sel] / area
    ix = sel[1] + lo[0]
    iy = sel[0] + lo[1]
    return ix, iy, lam


def rasterize_ids(mesh, camera: Camera, width: int, height: int):
    """Visible-surface id buffer.

    Returns (face (H', W') int32 with -1 background, bary (H', W', 3)
    perspective-correct, depth (H', W') with +inf background).
    """
    face_buf = np.full((height, width), -1, dtype=np.int32)
    depth_buf = np.full((height, width), np.inf)
    bary_buf = np.zeros((height, width, 3))

    proj = project(camera, mesh.vertices)
    xy = proj.xy
    z = proj.depth
    faces = mesh.faces
    fz = z[faces]  # (F, 3)
    usable = (fz > _NEAR).all(axis=1)
    inv_z = np.where(z > _NEAR, 1.0 / np.where(z > _NEAR, z, 1.0), 0.0)

    for fi in np.nonzero(usable)[0]:
        tri = faces[fi]
        filled = _fill_triangle(xy[tri], width, height)
        if filled is None:
            continue
        ix, iy, lam = filled
        inv_d = lam @ inv_z[tri]
        depth = 1.0 / inv_d
        better = depth < depth_buf[iy, ix]
        if not better.any():
            continue
        ix, iy, lam = ix[better], iy[better], lam[better]
        depth = depth[better]
        beta = lam * inv_z[tri][None, :] * depth[:, None]
        face_buf[iy, ix] = fi
        depth_buf[iy, ix] = depth
        bary_buf[iy, ix] = beta
    return face_buf, bary_buf, depth_buf


def rasterize_depth(mesh, camera: Camera, width: int, height: int) -> DepthBuffer:
    """Nearest-surface camera depth per pixel (+inf where nothing is hit)."""
    _, _, depth = rasterize_ids(mesh, camera, width, height)
    return DepthBuffer(depth)


def _rasterize_uv(faces: np.ndarray, uv: np.ndarray, width: int, height: int):
    """Assign texel centers to uv-chart faces; error on overlapping charts."""
    face_buf = np.full((height, width), -1, dtype=np.int32)
    bary_buf = np.zeros((height, width, 3))
    overlaps: list[tuple[int, int]] = []
    scale = np.array([width, height], dtype=np.float64)
    for fi in range(len(faces)):
        corners = uv[fi] * scale
        filled = _fill_triangle(corners, width, height)
        if filled is None:
            continue
        ix, iy, lam = filled
        prev = face_buf[iy, ix]
        taken = prev >= 0
        if taken.any():
            for p in np.unique(prev[taken]):
                overlaps.append((int(p), fi))
        face_buf[iy, ix] = fi
        bary_buf[iy, ix] = lam
    if overlaps:
        listing = ", ".join(f"({a}, {b})" for a, b in overlaps[:20])
        more = "" if len(overlaps) <= 20 else f" (+{len(overlaps) - 20} more)"
        raise ValidationError(f"uv charts overlap; offending face pairs: [{listing}]{more}")
    return face_buf, bary_buf


def bake_vertex_attribute(
    faces: np.ndarray, uv: np.ndarray, attribute: np.ndarray, width: int, height: int
) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric bake of a per-vertex attribute into the atlas.

    Returns ((H, W, C) values with zeros outside charts, (H, W) coverage).
    """
    face_buf, bary = _rasterize_uv(faces, uv, width, height)
    covered = face_buf >= 0
    attribute = np.asarray(attribute, dtype=np.float64)
    out = np.zeros((height, width) + attribute.shape[1:])
    idx = face_buf[covered]
    corner_vals = attribute[faces[idx]]  # (n, 3, C)
    out[covered] = np.einsum("nc,ncd->nd", bary[covered], corner_vals)
    return out, covered


def bake_texel_geometry(mesh, width: int, height: int) -> TexelGeometry:
    """World position and unit normal of every covered texel center."""
    face_buf, bary = _rasterize_uv(mesh.faces, mesh.uv, width, height)
    covered = face_buf >= 0
    positions = np.zeros((height, width, 3))
    normals = np.zeros((height, width, 3))
    idx = face_buf[covered]
    b = bary[covered]
    positions[covered] = np.einsum("nc,ncd->nd", b, mesh.vertices[mesh.faces[idx]])
    nrm = np.einsum("nc,ncd->nd", b, mesh.vertex_normals[mesh.faces[idx]])
    lengths = np.linalg.norm(nrm, axis=1, keepdims=True)
    lengths[lengths < 1e-12] = 1.0
    normals[covered] = nrm / lengths
    return TexelGeometry(positions, normals, covered, face_buf, bary)


def compute_warp(texgeo: TexelGeometry, camera: Camera) -> WarpMap:
    """Project covered texel positions into a view; flag out-of-frame texels."""
    xy = np.zeros((texgeo.height, texgeo.width, 2))
    in_frame = np.zeros((texgeo.height, texgeo.width), dtype=bool)
    cov = texgeo.coverage
    proj = project(camera, texgeo.positions[cov])
    ok = (
        proj.in_front
        & (proj.xy[:, 0] >= 0.0)
        & (proj.xy[:, 0] < camera.width)
        & (proj.xy[:, 1] >= 0.0)
        & (proj.xy[:, 1] < camera.height)
    )
    xy[cov] = np.where(ok[:, None], proj.xy, 0.0)
    in_frame[cov] = ok
    return WarpMap(xy, in_frame, cov)


def _bilinear_gather(shape_hw: tuple[int, int], xy: np.ndarray):
    """Clamp-to-edge bilinear taps: flat indices (n, 4) and weights (n, 4).

    `xy` holds continuous raster coordinates (centers at half-integers) into a
    (H, W) grid.
    """
    h, w = shape_hw
    tx = xy[..., 0] - 0.5
    ty = xy[..., 1] - 0.5
    x0 = np.floor(tx)
    y0 = np.floor(ty)
    fx = tx - x0
    fy = ty - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    idx = np.stack([y0c * w + x0c, y0c * w + x1c, y1c * w + x0c, y1c * w + x1c], axis=-1)
    wgt = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=-1)
    return idx, wgt


def sample_bilinear(image: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear image fetch with clamp-to-edge addressing.

    `image` is (H, W) or (H, W, C); `xy` is (..., 2) in continuous pixel
    coordinates.  Returns (..., C) (or (...,) for 2-d images).
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    h, w, c = image.shape
    idx, wgt = _bilinear_gather((h, w), np.asarray(xy, dtype=np.float64))
    flat = image.reshape(-1, c)
    out = np.einsum("...k,...kc->...c", wgt, flat[idx])
    return out[..., 0] if squeeze else out


def render(mesh, camera: Camera, texture: np.ndarray, width: int | None = None, height: int | None = None) -> FrameBuffer:
    """Rasterize the mesh and fetch a (H, W, C) atlas texture per pixel.

    Perspective-correct uv interpolation, bilinear fetch.  Channel count is
    arbitrary; uncovered pixels are zero with coverage False.
    """
    texture = np.asarray(texture, dtype=np.float64)
    if texture.ndim == 2:
        texture = texture[..., None]
    if texture.ndim != 3:
        raise ValidationError(f"texture must be (H, W, C), got {texture.shape}")
    width = camera.width if width is None else width
    height = camera.height if height is None else height
    face_buf, bary, _ = rasterize_ids(mesh, camera, width, height)
    covered = face_buf >= 0
    out = np.zeros((height, width, texture.shape[2]))
    if covered.any():
        uv_pix = np.einsum("nc,ncd->nd", bary[covered], mesh.uv[face_buf[covered]])
        atlas_xy = uv_pix * np.array([texture.shape[1], texture.shape[0]], dtype=np.float64)
        out[covered] = sample_bilinear(texture, atlas_xy)
    return FrameBuffer(out, covered)


def render_gather(mesh, camera: Camera, tex_height: int, tex_width: int, width: int | None = None, height: int | None = None):
    """The texture-to-image linear map realized by `render`, as a sparse matrix.

    Returns (csr (H'*W', H*W), coverage (H', W')).  For fixed geometry the
    render is linear in the texture: forward is `csr @ tex.reshape(-1, C)`,
    and its transpose back-propagates image gradients onto texels.  Built from
    the same taps `render` uses, so the two agree bitwise.
    """
    import scipy.sparse as sp

    width = camera.width if width is None else width
    height = camera.height if height is None else height
    face_buf, bary, _ = rasterize_ids(mesh, camera, width, height)
    covered = face_buf >= 0
    rows_cov = np.nonzero(covered.reshape(-1))[0]
    if len(rows_cov) == 0:
        return sp.csr_matrix((height * width, tex_height * tex_width)), covered
    uv_pix = np.einsum("nc,ncd->nd", bary[covered], mesh.uv[face_buf[covered]])
    atlas_xy = uv_pix * np.array([tex_width, tex_height], dtype=np.float64)
    idx, wgt = _bilinear_gather((tex_height, tex_width), atlas_xy)
    rows = np.repeat(rows_cov, 4)
    mat = sp.csr_matrix(
        (wgt.reshape(-1), (rows, idx.reshape(-1))), shape=(height * width, tex_height * tex_width)
    )
    mat.sum_duplicates()
    return mat, covered


def dilate_texture(texture: np.ndarray, valid: np.ndarray, radius: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Pad chart borders by copying the mean of valid 8-neighbors outward.

    Run before bilinear fetches near seams so background zeros do not bleed
    into interpolated samples.  Valid texels keep their exact values.
    Returns (padded texture, grown validity mask).
    """
    tex = np.array(texture, dtype=np.float64)
    squeeze = tex.ndim == 2
    if squeeze:
        tex = tex[..., None]
    mask = np.array(valid, dtype=bool)
    for _ in range(radius):
        m = mask.astype(np.float64)
        acc = np.zeros_like(tex)
        cnt = np.zeros_like(m)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                ys = slice(max(dy, 0), tex.shape[0] + min(dy, 0))
                yd = slice(max(-dy, 0), tex.shape[0] + min(-dy, 0))
                xs = slice(max(dx, 0), tex.shape[1] + min(dx, 0))
                xd = slice(max(-dx, 0), tex.shape[1] + min(-dx, 0))
                acc[yd, xd] += tex[ys, xs] * m[ys, xs, None]
                cnt[yd, xd] += m[ys, xs]
        fill = (~mask) & (cnt > 0)
        tex[fill] = acc[fill] / cnt[fill][:, None]
        mask |= fill
    return (tex[..., 0] if squeeze else tex), mask
