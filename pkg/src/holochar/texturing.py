"""Per-view partial textures, visibility/angle masks, and multi-view fusion.

Sign conventions, pinned once:

* Visibility compares camera-space depth scalars (the shadow-map test): a
  texel is visible in view i when |D_i(warp(u,v)) - depth_i(pos(u,v))| < eps,
  with D_i looked up at the nearest pixel (no filtering across depth edges).
  Texels that project out of frame or behind the camera are not visible.
* The grazing-angle test uses the texel-to-camera direction
  d = (o_c - pos)/|.|, so a fronto-parallel surface scores angle 0.
* The target-view camera encoding stores the opposite direction,
  (pos - o_c)/|pos - o_c|, i.e. from the surface away from the camera.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import Camera, _freeze
from .raster import DepthBuffer, TexelGeometry, WarpMap, compute_warp, sample_bilinear

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartialTexture:
    """One view's contribution to the atlas: colors plus validity masks.

    `valid` is exactly `vis & angle`, texelwise; invalid texels hold color 0.
    """

    colors: np.ndarray  # (H, W, 3) in [0, 1]
    vis: np.ndarray  # (H, W) bool
    angle: np.ndarray  # (H, W) bool
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        object.__setattr__(self, "colors", _freeze(np.asarray(self.colors, dtype=np.float64)))
        for name in ("vis", "angle", "valid"):
            object.__setattr__(self, name, _freeze(np.asarray(getattr(self, name), dtype=bool)))


@dataclass(frozen=True)
class FusedTexture:
    colors: np.ndarray  # (H, W, 3)
    count: np.ndarray  # (H, W) int32, number of valid views per texel

    def __post_init__(self):
        object.__setattr__(self, "colors", _freeze(np.asarray(self.colors, dtype=np.float64)))
        object.__setattr__(self, "count", _freeze(np.asarray(self.count, dtype=np.int32)))


@dataclass(frozen=True)
class CameraEncoding:
    directions: np.ndarray  # (H, W, 3) unit texel->away-from-camera, zero where uncovered
    degenerate_count: int  # texels coincident with the camera origin

    def __post_init__(self):
        object.__setattr__(self, "directions", _freeze(np.asarray(self.directions, dtype=np.float64)))


def sample_partial(image: np.ndarray, camera: Camera, texgeo: TexelGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Raw per-view texture: bilinear image color at each covered texel's projection.

    Returns (colors (H, W, 3), in_frame (H, W) bool); out-of-frame and
    uncovered texels are zero.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"view image must be (H', W', 3), got {image.shape}")
    if image.shape[0] != camera.height or image.shape[1] != camera.width:
        raise ValidationError(
            f"image size {image.shape[1]}x{image.shape[0]} does not match camera "
            f"{camera.width}x{camera.height}"
        )
    warp = compute_warp(texgeo, camera)
    colors = np.zeros((texgeo.height, texgeo.width, 3))
    sel = warp.in_frame
    if sel.any():
        colors[sel] = sample_bilinear(image, warp.xy[sel])
    return colors, warp.in_frame


def _depth_at(depth: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Depth buffer evaluated at continuous pixel positions.

    Bilinear where all four taps hit a surface; falls back to the containing
    pixel's value when the support straddles the background (interpolating
    into +inf would poison silhouettes).
    """
    h, w = depth.shape
    tx = xy[:, 0] - 0.5
    ty = xy[:, 1] - 0.5
    x0 = np.clip(np.floor(tx).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(ty).astype(np.int64), 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    fx = np.clip(tx - np.floor(tx), 0.0, 1.0)
    fy = np.clip(ty - np.floor(ty), 0.0, 1.0)
    taps = np.stack([depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]])
    finite = np.isfinite(taps).all(axis=0)
    interp = (
        (1 - fy) * ((1 - fx) * taps[0] + fx * taps[1])
        + fy * ((1 - fx) * taps[2] + fx * taps[3])
    )
    ix = np.clip(np.floor(xy[:, 0]).astype(np.int64), 0, w - 1)
    iy = np.clip(np.floor(xy[:, 1]).astype(np.int64), 0, h - 1)
    nearest = depth[iy, ix]
    return np.where(finite, interp, nearest)


def visibility_mask(
    texgeo: TexelGeometry,
    depth_buffer: DepthBuffer,
    warp: WarpMap,
    camera: Camera,
    eps: float,
) -> np.ndarray:
    """Depth-tested texel visibility for one view.

    The depth buffer must come from the same posed mesh and camera as `warp`.
    """
    vis = np.zeros((texgeo.height, texgeo.width), dtype=bool)
    sel = warp.in_frame
    if not sel.any():
        return vis
    buffered = _depth_at(depth_buffer.values, warp.xy[sel])
    texel_depth = texgeo.positions[sel] @ camera.rotation[2] + camera.translation[2]
    vis[sel] = np.abs(buffered - texel_depth) < eps
    return vis


def angle_mask(texgeo: TexelGeometry, camera: Camera, delta_rad: float) -> np.ndarray:
    """Texels whose normal is within `delta_rad` of the direction toward the camera."""
    mask = np.zeros((texgeo.height, texgeo.width), dtype=bool)
    cov = texgeo.coverage
    to_cam = camera.origin - texgeo.positions[cov]
    lengths = np.linalg.norm(to_cam, axis=1)
    lengths[lengths < 1e-12] = 1.0
    cosang = np.einsum("nk,nk->n", texgeo.normals[cov], to_cam / lengths[:, None])
    mask[cov] = np.arccos(np.clip(cosang, -1.0, 1.0)) < delta_rad
    return mask


def make_partial_texture(
    image: np.ndarray,
    camera: Camera,
    texgeo: TexelGeometry,
    depth_buffer: DepthBuffer,
    eps: float,
    delta_rad: float,
) -> PartialTexture:
    """Sample one view and combine its masks; invalid texels are zeroed."""
    colors, in_frame = sample_partial(image, camera, texgeo)
    warp = compute_warp(texgeo, camera)
    vis = visibility_mask(texgeo, depth_buffer, warp, camera, eps)
    ang = angle_mask(texgeo, camera, delta_rad)
    valid = vis & ang
    colors = np.where(valid[..., None], colors, 0.0)
    return PartialTexture(colors, vis, ang, valid)


def fuse(partials) -> FusedTexture:
    """Average valid views per texel; texels no view covers stay zero with count 0.

    `partials` is a mapping view-id -> PartialTexture (or a sequence, which
    gets positional ids).  Summation always runs in sorted view-id order, so
    fusion is a deterministic reduction: handing over the same views in any
    order produces identical bits.
    """
    if not isinstance(partials, dict):
        partials = {i: p for i, p in enumerate(partials)}
    if not partials:
        raise ValidationError("fuse: need at least one partial texture")
    ordered = [partials[k] for k in sorted(partials)]
    shape = ordered[0].colors.shape
    for p in ordered:
        if p.colors.shape != shape:
            raise ValidationError("fuse: partial textures must share W x H")
    acc = np.zeros(shape)
    count = np.zeros(shape[:2], dtype=np.int32)
    for part in ordered:
        acc += np.where(part.valid[..., None], part.colors, 0.0)
        count += part.valid.astype(np.int32)
    colors = np.zeros(shape)
    nz = count > 0
    colors[nz] = acc[nz] / count[nz][:, None]
    return FusedTexture(colors, count)


def camera_encoding(texgeo: TexelGeometry, camera: Camera) -> CameraEncoding:
    """Unit direction from each covered texel away from the target camera origin."""
    out = np.zeros((texgeo.height, texgeo.width, 3))
    cov = texgeo.coverage
    d = texgeo.positions[cov] - camera.origin
    lengths = np.linalg.norm(d, axis=1)
    degenerate = lengths < 1e-9
    n_deg = int(degenerate.sum())
    if n_deg:
        log.warning("camera_encoding: %d texel(s) coincide with the camera origin", n_deg)
    lengths[degenerate] = 1.0
    d = d / lengths[:, None]
    d[degenerate] = 0.0
    out[cov] = d
    return CameraEncoding(out, n_deg)
