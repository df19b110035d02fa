"""Pull-push texture completion.

Deterministic stand-in for a trained texture net: texels no view reached are
filled from progressively coarser weighted averages, while every valid texel
keeps its exact input value.  The pull phase builds a confidence-weighted
mip pyramid; the push phase interpolates missing texels from the next coarser
level, finest last.
"""

from __future__ import annotations

import numpy as np


def _pull(color: np.ndarray, weight: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w, c = color.shape
    ph, pw = h + (h % 2), w + (w % 2)
    if (ph, pw) != (h, w):
        color = np.pad(color, ((0, ph - h), (0, pw - w), (0, 0)))
        weight = np.pad(weight, ((0, ph - h), (0, pw - w)))
    cw = color * weight[..., None]
    cw2 = cw.reshape(ph // 2, 2, pw // 2, 2, c).sum(axis=(1, 3))
    w2 = weight.reshape(ph // 2, 2, pw // 2, 2).sum(axis=(1, 3))
    safe = np.maximum(w2, 1e-12)
    c2 = cw2 / safe[..., None]
    return c2, np.minimum(w2 * 0.25, 1.0)


def _push_bilinear(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    """Upsample 2x with half-texel-aligned bilinear weights, cropped to (h, w)."""
    ch, cw, c = coarse.shape
    ys = (np.arange(h) + 0.5) / 2.0 - 0.5
    xs = (np.arange(w) + 0.5) / 2.0 - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, ch - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, cw - 1)
    y1 = np.clip(y0 + 1, 0, ch - 1)
    x1 = np.clip(x0 + 1, 0, cw - 1)
    fy = (ys - np.floor(ys))[:, None, None]
    fx = (xs - np.floor(xs))[None, :, None]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x1]
    d = coarse[y1][:, x0]
    e = coarse[y1][:, x1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * d + fx * e)


def complete_texture(texture: np.ndarray, count: np.ndarray) -> np.ndarray:
    """Fill texels with count 0 from valid neighborhoods; valid texels unchanged.

    `texture` is (H, W, C); `count` is the per-texel valid-view count (any
    nonnegative array; only >0 matters).
    """
    texture = np.asarray(texture, dtype=np.float64)
    squeeze = texture.ndim == 2
    if squeeze:
        texture = texture[..., None]
    valid = np.asarray(count) > 0
    if valid.all():
        out = texture.copy()
        return out[..., 0] if squeeze else out

    levels = [(np.where(valid[..., None], texture, 0.0), valid.astype(np.float64))]
    while min(levels[-1][0].shape[:2]) > 1:
        levels.append(_pull(*levels[-1]))

    filled = levels[-1][0]
    for color, weight in reversed(levels[:-1]):
        up = _push_bilinear(filled, color.shape[0], color.shape[1])
        have = weight > 0
        filled = np.where(have[..., None], color, up)
    out = np.where(valid[..., None], texture, filled)
    return out[..., 0] if squeeze else out
