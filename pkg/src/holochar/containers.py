"""File containers: the float texture format, PNG helpers, and point-cloud IO.

The float container ("HCTX") is the interchange format for every atlas and
multi-channel buffer:

    magic "HCTX" | u32 version | u32 W | u32 H | u32 C | u8 dtype (0 = f32) | 3 pad bytes
    payload: H*W*C little-endian float32, row-major (v, u, c)
"""

from __future__ import annotations

import json
import struct

import numpy as np
from PIL import Image

from .errors import ValidationError

HCTX_MAGIC = b"HCTX"
HCTX_VERSION = 1


def save_hctx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[..., None]
    if array.ndim != 3:
        raise ValidationError(f"float container expects (H, W, C), got {array.shape}")
    h, w, c = array.shape
    with open(path, "wb") as fh:
        fh.write(HCTX_MAGIC)
        fh.write(struct.pack("<IIIIB3x", HCTX_VERSION, w, h, c, 0))
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def load_hctx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != HCTX_MAGIC:
            raise ValidationError(f"{path}: not a float texture container")
        version, w, h, c = struct.unpack("<IIII", fh.read(16))
        (dtype_code,) = struct.unpack("<B3x", fh.read(4))
        if version != HCTX_VERSION or dtype_code != 0:
            raise ValidationError(f"{path}: unsupported container version/dtype")
        raw = fh.read(4 * h * w * c)
        if len(raw) != 4 * h * w * c:
            raise ValidationError(f"{path}: payload truncated (want {4 * h * w * c} bytes, got {len(raw)})")
        return np.frombuffer(raw, dtype="<f4").reshape(h, w, c).astype(np.float64)


def save_png(path, image: np.ndarray) -> None:
    """First three channels, clamped to [0, 1], as an 8-bit RGB PNG.

    Single-channel input becomes grayscale.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    data = np.clip(image[:, :, :3], 0.0, 1.0)
    quantized = np.round(data * 255.0).astype(np.uint8)
    if quantized.shape[2] == 1:
        Image.fromarray(quantized[:, :, 0], mode="L").save(path, format="PNG")
    else:
        if quantized.shape[2] == 2:
            quantized = np.concatenate([quantized, np.zeros_like(quantized[:, :, :1])], axis=2)
        Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """PNG to float (H, W, C) in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB") else img)
    out = arr.astype(np.float64) / 255.0
    if out.ndim == 2:
        out = out[..., None]
    return out


def load_mask_png(path, threshold: int = 128) -> np.ndarray:
    """8-bit mask PNG to boolean (H, W); foreground where value >= threshold."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr >= threshold


def save_point_cloud(path, points: np.ndarray) -> None:
    """Write points as ascii PLY (.ply) or whitespace xyz (.xyz)."""
    points = np.asarray(points, dtype=np.float64)
    text = str(path)
    if text.endswith(".xyz"):
        with open(path, "w", encoding="utf-8") as fh:
            for p in points:
                fh.write("%.9g %.9g %.9g\n" % (p[0], p[1], p[2]))
        return
    with open(path, "wb") as fh:
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(points)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n"
        )
        fh.write(header.encode("ascii"))
        for p in points:
            fh.write((f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n").encode("ascii"))


def load_point_cloud(path) -> np.ndarray:
    """Read xyz text or PLY (ascii / binary_little_endian) vertex positions."""
    text = str(path)
    if text.endswith(".xyz"):
        pts = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) < 3:
                    raise ValidationError(f"{path}:{lineno}: expected 'x y z'")
                pts.append([float(x) for x in parts[:3]])
        if not pts:
            raise ValidationError(f"{path}: no points")
        return np.asarray(pts, dtype=np.float64)
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise ValidationError(f"{path}: not a PLY file")
        fmt = None
        count = 0
        props: list[tuple[str, str]] = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise ValidationError(f"{path}: unexpected end of header")
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == b"format":
                fmt = tokens[1].decode()
            elif tokens[0] == b"element":
                in_vertex = tokens[1] == b"vertex"
                if in_vertex:
                    count = int(tokens[2])
            elif tokens[0] == b"property" and in_vertex:
                props.append((tokens[1].decode(), tokens[2].decode()))
            elif tokens[0] == b"end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise ValidationError(f"{path}: unsupported PLY format {fmt}")
        names = [name for _, name in props]
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise ValidationError(f"{path}: vertex element lacks property {axis}")
        if fmt == "ascii":
            rows = []
            for _ in range(count):
                rows.append([float(v) for v in fh.readline().split()])
            data = np.asarray(rows, dtype=np.float64)
        else:
            type_map = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
                        "uchar": "<u1", "uint8": "<u1", "int": "<i4", "int32": "<i4"}
            try:
                dt = np.dtype([(name, type_map[t]) for t, name in props])
            except KeyError as exc:
                raise ValidationError(f"{path}: unsupported PLY property type {exc}") from exc
            raw = fh.read(dt.itemsize * count)
            if len(raw) != dt.itemsize * count:
                raise ValidationError(f"{path}: truncated PLY payload")
            rec = np.frombuffer(raw, dtype=dt)
            data = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
            return data
        cols = [names.index(a) for a in ("x", "y", "z")]
        return data[:, cols]


def save_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
