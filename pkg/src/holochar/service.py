"""Interactive render service.

HTTP surface:
  GET /meta                         scene bounds, frame count, resolutions, stages
  GET /debug/{frame}/{view}/{layer} mask/texture layers as PNG
  WS  /ws (subprotocol "holochar.v1")

The socket speaks JSON control messages and binary frames.  A camera message

    {"position": [x,y,z], "look_at": [x,y,z], "up": [x,y,z],
     "fov_deg": 40, "frame": 0, "seq": 7}

yields one binary reply: 4-byte big-endian PNG length, the PNG bytes, then a
JSON trailer {"seq", "render_ms", "frame", "mode"}.  Replies preserve request
order; while a render is in flight newer camera messages replace any queued
one (latest wins), which the echoed `seq` makes observable.  Invalid messages
produce {"type": "error", ...} text frames and leave the connection open.
"""

from __future__ import annotations

import asyncio
import io
import json
import struct
import threading
import time

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse, Response
from starlette.websockets import WebSocket, WebSocketDisconnect

from . import pipeline, refine, texturing
from .errors import ValidationError
from .geometry import Camera

SUBPROTOCOL = "holochar.v1"
DEBUG_LAYERS = ("vis", "angle", "valid", "count", "partial", "cam")


def _png_bytes(image: np.ndarray) -> bytes:
    from PIL import Image

    data = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if data.ndim == 2:
        data = data[..., None]
    if data.shape[2] == 1:
        pil = Image.fromarray(np.round(data[:, :, 0] * 255).astype(np.uint8), mode="L")
    else:
        pil = Image.fromarray(np.round(data[:, :, :3] * 255).astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


class RenderSession:
    """Shared immutable assets plus per-frame caches for the service."""

    def __init__(self, project: pipeline.Project, min_render_ms: float = 0.0):
        self.project = project
        self.min_render_ms = float(min_render_ms)
        self._nets = pipeline.load_trained_nets(project)
        self._bundles: dict[int, pipeline.TextureBundle] = {}
        self._baseline: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()
        self._bounds = None

    def bounds(self):
        if self._bounds is None:
            lo, hi = self.project.scene_bounds()
            self._bounds = ([float(x) for x in lo], [float(x) for x in hi])
        return self._bounds

    def bundle(self, frame: int) -> pipeline.TextureBundle:
        with self._lock:
            if frame not in self._bundles:
                self._bundles[frame] = pipeline.texture_frame(self.project, frame)
            return self._bundles[frame]

    def baseline(self, frame: int) -> np.ndarray:
        with self._lock:
            cached = self._baseline.get(frame)
        if cached is not None:
            return cached
        bundle = self.bundle(frame)
        tex = pipeline.baseline_texture(self.project, bundle)
        with self._lock:
            self._baseline[frame] = tex
        return tex

    def render_camera(self, camera: Camera, frame: int) -> tuple[np.ndarray, str]:
        """Full pipeline for an arbitrary virtual camera, stateless per request."""
        start = time.perf_counter()
        frame = self.project.frame_checked(frame)
        bundle = self.bundle(frame)
        posed = self.project.posed(frame)
        if self._nets is None:
            from .raster import render

            image = render(posed, camera, self.baseline(frame)).values
            mode = "baseline"
        else:
            texfeat, srnet = self._nets
            t_cam = texturing.camera_encoding(bundle.texgeo, camera).directions
            t_dyn = refine.texfeat_forward(texfeat, bundle.fused.colors, bundle.motion_normals, t_cam)
            from .raster import render

            fb = render(posed, camera, t_dyn.astype(np.float64))
            image = np.clip(refine.srnet_forward(srnet, fb.values.astype(srnet.dtype)).astype(np.float64), 0, 1)
            mode = "refined"
        if self.min_render_ms:
            elapsed = (time.perf_counter() - start) * 1e3
            if elapsed < self.min_render_ms:
                time.sleep((self.min_render_ms - elapsed) / 1e3)
        return image, mode


def parse_camera_message(data: dict, render_wh: tuple[int, int]) -> tuple[Camera, int, int]:
    for key in ("position", "look_at", "up", "fov_deg", "frame", "seq"):
        if key not in data:
            raise ValidationError(f"camera message missing field {key!r}")
    try:
        fov = float(data["fov_deg"])
        frame = int(data["frame"])
        seq = int(data["seq"])
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad camera message scalar: {exc}") from exc
    camera = Camera.look_at(
        np.asarray(data["position"], dtype=np.float64),
        np.asarray(data["look_at"], dtype=np.float64),
        np.asarray(data["up"], dtype=np.float64),
        fov,
        render_wh[0],
        render_wh[1],
    )
    return camera, frame, seq


def create_app(config_path=None, project: pipeline.Project | None = None, min_render_ms: float = 0.0) -> FastAPI:
    app = FastAPI(title="holochar render service")
    if project is None and config_path is not None:
        project = pipeline.Project.open(config_path)
    session = RenderSession(project, min_render_ms) if project is not None else None
    app.state.session = session

    def _session() -> RenderSession:
        if app.state.session is None:
            raise ValidationError("no project loaded")
        return app.state.session

    @app.get("/meta")
    def meta():
        if app.state.session is None:
            return JSONResponse({"error": "no project loaded"}, status_code=404)
        s = app.state.session
        lo, hi = s.bounds()
        cfg = s.project.config
        return {
            "project": cfg.name,
            "frames": s.project.num_frames,
            "bounds": {"min": lo, "max": hi},
            "texture_size": list(s.project.texture_wh),
            "render_size": list(s.project.render_wh),
            "input_views": list(cfg.input_views),
            "stages": ["pose", "texture", "fuse", "refine" if s._nets else "baseline", "render"],
            "protocol": SUBPROTOCOL,
        }

    @app.get("/debug/{frame}/{view}/{layer}")
    def debug_layer(frame: int, view: str, layer: str):
        if app.state.session is None:
            return JSONResponse({"error": "no project loaded"}, status_code=404)
        s = app.state.session
        if layer not in DEBUG_LAYERS:
            return JSONResponse(
                {"error": f"unknown layer {layer!r}", "layers": list(DEBUG_LAYERS)}, status_code=404
            )
        if not (0 <= frame < s.project.num_frames):
            return JSONResponse({"error": f"frame {frame} out of range"}, status_code=404)
        if view not in s.project.cameras:
            return JSONResponse(
                {"error": f"unknown view {view!r}", "views": sorted(s.project.cameras)}, status_code=404
            )
        bundle = s.bundle(frame)
        if layer == "count":
            c_in = max(len(s.project.config.input_views), 1)
            image = bundle.fused.count.astype(np.float64) / c_in
        elif layer == "cam":
            dirs = texturing.camera_encoding(bundle.texgeo, s.project.cameras[view]).directions
            image = (dirs + 1.0) / 2.0
        elif layer == "partial":
            image = bundle.partials[view].colors
        else:
            image = getattr(bundle.partials[view], layer).astype(np.float64)
        return Response(content=_png_bytes(image), media_type="image/png")

    @app.websocket("/ws")
    async def ws_endpoint(websocket: WebSocket):
        offered = websocket.headers.get("sec-websocket-protocol", "")
        protocols = [p.strip() for p in offered.split(",") if p.strip()]
        if SUBPROTOCOL not in protocols:
            await websocket.close(code=1002, reason=f"subprotocol {SUBPROTOCOL} required")
            return
        await websocket.accept(subprotocol=SUBPROTOCOL)
        if app.state.session is None:
            await websocket.send_text(json.dumps({"type": "error", "message": "no project loaded"}))
            await websocket.close()
            return
        s: RenderSession = app.state.session

        loop = asyncio.get_running_loop()
        latest: dict = {}
        wake = asyncio.Event()
        closed = asyncio.Event()

        async def receiver():
            try:
                while True:
                    text = await websocket.receive_text()
                    try:
                        data = json.loads(text)
                    except json.JSONDecodeError:
                        await websocket.send_text(json.dumps({"type": "error", "message": "bad JSON"}))
                        continue
                    # Latest wins: a message arriving while a render is in
                    # flight replaces any queued one.
                    latest["msg"] = data
                    wake.set()
            except WebSocketDisconnect:
                closed.set()
                wake.set()

        recv_task = asyncio.create_task(receiver())
        try:
            while True:
                await wake.wait()
                wake.clear()
                if closed.is_set():
                    break
                data = latest.pop("msg", None)
                if data is None:
                    continue
                try:
                    camera, frame, seq = parse_camera_message(data, s.project.render_wh)
                    s.project.frame_checked(frame)
                except ValidationError as exc:
                    payload = {"type": "error", "message": str(exc)}
                    if isinstance(data, dict) and "seq" in data:
                        try:
                            payload["seq"] = int(data["seq"])
                        except (TypeError, ValueError):
                            pass
                    await websocket.send_text(json.dumps(payload))
                    continue
                start = time.perf_counter()
                image, mode = await loop.run_in_executor(None, s.render_camera, camera, frame)
                render_ms = (time.perf_counter() - start) * 1e3
                png = _png_bytes(image)
                trailer = json.dumps(
                    {"seq": seq, "render_ms": round(render_ms, 3), "frame": frame, "mode": mode}
                ).encode("utf-8")
                await websocket.send_bytes(struct.pack(">I", len(png)) + png + trailer)
        finally:
            recv_task.cancel()

    return app
