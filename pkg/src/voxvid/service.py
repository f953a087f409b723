"""Interactive editing service over HTTP + WebSocket.

State model: one SceneSession holds the scene graph, a clock
(playing/paused, frame, speed), and a revision counter that increments on
every accepted mutation. Renders run against the session under the same
lock that mutations take, so every emitted frame reflects exactly one
revision (mutations are linearized, no torn reads).

Wire surface:
    GET  /scene                           scene graph + clock + revision
    GET  /render?pose=...&frame=&w=&h=    one PNG frame (X-Revision header)
    POST /instances                       add {voct, name?, affine?, timemap?}
    POST /instances/{name}/duplicate      {name?}
    POST /instances/{name}/transform      {affine: [16]}
    POST /instances/{name}/timemap        {expr}
    POST /instances/{name}/selfrotate     {rate} degrees/frame
    POST /instances/{name}/visible        {visible}
    POST /lights                          light json fragment
    POST /clock                           {playing?, frame?, speed?}
    POST /paint                           {instance, rgb, time_range, mask_png_base64, pose, ...}
    WS   /stream                          pose messages in, frame messages out

Stream frames are single binary messages: little-endian u32 header length,
UTF-8 JSON header {revision, frame, camera_hash, w, h, encoding}, then the
encoded image bytes. Errors are structured {code, field, message}.
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import io
import json
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request, Response, WebSocket
from fastapi.responses import HTMLResponse
from PIL import Image
from starlette.websockets import WebSocketDisconnect

from .compose import Light, Scene, SceneInstance, TimeMap, duplicate, paint, render_scene
from .octree import VOctree
from .render import Camera

__all__ = ["SceneSession", "make_app", "serve"]


def _error(status: int, code: str, field: str, message: str):
    raise HTTPException(status_code=status, detail={"code": code, "field": field, "message": message})


def _encode_image(img: np.ndarray, encoding: str) -> bytes:
    u8 = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="JPEG" if encoding == "jpeg" else "PNG")
    return buf.getvalue()


def _camera_from_fields(pose, w, h, fx=None, fy=None, cx=None, cy=None) -> Camera:
    c2w = np.array(pose, dtype=np.float64).reshape(4, 4)
    focal = 1.5 * max(w, h)
    return Camera(w, h, fx or focal, fy or focal,
                  cx if cx is not None else w / 2.0,
                  cy if cy is not None else h / 2.0, c2w)


def _camera_hash(pose, w, h) -> str:
    blob = np.asarray(pose, dtype=np.float64).tobytes() + f"{w}x{h}".encode()
    return hashlib.sha1(blob).hexdigest()[:12]


class SceneSession:
    """Scene graph + clock behind a single mutation lock."""

    def __init__(self, scene: Scene, base_dir: Path | None = None):
        self.scene = scene
        self.base_dir = base_dir or Path(".")
        self.revision = 0
        self.lock = threading.Lock()
        self.playing = False
        self.frame = int(scene.frame_range[0])
        self.speed = 1.0
        self._tree_cache: dict[str, VOctree] = {}
        for inst in scene.instances:
            if inst.source:
                self._tree_cache[str((self.base_dir / inst.source).resolve())] = inst.tree

    # -- mutations -----------------------------------------------------------

    def mutate(self, fn) -> int:
        """Apply one command atomically; returns the new revision."""
        with self.lock:
            fn(self.scene)
            self.revision += 1
            return self.revision

    def set_clock(self, playing=None, frame=None, speed=None) -> int:
        def apply(_):
            if playing is not None:
                self.playing = bool(playing)
            if frame is not None:
                self.frame = int(frame)
            if speed is not None:
                self.speed = float(speed)

        return self.mutate(apply)

    def tick(self):
        """Advance the clock by one streamed frame (not a mutation)."""
        with self.lock:
            if not self.playing:
                return self.frame
            lo, hi = self.scene.frame_range
            span = max(1, hi - lo + 1)
            self.frame = lo + int(self.frame - lo + self.speed) % span
            return self.frame

    def load_tree(self, voct: str) -> VOctree:
        key = str((self.base_dir / voct).resolve())
        if key not in self._tree_cache:
            self._tree_cache[key] = VOctree.load(key)
        return self._tree_cache[key]

    # -- rendering -----------------------------------------------------------

    def render(self, cam: Camera, frame: int | None = None):
        """Render under the lock: the frame reflects exactly one revision."""
        with self.lock:
            rev = self.revision
            f = self.frame if frame is None else int(frame)
            img = render_scene(self.scene, cam, f)
            return rev, f, img

    def describe(self) -> dict:
        with self.lock:
            doc = self.scene.to_json()
            for idoc, inst in zip(doc["instances"], self.scene.instances):
                idoc["frames"] = inst.tree.frames
                idoc["effective_yaw"] = inst.yaw_rate * self.frame
            doc["clock"] = {"playing": self.playing, "frame": self.frame, "speed": self.speed}
            doc["memory"] = self.scene.memory_report()
            return {"revision": self.revision, "scene": doc}

    def save(self, path):
        with self.lock:
            self.scene.save(path)


def make_app(session: SceneSession) -> FastAPI:
    app = FastAPI(title="voxvid edit service")

    @app.get("/scene")
    def get_scene():
        return session.describe()

    @app.get("/render")
    def get_render(
        pose: str = Query(...),
        frame: int | None = None,
        w: int = 400,
        h: int = 400,
        fx: float | None = None,
        fy: float | None = None,
        cx: float | None = None,
        cy: float | None = None,
        fmt: str = "png",
    ):
        try:
            vals = [float(v) for v in pose.split(",")]
            cam = _camera_from_fields(vals, w, h, fx, fy, cx, cy)
        except (ValueError, IndexError) as e:
            _error(422, "bad_pose", "pose", f"pose must be 16 comma-separated floats: {e}")
        try:
            rev, f, img = session.render(cam, frame)
        except ValueError as e:
            _error(422, "render_failed", "frame", str(e))
        data = _encode_image(img, fmt)
        return Response(
            content=data,
            media_type=f"image/{ 'jpeg' if fmt == 'jpeg' else 'png' }",
            headers={"X-Revision": str(rev), "X-Frame": str(f)},
        )

    def _find(name: str) -> SceneInstance:
        try:
            return session.scene.instance_by_name(name)
        except KeyError:
            _error(404, "unknown_instance", "id", f"no instance named {name!r}")

    @app.post("/instances")
    async def add_instance(req: Request):
        body = await req.json()
        if "voct" not in body:
            _error(422, "missing_field", "voct", "instance needs a 'voct' tree path")
        try:
            tree = session.load_tree(body["voct"])
        except Exception as e:
            _error(422, "bad_tree", "voct", str(e))
        name = body.get("name") or f"instance{len(session.scene.instances)}"
        try:
            inst = SceneInstance(
                name=name,
                tree=tree,
                affine=np.array(body.get("affine", np.eye(4).ravel().tolist())).reshape(4, 4),
                timemap=TimeMap.parse(body.get("timemap", "id")),
                source=body["voct"],
            )
        except ValueError as e:
            _error(422, "bad_instance", "affine", str(e))
        rev = session.mutate(lambda s: s.instances.append(inst))
        return {"revision": rev, "id": name}

    @app.post("/instances/{name}/duplicate")
    async def duplicate_instance(name: str, req: Request):
        body = await req.json() if (await req.body()) else {}
        inst = _find(name)
        copy = duplicate(inst, body.get("name") or f"{name}-copy{len(session.scene.instances)}")
        rev = session.mutate(lambda s: s.instances.append(copy))
        return {"revision": rev, "id": copy.name}

    @app.post("/instances/{name}/transform")
    async def transform_instance(name: str, req: Request):
        body = await req.json()
        inst = _find(name)
        if "affine" not in body:
            _error(422, "missing_field", "affine", "transform needs an 'affine' 16-float list")
        try:
            mat = np.array(body["affine"], dtype=np.float64).reshape(4, 4)
        except ValueError as e:
            _error(422, "bad_affine", "affine", str(e))
        try:
            rev = session.mutate(lambda s: inst.set_affine(mat))
        except ValueError as e:
            _error(422, "singular_affine", "affine", str(e))
        return {"revision": rev}

    @app.post("/instances/{name}/timemap")
    async def set_timemap(name: str, req: Request):
        body = await req.json()
        inst = _find(name)
        try:
            tm = TimeMap.parse(body.get("expr", ""))
        except ValueError as e:
            _error(422, "bad_timemap", "expr", str(e))
        rev = session.mutate(lambda s: setattr(inst, "timemap", tm))
        return {"revision": rev}

    @app.post("/instances/{name}/selfrotate")
    async def set_selfrotate(name: str, req: Request):
        body = await req.json()
        inst = _find(name)
        try:
            rate = float(body.get("rate", 0.0))
        except (TypeError, ValueError):
            _error(422, "bad_rate", "rate", "rate must be a number (degrees per frame)")
        rev = session.mutate(lambda s: setattr(inst, "yaw_rate", rate))
        return {"revision": rev}

    @app.post("/instances/{name}/visible")
    async def set_visible(name: str, req: Request):
        body = await req.json()
        inst = _find(name)
        rev = session.mutate(lambda s: setattr(inst, "visible", bool(body.get("visible", True))))
        return {"revision": rev}

    @app.post("/lights")
    async def add_light(req: Request):
        body = await req.json()
        try:
            light = Light(
                kind=body.get("kind", "spotlight-point"),
                position=tuple(body["position"]),
                ground_plane=tuple(body.get("ground_plane", (0, 0, 1, 0))),
                shadow_resolution=int(body.get("shadow_resolution", 128)),
                blur_sigma=float(body.get("blur_sigma", 1.5)),
                shadow_strength=float(body.get("shadow_strength", 0.7)),
                falloff_r0=float(body.get("falloff_r0", 1.0)),
                falloff_min_scale=float(body.get("falloff_min_scale", 0.1)),
                cast_shadows=bool(body.get("cast_shadows", True)),
                falloff_enabled=bool(body.get("falloff_enabled", False)),
            )
        except (KeyError, ValueError) as e:
            _error(422, "bad_light", "position", str(e))
        rev = session.mutate(lambda s: s.lights.append(light))
        return {"revision": rev}

    @app.post("/clock")
    async def set_clock(req: Request):
        body = await req.json()
        rev = session.set_clock(
            playing=body.get("playing"), frame=body.get("frame"), speed=body.get("speed")
        )
        return {"revision": rev}

    @app.post("/paint")
    async def do_paint(req: Request):
        body = await req.json()
        for key in ("instance", "rgb", "time_range", "mask_png_base64", "pose"):
            if key not in body:
                _error(422, "missing_field", key, f"paint needs {key!r}")
        inst = _find(body["instance"])
        mask_img = Image.open(io.BytesIO(base64.b64decode(body["mask_png_base64"])))
        mask = np.asarray(mask_img.convert("L"), dtype=np.float32) / 255.0 > 0.5
        h, w = mask.shape
        cam = _camera_from_fields(body["pose"], w, h, body.get("fx"), body.get("fy"),
                                  body.get("cx"), body.get("cy"))
        inv = np.linalg.inv(inst.affine)
        m = inv @ cam.c2w
        r = m[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            _error(422, "non_rigid", "instance", "paint requires a rigid instance placement")
        cam_tree = Camera(cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, m)
        with session.lock:
            try:
                result = paint(
                    inst.tree, cam_tree, mask, tuple(body["rgb"]),
                    tuple(body["time_range"]),
                    target_density=body.get("target_density"),
                )
            except ValueError as e:
                raise HTTPException(
                    status_code=422,
                    detail={"code": "bad_paint", "field": "time_range", "message": str(e)},
                )
            session.revision += 1
            rev = session.revision
        return {"revision": rev, **{k: v for k, v in result.items() if k != "skipped_pixels"},
                "skipped": len(result["skipped_pixels"])}

    @app.websocket("/stream")
    async def stream(ws: WebSocket):
        await ws.accept()
        latest: dict = {}
        got_pose = asyncio.Event()
        closed = asyncio.Event()

        async def reader():
            try:
                while True:
                    msg = await ws.receive_text()
                    doc = json.loads(msg)
                    if doc.get("type") == "pose":
                        latest.update(doc)  # coalesce: only the newest pose matters
                        got_pose.set()
            except (WebSocketDisconnect, RuntimeError):
                closed.set()
                got_pose.set()

        reader_task = asyncio.create_task(reader())
        last_rev = -1
        try:
            while not closed.is_set():
                if "pose" not in latest:
                    await got_pose.wait()
                    got_pose.clear()
                    continue
                playing = session.playing
                if not playing and last_rev == session.revision and not got_pose.is_set():
                    # idle: wait for a new pose or wake periodically for mutations
                    try:
                        await asyncio.wait_for(got_pose.wait(), timeout=0.05)
                    except asyncio.TimeoutError:
                        pass
                    got_pose.clear()
                    continue
                got_pose.clear()
                doc = dict(latest)
                try:
                    cam = _camera_from_fields(
                        doc["pose"], int(doc.get("w", 256)), int(doc.get("h", 256)),
                        doc.get("fx"), doc.get("fy"), doc.get("cx"), doc.get("cy"),
                    )
                except ValueError:
                    await ws.send_text(json.dumps({"type": "error", "code": "bad_pose"}))
                    continue
                frame = session.tick()
                rev, f, img = await asyncio.to_thread(session.render, cam, frame)
                last_rev = rev
                encoding = doc.get("encoding", "png")
                payload = await asyncio.to_thread(_encode_image, img, encoding)
                header = json.dumps(
                    {
                        "revision": rev,
                        "frame": f,
                        "camera_hash": _camera_hash(doc["pose"], cam.width, cam.height),
                        "w": cam.width,
                        "h": cam.height,
                        "encoding": encoding,
                    }
                ).encode()
                msg = len(header).to_bytes(4, "little") + header + payload
                await ws.send_bytes(msg)
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            reader_task.cancel()

    frontend = Path(__file__).resolve().parent.parent.parent / "frontend"
    if (frontend / "dist").is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/dist", StaticFiles(directory=frontend / "dist"), name="dist")

    @app.get("/", response_class=HTMLResponse)
    def index():
        page = frontend / "index.html"
        if page.exists():
            return page.read_text()
        return "<html><body><h3>voxvid edit service</h3><p>No frontend build found.</p></body></html>"

    return app


def serve(scene_path, host: str = "127.0.0.1", port: int = 8000, save_on_exit=None):
    """Run the service until terminated; scene state is flushed on shutdown."""
    import uvicorn

    scene_path = Path(scene_path)
    scene = Scene.load(scene_path)
    session = SceneSession(scene, base_dir=scene_path.parent)
    app = make_app(session)

    @app.on_event("shutdown")
    def flush():
        session.save(save_on_exit or scene_path)

    uvicorn.run(app, host=host, port=port, log_level="warning")
