"""Multi-instance scene assembly and volumetric editing.

A SceneInstance is a pointer to a shared VOctree plus an affine placement
and a time remap; duplicating an instance copies only the record, never
payload storage, so any number of manifestations of one capture cost one
tree. Per-frame rendering pulls the camera back through each instance's
inverse transform (trees cannot rotate internally), renders per-instance
layers, and merges them with depth-aware alpha blending:

    init  I = I1, D = D1, A = A1
    for i = 2..L:
        fg = D_i <= D, bg = ~fg
        I[fg] = A_i I_i + (1 - A_i) A I     (incoming layer wins in front)
        I[bg] = A I + (1 - A) A_i I_i
        D[fg] = D_i
        A = A + A_i (1 - A)

The loop takes unpremultiplied layer colors and accumulates premultiplied
ones; the scene renderer divides the blended color by the blended alpha
before background compositing, which makes two depth-separated volumes
match joint volume rendering exactly. Edits: paint writes per-voxel target
colors at each ray's opacity-termination voxel; spotlight shadows project
a blurred alpha map from the light onto the ground; distance falloff
darkens pixels by their distance to the light.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .octree import VOctree
from .render import (
    Camera,
    LayerImages,
    RenderOptions,
    composite_background,
    finalize_layer,
    render,
    render_rays,
)

__all__ = [
    "TimeMap",
    "SceneInstance",
    "Light",
    "Scene",
    "blend_layers",
    "render_scene",
    "duplicate",
    "paint",
    "shadow_pass",
    "falloff_pass",
    "ShadowMap",
]


# ---------------------------------------------------------------------------
# time remapping

_OP_RE = re.compile(r"^\s*([a-z]+)\s*(?:\(([^)]*)\))?\s*$")
_OP_SPEC = {
    "shift": 1,
    "clip": 2,
    "reverse": 0,
    "loop": 1,
    "pause": 1,
    "speed": 1,
}


@dataclass(frozen=True)
class TimeMap:
    """Pipeline of frame-index operators applied left to right.

    Expression form: "shift(5)|loop(30)|reverse"; "id" is the identity.
    The result is always clamped into [0, T-1], so the map is total.
    """

    ops: tuple = ()

    @staticmethod
    def parse(expr: str) -> "TimeMap":
        expr = expr.strip()
        if expr in ("", "id"):
            return TimeMap()
        ops = []
        for part in expr.split("|"):
            m = _OP_RE.match(part)
            if not m:
                raise ValueError(f"bad timemap operator {part!r}")
            name, args_s = m.group(1), m.group(2)
            if name not in _OP_SPEC:
                raise ValueError(f"unknown timemap operator {name!r}")
            args = tuple(float(a) for a in args_s.split(",")) if args_s else ()
            if len(args) != _OP_SPEC[name]:
                raise ValueError(f"{name} takes {_OP_SPEC[name]} argument(s), got {len(args)}")
            if name == "loop" and args[0] < 1:
                raise ValueError("loop period must be >= 1")
            if name == "clip" and args[0] > args[1]:
                raise ValueError("clip needs a <= b")
            if name == "speed" and args[0] < 0:
                raise ValueError("speed must be >= 0")
            ops.append((name, args))
        return TimeMap(tuple(ops))

    def __str__(self) -> str:
        if not self.ops:
            return "id"
        parts = []
        for name, args in self.ops:
            if args:
                parts.append(f"{name}({','.join(_fmt_num(a) for a in args)})")
            else:
                parts.append(name)
        return "|".join(parts)

    def apply(self, frame: int, frames: int) -> int:
        g = float(frame)
        for name, args in self.ops:
            if name == "shift":
                g = g - args[0]
            elif name == "clip":
                g = min(max(g, args[0]), args[1])
            elif name == "reverse":
                g = (frames - 1) - g
            elif name == "loop":
                g = g % args[0]
            elif name == "pause":
                g = args[0]
            elif name == "speed":
                g = math.floor(g * args[0])
        return int(min(max(g, 0), frames - 1))


def _fmt_num(a: float) -> str:
    return str(int(a)) if float(a).is_integer() else repr(a)


# ---------------------------------------------------------------------------
# scene graph records


def _check_affine(affine: np.ndarray) -> np.ndarray:
    affine = np.asarray(affine, dtype=np.float64).reshape(4, 4)
    det = abs(np.linalg.det(affine[:3, :3]))
    if det < 1e-9:
        raise ValueError(f"instance transform is singular (|det| = {det:.3e})")
    if not np.allclose(affine[3], [0, 0, 0, 1], atol=1e-12):
        raise ValueError("instance transform must have last row 0 0 0 1")
    return affine


@dataclass
class SceneInstance:
    """One placed manifestation of a shared tree."""

    name: str
    tree: VOctree
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    timemap: TimeMap = field(default_factory=TimeMap)
    visible: bool = True
    yaw_rate: float = 0.0  # degrees of self-rotation per global frame
    source: str | None = None  # .voct path for serialization

    def __post_init__(self):
        self.affine = _check_affine(self.affine)

    def set_affine(self, affine):
        self.affine = _check_affine(affine)

    def effective_affine(self, global_frame: int) -> np.ndarray:
        if self.yaw_rate == 0.0:
            return self.affine
        ang = math.radians(self.yaw_rate * global_frame)
        c, s = math.cos(ang), math.sin(ang)
        center = self.tree.bbox_lo + 0.5 * self.tree.side
        rot = np.eye(4)
        rot[0, 0] = c
        rot[0, 1] = -s
        rot[1, 0] = s
        rot[1, 1] = c
        pre = np.eye(4)
        pre[:3, 3] = -center
        post = np.eye(4)
        post[:3, 3] = center
        return self.affine @ post @ rot @ pre

    def local_frame(self, global_frame: int) -> int:
        return self.timemap.apply(global_frame, self.tree.frames)

    def record_nbytes(self) -> int:
        return self.affine.nbytes + 64 + len(self.name) + len(str(self.timemap))


def duplicate(instance: SceneInstance, name: str | None = None) -> SceneInstance:
    """New instance sharing payload storage; only the record is copied."""
    return SceneInstance(
        name=name or f"{instance.name}-copy",
        tree=instance.tree,  # shared by construction
        affine=instance.affine.copy(),
        timemap=instance.timemap,
        visible=instance.visible,
        yaw_rate=instance.yaw_rate,
        source=instance.source,
    )


@dataclass
class Light:
    kind: str = "spotlight-point"
    position: tuple = (0.5, 0.5, 2.0)
    ground_plane: tuple = (0.0, 0.0, 1.0, 0.0)  # ax + by + cz + d = 0
    shadow_resolution: int = 128
    blur_sigma: float = 1.5
    shadow_strength: float = 0.7
    falloff_r0: float = 1.0
    falloff_min_scale: float = 0.1
    cast_shadows: bool = True
    falloff_enabled: bool = False

    def __post_init__(self):
        if self.kind != "spotlight-point":
            raise ValueError(f"unknown light kind {self.kind!r}")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if not (0.0 <= self.shadow_strength <= 1.0):
            raise ValueError("shadow_strength must lie in [0, 1]")
        if abs(self.plane_distance(self.position)) < 1e-9:
            raise ValueError("light must sit off the ground plane")

    def plane_distance(self, point) -> float:
        a, b, c, d = self.ground_plane
        n = math.sqrt(a * a + b * b + c * c)
        p = np.asarray(point, dtype=np.float64)
        return float((a * p[0] + b * p[1] + c * p[2] + d) / n)


@dataclass
class Scene:
    instances: list = field(default_factory=list)
    lights: list = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.array([0.08, 0.08, 0.10]))
    frame_range: tuple = (0, 0)

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    def visible_instances(self) -> list:
        return [i for i in self.instances if i.visible]

    def instance_by_name(self, name: str) -> SceneInstance:
        for inst in self.instances:
            if inst.name == name:
                return inst
        raise KeyError(f"no instance named {name!r}")

    def memory_report(self) -> dict:
        seen = {}
        for inst in self.instances:
            seen[id(inst.tree)] = inst.tree
        payload = sum(t.payload_nbytes() for t in seen.values())
        records = sum(i.record_nbytes() for i in self.instances)
        return {
            "payload_bytes": payload,
            "instance_bytes": records,
            "total_bytes": payload + records,
            "trees": len(seen),
            "instances": len(self.instances),
        }

    # -- scene file ---------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "version": 1,
            "background": {"type": "constant", "rgb": [float(v) for v in self.background]},
            "frame_range": [int(v) for v in self.frame_range],
            "instances": [
                {
                    "name": i.name,
                    "voct": i.source,
                    "affine": [float(v) for v in i.affine.reshape(-1)],
                    "timemap": str(i.timemap),
                    "visible": bool(i.visible),
                    "yaw_rate": float(i.yaw_rate),
                }
                for i in self.instances
            ],
            "lights": [
                {
                    "kind": l.kind,
                    "position": [float(v) for v in l.position],
                    "ground_plane": [float(v) for v in l.ground_plane],
                    "shadow_resolution": l.shadow_resolution,
                    "blur_sigma": l.blur_sigma,
                    "shadow_strength": l.shadow_strength,
                    "falloff_r0": l.falloff_r0,
                    "falloff_min_scale": l.falloff_min_scale,
                    "cast_shadows": l.cast_shadows,
                    "falloff_enabled": l.falloff_enabled,
                }
                for l in self.lights
            ],
        }

    def save(self, path):
        path = Path(path)
        doc = self.to_json()
        for inst_doc, inst in zip(doc["instances"], self.instances):
            if inst_doc["voct"] is None:
                raise ValueError(f"instance {inst.name!r} has no .voct source path to reference")
        path.write_text(json.dumps(doc, indent=1))

    @classmethod
    def from_json(cls, doc: dict, base_dir: Path | None = None,
                  tree_cache: dict | None = None) -> "Scene":
        cache = {} if tree_cache is None else tree_cache
        instances = []
        for idoc in doc.get("instances", []):
            src = idoc["voct"]
            full = str((base_dir / src) if base_dir is not None else Path(src))
            key = str(Path(full).resolve())
            if key not in cache:
                cache[key] = VOctree.load(full)
            instances.append(
                SceneInstance(
                    name=idoc["name"],
                    tree=cache[key],
                    affine=np.array(idoc.get("affine", np.eye(4).ravel())).reshape(4, 4),
                    timemap=TimeMap.parse(idoc.get("timemap", "id")),
                    visible=idoc.get("visible", True),
                    yaw_rate=idoc.get("yaw_rate", 0.0),
                    source=src,
                )
            )
        lights = [
            Light(
                kind=ldoc.get("kind", "spotlight-point"),
                position=tuple(ldoc["position"]),
                ground_plane=tuple(ldoc.get("ground_plane", (0, 0, 1, 0))),
                shadow_resolution=int(ldoc.get("shadow_resolution", 128)),
                blur_sigma=float(ldoc.get("blur_sigma", 1.5)),
                shadow_strength=float(ldoc.get("shadow_strength", 0.7)),
                falloff_r0=float(ldoc.get("falloff_r0", 1.0)),
                falloff_min_scale=float(ldoc.get("falloff_min_scale", 0.1)),
                cast_shadows=bool(ldoc.get("cast_shadows", True)),
                falloff_enabled=bool(ldoc.get("falloff_enabled", False)),
            )
            for ldoc in doc.get("lights", [])
        ]
        bg = doc.get("background", {"rgb": [0.08, 0.08, 0.10]})["rgb"]
        fr = tuple(doc.get("frame_range", (0, 0)))
        return cls(instances=instances, lights=lights, background=np.array(bg), frame_range=fr)

    @classmethod
    def load(cls, path) -> "Scene":
        path = Path(path)
        doc = json.loads(path.read_text())
        return cls.from_json(doc, base_dir=path.parent)


# ---------------------------------------------------------------------------
# depth-aware alpha blending


def blend_layers(layers: list[LayerImages]) -> LayerImages:
    """Depth-aware alpha blending, exactly the update rules quoted above.

    For a single layer this is the identity. For two or more the returned
    rgb is premultiplied by the returned alpha; divide before compositing
    (render_scene does).
    """
    if not layers:
        raise ValueError("need at least one layer")
    shape = layers[0].shape
    for l in layers[1:]:
        if l.shape != shape:
            raise ValueError(f"layer resolution mismatch: {l.shape} vs {shape}")
    out_i = layers[0].rgb.astype(np.float64).copy()
    out_d = layers[0].depth.astype(np.float64).copy()
    out_a = layers[0].alpha.astype(np.float64).copy()
    for layer in layers[1:]:
        li = layer.rgb.astype(np.float64)
        ld = layer.depth.astype(np.float64)
        la = layer.alpha.astype(np.float64)
        fg = ld <= out_d
        bg = ~fg
        a_i = la[..., None]
        a = out_a[..., None]
        new_i = np.where(
            fg[..., None],
            a_i * li + (1.0 - a_i) * a * out_i,
            a * out_i + (1.0 - a) * a_i * li,
        )
        out_i = new_i
        out_d = np.where(fg, ld, out_d)
        out_a = out_a + la * (1.0 - out_a)
        del bg
    return LayerImages(rgb=out_i, alpha=out_a, depth=out_d)


# ---------------------------------------------------------------------------
# scene rendering


def _is_rigid(m: np.ndarray) -> bool:
    r = m[:3, :3]
    return bool(np.abs(r @ r.T - np.eye(3)).max() <= 1e-9)


def render_instance(inst: SceneInstance, cam: Camera, global_frame: int,
                    opts: RenderOptions = RenderOptions()) -> LayerImages:
    """Render one instance by transforming the viewpoint into tree space.

    Rigid placements compose the camera pose directly (bit-identical to
    rendering the raw tree from the moved camera); scaled/general affines
    fall back to per-ray pullback with per-ray depth rescaling.
    """
    frame = inst.local_frame(global_frame)
    inv = np.linalg.inv(inst.effective_affine(global_frame))
    m = inv @ cam.c2w
    if _is_rigid(m):
        cam2 = Camera(cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, m)
        return render(inst.tree, cam2, frame, opts)
    origins, dirs = cam.rays()
    o_t = origins @ inv[:3, :3].T + inv[:3, 3]
    d_raw = dirs @ inv[:3, :3].T
    nrm = np.linalg.norm(d_raw, axis=1, keepdims=True)
    d_t = d_raw / nrm
    premult, alpha, tbar = render_rays(inst.tree, o_t, d_t, frame, opts)
    return finalize_layer(
        premult, alpha, tbar, (cam.height, cam.width), opts, depth_scale=1.0 / nrm[:, 0]
    )


def render_scene(scene: Scene, cam: Camera, global_frame: int,
                 opts: RenderOptions = RenderOptions(), want_layers: bool = False):
    """Blend the visible instances, apply lighting, composite the background.

    Returns the final H x W x 3 image, or (image, blended, per-instance
    layers) when want_layers is set.
    """
    visible = scene.visible_instances()
    if not visible:
        raise ValueError("scene has no visible instances")
    layers = [render_instance(inst, cam, global_frame, opts) for inst in visible]
    if len(layers) == 1:
        blended = layers[0].copy()
    else:
        raw = blend_layers(layers)
        safe = np.maximum(raw.alpha, 1e-300)[..., None]
        rgb = np.where(raw.alpha[..., None] > 0.0, raw.rgb / safe, 0.0)
        blended = LayerImages(rgb=rgb, alpha=raw.alpha, depth=raw.depth)

    bg = np.broadcast_to(scene.background, blended.rgb.shape).copy()
    for light in scene.lights:
        if light.falloff_enabled:
            scale = falloff_pass(blended, cam, light)
            blended = LayerImages(
                rgb=blended.rgb * scale[..., None], alpha=blended.alpha, depth=blended.depth
            )
        if light.cast_shadows:
            shadow = shadow_pass(visible, light, global_frame, opts)
            bg *= shadow.background_factor(cam)[..., None]
    image = composite_background(blended, bg)
    if want_layers:
        return image, blended, layers
    return image


# ---------------------------------------------------------------------------
# appearance painting


def paint(tree: VOctree, cam: Camera, pixel_set, target_rgb, time_range,
          alpha_threshold: float = 0.99, target_density: float | None = None,
          frame: int | None = None) -> dict:
    """Assign edit channels at each painted ray's termination voxel.

    The terminating voxel is the first leaf where accumulated alpha
    reaches alpha_threshold, rendered at `frame` (default: the start of
    time_range). Rays that never reach the threshold are skipped and
    reported. Edits land in shared payload storage, so every duplicate of
    the tree shows them.
    """
    pixel_set = np.asarray(pixel_set)
    if pixel_set.ndim == 2 and pixel_set.dtype == bool:
        iy, ix = np.nonzero(pixel_set)
    else:
        ix, iy = pixel_set[:, 0], pixel_set[:, 1]
    t0, t1 = int(time_range[0]), int(time_range[1])
    if not (0 <= t0 <= t1 < tree.frames):
        raise ValueError(f"time range {time_range} out of [0, {tree.frames})")
    frame = t0 if frame is None else int(frame)
    origins, dirs = cam.pixel_rays(ix, iy)

    c = tree.coeff_count
    sigma = np.maximum(
        0.0, tree.leaf_data[:, :c].astype(np.float64) @ tree.bases.a[frame].astype(np.float64)
    )
    edited = set()
    skipped = []
    for r in range(len(origins)):
        acc = 0.0
        trans = 1.0
        hit = -1
        for seg in tree.ray_segments(origins[r], dirs[r]):
            a = 1.0 - math.exp(-sigma[seg.leaf] * seg.delta)
            acc += trans * a
            trans *= 1.0 - a
            if acc >= alpha_threshold:
                hit = seg.leaf
                break
        if hit < 0:
            skipped.append((int(ix[r]), int(iy[r])))
            continue
        edited.add(hit)
    if edited:
        tree.ensure_edit_arrays()
        rows = np.fromiter(edited, dtype=np.int64)
        tree.edit_rgb[rows, :3] = np.asarray(target_rgb, dtype=np.float32)
        tree.edit_rgb[rows, 3] = -1.0 if target_density is None else float(target_density)
        tree.edit_t[rows, 0] = t0
        tree.edit_t[rows, 1] = t1
    return {"edited_voxels": len(edited), "skipped_pixels": skipped}


# ---------------------------------------------------------------------------
# lighting passes


@dataclass
class ShadowMap:
    """Blurred occlusion map rendered from the light's viewpoint."""

    light: Light
    cam: Camera
    alpha: np.ndarray  # blurred joint alpha, light-camera raster

    def factor_at_points(self, points: np.ndarray) -> np.ndarray:
        """Darkening factor (1 = unshadowed) for world points on the ground."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        w2c = np.linalg.inv(self.cam.c2w)
        p = points @ w2c[:3, :3].T + w2c[:3, 3]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self.cam.fx * p[:, 0] / p[:, 2] + self.cam.cx - 0.5
            py = self.cam.fy * p[:, 1] / p[:, 2] + self.cam.cy - 0.5
        behind = p[:, 2] <= 0
        occ = map_coordinates(self.alpha, [py, px], order=1, mode="constant", cval=0.0)
        occ[behind] = 0.0
        return 1.0 - self.light.shadow_strength * occ

    def background_factor(self, cam: Camera) -> np.ndarray:
        """Per-pixel darkening of the background as seen by cam, applied
        where the camera ray meets the ground plane in front of the eye."""
        origins, dirs = cam.rays()
        a, b, c, d = self.light.ground_plane
        n = np.array([a, b, c], dtype=np.float64)
        denom = dirs @ n
        num = -(origins @ n + d)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        hit = np.isfinite(t) & (t > 0)
        pts = origins + t[:, None] * dirs
        fac = np.ones(len(dirs))
        if hit.any():
            fac[hit] = self.factor_at_points(pts[hit])
        return fac.reshape(cam.height, cam.width)


def shadow_pass(instances: list[SceneInstance], light: Light, global_frame: int = 0,
                opts: RenderOptions = RenderOptions()) -> ShadowMap:
    """Joint alpha map from the light's virtual camera, blurred and ready
    to project onto the ground. Instances may be empty (no darkening)."""
    pos = np.asarray(light.position, dtype=np.float64)
    if instances:
        centers = [
            inst.effective_affine(global_frame)[:3, :3] @ (inst.tree.bbox_lo + 0.5 * inst.tree.side)
            + inst.effective_affine(global_frame)[:3, 3]
            for inst in instances
        ]
        target = np.mean(centers, axis=0)
    else:
        target = pos - np.array([0.0, 0.0, 1.0])
    if np.linalg.norm(target - pos) < 1e-9:
        target = pos - np.array([0.0, 0.0, 1.0])
    res = light.shadow_resolution
    cam = Camera.look_at(pos, target, width=res, height=res, focal=0.7 * res)
    joint_trans = np.ones((res, res))
    for inst in instances:
        layer = render_instance(inst, cam, global_frame, opts)
        joint_trans *= 1.0 - layer.alpha
    alpha = 1.0 - joint_trans
    if light.blur_sigma > 0:
        alpha = gaussian_filter(alpha, light.blur_sigma, mode="constant", cval=0.0)
    return ShadowMap(light=light, cam=cam, alpha=alpha)


def falloff_pass(layer: LayerImages, cam: Camera, light: Light) -> np.ndarray:
    """Per-pixel brightness scale from voxel-to-light distance.

    scale = clamp(r0^2 / (r0^2 + d^2), min_scale, 1); pixels with zero
    alpha keep scale 1 (nothing to darken)."""
    origins, dirs = cam.rays()
    h, w = layer.shape
    d_img = layer.depth.reshape(-1)
    pts = origins + d_img[:, None] * dirs
    dist = np.linalg.norm(pts - np.asarray(light.position), axis=1)
    r0sq = light.falloff_r0**2
    scale = np.clip(r0sq / (r0sq + dist**2), light.falloff_min_scale, 1.0)
    scale = np.where(layer.alpha.reshape(-1) > 0.0, scale, 1.0)
    return scale.reshape(h, w)
