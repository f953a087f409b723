"""Posed multi-view video datasets: in-memory form and directory layout.

On disk a dataset is:

    cameras.json            intrinsics/extrinsics and global metadata
    frames/<view>/NNNN.png  8-bit RGB frames
    masks/<view>/NNNN.png   8-bit foreground mattes
    background/<view>.png   per-view plates (only when background.type == per_view)

cameras.json fields: version; frames (count T); scene_bbox {lo: [x,y,z],
side}; background {type: constant|per_view, rgb?}; views: list of
{name, role (train|eval), width, height, fx, fy, cx, cy, w2c} with w2c a
row-major 4x4 world-to-camera matrix. Camera space is right-handed, +z
forward, pixel centers at (i + 0.5, j + 0.5).

The loaded w2c matrices are kept verbatim so save(load(dir)) reproduces
the files byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .images import load_png, save_png
from .render import Camera

__all__ = ["Dataset", "save_dataset", "load_dataset", "rigid_inverse"]


def rigid_inverse(m: np.ndarray) -> np.ndarray:
    r = m[:3, :3]
    t = m[:3, 3]
    out = np.eye(4)
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ t
    return out


@dataclass
class Dataset:
    """All views/frames of one captured (or synthesized) performance."""

    w2c: np.ndarray  # (V, 4, 4) world-to-camera, row-major semantics
    intrinsics: np.ndarray  # (V, 6): width, height, fx, fy, cx, cy
    roles: list[str]
    images: np.ndarray  # (V, T, H, W, 3) float32 in [0, 1]
    masks: np.ndarray  # (V, T, H, W) float32 in [0, 1]
    background: np.ndarray  # (3,) constant color or (V, H, W, 3) plates
    bbox_lo: np.ndarray
    bbox_side: float
    view_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.w2c = np.asarray(self.w2c, dtype=np.float64)
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.images = np.asarray(self.images, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.float32)
        self.background = np.asarray(self.background, dtype=np.float32)
        self.bbox_lo = np.asarray(self.bbox_lo, dtype=np.float64)
        v = self.w2c.shape[0]
        if self.images.ndim != 5 or self.images.shape[0] != v:
            raise ValueError(f"images must be (V, T, H, W, 3) with V={v}, got {self.images.shape}")
        if self.masks.shape != self.images.shape[:4]:
            raise ValueError(
                f"masks shape {self.masks.shape} inconsistent with images {self.images.shape[:4]}"
            )
        if self.frames < 1:
            raise ValueError("dataset needs at least one frame")
        if self.masks.min() < 0.0 or self.masks.max() > 1.0:
            raise ValueError("masks must lie in [0, 1]")
        if not self.view_names:
            self.view_names = [f"view{i:03d}" for i in range(v)]
        if len(self.roles) != v:
            raise ValueError("one role per view required")
        for i in range(v):
            w, h = int(self.intrinsics[i, 0]), int(self.intrinsics[i, 1])
            if (h, w) != self.images.shape[2:4]:
                raise ValueError(
                    f"view {self.view_names[i]} declares {w}x{h} but images are "
                    f"{self.images.shape[3]}x{self.images.shape[2]}"
                )

    @property
    def n_views(self) -> int:
        return self.w2c.shape[0]

    @property
    def frames(self) -> int:
        return self.images.shape[1]

    @property
    def height(self) -> int:
        return self.images.shape[2]

    @property
    def width(self) -> int:
        return self.images.shape[3]

    def camera(self, view: int) -> Camera:
        w, h, fx, fy, cx, cy = self.intrinsics[view]
        return Camera(int(w), int(h), fx, fy, cx, cy, rigid_inverse(self.w2c[view]))

    def background_for(self, view: int) -> np.ndarray:
        if self.background.ndim == 1:
            return np.broadcast_to(self.background, (self.height, self.width, 3))
        return self.background[view]

    def view_indices(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == role]

    @staticmethod
    def from_cameras(cameras: list[Camera], roles, images, masks, background, bbox_lo,
                     bbox_side, view_names=None) -> "Dataset":
        w2c = np.stack([rigid_inverse(c.c2w) for c in cameras])
        intr = np.array([[c.width, c.height, c.fx, c.fy, c.cx, c.cy] for c in cameras])
        return Dataset(w2c, intr, list(roles), images, masks, background, bbox_lo,
                       bbox_side, view_names=list(view_names or []))


def save_dataset(ds: Dataset, path):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    views = []
    for i, name in enumerate(ds.view_names):
        w, h, fx, fy, cx, cy = ds.intrinsics[i]
        views.append(
            {
                "name": name,
                "role": ds.roles[i],
                "width": int(w),
                "height": int(h),
                "fx": fx,
                "fy": fy,
                "cx": cx,
                "cy": cy,
                "w2c": [float(v) for v in ds.w2c[i].reshape(-1)],
            }
        )
    constant_bg = ds.background.ndim == 1
    meta = {
        "version": 1,
        "frames": ds.frames,
        "scene_bbox": {"lo": [float(v) for v in ds.bbox_lo], "side": float(ds.bbox_side)},
        "background": (
            {"type": "constant", "rgb": [float(v) for v in ds.background]}
            if constant_bg
            else {"type": "per_view"}
        ),
        "views": views,
    }
    (root / "cameras.json").write_text(json.dumps(meta, indent=1))
    for i, name in enumerate(ds.view_names):
        fdir = root / "frames" / name
        mdir = root / "masks" / name
        fdir.mkdir(parents=True, exist_ok=True)
        mdir.mkdir(parents=True, exist_ok=True)
        for t in range(ds.frames):
            save_png(fdir / f"{t:04d}.png", ds.images[i, t])
            save_png(mdir / f"{t:04d}.png", ds.masks[i, t])
        if not constant_bg:
            bdir = root / "background"
            bdir.mkdir(exist_ok=True)
            save_png(bdir / f"{name}.png", ds.background[i])


def load_dataset(path) -> Dataset:
    root = Path(path)
    meta_path = root / "cameras.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no cameras.json under {root}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed cameras.json: {e}") from e
    for key in ("frames", "scene_bbox", "background", "views"):
        if key not in meta:
            raise ValueError(f"cameras.json missing required key {key!r}")
    frames = int(meta["frames"])
    views = meta["views"]
    names = [v["name"] for v in views]
    roles = [v.get("role", "train") for v in views]
    w2c = np.array([np.array(v["w2c"], dtype=np.float64).reshape(4, 4) for v in views])
    intr = np.array(
        [[v["width"], v["height"], v["fx"], v["fy"], v["cx"], v["cy"]] for v in views],
        dtype=np.float64,
    )
    for i, v in enumerate(views):
        r = w2c[i, :3, :3]
        err = float(np.abs(r @ r.T - np.eye(3)).max())
        if err > 1e-9:
            raise ValueError(
                f"view {v['name']}: rotation not orthonormal (max |R R^T - I| = {err:.3e})"
            )

    frames_dir = root / "frames"
    masks_dir = root / "masks"
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"missing frames directory {frames_dir}")
    if not masks_dir.is_dir():
        raise FileNotFoundError(f"missing masks directory {masks_dir}")

    images = []
    masks = []
    shape = None
    for name in names:
        per_view_img = []
        per_view_mask = []
        for t in range(frames):
            fp = frames_dir / name / f"{t:04d}.png"
            mp = masks_dir / name / f"{t:04d}.png"
            if not fp.exists():
                raise FileNotFoundError(f"missing frame image {fp}")
            if not mp.exists():
                raise FileNotFoundError(f"missing mask image {mp}")
            img = load_png(fp)
            msk = load_png(mp)
            if img.ndim != 3:
                img = np.repeat(img[..., None], 3, axis=2)
            if msk.ndim == 3:
                msk = msk[..., 0]
            if shape is None:
                shape = img.shape
            if img.shape != shape or msk.shape != shape[:2]:
                raise ValueError(
                    f"resolution mismatch at {fp}: {img.shape[1]}x{img.shape[0]} vs "
                    f"expected {shape[1]}x{shape[0]}"
                )
            per_view_img.append(img)
            per_view_mask.append(msk)
        images.append(per_view_img)
        masks.append(per_view_mask)

    bg_meta = meta["background"]
    if bg_meta["type"] == "constant":
        background = np.array(bg_meta["rgb"], dtype=np.float32)
    elif bg_meta["type"] == "per_view":
        plates = []
        for name in names:
            bp = root / "background" / f"{name}.png"
            if not bp.exists():
                raise FileNotFoundError(f"missing background plate {bp}")
            plates.append(load_png(bp))
        background = np.stack(plates)
    else:
        raise ValueError(f"unknown background type {bg_meta['type']!r}")

    return Dataset(
        w2c=w2c,
        intrinsics=intr,
        roles=roles,
        images=np.stack([np.stack(v) for v in images]),
        masks=np.stack([np.stack(v) for v in masks]),
        background=background,
        bbox_lo=np.array(meta["scene_bbox"]["lo"], dtype=np.float64),
        bbox_side=float(meta["scene_bbox"]["side"]),
        view_names=names,
    )
