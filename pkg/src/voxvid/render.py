"""Volume rendering of one VOctree at a camera and frame index.

Per pixel: enumerate the ray's leaf segments, decode density and color at
the frame (color through the per-gamma SH slice), and alpha-composite with
one midpoint sample per segment:

    a_i = 1 - exp(-sigma_i * delta_i),  T_i = prod_{j<i} (1 - a_j)
    alpha = sum T_i a_i,  premult = sum T_i a_i c_i

LayerImages.rgb stores the unpremultiplied expected color premult/alpha
(zero where nothing was hit); depth is the alpha-weighted expected ray
distance, set to the far-plane value where alpha < alpha_floor. Rays early
terminate once transmittance drops below opts.early_stop.

A FrameSlice caches per-leaf (sigma_t, sliced SH coefficients) for one
frame; cached and uncached renders follow the same floating-point path and
are bitwise equal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .octree import VOctree

__all__ = [
    "Camera",
    "LayerImages",
    "RenderOptions",
    "FrameSlice",
    "render",
    "render_rays",
    "finalize_layer",
    "composite_background",
    "build_frame_cache",
]


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels, rigid camera-to-world pose.

    Camera space is right-handed with +z forward; pixel (ix, iy) is sampled
    at its center (ix + 0.5, iy + 0.5), iy growing downward.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "c2w", c2w)
        r = c2w[:3, :3]
        err = float(np.abs(r @ r.T - np.eye(3)).max())
        if err > 1e-9:
            raise ValueError(f"camera rotation not orthonormal: max deviation {err:.3e}")
        if not np.allclose(c2w[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("camera pose must be a rigid transform (last row 0 0 0 1)")

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """All pixel rays, row-major pixel order; directions unit length."""
        ix, iy = np.meshgrid(np.arange(self.width), np.arange(self.height), indexing="xy")
        x = (ix + 0.5 - self.cx) / self.fx
        y = (iy + 0.5 - self.cy) / self.fy
        d_cam = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
        d_world = d_cam @ self.c2w[:3, :3].T
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        origins = np.broadcast_to(self.origin, d_world.shape).copy()
        return origins, np.ascontiguousarray(d_world)

    def pixel_rays(self, ix, iy) -> tuple[np.ndarray, np.ndarray]:
        """Rays for explicit pixel index arrays."""
        ix = np.asarray(ix, dtype=np.float64)
        iy = np.asarray(iy, dtype=np.float64)
        x = (ix + 0.5 - self.cx) / self.fx
        y = (iy + 0.5 - self.cy) / self.fy
        d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
        d_world = d_cam @ self.c2w[:3, :3].T
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.origin, d_world.shape).copy()
        return origins.reshape(-1, 3), np.ascontiguousarray(d_world.reshape(-1, 3))

    @staticmethod
    def look_at(eye, target, up=(0.0, 0.0, 1.0), width=128, height=128, focal=None,
                cx=None, cy=None) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        upv = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, upv)
        if np.linalg.norm(right) < 1e-12:
            upv = np.array([0.0, 1.0, 0.0])
            right = np.cross(fwd, upv)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)  # +y in camera space points down in world
        c2w = np.eye(4)
        c2w[:3, 0] = right
        c2w[:3, 1] = down
        c2w[:3, 2] = fwd
        c2w[:3, 3] = eye
        focal = float(focal) if focal is not None else 1.2 * max(width, height)
        return Camera(
            width=width,
            height=height,
            fx=focal,
            fy=focal,
            cx=width / 2.0 if cx is None else cx,
            cy=height / 2.0 if cy is None else cy,
            c2w=c2w,
        )


@dataclass
class LayerImages:
    """One rendered layer: unpremultiplied rgb, alpha matte, expected depth."""

    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), far-plane value where alpha < alpha_floor

    def __post_init__(self):
        if self.rgb.shape[:2] != self.alpha.shape or self.alpha.shape != self.depth.shape:
            raise ValueError("layer channel shapes disagree")

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape

    def copy(self) -> "LayerImages":
        return LayerImages(self.rgb.copy(), self.alpha.copy(), self.depth.copy())


@dataclass(frozen=True)
class RenderOptions:
    early_stop: float = 1e-4  # terminate a ray once transmittance < this
    far_plane: float = 1e9
    alpha_floor: float = 1e-3  # below this alpha the depth is the far plane
    edit_weight: float = 1.0  # blend weight of painted colors inside their range


@dataclass
class FrameSlice:
    """Per-frame cache: decoded density and sliced SH coefficients per leaf."""

    frame: int
    sigma: np.ndarray  # (n_leaves,)
    q: np.ndarray  # (n_leaves, 3 * S) channel-interleaved SH coefficients


def _check_frame(tree: VOctree, frame: int):
    if not (0 <= frame < tree.frames):
        raise ValueError(f"frame {frame} out of range [0, {tree.frames})")


def build_frame_cache(tree: VOctree, frame: int) -> FrameSlice:
    _check_frame(tree, frame)
    tab = tree.tables
    sigma = np.empty(tree.n_leaves, dtype=np.float64)
    q = np.empty((tree.n_leaves, 3 * tab.s), dtype=np.float64)
    kernels.build_slice_kernel(
        tree.leaf_data, tree.coeff_count, tree.basis_count, tree.bases.a, tree.bases.b,
        frame, tab.pair_n, tab.pair_l, tab.pair_norm, tab.k2pair, tab.k2sh, sigma, q,
    )
    return FrameSlice(frame=frame, sigma=sigma, q=q)


def render_rays(tree: VOctree, origins, dirs, frame: int, opts: RenderOptions = RenderOptions(),
                cache: FrameSlice | None = None):
    """Raw per-ray accumulators (premultiplied rgb, alpha, sum w*t_mid).

    Directions must be unit length so t is world distance.
    """
    _check_frame(tree, frame)
    if cache is not None and cache.frame != frame:
        raise ValueError(f"cache built for frame {cache.frame}, not {frame}")
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    tab = tree.tables
    premult = np.empty((n, 3), dtype=np.float64)
    alpha = np.empty(n, dtype=np.float64)
    tbar = np.empty(n, dtype=np.float64)
    has_edits, edit_rgb, edit_t = tree._edit_arrays()
    if cache is None:
        cache_sigma = np.zeros(1, dtype=np.float64)
        cache_q = np.zeros((1, 3 * tab.s), dtype=np.float64)
    else:
        cache_sigma, cache_q = cache.sigma, cache.q
    kernels.render_kernel(
        tree.node_child, tree.depth, tree.bbox_lo, tree.side,
        cache is not None,
        tree.leaf_data, tree.coeff_count, tree.basis_count,
        tree.bases.a, tree.bases.b, frame,
        cache_sigma, cache_q,
        tab.pair_n, tab.pair_l, tab.pair_norm, tab.k2pair, tab.k2sh, tab.sh_pref, tab.n_max,
        has_edits, edit_rgb, edit_t, opts.edit_weight,
        origins, dirs, 0.0, 1e30, opts.early_stop,
        premult, alpha, tbar,
    )
    return premult, alpha, tbar


def finalize_layer(premult, alpha, tbar, shape, opts: RenderOptions,
                   depth_scale=None) -> LayerImages:
    """Assemble LayerImages from raw accumulators.

    depth_scale (per-ray) converts instance-space ray distance to world
    depth when the volume was rendered through a pulled-back camera.
    """
    h, w = shape
    alpha_img = alpha.reshape(h, w)
    safe = np.maximum(alpha, 1e-300)[:, None]
    rgb = np.where(alpha[:, None] > 0.0, premult / safe, 0.0).reshape(h, w, 3)
    t = tbar / np.maximum(alpha, 1e-300)
    if depth_scale is not None:
        t = t * depth_scale
    depth = np.where(alpha >= opts.alpha_floor, t, opts.far_plane).reshape(h, w)
    return LayerImages(rgb=rgb, alpha=alpha_img, depth=depth)


def render(tree: VOctree, cam: Camera, frame: int, opts: RenderOptions = RenderOptions(),
           cache: FrameSlice | None = None) -> LayerImages:
    origins, dirs = cam.rays()
    premult, alpha, tbar = render_rays(tree, origins, dirs, frame, opts, cache=cache)
    return finalize_layer(premult, alpha, tbar, (cam.height, cam.width), opts)


def composite_background(layer: LayerImages, bg) -> np.ndarray:
    """Blend a layer over a background: alpha * rgb + (1 - alpha) * bg."""
    bg = np.asarray(bg, dtype=np.float64)
    if bg.ndim == 1:
        bg = np.broadcast_to(bg, layer.rgb.shape)
    if bg.shape != layer.rgb.shape:
        raise ValueError(f"background shape {bg.shape} != layer shape {layer.rgb.shape}")
    a = layer.alpha[..., None]
    return a * layer.rgb + (1.0 - a) * bg
