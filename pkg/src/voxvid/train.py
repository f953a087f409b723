"""Fitting a VOctree to posed multi-view video by direct gradient descent.

The loss is L_total = L_rgb + lambda_grad * L_grad where

    L_rgb  = sum_r || C(r) - (sum_i w_i c_i + (1 - alpha) * C_bg(r)) ||^2
    L_grad = sum over rendered patches of || forward-diff grad |I - I_hat| ||^2

Batches mix all-foreground rays with a configurable fraction of random
background rays (the background prior keeps free space empty); the
gradient regularizer needs pixel neighborhoods, so each step additionally
renders a few small contiguous patches.

Gradients flow analytically through the volume-rendering weights, the
color sigmoid, the HH slice, and the density/hyper-angle decodes into leaf
payloads and (optionally) the shared basis matrices. Updates use
per-parameter adaptive moments (Adam); payload rows are updated lazily
(only rows touched by the batch), basis rows densely. With a fixed seed
the whole loss trajectory is bitwise reproducible for any thread count.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .datasets import Dataset
from .octree import VOctree
from .render import RenderOptions, build_frame_cache, composite_background, render
from .temporal import make_bump_bases

__all__ = [
    "TrainConfig",
    "RayBatch",
    "PatchBatch",
    "RaySampler",
    "sample_rays",
    "loss_rgb",
    "loss_grad",
    "Trainer",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "evaluate_psnr",
    "error_pixel_count",
]


@dataclass(frozen=True)
class TrainConfig:
    lr_payload: float = 0.1
    lr_bases: float = 1e-3
    batch_rays: int = 4096
    iters: int = 3000
    lambda_grad: float = 0.1
    bg_ray_fraction: float = 0.2
    prune_every: int = 400
    prune_threshold: float = 1e-5
    patch_size: int = 8
    patches_per_step: int = 2
    seed: int = 0
    train_bases: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop: float = 1e-4
    coeff_count: int = 31
    n_max: int = 2
    start_resolution: int = 32
    final_resolution: int = 128
    stage_iters: tuple | None = None
    sigma_init: float = 0.05
    mask_carve: bool = True  # drop voxels outside every view's silhouette cone
    log_every: int = 50

    def __post_init__(self):
        if self.lambda_grad < 0:
            raise ValueError("lambda_grad must be >= 0")
        if not (0.0 <= self.bg_ray_fraction <= 1.0):
            raise ValueError("bg_ray_fraction must lie in [0, 1]")
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")


@dataclass
class RayBatch:
    origins: np.ndarray  # (N, 3)
    dirs: np.ndarray  # (N, 3) unit
    colors: np.ndarray  # (N, 3) observed pixel colors
    bg: np.ndarray  # (N, 3) background colors for the blend
    frames: np.ndarray  # (N,) int32
    foreground: np.ndarray  # (N,) bool

    def __post_init__(self):
        self.origins = np.ascontiguousarray(self.origins, dtype=np.float64)
        self.dirs = np.ascontiguousarray(self.dirs, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        self.bg = np.ascontiguousarray(self.bg, dtype=np.float64)
        self.frames = np.ascontiguousarray(self.frames, dtype=np.int32)
        self.foreground = np.ascontiguousarray(self.foreground, dtype=bool)
        nrm = np.linalg.norm(self.dirs, axis=1)
        if np.abs(nrm - 1.0).max() > 1e-9:
            raise ValueError("ray directions must be unit length")
        if self.colors.min() < -1e-9 or self.colors.max() > 1 + 1e-9:
            raise ValueError("colors must lie in [0, 1]")

    def __len__(self):
        return self.origins.shape[0]


@dataclass
class PatchBatch:
    """A contiguous pixel block rendered for the gradient regularizer."""

    origins: np.ndarray
    dirs: np.ndarray
    gt: np.ndarray  # (ps, ps, 3)
    bg: np.ndarray  # (ps, ps, 3)
    frame: int


class RaySampler:
    """Flattened ray access over a dataset with foreground/background split."""

    def __init__(self, dataset: Dataset):
        self.ds = dataset
        v, t, h, w = dataset.images.shape[:4]
        self._dirs = np.stack([dataset.camera(i).rays()[1] for i in range(v)])
        self._origins = np.stack([dataset.camera(i).origin for i in range(v)])
        self.train_views = np.array(dataset.view_indices("train"), dtype=np.int64)
        if len(self.train_views) == 0:
            raise ValueError("dataset has no training views")
        fg = dataset.masks[self.train_views] > 0.5
        vv, tt, yy, xx = np.nonzero(fg)
        self._fg = np.stack([self.train_views[vv], tt, yy * w + xx], axis=1).astype(np.int64)
        vv, tt, yy, xx = np.nonzero(~fg)
        self._bg = np.stack([self.train_views[vv], tt, yy * w + xx], axis=1).astype(np.int64)
        if len(self._fg) == 0:
            raise ValueError("dataset masks select no foreground rays")

    def _gather(self, idx: np.ndarray, foreground: bool) -> tuple:
        v, t, p = idx[:, 0], idx[:, 1], idx[:, 2]
        w = self.ds.width
        colors = self.ds.images[v, t, p // w, p % w]
        if self.ds.background.ndim == 1:
            bg = np.broadcast_to(self.ds.background, (len(idx), 3)).copy()
        else:
            bg = self.ds.background[v, p // w, p % w]
        return self._origins[v], self._dirs[v, p], colors, bg, t, foreground

    def sample(self, batch_rays: int, bg_fraction: float, rng: np.random.Generator) -> RayBatch:
        n_bg = int(round(bg_fraction * batch_rays))
        n_fg = batch_rays - n_bg
        parts = []
        if n_fg:
            parts.append(self._gather(self._fg[rng.integers(len(self._fg), size=n_fg)], True))
        if n_bg and len(self._bg):
            parts.append(self._gather(self._bg[rng.integers(len(self._bg), size=n_bg)], False))
        origins = np.concatenate([p[0] for p in parts])
        dirs = np.concatenate([p[1] for p in parts])
        colors = np.concatenate([p[2] for p in parts])
        bg = np.concatenate([p[3] for p in parts])
        frames = np.concatenate([p[4] for p in parts])
        flags = np.concatenate(
            [np.full(len(p[0]), p[5], dtype=bool) for p in parts]
        )
        return RayBatch(origins, dirs, colors, bg, frames.astype(np.int32), flags)

    def sample_patch(self, patch_size: int, rng: np.random.Generator) -> PatchBatch:
        h, w = self.ds.height, self.ds.width
        if rng.random() < 0.8:
            # bias patches toward content; pure-background patches carry no
            # gradient signal on a dataset whose empty space fits exactly
            v, t, p = self._fg[rng.integers(len(self._fg))]
            y0 = int(np.clip(p // w - patch_size // 2, 0, h - patch_size))
            x0 = int(np.clip(p % w - patch_size // 2, 0, w - patch_size))
            v, t = int(v), int(t)
        else:
            v = int(self.train_views[rng.integers(len(self.train_views))])
            t = int(rng.integers(self.ds.frames))
            y0 = int(rng.integers(h - patch_size + 1))
            x0 = int(rng.integers(w - patch_size + 1))
        cam = self.ds.camera(v)
        iy, ix = np.mgrid[y0 : y0 + patch_size, x0 : x0 + patch_size]
        origins, dirs = cam.pixel_rays(ix.ravel(), iy.ravel())
        gt = self.ds.images[v, t, y0 : y0 + patch_size, x0 : x0 + patch_size].astype(np.float64)
        bg = np.asarray(
            self.ds.background_for(v)[y0 : y0 + patch_size, x0 : x0 + patch_size],
            dtype=np.float64,
        )
        return PatchBatch(origins, dirs, gt, bg, t)


def sample_rays(dataset: Dataset, config: TrainConfig, rng: np.random.Generator) -> RayBatch:
    """One training batch: all-foreground rays mixed with the configured
    fraction of random background rays, uniform over views and frames."""
    return RaySampler(dataset).sample(config.batch_rays, config.bg_ray_fraction, rng)


def loss_grad(patch_pred: np.ndarray, patch_gt: np.ndarray) -> float:
    """Sum of squared forward-difference gradients of |I - I_hat|."""
    if patch_pred.shape[0] < 2 or patch_pred.shape[1] < 2:
        raise ValueError(f"patch must be at least 2x2, got {patch_pred.shape[:2]}")
    if patch_pred.shape != patch_gt.shape:
        raise ValueError("patch shapes disagree")
    p = np.abs(np.asarray(patch_gt, float) - np.asarray(patch_pred, float))
    gx = p[:, 1:] - p[:, :-1]
    gy = p[1:, :] - p[:-1, :]
    return float((gx**2).sum() + (gy**2).sum())


def loss_grad_backward(patch_pred: np.ndarray, patch_gt: np.ndarray) -> np.ndarray:
    """d(loss_grad)/d(patch_pred); sign(0) contributes nothing."""
    d = np.asarray(patch_gt, float) - np.asarray(patch_pred, float)
    p = np.abs(d)
    gx = p[:, 1:] - p[:, :-1]
    gy = p[1:, :] - p[:-1, :]
    dp = np.zeros_like(p)
    dp[:, 1:] += 2.0 * gx
    dp[:, :-1] -= 2.0 * gx
    dp[1:, :] += 2.0 * gy
    dp[:-1, :] -= 2.0 * gy
    return dp * (-np.sign(d))


class Trainer:
    """Holds gradient buffers and optimizer state for one tree."""

    def __init__(self, tree: VOctree, config: TrainConfig):
        self.tree = tree
        self.config = config
        p = tree.leaf_data.shape[1]
        self.grad_payload = np.zeros((tree.n_leaves, p), dtype=np.float64)
        self.grad_a = np.zeros(tree.bases.a.shape, dtype=np.float64)
        self.grad_b = np.zeros(tree.bases.b.shape, dtype=np.float64)
        self.m_payload = np.zeros((tree.n_leaves, p), dtype=np.float32)
        self.v_payload = np.zeros((tree.n_leaves, p), dtype=np.float32)
        self.m_a = np.zeros(self.grad_a.shape, dtype=np.float32)
        self.v_a = np.zeros(self.grad_a.shape, dtype=np.float32)
        self.m_b = np.zeros(self.grad_b.shape, dtype=np.float32)
        self.v_b = np.zeros(self.grad_b.shape, dtype=np.float32)
        self.step_count = 0

    # -- forward/backward pipeline over arbitrary rays ----------------------

    def _segments(self, origins, dirs):
        tree = self.tree
        n = origins.shape[0]
        counts = np.empty(n, dtype=np.int64)
        kernels.count_segments_kernel(
            tree.node_child, tree.depth, tree.bbox_lo, tree.side, origins, dirs, 0.0, 1e30, counts
        )
        start = np.zeros(n, dtype=np.int64)
        np.cumsum(counts[:-1], out=start[1:])
        n_seg = int(counts.sum())
        seg_leaf = np.empty(n_seg, dtype=np.int64)
        seg_t0 = np.empty(n_seg, dtype=np.float64)
        seg_t1 = np.empty(n_seg, dtype=np.float64)
        kernels.collect_segments_kernel(
            tree.node_child, tree.depth, tree.bbox_lo, tree.side, origins, dirs, 0.0, 1e30,
            start, seg_leaf, seg_t0, seg_t1,
        )
        return counts, start, seg_leaf, seg_t0, seg_t1

    def _forward(self, origins, dirs, frames, store=True):
        tree = self.tree
        tab = tree.tables
        n = origins.shape[0]
        counts, start, seg_leaf, seg_t0, seg_t1 = self._segments(origins, dirs)
        n_seg = len(seg_leaf)
        ray_y = np.empty((n, tab.s), dtype=np.float64)
        seg_store = np.empty((n_seg, 5), dtype=np.float64)
        seg_r = np.empty((n_seg, tab.n_pairs), dtype=np.float64)
        used = np.empty(n, dtype=np.int64)
        premult = np.empty((n, 3), dtype=np.float64)
        alpha = np.empty(n, dtype=np.float64)
        tbar = np.empty(n, dtype=np.float64)
        kernels.shade_forward_kernel(
            seg_leaf, seg_t0, seg_t1, start, counts,
            tree.leaf_data, tree.coeff_count, tree.basis_count,
            tree.bases.a, tree.bases.b, np.ascontiguousarray(frames, dtype=np.int64),
            tab.pair_n, tab.pair_l, tab.pair_norm, tab.k2pair, tab.k2sh, tab.sh_pref, tab.n_max,
            dirs, self.config.early_stop,
            ray_y, seg_store, seg_r, used, premult, alpha, tbar,
        )
        aux = {
            "counts": counts, "start": start, "seg_leaf": seg_leaf,
            "seg_t0": seg_t0, "seg_t1": seg_t1, "ray_y": ray_y,
            "seg_store": seg_store, "seg_r": seg_r, "used": used,
            "frames": np.ascontiguousarray(frames, dtype=np.int64),
        }
        return premult, alpha, tbar, aux

    def _backward(self, aux, g_rgb, bg):
        tree = self.tree
        tab = tree.tables
        n_seg = len(aux["seg_leaf"])
        seg_grad = np.empty((n_seg, 5), dtype=np.float64)
        kernels.shade_backward_kernel(
            aux["seg_leaf"], aux["seg_t0"], aux["seg_t1"], aux["start"], aux["used"],
            tree.leaf_data, tree.coeff_count, tree.basis_count,
            tab.pair_n, tab.pair_l, tab.pair_norm, tab.k2pair, tab.k2sh, tab.n_max,
            aux["ray_y"], aux["seg_store"],
            np.ascontiguousarray(g_rgb, dtype=np.float64),
            np.ascontiguousarray(bg, dtype=np.float64),
            seg_grad,
        )
        n = len(aux["counts"])
        seg_ray = np.repeat(np.arange(n, dtype=np.int64), aux["counts"])
        local = np.arange(n_seg, dtype=np.int64) - aux["start"][seg_ray]
        seg_ids = np.nonzero(local < aux["used"][seg_ray])[0].astype(np.int64)
        kernels.scatter_grads_kernel(
            seg_ids, aux["seg_leaf"], seg_ray, aux["frames"],
            tree.leaf_data, tree.coeff_count, tree.basis_count,
            tree.bases.a, tree.bases.b, tab.k2pair, tab.k2sh,
            aux["ray_y"], aux["seg_r"], seg_grad, self.config.train_bases,
            self.grad_payload, self.grad_a, self.grad_b,
        )
        return np.unique(aux["seg_leaf"][seg_ids])

    def accumulate(self, batch: RayBatch | None, patches: list[PatchBatch] = ()):
        """Forward + backward for one step; returns (report, touched rows)."""
        touched = []
        l_rgb = 0.0
        l_grd = 0.0
        rgb_mse = 0.0
        if batch is not None and len(batch):
            premult, alpha, _, aux = self._forward(batch.origins, batch.dirs, batch.frames)
            f = premult + (1.0 - alpha)[:, None] * batch.bg
            resid = f - batch.colors
            l_rgb = float((resid**2).sum())
            rgb_mse = float((resid**2).mean())
            touched.append(self._backward(aux, 2.0 * resid, batch.bg))
        lam = self.config.lambda_grad
        for patch in patches:
            ps = patch.gt.shape[0]
            frames = np.full(len(patch.origins), patch.frame, dtype=np.int64)
            premult, alpha, _, aux = self._forward(patch.origins, patch.dirs, frames)
            f = premult + (1.0 - alpha)[:, None] * patch.bg.reshape(-1, 3)
            pred = f.reshape(ps, ps, 3)
            l_grd += loss_grad(pred, patch.gt)
            if lam > 0:
                g = lam * loss_grad_backward(pred, patch.gt).reshape(-1, 3)
                touched.append(self._backward(aux, g, patch.bg.reshape(-1, 3)))
        rows = np.unique(np.concatenate(touched)) if touched else np.zeros(0, dtype=np.int64)
        report = {
            "l_rgb": l_rgb,
            "l_grad": l_grd,
            "l_total": l_rgb + lam * l_grd,
            "rgb_mse": rgb_mse,
        }
        return report, rows

    def apply(self, rows: np.ndarray):
        """Adam update on touched payload rows and, if trained, the bases."""
        cfg = self.config
        self.step_count += 1
        bc1 = 1.0 - cfg.adam_beta1**self.step_count
        bc2 = 1.0 - cfg.adam_beta2**self.step_count
        if len(rows):
            kernels.adam_rows_kernel(
                self.tree.leaf_data, self.grad_payload, self.m_payload, self.v_payload,
                rows, cfg.lr_payload, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, bc1, bc2,
            )
        if cfg.train_bases:
            all_rows = np.arange(self.tree.bases.a.shape[0], dtype=np.int64)
            kernels.adam_rows_kernel(
                self.tree.bases.a, self.grad_a, self.m_a, self.v_a,
                all_rows, cfg.lr_bases, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, bc1, bc2,
            )
            kernels.adam_rows_kernel(
                self.tree.bases.b, self.grad_b, self.m_b, self.v_b,
                all_rows, cfg.lr_bases, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, bc1, bc2,
            )

    def step(self, batch: RayBatch | None, patches: list[PatchBatch] = ()):
        report, rows = self.accumulate(batch, patches)
        if not math.isfinite(report["l_total"]):
            raise FloatingPointError(
                f"non-finite loss at step {self.step_count}: {report}"
            )
        self.apply(rows)
        return report

    def rebuild(self, tree: VOctree, keep: np.ndarray | None = None):
        """Swap in a restructured tree, carrying optimizer state by row."""
        old_m, old_v = self.m_payload, self.v_payload
        self.tree = tree
        p = tree.leaf_data.shape[1]
        self.grad_payload = np.zeros((tree.n_leaves, p), dtype=np.float64)
        self.m_payload = np.zeros((tree.n_leaves, p), dtype=np.float32)
        self.v_payload = np.zeros((tree.n_leaves, p), dtype=np.float32)
        if keep is not None:
            self.m_payload[:] = old_m[keep]
            self.v_payload[:] = old_v[keep]

    def prune(self, threshold: float):
        keep = self.tree.max_density_per_leaf() >= threshold
        if keep.all():
            return
        self.rebuild(self.tree._subset(keep), keep=keep)


def _loss_only(tree: VOctree, config: TrainConfig, batch: RayBatch | None,
               patches: list[PatchBatch] = ()) -> float:
    """L_total without touching optimizer state (finite-difference probe)."""
    t = Trainer(tree, config)
    report, _ = t.accumulate(batch, patches)
    return report["l_total"]


def save_checkpoint(trainer: Trainer, path):
    """Checkpoint = the .voct file plus an optimizer-state sidecar (.opt.npz)."""
    path = str(path)
    trainer.tree.save(path)
    np.savez(
        path + ".opt.npz",
        step_count=np.int64(trainer.step_count),
        m_payload=trainer.m_payload, v_payload=trainer.v_payload,
        m_a=trainer.m_a, v_a=trainer.v_a, m_b=trainer.m_b, v_b=trainer.v_b,
    )


def load_checkpoint(path, config: TrainConfig) -> Trainer:
    path = str(path)
    tree = VOctree.load(path)
    trainer = Trainer(tree, config)
    state = np.load(path + ".opt.npz")
    trainer.step_count = int(state["step_count"])
    trainer.m_payload[:] = state["m_payload"]
    trainer.v_payload[:] = state["v_payload"]
    trainer.m_a[:] = state["m_a"]
    trainer.v_a[:] = state["v_a"]
    trainer.m_b[:] = state["m_b"]
    trainer.v_b[:] = state["v_b"]
    return trainer


def loss_rgb(batch: RayBatch, tree: VOctree, config: TrainConfig | None = None) -> float:
    """Sum of squared differences between observed and blended rendered colors."""
    config = config or TrainConfig()
    t = Trainer(tree, config)
    premult, alpha, _, _ = t._forward(batch.origins, batch.dirs, batch.frames)
    f = premult + (1.0 - alpha)[:, None] * batch.bg
    return float(((f - batch.colors) ** 2).sum())


def init_dense_tree(config: TrainConfig, frames: int, bbox_lo, side,
                    rng: np.random.Generator) -> VOctree:
    """Dense coarse grid: small positive densities, mid-gray colors."""
    res = config.start_resolution
    depth = res.bit_length() - 1
    if 1 << depth != res:
        raise ValueError("start_resolution must be a power of two")
    idx = np.arange(res)
    gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], 1)
    c = config.coeff_count
    k = sum((n + 1) ** 2 for n in range(config.n_max + 1))
    data = np.zeros((len(coords), 2 * c + 3 * k), dtype=np.float32)
    data[:, 0] = rng.uniform(0.2, 1.0, size=len(coords)) * config.sigma_init
    bases = make_bump_bases(frames, c)
    return VOctree.from_cells(coords, data, bases, config.n_max, bbox_lo, side, depth=depth)


def visual_hull_keep(dataset: Dataset, centers: np.ndarray, voxel_size: float,
                     extra_px: int = 2) -> np.ndarray:
    """Mask of voxel centers consistent with every training silhouette.

    A voxel is dropped when some training view projects it inside the
    image but outside that view's union-over-frames foreground mask
    (dilated by the voxel footprint). Mirrors the capture pipeline's use
    of segmentation to limit the reconstruction volume; dropped voxels can
    never contribute to a foreground pixel.
    """
    from scipy.ndimage import maximum_filter

    keep = np.ones(len(centers), dtype=bool)
    half_diag = 0.5 * math.sqrt(3.0) * voxel_size
    for v in dataset.view_indices("train"):
        cam = dataset.camera(v)
        union = dataset.masks[v].max(axis=0) > 0.5
        z_ref = max(float(np.linalg.norm(cam.origin - (dataset.bbox_lo + 0.5 * dataset.bbox_side))), 1e-6)
        dilate = int(math.ceil(cam.fx * half_diag / z_ref)) + extra_px
        union = maximum_filter(union, size=2 * dilate + 1)
        w2c = np.linalg.inv(cam.c2w)
        p = centers @ w2c[:3, :3].T + w2c[:3, 3]
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            ix = np.floor(cam.fx * p[:, 0] / z + cam.cx).astype(np.int64)
            iy = np.floor(cam.fy * p[:, 1] / z + cam.cy).astype(np.int64)
        in_img = (z > 0) & (ix >= 0) & (ix < cam.width) & (iy >= 0) & (iy < cam.height)
        idx = np.nonzero(in_img)[0]
        keep[idx] &= union[iy[idx], ix[idx]]
    return keep


def fit(dataset: Dataset, config: TrainConfig = TrainConfig(), log_file=None,
        progress=None, checkpoint_path=None, checkpoint_every: int = 0) -> VOctree:
    """Coarse-to-fine fit: dense start grid, periodic pruning, resolution
    doubling up to final_resolution, final prune."""
    if dataset.frames < 1 or dataset.n_views < 1:
        raise ValueError("empty dataset")
    sampler = RaySampler(dataset)
    rng = np.random.default_rng(config.seed)
    tree = init_dense_tree(config, dataset.frames, dataset.bbox_lo, dataset.bbox_side, rng)
    if config.mask_carve:
        centers = dataset.bbox_lo + (tree.leaf_coords + 0.5) * tree.voxel_size()
        keep = visual_hull_keep(dataset, centers, tree.voxel_size())
        if keep.any() and not keep.all():
            tree = tree._subset(keep)

    n_stages = max(1, (config.final_resolution // config.start_resolution).bit_length())
    if config.stage_iters is not None:
        stage_iters = list(config.stage_iters)
        if len(stage_iters) != n_stages:
            raise ValueError(f"stage_iters must list {n_stages} stages")
    else:
        per = config.iters // n_stages
        stage_iters = [per] * (n_stages - 1) + [config.iters - per * (n_stages - 1)]

    trainer = Trainer(tree, config)
    it_global = 0
    t_start = time.time()
    for stage, n_iters in enumerate(stage_iters):
        for it in range(n_iters):
            batch = sampler.sample(config.batch_rays, config.bg_ray_fraction, rng)
            patches = [
                sampler.sample_patch(config.patch_size, rng)
                for _ in range(config.patches_per_step if config.lambda_grad > 0 else 0)
            ]
            report = trainer.step(batch, patches)
            it_global += 1
            if config.prune_every and (it + 1) % config.prune_every == 0:
                trainer.prune(config.prune_threshold)
            if checkpoint_path and checkpoint_every and it_global % checkpoint_every == 0:
                save_checkpoint(trainer, checkpoint_path)
            if it_global % config.log_every == 0 or it + 1 == n_iters:
                psnr_train = -10.0 * math.log10(max(report["rgb_mse"], 1e-12))
                rec = {
                    "iter": it_global,
                    "l_rgb": report["l_rgb"],
                    "l_grad": report["l_grad"],
                    "psnr_train": psnr_train,
                }
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
                if progress is not None:
                    rec = dict(rec, stage=stage, leaves=trainer.tree.n_leaves,
                               elapsed=time.time() - t_start)
                    progress(rec)
        trainer.prune(config.prune_threshold)
        if stage + 1 < len(stage_iters):
            up = trainer.tree.upsample()
            trainer.rebuild(up, keep=np.repeat(np.arange(trainer.tree.n_leaves), 8))
    return trainer.tree


def evaluate_psnr(tree: VOctree, dataset: Dataset, views, frames=None,
                  opts: RenderOptions = RenderOptions()) -> float:
    """PSNR of composited renders against dataset images over given views."""
    frames = range(dataset.frames) if frames is None else frames
    total_se = 0.0
    total_px = 0
    for t in frames:
        cache = build_frame_cache(tree, t)
        for v in views:
            layer = render(tree, dataset.camera(v), t, opts, cache=cache)
            img = composite_background(layer, dataset.background_for(v))
            diff = img - dataset.images[v, t].astype(np.float64)
            total_se += float((diff**2).sum())
            total_px += diff.size
    return -10.0 * math.log10(max(total_se / total_px, 1e-12))


def error_pixel_count(tree: VOctree, dataset: Dataset, views, threshold: float = 0.2,
                      opts: RenderOptions = RenderOptions()) -> int:
    """Count pixels whose max-channel |error| exceeds threshold (speckle metric)."""
    count = 0
    for t in range(dataset.frames):
        cache = build_frame_cache(tree, t)
        for v in views:
            layer = render(tree, dataset.camera(v), t, opts, cache=cache)
            img = composite_background(layer, dataset.background_for(v))
            err = np.abs(img - dataset.images[v, t].astype(np.float64)).max(axis=2)
            count += int((err > threshold).sum())
    return count
