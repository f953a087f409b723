"""Shared fixtures-in-code for the test suite: tiny trees with known
analytic behavior and a scalar reference renderer."""

import math

import numpy as np

from voxvid import hh, temporal
from voxvid.octree import VOctree

H000 = 1.0 / (math.sqrt(2.0) * math.pi)  # value of the constant HH basis


def logit(p):
    return math.log(p / (1.0 - p))


def const_payload(sigma, rgb, coeff_count, k):
    """Payload giving a time-constant density and view/time-constant color."""
    row = np.zeros(2 * coeff_count + 3 * k, dtype=np.float32)
    row[0] = sigma  # bump bases column 0 is the constant column
    for ch in range(3):
        row[2 * coeff_count + ch] = logit(rgb[ch]) / H000
    return row


def const_tree(voxels, depth, frames=4, coeff_count=3, n_max=1, lo=(0, 0, 0), side=1.0):
    """Tree whose listed voxels have constant density/color over time.

    voxels: {(x, y, z): (sigma, (r, g, b))} with rgb in (0, 1).
    """
    bases = temporal.make_bump_bases(frames, coeff_count)
    k = hh.basis_count(n_max)
    coords = np.array(list(voxels.keys()), dtype=np.int64).reshape(-1, 3)
    data = np.stack(
        [const_payload(s, c, coeff_count, k) for (s, c) in voxels.values()]
    ) if voxels else np.zeros((0, 2 * coeff_count + 3 * k), dtype=np.float32)
    return VOctree.from_cells(coords, data, bases, n_max, bbox_lo=lo, side=side, depth=depth)


def random_payload_tree(rng, depth=2, fill=0.6, frames=4, coeff_count=3, n_max=2,
                        sigma_scale=2.0):
    """Random occupied cells with smooth random payloads (densities bounded)."""
    res = 1 << depth
    occ = rng.random((res, res, res)) < fill
    coords = np.argwhere(occ)
    k = hh.basis_count(n_max)
    data = rng.normal(scale=0.5, size=(len(coords), 2 * coeff_count + 3 * k))
    data[:, 0] = rng.uniform(0.2, sigma_scale, size=len(coords))  # positive density floor
    return VOctree.from_cells(
        coords, data.astype(np.float32), temporal.make_bump_bases(frames, coeff_count),
        n_max, depth=depth,
    )


def reference_render_ray(tree, origin, direction, frame, early_stop=0.0):
    """Scalar reference of the rendering math, built on the public decode
    APIs rather than the kernels."""
    direction = np.asarray(direction, float)
    direction = direction / np.linalg.norm(direction)
    theta = math.acos(max(-1.0, min(1.0, direction[2])))
    phi = math.atan2(direction[1], direction[0])
    c_dim = tree.coeff_count
    trans = 1.0
    premult = np.zeros(3)
    alpha = 0.0
    tbar = 0.0
    for seg in tree.ray_segments(origin, direction):
        row = tree.leaf_data[seg.leaf].astype(np.float64)
        sigma = temporal.decode_density(tree.bases, row[:c_dim])[frame]
        gamma = temporal.decode_hyper_angle(tree.bases, row[c_dim : 2 * c_dim])[frame]
        w_hh = row[2 * c_dim :].reshape(tree.basis_count, 3)
        q = temporal.slice_sh(w_hh, gamma)
        c = temporal.sigmoid(np.array([hh.sh_eval(q[:, ch], theta, phi) for ch in range(3)]))
        a = 1.0 - math.exp(-sigma * seg.delta)
        w = trans * a
        premult += w * c
        alpha += w
        tbar += w * seg.t_mid
        trans *= math.exp(-sigma * seg.delta)
        if trans < early_stop:
            break
    return premult, alpha, tbar


def fine_march(sigma_fn, color_fn, t0, t1, steps=10_000):
    """Dense-step compositing oracle over [t0, t1]; returns premult, alpha."""
    ts = np.linspace(t0, t1, steps + 1)
    mid = 0.5 * (ts[:-1] + ts[1:])
    dt = np.diff(ts)
    sig = np.array([sigma_fn(t) for t in mid])
    col = np.array([color_fn(t) for t in mid])
    e = np.exp(-sig * dt)
    trans = np.concatenate([[1.0], np.cumprod(e)[:-1]])
    w = trans * (1.0 - e)
    return (w[:, None] * col).sum(axis=0), w.sum()


# ---------------------------------------------------------------------------
# training micro-problems and the finite-difference harness


def make_micro_problem(rng, n_cells=8, depth=2, frames=3, coeff_count=3, n_max=1,
                       batch=10, patches=1, patch_size=3, lambda_grad=0.1,
                       train_bases=True):
    """A miniature tree plus ray/patch batches with the loss kept away from
    relu/abs kinks so central differences are trustworthy."""
    from voxvid.train import PatchBatch, RayBatch, TrainConfig, Trainer
    from voxvid.render import Camera

    res = 1 << depth
    cells = rng.choice(res**3, size=min(n_cells, res**3), replace=False)
    coords = np.stack([cells // (res * res), (cells // res) % res, cells % res], 1)
    k = hh.basis_count(n_max)
    data = rng.normal(scale=0.4, size=(len(coords), 2 * coeff_count + 3 * k))
    data[:, 0] = rng.uniform(0.5, 2.0, size=len(coords))  # keep sigma_pre > 0
    data[:, 1:coeff_count] *= 0.05
    tree = VOctree.from_cells(
        coords, data.astype(np.float32),
        temporal.make_bump_bases(frames, coeff_count), n_max, depth=depth,
    )
    config = TrainConfig(
        lambda_grad=lambda_grad, early_stop=0.0, train_bases=train_bases,
        coeff_count=coeff_count, n_max=n_max, patch_size=patch_size,
    )

    targets = rng.uniform(0.05, 0.95, size=(batch, 3))
    aims = rng.uniform(0.2, 0.8, size=(batch, 3))
    origins = rng.uniform(-0.5, -0.2, size=(batch, 3))
    dirs = aims - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ray_batch = RayBatch(
        origins, dirs, targets, rng.uniform(0.1, 0.9, size=(batch, 3)),
        rng.integers(frames, size=batch).astype(np.int32), np.ones(batch, bool),
    )

    patch_list = []
    trainer = Trainer(tree, config)
    for _ in range(patches):
        cam = Camera.look_at(
            rng.uniform(1.8, 2.4, size=3), [0.5, 0.5, 0.5],
            width=patch_size, height=patch_size, focal=patch_size * 1.2,
        )
        o, d = cam.rays()
        frame = int(rng.integers(frames))
        gt = rng.uniform(0.1, 0.9, size=(patch_size, patch_size, 3))
        bg = rng.uniform(0.1, 0.9, size=(patch_size, patch_size, 3))
        premult, alpha, _, _ = trainer._forward(
            o, d, np.full(len(o), frame, dtype=np.int64)
        )
        pred = (premult + (1 - alpha)[:, None] * bg.reshape(-1, 3)).reshape(gt.shape)
        close = np.abs(gt - pred) < 2e-3  # keep |I - I_hat| off its kink
        gt = np.where(close, gt + 0.05, gt)
        patch_list.append(PatchBatch(o, d, gt, bg, frame))
    return tree, config, ray_batch, patch_list


def gradient_check(tree, config, batch, patches, h=1e-4):
    """Central-difference check of every parameter; returns norm-relative
    errors per parameter class."""
    from voxvid.train import Trainer, _loss_only

    trainer = Trainer(tree, config)
    _, _ = trainer.accumulate(batch, patches)
    analytic = {
        "payload": trainer.grad_payload.copy(),
        "a": trainer.grad_a.copy(),
        "b": trainer.grad_b.copy(),
    }

    def probe(arr, i, j):
        orig = arr[i, j]
        arr[i, j] = np.float32(float(orig) + h)
        hi = float(arr[i, j])
        l_hi = _loss_only(tree, config, batch, patches)
        arr[i, j] = np.float32(float(orig) - h)
        lo = float(arr[i, j])
        l_lo = _loss_only(tree, config, batch, patches)
        arr[i, j] = orig
        return (l_hi - l_lo) / (hi - lo)

    out = {}
    fd = np.zeros_like(analytic["payload"])
    for i in range(tree.n_leaves):
        for j in range(tree.leaf_data.shape[1]):
            fd[i, j] = probe(tree.leaf_data, i, j)
    c = tree.coeff_count
    blocks = {
        "w_sigma": (analytic["payload"][:, :c], fd[:, :c]),
        "w_gamma": (analytic["payload"][:, c : 2 * c], fd[:, c : 2 * c]),
        "w_hh": (analytic["payload"][:, 2 * c :], fd[:, 2 * c :]),
    }
    for mat, key in ((tree.bases.a, "a"), (tree.bases.b, "b")):
        fd_m = np.zeros_like(analytic[key])
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                fd_m[i, j] = probe(mat, i, j)
        blocks[key] = (analytic[key], fd_m)
    for name, (g, f) in blocks.items():
        denom = max(float(np.linalg.norm(f)), 1e-12)
        out[name] = float(np.linalg.norm(g - f)) / denom
    return out


def joint_segments_oracle(instances, cam, global_frame, bg):
    """Joint volume rendering over all instances: merge each ray's segments
    from every transformed volume by world depth and composite once.
    Independent of the layer blending code path."""
    origins, dirs = cam.rays()
    h, w = cam.height, cam.width
    out = np.zeros((h * w, 3))
    for r in range(h * w):
        events = []
        for inst in instances:
            inv = np.linalg.inv(inst.effective_affine(global_frame))
            o_t = inv[:3, :3] @ origins[r] + inv[:3, 3]
            d_raw = inv[:3, :3] @ dirs[r]
            nrm = np.linalg.norm(d_raw)
            d_t = d_raw / nrm
            frame = inst.local_frame(global_frame)
            tree = inst.tree
            c_dim = tree.coeff_count
            theta = math.acos(max(-1, min(1, d_t[2])))
            phi = math.atan2(d_t[1], d_t[0])
            for seg in tree.ray_segments(o_t, d_t):
                row = tree.leaf_data[seg.leaf].astype(np.float64)
                sigma = temporal.decode_density(tree.bases, row[:c_dim])[frame]
                gamma = temporal.decode_hyper_angle(tree.bases, row[c_dim : 2 * c_dim])[frame]
                q = temporal.slice_sh(row[2 * c_dim :].reshape(-1, 3), gamma)
                c = temporal.sigmoid(
                    np.array([hh.sh_eval(q[:, ch], theta, phi) for ch in range(3)])
                )
                # world-space optical depth: sigma is per tree-space unit
                events.append((seg.t_enter / nrm, sigma * seg.delta, c))
        events.sort(key=lambda e: e[0])
        trans = 1.0
        col = np.zeros(3)
        alpha = 0.0
        for _, tau, c in events:
            a = 1.0 - math.exp(-tau)
            col += trans * a * c
            alpha += trans * a
            trans *= math.exp(-tau)
        out[r] = col + (1.0 - alpha) * bg
    return out.reshape(h, w, 3)
