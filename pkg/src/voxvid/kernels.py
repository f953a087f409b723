"""numba kernels: octree traversal, shading, gradients, optimizer updates.

All hot loops live here. Geometry convention: the tree covers a cube
[lo, lo + side)^3 subdivided to a fixed leaf depth; rays are given by world
origin + unit direction, and the ray parameter t is world distance. The
traversal is a parametric plane-crossing descent (children visited in
near-to-far order by entry parameter, empty subtrees skipped in O(1)), so
work is proportional to the number of occupied segments, not grid cells.

Numerical policy: payloads and basis matrices are stored float32; every
arithmetic step is carried out in float64 (explicit casts at load). The
per-frame cache path and the on-the-fly path share the same helpers in the
same order, which makes cached and uncached renders bitwise equal.

Thread-parallel loops only ever write to disjoint slots (per-ray, per-leaf,
or per-column), so results are bitwise reproducible for any thread count.
"""

from __future__ import annotations

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit, prange

from . import hh

# stack capacity: depth <= 12 is far beyond any buildable tree
_STACK = 128


@dataclass(frozen=True)
class BasisTables:
    """Flat index tables driving the in-kernel HH evaluation."""

    n_max: int
    k: int  # number of HH bases
    s: int  # number of SH bases = (n_max+1)^2
    n_pairs: int  # number of (n, l) radial profiles
    pair_n: np.ndarray  # (n_pairs,) int64
    pair_l: np.ndarray
    pair_norm: np.ndarray  # (n_pairs,) float64 normalization A_nl
    k2pair: np.ndarray  # (k,) HH index -> radial profile row
    k2sh: np.ndarray  # (k,) HH index -> SH column
    sh_l: np.ndarray  # (s,) SH column -> degree l
    sh_m: np.ndarray  # (s,) SH column -> order m
    sh_pref: np.ndarray  # (s,) float64 constant prefactor of each SH column


@lru_cache(maxsize=None)
def basis_tables(n_max: int) -> BasisTables:
    pairs = hh.radial_pair_list(n_max)
    pair_index = {p: i for i, p in enumerate(pairs)}
    sh_pairs = hh.sh_pair_list(n_max)
    sh_index = {p: i for i, p in enumerate(sh_pairs)}
    idx = hh.index_list(n_max)
    return BasisTables(
        n_max=n_max,
        k=len(idx),
        s=len(sh_pairs),
        n_pairs=len(pairs),
        pair_n=np.array([p[0] for p in pairs], dtype=np.int64),
        pair_l=np.array([p[1] for p in pairs], dtype=np.int64),
        pair_norm=np.array([hh.hh_norm(n, l) for (n, l) in pairs], dtype=np.float64),
        k2pair=np.array([pair_index[(i.n, i.l)] for i in idx], dtype=np.int64),
        k2sh=np.array([sh_index[(i.l, i.m)] for i in idx], dtype=np.int64),
        sh_l=np.array([p[0] for p in sh_pairs], dtype=np.int64),
        sh_m=np.array([p[1] for p in sh_pairs], dtype=np.int64),
        sh_pref=np.array([hh._sh_prefactor(l, m) for (l, m) in sh_pairs], dtype=np.float64),
    )


def segment_capacity(depth: int) -> int:
    return 4 * (1 << depth) + 8 * depth + 16


# ---------------------------------------------------------------------------
# scalar helpers


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _gegenbauer(alpha, degree, x):
    if degree == 0:
        return 1.0
    c_prev = 1.0
    c = 2.0 * alpha * x
    for d in range(2, degree + 1):
        c, c_prev = (2.0 * x * (d + alpha - 1) * c - (d + 2 * alpha - 2) * c_prev) / d, c
    return c


@njit(cache=True)
def _radial(gamma, pair_n, pair_l, pair_norm, out_r, out_dr, want_deriv):
    sg = math.sin(gamma)
    cg = math.cos(gamma)
    for p in range(pair_n.shape[0]):
        n = pair_n[p]
        l = pair_l[p]
        d = n - l
        c = _gegenbauer(l + 1, d, cg)
        sl = sg**l
        out_r[p] = pair_norm[p] * sl * c
        if want_deriv:
            dc = 0.0
            if d > 0:
                dc = 2.0 * (l + 1) * _gegenbauer(l + 2, d - 1, cg)
            term = -sg * dc * sl
            if l > 0:
                term += l * sg ** (l - 1) * cg * c
            out_dr[p] = pair_norm[p] * term


@njit(cache=True)
def _sh_basis(dx, dy, dz, lmax, sh_pref, out):
    """Real SH stack for a unit direction, (l, m) lexicographic order.

    Same recurrences as hh.assoc_legendre / hh.real_sh: no Condon-Shortley
    phase in P (it lives in sh_pref), azimuth handled in Cartesian form.
    """
    rxy = math.sqrt(dx * dx + dy * dy)
    if rxy > 0.0:
        cphi = dx / rxy
        sphi = dy / rxy
    else:
        cphi = 1.0
        sphi = 0.0
    z = dz
    cm = 1.0  # cos(mu * phi)
    sm = 0.0  # sin(mu * phi)
    pmm = 1.0  # P_mu^mu without the (2mu-1)!! ... accumulated below
    for mu in range(lmax + 1):
        if mu > 0:
            cm, sm = cm * cphi - sm * sphi, sm * cphi + cm * sphi
            pmm = pmm * (2.0 * mu - 1.0) * rxy
        # ascend in l at fixed mu
        p_prev = 0.0
        p = pmm
        for l in range(mu, lmax + 1):
            if l == mu:
                p = pmm
            elif l == mu + 1:
                p_prev, p = p, z * (2.0 * mu + 1.0) * pmm
            else:
                p_prev, p = p, (z * (2 * l - 1) * p - (l + mu - 1) * p_prev) / (l - mu)
            base = l * l + l
            if mu == 0:
                out[base] = sh_pref[base] * p
            else:
                out[base + mu] = sh_pref[base + mu] * p * cm
                out[base - mu] = sh_pref[base - mu] * p * sm


# ---------------------------------------------------------------------------
# traversal


@njit(cache=True)
def _collect_segments(child, depth, o0, o1, o2, d0, d1, d2, tmin, tmax, leaf_out, t0_out, t1_out):
    """Parametric traversal of one ray through the unit cube.

    Inputs are already in normalized cube coordinates (the t parameter is
    untouched by the normalization, so emitted t values are world-ray
    parameters). Returns the number of segments written, ordered near to
    far with strictly positive extent.
    """
    # mirror negative axes so the effective direction is non-negative;
    # geometric child bits are XOR-ed back through the mirror mask
    mirror = 0
    if d0 < 0.0:
        o0 = 1.0 - o0
        d0 = -d0
        mirror |= 1
    if d1 < 0.0:
        o1 = 1.0 - o1
        d1 = -d1
        mirror |= 2
    if d2 < 0.0:
        o2 = 1.0 - o2
        d2 = -d2
        mirror |= 4
    big = 1e300
    if d0 < 1e-300:
        if o0 < 0.0 or o0 >= 1.0:
            return 0
        i0 = big
    else:
        i0 = 1.0 / d0
    if d1 < 1e-300:
        if o1 < 0.0 or o1 >= 1.0:
            return 0
        i1 = big
    else:
        i1 = 1.0 / d1
    if d2 < 1e-300:
        if o2 < 0.0 or o2 >= 1.0:
            return 0
        i2 = big
    else:
        i2 = 1.0 / d2

    s_ptr = np.empty(_STACK, dtype=np.int64)
    s_level = np.empty(_STACK, dtype=np.int64)
    s_cx = np.empty(_STACK, dtype=np.int64)
    s_cy = np.empty(_STACK, dtype=np.int64)
    s_cz = np.empty(_STACK, dtype=np.int64)
    s_tin = np.empty(_STACK, dtype=np.float64)
    s_tout = np.empty(_STACK, dtype=np.float64)

    # root entry range
    rt_in = max(max((0.0 - o0) * i0, (0.0 - o1) * i1), max((0.0 - o2) * i2, tmin))
    rt_out = min(min((1.0 - o0) * i0, (1.0 - o1) * i1), min((1.0 - o2) * i2, tmax))
    if rt_in >= rt_out:
        return 0
    top = 0
    s_ptr[0] = 0
    s_level[0] = 0
    s_cx[0] = 0
    s_cy[0] = 0
    s_cz[0] = 0
    s_tin[0] = rt_in
    s_tout[0] = rt_out
    top = 1

    c_ptr = np.empty(8, dtype=np.int64)
    c_cx = np.empty(8, dtype=np.int64)
    c_cy = np.empty(8, dtype=np.int64)
    c_cz = np.empty(8, dtype=np.int64)
    c_tin = np.empty(8, dtype=np.float64)
    c_tout = np.empty(8, dtype=np.float64)

    count = 0
    while top > 0:
        top -= 1
        ptr = s_ptr[top]
        level = s_level[top]
        node_tin = s_tin[top]
        node_tout = s_tout[top]
        if level == depth:
            leaf_out[count] = ptr
            t0_out[count] = node_tin
            t1_out[count] = node_tout
            count += 1
            continue
        cx = s_cx[top]
        cy = s_cy[top]
        cz = s_cz[top]
        h = 1.0 / (1 << (level + 1))
        # mid-plane crossings (mirrored space, non-negative direction)
        txm = ((2 * cx + 1) * h - o0) * i0
        tym = ((2 * cy + 1) * h - o1) * i1
        tzm = ((2 * cz + 1) * h - o2) * i2
        # first child: mid planes already crossed at entry flip their bit
        b = 0
        if txm < node_tin:
            b |= 1
        if tym < node_tin:
            b |= 2
        if tzm < node_tin:
            b |= 4
        # walk the <= 4 children the ray pierces, near to far
        nc = 0
        tin = node_tin
        while True:
            tx = txm if not (b & 1) else 1e301
            ty = tym if not (b & 2) else 1e301
            tz = tzm if not (b & 4) else 1e301
            tout = min(min(tx, ty), min(tz, node_tout))
            cptr = child[ptr, b ^ mirror]
            if cptr >= 0 and tout > tin:
                c_ptr[nc] = cptr
                c_cx[nc] = 2 * cx + (b & 1)
                c_cy[nc] = 2 * cy + ((b >> 1) & 1)
                c_cz[nc] = 2 * cz + ((b >> 2) & 1)
                c_tin[nc] = tin
                c_tout[nc] = tout
                nc += 1
            if tout >= node_tout:
                break
            # step across the nearest remaining mid plane
            if tx <= ty and tx <= tz:
                b |= 1
            elif ty <= tz:
                b |= 2
            else:
                b |= 4
            tin = tout
        for a in range(nc - 1, -1, -1):
            s_ptr[top] = c_ptr[a]
            s_level[top] = level + 1
            s_cx[top] = c_cx[a]
            s_cy[top] = c_cy[a]
            s_cz[top] = c_cz[a]
            s_tin[top] = c_tin[a]
            s_tout[top] = c_tout[a]
            top += 1
    return count


@njit(cache=True, parallel=True, nogil=True)
def count_segments_kernel(child, depth, lo, side, origins, dirs, tmin, tmax, out_count):
    n = origins.shape[0]
    cap = 4 * (1 << depth) + 8 * depth + 16
    for r in prange(n):
        leaf_buf = np.empty(cap, dtype=np.int64)
        t0 = np.empty(cap, dtype=np.float64)
        t1 = np.empty(cap, dtype=np.float64)
        out_count[r] = _collect_segments(
            child,
            depth,
            (origins[r, 0] - lo[0]) / side,
            (origins[r, 1] - lo[1]) / side,
            (origins[r, 2] - lo[2]) / side,
            dirs[r, 0] / side,
            dirs[r, 1] / side,
            dirs[r, 2] / side,
            tmin,
            tmax,
            leaf_buf,
            t0,
            t1,
        )


@njit(cache=True, parallel=True, nogil=True)
def collect_segments_kernel(
    child, depth, lo, side, origins, dirs, tmin, tmax, ray_start, seg_leaf, seg_t0, seg_t1
):
    n = origins.shape[0]
    cap = 4 * (1 << depth) + 8 * depth + 16
    for r in prange(n):
        leaf_buf = np.empty(cap, dtype=np.int64)
        t0 = np.empty(cap, dtype=np.float64)
        t1 = np.empty(cap, dtype=np.float64)
        cnt = _collect_segments(
            child,
            depth,
            (origins[r, 0] - lo[0]) / side,
            (origins[r, 1] - lo[1]) / side,
            (origins[r, 2] - lo[2]) / side,
            dirs[r, 0] / side,
            dirs[r, 1] / side,
            dirs[r, 2] / side,
            tmin,
            tmax,
            leaf_buf,
            t0,
            t1,
        )
        base = ray_start[r]
        for i in range(cnt):
            seg_leaf[base + i] = leaf_buf[i]
            seg_t0[base + i] = t0[i]
            seg_t1[base + i] = t1[i]


# ---------------------------------------------------------------------------
# shared shading helpers


@njit(cache=True, inline="always")
def _decode_sigma_gamma_pre(leaf_data, L, C, a32, b32, t):
    s1 = 0.0
    s2 = 0.0
    for c in range(C):
        s1 += np.float64(a32[t, c]) * np.float64(leaf_data[L, c])
        s2 += np.float64(b32[t, c]) * np.float64(leaf_data[L, C + c])
    return s1, s2


@njit(cache=True, inline="always")
def _slice_q(leaf_data, L, C, K, R, k2pair, k2sh, q):
    for i in range(q.shape[0]):
        q[i] = 0.0
    base = 2 * C
    for k in range(K):
        rp = R[k2pair[k]]
        j = k2sh[k]
        q[3 * j + 0] += rp * np.float64(leaf_data[L, base + 3 * k + 0])
        q[3 * j + 1] += rp * np.float64(leaf_data[L, base + 3 * k + 1])
        q[3 * j + 2] += rp * np.float64(leaf_data[L, base + 3 * k + 2])


@njit(cache=True, parallel=True, nogil=True)
def build_slice_kernel(leaf_data, C, K, a32, b32, frame, pair_n, pair_l, pair_norm, k2pair, k2sh, out_sigma, out_q):
    n_leaves = leaf_data.shape[0]
    n_pairs = pair_n.shape[0]
    for L in prange(n_leaves):
        sp, gp = _decode_sigma_gamma_pre(leaf_data, L, C, a32, b32, frame)
        out_sigma[L] = max(0.0, sp)
        gamma = math.pi * _sigmoid(gp)
        r_buf = np.empty(n_pairs, dtype=np.float64)
        _radial(gamma, pair_n, pair_l, pair_norm, r_buf, r_buf, False)
        _slice_q(leaf_data, L, C, K, r_buf, k2pair, k2sh, out_q[L])


@njit(cache=True, parallel=True, nogil=True)
def render_kernel(
    child,
    depth,
    lo,
    side,
    cached,
    leaf_data,
    C,
    K,
    a32,
    b32,
    frame,
    cache_sigma,
    cache_q,
    pair_n,
    pair_l,
    pair_norm,
    k2pair,
    k2sh,
    sh_pref,
    lmax,
    has_edits,
    edit_rgb,
    edit_t,
    edit_weight,
    origins,
    dirs,
    tmin,
    tmax,
    early_stop,
    out_premult,
    out_alpha,
    out_tbar,
):
    """Fused traverse + shade; colors premultiplied, tbar = sum(w * t_mid).

    Shading happens as leaves pop off the traversal stack, so opacity
    early-termination also stops the tree walk. Rays are processed in
    chunks to amortize buffer allocation.
    """
    n = origins.shape[0]
    s_dim = (lmax + 1) * (lmax + 1)
    n_pairs = pair_n.shape[0]
    chunk = 1024
    n_chunks = (n + chunk - 1) // chunk
    for ci in prange(n_chunks):
        y = np.empty(s_dim, dtype=np.float64)
        r_buf = np.empty(n_pairs, dtype=np.float64)
        q_buf = np.empty(3 * s_dim, dtype=np.float64)
        s_ptr = np.empty(_STACK, dtype=np.int64)
        s_level = np.empty(_STACK, dtype=np.int64)
        s_cx = np.empty(_STACK, dtype=np.int64)
        s_cy = np.empty(_STACK, dtype=np.int64)
        s_cz = np.empty(_STACK, dtype=np.int64)
        s_tin = np.empty(_STACK, dtype=np.float64)
        s_tout = np.empty(_STACK, dtype=np.float64)
        c_ptr = np.empty(8, dtype=np.int64)
        c_cx = np.empty(8, dtype=np.int64)
        c_cy = np.empty(8, dtype=np.int64)
        c_cz = np.empty(8, dtype=np.int64)
        c_tin = np.empty(8, dtype=np.float64)
        c_tout = np.empty(8, dtype=np.float64)
        for r in range(ci * chunk, min(n, (ci + 1) * chunk)):
            y_ready = False
            trans = 1.0
            acc0 = 0.0
            acc1 = 0.0
            acc2 = 0.0
            aacc = 0.0
            tacc = 0.0

            o0 = (origins[r, 0] - lo[0]) / side
            o1 = (origins[r, 1] - lo[1]) / side
            o2 = (origins[r, 2] - lo[2]) / side
            d0 = dirs[r, 0] / side
            d1 = dirs[r, 1] / side
            d2 = dirs[r, 2] / side
            mirror = 0
            if d0 < 0.0:
                o0 = 1.0 - o0
                d0 = -d0
                mirror |= 1
            if d1 < 0.0:
                o1 = 1.0 - o1
                d1 = -d1
                mirror |= 2
            if d2 < 0.0:
                o2 = 1.0 - o2
                d2 = -d2
                mirror |= 4
            ok = True
            if d0 < 1e-300:
                if o0 < 0.0 or o0 >= 1.0:
                    ok = False
                i0 = 1e300
            else:
                i0 = 1.0 / d0
            if d1 < 1e-300:
                if o1 < 0.0 or o1 >= 1.0:
                    ok = False
                i1 = 1e300
            else:
                i1 = 1.0 / d1
            if d2 < 1e-300:
                if o2 < 0.0 or o2 >= 1.0:
                    ok = False
                i2 = 1e300
            else:
                i2 = 1.0 / d2
            top = 0
            if ok:
                rt_in = max(max((0.0 - o0) * i0, (0.0 - o1) * i1), max((0.0 - o2) * i2, tmin))
                rt_out = min(min((1.0 - o0) * i0, (1.0 - o1) * i1), min((1.0 - o2) * i2, tmax))
                if rt_in < rt_out:
                    s_ptr[0] = 0
                    s_level[0] = 0
                    s_cx[0] = 0
                    s_cy[0] = 0
                    s_cz[0] = 0
                    s_tin[0] = rt_in
                    s_tout[0] = rt_out
                    top = 1
            while top > 0:
                top -= 1
                ptr = s_ptr[top]
                level = s_level[top]
                node_tin = s_tin[top]
                node_tout = s_tout[top]
                if level == depth:
                    # shade one leaf segment
                    L = ptr
                    if cached:
                        sigma = cache_sigma[L]
                    else:
                        sp, gp = _decode_sigma_gamma_pre(leaf_data, L, C, a32, b32, frame)
                        sigma = max(0.0, sp)
                    edited = False
                    e_w = 0.0
                    if has_edits:
                        if edit_t[L, 0] <= frame and frame <= edit_t[L, 1]:
                            edited = True
                            e_w = edit_weight
                            sd = np.float64(edit_rgb[L, 3])
                            if sd >= 0.0:
                                sigma = sd
                    if sigma == 0.0:
                        # zero optical depth: the segment contributes exact
                        # zeros and leaves transmittance untouched
                        continue
                    if not y_ready:
                        _sh_basis(dirs[r, 0], dirs[r, 1], dirs[r, 2], lmax, sh_pref, y)
                        y_ready = True
                    delta = node_tout - node_tin
                    if not cached:
                        gamma = math.pi * _sigmoid(gp)
                        _radial(gamma, pair_n, pair_l, pair_norm, r_buf, r_buf, False)
                        _slice_q(leaf_data, L, C, K, r_buf, k2pair, k2sh, q_buf)
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    if cached:
                        for j in range(s_dim):
                            c0 += y[j] * cache_q[L, 3 * j + 0]
                            c1 += y[j] * cache_q[L, 3 * j + 1]
                            c2 += y[j] * cache_q[L, 3 * j + 2]
                    else:
                        for j in range(s_dim):
                            c0 += y[j] * q_buf[3 * j + 0]
                            c1 += y[j] * q_buf[3 * j + 1]
                            c2 += y[j] * q_buf[3 * j + 2]
                    c0 = _sigmoid(c0)
                    c1 = _sigmoid(c1)
                    c2 = _sigmoid(c2)
                    if edited:
                        c0 = e_w * np.float64(edit_rgb[L, 0]) + (1.0 - e_w) * c0
                        c1 = e_w * np.float64(edit_rgb[L, 1]) + (1.0 - e_w) * c1
                        c2 = e_w * np.float64(edit_rgb[L, 2]) + (1.0 - e_w) * c2
                    e = math.exp(-sigma * delta)
                    a = 1.0 - e
                    w = trans * a
                    acc0 += w * c0
                    acc1 += w * c1
                    acc2 += w * c2
                    aacc += w
                    tacc += w * 0.5 * (node_tin + node_tout)
                    trans *= e
                    if trans < early_stop:
                        break
                    continue
                cx = s_cx[top]
                cy = s_cy[top]
                cz = s_cz[top]
                h = 1.0 / (1 << (level + 1))
                txm = ((2 * cx + 1) * h - o0) * i0
                tym = ((2 * cy + 1) * h - o1) * i1
                tzm = ((2 * cz + 1) * h - o2) * i2
                b = 0
                if txm < node_tin:
                    b |= 1
                if tym < node_tin:
                    b |= 2
                if tzm < node_tin:
                    b |= 4
                nc = 0
                tin = node_tin
                while True:
                    tx = txm if not (b & 1) else 1e301
                    ty = tym if not (b & 2) else 1e301
                    tz = tzm if not (b & 4) else 1e301
                    tout = min(min(tx, ty), min(tz, node_tout))
                    cptr = child[ptr, b ^ mirror]
                    if cptr >= 0 and tout > tin:
                        c_ptr[nc] = cptr
                        c_cx[nc] = 2 * cx + (b & 1)
                        c_cy[nc] = 2 * cy + ((b >> 1) & 1)
                        c_cz[nc] = 2 * cz + ((b >> 2) & 1)
                        c_tin[nc] = tin
                        c_tout[nc] = tout
                        nc += 1
                    if tout >= node_tout:
                        break
                    if tx <= ty and tx <= tz:
                        b |= 1
                    elif ty <= tz:
                        b |= 2
                    else:
                        b |= 4
                    tin = tout
                for a_i in range(nc - 1, -1, -1):
                    s_ptr[top] = c_ptr[a_i]
                    s_level[top] = level + 1
                    s_cx[top] = c_cx[a_i]
                    s_cy[top] = c_cy[a_i]
                    s_cz[top] = c_cz[a_i]
                    s_tin[top] = c_tin[a_i]
                    s_tout[top] = c_tout[a_i]
                    top += 1
            out_premult[r, 0] = acc0
            out_premult[r, 1] = acc1
            out_premult[r, 2] = acc2
            out_alpha[r] = aacc
            out_tbar[r] = tacc


@njit(cache=True, parallel=True, nogil=True)
def shade_forward_kernel(
    seg_leaf,
    seg_t0,
    seg_t1,
    ray_start,
    ray_count,
    leaf_data,
    C,
    K,
    a32,
    b32,
    frames,
    pair_n,
    pair_l,
    pair_norm,
    k2pair,
    k2sh,
    sh_pref,
    lmax,
    dirs,
    early_stop,
    ray_y,
    seg_store,
    seg_r,
    ray_used,
    out_premult,
    out_alpha,
    out_tbar,
):
    """Forward shading over pre-collected segments, recording per-segment
    state [sigma_pre, gamma, c0, c1, c2] and radial profiles for backward."""
    n = ray_start.shape[0]
    s_dim = (lmax + 1) * (lmax + 1)
    for r in prange(n):
        _sh_basis(dirs[r, 0], dirs[r, 1], dirs[r, 2], lmax, sh_pref, ray_y[r])
        y = ray_y[r]
        t = frames[r]
        q_buf = np.empty(3 * s_dim, dtype=np.float64)
        trans = 1.0
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        aacc = 0.0
        tacc = 0.0
        used = 0
        base = ray_start[r]
        for i in range(ray_count[r]):
            s = base + i
            L = seg_leaf[s]
            delta = seg_t1[s] - seg_t0[s]
            sp, gp = _decode_sigma_gamma_pre(leaf_data, L, C, a32, b32, t)
            sigma = max(0.0, sp)
            gamma = math.pi * _sigmoid(gp)
            _radial(gamma, pair_n, pair_l, pair_norm, seg_r[s], seg_r[s], False)
            _slice_q(leaf_data, L, C, K, seg_r[s], k2pair, k2sh, q_buf)
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            for j in range(s_dim):
                c0 += y[j] * q_buf[3 * j + 0]
                c1 += y[j] * q_buf[3 * j + 1]
                c2 += y[j] * q_buf[3 * j + 2]
            c0 = _sigmoid(c0)
            c1 = _sigmoid(c1)
            c2 = _sigmoid(c2)
            seg_store[s, 0] = sp
            seg_store[s, 1] = gamma
            seg_store[s, 2] = c0
            seg_store[s, 3] = c1
            seg_store[s, 4] = c2
            e = math.exp(-sigma * delta)
            a = 1.0 - e
            w = trans * a
            acc0 += w * c0
            acc1 += w * c1
            acc2 += w * c2
            aacc += w
            tacc += w * 0.5 * (seg_t0[s] + seg_t1[s])
            trans *= e
            used += 1
            if trans < early_stop:
                break
        ray_used[r] = used
        out_premult[r, 0] = acc0
        out_premult[r, 1] = acc1
        out_premult[r, 2] = acc2
        out_alpha[r] = aacc
        out_tbar[r] = tacc


@njit(cache=True, parallel=True, nogil=True)
def shade_backward_kernel(
    seg_leaf,
    seg_t0,
    seg_t1,
    ray_start,
    ray_used,
    leaf_data,
    C,
    K,
    pair_n,
    pair_l,
    pair_norm,
    k2pair,
    k2sh,
    lmax,
    ray_y,
    seg_store,
    g_rgb,
    bg_rgb,
    seg_grad,
):
    """Per-segment upstream gradients [g_sigma_pre, g_gamma_pre, gc0..2]
    given per-ray dL/d(composited pixel) in g_rgb; bg term from
    F = sum(w_i c_i) + (1 - alpha) * bg."""
    n = ray_start.shape[0]
    n_pairs = pair_n.shape[0]
    for r in prange(n):
        used = ray_used[r]
        if used == 0:
            continue
        base = ray_start[r]
        g0 = g_rgb[r, 0]
        g1 = g_rgb[r, 1]
        g2 = g_rgb[r, 2]
        b0 = bg_rgb[r, 0]
        b1 = bg_rgb[r, 1]
        b2 = bg_rgb[r, 2]
        y = ray_y[r]
        trans_buf = np.empty(used, dtype=np.float64)
        e_buf = np.empty(used, dtype=np.float64)
        trans = 1.0
        for i in range(used):
            s = base + i
            sp = seg_store[s, 0]
            sigma = max(0.0, sp)
            delta = seg_t1[s] - seg_t0[s]
            trans_buf[i] = trans
            e_buf[i] = math.exp(-sigma * delta)
            trans *= e_buf[i]
        r_buf = np.empty(n_pairs, dtype=np.float64)
        dr_buf = np.empty(n_pairs, dtype=np.float64)
        suffix = 0.0
        for i in range(used - 1, -1, -1):
            s = base + i
            sp = seg_store[s, 0]
            gamma = seg_store[s, 1]
            c0 = seg_store[s, 2]
            c1 = seg_store[s, 3]
            c2 = seg_store[s, 4]
            delta = seg_t1[s] - seg_t0[s]
            gdot = g0 * (c0 - b0) + g1 * (c1 - b1) + g2 * (c2 - b2)
            w = trans_buf[i] * (1.0 - e_buf[i])
            # density: own-alpha term minus attenuation of everything behind
            dsig = delta * (trans_buf[i] * e_buf[i] * gdot - suffix)
            seg_grad[s, 0] = dsig if sp > 0.0 else 0.0
            # color: through the sigmoid
            dc0 = w * g0 * c0 * (1.0 - c0)
            dc1 = w * g1 * c1 * (1.0 - c1)
            dc2 = w * g2 * c2 * (1.0 - c2)
            seg_grad[s, 2] = dc0
            seg_grad[s, 3] = dc1
            seg_grad[s, 4] = dc2
            # hyper angle: through the radial profiles
            _radial(gamma, pair_n, pair_l, pair_norm, r_buf, dr_buf, True)
            L = seg_leaf[s]
            ggam = 0.0
            for k in range(K):
                j = k2sh[k]
                yv = y[j]
                wk = (
                    np.float64(leaf_data[L, 2 * C + 3 * k + 0]) * dc0
                    + np.float64(leaf_data[L, 2 * C + 3 * k + 1]) * dc1
                    + np.float64(leaf_data[L, 2 * C + 3 * k + 2]) * dc2
                )
                ggam += dr_buf[k2pair[k]] * yv * wk
            seg_grad[s, 1] = ggam * gamma * (math.pi - gamma) / math.pi
            suffix += w * gdot


@njit(cache=True, parallel=True, nogil=True)
def scatter_grads_kernel(
    seg_ids,
    seg_leaf,
    seg_ray,
    ray_frames,
    leaf_data,
    C,
    K,
    a32,
    b32,
    k2pair,
    k2sh,
    ray_y,
    seg_r,
    seg_grad,
    train_bases,
    grad_payload,
    grad_a,
    grad_b,
):
    """Accumulate per-segment upstream grads into parameter gradients.

    Only segments listed in seg_ids contribute (early-terminated tails are
    excluded). grad_payload mirrors the leaf payload layout
    [w_sigma | w_gamma | w_hh]. Parallel over three blocks (density,
    hyper angle, color) whose output columns are disjoint; segments are
    visited in a fixed order inside each block, so the result is
    deterministic for any thread count.
    """
    n_act = seg_ids.shape[0]
    for block in prange(3):
        if block == 0:
            for si in range(n_act):
                s = seg_ids[si]
                L = seg_leaf[s]
                t = ray_frames[seg_ray[s]]
                gs = seg_grad[s, 0]
                if gs != 0.0:
                    for c in range(C):
                        grad_payload[L, c] += gs * np.float64(a32[t, c])
                    if train_bases:
                        for c in range(C):
                            grad_a[t, c] += gs * np.float64(leaf_data[L, c])
        elif block == 1:
            for si in range(n_act):
                s = seg_ids[si]
                L = seg_leaf[s]
                t = ray_frames[seg_ray[s]]
                gg = seg_grad[s, 1]
                if gg != 0.0:
                    for c in range(C):
                        grad_payload[L, C + c] += gg * np.float64(b32[t, c])
                    if train_bases:
                        for c in range(C):
                            grad_b[t, c] += gg * np.float64(leaf_data[L, C + c])
        else:
            for si in range(n_act):
                s = seg_ids[si]
                L = seg_leaf[s]
                ray = seg_ray[s]
                gc0 = seg_grad[s, 2]
                gc1 = seg_grad[s, 3]
                gc2 = seg_grad[s, 4]
                if gc0 != 0.0 or gc1 != 0.0 or gc2 != 0.0:
                    for k in range(K):
                        ry = seg_r[s, k2pair[k]] * ray_y[ray, k2sh[k]]
                        col = 2 * C + 3 * k
                        grad_payload[L, col] += ry * gc0
                        grad_payload[L, col + 1] += ry * gc1
                        grad_payload[L, col + 2] += ry * gc2


@njit(cache=True, parallel=True, nogil=True)
def adam_rows_kernel(param, grad, m, v, rows, lr, beta1, beta2, eps, bc1, bc2):
    """Adam update restricted to touched rows; grads zeroed after use.

    Moment arrays are float32 (memory), math is float64."""
    n = rows.shape[0]
    d = param.shape[1]
    for i in prange(n):
        row = rows[i]
        for c in range(d):
            g = grad[row, c]
            mm = beta1 * np.float64(m[row, c]) + (1.0 - beta1) * g
            vv = beta2 * np.float64(v[row, c]) + (1.0 - beta2) * g * g
            m[row, c] = mm
            v[row, c] = vv
            step = lr * (mm / bc1) / (math.sqrt(vv / bc2) + eps)
            param[row, c] = np.float32(np.float64(param[row, c]) - step)
            grad[row, c] = 0.0
