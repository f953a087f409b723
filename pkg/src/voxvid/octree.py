"""Sparse video octree over a cube, leaves carrying coefficient payloads.

Structure: a fixed leaf depth d (resolution 2^d per axis); internal nodes
store eight child slots, absent children meaning pruned/empty space, and
all occupied leaves sit at depth d. Leaf payload rows are float32 with
layout [w_sigma (C) | w_gamma (C) | w_hh (K*3)] plus, once any paint edit
exists, five conceptual edit channels kept in side arrays (rgb + density
override + inclusive frame range) and packed into the payload block on
disk.

The on-disk format (.voct) is little-endian:

    magic 'VOCT' | u32 version | u32 flags | u32 depth | u32 T | u32 C
    | u32 K | f64 bbox[6] | u32 n_internal | u32 n_leaves
    | node table (BFS: u8 child mask + one u32 per set bit)
    | payload block (n_leaves * payload_len f32)
    | A (T*C f32) | B (T*C f32) | u32 crc32

Round trips are bit-exact; corruption, truncation, bad magic and unknown
versions raise distinct exceptions.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import hh, kernels
from .temporal import CoefficientVector, EditChannels, TemporalBases, payload_length

__all__ = [
    "VOctree",
    "RaySegment",
    "VoctError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedStreamError",
    "ChecksumError",
    "build_from_sampler",
]

_MAGIC = b"VOCT"
_VERSION = 1
_FLAG_EDITS = 1


class VoctError(Exception):
    """Base error for .voct parsing."""


class BadMagicError(VoctError):
    pass


class UnsupportedVersionError(VoctError):
    pass


class TruncatedStreamError(VoctError):
    pass


class ChecksumError(VoctError):
    pass


@dataclass(frozen=True)
class RaySegment:
    """One leaf crossing: world-ray parameters and world-space length."""

    leaf: int
    t_enter: float
    t_exit: float
    delta: float

    @property
    def t_mid(self) -> float:
        return 0.5 * (self.t_enter + self.t_exit)


class VOctree:
    """Octree over [lo, lo+side)^3 with per-leaf coefficient payloads."""

    def __init__(self, depth, node_child, leaf_coords, leaf_data, bases, n_max, bbox_lo, side,
                 edit_rgb=None, edit_t=None):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = int(depth)
        self.node_child = np.ascontiguousarray(node_child, dtype=np.int32)
        self.leaf_coords = np.ascontiguousarray(leaf_coords, dtype=np.int32)
        self.leaf_data = np.ascontiguousarray(leaf_data, dtype=np.float32)
        self.bases = bases
        self.n_max = int(n_max)
        self.bbox_lo = np.asarray(bbox_lo, dtype=np.float64).reshape(3).copy()
        self.side = float(side)
        if self.side <= 0:
            raise ValueError("bbox side must be positive")
        k = hh.basis_count(self.n_max)
        expected = payload_length(bases.count, k)
        if self.leaf_data.shape[1] != expected:
            raise ValueError(
                f"payload width {self.leaf_data.shape[1]} != 2C+3K = {expected}"
            )
        self.edit_rgb = edit_rgb  # (n_leaves, 4) float32: rgb + density override (-1 none)
        self.edit_t = edit_t  # (n_leaves, 2) int32 inclusive frame range, lo > hi inactive

    # -- basic geometry/shape ------------------------------------------------

    @property
    def resolution(self) -> int:
        return 1 << self.depth

    @property
    def n_leaves(self) -> int:
        return self.leaf_data.shape[0]

    @property
    def n_internal(self) -> int:
        return self.node_child.shape[0]

    @property
    def frames(self) -> int:
        return self.bases.frames

    @property
    def coeff_count(self) -> int:
        return self.bases.count

    @property
    def basis_count(self) -> int:
        return hh.basis_count(self.n_max)

    @property
    def trunc(self) -> hh.BasisTruncation:
        return hh.BasisTruncation(self.n_max)

    @property
    def has_edits(self) -> bool:
        return self.edit_rgb is not None

    @property
    def payload_len(self) -> int:
        return payload_length(self.bases.count, self.basis_count, self.has_edits)

    @property
    def tables(self) -> kernels.BasisTables:
        return kernels.basis_tables(self.n_max)

    def payload_nbytes(self) -> int:
        n = self.leaf_data.nbytes + self.bases.a.nbytes + self.bases.b.nbytes
        n += self.node_child.nbytes + self.leaf_coords.nbytes
        if self.has_edits:
            n += self.edit_rgb.nbytes + self.edit_t.nbytes
        return n

    def voxel_size(self) -> float:
        return self.side / self.resolution

    def leaf_box(self, row: int) -> tuple[np.ndarray, float]:
        h = self.voxel_size()
        return self.bbox_lo + self.leaf_coords[row] * h, h

    def _edit_arrays(self):
        """Kernel-safe edit arrays (dummies when no edits exist)."""
        if self.has_edits:
            return True, self.edit_rgb, self.edit_t
        return False, np.zeros((1, 4), dtype=np.float32), np.zeros((1, 2), dtype=np.int32)

    def ensure_edit_arrays(self):
        if not self.has_edits:
            self.edit_rgb = np.zeros((self.n_leaves, 4), dtype=np.float32)
            self.edit_rgb[:, 3] = -1.0
            self.edit_t = np.tile(np.array([[1, 0]], dtype=np.int32), (self.n_leaves, 1))

    # -- construction ----------------------------------------------------------

    @classmethod
    def from_cells(cls, coords, leaf_data, bases, n_max, bbox_lo=(0.0, 0.0, 0.0), side=1.0,
                   depth=None, edit_rgb=None, edit_t=None) -> "VOctree":
        """Build the node table for occupied cells at a fixed depth.

        coords are integer cells in [0, 2^depth)^3; payload row i belongs
        to coords[i]. Empty regions collapse: no nodes are allocated where
        no descendant is occupied.
        """
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if depth is None:
            if len(coords) == 0:
                raise ValueError("cannot infer depth from an empty cell set")
            depth = int(np.max(coords)).bit_length()
            depth = max(depth, 1)
        res = 1 << depth
        if len(coords) and (coords.min() < 0 or coords.max() >= res):
            raise ValueError("cell coordinates out of range for depth")
        occ = np.zeros((res, res, res), dtype=bool)
        rows = np.full((res, res, res), -1, dtype=np.int32)
        occ[coords[:, 0], coords[:, 1], coords[:, 2]] = True
        if occ.sum() != len(coords):
            raise ValueError("duplicate cell coordinates")
        rows[coords[:, 0], coords[:, 1], coords[:, 2]] = np.arange(len(coords), dtype=np.int32)

        # occupancy pyramid, mips[lvl] has side 2^lvl
        mips = [occ]
        cur = occ
        for _ in range(depth):
            r = cur.shape[0] // 2
            cur = cur.reshape(r, 2, r, 2, r, 2).any(axis=(1, 3, 5))
            mips.append(cur)
        mips = mips[::-1]

        node_child: list[np.ndarray] = []
        queue: list[tuple[int, int, int, int]] = []
        if mips[0][0, 0, 0]:
            node_child.append(np.full(8, -1, dtype=np.int32))
            queue.append((0, 0, 0, 0))  # node id, cx, cy, cz at its level
        levels = [0] if queue else []
        qi = 0
        while qi < len(queue):
            nid, cx, cy, cz = queue[qi]
            level = levels[qi]
            qi += 1
            for b in range(8):
                x = 2 * cx + (b & 1)
                y = 2 * cy + ((b >> 1) & 1)
                z = 2 * cz + ((b >> 2) & 1)
                if level + 1 == depth:
                    row = rows[x, y, z]
                    if row >= 0:
                        node_child[nid][b] = row
                elif mips[level + 1][x, y, z]:
                    child_id = len(node_child)
                    node_child.append(np.full(8, -1, dtype=np.int32))
                    node_child[nid][b] = child_id
                    queue.append((child_id, x, y, z))
                    levels.append(level + 1)
        table = (
            np.stack(node_child) if node_child else np.full((1, 8), -1, dtype=np.int32)
        )
        return cls(depth, table, coords.astype(np.int32), leaf_data, bases, n_max,
                   bbox_lo, side, edit_rgb=edit_rgb, edit_t=edit_t)

    def dense_index(self) -> np.ndarray:
        """Dense cell -> leaf row map (-1 empty); transient helper."""
        res = self.resolution
        grid = np.full((res, res, res), -1, dtype=np.int32)
        c = self.leaf_coords
        grid[c[:, 0], c[:, 1], c[:, 2]] = np.arange(self.n_leaves, dtype=np.int32)
        return grid

    # -- queries ----------------------------------------------------------------

    def query(self, point):
        """Payload and box of the leaf containing point, or None.

        Boxes follow the half-open [lo, hi) convention on every axis.
        """
        p = (np.asarray(point, dtype=np.float64) - self.bbox_lo) / self.side
        if (p < 0.0).any() or (p >= 1.0).any():
            return None
        cell = np.minimum((p * self.resolution).astype(np.int64), self.resolution - 1)
        node = 0
        if self.n_leaves == 0:
            return None
        for level in range(self.depth):
            shift = self.depth - 1 - level
            b = (
                ((cell[0] >> shift) & 1)
                | (((cell[1] >> shift) & 1) << 1)
                | (((cell[2] >> shift) & 1) << 2)
            )
            node = self.node_child[node, b]
            if node < 0:
                return None
        row = int(node)
        c = self.coeff_count
        k = self.basis_count
        edit = None
        if self.has_edits and self.edit_t[row, 0] <= self.edit_t[row, 1]:
            sd = float(self.edit_rgb[row, 3])
            edit = EditChannels(
                target_rgb=tuple(float(v) for v in self.edit_rgb[row, :3]),
                time_range=(int(self.edit_t[row, 0]), int(self.edit_t[row, 1])),
                target_density=None if sd < 0 else sd,
            )
        vec = CoefficientVector(
            w_sigma=self.leaf_data[row, :c].astype(np.float64),
            w_gamma=self.leaf_data[row, c : 2 * c].astype(np.float64),
            w_hh=self.leaf_data[row, 2 * c :].astype(np.float64).reshape(k, 3),
            edit=edit,
        )
        return vec, self.leaf_box(row)

    def ray_segments(self, origin, direction, t_range=None) -> list[RaySegment]:
        """Ordered, disjoint leaf crossings of one ray (near to far)."""
        origin = np.asarray(origin, dtype=np.float64)
        direction = np.asarray(direction, dtype=np.float64)
        norm = float(np.linalg.norm(direction))
        if norm == 0.0:
            raise ValueError("ray direction must be non-zero")
        tmin, tmax = (0.0, 1e30) if t_range is None else (float(t_range[0]), float(t_range[1]))
        cap = kernels.segment_capacity(self.depth)
        leaf = np.empty(cap, dtype=np.int64)
        t0 = np.empty(cap, dtype=np.float64)
        t1 = np.empty(cap, dtype=np.float64)
        cnt = kernels._collect_segments(
            self.node_child,
            self.depth,
            (origin[0] - self.bbox_lo[0]) / self.side,
            (origin[1] - self.bbox_lo[1]) / self.side,
            (origin[2] - self.bbox_lo[2]) / self.side,
            direction[0] / self.side,
            direction[1] / self.side,
            direction[2] / self.side,
            tmin,
            tmax,
            leaf,
            t0,
            t1,
        )
        return [
            RaySegment(int(leaf[i]), float(t0[i]), float(t1[i]), float((t1[i] - t0[i]) * norm))
            for i in range(cnt)
        ]

    def max_density_per_leaf(self) -> np.ndarray:
        a = self.bases.a.astype(np.float64)
        ws = self.leaf_data[:, : self.coeff_count].astype(np.float64)
        return np.maximum(0.0, ws @ a.T).max(axis=1) if self.n_leaves else np.zeros(0)

    def prune(self, threshold: float) -> "VOctree":
        """Drop leaves whose max-over-time decoded density falls below threshold."""
        if threshold < 0:
            raise ValueError("prune threshold must be >= 0")
        keep = self.max_density_per_leaf() >= threshold
        return self._subset(keep)

    def _subset(self, keep: np.ndarray) -> "VOctree":
        rgb = self.edit_rgb[keep].copy() if self.has_edits else None
        et = self.edit_t[keep].copy() if self.has_edits else None
        return VOctree.from_cells(
            self.leaf_coords[keep],
            self.leaf_data[keep].copy(),
            self.bases.copy(),
            self.n_max,
            self.bbox_lo,
            self.side,
            depth=self.depth,
            edit_rgb=rgb,
            edit_t=et,
        )

    def upsample(self) -> "VOctree":
        """Split every leaf into its 8 children, copying the payload."""
        offs = np.array(
            [[(b & 1), (b >> 1) & 1, (b >> 2) & 1] for b in range(8)], dtype=np.int32
        )
        coords = (self.leaf_coords[:, None, :] * 2 + offs[None, :, :]).reshape(-1, 3)
        data = np.repeat(self.leaf_data, 8, axis=0)
        rgb = np.repeat(self.edit_rgb, 8, axis=0) if self.has_edits else None
        et = np.repeat(self.edit_t, 8, axis=0) if self.has_edits else None
        return VOctree.from_cells(
            coords, data, self.bases.copy(), self.n_max, self.bbox_lo, self.side,
            depth=self.depth + 1, edit_rgb=rgb, edit_t=et,
        )

    # -- serialization -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        flags = _FLAG_EDITS if self.has_edits else 0
        t, c, k = self.frames, self.coeff_count, self.basis_count
        hi = self.bbox_lo + self.side
        parts = [
            _MAGIC,
            struct.pack(
                "<IIIIII", _VERSION, flags, self.depth, t, c, k
            ),
            struct.pack("<6d", *self.bbox_lo, *hi),
            struct.pack("<II", self.n_internal, self.n_leaves),
        ]
        node_buf = bytearray()
        for i in range(self.n_internal):
            children = self.node_child[i]
            mask = 0
            ptrs = []
            for b in range(8):
                if children[b] >= 0:
                    mask |= 1 << b
                    ptrs.append(int(children[b]))
            node_buf += struct.pack("<B", mask)
            node_buf += struct.pack(f"<{len(ptrs)}I", *ptrs)
        parts.append(bytes(node_buf))
        if self.has_edits:
            plen = self.leaf_data.shape[1] + 5
            payload = np.zeros((self.n_leaves, plen), dtype=np.float32)
            payload[:, : plen - 5] = self.leaf_data
            payload[:, plen - 5 : plen - 1] = self.edit_rgb
            packed = (
                (self.edit_t[:, 0].astype(np.int64) & 0xFFFF)
                | ((self.edit_t[:, 1].astype(np.int64) & 0xFFFF) << 16)
            ).astype(np.uint32)
            payload[:, plen - 1] = packed.view(np.float32)
        else:
            payload = self.leaf_data
        parts.append(np.ascontiguousarray(payload, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(self.bases.a, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(self.bases.b, dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, data: bytes) -> "VOctree":
        if len(data) < 4:
            raise TruncatedStreamError(f"stream of {len(data)} bytes is shorter than the magic")
        if data[:4] != _MAGIC:
            raise BadMagicError(f"bad magic {data[:4]!r}, expected {_MAGIC!r}")
        if len(data) < 8:
            raise TruncatedStreamError("stream ends inside the header")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != _VERSION:
            raise UnsupportedVersionError(f"unsupported .voct version {version}")
        if len(data) < 4 + 24 + 48 + 8 + 4:
            raise TruncatedStreamError("stream ends inside the header")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise ChecksumError("crc32 mismatch: stream corrupted")
        off = 4
        version, flags, depth, t, c, k = struct.unpack_from("<IIIIII", data, off)
        off += 24
        bbox = struct.unpack_from("<6d", data, off)
        off += 48
        n_internal, n_leaves = struct.unpack_from("<II", data, off)
        off += 8
        lo = np.array(bbox[:3])
        sides = np.array(bbox[3:]) - lo
        if np.ptp(sides) > 1e-9 * max(1.0, abs(sides[0])):
            raise VoctError(f"bbox is not a cube: sides {sides}")
        node_child = np.full((max(n_internal, 1), 8), -1, dtype=np.int32)
        for i in range(n_internal):
            if off + 1 > len(body):
                raise TruncatedStreamError("stream ends inside the node table")
            mask = data[off]
            off += 1
            nset = bin(mask).count("1")
            if off + 4 * nset > len(body):
                raise TruncatedStreamError("stream ends inside the node table")
            ptrs = struct.unpack_from(f"<{nset}I", data, off)
            off += 4 * nset
            pi = 0
            for b in range(8):
                if mask & (1 << b):
                    node_child[i, b] = ptrs[pi]
                    pi += 1
        has_edits = bool(flags & _FLAG_EDITS)
        plen = payload_length(c, k, has_edits)
        need = n_leaves * plen * 4 + 2 * t * c * 4
        if off + need > len(body):
            raise TruncatedStreamError("stream ends inside the payload block")
        payload = np.frombuffer(data, dtype="<f4", count=n_leaves * plen, offset=off)
        payload = payload.reshape(n_leaves, plen).copy()
        off += n_leaves * plen * 4
        a = np.frombuffer(data, dtype="<f4", count=t * c, offset=off).reshape(t, c).copy()
        off += t * c * 4
        b = np.frombuffer(data, dtype="<f4", count=t * c, offset=off).reshape(t, c).copy()
        off += t * c * 4
        if off != len(body):
            raise VoctError(f"{len(body) - off} trailing bytes after payload")

        edit_rgb = edit_t = None
        core = payload
        if has_edits:
            core = payload[:, : plen - 5].copy()
            edit_rgb = payload[:, plen - 5 : plen - 1].copy()
            packed = payload[:, plen - 1].copy().view(np.uint32)
            edit_t = np.stack(
                [(packed & 0xFFFF).astype(np.int32), (packed >> 16).astype(np.int32)], axis=1
            )
            edit_t = np.ascontiguousarray(edit_t)

        # leaf coordinates from a BFS walk mirroring serialization order
        leaf_coords = np.zeros((n_leaves, 3), dtype=np.int32)
        if n_leaves:
            stack = [(0, 0, 0, 0, 0)]
            while stack:
                nid, level, cx, cy, cz = stack.pop()
                for bbit in range(8):
                    ptr = node_child[nid, bbit]
                    if ptr < 0:
                        continue
                    x = 2 * cx + (bbit & 1)
                    y = 2 * cy + ((bbit >> 1) & 1)
                    z = 2 * cz + ((bbit >> 2) & 1)
                    if level + 1 == depth:
                        leaf_coords[ptr] = (x, y, z)
                    else:
                        stack.append((ptr, level + 1, x, y, z))
        bases = TemporalBases(a, b)
        return cls(depth, node_child, leaf_coords, core, bases, _n_max_from_k(k),
                   lo, float(sides[0]), edit_rgb=edit_rgb, edit_t=edit_t)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "VOctree":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def _n_max_from_k(k: int) -> int:
    from .temporal import n_max_for_count

    return n_max_for_count(k)


def build_from_sampler(field, resolution, threshold, bases, n_max,
                       bbox_lo=(0.0, 0.0, 0.0), side=1.0, rng=None,
                       samples_per_voxel=256, chunk=2048) -> VOctree:
    """Dense-grid initialization of a VOctree from a point-evaluable field.

    field(points) must return (w_sigma, w_gamma, w_hh) arrays for world
    points of shape (N, 3). The dense grid is evaluated at voxel centers,
    voxels whose time-summed decoded density is <= threshold are removed,
    and each surviving voxel stores the average coefficients over
    samples_per_voxel uniform interior points.
    """
    resolution = int(resolution)
    if resolution < 2 or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two >= 2, got {resolution}")
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    rng = np.random.default_rng(0) if rng is None else rng
    depth = resolution.bit_length() - 1
    bbox_lo = np.asarray(bbox_lo, dtype=np.float64)
    h = side / resolution
    k = hh.basis_count(n_max)
    c = bases.count

    idx = np.arange(resolution)
    gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    centers = bbox_lo + (coords + 0.5) * h

    a64 = bases.a.astype(np.float64)
    keep_rows = []
    for start in range(0, len(centers), chunk * 8):
        pts = centers[start : start + chunk * 8]
        ws, _, _ = field(pts)
        dens = np.maximum(0.0, np.asarray(ws, dtype=np.float64) @ a64.T).sum(axis=1)
        (hits,) = np.nonzero(dens > threshold)
        keep_rows.append(hits + start)
    keep = np.concatenate(keep_rows) if keep_rows else np.zeros(0, dtype=np.int64)
    kept_coords = coords[keep]

    data = np.zeros((len(keep), payload_length(c, k)), dtype=np.float32)
    for start in range(0, len(keep), chunk):
        cc = kept_coords[start : start + chunk]
        n_v = len(cc)
        u = rng.random((n_v, samples_per_voxel, 3))
        pts = bbox_lo + (cc[:, None, :] + u) * h
        ws, wg, whh = field(pts.reshape(-1, 3))
        ws = np.asarray(ws, dtype=np.float64).reshape(n_v, samples_per_voxel, c).mean(axis=1)
        wg = np.asarray(wg, dtype=np.float64).reshape(n_v, samples_per_voxel, c).mean(axis=1)
        whh = (
            np.asarray(whh, dtype=np.float64)
            .reshape(n_v, samples_per_voxel, k, 3)
            .mean(axis=1)
        )
        data[start : start + n_v, :c] = ws
        data[start : start + n_v, c : 2 * c] = wg
        data[start : start + n_v, 2 * c :] = whh.reshape(n_v, 3 * k)

    return VOctree.from_cells(kept_coords, data, bases, n_max, bbox_lo, side, depth=depth)
