"""Octree structure checks: point queries and traversal against brute-force
oracles, build/prune semantics, and bit-exact serialization."""

import math

import numpy as np
import pytest

from voxvid import temporal
from voxvid.octree import (
    BadMagicError,
    ChecksumError,
    TruncatedStreamError,
    UnsupportedVersionError,
    VOctree,
    build_from_sampler,
)


def make_bases(frames=4, count=3):
    rng = np.random.default_rng(0)
    return temporal.TemporalBases(rng.normal(size=(frames, count)), rng.normal(size=(frames, count)))


def random_tree(rng, depth=3, fill=0.3, n_max=1, frames=4, count=3):
    res = 1 << depth
    occ = rng.random((res, res, res)) < fill
    coords = np.argwhere(occ)
    k = 5 if n_max == 1 else 14
    data = rng.normal(size=(len(coords), 2 * count + 3 * k)).astype(np.float32)
    return VOctree.from_cells(coords, data, make_bases(frames, count), n_max,
                              bbox_lo=(0.0, 0.0, 0.0), side=1.0, depth=depth)


# ---------------------------------------------------------------------------
# query


def test_query_outside_bbox_empty():
    tree = random_tree(np.random.default_rng(1))
    assert tree.query([1.5, 0.5, 0.5]) is None
    assert tree.query([0.5, -0.1, 0.5]) is None


def test_query_against_linear_scan():
    rng = np.random.default_rng(2)
    tree = random_tree(rng)
    boxes = [tree.leaf_box(i) for i in range(tree.n_leaves)]
    for _ in range(300):
        p = rng.random(3)
        hit = None
        for row, (blo, h) in enumerate(boxes):
            if all(blo[a] <= p[a] < blo[a] + h for a in range(3)):
                hit = row
                break
        got = tree.query(p)
        if hit is None:
            assert got is None
        else:
            _, (blo, h) = got
            np.testing.assert_allclose(blo, boxes[hit][0])


def test_query_half_open_corner():
    # the shared corner belongs to the voxel whose low corner it is
    coords = np.array([[0, 0, 0], [1, 1, 1]])
    data = np.zeros((2, 2 * 3 + 3 * 5), dtype=np.float32)
    tree = VOctree.from_cells(coords, data, make_bases(), 1, depth=1)
    _, (blo, h) = tree.query([0.5, 0.5, 0.5])
    np.testing.assert_allclose(blo, [0.5, 0.5, 0.5])


def test_query_payload_round_trip():
    rng = np.random.default_rng(3)
    tree = random_tree(rng)
    row = rng.integers(tree.n_leaves)
    blo, h = tree.leaf_box(row)
    vec, _ = tree.query(blo + 0.5 * h)
    np.testing.assert_allclose(vec.w_sigma, tree.leaf_data[row, :3], atol=1e-7)


# ---------------------------------------------------------------------------
# ray segments


def test_ray_missing_bbox_empty():
    tree = random_tree(np.random.default_rng(4))
    assert tree.ray_segments([2.0, 2.0, 2.0], [1.0, 0.0, 0.0]) == []


def test_axis_ray_through_full_tree():
    depth = 2
    res = 1 << depth
    idx = np.arange(res)
    gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], 1)
    data = np.zeros((len(coords), 2 * 3 + 3 * 5), dtype=np.float32)
    tree = VOctree.from_cells(coords, data, make_bases(), 1, depth=depth)
    segs = tree.ray_segments([-1.0, 0.3, 0.6], [1.0, 0.0, 0.0])
    assert len(segs) == res
    for s in segs:
        assert s.delta == pytest.approx(1.0 / res, abs=1e-12)
    mids = [s.t_mid for s in segs]
    assert all(b > a for a, b in zip(mids, mids[1:]))


def march_leaf_oracle(tree, origin, direction, substeps=16):
    """Brute-force marcher: (t, leaf) at every fine step inside the bbox."""
    origin = np.asarray(origin, float)
    direction = np.asarray(direction, float)
    lo = tree.bbox_lo
    hi = lo + tree.side
    enter, exit_ = 0.0, np.inf
    for a in range(3):
        if direction[a] == 0.0:
            if not (lo[a] <= origin[a] < hi[a]):
                return []
        else:
            t0 = (lo[a] - origin[a]) / direction[a]
            t1 = (hi[a] - origin[a]) / direction[a]
            enter = max(enter, min(t0, t1))
            exit_ = min(exit_, max(t0, t1))
    if enter >= exit_:
        return []
    grid = tree.dense_index()
    h = tree.voxel_size()
    dt = h / substeps
    out = []
    n = int(math.ceil((exit_ - enter) / dt))
    for i in range(n):
        t = enter + (i + 0.5) * dt
        cell = np.floor((origin + t * direction - lo) / h).astype(int)
        if (cell < 0).any() or (cell >= tree.resolution).any():
            out.append((t, -1))
        else:
            out.append((t, int(grid[cell[0], cell[1], cell[2]])))
    return out


def test_segments_against_fine_march_oracle():
    # every fine-march step must land in the leaf of the traversal segment
    # covering its t (steps within one step-length of a boundary are
    # ambiguous by construction and skipped)
    rng = np.random.default_rng(5)
    tree = random_tree(rng, depth=3, fill=0.35)
    dt = tree.voxel_size() / 16
    checked = 0
    for _ in range(300):
        if rng.random() < 0.5:
            origin = rng.uniform(-0.5, 1.5, size=3)
        else:
            origin = rng.uniform(0.0, 1.0, size=3)
        direction = rng.normal(size=3)
        if rng.random() < 0.2:
            direction[rng.integers(3)] = 0.0
        if np.linalg.norm(direction) == 0:
            continue
        direction /= np.linalg.norm(direction)
        segs = tree.ray_segments(origin, direction)
        bounds = sorted({s.t_enter for s in segs} | {s.t_exit for s in segs})
        for t, leaf in march_leaf_oracle(tree, origin, direction):
            if any(abs(t - b) < dt for b in bounds):
                continue
            covering = -1
            for s in segs:
                if s.t_enter <= t < s.t_exit:
                    covering = s.leaf
                    break
            assert covering == leaf, (origin, direction, t)
            checked += 1
    assert checked > 10_000


def test_segments_disjoint_ordered_and_bounded():
    rng = np.random.default_rng(6)
    tree = random_tree(rng, depth=4, fill=0.4)
    for _ in range(100):
        origin = rng.uniform(-1, 2, size=3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        segs = tree.ray_segments(origin, direction)
        total = 0.0
        for a, b in zip(segs, segs[1:]):
            assert a.t_exit <= b.t_enter + 1e-12
            assert a.t_mid < b.t_mid
        for s in segs:
            assert s.delta > 0
            total += s.delta
        # chord of the unit cube is at most sqrt(3)
        assert total <= math.sqrt(3.0) + 1e-9


def test_segment_midpoint_query_consistency():
    rng = np.random.default_rng(7)
    tree = random_tree(rng, depth=3, fill=0.4)
    grid = tree.dense_index()
    for _ in range(100):
        origin = rng.uniform(-0.5, 1.5, size=3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        for s in tree.ray_segments(origin, direction):
            p = origin + s.t_mid * direction
            cell = np.floor((p - tree.bbox_lo) / tree.voxel_size()).astype(int)
            assert grid[cell[0], cell[1], cell[2]] == s.leaf


def test_zero_direction_rejected():
    tree = random_tree(np.random.default_rng(8))
    with pytest.raises(ValueError, match="non-zero"):
        tree.ray_segments([0.5, 0.5, 0.5], [0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# build_from_sampler


def constant_field(w_sigma, w_gamma, w_hh):
    def field(points):
        n = len(points)
        return (
            np.tile(w_sigma, (n, 1)),
            np.tile(w_gamma, (n, 1)),
            np.tile(w_hh, (n, 1, 1)),
        )

    return field


def test_build_zero_field_empty():
    bases = temporal.make_bump_bases(4, 3)
    field = constant_field(np.zeros(3), np.zeros(3), np.zeros((5, 3)))
    tree = build_from_sampler(field, 8, 1e-5, bases, 1)
    assert tree.n_leaves == 0


def test_build_single_cell():
    bases = temporal.make_bump_bases(4, 3)
    res = 8

    def field(points):
        n = len(points)
        inside = np.all((points >= 0.0) & (points < 1.0 / res), axis=1)
        ws = np.zeros((n, 3))
        ws[inside, 0] = 1.0
        return ws, np.zeros((n, 3)), np.zeros((n, 5, 3))

    tree = build_from_sampler(field, res, 1e-5, bases, 1)
    assert tree.n_leaves == 1
    assert tree.depth == 3
    np.testing.assert_array_equal(tree.leaf_coords[0], [0, 0, 0])


def test_build_constant_field_exact_average():
    bases = temporal.make_bump_bases(4, 3)
    ws = np.array([0.5, 0.1, -0.2])
    wg = np.array([1.0, 2.0, 3.0])
    whh = np.arange(15.0).reshape(5, 3) / 10.0
    tree = build_from_sampler(constant_field(ws, wg, whh), 4, 1e-5, bases, 1)
    assert tree.n_leaves == 64
    np.testing.assert_allclose(tree.leaf_data[:, :3], np.tile(ws, (64, 1)), atol=1e-6)
    np.testing.assert_allclose(tree.leaf_data[:, 3:6], np.tile(wg, (64, 1)), atol=1e-6)


def test_build_rejects_bad_resolution():
    bases = temporal.make_bump_bases(4, 3)
    field = constant_field(np.zeros(3), np.zeros(3), np.zeros((5, 3)))
    with pytest.raises(ValueError, match="power of two"):
        build_from_sampler(field, 48, 1e-5, bases, 1)


# ---------------------------------------------------------------------------
# prune


def test_prune_removes_zero_density_leaves():
    bases = temporal.make_bump_bases(4, 3)
    coords = np.array([[0, 0, 0], [1, 0, 0]])
    data = np.zeros((2, 2 * 3 + 3 * 5), dtype=np.float32)
    data[0, 0] = 1.0  # constant basis column keeps this one alive
    tree = VOctree.from_cells(coords, data, bases, 1, depth=1)
    pruned = tree.prune(1e-5)
    assert pruned.n_leaves == 1
    np.testing.assert_array_equal(pruned.leaf_coords[0], [0, 0, 0])


def test_prune_threshold_zero_identity():
    rng = np.random.default_rng(9)
    tree = random_tree(rng)
    data = tree.leaf_data.copy()
    data[:, :3] = np.abs(data[:, :3]) + 0.1  # ensure strictly positive density
    tree.leaf_data = data
    pruned = tree.prune(0.0)
    assert pruned.n_leaves == tree.n_leaves
    np.testing.assert_array_equal(np.sort(pruned.leaf_coords, 0), np.sort(tree.leaf_coords, 0))


# ---------------------------------------------------------------------------
# serialization


def test_round_trip_bit_exact():
    rng = np.random.default_rng(10)
    tree = random_tree(rng, depth=3, fill=0.3)
    blob = tree.to_bytes()
    back = VOctree.from_bytes(blob)
    assert back.depth == tree.depth
    np.testing.assert_array_equal(back.leaf_data, tree.leaf_data)
    np.testing.assert_array_equal(back.node_child, tree.node_child)
    np.testing.assert_array_equal(back.leaf_coords, tree.leaf_coords)
    np.testing.assert_array_equal(back.bases.a, tree.bases.a)
    np.testing.assert_array_equal(back.bases.b, tree.bases.b)
    assert back.to_bytes() == blob


def test_round_trip_with_edits():
    rng = np.random.default_rng(11)
    tree = random_tree(rng)
    tree.ensure_edit_arrays()
    tree.edit_rgb[0] = [0.2, 0.4, 0.6, -1.0]
    tree.edit_t[0] = [2, 3]
    back = VOctree.from_bytes(tree.to_bytes())
    assert back.has_edits
    np.testing.assert_array_equal(back.edit_t, tree.edit_t)
    np.testing.assert_array_equal(back.edit_rgb, tree.edit_rgb)
    assert back.to_bytes() == tree.to_bytes()


def test_empty_tree_round_trip():
    data = np.zeros((0, 2 * 3 + 3 * 5), dtype=np.float32)
    tree = VOctree.from_cells(np.zeros((0, 3), int), data, make_bases(), 1, depth=3)
    back = VOctree.from_bytes(tree.to_bytes())
    assert back.n_leaves == 0
    assert back.ray_segments([0.5, 0.5, -1.0], [0.0, 0.0, 1.0]) == []


def test_corruption_detected():
    tree = random_tree(np.random.default_rng(12))
    blob = bytearray(tree.to_bytes())
    blob[len(blob) // 2] ^= 0x40
    with pytest.raises(ChecksumError):
        VOctree.from_bytes(bytes(blob))


def test_bad_magic():
    tree = random_tree(np.random.default_rng(13))
    blob = bytearray(tree.to_bytes())
    blob[0] = ord("X")
    with pytest.raises(BadMagicError):
        VOctree.from_bytes(bytes(blob))


def test_version_mismatch():
    tree = random_tree(np.random.default_rng(14))
    blob = bytearray(tree.to_bytes())
    blob[4] = 99
    import zlib as _z

    body = bytes(blob[:-4])
    blob[-4:] = (_z.crc32(body) & 0xFFFFFFFF).to_bytes(4, "little")
    with pytest.raises(UnsupportedVersionError):
        VOctree.from_bytes(bytes(blob))


def test_truncated_stream():
    tree = random_tree(np.random.default_rng(15))
    blob = tree.to_bytes()
    with pytest.raises(TruncatedStreamError):
        VOctree.from_bytes(blob[:3])


def test_save_load(tmp_path):
    tree = random_tree(np.random.default_rng(16))
    path = tmp_path / "t.voct"
    tree.save(path)
    back = VOctree.load(path)
    assert back.to_bytes() == tree.to_bytes()


def test_duplicate_cells_rejected():
    data = np.zeros((2, 2 * 3 + 3 * 5), dtype=np.float32)
    with pytest.raises(ValueError, match="duplicate"):
        VOctree.from_cells(np.array([[0, 0, 0], [0, 0, 0]]), data, make_bases(), 1, depth=1)


def test_upsample_preserves_payload():
    rng = np.random.default_rng(17)
    tree = random_tree(rng, depth=2, fill=0.5)
    up = tree.upsample()
    assert up.depth == 3
    assert up.n_leaves == 8 * tree.n_leaves
    vec_parent, _ = tree.query([tree.leaf_coords[0, 0] / 4 + 0.01,
                                tree.leaf_coords[0, 1] / 4 + 0.01,
                                tree.leaf_coords[0, 2] / 4 + 0.01])
    vec_child, _ = up.query([tree.leaf_coords[0, 0] / 4 + 0.01,
                             tree.leaf_coords[0, 1] / 4 + 0.01,
                             tree.leaf_coords[0, 2] / 4 + 0.01])
    np.testing.assert_allclose(vec_parent.w_sigma, vec_child.w_sigma)
