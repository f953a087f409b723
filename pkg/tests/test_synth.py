"""Synthetic-scene and dataset checks: oracle convergence and symmetry,
trajectory tracking, directory round trips, and validation errors."""

import json

import numpy as np
import pytest

from voxvid import synth
from voxvid.datasets import load_dataset, save_dataset
from voxvid.render import Camera
from voxvid.synth import Primitive, SyntheticSceneSpec, generate_synthetic, oracle_render


def static_sphere_spec(**kw):
    args = dict(
        primitives=[
            Primitive(kind="sphere", center=(0.5, 0.5, 0.5), radius=0.2, sigma0=30.0,
                      edge_width=0.03, color_base=(0.7, 0.4, 0.2))
        ],
        frames=1,
    )
    args.update(kw)
    return SyntheticSceneSpec(**args)


def test_opposite_cameras_mirror_symmetric():
    spec = static_sphere_spec()
    cam_a = Camera.look_at([2.8, 0.5, 0.5], [0.5, 0.5, 0.5], width=32, height=32)
    cam_b = Camera.look_at([-1.8, 0.5, 0.5], [0.5, 0.5, 0.5], width=32, height=32)
    rgb_a, alpha_a, _ = oracle_render(spec, cam_a, 0)
    rgb_b, alpha_b, _ = oracle_render(spec, cam_b, 0)
    # the scene is mirror symmetric about the x = 0.5 plane; images agree
    # up to a horizontal flip
    np.testing.assert_allclose(alpha_a, alpha_b[:, ::-1], atol=1e-6)
    np.testing.assert_allclose(rgb_a, rgb_b[:, ::-1], atol=1e-6)


def test_oracle_step_convergence():
    spec = static_sphere_spec()
    cam = Camera.look_at([2.2, 1.1, 0.9], [0.5, 0.5, 0.5], width=24, height=24)
    rgb1, a1, _ = oracle_render(spec, cam, 0, step=spec.side / 1024)
    rgb2, a2, _ = oracle_render(spec, cam, 0, step=spec.side / 2048)
    assert np.abs(rgb1 - rgb2).max() < 1e-4
    assert np.abs(a1 - a2).max() < 1e-4


def test_moving_sphere_centroid_tracks_projection():
    spec = synth.moving_sphere_spec(frames=8)
    prim = spec.primitives[0]
    cam = Camera.look_at([0.5, 0.5, 2.8], [0.5, 0.5, 0.5], width=96, height=96)
    for frame in (0, 3, 7):
        _, alpha, _ = oracle_render(spec, cam, frame)
        ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
        m = alpha.sum()
        cx = float((xs * alpha).sum() / m)
        cy = float((ys * alpha).sum() / m)
        # project the analytic center through the camera
        c = prim.center_at(spec.tfrac(frame))
        p_cam = np.linalg.inv(cam.c2w) @ np.append(c, 1.0)
        px = cam.fx * p_cam[0] / p_cam[2] + cam.cx - 0.5
        py = cam.fy * p_cam[1] / p_cam[2] + cam.cy - 0.5
        assert abs(cx - px) < 0.5 and abs(cy - py) < 0.5, frame


def test_zero_density_scene_is_background():
    spec = static_sphere_spec(
        primitives=[Primitive(kind="sphere", radius=0.2, sigma0=0.0)]
    )
    ds = generate_synthetic(spec, 2, 16)
    np.testing.assert_allclose(
        ds.images[0, 0], np.broadcast_to(spec.background, (16, 16, 3)), atol=1 / 255.0
    )
    assert ds.masks.max() == 0.0


def test_view_dependent_tint_changes_with_direction():
    spec = static_sphere_spec(
        primitives=[
            Primitive(kind="sphere", radius=0.2, sigma0=50.0, edge_width=0.02,
                      color_base=(0.5, 0.5, 0.5), tint=(0.3, 0.0, -0.3),
                      tint_axis=(0.0, 0.0, 1.0))
        ]
    )
    top = Camera.look_at([0.5, 0.5, 2.8], [0.5, 0.5, 0.5], width=16, height=16)
    bottom = Camera.look_at([0.5, 0.5, -1.8], [0.5, 0.5, 0.5], width=16, height=16)
    rgb_t, a_t, _ = oracle_render(spec, top, 0)
    rgb_b, _, _ = oracle_render(spec, bottom, 0)
    center = 8
    assert a_t[center, center] > 0.9
    # viewing down the -z axis vs up the +z axis flips the tint sign
    assert rgb_t[center, center, 0] < rgb_b[center, center, 0]
    assert rgb_t[center, center, 2] > rgb_b[center, center, 2]


def test_primitive_leaving_box_rejected():
    with pytest.raises(ValueError, match="leaves the domain box"):
        SyntheticSceneSpec(
            primitives=[Primitive(kind="sphere", center=(0.5, 0.5, 0.5), radius=0.3,
                                  motion_amp=0.4)],
            frames=4,
        )


def test_generate_requires_two_views():
    with pytest.raises(ValueError, match="at least 2 views"):
        generate_synthetic(static_sphere_spec(), 1, 16)


def test_box_primitive_renders():
    spec = SyntheticSceneSpec(
        primitives=[Primitive(kind="box", center=(0.5, 0.5, 0.5),
                              half_extents=(0.2, 0.1, 0.15), sigma0=80.0, edge_width=0.01)],
        frames=1,
    )
    cam = Camera.look_at([0.5, 2.5, 0.5], [0.5, 0.5, 0.5], width=48, height=48)
    _, alpha, _ = oracle_render(spec, cam, 0)
    assert alpha.max() > 0.97
    # silhouette is wider along x than z as seen from +y
    cols = (alpha > 0.5).any(axis=0).sum()
    rows = (alpha > 0.5).any(axis=1).sum()
    assert cols > rows


# ---------------------------------------------------------------------------
# dataset round trips


@pytest.fixture(scope="module")
def small_dataset():
    return generate_synthetic(synth.moving_sphere_spec(frames=3), 3, 20, n_eval=1)


def test_dataset_round_trip_identity(tmp_path, small_dataset):
    d0 = tmp_path / "d0"
    d1 = tmp_path / "d1"
    save_dataset(small_dataset, d0)
    ds1 = load_dataset(d0)
    save_dataset(ds1, d1)
    assert (d0 / "cameras.json").read_text() == (d1 / "cameras.json").read_text()
    ds2 = load_dataset(d1)
    np.testing.assert_array_equal(ds1.images, ds2.images)
    np.testing.assert_array_equal(ds1.masks, ds2.masks)
    np.testing.assert_array_equal(ds1.w2c, ds2.w2c)
    assert ds1.roles == ds2.roles


def test_dataset_roles_preserved(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.view_indices("eval") == [3]
    assert back.view_indices("train") == [0, 1, 2]


def test_missing_masks_directory(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d")
    import shutil

    shutil.rmtree(tmp_path / "d" / "masks")
    with pytest.raises(FileNotFoundError, match="masks"):
        load_dataset(tmp_path / "d")


def test_malformed_cameras_json(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d")
    (tmp_path / "d" / "cameras.json").write_text("{not json")
    with pytest.raises(ValueError, match="malformed"):
        load_dataset(tmp_path / "d")


def test_non_orthonormal_rotation_rejected(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d")
    meta = json.loads((tmp_path / "d" / "cameras.json").read_text())
    meta["views"][0]["w2c"][0] += 0.01
    (tmp_path / "d" / "cameras.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError, match="orthonormal"):
        load_dataset(tmp_path / "d")


def test_missing_frame_image(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d")
    (tmp_path / "d" / "frames" / "view000" / "0001.png").unlink()
    with pytest.raises(FileNotFoundError, match="frame image"):
        load_dataset(tmp_path / "d")
