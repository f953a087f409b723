"""Edit-service checks through a loopback client: revisions, validation,
frozen clock, painting, and the frame stream."""

import base64
import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from voxvid.compose import Scene, SceneInstance
from voxvid.service import SceneSession, make_app
from util import const_tree


def wall_tree():
    return const_tree(
        {(0, y, z): (800.0, (0.45, 0.4, 0.4)) for y in range(2) for z in range(2)},
        depth=1, frames=4,
    )


POSE = [0, 0, 1, -2.0, 1, 0, 0, 0.5, 0, 1, 0, 0.5, 0, 0, 0, 1]


@pytest.fixture
def ctx(tmp_path):
    tree = wall_tree()
    tree.save(tmp_path / "wall.voct")
    scene = Scene(
        instances=[SceneInstance(name="wall", tree=tree, source="wall.voct")],
        background=np.array([0.1, 0.1, 0.14]),
        frame_range=(0, 3),
    )
    session = SceneSession(scene, base_dir=tmp_path)
    return session, TestClient(make_app(session)), tmp_path


def pose_qs(w=32, h=32):
    return {"pose": ",".join(str(v) for v in POSE), "w": w, "h": h}


def test_scene_revision_zero(ctx):
    _, client, _ = ctx
    doc = client.get("/scene").json()
    assert doc["revision"] == 0
    assert doc["scene"]["instances"][0]["name"] == "wall"
    assert doc["scene"]["clock"] == {"playing": False, "frame": 0, "speed": 1.0}


def test_transform_valid_and_singular(ctx):
    _, client, _ = ctx
    good = np.eye(4)
    good[0, 3] = 0.5
    r = client.post("/instances/wall/transform", json={"affine": list(good.ravel())})
    assert r.status_code == 200
    assert r.json()["revision"] == 1
    bad = np.diag([1.0, 1.0, 0.0, 1.0])
    r = client.post("/instances/wall/transform", json={"affine": list(bad.ravel())})
    assert r.status_code == 422
    detail = r.json()["detail"]
    assert detail["code"] == "singular_affine"
    assert detail["field"] == "affine"
    assert "singular" in detail["message"]
    assert client.get("/scene").json()["revision"] == 1  # rejected mutation not counted


def test_duplicate_preserves_payload_bytes(ctx):
    _, client, _ = ctx
    before = client.get("/scene").json()["scene"]["memory"]
    r = client.post("/instances/wall/duplicate", json={"name": "wall2"})
    assert r.status_code == 200
    after = client.get("/scene").json()["scene"]["memory"]
    assert after["payload_bytes"] == before["payload_bytes"]
    assert after["instances"] == before["instances"] + 1


def test_unknown_instance_404(ctx):
    _, client, _ = ctx
    r = client.post("/instances/ghost/transform", json={"affine": list(np.eye(4).ravel())})
    assert r.status_code == 404
    assert r.json()["detail"]["code"] == "unknown_instance"


def test_bad_timemap_422(ctx):
    _, client, _ = ctx
    r = client.post("/instances/wall/timemap", json={"expr": "warp(9)"})
    assert r.status_code == 422
    assert r.json()["detail"]["code"] == "bad_timemap"
    r = client.post("/instances/wall/timemap", json={"expr": "shift(1)|reverse"})
    assert r.status_code == 200


def test_paused_clock_identical_frames(ctx):
    _, client, _ = ctx
    client.post("/clock", json={"playing": False, "frame": 2})
    a = client.get("/render", params=pose_qs())
    b = client.get("/render", params=pose_qs())
    assert a.headers["X-Frame"] == "2"
    assert a.content == b.content


def test_render_reports_revision(ctx):
    _, client, _ = ctx
    a = client.get("/render", params=pose_qs())
    assert a.status_code == 200
    assert a.headers["X-Revision"] == "0"
    client.post("/clock", json={"frame": 1})
    b = client.get("/render", params=pose_qs())
    assert b.headers["X-Revision"] == "1"


def test_bad_pose_422(ctx):
    _, client, _ = ctx
    r = client.get("/render", params={"pose": "1,2,3"})
    assert r.status_code == 422
    assert r.json()["detail"]["code"] == "bad_pose"


def test_paint_endpoint_changes_render(ctx):
    _, client, _ = ctx
    before = client.get("/render", params=pose_qs()).content
    mask = np.zeros((24, 24), dtype=np.uint8)
    mask[8:16, 8:16] = 255
    buf = io.BytesIO()
    Image.fromarray(mask).save(buf, format="PNG")
    r = client.post(
        "/paint",
        json={
            "instance": "wall",
            "rgb": [1.0, 0.05, 0.05],
            "time_range": [0, 3],
            "pose": POSE,
            "mask_png_base64": base64.b64encode(buf.getvalue()).decode(),
        },
    )
    assert r.status_code == 200
    body = r.json()
    assert body["edited_voxels"] >= 1
    assert body["revision"] == 1
    after = client.get("/render", params=pose_qs()).content
    assert after != before


def test_paint_missing_field(ctx):
    _, client, _ = ctx
    r = client.post("/paint", json={"instance": "wall"})
    assert r.status_code == 422
    assert r.json()["detail"]["code"] == "missing_field"


def test_lights_endpoint(ctx):
    _, client, _ = ctx
    r = client.post("/lights", json={"position": [0.5, 0.5, 3.0], "falloff_enabled": False,
                                     "cast_shadows": False})
    assert r.status_code == 200
    doc = client.get("/scene").json()
    assert len(doc["scene"]["lights"]) == 1


def test_selfrotate_yaw_linear_in_frame(ctx):
    _, client, _ = ctx
    client.post("/instances/wall/selfrotate", json={"rate": 5.0})
    yaws = []
    for f in range(4):
        client.post("/clock", json={"frame": f})
        doc = client.get("/scene").json()
        yaws.append(doc["scene"]["instances"][0]["effective_yaw"])
    diffs = np.diff(yaws)
    np.testing.assert_allclose(diffs, 5.0, atol=1e-12)


def parse_frame_message(data: bytes):
    hlen = int.from_bytes(data[:4], "little")
    header = json.loads(data[4 : 4 + hlen].decode())
    img = Image.open(io.BytesIO(data[4 + hlen :]))
    return header, np.asarray(img)


def test_stream_emits_frames_and_tracks_mutations(ctx):
    session, client, _ = ctx
    with client.websocket_connect("/stream") as ws:
        ws.send_text(json.dumps({"type": "pose", "pose": POSE, "w": 24, "h": 24}))
        header, img = parse_frame_message(ws.receive_bytes())
        assert header["revision"] == 0
        assert header["frame"] == 0
        assert header["encoding"] == "png"
        assert img.shape == (24, 24, 3)
        assert len(header["camera_hash"]) == 12
        # mutate: the stream reflects it within 2 frames
        shift = np.eye(4)
        shift[1, 3] = 0.4
        r = client.post("/instances/wall/transform", json={"affine": list(shift.ravel())})
        mutated_rev = r.json()["revision"]
        seen = None
        for _ in range(2):
            ws.send_text(json.dumps({"type": "pose", "pose": POSE, "w": 24, "h": 24}))
            header, _ = parse_frame_message(ws.receive_bytes())
            if header["revision"] >= mutated_rev:
                seen = header
                break
        assert seen is not None


def test_stream_playing_advances_frames(ctx):
    session, client, _ = ctx
    client.post("/clock", json={"playing": True, "frame": 0, "speed": 1.0})
    with client.websocket_connect("/stream") as ws:
        ws.send_text(json.dumps({"type": "pose", "pose": POSE, "w": 16, "h": 16}))
        frames = []
        for _ in range(3):
            header, _ = parse_frame_message(ws.receive_bytes())
            frames.append(header["frame"])
        assert frames == sorted(frames)
        assert frames[-1] > frames[0]


def test_concurrent_mutations_linearize(ctx):
    import threading

    session, client, _ = ctx
    revisions = []
    lock = threading.Lock()

    def worker(i):
        m = np.eye(4)
        m[0, 3] = 0.01 * i
        r = client.post("/instances/wall/transform", json={"affine": list(m.ravel())})
        with lock:
            revisions.append(r.json()["revision"])

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    # a single total order: the acknowledged revisions are exactly 1..8
    assert sorted(revisions) == list(range(1, 9))
    assert client.get("/scene").json()["revision"] == 8


def test_shutdown_flushes_scene(ctx, tmp_path):
    session, _, base = ctx
    out = base / "saved_scene.json"
    session.save(out)
    doc = json.loads(out.read_text())
    assert doc["instances"][0]["voct"] == "wall.voct"
