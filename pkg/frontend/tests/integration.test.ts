/**
 * Round trip against a real service instance: gizmo transform -> mutation
 * -> streamed frame whose revision tag passes the mutation's, and a paint
 * stroke visible from a second camera preset. Drives the same ApiClient /
 * FrameStream / model code the browser UI uses.
 */

import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import WebSocket from "ws";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { ClientSceneModel } from "../src/model.js";
import { gizmoAffine, orbitPose, type OrbitState } from "../src/orbit.js";
import { FrameStream, parseFrameMessage, type SocketLike } from "../src/stream.js";
import { decodePng, regionDiff } from "./png.js";

const PORT = 8765 + Math.floor(Math.random() * 500);
const BASE = `http://127.0.0.1:${PORT}`;
const REPO = join(__dirname, "..", "..");

function wsFactory(url: string): SocketLike {
  const sock = new WebSocket(url);
  sock.binaryType = "arraybuffer";
  const like: SocketLike = {
    send: (d) => sock.send(d),
    close: () => sock.close(),
    binaryType: "arraybuffer",
    onopen: null,
    onclose: null,
    onerror: null,
    onmessage: null,
  };
  sock.on("open", () => like.onopen?.());
  sock.on("close", () => like.onclose?.());
  sock.on("error", () => like.onerror?.());
  sock.on("message", (data: unknown, isBinary: boolean) => {
    if (!isBinary) {
      like.onmessage?.({ data: String(data) });
      return;
    }
    let buf: ArrayBuffer;
    if (data instanceof ArrayBuffer) {
      buf = data;
    } else {
      const b = data as Buffer;
      buf = b.buffer.slice(b.byteOffset, b.byteOffset + b.byteLength) as ArrayBuffer;
    }
    like.onmessage?.({ data: buf });
  });
  return like;
}

const FIXTURE_PY = `
import sys, numpy as np
sys.path.insert(0, r"${REPO}/src")
sys.path.insert(0, r"${REPO}/tests")
from util import const_tree
from voxvid.compose import Scene, SceneInstance
out = sys.argv[1]
voxels = {(0, y, z): (800.0, (0.45, 0.4, 0.4)) for y in range(2) for z in range(2)}
tree = const_tree(voxels, depth=1, frames=4)
tree.save(out + "/wall.voct")
scene = Scene(
    instances=[SceneInstance(name="wall", tree=tree, source="wall.voct")],
    background=np.array([0.1, 0.1, 0.14]),
    frame_range=(0, 3),
)
scene.save(out + "/scene.json")
print("fixture ready")
`;

let service: ChildProcess | null = null;
let workdir = "";

async function waitForService(): Promise<void> {
  for (let i = 0; i < 120; i++) {
    try {
      const res = await fetch(`${BASE}/scene`);
      if (res.ok) return;
    } catch {
      /* not up yet */
    }
    await new Promise((r) => setTimeout(r, 250));
  }
  throw new Error("service did not come up");
}

// camera presets on the wall's -x side
const PRESET_A: OrbitState = { target: [0.25, 0.5, 0.5], azimuth: Math.PI, elevation: 0.0, distance: 2.0 };
const PRESET_B: OrbitState = { target: [0.25, 0.5, 0.5], azimuth: Math.PI * 0.85, elevation: 0.15, distance: 2.0 };

describe("service round trip through the UI client", () => {
  beforeAll(async () => {
    workdir = mkdtempSync(join(tmpdir(), "voxvid-ui-"));
    execFileSync("python3", ["-c", FIXTURE_PY, workdir], { stdio: "pipe" });
    service = spawn(
      "python3",
      ["-m", "voxvid.cli", "serve", "--scene", join(workdir, "scene.json"),
       "--port", String(PORT)],
      { stdio: "pipe" },
    );
    await waitForService();
  }, 120_000);

  afterAll(() => {
    service?.kill("SIGTERM");
  });

  it("transform mutation reaches the stream with a catching-up revision tag", async () => {
    const api = new ApiClient(BASE);
    const model = new ClientSceneModel(api);
    await model.sync();
    const rev0 = model.revision;

    const stream = new FrameStream(`ws://127.0.0.1:${PORT}/stream`, wsFactory);
    const frames: number[] = [];
    let resolveFrame: (() => void) | null = null;
    stream.onFrame = (f) => {
      frames.push(f.header.revision);
      model.noteStreamRevision(f.header.revision);
      resolveFrame?.();
    };
    const nextFrame = () =>
      new Promise<void>((res, rej) => {
        resolveFrame = res;
        setTimeout(() => rej(new Error("no frame within 20s")), 20_000);
      });

    stream.connect();
    const pose = { type: "pose" as const, pose: orbitPose(PRESET_A), w: 48, h: 48 };
    stream.sendPose(pose);
    await nextFrame();
    expect(frames[0]).toBe(rev0);

    // numeric gizmo entry -> exactly one mutation
    const res = await model.transform("wall", gizmoAffine(0.2, 0.0, 0.0, 15, 1.0));
    expect(res && res.ok).toBe(true);
    const mutatedAt = res && res.ok ? res.revision : -1;
    expect(mutatedAt).toBe(rev0 + 1);

    // the stream catches up within two frames
    let caught = -1;
    for (let i = 0; i < 2; i++) {
      stream.sendPose(pose);
      await nextFrame();
      caught = frames[frames.length - 1];
      if (caught > rev0) break;
    }
    expect(caught).toBeGreaterThan(rev0);
    expect(model.lastStreamRevision).toBeLessThanOrEqual(model.revision);
    stream.close();
  }, 120_000);

  it("paint stroke is visible from a second camera preset", async () => {
    const api = new ApiClient(BASE);
    const model = new ClientSceneModel(api);
    await model.sync();

    const w = 48;
    const h = 48;
    const poseA = orbitPose(PRESET_A);
    const poseB = orbitPose(PRESET_B);
    const before = await api.renderFrame(poseB, { w, h, frame: 0 });

    // a square stroke mask in preset A pixel coordinates (PNG, base64)
    const { PNG_BASE64 } = buildMask(w, h, 18, 18, 30, 30);
    const paintRes = await api.paint({
      instance: "wall",
      rgb: [1.0, 0.1, 0.1],
      time_range: [0, 3],
      pose: poseA,
      mask_png_base64: PNG_BASE64,
    });
    expect(paintRes.edited_voxels).toBeGreaterThan(0);

    const after = await api.renderFrame(poseB, { w, h, frame: 0 });
    expect(after.revision).toBeGreaterThan(before.revision);
    const imgBefore = decodePng(new Uint8Array(before.bytes));
    const imgAfter = decodePng(new Uint8Array(after.bytes));
    // the painted wall shows through in preset B: red rises somewhere
    const diff = regionDiff(imgBefore, imgAfter, 0, 0, w, h);
    expect(diff).toBeGreaterThan(0.5);
  }, 120_000);
});

/** Build an 8-bit grayscale PNG mask with a white rectangle, via zlib. */
function buildMask(w: number, h: number, x0: number, y0: number, x1: number, y1: number) {
  const zlibMod = require("node:zlib") as typeof import("node:zlib");
  const stride = w + 1;
  const raw = new Uint8Array(h * stride);
  for (let y = 0; y < h; y++) {
    raw[y * stride] = 0; // filter none
    for (let x = 0; x < w; x++) {
      raw[y * stride + 1 + x] = x >= x0 && x < x1 && y >= y0 && y < y1 ? 255 : 0;
    }
  }
  const idat = zlibMod.deflateSync(raw);
  const chunks: Buffer[] = [];
  const crcTable = (() => {
    const t = new Uint32Array(256);
    for (let n = 0; n < 256; n++) {
      let c = n;
      for (let k = 0; k < 8; k++) c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
      t[n] = c >>> 0;
    }
    return t;
  })();
  const crc32 = (buf: Buffer) => {
    let c = 0xffffffff;
    for (const byte of buf) c = crcTable[(c ^ byte) & 0xff] ^ (c >>> 8);
    return (c ^ 0xffffffff) >>> 0;
  };
  const chunk = (type: string, body: Buffer) => {
    const len = Buffer.alloc(4);
    len.writeUInt32BE(body.length);
    const payload = Buffer.concat([Buffer.from(type, "ascii"), body]);
    const crc = Buffer.alloc(4);
    crc.writeUInt32BE(crc32(payload));
    chunks.push(Buffer.concat([len, payload, crc]));
  };
  const ihdr = Buffer.alloc(13);
  ihdr.writeUInt32BE(w, 0);
  ihdr.writeUInt32BE(h, 4);
  ihdr[8] = 8; // bit depth
  ihdr[9] = 0; // grayscale
  chunk("IHDR", ihdr);
  chunk("IDAT", Buffer.from(idat));
  chunk("IEND", Buffer.alloc(0));
  const png = Buffer.concat([Buffer.from([137, 80, 78, 71, 13, 10, 26, 10]), ...chunks]);
  return { PNG_BASE64: png.toString("base64") };
}
