/**
 * DOM wiring: frame viewer with orbit drag and paint overlay, instance
 * list with numeric gizmo controls, timeline scrubber, timemap editor
 * with live validity preview, duplicate button, light placement, and
 * playback controls. Pure construction; all service traffic goes through
 * the model/API layer.
 */

import { ApiClient } from "./api.js";
import { ClientSceneModel } from "./model.js";
import { defaultOrbit, gizmoAffine, orbitPose, rotate, zoom, type OrbitState } from "./orbit.js";
import { FrameStream, type FrameEvent } from "./stream.js";
import { timeMapError } from "./timemap.js";
import type { InstanceDoc } from "./types.js";

const VIEW_W = 360;
const VIEW_H = 360;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  node.append(...children);
  return node;
}

function numberInput(value: number, step: number, onCommit: (v: number) => void): HTMLInputElement {
  const input = el("input", { type: "number", step: String(step), value: String(value) });
  input.addEventListener("change", () => onCommit(Number(input.value)));
  return input;
}

interface GizmoState {
  tx: number;
  ty: number;
  tz: number;
  yaw: number;
  scale: number;
}

export class EditorUI {
  orbit: OrbitState = defaultOrbit();
  selected: string | null = null;
  painting = false;
  paintPixels = new Set<string>();
  revisionBadge = el("span", { class: "badge" }, "rev -");
  statusBadge = el("span", { class: "badge" }, "disconnected");
  private viewer = el("canvas", { width: String(VIEW_W), height: String(VIEW_H) }) as HTMLCanvasElement;
  private overlay = el("canvas", { width: String(VIEW_W), height: String(VIEW_H) }) as HTMLCanvasElement;
  private instanceList = el("div", { class: "instances" });
  private scrubber = el("input", { type: "range", min: "0", max: "0", value: "0" }) as HTMLInputElement;
  private frameLabel = el("span", {}, "0");
  private gizmos = new Map<string, GizmoState>();

  constructor(
    public api: ApiClient,
    public model: ClientSceneModel,
    public stream: FrameStream,
    private root: HTMLElement,
  ) {}

  mount(): void {
    const viewWrap = el("div", { class: "view-wrap" }, this.viewer, this.overlay);
    const playback = this.buildPlayback();
    const sidebar = el(
      "div",
      { class: "sidebar" },
      el("h3", {}, "Instances"),
      this.instanceList,
      el("h3", {}, "Lights"),
      this.buildLightControls(),
      el("h3", {}, "Paint"),
      this.buildPaintControls(),
    );
    this.root.append(
      el("div", { class: "topbar" }, this.statusBadge, this.revisionBadge),
      el("div", { class: "main" }, viewWrap, sidebar),
      playback,
    );
    this.wireOrbit();
    this.model.onChange = () => this.renderSidebar();
    this.stream.onFrame = (f) => this.showFrame(f);
    this.stream.onStatus = (s) => {
      this.statusBadge.textContent = s;
      if (s === "connected") this.pushPose();
    };
  }

  pushPose(): void {
    this.stream.sendPose({
      type: "pose",
      pose: orbitPose(this.orbit),
      w: VIEW_W,
      h: VIEW_H,
    });
  }

  private showFrame(f: FrameEvent): void {
    this.model.noteStreamRevision(f.header.revision);
    this.revisionBadge.textContent = `rev ${f.header.revision} · frame ${f.header.frame}`;
    this.frameLabel.textContent = String(f.header.frame);
    const blob = new Blob([f.image.slice()], { type: `image/${f.header.encoding}` });
    createImageBitmap(blob).then((bmp) => {
      const ctx = this.viewer.getContext("2d")!;
      ctx.drawImage(bmp, 0, 0, VIEW_W, VIEW_H);
    });
    const playing = this.model.state?.scene.clock?.playing;
    if (playing) setTimeout(() => this.stream.poll(), 30);
  }

  private wireOrbit(): void {
    let dragging = false;
    let last: [number, number] = [0, 0];
    this.overlay.addEventListener("pointerdown", (ev) => {
      if (this.painting) {
        this.paintAt(ev.offsetX, ev.offsetY);
        return;
      }
      dragging = true;
      last = [ev.clientX, ev.clientY];
    });
    this.overlay.addEventListener("pointermove", (ev) => {
      if (this.painting && ev.buttons) {
        this.paintAt(ev.offsetX, ev.offsetY);
        return;
      }
      if (!dragging) return;
      const dx = ev.clientX - last[0];
      const dy = ev.clientY - last[1];
      last = [ev.clientX, ev.clientY];
      this.orbit = rotate(this.orbit, -dx * 0.008, dy * 0.006);
      this.pushPose();
    });
    this.overlay.addEventListener("pointerup", () => (dragging = false));
    this.overlay.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      this.orbit = zoom(this.orbit, ev.deltaY > 0 ? 1.1 : 0.9);
      this.pushPose();
    });
  }

  private buildPlayback(): HTMLElement {
    const play = el("button", {}, "play");
    const pause = el("button", {}, "pause");
    const back = el("button", {}, "<<");
    const fwd = el("button", {}, ">>");
    play.onclick = () => this.model.setClock({ playing: true });
    pause.onclick = () => this.model.setClock({ playing: false });
    back.onclick = () => this.stepFrame(-1);
    fwd.onclick = () => this.stepFrame(1);
    this.scrubber.addEventListener("change", () => {
      void this.model.setClock({ frame: Number(this.scrubber.value), playing: false });
      this.pushPose();
    });
    return el(
      "div",
      { class: "playback" },
      back, play, pause, fwd,
      this.scrubber,
      el("span", {}, "frame "),
      this.frameLabel,
    );
  }

  private stepFrame(delta: number): void {
    const clock = this.model.state?.scene.clock;
    if (!clock) return;
    void this.model.setClock({ frame: clock.frame + delta, playing: false });
    this.pushPose();
  }

  private buildLightControls(): HTMLElement {
    const x = numberInput(0.5, 0.1, () => {});
    const y = numberInput(0.5, 0.1, () => {});
    const z = numberInput(2.5, 0.1, () => {});
    const add = el("button", {}, "add spotlight");
    add.onclick = () => {
      void this.model.addLight({
        position: [Number(x.value), Number(y.value), Number(z.value)],
        cast_shadows: true,
      });
    };
    return el("div", { class: "light-controls" }, "x", x, "y", y, "z", z, add);
  }

  private buildPaintControls(): HTMLElement {
    const toggle = el("button", {}, "brush off");
    const color = el("input", { type: "color", value: "#d43d3d" }) as HTMLInputElement;
    const send = el("button", {}, "apply stroke");
    toggle.onclick = () => {
      this.painting = !this.painting;
      toggle.textContent = this.painting ? "brush on" : "brush off";
      if (!this.painting) this.clearOverlay();
    };
    send.onclick = () => void this.applyStroke(color.value);
    return el("div", { class: "paint-controls" }, toggle, color, send);
  }

  private paintAt(x: number, y: number): void {
    const r = 6;
    const ctx = this.overlay.getContext("2d")!;
    ctx.fillStyle = "rgba(255,64,64,0.5)";
    ctx.beginPath();
    ctx.arc(x, y, r, 0, 2 * Math.PI);
    ctx.fill();
    for (let dy = -r; dy <= r; dy++)
      for (let dx = -r; dx <= r; dx++)
        if (dx * dx + dy * dy <= r * r) this.paintPixels.add(`${x + dx},${y + dy}`);
  }

  private clearOverlay(): void {
    this.overlay.getContext("2d")!.clearRect(0, 0, VIEW_W, VIEW_H);
    this.paintPixels.clear();
  }

  strokeMaskPngBase64(): string {
    const mask = el("canvas", { width: String(VIEW_W), height: String(VIEW_H) }) as HTMLCanvasElement;
    const ctx = mask.getContext("2d")!;
    ctx.fillStyle = "#000";
    ctx.fillRect(0, 0, VIEW_W, VIEW_H);
    ctx.fillStyle = "#fff";
    for (const key of this.paintPixels) {
      const [x, y] = key.split(",").map(Number);
      ctx.fillRect(x, y, 1, 1);
    }
    return mask.toDataURL("image/png").split(",")[1];
  }

  private async applyStroke(hexColor: string): Promise<void> {
    if (!this.selected || this.paintPixels.size === 0) return;
    const rgb = [1, 3, 5].map((i) => parseInt(hexColor.slice(i, i + 2), 16) / 255);
    const state = this.model.state;
    const frames = state?.scene.instances.find((i) => i.name === this.selected)?.frames ?? 1;
    await this.api.paint({
      instance: this.selected,
      rgb,
      time_range: [0, frames - 1],
      pose: orbitPose(this.orbit),
      mask_png_base64: this.strokeMaskPngBase64(),
    });
    this.clearOverlay();
    await this.model.sync();
    this.pushPose();
  }

  private renderSidebar(): void {
    const state = this.model.state;
    if (!state) return;
    const [lo, hi] = state.scene.frame_range;
    this.scrubber.min = String(lo);
    this.scrubber.max = String(hi);
    if (state.scene.clock) this.scrubber.value = String(state.scene.clock.frame);
    this.instanceList.replaceChildren(
      ...state.scene.instances.map((inst) => this.instanceRow(inst)),
    );
  }

  private instanceRow(inst: InstanceDoc): HTMLElement {
    const g = this.gizmos.get(inst.name) ?? { tx: inst.affine[3], ty: inst.affine[7], tz: inst.affine[11], yaw: 0, scale: 1 };
    this.gizmos.set(inst.name, g);
    const commit = () => {
      void this.model.transform(inst.name, gizmoAffine(g.tx, g.ty, g.tz, g.yaw, g.scale));
    };
    const row = el(
      "div",
      { class: `instance ${this.selected === inst.name ? "selected" : ""}` },
      el("strong", {}, inst.name),
      inst.voct ? el("span", { class: "shared-badge" }, inst.voct) : "",
    );
    row.addEventListener("click", () => {
      this.selected = inst.name;
      this.renderSidebar();
    });
    const controls = el(
      "div",
      { class: "gizmo" },
      "x", numberInput(g.tx, 0.05, (v) => { g.tx = v; commit(); }),
      "y", numberInput(g.ty, 0.05, (v) => { g.ty = v; commit(); }),
      "z", numberInput(g.tz, 0.05, (v) => { g.tz = v; commit(); }),
      "yaw", numberInput(g.yaw, 5, (v) => { g.yaw = v; commit(); }),
      "scale", numberInput(g.scale, 0.1, (v) => { g.scale = v; commit(); }),
    );
    const dup = el("button", {}, "duplicate");
    dup.onclick = (ev) => {
      ev.stopPropagation();
      void this.model.duplicate(inst.name);
    };
    const vis = el("button", {}, inst.visible ? "hide" : "show");
    vis.onclick = (ev) => {
      ev.stopPropagation();
      void this.model.setVisible(inst.name, !inst.visible);
    };
    const tmInput = el("input", { type: "text", value: inst.timemap }) as HTMLInputElement;
    const tmStatus = el("span", { class: "tm-status" }, "ok");
    tmInput.addEventListener("input", () => {
      const err = timeMapError(tmInput.value);
      tmStatus.textContent = err ?? "ok";
      tmStatus.className = err ? "tm-status invalid" : "tm-status";
    });
    tmInput.addEventListener("change", async () => {
      if (timeMapError(tmInput.value) !== null) return;
      const res = await this.model.setTimeMap(inst.name, tmInput.value);
      if (res && !res.ok) {
        tmStatus.textContent = res.error.detail.message;
        tmStatus.className = "tm-status invalid";
      }
    });
    row.append(controls, el("div", { class: "row-actions" }, dup, vis, tmInput, tmStatus));
    return row;
  }
}
