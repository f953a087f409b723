/**
 * WebSocket frame stream. Poses are coalesced: at most one pose message is
 * in flight; dragging updates a pending pose that is sent when the next
 * frame arrives. Binary frames are (u32 LE header length | JSON header |
 * image bytes). Dropped sockets reconnect with backoff and resend the
 * last pose.
 */

import type { FrameHeader, PoseMessage } from "./types.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  binaryType: string;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: ArrayBuffer | string }) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface FrameEvent {
  header: FrameHeader;
  image: Uint8Array;
}

export function parseFrameMessage(data: ArrayBuffer): FrameEvent {
  const view = new DataView(data);
  const hlen = view.getUint32(0, true);
  const headerBytes = new Uint8Array(data, 4, hlen);
  const header = JSON.parse(new TextDecoder().decode(headerBytes)) as FrameHeader;
  return { header, image: new Uint8Array(data, 4 + hlen) };
}

export class FrameStream {
  onFrame: ((f: FrameEvent) => void) | null = null;
  onStatus: ((s: string) => void) | null = null;
  private socket: SocketLike | null = null;
  private pending: PoseMessage | null = null;
  private inflight = false;
  private closed = false;
  private retryMs = 250;

  constructor(
    private url: string,
    private factory: SocketFactory,
  ) {}

  connect(): void {
    this.closed = false;
    this.open();
  }

  private open(): void {
    const ws = this.factory(this.url);
    this.socket = ws;
    ws.binaryType = "arraybuffer";
    ws.onopen = () => {
      this.retryMs = 250;
      this.inflight = false;
      this.onStatus?.("connected");
      this.flush();
    };
    ws.onmessage = (ev) => {
      if (typeof ev.data === "string") return; // server-side error notes
      const frame = parseFrameMessage(ev.data);
      this.inflight = false;
      this.onFrame?.(frame);
      this.flush();
    };
    ws.onclose = () => {
      this.socket = null;
      this.inflight = false;
      if (this.closed) return;
      this.onStatus?.("reconnecting");
      setTimeout(() => {
        if (!this.closed) this.open();
      }, this.retryMs);
      this.retryMs = Math.min(this.retryMs * 2, 4000);
    };
    ws.onerror = () => {
      /* onclose follows */
    };
  }

  /** Queue the newest pose; older unsent poses are replaced. */
  sendPose(pose: PoseMessage): void {
    this.pending = pose;
    this.flush();
  }

  /** Ask for another frame at the current pose (playback pull). */
  poll(): void {
    if (this.pending === null && this.lastSent !== null) this.pending = this.lastSent;
    this.flush();
  }

  private lastSent: PoseMessage | null = null;

  private flush(): void {
    if (!this.socket || this.inflight || this.pending === null) return;
    try {
      this.socket.send(JSON.stringify(this.pending));
      this.lastSent = this.pending;
      this.pending = null;
      this.inflight = true;
    } catch {
      /* socket died between checks; onclose will reconnect */
    }
  }

  close(): void {
    this.closed = true;
    this.socket?.close();
    this.socket = null;
  }
}
