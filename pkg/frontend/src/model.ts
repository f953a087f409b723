/**
 * Client-side scene mirror with optimistic edits.
 *
 * The authoritative state is the last acknowledged server document; edits
 * apply optimistically to the working copy and either commit (server ack
 * replaces the authoritative doc) or roll back wholesale to the last
 * server revision on rejection. A per-action inflight guard means one UI
 * action produces exactly one mutation even under double-clicks.
 */

import { ApiClient, ApiError } from "./api.js";
import type { SceneState } from "./types.js";

export type MutationResult =
  | { ok: true; revision: number; id?: string }
  | { ok: false; error: ApiError }
  | null; // suppressed duplicate action

export class ClientSceneModel {
  state: SceneState | null = null; // working copy shown by the UI
  private serverState: SceneState | null = null; // last acknowledged
  lastStreamRevision = -1;
  onChange: ((s: SceneState) => void) | null = null;
  private inflight = new Set<string>();

  constructor(private api: ApiClient) {}

  async sync(): Promise<SceneState> {
    const doc = await this.api.getScene();
    this.serverState = doc;
    this.state = structuredClone(doc);
    this.onChange?.(this.state);
    return doc;
  }

  get revision(): number {
    return this.serverState?.revision ?? -1;
  }

  noteStreamRevision(rev: number): void {
    this.lastStreamRevision = rev;
    // the UI must never present state newer than what the server ack'd;
    // stream revisions only ever trail or equal the mirrored revision
  }

  /**
   * Run one mutation: optimistic local change, single POST, re-sync on
   * ack, rollback to the last server revision on rejection.
   */
  async mutate(
    actionKey: string,
    optimistic: (s: SceneState) => void,
    post: () => Promise<{ revision: number; id?: string }>,
  ): Promise<MutationResult> {
    if (this.inflight.has(actionKey)) return null;
    this.inflight.add(actionKey);
    try {
      if (this.state) {
        optimistic(this.state);
        this.onChange?.(this.state);
      }
      const ack = await post();
      await this.sync();
      return { ok: true, revision: ack.revision, id: (ack as { id?: string }).id };
    } catch (e) {
      // roll back: the working copy returns to the last server revision
      if (this.serverState) {
        this.state = structuredClone(this.serverState);
        this.onChange?.(this.state);
      }
      if (e instanceof ApiError) return { ok: false, error: e };
      throw e;
    } finally {
      this.inflight.delete(actionKey);
    }
  }

  transform(id: string, affine: number[]): Promise<MutationResult> {
    return this.mutate(
      `transform:${id}`,
      (s) => {
        const inst = s.scene.instances.find((i) => i.name === id);
        if (inst) inst.affine = [...affine];
      },
      () => this.api.transform(id, affine),
    );
  }

  duplicate(id: string, name?: string): Promise<MutationResult> {
    return this.mutate(
      `duplicate:${id}`,
      (s) => {
        const inst = s.scene.instances.find((i) => i.name === id);
        if (inst) s.scene.instances.push({ ...structuredClone(inst), name: name ?? `${id}-copy` });
      },
      () => this.api.duplicate(id, name),
    );
  }

  setTimeMap(id: string, expr: string): Promise<MutationResult> {
    return this.mutate(
      `timemap:${id}`,
      (s) => {
        const inst = s.scene.instances.find((i) => i.name === id);
        if (inst) inst.timemap = expr;
      },
      () => this.api.setTimeMap(id, expr),
    );
  }

  setClock(clock: { playing?: boolean; frame?: number; speed?: number }): Promise<MutationResult> {
    return this.mutate(
      "clock",
      (s) => {
        if (s.scene.clock) Object.assign(s.scene.clock, clock);
      },
      () => this.api.setClock(clock),
    );
  }

  setVisible(id: string, visible: boolean): Promise<MutationResult> {
    return this.mutate(
      `visible:${id}`,
      (s) => {
        const inst = s.scene.instances.find((i) => i.name === id);
        if (inst) inst.visible = visible;
      },
      () => this.api.setVisible(id, visible),
    );
  }

  addLight(light: Record<string, unknown>): Promise<MutationResult> {
    return this.mutate(
      "light:add",
      () => {},
      () => this.api.addLight(light),
    );
  }
}
