/** Entry point: connect to the service hosting this page (or ?service=). */

import { ApiClient } from "./api.js";
import { ClientSceneModel } from "./model.js";
import { FrameStream } from "./stream.js";
import { EditorUI } from "./ui.js";

export async function connect(url: string, root: HTMLElement): Promise<EditorUI> {
  const api = new ApiClient(url);
  const model = new ClientSceneModel(api);
  const wsUrl = url.replace(/^http/, "ws") + "/stream";
  const stream = new FrameStream(wsUrl, (u) => new WebSocket(u) as never);
  const ui = new EditorUI(api, model, stream, root);
  ui.mount();
  await model.sync();
  stream.connect();
  return ui;
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  const params = new URLSearchParams(location.search);
  const service = params.get("service") ?? location.origin;
  void connect(service, document.getElementById("app")!);
}
