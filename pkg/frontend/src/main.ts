// Browser bootstrap: create a session, open the stream, wire the keyboard.

import { Cockpit } from "./cockpit.js";
import { Mode, SessionConfig } from "./protocol.js";
import { CanvasPainter } from "./render.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function start(): Promise<void> {
  const params = new URLSearchParams(location.search);
  const mode = (params.get("mode") ?? "sim") as Mode;
  const config: SessionConfig = {
    mode,
    seed: Number(params.get("seed") ?? 0),
    mask_mode: (params.get("mask") ?? "soft") as SessionConfig["mask_mode"],
    warm_start: params.get("warm_start") === "1",
  };

  const painter = new CanvasPainter(
    8, el("hud"), el("step"), el("error"));
  const simCanvas = el<HTMLCanvasElement>("canvas-sim");
  const wmCanvas = el<HTMLCanvasElement>("canvas-wm");
  simCanvas.parentElement!.style.display =
    mode === "wm" ? "none" : "inline-block";
  wmCanvas.parentElement!.style.display =
    mode === "sim" ? "none" : "inline-block";
  painter.attach("sim", simCanvas);
  painter.attach("wm", wmCanvas);

  const resp = await fetch("/session", {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(config),
  });
  if (!resp.ok) {
    const detail = await resp.json().catch(() => ({}));
    painter.showError("session", JSON.stringify(detail));
    return;
  }
  const { id } = await resp.json();
  const proto = location.protocol === "https:" ? "wss" : "ws";
  const ws = new WebSocket(`${proto}://${location.host}/session/${id}/stream`);
  const cockpit = new Cockpit(mode, ws, painter);
  ws.onmessage = (ev) => cockpit.onServerMessage(JSON.parse(ev.data));
  ws.onclose = () => painter.showError("closed", "stream closed");
  window.addEventListener("keydown", (ev) => {
    if (cockpit.handleKey(ev.key)) ev.preventDefault();
  });
}

start().catch((err) => {
  const banner = document.getElementById("error");
  if (banner) {
    banner.textContent = String(err);
    banner.style.display = "block";
  }
});
