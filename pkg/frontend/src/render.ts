// Canvas painting: integer-factor nearest-neighbor upscale so every frame
// pixel stays crisp for human judgment. Browser-only; kept thin because the
// cockpit logic is tested without a DOM.

import { LatencyHud, SMOOTH_FPS_THRESHOLD } from "./hud.js";
import { Painter } from "./cockpit.js";

export class CanvasPainter implements Painter {
  private canvases: Partial<Record<"sim" | "wm", HTMLCanvasElement>> = {};

  constructor(
    private scale: number,
    private hudEl: HTMLElement,
    private stepEl: HTMLElement,
    private errorEl: HTMLElement,
  ) {}

  attach(mode: "sim" | "wm", canvas: HTMLCanvasElement): void {
    this.canvases[mode] = canvas;
  }

  paint(mode: "sim" | "wm", pngB64: string): void {
    const canvas = this.canvases[mode];
    if (!canvas) return;
    const img = new Image();
    img.onload = () => {
      canvas.width = img.width * this.scale;
      canvas.height = img.height * this.scale;
      const ctx = canvas.getContext("2d")!;
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(img, 0, 0, canvas.width, canvas.height);
    };
    img.src = `data:image/png;base64,${pngB64}`;
  }

  showError(code: string, msg: string): void {
    this.errorEl.textContent = `[${code}] ${msg}`;
    this.errorEl.style.display = "block";
  }

  setStep(step: number): void {
    this.stepEl.textContent = `step ${step}`;
  }

  updateHud(hud: LatencyHud): void {
    if (!hud.hasSamples()) return;
    const s = hud.stats();
    this.hudEl.textContent =
      `p95 ${s.p95LatencyMs.toFixed(1)} ms | ${s.fps.toFixed(1)} fps`;
    this.hudEl.classList.toggle("red", s.red);
    this.hudEl.title = `smooth above ${SMOOTH_FPS_THRESHOLD} fps`;
  }
}
