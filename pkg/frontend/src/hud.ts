// Rolling latency statistics for the heads-up display.

export const SMOOTH_FPS_THRESHOLD = 24;

/** Nearest-rank percentile: sorted[ceil(p/100 * n) - 1]. */
export function percentile(values: number[], p: number): number {
  if (values.length === 0) throw new Error("empty input");
  const sorted = [...values].sort((a, b) => a - b);
  const rank = Math.ceil((p / 100) * sorted.length);
  return sorted[rank - 1];
}

export interface HudStats {
  p95LatencyMs: number;
  fps: number;
  red: boolean;
  samples: number;
}

export class LatencyHud {
  private window: number[] = [];

  constructor(private capacity = 100) {}

  addSample(latencyMs: number): void {
    this.window.push(latencyMs);
    if (this.window.length > this.capacity) this.window.shift();
  }

  stats(): HudStats {
    const p95 = percentile(this.window, 95);
    const fps = 1000 / p95;
    return {
      p95LatencyMs: p95,
      fps,
      red: fps < SMOOTH_FPS_THRESHOLD,
      samples: this.window.length,
    };
  }

  hasSamples(): boolean {
    return this.window.length > 0;
  }
}
