// Wire protocol of the session server, plus the cockpit keymap.

export type Mode = "sim" | "wm" | "side_by_side";

export interface SessionConfig {
  mode: Mode;
  model_path?: string;
  mask_mode?: "soft" | "hard" | "none";
  warm_start?: boolean;
  seed?: number;
}

export type ClientMsg = { type: "action"; action: number };

export type ServerMsg =
  | { type: "frame"; step: number; mode: "sim" | "wm"; png_b64: string; latency_ms: number }
  | { type: "error"; code: string; msg: string };

// Action codes are frozen across dataset, model and wire.
export const ACTIONS = {
  LANE_LEFT: 0,
  IDLE: 1,
  LANE_RIGHT: 2,
  FASTER: 3,
  SLOWER: 4,
} as const;

const KEYMAP: Record<string, number> = {
  ArrowUp: ACTIONS.FASTER,
  ArrowDown: ACTIONS.SLOWER,
  ArrowLeft: ACTIONS.LANE_LEFT,
  ArrowRight: ACTIONS.LANE_RIGHT,
  " ": ACTIONS.IDLE,
  Space: ACTIONS.IDLE,
};

/** Map a keyboard key to an action code; null for keys outside the map. */
export function keyToAction(key: string): number | null {
  return key in KEYMAP ? KEYMAP[key] : null;
}

/** Streams expected per action for a session mode (lock-step accounting). */
export function framesPerAction(mode: Mode): number {
  return mode === "side_by_side" ? 2 : 1;
}
