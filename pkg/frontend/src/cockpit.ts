// Lock-step cockpit state machine, kept free of DOM and socket types so the
// whole protocol behavior is testable against a stub server.
//
// One keypress sends at most one action message; further input is ignored
// until every stream of the session has delivered its frame for that step.
// The cockpit never invents frames: painting happens only on server messages.

import { framesPerAction, keyToAction, Mode, ServerMsg } from "./protocol.js";
import { LatencyHud } from "./hud.js";

export interface Transport {
  send(data: string): void;
}

export interface Painter {
  /** Paint a server-delivered PNG onto the canvas for the given stream. */
  paint(mode: "sim" | "wm", pngB64: string): void;
  showError(code: string, msg: string): void;
  updateHud(hud: LatencyHud): void;
  setStep(step: number): void;
}

export class Cockpit {
  readonly hud = new LatencyHud();
  private inFlight = 0;
  private sent = 0;
  private received = 0;
  step = 0;
  terminated = false;

  constructor(
    private mode: Mode,
    private transport: Transport,
    private painter: Painter,
  ) {}

  get busy(): boolean {
    return this.inFlight > 0;
  }

  get actionsSent(): number {
    return this.sent;
  }

  /** Key handler: returns true when an action message was sent. */
  handleKey(key: string): boolean {
    if (this.terminated || this.busy) return false;
    const action = keyToAction(key);
    if (action === null) return false;
    this.transport.send(JSON.stringify({ type: "action", action }));
    this.sent += 1;
    this.inFlight = framesPerAction(this.mode);
    return true;
  }

  /** Feed one parsed server message into the state machine. */
  onServerMessage(msg: ServerMsg): void {
    if (msg.type === "error") {
      // a busy rejection re-arms input; terminal/fatal errors latch
      if (msg.code === "busy") {
        this.inFlight = 0;
      } else if (msg.code === "terminal" || msg.code === "not_found") {
        this.terminated = true;
        this.inFlight = 0;
      } else {
        this.inFlight = 0;
      }
      this.painter.showError(msg.code, msg.msg);
      return;
    }
    this.received += 1;
    this.step = msg.step;
    this.painter.setStep(msg.step);
    this.painter.paint(msg.mode, msg.png_b64);
    if (msg.step > 0 && this.inFlight > 0) {
      this.inFlight -= 1;
      if (this.inFlight === 0) {
        // one HUD sample per completed step (side_by_side repeats the value)
        this.hud.addSample(msg.latency_ms);
        this.painter.updateHud(this.hud);
      }
    }
  }

  get framesReceived(): number {
    return this.received;
  }
}
