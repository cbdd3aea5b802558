"""Interactive session server: lock-step human steering of the simulator and
the learned world model over HTTP + WebSocket.

One action message produces exactly one frame per stream (two messages per
action in side_by_side mode); no frame is ever generated without an action.
Sessions are isolated; the model is shared read-only across sessions.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from pydantic import BaseModel

from . import mask as M
from . import sim as S
from .imgio import frame_to_png_b64
from .nn.denoiser import Denoiser
from .nn.weights import WeightsFormatError, load_weights
from .sample import RolloutState, SamplerConfig, step_rollout


class SessionConfig(BaseModel):
    mode: Literal["sim", "wm", "side_by_side"] = "sim"
    model_path: Optional[str] = None
    mask_mode: Literal["soft", "hard", "none"] = "soft"
    warm_start: bool = False
    seed: int = 0
    n_steps: Optional[int] = None
    sigma_off: Optional[float] = None
    sigma_ew: Optional[float] = None


class SessionError(Exception):
    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code
        self.msg = msg


@dataclass
class Session:
    id: str
    config: SessionConfig
    world: S.SimWorld | None
    rollout: RolloutState | None
    model: Denoiser | None
    mask_params: M.MaskParams | None
    sampler: SamplerConfig
    step_count: int = 0
    sim_terminal: bool = False
    last_sim_frame: np.ndarray | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)
    latency_window: list[float] = field(default_factory=list)


class SessionManager:
    """All protocol semantics live here so they are testable without a server."""

    def __init__(self, default_model_path: str | None = None,
                 sim_cfg: S.SimConfig | None = None):
        self.default_model_path = default_model_path
        self.sim_cfg = sim_cfg or S.SimConfig()
        self.sessions: dict[str, Session] = {}
        self._models: dict[str, Denoiser] = {}
        self._registry_lock = threading.Lock()

    def _load_model(self, path: str) -> Denoiser:
        with self._registry_lock:
            if path not in self._models:
                try:
                    self._models[path] = load_weights(path)
                except (OSError, WeightsFormatError) as exc:
                    raise SessionError("model_load", f"cannot load weights: {exc}")
            return self._models[path]

    def create_session(self, config: SessionConfig) -> str:
        needs_model = config.mode in ("wm", "side_by_side")
        model = None
        if needs_model:
            path = config.model_path or self.default_model_path
            if not path:
                raise SessionError("validation",
                                   f"mode {config.mode!r} requires a model path")
            model = self._load_model(path)
            if model.config.mask_channels and config.mask_mode == "none":
                raise SessionError("validation",
                                   "model expects a mask channel; pick soft or hard")
            if not model.config.mask_channels and config.mask_mode != "none":
                raise SessionError("validation",
                                   "model has no mask channel; use mask_mode none")

        world = S.spawn(self.sim_cfg, config.seed)
        rollout = None
        mask_params = None
        sampler = SamplerConfig(
            warm_start=config.warm_start,
            **{k: v for k, v in (("n_steps", config.n_steps),
                                 ("sigma_off", config.sigma_off),
                                 ("sigma_ew", config.sigma_ew)) if v is not None})
        if needs_model:
            hist = model.config.history_len
            frames = [S.render_bev(world)]
            warm_world = world
            for _ in range(hist - 1):
                warm_world = S.step(warm_world, S.Action.IDLE)
                frames.append(S.render_bev(warm_world))
            rollout = RolloutState(context=frames,
                                   past_actions=[int(S.Action.IDLE)] * (hist - 1),
                                   seed=config.seed)
            if config.mode == "side_by_side":
                world = warm_world   # sim stream continues from the teacher frames
            if config.mask_mode != "none":
                mask_params = M.MaskParams(mode=config.mask_mode)

        sid = uuid.uuid4().hex
        self.sessions[sid] = Session(
            id=sid, config=config, world=world if config.mode != "wm" else None,
            rollout=rollout, model=model, mask_params=mask_params, sampler=sampler)
        return sid

    def first_frames(self, sid: str) -> list[tuple[str, np.ndarray]]:
        s = self._get(sid)
        out = []
        if s.config.mode in ("sim", "side_by_side"):
            out.append(("sim", S.render_bev(s.world)))
        if s.config.mode in ("wm", "side_by_side"):
            out.append(("wm", s.rollout.context[-1]))
        return out

    def _get(self, sid: str) -> Session:
        if sid not in self.sessions:
            raise SessionError("not_found", f"unknown session {sid!r}")
        return self.sessions[sid]

    def step_session(self, sid: str, action: int) -> dict:
        """Advance exactly one frame per stream; measures generation time only."""
        s = self._get(sid)
        if not isinstance(action, int) or not 0 <= action < len(S.Action):
            raise SessionError("bad_action", f"invalid action code {action!r}")
        if not s.lock.acquire(blocking=False):
            raise SessionError("busy", "previous action still in flight")
        try:
            frames: list[tuple[str, np.ndarray]] = []
            t0 = time.perf_counter()
            if s.config.mode in ("sim", "side_by_side"):
                if s.world.collided:
                    if s.config.mode == "sim":
                        raise SessionError("terminal", "sim session collided")
                    frames.append(("sim", s.last_sim_frame))
                else:
                    s.world = S.step(s.world, S.Action(action))
                    s.last_sim_frame = S.render_bev(s.world)
                    frames.append(("sim", s.last_sim_frame))
            if s.config.mode in ("wm", "side_by_side"):
                frame = step_rollout(s.rollout, action, s.model, s.mask_params,
                                     s.sampler)
                frames.append(("wm", frame))
            latency_ms = (time.perf_counter() - t0) * 1e3
            s.step_count += 1
            s.latency_window = (s.latency_window + [latency_ms])[-100:]
            return {"frames": frames, "step": s.step_count,
                    "latency_ms": latency_ms,
                    "metrics": {"rolling_mean_latency_ms":
                                float(np.mean(s.latency_window))}}
        finally:
            s.lock.release()

    def delete_session(self, sid: str) -> None:
        self._get(sid)
        del self.sessions[sid]


def create_app(default_model_path: str | None = None,
               static_dir: str | Path | None = None,
               sim_cfg: S.SimConfig | None = None) -> FastAPI:
    manager = SessionManager(default_model_path, sim_cfg)
    app = FastAPI(title="bev world model session server")
    app.state.manager = manager

    @app.get("/health")
    def health():
        return {"status": "ok", "sessions": len(manager.sessions)}

    @app.post("/session")
    def create_session(config: SessionConfig):
        try:
            sid = manager.create_session(config)
        except SessionError as exc:
            raise HTTPException(status_code=400,
                                detail={"code": exc.code, "msg": exc.msg})
        return {"id": sid}

    @app.delete("/session/{sid}")
    def delete_session(sid: str):
        try:
            manager.delete_session(sid)
        except SessionError as exc:
            raise HTTPException(status_code=404,
                                detail={"code": exc.code, "msg": exc.msg})
        return {"deleted": sid}

    @app.websocket("/session/{sid}/stream")
    async def stream(ws: WebSocket, sid: str):
        await ws.accept()
        try:
            manager._get(sid)
        except SessionError as exc:
            await ws.send_json({"type": "error", "code": exc.code, "msg": exc.msg})
            await ws.close()
            return
        # initial frames so the cockpit can paint before the first action
        for mode, frame in manager.first_frames(sid):
            await ws.send_json({"type": "frame", "step": 0, "mode": mode,
                                "png_b64": frame_to_png_b64(frame),
                                "latency_ms": 0.0})
        try:
            while True:
                msg = await ws.receive_json()
                if msg.get("type") != "action":
                    await ws.send_json({"type": "error", "code": "bad_message",
                                        "msg": "expected an action message"})
                    continue
                try:
                    result = manager.step_session(sid, msg.get("action"))
                except SessionError as exc:
                    await ws.send_json({"type": "error", "code": exc.code,
                                        "msg": exc.msg})
                    continue
                for mode, frame in result["frames"]:
                    await ws.send_json({
                        "type": "frame", "step": result["step"], "mode": mode,
                        "png_b64": frame_to_png_b64(frame),
                        "latency_ms": result["latency_ms"]})
        except WebSocketDisconnect:
            return

    if static_dir and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="cockpit")
    return app
