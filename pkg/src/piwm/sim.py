"""Deterministic kinematic multi-lane highway simulator with BEV rasterization.

The world lives on an ego-centric torus: longitudinal positions are meters in
window coordinates (ego pinned at x = frame_w/4 / px_per_m), wrapped modulo
``road_length_m`` so traffic density is conserved and vehicles only enter or
leave through the window edges. All dynamics are pure functions of
(world, action); identical (config, seed, actions) replays bit-identically.

Dynamics are intentionally simple (no real traffic-simulator emulation is
attempted): NPCs keep their lane and regulate speed with a headway rule, the
ego responds to the five discrete actions below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class Action(IntEnum):
    """Discrete ego actions. The encoding is frozen across dataset, model and wire."""

    LANE_LEFT = 0
    IDLE = 1
    LANE_RIGHT = 2
    FASTER = 3
    SLOWER = 4


class PlacementError(Exception):
    """Raised when the requested NPC count cannot be placed without overlap."""


class TerminalStateError(Exception):
    """Raised when stepping a world that has already collided."""


@dataclass(frozen=True)
class ColorScheme:
    ego_rgb: tuple[float, float, float] = (0.15, 0.85, 0.20)
    npc_rgb: tuple[float, float, float] = (0.10, 0.20, 0.85)
    road_rgb: tuple[float, float, float] = (0.35, 0.35, 0.35)
    lane_marking_rgb: tuple[float, float, float] = (0.90, 0.90, 0.90)

    def __post_init__(self):
        r, g, b = self.ego_rgb
        if g - max(r, b) < 0.3:
            raise ValueError("ego color must be green-dominant by >= 0.3")
        r, g, b = self.npc_rgb
        if b - max(r, g) < 0.3:
            raise ValueError("npc color must be blue-dominant by >= 0.3")
        for name, rgb in (("road", self.road_rgb), ("lane_marking", self.lane_marking_rgb)):
            if max(rgb) - min(rgb) > 0.05:
                raise ValueError(f"{name} color must be achromatic (max-min <= 0.05)")


@dataclass(frozen=True)
class SimConfig:
    lane_count: int = 4
    lane_width_px: int = 8
    road_length_m: float = 192.0
    frame_h: int = 32
    frame_w: int = 64
    channels: int = 3
    dt: float = 0.1
    npc_count: int = 12
    speed_min: float = 15.0
    speed_max: float = 30.0
    px_per_m: float = 1.0
    color_scheme: ColorScheme = field(default_factory=ColorScheme)
    # kinematics
    accel: float = 5.0           # ego accel/decel per FASTER/SLOWER, m/s^2
    lat_speed: float = 4.0       # lateral speed during lane change, m/s
    vehicle_len_m: float = 4.0
    vehicle_w_m: float = 2.0
    npc_accel: float = 3.0
    npc_brake: float = 6.0       # must exceed ego accel so chains stay stable
    d_safe: float = 12.0         # bumper gap below which NPCs brake, m
    spawn_spacing_m: float = 12.0
    ego_clear_m: float = 16.0        # same-lane spawn exclusion ahead of ego
    ego_clear_behind_m: float = 32.0  # larger behind: ego may brake hard
    lane_speed_jitter: float = 0.9   # m/s spread around the per-lane cruise band

    def __post_init__(self):
        if self.lane_count < 2:
            raise ValueError("lane_count must be >= 2")
        if self.frame_h < self.lane_count * self.lane_width_px:
            raise ValueError("frame_h must cover lane_count * lane_width_px plus margins")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not self.speed_min < self.speed_max:
            raise ValueError("speed_min must be < speed_max")
        if self.channels != 3:
            raise ValueError("channels is fixed at 3")
        if self.road_length_m < self.frame_w / self.px_per_m:
            raise ValueError("road_length_m must cover at least one window width")

    @property
    def lane_width_m(self) -> float:
        return self.lane_width_px / self.px_per_m

    @property
    def margin_px(self) -> int:
        return (self.frame_h - self.lane_count * self.lane_width_px) // 2

    @property
    def ego_window_x_m(self) -> float:
        return (self.frame_w / 4) / self.px_per_m

    def lane_center_m(self, lane: int) -> float:
        return (self.margin_px + lane * self.lane_width_px + self.lane_width_px / 2) / self.px_per_m

    @property
    def lane_change_steps(self) -> int:
        return math.ceil(self.lane_width_m / (self.lat_speed * self.dt))


@dataclass
class VehicleState:
    id: int
    lane: int
    lat_offset: float   # m, signed offset from lane center; + toward larger rows
    x: float            # m, longitudinal position in the ego-relative window
    speed: float
    target_lane: int
    is_ego: bool
    cruise_speed: float = 0.0  # NPC speed setpoint for the headway controller

    def copy(self) -> "VehicleState":
        return VehicleState(self.id, self.lane, self.lat_offset, self.x,
                            self.speed, self.target_lane, self.is_ego, self.cruise_speed)


@dataclass
class SimWorld:
    config: SimConfig
    ego: VehicleState
    npcs: list[VehicleState]
    rng_state: int           # spawn seed; dynamics after spawn are noise-free
    step_index: int
    collided: bool
    scroll_m: float = 0.0    # accumulated ego travel, anchors scrolling lane dashes

    def vehicles(self) -> list[VehicleState]:
        return [self.ego] + self.npcs


def _wrap(x: float, cfg: SimConfig) -> float:
    """Wrap a window-relative x into the torus interval centered on the ego."""
    lo = cfg.ego_window_x_m - cfg.road_length_m / 2
    return (x - lo) % cfg.road_length_m + lo


def _wrap_dist(dx: float, cfg: SimConfig) -> float:
    """Shortest absolute longitudinal distance on the torus."""
    d = abs(dx) % cfg.road_length_m
    return min(d, cfg.road_length_m - d)


def _forward_gap(dx: float, cfg: SimConfig) -> float:
    """Forward (positive) distance from follower to leader on the torus."""
    return dx % cfg.road_length_m


def lateral_center_m(cfg: SimConfig, v: VehicleState) -> float:
    return cfg.lane_center_m(v.lane) + v.lat_offset


def effective_lane(cfg: SimConfig, v: VehicleState) -> int:
    """Lane rounded to wherever the vehicle body currently mostly sits."""
    if abs(v.lat_offset) <= cfg.lane_width_m / 2:
        return v.lane
    return v.lane + (1 if v.lat_offset > 0 else -1)


def lane_cruise_speed(config: SimConfig, lane: int) -> float:
    """Per-lane cruise band: leftmost lane fastest, rightmost slowest."""
    frac = lane / (config.lane_count - 1)
    return config.speed_max - frac * (config.speed_max - config.speed_min)


def spawn(config: SimConfig, seed: int) -> SimWorld:
    """Place the ego mid-lane and ``npc_count`` NPCs on collision-free slots.

    NPC cruise speeds follow a per-lane band with small jitter; same-lane
    closing speeds stay small, which keeps NPC-only traffic collision-free
    under the headway rule. Raises PlacementError when the road cannot host
    the requested vehicle count.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x51AB])))
    ego_lane = config.lane_count // 2
    # ego starts on its lane's cruise band: IDLE-only runs stay stable for long
    ego = VehicleState(id=0, lane=ego_lane, lat_offset=0.0, x=config.ego_window_x_m,
                       speed=lane_cruise_speed(config, ego_lane),
                       target_lane=ego_lane, is_ego=True)

    lo = config.ego_window_x_m - config.road_length_m / 2
    n_slots = int(config.road_length_m // config.spawn_spacing_m)
    slots = []
    for lane in range(config.lane_count):
        for j in range(n_slots):
            x = lo + j * config.spawn_spacing_m
            if lane == ego_lane:
                ahead = _forward_gap(x - ego.x, config)
                behind = _forward_gap(ego.x - x, config)
                if ahead < config.ego_clear_m or behind < config.ego_clear_behind_m:
                    continue
            slots.append((lane, x))
    if config.npc_count > len(slots):
        raise PlacementError(
            f"cannot place {config.npc_count} NPCs: only {len(slots)} collision-free "
            f"slots on a {config.road_length_m} m road")

    order = rng.permutation(len(slots))
    npcs = []
    for i in range(config.npc_count):
        lane, x = slots[order[i]]
        jitter = float(rng.uniform(-config.lane_speed_jitter, config.lane_speed_jitter))
        speed = float(np.clip(lane_cruise_speed(config, lane) + jitter,
                              config.speed_min, config.speed_max))
        npcs.append(VehicleState(id=i + 1, lane=lane, lat_offset=0.0, x=x, speed=speed,
                                 target_lane=lane, is_ego=False, cruise_speed=speed))
    return SimWorld(config=config, ego=ego, npcs=npcs, rng_state=seed,
                    step_index=0, collided=False)


def check_collision(world: SimWorld) -> bool:
    """True iff any two vehicle rectangles strictly overlap."""
    cfg = world.config
    vs = world.vehicles()
    ys = [lateral_center_m(cfg, v) for v in vs]
    for i in range(len(vs)):
        for j in range(i + 1, len(vs)):
            if abs(ys[i] - ys[j]) < cfg.vehicle_w_m and \
                    _wrap_dist(vs[i].x - vs[j].x, cfg) < cfg.vehicle_len_m:
                return True
    return False


def step(world: SimWorld, action: Action) -> SimWorld:
    """Advance one tick. Pure: the input world is never mutated."""
    if world.collided:
        raise TerminalStateError("cannot step a collided world")
    cfg = world.config
    ego = world.ego.copy()
    npcs = [v.copy() for v in world.npcs]

    # ego longitudinal control
    if action == Action.FASTER:
        ego.speed = min(ego.speed + cfg.accel * cfg.dt, cfg.speed_max)
    elif action == Action.SLOWER:
        ego.speed = max(ego.speed - cfg.accel * cfg.dt, 0.0)

    # ego lateral control; lane commands while mid-change or at the road edge
    # degrade to IDLE laterally
    if ego.target_lane == ego.lane:
        if action == Action.LANE_LEFT and ego.lane > 0:
            ego.target_lane = ego.lane - 1
        elif action == Action.LANE_RIGHT and ego.lane < cfg.lane_count - 1:
            ego.target_lane = ego.lane + 1
    if ego.target_lane != ego.lane:
        direction = 1.0 if ego.target_lane > ego.lane else -1.0
        ego.lat_offset += direction * cfg.lat_speed * cfg.dt
        if abs(ego.lat_offset) >= cfg.lane_width_m - 1e-9:
            ego.lane = ego.target_lane
            ego.lat_offset = 0.0

    # NPC headway control, computed against pre-move positions
    all_prev = [world.ego] + world.npcs
    eff_lanes = [effective_lane(cfg, v) for v in all_prev]
    for k, npc in enumerate(npcs):
        me = world.npcs[k]
        my_lane = effective_lane(cfg, me)
        gap, leader_speed = math.inf, 0.0
        for other, other_lane in zip(all_prev, eff_lanes):
            if other is me or other_lane != my_lane:
                continue
            # bumper gap to the nearest leader; slight overlap counts as gap < 0
            fwd = _forward_gap(other.x - me.x, cfg) - cfg.vehicle_len_m
            if fwd < gap:
                gap, leader_speed = fwd, other.speed
        # brake inside d_safe plus a stopping margin that stays valid even if
        # the leader itself brakes to a stop; else relax toward cruise
        if gap < math.inf:
            margin = max(0.0, me.speed ** 2 - leader_speed ** 2) / (2.0 * cfg.npc_brake)
        else:
            margin = 0.0
        if gap < cfg.d_safe + margin:
            npc.speed = max(npc.speed - cfg.npc_brake * cfg.dt, 0.0)
        else:
            delta = npc.cruise_speed - npc.speed
            npc.speed += max(-cfg.npc_accel * cfg.dt, min(cfg.npc_accel * cfg.dt, delta))

    # positions: window stays centered on the ego
    for npc in npcs:
        npc.x = _wrap(npc.x + (npc.speed - ego.speed) * cfg.dt, cfg)

    out = SimWorld(config=cfg, ego=ego, npcs=npcs, rng_state=world.rng_state,
                   step_index=world.step_index + 1, collided=False,
                   scroll_m=world.scroll_m + ego.speed * cfg.dt)
    out.collided = check_collision(out)
    return out


def _iround(v: float) -> int:
    return math.floor(v + 0.5)


def vehicle_pixel_box(cfg: SimConfig, v: VehicleState) -> tuple[int, int, int, int] | None:
    """Clipped raster footprint (row0, row1, col0, col1), end-exclusive; None if off-window."""
    len_px = _iround(cfg.vehicle_len_m * cfg.px_per_m)
    w_px = _iround(cfg.vehicle_w_m * cfg.px_per_m)
    cx = v.x * cfg.px_per_m
    cy = lateral_center_m(cfg, v) * cfg.px_per_m
    c0 = _iround(cx) - len_px // 2
    r0 = _iround(cy) - w_px // 2
    c1, r1 = c0 + len_px, r0 + w_px
    c0, c1 = max(c0, 0), min(c1, cfg.frame_w)
    r0, r1 = max(r0, 0), min(r1, cfg.frame_h)
    if c0 >= c1 or r0 >= r1:
        return None
    return (r0, r1, c0, c1)


def render_bev(world: SimWorld) -> np.ndarray:
    """Rasterize to an (H, W, 3) float32 frame in [0, 1]."""
    cfg = world.config
    cs = cfg.color_scheme
    frame = np.empty((cfg.frame_h, cfg.frame_w, 3), dtype=np.float32)
    frame[:] = cs.road_rgb

    marking = np.array(cs.lane_marking_rgb, dtype=np.float32)
    top = cfg.margin_px
    bottom = cfg.margin_px + cfg.lane_count * cfg.lane_width_px - 1
    frame[top, :] = marking
    frame[bottom, :] = marking
    # interior boundaries: 2 px dashes / 2 px gaps, anchored to world distance
    # so they scroll with ego motion
    shift = math.floor(world.scroll_m * cfg.px_per_m)
    cols = np.arange(cfg.frame_w)
    dash_on = ((cols + shift) // 2) % 2 == 0
    for b in range(1, cfg.lane_count):
        frame[top + b * cfg.lane_width_px, dash_on] = marking

    npc = np.array(cs.npc_rgb, dtype=np.float32)
    ego = np.array(cs.ego_rgb, dtype=np.float32)
    for v in world.npcs:
        box = vehicle_pixel_box(cfg, v)
        if box is not None:
            r0, r1, c0, c1 = box
            frame[r0:r1, c0:c1] = npc
    box = vehicle_pixel_box(cfg, world.ego)
    if box is not None:
        r0, r1, c0, c1 = box
        frame[r0:r1, c0:c1] = ego
    return frame


def frame_to_u8(frame: np.ndarray) -> np.ndarray:
    """Quantize [0,1] floats to u8, rounding half up (the dataset storage format)."""
    return np.clip(np.floor(frame * 255.0 + 0.5), 0, 255).astype(np.uint8)


def u8_to_frame(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float32)) / 255.0


def serialize_world(world: SimWorld) -> dict:
    """JSON-friendly snapshot, used for determinism checks and session debugging."""

    def vehicle(v: VehicleState) -> dict:
        return {"id": v.id, "lane": v.lane, "lat_offset": v.lat_offset, "x": v.x,
                "speed": v.speed, "target_lane": v.target_lane, "is_ego": v.is_ego,
                "cruise_speed": v.cruise_speed}

    return {"step": world.step_index, "collided": world.collided,
            "scroll_m": world.scroll_m,
            "vehicles": [vehicle(v) for v in world.vehicles()]}
