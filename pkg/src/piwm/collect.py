"""MCTS ego agent and dataset writer producing aligned (frame, action, state) episodes.

Episodes are stored in a little-endian binary container (magic ``PIWM``) with a
JSON manifest written last as the atomic completion marker. ``actions[t]`` is
the action taken at ``frames[t]`` and caused ``frames[t+1]``; the terminal
frame's action slot is padded with IDLE.
"""

from __future__ import annotations

import json
import math
import os
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .sim import Action, SimConfig, SimWorld, frame_to_u8, render_bev, spawn, step

EPISODE_MAGIC = b"PIWM"
EPISODE_VERSION = 1


class CollectError(Exception):
    """Raised on partial dataset output; names the last complete episode."""

    def __init__(self, msg: str, last_complete: int):
        super().__init__(msg)
        self.last_complete = last_complete


@dataclass(frozen=True)
class MctsConfig:
    simulations_per_move: int = 64
    ucb_c: float = 1.4
    max_depth: int = 12
    discount: float = 0.95
    w_speed: float = 1.0
    w_collision: float = 500.0
    w_lane_coverage: float = 0.3
    rollout_policy: str = "random"   # random | idle
    epsilon_explore: float = 0.0     # chance per move of a uniform random action

    def __post_init__(self):
        if self.simulations_per_move < 1:
            raise ValueError("simulations_per_move must be >= 1")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must be in (0, 1]")
        if self.rollout_policy not in ("random", "idle"):
            raise ValueError("rollout_policy must be 'random' or 'idle'")
        if not 0.0 <= self.epsilon_explore < 1.0:
            raise ValueError("epsilon_explore must be in [0, 1)")

    def validate_dominance(self, sim_cfg: SimConfig) -> None:
        """Collision penalty must strictly dominate any speed gain in a rollout."""
        bound = self.w_speed * sim_cfg.speed_max * self.max_depth
        if not self.w_collision > bound:
            raise ValueError(
                f"w_collision={self.w_collision} must exceed "
                f"w_speed*speed_max*max_depth={bound}")


class VehicleRecord(NamedTuple):
    """Per-frame ground-truth vehicle state as stored on disk."""

    id: int
    is_ego: bool
    lane: int
    x_m: float
    lat_offset_m: float
    speed: float


@dataclass
class Episode:
    frames: np.ndarray                      # (T, H, W, C) uint8
    actions: np.ndarray                     # (T,) uint8
    states: list[list[VehicleRecord]]       # length T
    seed: int = -1
    collided_at: int | None = None

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class DatasetManifest:
    version: int
    frame_h: int
    frame_w: int
    channels: int
    episodes: list[dict]
    color_scheme: dict
    action_encoding: dict = field(default_factory=lambda: {a.name: int(a) for a in Action})


def lane_novelty(lane: int, lane_visits, lane_count: int) -> float:
    """Inverse-frequency bonus, Laplace-smoothed so uniform coverage gives
    exactly 1/lane_count; capped at 1 for never-visited lanes."""
    total = sum(lane_visits)
    freq = (lane_visits[lane] + 1) / (total + lane_count)
    return min(1.0, 1.0 / (lane_count * freq) / lane_count)


def reward(world_before: SimWorld, action: Action, world_after: SimWorld,
           lane_visits=None, cfg: MctsConfig | None = None) -> float:
    """Speed bonus, dominant collision penalty, and a lane-coverage bonus."""
    cfg = cfg or MctsConfig()
    sim_cfg = world_after.config
    if lane_visits is None:
        lane_visits = [0] * sim_cfg.lane_count
    r = cfg.w_speed * world_after.ego.speed / sim_cfg.speed_max
    if world_after.collided:
        r -= cfg.w_collision
    r += cfg.w_lane_coverage * lane_novelty(world_after.ego.lane, lane_visits,
                                            sim_cfg.lane_count)
    return r


class _Node:
    __slots__ = ("world", "terminal", "untried", "children", "edge_n", "edge_w")

    def __init__(self, world: SimWorld):
        self.world = world
        self.terminal = world.collided
        self.untried = [] if self.terminal else [int(a) for a in Action]
        self.children: dict[int, _Node] = {}
        self.edge_n: dict[int, int] = {}
        self.edge_w: dict[int, float] = {}


def mcts_select_action(world: SimWorld, cfg: MctsConfig, rng: random.Random,
                       lane_visits=None) -> Action:
    """UCT search; returns the most-visited root action (ties: lowest index).

    Lane-visit counts from the episode so far feed the coverage bonus and are
    held fixed during the search.
    """
    if world.collided:
        raise ValueError("cannot plan from a collided world")
    root = _Node(world)
    for _ in range(cfg.simulations_per_move):
        node = root
        depth = 0
        path: list[tuple[_Node, int]] = []

        # selection: descend fully-expanded nodes by UCB
        while not node.terminal and not node.untried and node.children \
                and depth < cfg.max_depth:
            n_parent = sum(node.edge_n.values())
            log_n = math.log(n_parent)
            best_a, best_score = -1, -math.inf
            for a in sorted(node.children):
                score = node.edge_w[a] / node.edge_n[a] \
                    + cfg.ucb_c * math.sqrt(log_n / node.edge_n[a])
                if score > best_score:
                    best_a, best_score = a, score
            path.append((node, best_a))
            node = node.children[best_a]
            depth += 1

        # expansion
        if not node.terminal and node.untried and depth < cfg.max_depth:
            a = node.untried.pop(0)
            child = _Node(step(node.world, Action(a)))
            node.children[a] = child
            node.edge_n[a] = 0
            node.edge_w[a] = 0.0
            path.append((node, a))
            node = child
            depth += 1

        # rollout
        returns: list[float] = []
        sim_world = node.world
        while depth < cfg.max_depth and not sim_world.collided:
            a = rng.randrange(len(Action)) if cfg.rollout_policy == "random" \
                else int(Action.IDLE)
            nxt = step(sim_world, Action(a))
            returns.append(reward(sim_world, Action(a), nxt, lane_visits, cfg))
            sim_world = nxt
            depth += 1
        g = 0.0
        for r in reversed(returns):
            g = r + cfg.discount * g

        # backup along the tree path
        for parent, a in reversed(path):
            child = parent.children[a]
            r = reward(parent.world, Action(a), child.world, lane_visits, cfg)
            g = r + cfg.discount * g
            parent.edge_n[a] += 1
            parent.edge_w[a] += g

    best_a, best_n = 0, -1
    for a in sorted(root.edge_n):
        if root.edge_n[a] > best_n:
            best_a, best_n = a, root.edge_n[a]
    return Action(best_a)


def world_records(world: SimWorld) -> list[VehicleRecord]:
    return [VehicleRecord(v.id, v.is_ego, v.lane, v.x, v.lat_offset, v.speed)
            for v in world.vehicles()]


def canonical_action(world: SimWorld, action: Action) -> Action:
    """Relabel boundary no-ops as IDLE so stored actions carry honest
    semantics (a clamped lane command transitions identically to IDLE)."""
    ego = world.ego
    cfg = world.config
    mid_change = ego.target_lane != ego.lane
    if action == Action.LANE_LEFT and (mid_change or ego.lane == 0):
        return Action.IDLE
    if action == Action.LANE_RIGHT and (mid_change or ego.lane == cfg.lane_count - 1):
        return Action.IDLE
    if action == Action.FASTER and ego.speed >= cfg.speed_max:
        return Action.IDLE
    if action == Action.SLOWER and ego.speed <= 0.0:
        return Action.IDLE
    return action


def run_episode(sim_cfg: SimConfig, mcts_cfg: MctsConfig, seed: int, ep_index: int,
                steps: int, policy: str = "mcts") -> Episode:
    """Roll one episode of up to ``steps`` frames; truncates at collision."""
    if steps < 1:
        raise ValueError("empty episode rejected: steps must be >= 1")
    world = spawn(sim_cfg, _episode_seed(seed, ep_index))
    frames = [frame_to_u8(render_bev(world))]
    states = [world_records(world)]
    actions: list[int] = []
    visits = [0] * sim_cfg.lane_count
    visits[world.ego.lane] += 1
    collided_at = None
    rng_rand = random.Random(f"rand:{seed}:{ep_index}")
    for t in range(steps - 1):
        if policy == "mcts":
            # occasional uniform exploration keeps every action represented in
            # the data, including braking the planner would otherwise avoid
            if mcts_cfg.epsilon_explore > 0.0 \
                    and rng_rand.random() < mcts_cfg.epsilon_explore:
                a = Action(rng_rand.randrange(len(Action)))
            else:
                rng = random.Random(f"mcts:{seed}:{ep_index}:{t}")
                a = mcts_select_action(world, mcts_cfg, rng, visits)
        else:
            a = Action(rng_rand.randrange(len(Action)))
        a = canonical_action(world, a)
        world = step(world, a)
        actions.append(int(a))
        frames.append(frame_to_u8(render_bev(world)))
        states.append(world_records(world))
        visits[world.ego.lane] += 1
        if world.collided:
            collided_at = len(frames) - 1
            break
    actions.append(int(Action.IDLE))  # terminal frame's slot is never consumed
    return Episode(frames=np.stack(frames), actions=np.array(actions, dtype=np.uint8),
                   states=states, seed=_episode_seed(seed, ep_index),
                   collided_at=collided_at)


def _episode_seed(seed: int, ep_index: int) -> int:
    return seed * 1_000_003 + ep_index


def write_episode(path: Path, ep: Episode) -> None:
    t, h, w, c = ep.frames.shape
    parts = [EPISODE_MAGIC, struct.pack("<IIHHH", EPISODE_VERSION, t, h, w, c),
             ep.frames.tobytes(), ep.actions.tobytes()]
    for frame_states in ep.states:
        parts.append(struct.pack("<B", len(frame_states)))
        for v in frame_states:
            parts.append(struct.pack("<BBBfff", v.id, 1 if v.is_ego else 0,
                                     v.lane, v.x_m, v.lat_offset_m, v.speed))
    path.write_bytes(b"".join(parts))


def read_episode(path: Path) -> Episode:
    raw = path.read_bytes()
    if raw[:4] != EPISODE_MAGIC:
        raise ValueError(f"{path}: bad episode magic")
    version, t, h, w, c = struct.unpack_from("<IIHHH", raw, 4)
    if version != EPISODE_VERSION:
        raise ValueError(f"{path}: unsupported episode version {version}")
    off = 4 + struct.calcsize("<IIHHH")
    n = t * h * w * c
    frames = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).reshape(t, h, w, c)
    off += n
    actions = np.frombuffer(raw, dtype=np.uint8, count=t, offset=off)
    off += t
    states = []
    for _ in range(t):
        (count,) = struct.unpack_from("<B", raw, off)
        off += 1
        frame_states = []
        for _ in range(count):
            vid, flags, lane, x, lat, speed = struct.unpack_from("<BBBfff", raw, off)
            off += struct.calcsize("<BBBfff")
            frame_states.append(VehicleRecord(vid, bool(flags & 1), lane, x, lat, speed))
        states.append(frame_states)
    return Episode(frames=frames.copy(), actions=actions.copy(), states=states)


def collect_episodes(n: int, steps: int, sim_cfg: SimConfig, mcts_cfg: MctsConfig,
                     seed: int, out_dir: str | Path, policy: str = "mcts"
                     ) -> DatasetManifest:
    """Write ``n`` episodes plus a manifest (written last, as completion marker)."""
    if steps < 1:
        raise ValueError("empty episode rejected: steps must be >= 1")
    if sim_cfg.npc_count > 254:
        raise ValueError("npc_count must fit the u8 id field (<= 254)")
    mcts_cfg.validate_dominance(sim_cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        try:
            ep = run_episode(sim_cfg, mcts_cfg, seed, i, steps, policy)
            fname = f"episode_{i:05d}.piwm"
            write_episode(out / fname, ep)
        except OSError as exc:
            raise CollectError(
                f"I/O failure writing episode {i}; last complete episode is "
                f"{i - 1}", last_complete=i - 1) from exc
        entries.append({"id": i, "length": len(ep), "file": fname,
                        "seed": ep.seed, "collided_at": ep.collided_at})
    manifest = DatasetManifest(
        version=EPISODE_VERSION, frame_h=sim_cfg.frame_h, frame_w=sim_cfg.frame_w,
        channels=sim_cfg.channels, episodes=entries,
        color_scheme={"ego_rgb": list(sim_cfg.color_scheme.ego_rgb),
                      "npc_rgb": list(sim_cfg.color_scheme.npc_rgb),
                      "road_rgb": list(sim_cfg.color_scheme.road_rgb),
                      "lane_marking_rgb": list(sim_cfg.color_scheme.lane_marking_rgb)})
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest.__dict__, indent=2))
    os.replace(tmp, out / "manifest.json")
    return manifest


@dataclass
class Dataset:
    """All episodes of a collected dataset held in memory (uint8 frames)."""

    manifest: DatasetManifest
    episodes: list[Episode]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.manifest.frame_h, self.manifest.frame_w, self.manifest.channels)


def load_dataset(data_dir: str | Path) -> Dataset:
    data_dir = Path(data_dir)
    raw = json.loads((data_dir / "manifest.json").read_text())
    manifest = DatasetManifest(
        version=raw["version"], frame_h=raw["frame_h"], frame_w=raw["frame_w"],
        channels=raw["channels"], episodes=raw["episodes"],
        color_scheme=raw["color_scheme"], action_encoding=raw["action_encoding"])
    episodes = []
    for entry in manifest.episodes:
        ep = read_episode(data_dir / entry["file"])
        if len(ep) != entry["length"]:
            raise ValueError(f"{entry['file']}: manifest length {entry['length']} "
                             f"!= stored {len(ep)}")
        ep.seed = entry["seed"]
        ep.collided_at = entry["collided_at"]
        episodes.append(ep)
    return Dataset(manifest=manifest, episodes=episodes)
