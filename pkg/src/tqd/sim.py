"""Synthetic BEV multi-object world.

Objects move with near-constant velocity inside a square arena, are born at
the arena edge (Poisson) and die geometrically.  Each frame renders a set of
noisy observation boxes (missed detections plus uniform clutter) that the
tracker consumes in place of camera features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BevBox
from .rng import substream

EVAL_SCENE_OFFSET = 1_000_000
OBS_DIM = 8  # x, y, z, w, l, h, sin(yaw), cos(yaw)


@dataclass(frozen=True)
class ScenarioConfig:
    arena: float = 50.0
    n_objects_init: int = 8
    birth_rate: float = 0.16
    death_prob: float = 0.02
    dt: float = 0.5
    n_frames: int = 40
    accel_noise: float = 0.5
    obs_pos_noise: float = 0.3
    miss_prob: float = 0.1
    clutter_rate: float = 2.0
    max_speed: float = 8.0

    def __post_init__(self) -> None:
        for name in ("birth_rate", "death_prob", "accel_noise", "obs_pos_noise", "miss_prob",
                     "clutter_rate", "max_speed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.dt <= 0 or self.arena <= 0:
            raise ValueError("dt and arena must be positive")
        if self.n_frames < 1 or self.n_objects_init < 0:
            raise ValueError("n_frames >= 1 and n_objects_init >= 0 required")
        if self.death_prob > 1 or self.miss_prob > 1:
            raise ValueError("probabilities must not exceed 1")


@dataclass
class Scene:
    frames: list[list[BevBox]]
    dt: float = 0.5

    def __len__(self) -> int:
        return len(self.frames)

    def instance_ids(self) -> set[int]:
        return {b.instance_id for f in self.frames for b in f}


@dataclass
class ObservationFrame:
    raw: np.ndarray
    source_ids: list[int | None] = field(default_factory=list)

    def __len__(self) -> int:
        return self.raw.shape[0]


@dataclass
class SceneData:
    scene: Scene
    observations: list[ObservationFrame]


def _random_size(rng: np.random.Generator) -> tuple[float, float, float]:
    return (rng.uniform(1.6, 2.4), rng.uniform(3.6, 5.0), rng.uniform(1.4, 2.0))


class _Obj:
    __slots__ = ("iid", "pos", "vel", "size", "yaw")

    def __init__(self, iid, pos, vel, size, yaw):
        self.iid, self.pos, self.vel, self.size, self.yaw = iid, pos, vel, size, yaw

    def box(self) -> BevBox:
        z = self.size[2] / 2
        return BevBox((self.pos[0], self.pos[1], z), self.size, self.yaw, tuple(self.vel), self.iid)


def _heading(vel: np.ndarray, fallback: float) -> float:
    return math.atan2(vel[1], vel[0]) if np.hypot(*vel) > 1e-9 else fallback


def _spawn_interior(iid: int, cfg: ScenarioConfig, rng: np.random.Generator) -> _Obj:
    pos = rng.uniform(-0.9 * cfg.arena, 0.9 * cfg.arena, size=2)
    heading = rng.uniform(-math.pi, math.pi)
    speed = rng.uniform(0.0, cfg.max_speed)
    vel = speed * np.array([math.cos(heading), math.sin(heading)])
    return _Obj(iid, pos, vel, _random_size(rng), heading)


def _spawn_edge(iid: int, cfg: ScenarioConfig, rng: np.random.Generator) -> _Obj:
    side = int(rng.integers(4))
    along = rng.uniform(-cfg.arena, cfg.arena)
    edge = 0.98 * cfg.arena
    pos, inward = {
        0: (np.array([-edge, along]), 0.0),
        1: (np.array([edge, along]), math.pi),
        2: (np.array([along, -edge]), math.pi / 2),
        3: (np.array([along, edge]), -math.pi / 2),
    }[side]
    heading = inward + rng.uniform(-math.pi / 4, math.pi / 4)
    speed = rng.uniform(0.2 * cfg.max_speed, cfg.max_speed)
    vel = speed * np.array([math.cos(heading), math.sin(heading)])
    return _Obj(iid, pos, vel, _random_size(rng), heading)


def _reflect(obj: _Obj, arena: float) -> None:
    for k in range(2):
        if obj.pos[k] > arena:
            obj.pos[k] = 2 * arena - obj.pos[k]
            obj.vel[k] = -obj.vel[k]
        elif obj.pos[k] < -arena:
            obj.pos[k] = -2 * arena - obj.pos[k]
            obj.vel[k] = -obj.vel[k]
    obj.pos = np.clip(obj.pos, -arena, arena)


def generate_scene(cfg: ScenarioConfig, rng: np.random.Generator) -> Scene:
    """Ground-truth trajectories with persistent, never-reused instance ids."""
    next_id = 0
    objs: list[_Obj] = []
    for _ in range(cfg.n_objects_init):
        objs.append(_spawn_interior(next_id, cfg, rng))
        next_id += 1
    frames = [[o.box() for o in objs]]
    for _ in range(1, cfg.n_frames):
        alive = []
        for o in objs:
            if rng.random() < cfg.death_prob:
                continue
            if cfg.accel_noise > 0:
                o.vel = o.vel + rng.normal(0.0, cfg.accel_noise * cfg.dt, size=2)
            o.pos = o.pos + o.vel * cfg.dt
            _reflect(o, cfg.arena)
            o.yaw = _heading(o.vel, o.yaw)
            alive.append(o)
        for _ in range(int(rng.poisson(cfg.birth_rate))):
            alive.append(_spawn_edge(next_id, cfg, rng))
            next_id += 1
        objs = alive
        frames.append([o.box() for o in objs])
    return Scene(frames, cfg.dt)


def _raw_vector(center, size, yaw) -> list[float]:
    return [center[0], center[1], center[2], size[0], size[1], size[2], math.sin(yaw), math.cos(yaw)]


def render_observations(frame: list[BevBox], cfg: ScenarioConfig, rng: np.random.Generator) -> ObservationFrame:
    """Noisy observation boxes for one frame: surviving detections, then clutter."""
    rows, ids = [], []
    for b in frame:
        if rng.random() < cfg.miss_prob:
            continue
        noise = rng.normal(0.0, cfg.obs_pos_noise, size=3) if cfg.obs_pos_noise > 0 else np.zeros(3)
        rows.append(_raw_vector(np.asarray(b.center) + noise, b.size, b.yaw))
        ids.append(b.instance_id)
    for _ in range(int(rng.poisson(cfg.clutter_rate)) if cfg.clutter_rate > 0 else 0):
        size = _random_size(rng)
        xy = rng.uniform(-cfg.arena, cfg.arena, size=2)
        rows.append(_raw_vector((xy[0], xy[1], size[2] / 2), size, rng.uniform(-math.pi, math.pi)))
        ids.append(None)
    raw = np.array(rows, dtype=np.float64).reshape(-1, OBS_DIM)
    return ObservationFrame(raw, ids)


def scene_seed(split: str, index: int, eval_seed: int = 0) -> int:
    """Scene numbering keeps train and eval disjoint: eval starts at 10**6·(1+seed)."""
    if split == "train":
        return index
    if split == "eval":
        return EVAL_SCENE_OFFSET * (1 + eval_seed) + index
    raise ValueError(f"unknown split {split!r}")


def make_scene_data(cfg: ScenarioConfig, data_seed: int, number: int) -> SceneData:
    scene = generate_scene(cfg, substream(data_seed, "scene", number))
    obs_rng = substream(data_seed, "obs", number)
    return SceneData(scene, [render_observations(f, cfg, obs_rng) for f in scene.frames])


def make_dataset(cfg: ScenarioConfig, data_seed: int, split: str, n: int, eval_seed: int = 0) -> list[SceneData]:
    return [make_scene_data(cfg, data_seed, scene_seed(split, i, eval_seed)) for i in range(n)]


# -- scene files ------------------------------------------------------------

def format_scene(scene: Scene) -> str:
    """One line per frame: the frame index, then 10 fields per box."""
    lines = []
    for t, frame in enumerate(scene.frames):
        parts = [str(t)]
        for b in frame:
            vals = (*b.center, *b.size, b.yaw, *b.velocity)
            parts.append(str(b.instance_id))
            parts.extend(f"{v:.17g}" for v in vals)
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def parse_scene(text: str, dt: float = 0.5) -> Scene:
    frames: list[list[BevBox]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split()
        if int(fields[0]) != len(frames):
            raise ValueError(f"line {lineno}: expected frame {len(frames)}, got {fields[0]}")
        rest = fields[1:]
        if len(rest) % 10:
            raise ValueError(f"line {lineno}: box records must have 10 fields")
        frame = []
        for k in range(0, len(rest), 10):
            iid = int(rest[k])
            x, y, z, w, l, h, yaw, vx, vy = (float(v) for v in rest[k + 1 : k + 10])
            frame.append(BevBox((x, y, z), (w, l, h), yaw, (vx, vy), iid))
        frames.append(frame)
    return Scene(frames, dt)


def write_scene(path: Path, scene: Scene) -> None:
    Path(path).write_text(format_scene(scene), encoding="utf-8")


def read_scene(path: Path, dt: float = 0.5) -> Scene:
    return parse_scene(Path(path).read_text(encoding="utf-8"), dt)


def format_observations(frames: list[ObservationFrame]) -> str:
    """One line per frame: the frame index, then per observation its source id
    (``-`` for clutter) and the 8 raw values."""
    lines = []
    for t, obs in enumerate(frames):
        parts = [str(t)]
        for row, src in zip(obs.raw, obs.source_ids):
            parts.append("-" if src is None else str(src))
            parts.extend(f"{v:.17g}" for v in row)
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def parse_observations(text: str) -> list[ObservationFrame]:
    frames = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split()
        if int(fields[0]) != len(frames):
            raise ValueError(f"line {lineno}: expected frame {len(frames)}, got {fields[0]}")
        rest = fields[1:]
        if len(rest) % (OBS_DIM + 1):
            raise ValueError(f"line {lineno}: observation records must have {OBS_DIM + 1} fields")
        rows, ids = [], []
        for k in range(0, len(rest), OBS_DIM + 1):
            ids.append(None if rest[k] == "-" else int(rest[k]))
            rows.append([float(v) for v in rest[k + 1 : k + 1 + OBS_DIM]])
        frames.append(ObservationFrame(np.array(rows, dtype=np.float64).reshape(-1, OBS_DIM), ids))
    return frames


def write_scene_data(directory: Path, index: int, data: SceneData) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_scene(directory / f"scene_{index:04d}.txt", data.scene)
    (directory / f"obs_{index:04d}.txt").write_text(format_observations(data.observations), encoding="utf-8")


def read_scene_data(directory: Path, index: int, dt: float = 0.5) -> SceneData:
    directory = Path(directory)
    scene = read_scene(directory / f"scene_{index:04d}.txt", dt)
    obs = parse_observations((directory / f"obs_{index:04d}.txt").read_text(encoding="utf-8"))
    if len(obs) != len(scene):
        raise ValueError(f"{directory}: scene {index} has {len(scene)} frames but {len(obs)} observation frames")
    return SceneData(scene, obs)
