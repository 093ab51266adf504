"""Synthetic ego-centric street scenes seen through a pinhole camera.

World frame: X lateral (right positive), Z forward along the road, heights
above a flat ground. The camera rides on the ego-vehicle at a fixed height
looking down +Z. Pedestrians walk along the sidewalks; crossing ones turn
toward the road and walk across it. Everything is projected to a
1920x1080 image as boxes, and class-id rasters are painted per frame.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from ..config import build_dataclass, parse_kv_text
from ..errors import ConfigError
from . import maps as M
from .grid import GridSpec
from .manifest import MANIFEST_NAME, default_header, save_manifest
from .sampling import TTE_RANGE, Track, sample_sequences

FPS = 30
PED_WIDTH = 0.5
AGENT_SHAPES = {
    M.PERSON: (0.5, (1.55, 1.9)),
    M.RIDER: (0.6, (1.6, 1.9)),
    M.VEHICLE: (1.8, (1.4, 1.7)),
    M.SIGN: (0.3, (2.4, 3.0)),
}


@dataclass
class WorldConfig:
    n_crossing: int = 10
    n_noncrossing: int = 30
    n_background: int = 4
    focal: float = 1000.0
    camera_height: float = 1.5
    image_width: int = 1920
    image_height: int = 1080
    grid_cell: int = 60
    obs_len: int = 15
    pred_len: int = 30
    lane_half_width: float = 1.75
    road_half_width: float = 5.0
    sidewalk_width: float = 3.5
    building_height: float = 12.0
    ego_profile: str = "constant"
    ego_speed_min: float = 2.0
    ego_speed_max: float = 10.0
    ego_sway: float = 0.2
    ego_step_min: int = 15
    ego_step_max: int = 45
    ego_ramp: int = 10
    ped_speed_min: float = 0.6
    ped_speed_max: float = 1.6
    event_depth_min: float = 10.0
    event_depth_max: float = 30.0
    label_horizon: int = 180
    raster_downsample: int = 1
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    workers: int = 1

    def __post_init__(self):
        if self.focal <= 0:
            raise ConfigError(f"focal length must be positive, got {self.focal}")
        if self.camera_height <= 0:
            raise ConfigError(f"camera height must be positive, got {self.camera_height}")
        for name in ("n_crossing", "n_noncrossing", "n_background"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.ego_profile not in ("constant", "random_steps"):
            raise ConfigError(f"ego_profile must be 'constant' or 'random_steps', got {self.ego_profile!r}")
        if not 0 <= self.ego_speed_min <= self.ego_speed_max:
            raise ConfigError("need 0 <= ego_speed_min <= ego_speed_max")
        if not 1 <= self.ego_step_min <= self.ego_step_max or self.ego_ramp < 1:
            raise ConfigError("need 1 <= ego_step_min <= ego_step_max and ego_ramp >= 1")
        if not 0 < self.lane_half_width < self.road_half_width:
            raise ConfigError("need 0 < lane_half_width < road_half_width")
        if self.raster_downsample < 1:
            raise ConfigError("raster_downsample must be >= 1")
        sub_h = self.image_height // self.raster_downsample
        sub_w = self.image_width // self.raster_downsample
        if (self.image_height % self.raster_downsample or self.image_width % self.raster_downsample
                or sub_h % M.MAP_FACTOR or sub_w % M.MAP_FACTOR):
            raise ConfigError(
                f"raster_downsample {self.raster_downsample} must leave a raster divisible by {M.MAP_FACTOR}"
            )
        if not (0 <= self.val_fraction and 0 <= self.test_fraction and self.val_fraction + self.test_fraction < 1):
            raise ConfigError("split fractions must be nonnegative and sum below 1")
        GridSpec.from_cell(self.grid_cell, self.image_width, self.image_height)

    @property
    def grid(self):
        return GridSpec.from_cell(self.grid_cell, self.image_width, self.image_height)

    @property
    def raster_shape(self):
        return self.image_height // self.raster_downsample, self.image_width // self.raster_downsample

    def to_text(self):
        # workers never changes the output, so it is not recorded
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self) if f.name != "workers")


def parse_world_config(text, source="<world config>"):
    return build_dataclass(WorldConfig, parse_kv_text(text, source), source)


def load_world_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_world_config(fh.read(), str(path))


# -- camera ---------------------------------------------------------------
class Camera:
    def __init__(self, cfg):
        self.f = cfg.focal
        self.h = cfg.camera_height
        self.cx = cfg.image_width / 2.0
        self.cy = cfg.image_height / 2.0
        self.w, self.hgt = cfg.image_width, cfg.image_height

    def project_box(self, x_rel, z_rel, width, height):
        """Unclipped image box of an upright world rectangle on the ground."""
        x1 = self.cx + self.f * (x_rel - width / 2) / z_rel
        x2 = self.cx + self.f * (x_rel + width / 2) / z_rel
        y1 = self.cy + self.f * (self.h - height) / z_rel
        y2 = self.cy + self.f * self.h / z_rel
        return np.stack([x1, y1, x2, y2], axis=-1)

    def clip(self, boxes):
        out = np.array(boxes, dtype=np.float64)
        out[..., 0::2] = np.clip(out[..., 0::2], 0.0, self.w)
        out[..., 1::2] = np.clip(out[..., 1::2], 0.0, self.hgt)
        return out


# -- scenario simulation ------------------------------------------------
@dataclass
class Agent:
    cls: int
    x: np.ndarray  # per frame world X
    z: np.ndarray  # per frame world Z
    width: float
    height: float


@dataclass
class Scenario:
    index: int
    crossing: bool
    n_frames: int
    ego_x: np.ndarray
    ego_z: np.ndarray
    ego: np.ndarray  # n x 3 (speed, v_x, v_z)
    target: Agent
    event_frame: int | None
    background: list
    split: str


def _speed_profile(cfg, rng, n):
    if cfg.ego_profile == "constant":
        return np.full(n, rng.uniform(cfg.ego_speed_min, cfg.ego_speed_max))
    speeds = np.empty(n)
    current = rng.uniform(cfg.ego_speed_min, cfg.ego_speed_max)
    t = 0
    while t < n:
        seg = int(rng.integers(cfg.ego_step_min, cfg.ego_step_max + 1))
        target = rng.uniform(cfg.ego_speed_min, cfg.ego_speed_max)
        ramp = np.linspace(current, target, min(cfg.ego_ramp, seg) + 1)[1:]
        block = np.concatenate([ramp, np.full(seg - len(ramp), target)])
        speeds[t:t + seg] = block[: n - t]
        current = target
        t += seg
    return speeds


def _ego_motion(cfg, rng, n):
    vz = _speed_profile(cfg, rng, n)
    period = rng.uniform(3.0, 6.0) * FPS
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(n)
    ex = cfg.ego_sway * np.sin(2 * np.pi * t / period + phase)
    vx = cfg.ego_sway * 2 * np.pi / period * FPS * np.cos(2 * np.pi * t / period + phase)
    ez = np.concatenate([[0.0], np.cumsum(vz[:-1]) / FPS])
    speed = np.hypot(vx, vz)
    return ex, ez, np.stack([speed, vx, vz], axis=1)


def simulate_scenario(cfg, index, crossing, seed):
    """Deterministic world paths for one target pedestrian and its scene."""
    rng = np.random.default_rng([seed, index])
    m = cfg.obs_len
    first_anchor = m - 1 + TTE_RANGE[0]
    side = rng.choice([-1.0, 1.0])
    walk_z = rng.uniform(cfg.ped_speed_min, cfg.ped_speed_max) * rng.choice([-1.0, 1.0])
    height = rng.uniform(1.55, 1.9)
    if crossing:
        event = int(rng.integers(first_anchor + 16, first_anchor + 56))
        n_obs = event + 1
    else:
        event = None
        n_obs = int(rng.integers(first_anchor + 30, first_anchor + 70))
    n = n_obs + cfg.label_horizon
    ex, ez, ego = _ego_motion(cfg, rng, n)
    t = np.arange(n)
    road, walk_outer = cfg.road_half_width, cfg.road_half_width + cfg.sidewalk_width
    if crossing:
        lead = int(rng.integers(20, 51))
        speed_x = rng.uniform(1.0, 1.8)
        turn = event - lead
        x_turn = road + speed_x * lead / FPS
        lateral = np.where(t < turn, x_turn, x_turn - speed_x * (t - turn) / FPS)
        x = side * lateral
        dz = np.where(t < turn, walk_z, 0.0) / FPS
        anchor = event
    else:
        x0 = rng.uniform(road + 0.6, walk_outer - 0.6)
        amp = rng.uniform(0.1, 0.4)
        x = side * (x0 + amp * np.sin(2 * np.pi * t / rng.uniform(60, 150) + rng.uniform(0, 2 * np.pi)))
        dz = np.full(n, walk_z / FPS)
        lat = np.abs(x[:n_obs] - ex[:n_obs]) - cfg.lane_half_width
        anchor = first_anchor + int(np.argmin(lat[first_anchor:]))
    rel = np.concatenate([[0.0], np.cumsum(dz[:-1])])
    depth = rng.uniform(cfg.event_depth_min, cfg.event_depth_max)
    z = ez[anchor] + depth - rel[anchor] + rel
    target = Agent(M.PERSON, x, z, PED_WIDTH, height)

    background = []
    for _ in range(cfg.n_background):
        cls = int(rng.choice([M.PERSON, M.RIDER, M.VEHICLE, M.SIGN]))
        width, (hlo, hhi) = AGENT_SHAPES[cls]
        bside = rng.choice([-1.0, 1.0])
        z0 = rng.uniform(8.0, 70.0)
        if cls == M.PERSON:
            bx = np.full(n, bside * rng.uniform(road + 0.5, walk_outer - 0.5))
            vz = rng.uniform(-1.5, 1.5)
        elif cls == M.RIDER:
            bx = np.full(n, bside * (road - 0.6))
            vz = rng.uniform(2.0, 6.0)
        elif cls == M.VEHICLE:
            bx = np.full(n, bside * (road - 1.1))
            vz = 0.0 if rng.random() < 0.6 else rng.uniform(3.0, 10.0)
        else:
            bx = np.full(n, bside * (road + 0.25))
            vz = 0.0
        bz = z0 + vz * t / FPS
        background.append(Agent(cls, bx, bz, width, rng.uniform(hlo, hhi)))

    u = rng.random()
    split = "val" if u < cfg.val_fraction else "test" if u < cfg.val_fraction + cfg.test_fraction else "train"
    return Scenario(index, crossing, n_obs, ex, ez, ego, target, event, background, split)


def crosses_ego_lane(scenario, cfg, t_end):
    """Geometric oracle: does the target's path enter the ego lane after t_end?"""
    hi = min(t_end + 1 + cfg.label_horizon, len(scenario.target.x))
    rel = scenario.target.x[t_end + 1:hi] - scenario.ego_x[t_end + 1:hi]
    return bool(np.any(np.abs(rel) < cfg.lane_half_width))


def scenario_track(scenario, cfg, cam):
    n = scenario.n_frames
    tgt = scenario.target
    x_rel = tgt.x[:n] - scenario.ego_x[:n]
    z_rel = tgt.z[:n] - scenario.ego_z[:n]
    boxes = np.round(cam.clip(cam.project_box(x_rel, z_rel, tgt.width, tgt.height)), 4)
    lateral = np.abs(x_rel) - cfg.lane_half_width
    return Track(
        track_id=f"{'c' if scenario.crossing else 'n'}{scenario.index:05d}",
        boxes=boxes,
        ego=np.round(scenario.ego[:n], 4),
        event_frame=scenario.event_frame,
        lateral_distance=lateral,
        scene=f"scene{scenario.index:05d}",
        split=scenario.split,
    )


# -- rendering ----------------------------------------------------------
def render_background(cfg, ego_x):
    """Static class raster (road, sidewalk, buildings, sky) for lateral offset ego_x."""
    r = cfg.raster_downsample
    h, w = cfg.raster_shape
    f = cfg.focal / r
    cx, cy = w / 2.0, h / 2.0
    hc = cfg.camera_height
    v = np.arange(h)[:, None] + 0.5
    u = np.arange(w)[None, :] + 0.5
    out = np.zeros((h, w), dtype=np.uint8)
    below = v > cy
    with np.errstate(divide="ignore", invalid="ignore"):
        zg = np.where(below, f * hc / (v - cy), np.inf)
        xg = ego_x + (u - cx) * zg / f
    ax = np.abs(xg)
    road, outer = cfg.road_half_width, cfg.road_half_width + cfg.sidewalk_width
    ground = np.broadcast_to(below, (h, w))
    out[ground & (ax < road)] = M.ROAD
    out[ground & (ax >= road) & (ax < outer)] = M.SIDEWALK
    out[ground & (ax >= outer)] = M.BUILDING
    # facades: vertical walls at X = +-outer, up to building_height
    du = u - cx
    for sgn in (-1.0, 1.0):
        with np.errstate(divide="ignore", invalid="ignore"):
            zw = f * (sgn * outer - ego_x) / du
        valid = np.isfinite(zw) & (zw > 0.5)
        top = cy + f * (hc - cfg.building_height) / np.where(valid, zw, 1.0)
        bottom = cy + f * hc / np.where(valid, zw, 1.0)
        wall = valid & (v >= top) & (v <= bottom)
        out[wall] = M.BUILDING
    return out


def render_frame(cfg, cam, scenario, frame):
    r = cfg.raster_downsample
    raster = render_background(cfg, scenario.ego_x[frame])
    h, w = raster.shape
    items = []
    for agent in [scenario.target] + scenario.background:
        z_rel = agent.z[frame] - scenario.ego_z[frame]
        if z_rel < 1.0:
            continue
        x_rel = agent.x[frame] - scenario.ego_x[frame]
        items.append((z_rel, agent.cls, cam.project_box(x_rel, z_rel, agent.width, agent.height)))
    for z_rel, cls, box in sorted(items, key=lambda it: -it[0]):
        x1, y1, x2, y2 = (box / r).tolist()
        c1, c2 = max(int(np.floor(x1)), 0), min(int(np.ceil(x2)), w)
        r1, r2 = max(int(np.floor(y1)), 0), min(int(np.ceil(y2)), h)
        if c1 < c2 and r1 < r2:
            raster[r1:r2, c1:c2] = cls
    return raster


# -- dataset ------------------------------------------------------------
def _scenario_plan(cfg):
    return [(i, i < cfg.n_crossing) for i in range(cfg.n_crossing + cfg.n_noncrossing)]


def build_scenario(cfg, index, crossing, seed):
    """Simulate one scenario; returns (scenario, samples, rasters dict)."""
    cam = Camera(cfg)
    sc = simulate_scenario(cfg, index, crossing, seed)
    track = scenario_track(sc, cfg, cam)
    samples = sample_sequences([track], cfg.obs_len, cfg.pred_len, cfg.grid)
    frames = sorted({s.obs_start + k for s in samples for k in range(cfg.obs_len)})
    names = {fr: f"rasters/{track.scene}/f{fr:04d}.pgm" for fr in frames}
    for s in samples:
        s.rasters = [names[s.obs_start + k] for k in range(cfg.obs_len)]
    rasters = {names[fr]: render_frame(cfg, cam, sc, fr) for fr in frames}
    return sc, samples, rasters


def _build_and_write(args):
    cfg, index, crossing, seed, out_dir = args
    _, samples, rasters = build_scenario(cfg, index, crossing, seed)
    for rel, raster in rasters.items():
        full = os.path.join(out_dir, rel)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        M.write_pgm(full, raster)
    return samples


def synthesize_dataset(cfg, seed, out_dir):
    """Write manifest.jsonl plus rasters/ under ``out_dir``; return a summary.

    Per-scenario generators are seeded from (seed, scenario index), so
    serial and parallel runs produce identical files.
    """
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(cfg, i, c, seed, out_dir) for i, c in _scenario_plan(cfg)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_build_and_write, jobs))
    else:
        results = [_build_and_write(j) for j in jobs]
    samples = [s for chunk in results for s in chunk]
    header = default_header(cfg.obs_len, cfg.pred_len, cfg.grid, cfg.raster_downsample, seed=seed)
    save_manifest(samples, os.path.join(out_dir, MANIFEST_NAME), header)
    with open(os.path.join(out_dir, "world.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    return summarize(samples)


def summarize(samples):
    tracks = {}
    for s in samples:
        tracks[s.track_id] = s.crossing
    n_cross = sum(1 for s in samples if s.crossing)
    return {
        "samples": len(samples),
        "crossing_samples": n_cross,
        "noncrossing_samples": len(samples) - n_cross,
        "crossing_tracks": sum(tracks.values()),
        "noncrossing_tracks": len(tracks) - sum(tracks.values()),
        "crossing_ratio": n_cross / len(samples) if samples else 0.0,
        "splits": {k: sum(1 for s in samples if s.split == k) for k in ("train", "val", "test")},
    }


def format_summary(summary):
    return json.dumps(summary, sort_keys=True)
