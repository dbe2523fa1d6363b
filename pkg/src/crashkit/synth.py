"""Rule-based scenario synthesis from a structured scene.

Placement picks, for every agent, the lane point that matches its quadrant,
distance bin and orientation; motion is a single kinematic unicycle rollout
driven by the agent's action.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from crashkit import geom
from crashkit.rng import derive_seed, make_rng
from crashkit.scenario import (
    AgentPose,
    AgentTrack,
    Dataset,
    MapRegion,
    Scenario,
    array_to_poses,
    map_from_dict,
)
from crashkit.structured import (
    Action,
    Orientation,
    PromptTemplate,
    StructuredAgentSpec,
    StructuredScene,
    TemplateInterpreterClient,
    expand_template,
    interpret,
)

BUNDLED_MAPS = ("straight_bidir", "crossroads")
ORIENTATION_OFFSET = {
    Orientation.ParallelSame: 0.0,
    Orientation.ParallelOpposite: math.pi,
    Orientation.PerpendicularLeft: math.pi / 2,
    Orientation.PerpendicularRight: -math.pi / 2,
}
ORIENTATION_TOLERANCE = math.radians(30.0)
PLACEMENT_STEP = 0.25  # [m] lane sampling resolution
MAX_SPEED = 30.0  # [m/s]


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class SynthesisConfig:
    timestep: float = 0.1
    horizon: int = 50
    default_length: float = 4.5
    default_width: float = 2.0
    accel_rate: float = 2.5  # [m/s^2]
    turn_rate: float = 0.35  # [rad/s]
    turn_duration: float = 2.0  # [s]
    position_jitter: float = 0.0  # [m] along-lane, uniform
    speed_jitter: float = 0.0  # [m/s], uniform
    rng_seed: int = 0


@dataclass(frozen=True)
class Placement:
    poses: list[AgentPose]
    lengths: list[float]
    widths: list[float]


def load_bundled_map(name: str) -> MapRegion:
    if name not in BUNDLED_MAPS:
        raise KeyError(f"unknown bundled map {name!r}; choose from {BUNDLED_MAPS}")
    text = resources.files("crashkit.data").joinpath(f"{name}.map.json").read_text(encoding="utf-8")
    return map_from_dict(json.loads(text))


def _quadrant_mask(local: np.ndarray, quadrant: int) -> np.ndarray:
    x, y = local[..., 0], local[..., 1]
    return {
        1: (x >= 0) & (y >= 0),
        2: (x < 0) & (y >= 0),
        3: (x < 0) & (y < 0),
        4: (x >= 0) & (y < 0),
    }[quadrant]


def _lane_samples(m: MapRegion) -> tuple[np.ndarray, np.ndarray]:
    """Dense points along every segment and the owning segment index."""
    pts, owner = [], []
    for j, (a, b) in enumerate(zip(m.starts, m.ends)):
        n = max(2, int(math.ceil(np.linalg.norm(b - a) / PLACEMENT_STEP)) + 1)
        t = np.linspace(0.0, 1.0, n)
        pts.append(a + t[:, None] * (b - a))
        owner.append(np.full(n, j))
    return np.concatenate(pts), np.concatenate(owner)


def place_ego(spec: StructuredAgentSpec, m: MapRegion) -> AgentPose:
    if not m.segments:
        raise PlacementError("map has no lane segments")
    dist, t = geom.point_segment_distance_array(np.zeros(2), m.starts, m.ends)
    j = int(np.argmin(dist))
    foot = m.starts[j] + t[j] * (m.ends[j] - m.starts[j])
    d = m.directions[j]
    heading = geom.normalize_angle(math.atan2(d[1], d[0]))
    return AgentPose(geom.Point2(float(foot[0]), float(foot[1])), heading, spec.speed_midpoint)


def place_agents(
    scene: StructuredScene, m: MapRegion, cfg: SynthesisConfig = SynthesisConfig()
) -> Placement:
    """Initial poses for the ego (index 0) and every other agent.

    Each other agent lands on the lane point inside its quadrant whose distance
    from the ego is closest to the distance-bin midpoint, among segments whose
    direction lies within 30 degrees of the requested orientation.
    """
    ego = place_ego(scene.ego, m)
    rng = make_rng(cfg.rng_seed, "placement")
    ego_xy = np.array([ego.x, ego.y])
    samples, owner = _lane_samples(m)
    local = geom.to_local_frame(samples, ego_xy, ego.heading)
    ranges = np.linalg.norm(local, axis=1)
    dirs = m.directions
    seg_heading = np.arctan2(dirs[:, 1], dirs[:, 0])

    poses = [ego]
    for i, spec in enumerate(scene.others, start=1):
        want = geom.normalize_angle(ego.heading + ORIENTATION_OFFSET[spec.orientation])
        ok_seg = np.abs(geom.normalize_angle_array(seg_heading - want)) <= ORIENTATION_TOLERANCE
        lo, hi = spec.distance_range
        target = spec.distance_midpoint
        speed = spec.speed_midpoint
        if cfg.position_jitter > 0:
            target += rng.uniform(-cfg.position_jitter, cfg.position_jitter)
        if cfg.speed_jitter > 0:
            speed = max(0.0, speed + rng.uniform(-cfg.speed_jitter, cfg.speed_jitter))
        mask = ok_seg[owner] & _quadrant_mask(local, spec.quadrant) & (ranges >= lo) & (ranges < hi)
        if not mask.any():
            raise PlacementError(f"no compatible lane for agent {i}")
        idx = np.flatnonzero(mask)
        # lexsort: last key is primary
        best = idx[np.lexsort((idx, np.abs(local[idx, 1]), np.abs(ranges[idx] - target)))[0]]
        j = owner[best]
        pos = samples[best]
        poses.append(AgentPose(geom.Point2(float(pos[0]), float(pos[1])), float(seg_heading[j]), speed))
    n = len(poses)
    return Placement(poses, [cfg.default_length] * n, [cfg.default_width] * n)


def rollout_agent(pose: AgentPose, action: Action, cfg: SynthesisConfig) -> np.ndarray:
    """Closed-form unicycle rollout: ``(T, 4)`` rows of ``x, y, heading, speed``."""
    T, dt = cfg.horizon, cfg.timestep
    steps = np.arange(T, dtype=np.float64)
    accel = {Action.Accelerate: cfg.accel_rate, Action.Decelerate: -cfg.accel_rate, Action.Stop: -cfg.accel_rate}
    speed = np.clip(pose.speed + accel.get(action, 0.0) * steps * dt, 0.0, MAX_SPEED)
    turn_steps = int(round(cfg.turn_duration / dt))
    sign = {Action.TurnLeft: 1.0, Action.TurnRight: -1.0}.get(action, 0.0)
    heading = pose.heading + sign * cfg.turn_rate * dt * np.minimum(steps, turn_steps)
    step_xy = np.stack([speed * np.cos(heading) * dt, speed * np.sin(heading) * dt], axis=1)
    xy = np.empty((T, 2))
    xy[0] = (pose.x, pose.y)
    xy[1:] = xy[0] + np.cumsum(step_xy[:-1], axis=0)
    return np.column_stack([xy, heading, speed])


def rollout_motion(
    placement: Placement, actions: list[Action], m: MapRegion, cfg: SynthesisConfig = SynthesisConfig()
) -> Scenario:
    tracks = []
    for agent_id, (pose, action, length, width) in enumerate(
        zip(placement.poses, actions, placement.lengths, placement.widths)
    ):
        states = rollout_agent(pose, action, cfg)
        tracks.append(AgentTrack(agent_id, length, width, array_to_poses(states)))
    return Scenario(m, tuple(tracks), cfg.timestep, cfg.horizon)


def synthesize(scene: StructuredScene, m: MapRegion, cfg: SynthesisConfig = SynthesisConfig()) -> Scenario:
    placement = place_agents(scene, m, cfg)
    actions = [scene.ego.action] + [o.action for o in scene.others]
    return rollout_motion(placement, actions, m, cfg)


# -- map and ego-motion corpora ------------------------------------------------


def lane_chain(start: tuple[float, float], end: tuple[float, float], piece: float, first_id: int) -> list[dict]:
    a, b = np.array(start, float), np.array(end, float)
    n = max(1, int(round(np.linalg.norm(b - a) / piece)))
    pts = [a + (b - a) * k / n for k in range(n + 1)]
    return [
        {"id": first_id + k, "start": [float(p[0]), float(p[1])], "end": [float(q[0]), float(q[1])]}
        for k, (p, q) in enumerate(zip(pts[:-1], pts[1:]))
    ]


def build_straight_bidir() -> dict:
    east = lane_chain((-100.0, 0.0), (150.0, 0.0), 10.0, 0)
    west = lane_chain((150.0, 3.5), (-100.0, 3.5), 10.0, len(east))
    return {"corridor_half_width": 2.0, "segments": east + west}


def build_crossroads() -> dict:
    segs = lane_chain((-100.0, 0.0), (150.0, 0.0), 10.0, 0)
    segs += lane_chain((150.0, 3.5), (-100.0, 3.5), 10.0, len(segs))
    segs += lane_chain((31.75, -100.0), (31.75, 100.0), 10.0, len(segs))
    segs += lane_chain((28.25, 100.0), (28.25, -100.0), 10.0, len(segs))
    return {"corridor_half_width": 2.0, "segments": segs}


def random_ego_corpus(
    n: int, seed: int, m: MapRegion | None = None, cfg: SynthesisConfig = SynthesisConfig()
) -> list[Scenario]:
    """Ego-only driving logs with piecewise-constant acceleration and yaw rate.

    These give the trajectory vocabulary its spread of speeds, braking, swerves
    and lane changes.
    """
    m = m if m is not None else load_bundled_map("straight_bidir")
    rng = make_rng(seed, "ego-corpus")
    T, dt = cfg.horizon, cfg.timestep
    out = []
    for _ in range(n):
        v = rng.uniform(0.0, 16.0)
        heading = 0.0
        xy = np.zeros(2)
        rows = []
        knots = np.sort(rng.choice(np.arange(5, T - 5), size=2, replace=False))
        segments = np.split(np.arange(T), knots)
        maneuver = rng.choice(["cruise", "swerve", "lane_change", "brake", "accelerate"], p=[0.2, 0.25, 0.25, 0.2, 0.1])
        plan = []
        for k, seg in enumerate(segments):
            if maneuver == "cruise":
                a, w = rng.normal(0.0, 0.3), rng.normal(0.0, 0.02)
            elif maneuver == "brake":
                a, w = -rng.uniform(1.0, 4.0), 0.0
            elif maneuver == "accelerate":
                a, w = rng.uniform(0.5, 2.5), 0.0
            elif maneuver == "swerve":
                a, w = rng.normal(0.0, 0.5), (rng.uniform(-0.6, 0.6) if k == 0 else 0.0)
            else:
                side = 1.0 if rng.random() < 0.5 else -1.0
                w = side * rng.uniform(0.2, 0.6) * (1.0 if k == 0 else -1.0 if k == 1 else 0.0)
                a = rng.normal(0.0, 0.3)
            plan.extend([(a, w)] * len(seg))
        for a, w in plan:
            rows.append((xy[0], xy[1], heading, v))
            xy = xy + v * dt * np.array([math.cos(heading), math.sin(heading)])
            heading += w * dt
            v = min(MAX_SPEED, max(0.0, v + a * dt))
        states = np.array(rows)
        track = AgentTrack(0, cfg.default_length, cfg.default_width, array_to_poses(states))
        out.append(Scenario(m, (track,), dt, T))
    return out


# -- corpus generation ---------------------------------------------------------


@dataclass
class GenerationResult:
    dataset: Dataset
    failures: list[tuple[str, str]]  # (scenario id, reason)


def generate_corpus(
    templates: list[PromptTemplate],
    count: int,
    seed: int,
    maps: list[str] | None = None,
    test_fraction: float = 0.0,
    cfg: SynthesisConfig = SynthesisConfig(position_jitter=2.0, speed_jitter=0.5),
    prefix: str = "scn",
) -> GenerationResult:
    """Draw ``count`` scenarios from templates via an interpreter round trip.

    Each scenario picks a template, a binding and one of the template's maps
    (restricted to ``maps`` when given) uniformly at random, renders the prompt,
    has it interpreted back into a structured scene and synthesizes it with its
    own jitter seed.
    """
    if not templates:
        raise ValueError("no templates selected")
    rng = make_rng(seed, "generate")
    client = TemplateInterpreterClient(templates)
    choices = []
    for t in templates:
        names = [n for n in t.maps if maps is None or n in maps]
        bindings = t.all_bindings()
        choices.extend((t, b, n) for n in names for b in bindings)
    if not choices:
        raise ValueError("no template is usable on the requested maps")
    loaded: dict[str, MapRegion] = {}
    scenarios, splits, failures = {}, {}, []
    width = max(4, len(str(count - 1)))
    for i in range(count):
        t, binding, map_name = choices[int(rng.integers(len(choices)))]
        split = "test" if rng.random() < test_fraction else "train"
        sid = f"{prefix}{i:0{width}d}"
        text, _ = expand_template(t, binding)
        try:
            scene = interpret(text, client)
            m = loaded.setdefault(map_name, load_bundled_map(map_name))
            sub = replace(cfg, rng_seed=int(derive_seed(seed, "scenario", i) & 0x7FFFFFFF))
            scenarios[sid] = synthesize(scene, m, sub)
            splits[sid] = split
        except ValueError as exc:
            failures.append((sid, f"{t.name}: {exc}"))
    return GenerationResult(Dataset(scenarios, splits), failures)
