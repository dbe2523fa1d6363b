"""Scenario builders shared by the test modules."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from crashkit import geom
from crashkit.cli import main
from crashkit.scenario import AgentTrack, LaneSegment, MapRegion, Scenario, array_to_poses
from crashkit.synth import load_bundled_map

DT = 0.1
T = 50


def straight_states(x, y, heading, speed, accel=0.0, steps=T, dt=DT):
    out = np.zeros((steps, 4))
    out[0] = (x, y, heading, speed)
    for i in range(steps - 1):
        px, py, h, v = out[i]
        out[i + 1] = (px + v * math.cos(h) * dt, py + v * math.sin(h) * dt, h, max(0.0, v + accel * dt))
    return out


def track(agent_id, states, length=4.5, width=2.0):
    return AgentTrack(agent_id, length, width, array_to_poses(np.asarray(states, dtype=float)))


def scenario(tracks, m=None):
    m = m if m is not None else load_bundled_map("straight_bidir")
    return Scenario(m, tuple(tracks))


def stationary(agent_id, x, y, heading=0.0):
    return track(agent_id, straight_states(x, y, heading, 0.0))


def ego(speed=10.0, x=0.0, y=0.0, heading=0.0, accel=0.0):
    return track(0, straight_states(x, y, heading, speed, accel))


# wall rows on the two-lane straight road: each within 3 m of a lane and aligned with it
WALL_ROWS = ((-2.5, 0.0), (-0.5, 0.0), (1.5, 0.0), (3.5, math.pi), (5.5, math.pi))


def boxed_in(speed=10.0, gap=2.0):
    """Ego driving into stopped cars that span every lane ``gap`` meters ahead of its bumper."""
    x = 2.25 + gap + 2.25
    wall = [stationary(i + 1, x, y, h) for i, (y, h) in enumerate(WALL_ROWS)]
    return scenario([ego(speed), *wall])


def one_open_lane(speed=12.0, distance=8.0):
    """Stopped cars block the ego's lane and the right shoulder; the opposing lane stays open."""
    x = 2.25 + distance + 2.25
    rows = ((-2.5, 0.0), (-0.5, 0.0))
    wall = [stationary(i + 1, x, y, h) for i, (y, h) in enumerate(rows)]
    return scenario([ego(speed), *wall])


def filter_suite():
    """Thirty hand-labelled scenarios, six per filter outcome, for a 10 m/s ego.

    Misaligned agents sit 15 degrees off their lane and aligned ones 5 degrees
    off, bracketing the 10 degree threshold. Returns ``(name, scenario, stage)``.
    """
    five, fifteen = math.radians(5.0), math.radians(15.0)
    suite = []
    for i in range(6):
        # parked well beside the road, otherwise harmless
        off = stationary(1, 30.0 + 5 * i, -3.2 - 0.4 * i, five if i % 2 else 0.0)
        suite.append((f"off_lane_{i}", scenario([ego(), off]), "LaneAdherence"))
    for i in range(6):
        lane_y, lane_h = (0.0, 0.0) if i % 2 == 0 else (3.5, math.pi)
        sign = 1 if i < 3 else -1
        bad = stationary(1, 40.0 + 5 * i, lane_y + 0.3 * sign, lane_h + sign * fifteen)
        suite.append((f"misaligned_{i}", scenario([ego(), bad]), "DirectionAlignment"))
    for i in range(6):
        sign = 1 if i % 2 else -1
        oncoming = track(1, straight_states(60.0 + 10 * i, 3.5, math.pi, 5.0 + i))
        parked = stationary(2, 100.0 + 5 * i, 3.5 + 0.3 * sign, math.pi + sign * five)
        suite.append((f"passing_{i}", scenario([ego(), oncoming, parked]), "NoCollision"))
    for i in range(6):
        suite.append((f"boxed_in_{i}", boxed_in(10.0, gap=0.5 + 0.5 * i), "NoFeasibleAvoidance"))
    for i in range(6):
        s = one_open_lane(10.0, distance=8.0 + 1.0 * i)
        if i % 2:
            # an aligned oncoming car far down the open lane stays legal
            far = stationary(9, 140.0, 3.5, math.pi - five)
            s = scenario([*s.tracks, far])
        suite.append((f"open_lane_{i}", s, "Passed"))
    return suite


def rigid_transform(s, angle, shift):
    """The scenario and its map rotated by ``angle`` about the origin, then shifted."""
    c, si = math.cos(angle), math.sin(angle)

    def pt(p):
        return geom.Point2(c * p.x - si * p.y + shift[0], si * p.x + c * p.y + shift[1])

    segs = tuple(LaneSegment(seg.id, pt(seg.start), pt(seg.end)) for seg in s.map.segments)
    tracks = []
    for t in s.tracks:
        states = t.states.copy()
        states[:, :2] = geom.to_world_frame(states[:, :2], shift, angle)
        states[:, 2] = geom.normalize_angle_array(states[:, 2] + angle)
        tracks.append(AgentTrack(t.agent_id, t.length, t.width, array_to_poses(states)))
    return Scenario(MapRegion(segs, s.map.corridor_half_width), tuple(tracks), s.timestep, s.horizon)


def run_pipeline(root, seed=5, steps=200):
    """Drive the command line from driving logs to evaluation; returns the exit codes."""
    d = str(root)
    commands = [
        ["logs", "--out", f"{d}/logs", "--count", "60", "--seed", str(seed)],
        ["cluster", "--in", f"{d}/logs", "--k", "16", "--n", "400", "--seed", str(seed), "--out", f"{d}/vocab.json"],
        ["generate", "--templates", "collision", "--out", f"{d}/col", "--count", "30", "--seed", str(seed),
         "--test-fraction", "0.3", "--prefix", "c"],
        ["generate", "--templates", "regular", "--out", f"{d}/reg", "--count", "30", "--seed", str(seed + 1),
         "--test-fraction", "0.3", "--prefix", "r"],
        ["filter", "--in", f"{d}/col", "--out", f"{d}/colf", "--vocab", f"{d}/vocab.json"],
        ["score", "--in", f"{d}/colf", "--vocab", f"{d}/vocab.json", "--out", f"{d}/col_table.json"],
        ["score", "--in", f"{d}/reg", "--vocab", f"{d}/vocab.json", "--out", f"{d}/reg_table.json"],
        ["train", "--regular", f"{d}/reg", "--collision", f"{d}/colf", "--tables", f"{d}/reg_table.json",
         f"{d}/col_table.json", "--ratio", "10:1", "--steps", str(steps), "--lr", "1e-3", "--seed", str(seed),
         "--out", f"{d}/model.json"],
        ["eval", "--model", f"{d}/model.json", "--testset", f"{d}/colf", "--vocab", f"{d}/vocab.json",
         "--tables", f"{d}/col_table.json", "--out", f"{d}/eval.json"],
    ]
    return [main(c) for c in commands]


def tree_bytes(root):
    """Relative path to file contents for every file below ``root``."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
