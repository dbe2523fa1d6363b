"""Maps, agent tracks and scenarios, with validation and JSON persistence.

A scenario file is one JSON document with top-level keys ``map``, ``tracks``,
``timestep`` and ``horizon``. A dataset is a directory of
``<id>.scenario.json`` files plus ``manifest.json`` listing ids and splits.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from crashkit.geom import Point2, normalize_angle

MAX_LANES = 384
MAX_AGENTS = 32
EGO_ID = 0
TRAJECTORY_LENGTH = 40
CONSISTENCY_TOLERANCE = 0.5  # [m]


class ScenarioParseError(ValueError):
    pass


class ScenarioValidationError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


@dataclass(frozen=True)
class LaneSegment:
    id: int
    start: Point2
    end: Point2

    @property
    def direction(self) -> np.ndarray:
        return np.array([self.end.x - self.start.x, self.end.y - self.start.y])


@dataclass(frozen=True)
class MapRegion:
    segments: tuple[LaneSegment, ...]
    corridor_half_width: float = 2.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))

    @cached_property
    def starts(self) -> np.ndarray:
        return np.array([[s.start.x, s.start.y] for s in self.segments], dtype=np.float64).reshape(-1, 2)

    @cached_property
    def ends(self) -> np.ndarray:
        return np.array([[s.end.x, s.end.y] for s in self.segments], dtype=np.float64).reshape(-1, 2)

    @property
    def directions(self) -> np.ndarray:
        return self.ends - self.starts


@dataclass(frozen=True, slots=True)
class AgentPose:
    position: Point2
    heading: float
    speed: float

    @property
    def x(self) -> float:
        return self.position.x

    @property
    def y(self) -> float:
        return self.position.y


@dataclass(frozen=True)
class AgentTrack:
    agent_id: int
    length: float
    width: float
    poses: tuple[AgentPose, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "poses", tuple(self.poses))

    @cached_property
    def states(self) -> np.ndarray:
        """``(T, 4)`` array of ``x, y, heading, speed``."""
        return poses_to_array(self.poses)

    def boxes(self) -> np.ndarray:
        """``(T, 5)`` oriented boxes for every pose."""
        s = self.states
        dims = np.broadcast_to([self.length, self.width], (len(s), 2))
        return np.concatenate([s[:, :3], dims], axis=1)


@dataclass(frozen=True)
class Scenario:
    map: MapRegion
    tracks: tuple[AgentTrack, ...]
    timestep: float = 0.1
    horizon: int = 50

    def __post_init__(self) -> None:
        object.__setattr__(self, "tracks", tuple(self.tracks))

    @property
    def ego(self) -> AgentTrack:
        for track in self.tracks:
            if track.agent_id == EGO_ID:
                return track
        raise ValueError("scenario has no ego track")

    @property
    def others(self) -> list[AgentTrack]:
        return [t for t in self.tracks if t.agent_id != EGO_ID]


@dataclass(frozen=True)
class EgoTrajectory:
    poses: tuple[AgentPose, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.poses) != TRAJECTORY_LENGTH:
            raise ValueError(f"ego trajectory needs {TRAJECTORY_LENGTH} poses, got {len(self.poses)}")

    @cached_property
    def states(self) -> np.ndarray:
        return poses_to_array(self.poses)

    @classmethod
    def from_array(cls, states: np.ndarray) -> EgoTrajectory:
        return cls(array_to_poses(states))


def poses_to_array(poses: Iterable[AgentPose]) -> np.ndarray:
    rows = [(p.position.x, p.position.y, p.heading, p.speed) for p in poses]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def array_to_poses(states: np.ndarray) -> tuple[AgentPose, ...]:
    return tuple(
        AgentPose(Point2(float(x), float(y)), normalize_angle(float(h)), float(v))
        for x, y, h, v in np.asarray(states, dtype=np.float64)
    )


def validate_scenario(s: Scenario) -> list[Violation]:
    """Check every scenario invariant; an empty list means the scenario is valid."""
    out: list[Violation] = []
    segs = s.map.segments
    if not 1 <= len(segs) <= MAX_LANES:
        out.append(Violation("map.segments", f"lane count must be in [1, {MAX_LANES}]"))
    ids = [seg.id for seg in segs]
    if len(set(ids)) != len(ids):
        out.append(Violation("map.segments", "duplicate lane id"))
    for seg in segs:
        if seg.start == seg.end:
            out.append(Violation(f"map.segments[{seg.id}]", "degenerate lane segment"))
    if not s.map.corridor_half_width > 0:
        out.append(Violation("map.corridor_half_width", "corridor_half_width > 0"))
    if not (s.timestep > 0 and math.isfinite(s.timestep)):
        out.append(Violation("timestep", "timestep > 0"))
    if s.horizon < 1:
        out.append(Violation("horizon", "horizon ≥ 1"))

    if len(s.tracks) > MAX_AGENTS:
        out.append(Violation("tracks", f"at most {MAX_AGENTS} agents"))
    n_ego = sum(1 for t in s.tracks if t.agent_id == EGO_ID)
    if n_ego == 0:
        out.append(Violation("tracks", "missing ego"))
    elif n_ego > 1:
        out.append(Violation("tracks", "duplicate ego"))
    agent_ids = [t.agent_id for t in s.tracks]
    if len(set(agent_ids)) != len(agent_ids) and n_ego <= 1:
        out.append(Violation("tracks", "duplicate agent id"))

    for i, track in enumerate(s.tracks):
        where = f"tracks[{i}]"
        if not (track.length > 0 and track.width > 0):
            out.append(Violation(where, "length, width > 0"))
        if len(track.poses) != s.horizon:
            out.append(Violation(where, "track length mismatch"))
        states = track.states
        if not np.all(np.isfinite(states)):
            out.append(Violation(where, "non-finite pose"))
            continue
        if np.any(states[:, 3] < 0):
            out.append(Violation(where, "speed ≥ 0"))
        if np.any((states[:, 2] < -math.pi) | (states[:, 2] >= math.pi)):
            out.append(Violation(where, "heading normalized to [-pi, pi)"))
        if len(states) > 1:
            step = np.linalg.norm(np.diff(states[:, :2], axis=0), axis=1)
            expected = states[:-1, 3] * s.timestep
            if np.any(np.abs(step - expected) > CONSISTENCY_TOLERANCE):
                out.append(Violation(where, "position deltas inconsistent with speed"))
    return out


# -- serialization -------------------------------------------------------------


def _point(p: Point2) -> list[float]:
    return [p.x, p.y]


def map_to_dict(m: MapRegion) -> dict[str, Any]:
    return {
        "corridor_half_width": m.corridor_half_width,
        "segments": [{"id": s.id, "start": _point(s.start), "end": _point(s.end)} for s in m.segments],
    }


def scenario_to_dict(s: Scenario) -> dict[str, Any]:
    return {
        "map": map_to_dict(s.map),
        "tracks": [
            {
                "agent_id": t.agent_id,
                "length": t.length,
                "width": t.width,
                "poses": [[p.position.x, p.position.y, p.heading, p.speed] for p in t.poses],
            }
            for t in s.tracks
        ],
        "timestep": s.timestep,
        "horizon": s.horizon,
    }


def map_from_dict(d: Any) -> MapRegion:
    if isinstance(d, list):
        d = {"segments": d}
    try:
        segments = [
            LaneSegment(int(seg["id"]), Point2(*map(float, seg["start"])), Point2(*map(float, seg["end"])))
            for seg in d["segments"]
        ]
        return MapRegion(tuple(segments), float(d.get("corridor_half_width", 2.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioParseError(f"bad map field: {exc!r}") from exc


def scenario_from_dict(d: Any) -> Scenario:
    if not isinstance(d, dict):
        raise ScenarioParseError("scenario document must be a JSON object")
    missing = {"map", "tracks", "timestep", "horizon"} - d.keys()
    if missing:
        raise ScenarioParseError(f"missing top-level keys: {sorted(missing)}")
    tracks = []
    for i, t in enumerate(d["tracks"]):
        try:
            poses = tuple(
                AgentPose(Point2(float(x), float(y)), float(h), float(v)) for x, y, h, v in t["poses"]
            )
            tracks.append(AgentTrack(int(t["agent_id"]), float(t["length"]), float(t["width"]), poses))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioParseError(f"tracks[{i}]: {exc!r}") from exc
    return Scenario(map_from_dict(d["map"]), tuple(tracks), float(d["timestep"]), int(d["horizon"]))


def dumps(obj: Any) -> str:
    # repr-based float output is the shortest string that round-trips bit-exactly
    return json.dumps(obj, allow_nan=False, separators=(",", ":")) + "\n"


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_json(path: str | os.PathLike) -> Any:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(
            f"{path}: parse error at offset {exc.pos} (line {exc.lineno}, column {exc.colno}): {exc.msg}"
        ) from exc


def save_scenario(s: Scenario, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps(scenario_to_dict(s)))


def load_scenario(path: str | os.PathLike) -> Scenario:
    try:
        s = scenario_from_dict(load_json(path))
    except ScenarioParseError as exc:
        if str(path) in str(exc):
            raise
        raise ScenarioParseError(f"{path}: {exc}") from exc
    violations = validate_scenario(s)
    if violations:
        raise ScenarioValidationError(violations)
    return s


def load_map(path: str | os.PathLike) -> MapRegion:
    return map_from_dict(load_json(path))


# -- datasets ------------------------------------------------------------------

SCENARIO_SUFFIX = ".scenario.json"
MANIFEST = "manifest.json"


@dataclass
class Dataset:
    scenarios: dict[str, Scenario]
    splits: dict[str, str] = field(default_factory=dict)

    def ids(self, split: str | None = None) -> list[str]:
        return [i for i in self.scenarios if split is None or self.splits.get(i, "train") == split]

    def subset(self, split: str | None) -> Dataset:
        ids = self.ids(split)
        return Dataset({i: self.scenarios[i] for i in ids}, {i: self.splits.get(i, "train") for i in ids})

    def __len__(self) -> int:
        return len(self.scenarios)


def save_dataset(ds: Dataset, directory: str | os.PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sid, s in ds.scenarios.items():
        save_scenario(s, directory / f"{sid}{SCENARIO_SUFFIX}")
    manifest = {"scenarios": [{"id": sid, "split": ds.splits.get(sid, "train")} for sid in ds.scenarios]}
    atomic_write_text(directory / MANIFEST, json.dumps(manifest, indent=1) + "\n")


def load_dataset(directory: str | os.PathLike) -> Dataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise ScenarioParseError(f"{directory}: not a dataset directory")
    manifest_path = directory / MANIFEST
    if manifest_path.exists():
        try:
            entries = load_json(manifest_path)["scenarios"]
            ids = [str(e["id"]) for e in entries]
            splits = {str(e["id"]): str(e.get("split", "train")) for e in entries}
        except (KeyError, TypeError, AttributeError) as exc:
            raise ScenarioParseError(f"{manifest_path}: malformed manifest ({exc!r})") from exc
    else:
        ids = sorted(p.name[: -len(SCENARIO_SUFFIX)] for p in directory.glob(f"*{SCENARIO_SUFFIX}"))
        splits = {i: "train" for i in ids}
    scenarios = {sid: load_scenario(directory / f"{sid}{SCENARIO_SUFFIX}") for sid in ids}
    return Dataset(scenarios, splits)
