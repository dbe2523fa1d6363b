"""Two-step retention filter for generated collision scenarios.

Step 1 keeps scenarios whose generated traffic stays on and along its lanes and
in which the ego actually collides with someone. Step 2 keeps only those where
at least one vocabulary trajectory avoids every collision.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from crashkit import geom
from crashkit.scenario import AgentTrack, Dataset, MapRegion, Scenario
from crashkit.simulator import SimConfig, nearest_lanes, score_vocabulary_batch
from crashkit.vocab import TrajectoryVocabulary


class FilterError(ValueError):
    pass


class Stage(str, enum.Enum):
    LaneAdherence = "LaneAdherence"
    DirectionAlignment = "DirectionAlignment"
    NoCollision = "NoCollision"
    NoFeasibleAvoidance = "NoFeasibleAvoidance"
    Passed = "Passed"


STEP1_FAILURES = (Stage.LaneAdherence, Stage.DirectionAlignment, Stage.NoCollision)


@dataclass(frozen=True)
class FilterConfig:
    vocab: TrajectoryVocabulary | None = None
    d_thres: float = 3.0  # [m]
    theta_thres: float = math.radians(10.0)
    sim: SimConfig = field(default_factory=SimConfig)
    check_ego_lanes: bool = False

    def __post_init__(self) -> None:
        if not self.d_thres > 0 or not self.theta_thres > 0:
            raise ValueError("filter thresholds must be positive")


@dataclass(frozen=True)
class CheckResult:
    """Outcome of a per-step check; ``step`` and ``value`` locate the first violation."""

    passed: bool
    step: int | None = None
    value: float | None = None

    def __bool__(self) -> bool:
        return self.passed


@dataclass(frozen=True)
class CollisionResult:
    collided: bool
    step: int | None = None
    agent_id: int | None = None

    def __bool__(self) -> bool:
        return self.collided


@dataclass(frozen=True)
class FeasibilityResult:
    feasible: bool
    survivors: tuple[int, ...] = ()

    def __bool__(self) -> bool:
        return self.feasible


@dataclass(frozen=True)
class FilterVerdict:
    stage: Stage
    details: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.stage is Stage.Passed

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "stage": self.stage.value, "details": self.details}


def _first_violation(values: np.ndarray, ok: np.ndarray) -> CheckResult:
    bad = np.flatnonzero(~ok)
    if bad.size == 0:
        return CheckResult(True)
    i = int(bad[0])
    return CheckResult(False, i, float(values[i]))


def _require_lanes(m: MapRegion) -> None:
    if not m.segments:
        raise FilterError("map has no lane segments")


def check_lane_adherence(track: AgentTrack, m: MapRegion, d_thres: float = 3.0) -> CheckResult:
    """Every pose lies within ``d_thres`` of the nearest lane centerline."""
    _require_lanes(m)
    st = track.states
    dmin, _, _ = nearest_lanes(st[:, :2], st[:, 2], m)
    return _first_violation(dmin, dmin <= d_thres)


def check_direction_alignment(track: AgentTrack, m: MapRegion, theta_thres: float = math.radians(10.0)) -> CheckResult:
    """Every pose heads within ``theta_thres`` of its nearest lane's direction."""
    _require_lanes(m)
    st = track.states
    _, _, angle = nearest_lanes(st[:, :2], st[:, 2], m)
    return _first_violation(angle, angle <= theta_thres)


def check_collision_involvement(scenario: Scenario) -> CollisionResult:
    """First (step, agent) at which the ego box overlaps another agent's box."""
    others = scenario.others
    if not others:
        return CollisionResult(False)
    ego = scenario.ego.boxes()
    agents = np.stack([o.boxes() for o in others])
    n = min(len(ego), agents.shape[1])
    hit = geom.boxes_intersect_array(ego[None, :n], agents[:, :n])  # (N, T)
    steps = np.flatnonzero(hit.any(axis=0))
    if steps.size == 0:
        return CollisionResult(False)
    step = int(steps[0])
    who = int(np.flatnonzero(hit[:, step])[0])
    return CollisionResult(True, step, others[who].agent_id)


def check_avoidance_feasibility(scenario: Scenario, cfg: FilterConfig) -> FeasibilityResult:
    """Indices of vocabulary entries whose tracked rollout never collides."""
    if cfg.vocab is None:
        raise FilterError("avoidance feasibility needs a trajectory vocabulary")
    batch = score_vocabulary_batch(scenario, cfg.vocab, cfg.sim)
    survivors = tuple(int(i) for i in np.flatnonzero(batch.scores[:, 0] == 1.0))
    return FeasibilityResult(bool(survivors), survivors)


def filter_scenario(scenario: Scenario, cfg: FilterConfig) -> FilterVerdict:
    """Run the checks in order and report the first one that fails."""
    tracks = scenario.tracks if cfg.check_ego_lanes else scenario.others
    for tr in tracks:
        res = check_lane_adherence(tr, scenario.map, cfg.d_thres)
        if not res:
            return FilterVerdict(Stage.LaneAdherence, {"agent_id": tr.agent_id, "step": res.step, "distance": res.value})
    for tr in tracks:
        res = check_direction_alignment(tr, scenario.map, cfg.theta_thres)
        if not res:
            return FilterVerdict(Stage.DirectionAlignment, {"agent_id": tr.agent_id, "step": res.step, "angle": res.value})
    hit = check_collision_involvement(scenario)
    if not hit:
        return FilterVerdict(Stage.NoCollision)
    contact = {"contact_step": hit.step, "contact_agent": hit.agent_id}
    feas = check_avoidance_feasibility(scenario, cfg)
    if not feas:
        return FilterVerdict(Stage.NoFeasibleAvoidance, contact)
    return FilterVerdict(Stage.Passed, {**contact, "survivors": len(feas.survivors)})


@dataclass
class FilterReport:
    verdicts: dict[str, FilterVerdict]

    @property
    def total(self) -> int:
        return len(self.verdicts)

    @property
    def after_step1(self) -> int:
        return sum(v.stage not in STEP1_FAILURES for v in self.verdicts.values())

    @property
    def after_step2(self) -> int:
        return sum(v.passed for v in self.verdicts.values())

    def histogram(self) -> dict[str, int]:
        counts = {s.value: 0 for s in Stage}
        for v in self.verdicts.values():
            counts[v.stage.value] += 1
        return counts

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "after_step1": self.after_step1,
            "after_step2": self.after_step2,
            "stages": self.histogram(),
            "scenarios": {sid: self.verdicts[sid].to_dict() for sid in sorted(self.verdicts)},
        }


def filter_dataset(dataset: Dataset, cfg: FilterConfig) -> tuple[Dataset, FilterReport]:
    verdicts = {sid: filter_scenario(dataset.scenarios[sid], cfg) for sid in sorted(dataset.scenarios)}
    kept = {sid: dataset.scenarios[sid] for sid, v in verdicts.items() if v.passed}
    splits = {sid: dataset.splits.get(sid, "train") for sid in kept}
    return Dataset(kept, splits), FilterReport(verdicts)
