"""Non-reactive closed-loop scoring of ego trajectories.

The ego follows a candidate trajectory through a clamped unicycle tracker while
all other agents replay their logged tracks. Six sub-metrics are evaluated per
trajectory and folded into the PDM score.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass
from typing import Iterable, Sequence

import numpy as np

from crashkit import geom
from crashkit.scenario import TRAJECTORY_LENGTH, AgentPose, EgoTrajectory, MapRegion, Scenario
from crashkit.vocab import TrajectoryVocabulary

METRICS = ("nc", "dac", "ddc", "ttc", "comfort", "ep")
# column order used by evaluation tables
REPORT_COLUMNS = ("NC", "DAC", "DDC", "EP", "TTC", "COMF", "Total")


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreVector:
    nc: float
    dac: float
    ddc: float
    ttc: float
    comfort: float
    ep: float

    def __post_init__(self) -> None:
        for name, value in zip(METRICS, astuple(self)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, row: Iterable[float]) -> ScoreVector:
        return cls(*(float(v) for v in row))


@dataclass(frozen=True)
class SimConfig:
    ttc_threshold: float = 1.0  # [s]
    ttc_lookahead: float = 3.0  # [s]
    ttc_substep: float = 0.1  # [s]
    max_abs_accel: float = 4.0  # [m/s^2]
    max_abs_yaw_rate: float = 0.8  # [rad/s]
    ddc_angle_limit: float = 2.0  # [rad]
    heading_gain: float = 1.0
    speed_gain: float = 1.0
    lateral_lookahead: float = 1.0  # [m] floor on the aim distance for lateral correction
    comfort_tolerance: float = 1e-6

    def __post_init__(self) -> None:
        for name in ("ttc_threshold", "ttc_lookahead", "ttc_substep", "max_abs_accel",
                     "max_abs_yaw_rate", "ddc_angle_limit", "heading_gain", "speed_gain",
                     "lateral_lookahead"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SimConfig.{name} must be positive")


def pdm_score(v: ScoreVector) -> float:
    return v.nc * v.dac * v.ddc * (5.0 * v.ttc + 2.0 * v.comfort + 5.0 * v.ep) / 12.0


def pdm_score_array(scores: np.ndarray) -> np.ndarray:
    """PDM score over the last axis of ``(..., 6)`` arrays in ``METRICS`` order."""
    s = np.asarray(scores, dtype=np.float64)
    nc, dac, ddc, ttc, c, ep = (s[..., i] for i in range(6))
    return nc * dac * ddc * (5.0 * ttc + 2.0 * c + 5.0 * ep) / 12.0


# -- tracking ------------------------------------------------------------------


def to_world(candidates: np.ndarray, ego: AgentPose) -> np.ndarray:
    """Ego-frame ``(..., 40, 4)`` states placed at the ego's current pose."""
    c = np.asarray(candidates, dtype=np.float64)
    out = c.copy()
    out[..., :2] = geom.to_world_frame(c[..., :2], (ego.x, ego.y), ego.heading)
    out[..., 2] = geom.normalize_angle_array(c[..., 2] + ego.heading)
    return out


def track_world_array(targets: np.ndarray, ego: AgentPose, cfg: SimConfig, dt: float) -> np.ndarray:
    """Re-integrate world-frame targets ``(k, 40, 4)`` under clamped unicycle dynamics.

    Position advances with the current heading and speed; the heading and speed
    for the next step aim at the target pose two steps ahead, with yaw rate and
    acceleration clamped. A target that already obeys these dynamics and starts
    at the ego's speed is reproduced exactly.
    """
    k, T = targets.shape[0], targets.shape[1]
    out = np.empty((k, T, 4))
    x = np.full(k, ego.x)
    y = np.full(k, ego.y)
    th = np.full(k, ego.heading)
    v = np.full(k, ego.speed)
    out[:, 0] = np.stack([x, y, th, v], axis=1)
    max_dw = cfg.max_abs_yaw_rate * dt
    max_dv = cfg.max_abs_accel * dt
    for i in range(T - 1):
        x = x + v * np.cos(th) * dt
        y = y + v * np.sin(th) * dt
        ref_th = targets[:, i + 1, 2]
        if i + 2 < T:
            ax = targets[:, i + 2, 0] - x
            ay = targets[:, i + 2, 1] - y
            c, s = np.cos(ref_th), np.sin(ref_th)
            lon = ax * c + ay * s
            lat = -ax * s + ay * c
            correction = np.where(lat == 0.0, 0.0, np.arctan2(lat, np.maximum(lon, cfg.lateral_lookahead)))
            th_des = ref_th + cfg.heading_gain * correction
            v_des = np.maximum(lon, 0.0) / dt
        else:
            th_des = ref_th
            v_des = targets[:, i + 1, 3]
        dth = np.clip(geom.normalize_angle_array(th_des - th), -max_dw, max_dw)
        dv = np.clip(cfg.speed_gain * (v_des - v), -max_dv, max_dv)
        th = geom.normalize_angle_array(th + dth)
        v = np.maximum(v + dv, 0.0)
        out[:, i + 1] = np.stack([x, y, th, v], axis=1)
    return out


def make_feasible_array(candidates: np.ndarray, ego: AgentPose, cfg: SimConfig = SimConfig(), dt: float = 0.1) -> np.ndarray:
    return track_world_array(to_world(candidates, ego), ego, cfg, dt)


def make_feasible(
    candidate: EgoTrajectory, ego_history: AgentPose, cfg: SimConfig = SimConfig(), dt: float = 0.1
) -> EgoTrajectory:
    """World-frame trajectory the ego can actually drive when asked to follow ``candidate``."""
    return EgoTrajectory.from_array(make_feasible_array(candidate.states[None], ego_history, cfg, dt)[0])


# -- metrics -------------------------------------------------------------------


def nearest_lanes(points: np.ndarray, headings: np.ndarray, m: MapRegion, tie_tol: float = 1e-9):
    """Distance to, and index of, the nearest lane segment for every point.

    Segments within ``tie_tol`` of the minimum distance are tied; among those the
    one best aligned with the heading wins, then the lowest index.
    """
    dist, _ = geom.point_segment_distance_array(points, m.starts, m.ends)
    dmin = dist.min(axis=-1)
    dirs = m.directions
    angles = geom.heading_alignment_angle_array(np.asarray(headings)[..., None], dirs)
    tied = dist <= dmin[..., None] + tie_tol
    idx = np.argmin(np.where(tied, angles, np.inf), axis=-1)
    return dmin, idx, np.take_along_axis(angles, idx[..., None], axis=-1)[..., 0]


def _ttc_ok(ego: np.ndarray, ego_dims: tuple[float, float], agents: np.ndarray, agent_dims: np.ndarray,
            cfg: SimConfig) -> np.ndarray:
    """Binary TTC per trajectory from constant-velocity forward projection.

    :param ego: ``(k, T, 4)`` ego states
    :param agents: ``(N, T, 4)`` agent states
    :param agent_dims: ``(N, 2)`` lengths and widths
    """
    k, T = ego.shape[:2]
    if agents.shape[0] == 0:
        return np.ones(k, dtype=bool)
    n_sub = int(round(cfg.ttc_lookahead / cfg.ttc_substep))
    taus = np.arange(n_sub + 1) * cfg.ttc_substep
    taus = taus[taus <= cfg.ttc_threshold + 1e-12]
    ok = np.ones(k, dtype=bool)
    for tau in taus:
        e = _project(ego, tau)  # (k, T, 5-ish)
        a = _project(agents, tau)
        eb = np.concatenate([e, np.broadcast_to(ego_dims, e.shape[:-1] + (2,))], axis=-1)
        ab = np.concatenate([a, np.broadcast_to(agent_dims[:, None, :], a.shape[:-1] + (2,))], axis=-1)
        hit = geom.boxes_intersect_array(eb[:, None], ab[None])  # (k, N, T)
        ok &= ~hit.any(axis=(1, 2))
    return ok


def _project(states: np.ndarray, tau: float) -> np.ndarray:
    x = states[..., 0] + states[..., 3] * np.cos(states[..., 2]) * tau
    y = states[..., 1] + states[..., 3] * np.sin(states[..., 2]) * tau
    return np.stack([x, y, states[..., 2]], axis=-1)


@dataclass
class BatchResult:
    scores: np.ndarray  # (k, 6) in METRICS order
    progress: np.ndarray  # (k,)
    trajectories: np.ndarray  # (k, T, 4) world frame

    @property
    def pdm(self) -> np.ndarray:
        return pdm_score_array(self.scores)

    def vectors(self) -> list[ScoreVector]:
        return [ScoreVector.from_array(row) for row in self.scores]


def evaluate_array(
    scenario: Scenario,
    ego_trajs: np.ndarray,
    cfg: SimConfig = SimConfig(),
    reference_progress: float | None = None,
) -> BatchResult:
    """Score ``(k, T, 4)`` world-frame ego trajectories against a scenario.

    With ``reference_progress`` None the progress normalizer is the best
    collision-free trajectory in the batch itself.
    """
    trajs = np.asarray(ego_trajs, dtype=np.float64)
    k, T = trajs.shape[:2]
    if T > scenario.horizon:
        raise SimulationError(f"ego trajectory has {T} steps but the scenario only {scenario.horizon}")
    dt = scenario.timestep
    ego_track = scenario.ego
    ego_dims = (ego_track.length, ego_track.width)
    others = scenario.others
    agents = np.stack([o.states[:T] for o in others]) if others else np.zeros((0, T, 4))
    agent_dims = np.array([[o.length, o.width] for o in others]).reshape(-1, 2)

    # no collision
    ego_boxes = np.concatenate([trajs[..., :3], np.broadcast_to(ego_dims, (k, T, 2))], axis=-1)
    if len(others):
        agent_boxes = np.concatenate([agents[..., :3], np.broadcast_to(agent_dims[:, None, :], (len(others), T, 2))], axis=-1)
        nc = ~geom.boxes_intersect_array(ego_boxes[:, None], agent_boxes[None]).any(axis=(1, 2))
    else:
        nc = np.ones(k, dtype=bool)

    # drivable area and driving direction
    dmin, _, angle = nearest_lanes(trajs[..., :2], trajs[..., 2], scenario.map)
    dac = (dmin <= scenario.map.corridor_half_width + ego_track.width / 2.0).all(axis=1)
    ddc = (angle <= cfg.ddc_angle_limit).all(axis=1)

    ttc = _ttc_ok(trajs, ego_dims, agents, agent_dims, cfg)

    accel = np.diff(trajs[..., 3], axis=1) / dt
    yaw_rate = geom.normalize_angle_array(np.diff(trajs[..., 2], axis=1)) / dt
    comfort = (np.abs(accel) <= cfg.max_abs_accel + cfg.comfort_tolerance).all(axis=1) & (
        np.abs(yaw_rate) <= cfg.max_abs_yaw_rate + cfg.comfort_tolerance
    ).all(axis=1)

    progress = np.linalg.norm(np.diff(trajs[..., :2], axis=1), axis=-1).sum(axis=1)
    if reference_progress is None:
        reference_progress = float(progress[nc].max()) if nc.any() else 0.0
    if reference_progress > 0:
        ep = np.clip(progress / reference_progress, 0.0, 1.0)
    else:
        ep = np.ones(k)

    scores = np.column_stack([nc, dac, ddc, ttc, comfort, ep]).astype(np.float64)
    return BatchResult(scores, progress, trajs)


def evaluate(
    scenario: Scenario,
    ego_traj: EgoTrajectory,
    cfg: SimConfig = SimConfig(),
    reference_progress: float | None = None,
) -> ScoreVector:
    """Score one world-frame ego trajectory.

    ``reference_progress`` is the progress of the best collision-free reference
    trajectory; ego progress is reported relative to it. Without a reference the
    trajectory is its own normalizer.
    """
    return evaluate_array(scenario, ego_traj.states[None], cfg, reference_progress).vectors()[0]


def score_vocabulary_batch(
    scenario: Scenario, vocab: TrajectoryVocabulary, cfg: SimConfig = SimConfig()
) -> BatchResult:
    ego0 = scenario.ego.poses[0]
    feasible = make_feasible_array(vocab.states, ego0, cfg, scenario.timestep)
    return evaluate_array(scenario, feasible, cfg)


def score_vocabulary(scenario: Scenario, vocab: TrajectoryVocabulary, cfg: SimConfig = SimConfig()) -> list[ScoreVector]:
    return score_vocabulary_batch(scenario, vocab, cfg).vectors()


def reference_progress(scenario: Scenario, vocab: TrajectoryVocabulary, cfg: SimConfig = SimConfig()) -> float:
    batch = score_vocabulary_batch(scenario, vocab, cfg)
    safe = batch.scores[:, 0] == 1.0
    return float(batch.progress[safe].max()) if safe.any() else 0.0


def summarize(vectors: Sequence[ScoreVector]) -> dict[str, float]:
    """Corpus means per sub-metric plus the mean of per-scenario PDM totals.

    The total is averaged over scenarios, not recomputed from averaged
    sub-metrics (the product does not commute with the mean).
    """
    if not vectors:
        raise ValueError("cannot summarize an empty set of scores")
    arr = np.stack([v.as_array() for v in vectors])
    means = dict(zip(METRICS, arr.mean(axis=0).tolist()))
    return {
        "NC": means["nc"],
        "DAC": means["dac"],
        "DDC": means["ddc"],
        "EP": means["ep"],
        "TTC": means["ttc"],
        "COMF": means["comfort"],
        "Total": float(np.mean([pdm_score(v) for v in vectors])),
    }


def format_summary(summary: dict[str, float]) -> str:
    head = " ".join(f"{c:>7}" for c in REPORT_COLUMNS)
    row = " ".join(f"{summary[c]:7.3f}" for c in REPORT_COLUMNS)
    return f"{head}\n{row}"


__all__ = [
    "METRICS",
    "REPORT_COLUMNS",
    "BatchResult",
    "ScoreVector",
    "SimConfig",
    "SimulationError",
    "evaluate",
    "evaluate_array",
    "make_feasible",
    "make_feasible_array",
    "pdm_score",
    "pdm_score_array",
    "score_vocabulary",
    "score_vocabulary_batch",
    "summarize",
    "TRAJECTORY_LENGTH",
]
