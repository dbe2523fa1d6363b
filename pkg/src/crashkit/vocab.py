"""Planning trajectory vocabulary: ego-frame trajectory windows clustered with k-means."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np

from crashkit import geom
from crashkit.rng import make_rng
from crashkit.scenario import (
    TRAJECTORY_LENGTH,
    EgoTrajectory,
    Scenario,
    ScenarioParseError,
    atomic_write_text,
    dumps,
    load_json,
)

POSE_FIELDS = 4  # x, y, heading, speed
DEFAULT_K = 256
DEFAULT_SAMPLES = 10_000
HEADING_WEIGHT = 1.0  # [m/rad]


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryVocabulary:
    k: int
    entries: tuple[EgoTrajectory, ...]
    build_meta: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        if len(self.entries) != self.k:
            raise VocabularyError(f"vocabulary declares k={self.k} but holds {len(self.entries)} entries")

    @cached_property
    def states(self) -> np.ndarray:
        """``(k, 40, 4)`` stacked entry states."""
        return np.stack([e.states for e in self.entries]) if self.entries else np.zeros((0, TRAJECTORY_LENGTH, 4))

    def __len__(self) -> int:
        return self.k

    def subset(self, indices: Sequence[int]) -> TrajectoryVocabulary:
        return TrajectoryVocabulary(len(indices), tuple(self.entries[i] for i in indices), dict(self.build_meta))

    @classmethod
    def from_states(cls, states: np.ndarray, build_meta: dict[str, Any] | None = None) -> TrajectoryVocabulary:
        entries = tuple(EgoTrajectory.from_array(s) for s in np.asarray(states))
        return cls(len(entries), entries, dict(build_meta or {}))


def to_ego_frame(states: np.ndarray) -> np.ndarray:
    """Re-express ``(T, 4)`` states in the frame of their first pose."""
    x0, y0, h0 = states[0, :3]
    out = states.copy()
    out[:, :2] = geom.to_local_frame(states[:, :2], (x0, y0), h0)
    out[:, 2] = geom.normalize_angle_array(states[:, 2] - h0)
    out[0, :3] = 0.0
    return out


def sample_ego_trajectories(corpus: Sequence[Scenario], n: int, seed: int) -> list[EgoTrajectory]:
    """Draw ``n`` 40-pose ego windows uniformly over all valid (scenario, offset) pairs."""
    if not corpus:
        raise VocabularyError("empty corpus")
    short = [i for i, s in enumerate(corpus) if len(s.ego.poses) < TRAJECTORY_LENGTH]
    if short:
        raise VocabularyError(f"corpus scenarios shorter than {TRAJECTORY_LENGTH} steps: {short[:5]}")
    if n == 0:
        return []
    windows = [(i, off) for i, s in enumerate(corpus) for off in range(len(s.ego.poses) - TRAJECTORY_LENGTH + 1)]
    rng = make_rng(seed, "vocab-sample")
    picks = rng.integers(0, len(windows), size=n)
    out = []
    for p in picks:
        i, off = windows[p]
        states = corpus[i].ego.states[off : off + TRAJECTORY_LENGTH]
        out.append(EgoTrajectory.from_array(to_ego_frame(states)))
    return out


def flatten(trajectories: np.ndarray, heading_weight: float = HEADING_WEIGHT) -> np.ndarray:
    """``(n, 40, 4)`` states to ``(n, 120)`` clustering vectors of (x, y, w*heading)."""
    feats = trajectories[:, :, :3].copy()
    feats[:, :, 2] *= heading_weight
    return feats.reshape(len(trajectories), -1)


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia_history: list[float]
    iterations: int

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _point_cost(X: np.ndarray, C: np.ndarray, labels: np.ndarray) -> np.ndarray:
    diff = X - C[labels]
    return np.einsum("ij,ij->i", diff, diff)


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every remaining point duplicates a chosen center
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def lloyd(X: np.ndarray, k: int, seed: int, max_iters: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster is re-seeded at the point currently farthest from its own
    center. A point only changes cluster when its new center is strictly
    closer, which keeps the recorded inertia non-increasing.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if not 1 <= k <= n:
        raise VocabularyError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = make_rng(seed, "kmeans++")
    centers = kmeans_pp_init(X, k, rng)
    labels = np.argmin(_sq_dist(X, centers), axis=1)
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        if it > 1:
            proposal = np.argmin(_sq_dist(X, centers), axis=1)
            cur = _point_cost(X, centers, labels)
            new = _point_cost(X, centers, proposal)
            labels = np.where(new < cur, proposal, labels)
        counts = np.bincount(labels, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            cost = _point_cost(X, centers, labels)
            far = int(np.argmax(cost))
            labels[far] = empty
            centers[empty] = X[far]
            counts = np.bincount(labels, minlength=k)
        new_centers = np.zeros_like(centers)
        np.add.at(new_centers, labels, X)
        new_centers /= counts[:, None]
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        history.append(float(_point_cost(X, centers, labels).sum()))
        if shift < tol:
            break
    return KMeansResult(centers, labels, history, it)


def kmeans_cluster(
    points: Sequence[EgoTrajectory],
    k: int = DEFAULT_K,
    seed: int = 0,
    max_iters: int = 100,
    heading_weight: float = HEADING_WEIGHT,
) -> TrajectoryVocabulary:
    if k > len(points):
        raise VocabularyError(f"k={k} exceeds the number of trajectories ({len(points)})")
    states = np.stack([p.states for p in points])
    result = lloyd(flatten(states, heading_weight), k, seed, max_iters)
    centers = np.zeros((k, TRAJECTORY_LENGTH, POSE_FIELDS))
    centers[:, :, :3] = result.centers.reshape(k, TRAJECTORY_LENGTH, 3)
    centers[:, :, 2] /= heading_weight
    counts = np.bincount(result.labels, minlength=k)
    speed_sum = np.zeros((k, TRAJECTORY_LENGTH))
    np.add.at(speed_sum, result.labels, states[:, :, 3])
    centers[:, :, 3] = speed_sum / counts[:, None]
    meta = {
        "sample_count": len(points),
        "seed": seed,
        "iterations": result.iterations,
        "inertia": result.inertia,
        "heading_weight": heading_weight,
    }
    return TrajectoryVocabulary.from_states(centers, meta)


def build_vocabulary(
    corpus: Sequence[Scenario], k: int = DEFAULT_K, n: int = DEFAULT_SAMPLES, seed: int = 0, max_iters: int = 100
) -> TrajectoryVocabulary:
    samples = sample_ego_trajectories(corpus, n, seed)
    return kmeans_cluster(samples, k, seed, max_iters)


# -- persistence ---------------------------------------------------------------


def vocabulary_to_dict(v: TrajectoryVocabulary) -> dict[str, Any]:
    return {
        "k": v.k,
        "pose_fields": ["x", "y", "heading", "speed"],
        "entries": [e.states.reshape(-1).tolist() for e in v.entries],
        "build_meta": v.build_meta,
    }


def vocabulary_from_dict(d: Any) -> TrajectoryVocabulary:
    try:
        k = int(d["k"])
        rows = d["entries"]
        meta = dict(d.get("build_meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioParseError(f"bad vocabulary document: {exc!r}") from exc
    if len(rows) != k:
        raise VocabularyError(f"vocabulary declares k={k} but holds {len(rows)} entries")
    states = []
    for i, row in enumerate(rows):
        arr = np.asarray(row, dtype=np.float64)
        if arr.size != TRAJECTORY_LENGTH * POSE_FIELDS or not np.all(np.isfinite(arr)):
            raise VocabularyError(f"entry {i}: expected {TRAJECTORY_LENGTH * POSE_FIELDS} finite values")
        arr = arr.reshape(TRAJECTORY_LENGTH, POSE_FIELDS)
        if np.any(arr[:, 3] < 0):
            raise VocabularyError(f"entry {i}: speed ≥ 0")
        if not np.allclose(arr[0, :3], 0.0, atol=1e-9):
            raise VocabularyError(f"entry {i}: first pose must be the ego-frame origin")
        states.append(arr)
    states_arr = np.stack(states) if states else np.zeros((0, TRAJECTORY_LENGTH, POSE_FIELDS))
    return TrajectoryVocabulary.from_states(states_arr, meta)


def save_vocabulary(v: TrajectoryVocabulary, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps(vocabulary_to_dict(v)))


def load_vocabulary(path: str | os.PathLike) -> TrajectoryVocabulary:
    return vocabulary_from_dict(load_json(path))


def straight_line_vocabulary(speeds: Sequence[float], dt: float = 0.1) -> TrajectoryVocabulary:
    """Constant-speed straight entries; handy for tests and as a minimal planner set."""
    t = np.arange(TRAJECTORY_LENGTH) * dt
    states = np.zeros((len(speeds), TRAJECTORY_LENGTH, POSE_FIELDS))
    for i, v in enumerate(speeds):
        states[i, :, 0] = v * t
        states[i, :, 3] = v
    return TrajectoryVocabulary.from_states(states, {"source": "straight", "speeds": list(map(float, speeds))})


def maneuver_grid_vocabulary(
    speed: float,
    yaw_rates: Sequence[float] = (-0.8, -0.4, 0.0, 0.4, 0.8),
    accels: Sequence[float] = (-4.0, -2.0, 0.0, 2.0),
    dt: float = 0.1,
) -> TrajectoryVocabulary:
    """Constant yaw-rate, constant-acceleration arcs starting at ``speed``.

    Every entry obeys the same unicycle update the tracker uses, so an ego
    moving at ``speed`` follows each one exactly when the rates are within
    the comfort limits.
    """
    states = []
    for w in yaw_rates:
        for a in accels:
            s = np.zeros((TRAJECTORY_LENGTH, POSE_FIELDS))
            s[0, 3] = speed
            for i in range(TRAJECTORY_LENGTH - 1):
                x, y, h, v = s[i]
                s[i + 1] = (x + v * np.cos(h) * dt, y + v * np.sin(h) * dt, h + w * dt, max(0.0, v + a * dt))
            s[:, 2] = geom.normalize_angle_array(s[:, 2])
            states.append(s)
    meta = {"source": "maneuver-grid", "speed": speed, "yaw_rates": list(yaw_rates), "accels": list(accels)}
    return TrajectoryVocabulary.from_states(np.stack(states), meta)
