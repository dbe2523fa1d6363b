"""Realism of generated scenarios against real ones.

Distribution distance uses a Gaussian-kernel MMD per attribute class;
trajectory distance uses Hungarian-matched agents compared in their own
initial-pose frames.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from crashkit import geom
from crashkit.scenario import AgentTrack, Scenario, atomic_write_text, dumps, load_json

ATTRIBUTES = ("Position", "Heading", "Speed", "Size")
COLUMNS = (*ATTRIBUTES, "mADE", "mFDE")
DEFAULT_SIGMAS = {"Position": 5.0, "Heading": 0.5, "Speed": 2.0, "Size": 1.0}


class RealismError(ValueError):
    pass


# -- MMD -----------------------------------------------------------------------


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def mmd_squared(X: np.ndarray, Y: np.ndarray, sigma: float) -> float:
    """Biased (V-statistic) squared MMD with an RBF kernel of bandwidth ``sigma``.

    :param X: ``(n, d)`` sample, or ``(n,)`` for scalar attributes
    :param Y: ``(m, d)`` sample
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    X = X[:, None] if X.ndim == 1 else X
    Y = Y[:, None] if Y.ndim == 1 else Y
    if len(X) == 0 or len(Y) == 0:
        raise RealismError("MMD needs non-empty samples")
    if X.shape[1] != Y.shape[1]:
        raise RealismError(f"dimension mismatch {X.shape[1]} vs {Y.shape[1]}")
    if not sigma > 0:
        raise RealismError("sigma must be positive")
    g = -1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(g * _sq_dists(X, X)).mean()
    kyy = np.exp(g * _sq_dists(Y, Y)).mean()
    kxy = np.exp(g * _sq_dists(X, Y)).mean()
    return float(kxx + kyy - 2.0 * kxy)


def attribute_samples(scenario: Scenario) -> dict[str, np.ndarray]:
    """Per-agent, per-step attribute vectors in the frame of the ego's initial pose."""
    e0 = scenario.ego.poses[0]
    st = np.concatenate([t.states for t in scenario.tracks])
    pos = geom.to_local_frame(st[:, :2], (e0.x, e0.y), e0.heading)
    h = st[:, 2] - e0.heading
    sizes = np.concatenate([np.tile([t.length, t.width], (len(t.poses), 1)) for t in scenario.tracks])
    return {
        "Position": pos,
        "Heading": np.column_stack([np.cos(h), np.sin(h)]),
        "Speed": st[:, 3:4],
        "Size": sizes,
    }


# -- assignment ----------------------------------------------------------------


@dataclass(frozen=True)
class MatchResult:
    assignment: dict[int, int]
    total_cost: float


def hungarian(cost: np.ndarray) -> MatchResult:
    """Minimum-cost assignment of every row to a distinct column.

    Shortest augmenting paths with row/column potentials, O(n^2 m). A matrix
    with more rows than columns is solved transposed, so only ``min(n, m)``
    rows end up assigned.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise RealismError("cost must be a 2-D matrix")
    if np.isnan(C).any():
        raise RealismError("cost matrix contains NaN")
    if not np.isfinite(C).all():
        raise RealismError("cost matrix must be finite")
    n, m = C.shape
    if n == 0 or m == 0:
        return MatchResult({}, 0.0)
    if n > m:
        t = hungarian(C.T)
        return MatchResult({r: c for c, r in t.assignment.items()}, t.total_cost)

    # 1-based arrays; column 0 is the virtual source
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j] = row matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = C[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assignment = {int(owner[j]) - 1: j - 1 for j in range(1, m + 1) if owner[j]}
    total = float(sum(C[r, c] for r, c in assignment.items()))
    return MatchResult(dict(sorted(assignment.items())), total)


# -- displacement errors -------------------------------------------------------


def relative_track(track: AgentTrack) -> np.ndarray:
    """Positions ``(T, 2)`` in the frame of the track's own initial pose."""
    st = track.states
    return geom.to_local_frame(st[:, :2], st[0, :2], st[0, 2])


def displacement_errors(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Average and final displacement between two relative tracks.

    The common first pose is the origin for both tracks, so the average runs
    over steps 1..T-1.
    """
    T = min(len(a), len(b))
    if T < 2:
        raise RealismError("tracks need at least two steps")
    d = np.linalg.norm(a[1:T] - b[1:T], axis=1)
    return float(d.mean()), float(d[-1])


def match_agents(real: Scenario, generated: Scenario) -> MatchResult:
    """Hungarian matching on initial positions expressed in each scenario's ego frame."""

    def starts(s: Scenario) -> np.ndarray:
        e0 = s.ego.poses[0]
        p = np.array([t.states[0, :2] for t in s.tracks])
        return geom.to_local_frame(p, (e0.x, e0.y), e0.heading)

    a, b = starts(real), starts(generated)
    return hungarian(np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1))


def made_mfde(real: Scenario, generated: Scenario) -> tuple[float, float]:
    if not real.tracks or not generated.tracks:
        raise RealismError("both scenarios need at least one agent")
    match = match_agents(real, generated)
    if not match.assignment:
        raise RealismError("no matched agent pairs")
    ade, fde = [], []
    for i, j in match.assignment.items():
        a, f = displacement_errors(relative_track(real.tracks[i]), relative_track(generated.tracks[j]))
        ade.append(a)
        fde.append(f)
    return float(np.mean(ade)), float(np.mean(fde))


# -- report --------------------------------------------------------------------


@dataclass
class RealismReport:
    values: dict[str, float]
    pairs: list[tuple[str, str]] = field(default_factory=list)
    sigmas: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SIGMAS))

    def to_dict(self) -> dict[str, Any]:
        return {
            "columns": list(COLUMNS),
            "values": {c: self.values[c] for c in COLUMNS},
            "pairs": [list(p) for p in self.pairs],
            "sigmas": self.sigmas,
        }

    @classmethod
    def from_dict(cls, d: Any) -> RealismReport:
        return cls({c: float(d["values"][c]) for c in COLUMNS}, [tuple(p) for p in d.get("pairs", [])], dict(d["sigmas"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        w.writerow([f"{self.values[c]:.6f}" for c in COLUMNS])
        return buf.getvalue()


def pair_scenarios(real: dict[str, Scenario], generated: dict[str, Scenario]) -> list[tuple[str, str]]:
    """Pair by shared id when the id sets coincide, otherwise by sorted order."""
    if set(real) == set(generated):
        return [(i, i) for i in sorted(real)]
    return list(zip(sorted(real), sorted(generated)))


def realism_report(
    real: dict[str, Scenario],
    generated: dict[str, Scenario],
    sigmas: dict[str, float] | None = None,
) -> RealismReport:
    """Per-pair MMD for each attribute class plus mADE/mFDE, averaged over pairs."""
    sig = dict(DEFAULT_SIGMAS, **(sigmas or {}))
    pairs = pair_scenarios(real, generated)
    if not pairs:
        raise RealismError("no scenario pairs to compare")
    acc: dict[str, list[float]] = {c: [] for c in COLUMNS}
    for rid, gid in pairs:
        ra, ga = attribute_samples(real[rid]), attribute_samples(generated[gid])
        for name in ATTRIBUTES:
            acc[name].append(mmd_squared(ra[name], ga[name], sig[name]))
        ade, fde = made_mfde(real[rid], generated[gid])
        acc["mADE"].append(ade)
        acc["mFDE"].append(fde)
    return RealismReport({c: float(np.mean(v)) for c, v in acc.items()}, pairs, sig)


def save_report(report: RealismReport, json_path: str | os.PathLike, csv_path: str | os.PathLike | None = None) -> None:
    atomic_write_text(json_path, dumps(report.to_dict()))
    if csv_path is not None:
        atomic_write_text(csv_path, report.to_csv())


def load_report(path: str | os.PathLike) -> RealismReport:
    return RealismReport.from_dict(load_json(path))
