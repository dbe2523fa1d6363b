"""Score distillation: predict per-entry simulator sub-scores and plan by argmax.

A feed-forward head maps a handcrafted scene feature vector to ``k x 6``
sigmoid outputs, one per (vocabulary entry, sub-metric). Training minimizes a
summed binary cross-entropy against simulator score tables, drawing each batch
from the regular or the collision set according to a mixing probability.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from crashkit import geom
from crashkit.rng import make_rng
from crashkit.scenario import Dataset, EgoTrajectory, Scenario, ScenarioParseError, atomic_write_text, dumps, load_json
from crashkit.simulator import METRICS, ScoreVector, SimConfig, pdm_score_array, score_vocabulary_batch, summarize
from crashkit.vocab import TrajectoryVocabulary

N_METRICS = len(METRICS)
FEATURE_AGENTS = 8
AGENT_FEATURES = 7  # present, x, y, vx, vy, cos, sin
FEATURE_LANES = 4
LANE_FEATURES = 4  # distance, signed offset, cos, sin
FEATURE_DIM = 1 + FEATURE_AGENTS * AGENT_FEATURES + FEATURE_LANES * LANE_FEATURES
POSITION_SCALE = 50.0  # [m]
SPEED_SCALE = 10.0  # [m/s]
LANE_SCALE = 10.0  # [m]
CLAMP = 1e-7
CHECKPOINT_FORMAT = "crashkit-score-head"
CHECKPOINT_VERSION = 1


class DistillError(ValueError):
    pass


class TrainingDiverged(DistillError):
    def __init__(self, step: int):
        super().__init__(f"loss became NaN at step {step}")
        self.step = step


# -- features ------------------------------------------------------------------


def scene_features(scenario: Scenario) -> np.ndarray:
    """Fixed-length description of the scene at t=0 in the ego frame.

    Layout: ego speed; the 8 nearest agents as (present, x, y, vx, vy, cos, sin)
    sorted by distance and zero-padded; the 4 nearest lane segments as
    (distance, signed lateral offset, cos, sin of the lane direction).
    """
    ego = scenario.ego.poses[0]
    origin = (ego.x, ego.y)
    out = np.zeros(FEATURE_DIM)
    out[0] = ego.speed / SPEED_SCALE

    others = scenario.others
    if others:
        st = np.array([o.states[0] for o in others])
        local = geom.to_local_frame(st[:, :2], origin, ego.heading)
        rel_h = st[:, 2] - ego.heading
        order = np.lexsort((np.arange(len(st)), np.hypot(local[:, 0], local[:, 1])))[:FEATURE_AGENTS]
        for slot, j in enumerate(order):
            base = 1 + slot * AGENT_FEATURES
            c, s = math.cos(rel_h[j]), math.sin(rel_h[j])
            out[base : base + AGENT_FEATURES] = (
                1.0,
                local[j, 0] / POSITION_SCALE,
                local[j, 1] / POSITION_SCALE,
                st[j, 3] * c / SPEED_SCALE,
                st[j, 3] * s / SPEED_SCALE,
                c,
                s,
            )

    m = scenario.map
    dist, t = geom.point_segment_distance_array(np.array(origin), m.starts, m.ends)
    order = np.lexsort((np.arange(len(dist)), dist))[:FEATURE_LANES]
    dirs = m.directions
    for slot, j in enumerate(order):
        base = 1 + FEATURE_AGENTS * AGENT_FEATURES + slot * LANE_FEATURES
        foot = m.starts[j] + t[j] * (m.ends[j] - m.starts[j])
        d_local = geom.to_local_frame(dirs[j][None], (0.0, 0.0), ego.heading)[0]
        offset = geom.to_local_frame(foot[None], origin, ego.heading)[0, 1]
        out[base : base + LANE_FEATURES] = (dist[j] / LANE_SCALE, offset / LANE_SCALE, d_local[0], d_local[1])
    return out


# -- model ---------------------------------------------------------------------


def _logsig(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(_logsig(z))


@dataclass
class ScoreHeadModel:
    """MLP with tanh hidden layers and a sigmoid output per (entry, metric).

    Parameters live in one flat vector; ``layers`` hands out per-layer views.
    """

    sizes: tuple[int, ...]
    params: np.ndarray

    def __post_init__(self) -> None:
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise DistillError(f"bad layer sizes {self.sizes}")
        if self.sizes[-1] % N_METRICS:
            raise DistillError("output size must be a multiple of the metric count")
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params(self.sizes),):
            raise DistillError(f"expected {self.n_params(self.sizes)} parameters, got {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            raise DistillError("non-finite parameters")

    @staticmethod
    def n_params(sizes: Sequence[int]) -> int:
        return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))

    @classmethod
    def init(cls, input_dim: int, k: int, hidden: Sequence[int] = (64, 64), seed: int = 0) -> ScoreHeadModel:
        sizes = (input_dim, *hidden, k * N_METRICS)
        rng = make_rng(seed, "model-init")
        chunks = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / (a + b))
            chunks.append(rng.uniform(-bound, bound, size=a * b))
            chunks.append(np.zeros(b))
        return cls(sizes, np.concatenate(chunks))

    @property
    def k(self) -> int:
        return self.sizes[-1] // N_METRICS

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        p = self.params if params is None else params
        out, pos = [], 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            W = p[pos : pos + a * b].reshape(a, b)
            pos += a * b
            out.append((W, p[pos : pos + b]))
            pos += b
        return out

    def _forward(self, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [X]
        h = X
        layers = self.layers()
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            h = np.tanh(z) if i < len(layers) - 1 else z
            acts.append(h)
        return h, acts

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.input_dim:
            raise DistillError(f"feature dimension {X.shape[1]} != model input {self.input_dim}")
        return self._forward(X)[0].reshape(len(X), self.k, N_METRICS)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """``(n, k, 6)`` predicted sub-scores in (0, 1)."""
        return _sigmoid(self.logits(X))

    def loss_and_grad(self, X: np.ndarray, Y: np.ndarray, weight: float = 1.0) -> tuple[float, np.ndarray]:
        """Weighted BCE summed over entries and metrics, averaged over the batch.

        Computed from logits, so it stays finite for saturated outputs.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Y = np.asarray(Y, dtype=np.float64).reshape(len(X), -1)
        z, acts = self._forward(X)
        n = len(X)
        loss = float(np.sum(np.logaddexp(0.0, z) - Y * z)) / n * weight
        delta = (_sigmoid(z) - Y) * (weight / n)
        grads = []
        layers = self.layers()
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            grads.append((acts[i].T @ delta, delta.sum(axis=0)))
            if i > 0:
                delta = (delta @ W.T) * (1.0 - acts[i] ** 2)
        flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
        return loss, flat

    def copy(self) -> ScoreHeadModel:
        return ScoreHeadModel(self.sizes, self.params.copy())


def bce_loss(predicted: np.ndarray, target: np.ndarray) -> float:
    """Summed binary cross-entropy with predictions clamped to ``[1e-7, 1 - 1e-7]``."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DistillError(f"shape mismatch {p.shape} vs {t.shape}")
    p = np.clip(p, CLAMP, 1.0 - CLAMP)
    return float(-np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p)))


def finite_difference_check(
    model: ScoreHeadModel, sample: tuple[np.ndarray, np.ndarray], epsilon: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, 1)``, so
    near-zero gradients are compared absolutely.
    """
    if not 0 < epsilon <= 1e-3:
        raise DistillError("epsilon must lie in (0, 1e-3]")
    X, Y = sample
    _, analytic = model.loss_and_grad(X, Y)
    probe = model.copy()
    numeric = np.empty_like(analytic)
    for i in range(len(probe.params)):
        orig = probe.params[i]
        probe.params[i] = orig + epsilon
        up, _ = probe.loss_and_grad(X, Y)
        probe.params[i] = orig - epsilon
        down, _ = probe.loss_and_grad(X, Y)
        probe.params[i] = orig
        numeric[i] = (up - down) / (2.0 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- score tables ----------------------------------------------------------------


@dataclass
class ScoreTable:
    k: int
    rows: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        for sid, r in self.rows.items():
            r = np.asarray(r, dtype=np.float64)
            if r.shape != (self.k, N_METRICS):
                raise DistillError(f"{sid}: expected a {self.k}x{N_METRICS} score matrix, got {r.shape}")
            if np.any((r < 0) | (r > 1)) or not np.all(np.isfinite(r)):
                raise DistillError(f"{sid}: scores must lie in [0, 1]")
            self.rows[sid] = r

    def to_dict(self) -> dict[str, Any]:
        scenarios = {}
        for sid in sorted(self.rows):
            r = self.rows[sid]
            pdm = pdm_score_array(r)
            scenarios[sid] = {
                "scores": r.tolist(),
                "best_entry": int(np.argmax(pdm)),
                "best_pdm": float(pdm.max()),
                "collision_free_entries": int(np.sum(r[:, 0] == 1.0)),
            }
        return {"k": self.k, "metrics": list(METRICS), "scenarios": scenarios}

    @classmethod
    def from_dict(cls, d: Any) -> ScoreTable:
        try:
            k = int(d["k"])
            rows = {sid: np.asarray(v["scores"], dtype=np.float64) for sid, v in d["scenarios"].items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioParseError(f"bad score table: {exc!r}") from exc
        return cls(k, rows)


def build_score_table(dataset: Dataset, vocab: TrajectoryVocabulary, sim_cfg: SimConfig = SimConfig()) -> ScoreTable:
    rows = {}
    for sid in sorted(dataset.scenarios):
        try:
            rows[sid] = score_vocabulary_batch(dataset.scenarios[sid], vocab, sim_cfg).scores
        except ValueError as exc:
            raise DistillError(f"scenario {sid}: {exc}") from exc
    return ScoreTable(vocab.k, rows)


def save_score_table(t: ScoreTable, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps(t.to_dict()))


def load_score_table(path: str | os.PathLike) -> ScoreTable:
    return ScoreTable.from_dict(load_json(path))


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class MixConfig:
    p_r: float = 10.0 / 11.0
    w_r: float = 1.0
    w_c: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_r <= 1.0:
            raise ValueError("p_r must lie in [0, 1]")
        if self.w_r < 0 or self.w_c < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def p_c(self) -> float:
        return 1.0 - self.p_r

    @classmethod
    def from_ratio(cls, ratio: str | tuple[float, float], w_r: float = 1.0, w_c: float = 1.0) -> MixConfig:
        """``"10:1"`` means ten regular batches per collision batch on average."""
        if isinstance(ratio, str):
            try:
                a, b = (float(x) for x in ratio.split(":"))
            except ValueError as exc:
                raise ValueError(f"ratio must look like 'R:C', got {ratio!r}") from exc
        else:
            a, b = ratio
        if a < 0 or b < 0 or a + b == 0:
            raise ValueError(f"bad ratio {ratio!r}")
        return cls(a / (a + b), w_r, w_c)


@dataclass
class TrainingSet:
    ids: list[str]
    features: np.ndarray  # (n, D)
    targets: np.ndarray  # (n, k, 6)

    def __len__(self) -> int:
        return len(self.ids)


def training_set(dataset: Dataset, table: ScoreTable, ids: Sequence[str] | None = None) -> TrainingSet:
    ids = sorted(dataset.scenarios) if ids is None else list(ids)
    missing = [i for i in ids if i not in table.rows]
    if missing:
        raise DistillError(f"score table lacks scenarios {missing[:5]}")
    feats = np.stack([scene_features(dataset.scenarios[i]) for i in ids]) if ids else np.zeros((0, FEATURE_DIM))
    targets = np.stack([table.rows[i] for i in ids]) if ids else np.zeros((0, table.k, N_METRICS))
    return TrainingSet(ids, feats, targets)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 2e-4
    batch_size: int = 32
    hidden: tuple[int, ...] = (64, 64)
    optimizer: str = "adam"  # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("steps >= 0, batch_size >= 1 and lr > 0 required")


@dataclass
class TrainResult:
    model: ScoreHeadModel
    log: list[tuple[int, str, float]] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row[2] for row in self.log])

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "source", "loss"])
        for step, source, loss in self.log:
            w.writerow([step, source, repr(loss)])
        return buf.getvalue()


def train(
    regular: TrainingSet,
    collision: TrainingSet | None,
    mix: MixConfig,
    cfg: TrainConfig = TrainConfig(),
    model: ScoreHeadModel | None = None,
) -> TrainResult:
    """Mini-batch training with per-step source mixing.

    Each step draws ``r`` uniform in [0, 1); a regular batch with loss weight
    ``w_r`` is used when ``r < p_r``, otherwise a collision batch weighted by
    ``w_c``. Batches are drawn without replacement within the chosen set.
    """
    sources = {"R": regular, "C": collision}
    if len(regular) == 0 and mix.p_r > 0:
        raise DistillError("regular training set is empty")
    if (collision is None or len(collision) == 0) and mix.p_r < 1:
        raise DistillError("collision training set is empty")
    ref = regular if len(regular) else collision
    k = ref.targets.shape[1]
    if model is None:
        model = ScoreHeadModel.init(ref.features.shape[1], k, cfg.hidden, cfg.seed)
    else:
        model = model.copy()
    if model.k != k or model.input_dim != ref.features.shape[1]:
        raise DistillError("model dimensions do not match the training data")

    mix_rng = make_rng(cfg.seed, "mix")
    batch_rng = make_rng(cfg.seed, "batches")
    m = np.zeros_like(model.params)
    v = np.zeros_like(model.params)
    log = []
    for step in range(1, cfg.steps + 1):
        r = mix_rng.random()
        name, weight = ("R", mix.w_r) if r < mix.p_r else ("C", mix.w_c)
        data = sources[name]
        size = min(cfg.batch_size, len(data))
        idx = batch_rng.choice(len(data), size=size, replace=False)
        loss, g = model.loss_and_grad(data.features[idx], data.targets[idx], weight)
        if not math.isfinite(loss):
            raise TrainingDiverged(step)
        if cfg.optimizer == "sgd":
            model.params -= cfg.lr * g
        else:
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1**step)
            v_hat = v / (1.0 - cfg.beta2**step)
            model.params -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        log.append((step, name, loss))
    return TrainResult(model, log)


# -- inference -----------------------------------------------------------------


def select_entry(predicted: np.ndarray) -> int:
    """Index of the highest predicted PDM score; the lowest index wins ties."""
    return int(np.argmax(pdm_score_array(predicted)))


def plan(scenario: Scenario, model: ScoreHeadModel, vocab: TrajectoryVocabulary) -> tuple[EgoTrajectory, ScoreVector, int]:
    if model.k != vocab.k:
        raise DistillError(f"model predicts {model.k} entries but the vocabulary has {vocab.k}")
    pred = model.predict(scene_features(scenario))[0]
    i = select_entry(pred)
    return vocab.entries[i], ScoreVector.from_array(pred[i]), i


def evaluate_planner(
    model: ScoreHeadModel,
    dataset: Dataset,
    vocab: TrajectoryVocabulary,
    table: ScoreTable | None = None,
    sim_cfg: SimConfig = SimConfig(),
) -> tuple[dict[str, float], dict[str, int]]:
    """Closed-loop score of the planner's choice on every scenario.

    Returns the corpus summary and the chosen entry per scenario. A score table
    for the same vocabulary short-cuts re-simulation.
    """
    if model.k != vocab.k:
        raise DistillError(f"model predicts {model.k} entries but the vocabulary has {vocab.k}")
    ids = sorted(dataset.scenarios)
    if not ids:
        raise DistillError("empty evaluation set")
    feats = np.stack([scene_features(dataset.scenarios[i]) for i in ids])
    pred = model.predict(feats)
    vectors, chosen = [], {}
    for sid, p in zip(ids, pred):
        i = select_entry(p)
        chosen[sid] = i
        if table is not None and sid in table.rows:
            row = table.rows[sid][i]
        else:
            row = score_vocabulary_batch(dataset.scenarios[sid], vocab, sim_cfg).scores[i]
        vectors.append(ScoreVector.from_array(row))
    return summarize(vectors), chosen


# -- persistence ---------------------------------------------------------------


def model_to_dict(model: ScoreHeadModel, meta: dict[str, Any] | None = None) -> dict[str, Any]:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "sizes": list(model.sizes),
        "feature_dim": model.input_dim,
        "k": model.k,
        "meta": meta or {},
        "params": model.params.tolist(),
    }


def model_from_dict(d: Any) -> ScoreHeadModel:
    try:
        if d["format"] != CHECKPOINT_FORMAT:
            raise DistillError(f"not a score-head checkpoint: {d['format']!r}")
        if int(d["version"]) != CHECKPOINT_VERSION:
            raise DistillError(f"unsupported checkpoint version {d['version']}")
        return ScoreHeadModel(tuple(d["sizes"]), np.asarray(d["params"], dtype=np.float64))
    except (KeyError, TypeError) as exc:
        raise ScenarioParseError(f"bad checkpoint: {exc!r}") from exc


def save_model(model: ScoreHeadModel, path: str | os.PathLike, meta: dict[str, Any] | None = None) -> None:
    atomic_write_text(path, dumps(model_to_dict(model, meta)))


def load_model(path: str | os.PathLike) -> ScoreHeadModel:
    return model_from_dict(load_json(path))
