"""Geometry-expert-guided prioritized experience replay.

A unified cross-task buffer stores each sample with the expert activation
vector it produced; priorities are the activation-weighted reciprocal of
the current task's expert utilization, so samples that exercised idle
experts are replayed first. Sampling is exponentiated-proportional with a
smoothing term, with replacement, and fully seeded.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, NotFoundError, ShapeError
from .pointcloud import PointCloud
from .policy import ActionChunk, Observation

log = logging.getLogger(__name__)

SOURCE_SIM = "sim_expert"
SOURCE_CORRECTION = "human_correction"


@dataclass
class ReplaySample:
    obs: Observation
    chunk: ActionChunk
    source: str
    task_id: str
    activation: np.ndarray = None
    priority: float = 1.0
    sample_id: int = -1


@dataclass
class TaskData:
    """Current-task training pools, kept separate for the source mix."""

    task_id: str
    corrections: list
    sim_expert: list


@dataclass
class UtilizationState:
    """EMA of per-expert utilization measured on current-task batches."""

    ema_coeff: float = 0.4
    eps: float = 1e-6
    exponent: float = 0.6
    u: np.ndarray = None


class UnifiedBuffer:
    """Union of the per-task mixed buffers from all completed tasks."""

    def __init__(self):
        self.samples = []
        self._by_task = {}
        self._by_id = {}

    def __len__(self):
        return len(self.samples)

    def add(self, sample: ReplaySample) -> int:
        sample.sample_id = len(self.samples)
        self.samples.append(sample)
        self._by_task.setdefault(sample.task_id, []).append(sample)
        self._by_id[sample.sample_id] = sample
        return sample.sample_id

    def task_ids(self):
        return list(self._by_task)

    def get(self, sample_id) -> ReplaySample:
        if sample_id not in self._by_id:
            raise NotFoundError(f"no replay sample with id {sample_id}")
        return self._by_id[sample_id]


def record_activation(buffer: UnifiedBuffer, sample_id, gate_record) -> ReplaySample:
    """Store the mean per-group gate vector as the sample's activation."""
    sample = buffer.get(sample_id)
    w = np.asarray(gate_record.mean_activation, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < -1e-12):
        raise ShapeError("activation must be a probability vector")
    sample.activation = w
    return sample


def update_utilization(state: UtilizationState, records) -> np.ndarray:
    """Fold a batch of gate records into the utilization EMA.

    The batch mean is taken over every routed group; the first call
    initializes the EMA directly. An empty batch is a no-op.
    """
    rows = [r.weights for r in records if r.weights.shape[0] > 0]
    if not rows:
        return state.u
    ubar = np.concatenate(rows, axis=0).mean(axis=0)
    if state.u is None:
        state.u = ubar
    else:
        state.u = state.ema_coeff * ubar + (1.0 - state.ema_coeff) * state.u
    return state.u


def priority_of(activation, state: UtilizationState) -> float:
    """Activation-weighted reciprocal utilization."""
    return float(np.sum(activation / (state.u + state.eps)))


def compute_priorities(buffer: UnifiedBuffer, state: UtilizationState):
    """Refresh every stored sample's priority from the current utilization."""
    if state.u is None:
        raise ShapeError("utilization must be initialized before prioritization")
    for s in buffer.samples:
        if s.activation is None:
            raise ShapeError(f"sample {s.sample_id} has no stored activation")
        s.priority = priority_of(s.activation, state)
    return [s.priority for s in buffer.samples]


def sampling_distribution(buffer: UnifiedBuffer, state: UtilizationState) -> np.ndarray:
    """Normalized exponentiated priorities: (P_i + eps)^exponent, summed to 1."""
    if len(buffer) == 0:
        raise EmptyInputError("replay buffer is empty")
    p = np.array([s.priority for s in buffer.samples], dtype=np.float64)
    p = np.power(p + state.eps, state.exponent)
    return p / p.sum()


def sample_replay(buffer: UnifiedBuffer, state: UtilizationState, n, seed):
    """Draw n samples with replacement from the prioritized distribution."""
    probs = sampling_distribution(buffer, state)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(buffer), size=n, replace=True, p=probs)
    return [buffer.samples[i] for i in idx]


@dataclass
class TrainingMix:
    """Assembled batch plus the bookkeeping the trainer needs."""

    corrections: list
    sim_expert: list
    replay: list = field(default_factory=list)
    buffer_missing: bool = False

    @property
    def counts(self):
        return (len(self.corrections), len(self.sim_expert), len(self.replay))


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def _draw(pool, n, rng):
    if n <= 0 or not pool:
        return []
    if n <= len(pool):
        idx = rng.choice(len(pool), size=n, replace=False)
    else:
        idx = rng.choice(len(pool), size=n, replace=True)
    return [pool[i] for i in idx]


def build_training_mix(current: TaskData, buffer: UnifiedBuffer, state: UtilizationState,
                       batch_size, seed, replay_frac=0.1, correction_frac=0.95,
                       task_index=0) -> TrainingMix:
    """Compose one adaptation batch: replay share across tasks, then the
    correction/sim split within the current task.

    On the first task (empty buffer) the replay share folds into current
    data; an empty buffer on a later task degrades the same way with a
    warning. At least one replay item is drawn whenever the buffer has any.
    """
    if not current.corrections:
        raise EmptyInputError("current task has no correction data")
    rng = np.random.default_rng(seed)
    n_replay = 0
    buffer_missing = False
    if replay_frac > 0.0 and len(buffer) > 0:
        n_replay = max(1, _round_half_up(replay_frac * batch_size))
    elif replay_frac > 0.0 and task_index > 0:
        buffer_missing = True
        log.warning("replay requested for task %s but buffer is empty; using current data only",
                    current.task_id)
    n_current = batch_size - n_replay
    n_corr = _round_half_up(correction_frac * n_current)
    n_sim = n_current - n_corr
    if not current.sim_expert:
        n_corr, n_sim = n_current, 0
    mix = TrainingMix(
        corrections=_draw(current.corrections, n_corr, rng),
        sim_expert=_draw(current.sim_expert, n_sim, rng),
        buffer_missing=buffer_missing,
    )
    if n_replay:
        mix.replay = sample_replay(buffer, state, n_replay, seed + 1)
    return mix


def save_buffer(path, buffer: UnifiedBuffer):
    """Line-delimited JSON, one sample per line."""
    with open(path, "w") as f:
        for s in buffer.samples:
            rec = {
                "task_id": s.task_id,
                "source": s.source,
                "proprio": s.obs.proprio.tolist(),
                "points": s.obs.cloud.points.reshape(-1).tolist(),
                "action_chunk": s.chunk.flat.tolist(),
                "activation": None if s.activation is None else s.activation.tolist(),
                "priority": s.priority,
            }
            f.write(json.dumps(rec) + "\n")


def load_buffer(path) -> UnifiedBuffer:
    buffer = UnifiedBuffer()
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            pts = np.array(rec["points"], dtype=np.float64).reshape(-1, 3)
            obs = Observation(PointCloud(pts), np.array(rec["proprio"]))
            flat = np.array(rec["action_chunk"], dtype=np.float64)
            chunk = ActionChunk(flat.reshape(8, -1))
            sample = ReplaySample(
                obs=obs, chunk=chunk, source=rec["source"], task_id=rec["task_id"],
                activation=None if rec["activation"] is None else np.array(rec["activation"]),
                priority=float(rec["priority"]),
            )
            buffer.add(sample)
    return buffer
