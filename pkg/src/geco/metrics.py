"""Continual-learning evaluation: success rates over seeded episode blocks
and normalized negative backward transfer over the task-by-task matrix.

The matrix entry C[t, k] is the success rate on task k evaluated after
training through task t (0-based); only k <= t is populated in a run.
Forgetting is reported sign-flipped so that higher means more forgetting
and 0 means none; undefined cells render as "/".
"""

from __future__ import annotations

import numpy as np

from .envsuite import Env, rollout_policy
from .errors import ShapeError, UndefinedMetricError


class EvalMatrix:
    def __init__(self, task_ids, trials=30):
        self.task_ids = list(task_ids)
        self.trials = trials
        k = len(self.task_ids)
        self.values = np.full((k, k), np.nan)

    @property
    def num_tasks(self):
        return len(self.task_ids)

    def set(self, after_task, on_task, rate):
        if not 0.0 <= rate <= 1.0:
            raise ShapeError(f"success rate {rate} outside [0, 1]")
        self.values[after_task, on_task] = rate

    def final_row(self):
        return self.values[self.num_tasks - 1]


def success_rate(act_fn, spec, trials, seed, point_budget=256) -> float:
    """Fraction of successful episodes over seeds seed..seed+trials-1."""
    if trials < 1:
        raise ShapeError("trials must be >= 1")
    env = Env(spec, seed, point_budget)
    wins = 0
    for i in range(trials):
        wins += bool(rollout_policy(env, act_fn, seed + i))
    return wins / trials


def n_nbt(matrix: EvalMatrix, k: int) -> float:
    """Mean relative success-rate drop on task k after later training
    stages, negated so forgetting is positive. Requires k before the last
    task and a nonzero diagonal entry."""
    kk = matrix.num_tasks
    if not 0 <= k < kk - 1:
        raise UndefinedMetricError(f"task index {k} has no later stages")
    ref = matrix.values[k, k]
    if not np.isfinite(ref) or ref <= 0.0:
        raise UndefinedMetricError(f"diagonal entry for task {k} is zero or unset")
    drops = [(matrix.values[t, k] - ref) / ref for t in range(k + 1, kk)]
    return float(-np.mean(drops))


def avg_metrics(matrix: EvalMatrix):
    """(average final-stage SR, average defined N-NBT or None)."""
    avg_sr = float(np.mean(matrix.final_row()))
    vals = []
    for k in range(matrix.num_tasks - 1):
        try:
            vals.append(n_nbt(matrix, k))
        except UndefinedMetricError:
            continue
    return avg_sr, (float(np.mean(vals)) if vals else None)


def _cell(v):
    return f"{v:.6f}" if np.isfinite(v) else "/"


def matrix_csv_lines(matrix: EvalMatrix):
    """CSV rows: header, one row per training stage, per-task N-NBT, and the
    avg_sr,avg_nnbt summary block."""
    lines = ["after_task," + ",".join(matrix.task_ids)]
    for t in range(matrix.num_tasks):
        lines.append(matrix.task_ids[t] + "," +
                     ",".join(_cell(v) for v in matrix.values[t]))
    nnbt_cells = []
    for k in range(matrix.num_tasks):
        try:
            nnbt_cells.append(f"{n_nbt(matrix, k):.6f}")
        except UndefinedMetricError:
            nnbt_cells.append("/")
    lines.append("n_nbt," + ",".join(nnbt_cells))
    avg_sr, avg_nnbt = avg_metrics(matrix)
    lines.append("avg_sr,avg_nnbt")
    lines.append(f"{avg_sr:.6f}," + ("/" if avg_nnbt is None else f"{avg_nnbt:.6f}"))
    return lines


def write_matrix_csv(path, matrix: EvalMatrix):
    with open(path, "w") as f:
        f.write("\n".join(matrix_csv_lines(matrix)) + "\n")


def format_matrix_table(matrix: EvalMatrix) -> str:
    """Aligned text table of the evaluation matrix plus summary."""
    width = max(12, max(len(t) for t in matrix.task_ids) + 2)
    header = "after / on".ljust(width) + "".join(t.rjust(width) for t in matrix.task_ids)
    rows = [header]
    for t in range(matrix.num_tasks):
        cells = "".join(_cell(v).rjust(width) for v in matrix.values[t])
        rows.append(matrix.task_ids[t].ljust(width) + cells)
    avg_sr, avg_nnbt = avg_metrics(matrix)
    rows.append("")
    rows.append(f"avg_sr = {avg_sr:.6f}")
    rows.append("avg_nnbt = " + ("/" if avg_nnbt is None else f"{avg_nnbt:.6f}"))
    return "\n".join(rows)
