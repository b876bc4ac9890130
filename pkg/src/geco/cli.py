"""geco command-line entry point.

Subcommands: train-base, collect, adapt, eval, continual, efficiency,
cross-transfer, feat. Every command takes --config/--seed/--out/--method
plus repeatable --set key=value overrides; flags win over file keys.
Exit codes: 0 success, 2 config error, 3 collection failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import (
    ExperimentConfig,
    METHOD_DIRECT,
    apply_overrides,
    dump_config,
    load_config,
    save_config,
)
from .envsuite import DOMAIN_REAL, DOMAIN_SIM, make_task, save_trajectories, load_trajectories
from .errors import CollectionFailureError, ConfigError, FileFormatError, GecoError
from .geomfeat import geometric_features
from .geomoe import GeoMoeModule, load_moe, save_moe, write_gate_records
from .geoper import save_buffer
from .metrics import format_matrix_table, success_rate
from .pipeline import (
    BasePolicyCache,
    base_act_fn,
    collect_for_task,
    moe_act_fn,
    run_continual,
    run_cross_transfer,
    run_efficiency,
    stream_seed,
    task_key,
    train_base_for_task,
)
from .pointcloud import knn_groups, load_cloud
from .policy import load_policy, save_policy
from . import reports

log = logging.getLogger("geco")

_STREAM_EVAL = 3


def build_parser():
    parser = argparse.ArgumentParser(prog="geco",
                                     description="geometry-aware continual adaptation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="config file (key = value)")
        p.add_argument("--seed", type=int, default=None, help="override experiment seed")
        p.add_argument("--out", type=Path, default=Path("runs/default"), help="output dir")
        p.add_argument("--method", default=None, help="override adaptation method")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override any config key")
        return p

    common(sub.add_parser("train-base", help="train and checkpoint base policies"))
    common(sub.add_parser("collect", help="collect oracle-corrected trajectories")) \
        .add_argument("--task", default=None)
    common(sub.add_parser("adapt", help="adapt the residual on collected data")) \
        .add_argument("--task", default=None)
    p_eval = common(sub.add_parser("eval", help="evaluate checkpoints on real variants"))
    p_eval.add_argument("--task", default=None)
    common(sub.add_parser("continual", help="run the full continual pipeline"))
    p_eff = common(sub.add_parser("efficiency", help="from-scratch vs from-continued"))
    p_eff.add_argument("--budgets", default="4,8,12",
                       help="comma-separated correction budgets")
    p_x = common(sub.add_parser("cross-transfer", help="transfer between task pairs"))
    p_x.add_argument("--source", required=True,
                     help="source task id, or comma-separated list for paired rows")
    p_x.add_argument("--target", required=True)
    p_x.add_argument("--budget", type=int, default=2)
    p_feat = common(sub.add_parser("feat", help="dump per-group geometric features"))
    p_feat.add_argument("cloud", type=Path, help="point cloud file (x y z lines)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.method is not None:
        overrides.append(f"method={args.method}")
    return apply_overrides(cfg, overrides) if overrides else cfg.validate()


class OutputLock:
    """One experiment process at a time per output directory."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".geco.lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OSError(f"output dir is locked by another run: {self.path}")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _setup_logging(out_dir: Path):
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(out_dir / "run.log")
    fh.setFormatter(fmt)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(fh)
    root.addHandler(sh)


def _task_or_first(cfg, args):
    task = getattr(args, "task", None) or cfg.tasks[0]
    if task not in cfg.tasks:
        raise ConfigError(f"task {task!r} is not in the configured sequence {cfg.tasks}")
    return task


def cmd_train_base(cfg, args, out):
    for task in cfg.tasks:
        policy, pairs = train_base_for_task(cfg, task)
        save_policy(out / f"base_{task}.ckpt", policy)
        print(f"train-base {task}: {len(pairs)} pairs, final loss "
              f"{policy.loss_history[-1]:.5f} -> base_{task}.ckpt")
    return 0


def cmd_collect(cfg, args, out):
    task = _task_or_first(cfg, args)
    policy = load_policy(out / f"base_{task}.ckpt",
                         cfg.policy_config(stream_seed(cfg.seed, task_key(task), 0)))
    moe_path = out / "moe.ckpt"
    if moe_path.exists():
        act = moe_act_fn(policy, load_moe(moe_path, cfg.moe_config(cfg.seed + 7919)))
    else:
        act = base_act_fn(policy)
    spec = make_task(task, DOMAIN_REAL)
    from .envsuite import collect_corrections
    trajs = collect_corrections(act, spec, cfg.correction_trajectories,
                                cfg.intervention_delta,
                                stream_seed(cfg.seed, task_key(task), 1),
                                cfg.point_budget, cfg.prune_window)
    save_trajectories(out / f"corrections_{task}.jsonl", trajs)
    n_steps = sum(len(t.steps) for t in trajs)
    print(f"collect {task}: {len(trajs)} trajectories, {n_steps} steps "
          f"-> corrections_{task}.jsonl")
    return 0


def cmd_adapt(cfg, args, out):
    from .envsuite import trajectory_to_pairs
    from .geomoe import prepare_sample  # noqa: F401  (re-exported surface)
    from .geoper import UnifiedBuffer, UtilizationState
    from .pipeline import adapt_task_moe

    task = _task_or_first(cfg, args)
    policy = load_policy(out / f"base_{task}.ckpt",
                         cfg.policy_config(stream_seed(cfg.seed, task_key(task), 0)))
    trajs = load_trajectories(out / f"corrections_{task}.jsonl")
    corr_pairs = [p for t in trajs for p in trajectory_to_pairs(t, cfg.action_dim)]
    moe_path = out / "moe.ckpt"
    if moe_path.exists():
        moe = load_moe(moe_path, cfg.moe_config(cfg.seed + 7919))
    else:
        moe = GeoMoeModule(cfg.moe_config(cfg.seed + 7919))
    outcome = adapt_task_moe(cfg, cfg.method, moe, {task: policy}, task, 0,
                             corr_pairs, [], UnifiedBuffer(),
                             UtilizationState(cfg.ema_coeff, cfg.per_eps, cfg.per_exponent),
                             {})
    save_moe(moe_path, moe)
    if outcome.last_records:
        write_gate_records(out / f"gate_records_{task}.csv", outcome.last_records)
    print(f"adapt {task}: {len(corr_pairs)} pairs, final loss "
          f"{outcome.loss_history[-1]:.5f} -> moe.ckpt")
    return 0


def cmd_eval(cfg, args, out):
    task = _task_or_first(cfg, args)
    policy = load_policy(out / f"base_{task}.ckpt",
                         cfg.policy_config(stream_seed(cfg.seed, task_key(task), 0)))
    moe_path = out / "moe.ckpt"
    if cfg.method != METHOD_DIRECT and moe_path.exists():
        act = moe_act_fn(policy, load_moe(moe_path, cfg.moe_config(cfg.seed + 7919)))
    else:
        act = base_act_fn(policy)
    sr = success_rate(act, make_task(task, DOMAIN_REAL), cfg.trials,
                      stream_seed(cfg.seed, task_key(task), _STREAM_EVAL),
                      cfg.point_budget)
    with open(out / f"eval_{task}.csv", "w") as f:
        f.write("task,trials,success_rate\n")
        f.write(f"{task},{cfg.trials},{sr:.6f}\n")
    print(f"eval {task}: SR = {sr:.3f} over {cfg.trials} trials")
    return 0


def cmd_continual(cfg, args, out):
    result = run_continual(cfg, BasePolicyCache())
    reports.write_matrix_report(out, result.matrix)
    with open(out / "report.txt", "w") as f:
        f.write(f"method: {cfg.method}\nseed: {cfg.seed}\n\n")
        f.write(format_matrix_table(result.matrix) + "\n")
    for task, policy in result.policies.items():
        save_policy(out / f"base_{task}.ckpt", policy)
    if result.moe is not None and cfg.method != METHOD_DIRECT:
        save_moe(out / "moe.ckpt", result.moe)
    all_records = []
    for task, records in (result.gate_records or {}).items():
        if records:
            write_gate_records(out / f"gate_records_{task}.csv", records)
            all_records.extend(records)
    if all_records:
        reports.plot_routing(out / "routing.png", all_records)
    if result.buffer is not None and len(result.buffer):
        save_buffer(out / "replay_buffer.jsonl", result.buffer)
    print(format_matrix_table(result.matrix))
    print(f"\nartifacts written to {out}")
    return 0


def cmd_efficiency(cfg, args, out):
    budgets = [int(b) for b in args.budgets.split(",") if b.strip()]
    rows = run_efficiency(cfg, budgets, BasePolicyCache())
    reports.write_efficiency_report(out, rows)
    for r in rows:
        print(f"budget {r.budget:3d}  {r.variant:>14}  SR = {r.success:.3f}")
    return 0


def cmd_cross_transfer(cfg, args, out):
    sources = [s.strip() for s in args.source.split(",") if s.strip()]
    cache = BasePolicyCache()
    rows = []
    for source in sources:
        sr = run_cross_transfer(cfg, source, args.target, args.budget, cache)
        rows.append((source, args.target, args.budget, sr))
        print(f"cross-transfer {source} -> {args.target} (budget {args.budget}): "
              f"SR = {sr:.3f}")
    reports.write_cross_transfer_report(out, rows)
    return 0


def cmd_feat(cfg, args, out):
    cloud = load_cloud(args.cloud)
    groups = knn_groups(cloud, cfg.group_centers, cfg.group_k, cfg.group_seed)
    feats = [geometric_features(g) for g in groups]
    path = out / "features.csv"
    reports.write_feature_csv(path, feats)
    print(f"feat: {len(groups)} groups -> {path}")
    return 0


_COMMANDS = {
    "train-base": cmd_train_base,
    "collect": cmd_collect,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "continual": cmd_continual,
    "efficiency": cmd_efficiency,
    "cross-transfer": cmd_cross_transfer,
    "feat": cmd_feat,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with OutputLock(out):
            _setup_logging(out)
            save_config(out / "config_used.ini", cfg)
            return _COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CollectionFailureError as exc:
        print(f"collection failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, FileFormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4
    except GecoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
