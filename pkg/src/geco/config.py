"""Experiment configuration: one flat record covering every stage, with a
sectioned key = value file format that round-trips losslessly.

Every hyperparameter default is either sourced from the training recipe
(learning rates 3e-4 and 1e-3, 10 denoise steps, chunk size 8, sampling
exponent 0.6, smoothing 1e-6, EMA 0.4, 90/10 and 95/5 data mixes) or a
recorded design decision. Command-line flags override file keys.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .envsuite import ALL_TASKS
from .errors import ConfigError
from .geomoe import MoeConfig
from .policy import CHUNK_LEN, PolicyConfig

METHOD_DIRECT = "direct_deploy"
METHOD_NAIVE = "naive_finetune"
METHOD_ACTION_RESIDUAL = "action_residual"
METHOD_DENSE = "obs_residual_dense"
METHOD_MOE_PER = "geomoe_per"
METHOD_FULL = "geomoe_geoper"

METHODS = (METHOD_DIRECT, METHOD_NAIVE, METHOD_ACTION_RESIDUAL,
           METHOD_DENSE, METHOD_MOE_PER, METHOD_FULL)

_SECTIONS = {
    "experiment": ("tasks", "method", "seed", "trials"),
    "pointcloud": ("point_budget", "group_centers", "group_k", "group_seed"),
    "policy": ("proprio_width", "action_dim", "encoder_widths", "feature_width",
               "residual_width", "head_widths", "denoise_steps", "chunk_len",
               "beta_start", "beta_end", "bc_learning_rate", "bc_steps", "bc_batch"),
    "geomoe": ("experts", "embed_widths", "embed_width", "gate_widths",
               "expert_widths", "balance_weight", "adapt_lr", "adapt_steps",
               "adapt_batch"),
    "geoper": ("per_exponent", "per_eps", "ema_coeff", "replay_frac",
               "correction_frac"),
    "collection": ("sim_trajectories", "correction_trajectories",
                   "intervention_delta", "prune_window"),
}


@dataclass
class ExperimentConfig:
    # experiment
    tasks: tuple = ("cuboid_reach", "cuboid_stack", "curved_reach")
    method: str = METHOD_FULL
    seed: int = 0
    trials: int = 30
    # pointcloud
    point_budget: int = 256
    group_centers: int = 12
    group_k: int = 8
    group_seed: int = 0
    # policy
    proprio_width: int = 4
    action_dim: int = 4
    encoder_widths: tuple = (32, 32)
    feature_width: int = 32
    residual_width: int = 16
    head_widths: tuple = (64, 64)
    denoise_steps: int = 10
    chunk_len: int = CHUNK_LEN
    beta_start: float = 1e-4
    beta_end: float = 0.2
    bc_learning_rate: float = 3e-4
    bc_steps: int = 2000
    bc_batch: int = 16
    # geomoe
    experts: int = 3
    embed_widths: tuple = (16,)
    embed_width: int = 16
    gate_widths: tuple = (16,)
    expert_widths: tuple = (32,)
    balance_weight: float = 0.01
    adapt_lr: float = 1e-3
    adapt_steps: int = 500
    adapt_batch: int = 16
    # geoper
    per_exponent: float = 0.6
    per_eps: float = 1e-6
    ema_coeff: float = 0.4
    replay_frac: float = 0.1
    correction_frac: float = 0.95
    # collection
    sim_trajectories: int = 200
    correction_trajectories: int = 12
    intervention_delta: float = 0.15
    prune_window: int = 2

    def validate(self):
        if not self.tasks:
            raise ConfigError("task sequence is empty")
        for t in self.tasks:
            if t not in ALL_TASKS:
                raise ConfigError(f"unknown task id {t!r}; known: {', '.join(ALL_TASKS)}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; known: {', '.join(METHODS)}")
        if self.chunk_len != CHUNK_LEN:
            raise ConfigError(f"chunk_len is fixed at {CHUNK_LEN}")
        if self.point_budget < self.group_k:
            raise ConfigError("point budget smaller than group size")
        return self

    def policy_config(self, seed) -> PolicyConfig:
        return PolicyConfig(
            point_budget=self.point_budget,
            proprio_width=self.proprio_width,
            action_dim=self.action_dim,
            encoder_widths=tuple(self.encoder_widths),
            feature_width=self.feature_width,
            residual_width=self.residual_width,
            head_widths=tuple(self.head_widths),
            denoise_steps=self.denoise_steps,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            bc_learning_rate=self.bc_learning_rate,
            bc_steps=self.bc_steps,
            bc_batch=self.bc_batch,
            seed=seed,
        )

    def moe_config(self, seed) -> MoeConfig:
        return MoeConfig(
            experts=self.experts,
            group_centers=self.group_centers,
            group_k=self.group_k,
            group_seed=self.group_seed,
            embed_widths=tuple(self.embed_widths),
            embed_width=self.embed_width,
            gate_widths=tuple(self.gate_widths),
            expert_widths=tuple(self.expert_widths),
            residual_width=self.residual_width,
            balance_weight=self.balance_weight,
            adapt_lr=self.adapt_lr,
            seed=seed,
        )


def desk_config(**overrides) -> ExperimentConfig:
    """Scaled-down preset sized for minutes-long end-to-end runs."""
    base = dict(
        point_budget=128,
        sim_trajectories=30,
        bc_steps=900,
        adapt_steps=400,
        encoder_widths=(32, 32),
        head_widths=(64, 64),
        trials=30,
    )
    base.update(overrides)
    return ExperimentConfig(**base).validate()


def _fmt(value):
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _coerce(field_obj, raw):
    raw = raw.strip()
    kind = field_obj.type
    if kind == "tuple":
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if field_obj.name == "tasks":
            return tuple(parts)
        return tuple(int(p) for p in parts)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, names in _SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            lines.append(f"{name} = {_fmt(getattr(cfg, name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(path, cfg: ExperimentConfig):
    with open(path, "w") as f:
        f.write(dump_config(cfg))


def _fields_by_name():
    return {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_file(io.StringIO(text))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    fields = _fields_by_name()
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for name, raw in parser.items(section):
            if name not in fields or name not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {name!r} in section [{section}]")
            values[name] = _coerce(fields[name], raw)
    return ExperimentConfig(**values).validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return parse_config(f.read())


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """Apply key=value overrides; keys may be bare or section.key."""
    fields = _fields_by_name()
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
            if section not in _SECTIONS or key not in _SECTIONS[section]:
                raise ConfigError(f"unknown override key {section}.{key}")
        if key not in fields:
            raise ConfigError(f"unknown override key {key!r}")
        updates[key] = _coerce(fields[key], raw)
    return dataclasses.replace(cfg, **updates).validate()
