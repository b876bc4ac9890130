"""Five-phase continual pipeline and the experiment protocols built on it:
per task, train the base policy in sim, deploy on the real variant,
collect oracle corrections, adapt the shared residual on the mixed data,
evaluate every seen task, then merge the task's data into the unified
replay buffer.

Method wiring
-------------
direct_deploy      no adaptation at all; rows repeat the deployment SR
naive_finetune     mixture residual, replay share forced to zero
action_residual    additive correction on the head output, frozen features
obs_residual_dense dense (single-network) observation residual + loss PER
geomoe_per         mixture residual + standard loss-prioritized replay
geomoe_geoper      mixture residual + utilization-guided replay (full)
"""

from __future__ import annotations

import copy
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import (
    METHOD_ACTION_RESIDUAL,
    METHOD_DENSE,
    METHOD_DIRECT,
    METHOD_FULL,
    METHOD_MOE_PER,
    METHOD_NAIVE,
    ExperimentConfig,
)
from .envsuite import (
    DOMAIN_REAL,
    DOMAIN_SIM,
    collect_corrections,
    collect_expert_dataset,
    make_task,
    trajectory_to_pairs,
)
from .errors import ConfigError
from .geomoe import (
    AdaptSample,
    GeoMoeModule,
    adapt_step,
    corrected_forward,
    moe_forward,
    prepare_sample,
)
from .geoper import (
    SOURCE_CORRECTION,
    SOURCE_SIM,
    ReplaySample,
    TaskData,
    UnifiedBuffer,
    UtilizationState,
    build_training_mix,
    compute_priorities,
    record_activation,
    update_utilization,
)
from .metrics import EvalMatrix, success_rate
from .policy import (
    ActionChunk,
    BasePolicy,
    diffusion_loss,
    encode,
    full_condition,
    parameter_digest,
    policy_action,
    sample_chunk,
    train_bc,
)
from .tinynn import Adam, Mlp

log = logging.getLogger(__name__)

_STREAM_COLLECT = 1
_STREAM_ADAPT = 2
_STREAM_EVAL = 3
_STREAM_MIX = 4


def stream_seed(base_seed: int, task_key: int, stream: int) -> int:
    """Deterministic, platform-independent seed derivation."""
    return ((base_seed + 1) * 1000003 + task_key * 10007 + stream * 101) % (2 ** 31)


def task_key(task_id: str) -> int:
    return zlib.crc32(task_id.encode("utf-8")) % 100000


class BasePolicyCache:
    """Memoizes deterministic base trainings within a process."""

    def __init__(self):
        self._store = {}

    def key(self, cfg: ExperimentConfig, task_id: str):
        return (task_id, cfg.seed, cfg.sim_trajectories, cfg.bc_steps,
                cfg.point_budget, cfg.encoder_widths, cfg.head_widths)

    def get_or_train(self, cfg, task_id):
        k = self.key(cfg, task_id)
        if k not in self._store:
            self._store[k] = train_base_for_task(cfg, task_id)
        return self._store[k]


def train_base_for_task(cfg: ExperimentConfig, task_id: str):
    """Scripted-expert dataset plus behavior cloning for one task.

    Returns (frozen policy, flattened sim (obs, chunk) pairs).
    """
    seed = stream_seed(cfg.seed, task_key(task_id), 0)
    spec = make_task(task_id, DOMAIN_SIM)
    log.info("train-base: task=%s seed=%d trajectories=%d", task_id, seed, cfg.sim_trajectories)
    trajs = collect_expert_dataset(spec, cfg.sim_trajectories, seed + 1, cfg.point_budget)
    pairs = [p for t in trajs for p in trajectory_to_pairs(t, cfg.action_dim)]
    policy = train_bc(pairs, cfg.policy_config(seed))
    log.info("train-base: task=%s final loss=%.5f", task_id, policy.loss_history[-1])
    return policy, pairs


def base_act_fn(policy: BasePolicy):
    return lambda obs, seed: policy_action(policy, obs, seed)


def moe_act_fn(policy: BasePolicy, moe: GeoMoeModule):
    return lambda obs, seed: corrected_forward(policy, moe, obs, seed)[0]


# -- action-residual baseline ------------------------------------------------

class ActionResidual:
    """Additive chunk correction computed from the frozen encoder feature."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        rng = np.random.default_rng(seed)
        self.chunk_size = cfg.chunk_len * cfg.action_dim
        self.net = Mlp([cfg.feature_width, 64, self.chunk_size], "relu", rng)

    def parameters(self):
        return self.net.params()


def action_residual_act_fn(policy: BasePolicy, resid: ActionResidual):
    def act(obs, seed):
        enc = encode(policy, obs)
        chunk = sample_chunk(policy.head, full_condition(policy, enc), seed)
        corrected = chunk.flat + resid.net.forward(enc)
        return ActionChunk(np.clip(corrected, -1.0, 1.0).reshape(chunk.actions.shape))
    return act


def adapt_action_residual(cfg, resid: ActionResidual, policy, pairs, rng):
    """Supervised one-step reconstruction plus the additive correction."""
    encs = np.stack([encode(policy, obs) for obs, _ in pairs])
    opt = Adam(resid.parameters(), cfg.adapt_lr)
    sched = policy.head.schedule
    n = len(pairs)
    for _ in range(cfg.adapt_steps):
        idx = rng.integers(0, n, size=cfg.adapt_batch)
        grads = None
        loss = 0.0
        for i in idx:
            obs, chunk = pairs[i]
            k = int(rng.integers(0, sched.steps))
            noise = rng.standard_normal(resid.chunk_size)
            ab = sched.alpha_bars[k]
            noisy = np.sqrt(ab) * chunk.flat + np.sqrt(1.0 - ab) * noise
            cond = full_condition(policy, encs[i])
            pred = policy.head.net.forward(policy.head.input_vector(noisy, k, cond))
            recon = (noisy - np.sqrt(1.0 - ab) * pred) / np.sqrt(ab)
            corr, cache = resid.net.forward_cached(encs[i])
            diff = recon + corr - chunk.flat
            loss += float(diff @ diff) / resid.chunk_size
            g, _ = resid.net.backward(cache, 2.0 * diff / (resid.chunk_size * len(idx)))
            grads = g if grads is None else [a + b for a, b in zip(grads, g)]
        opt.step(resid.parameters(), grads)
    return resid


# -- dense observation-residual baseline (no gate, no experts) ---------------

class DenseResidual:
    """Single-network group residual: same embeddings, no routing."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.embedder = Mlp([3, *cfg.embed_widths, cfg.embed_width], "relu", rng)
        self.net = Mlp([cfg.embed_width, *cfg.expert_widths, cfg.residual_width], "relu", rng)

    def parameters(self):
        return self.embedder.params() + self.net.params()

    def residual(self, members):
        n, k, _ = members.shape
        per_point = self.embedder.forward(members.reshape(n * k, 3)).reshape(n, k, -1)
        emb = per_point.max(axis=1)
        return self.net.forward(emb).max(axis=0)


def dense_act_fn(policy: BasePolicy, moe_grouper: GeoMoeModule, dense: DenseResidual):
    def act(obs, seed):
        groups = moe_grouper.groups_for(obs.cloud)
        members = np.stack([g.member_points for g in groups])
        res = dense.residual(members)
        cond = full_condition(policy, encode(policy, obs), res)
        return sample_chunk(policy.head, cond, seed)
    return act


def _dense_loss_and_grads(dense: DenseResidual, prepared, ks, noises):
    b = len(prepared)
    kk = prepared[0].members.shape[1]
    members = np.concatenate([s.members for s in prepared], axis=0)
    n_groups = members.shape[0]
    per_point, emb_cache = dense.embedder.forward_cached(members.reshape(n_groups * kk, 3))
    ew = per_point.shape[1]
    per_point = per_point.reshape(n_groups, kk, ew)
    emb_argmax = per_point.argmax(axis=1)
    emb = per_point.max(axis=1)
    out, net_cache = dense.net.forward_cached(emb)
    rw = out.shape[1]
    g = n_groups // b
    per_sample = out.reshape(b, g, rw)
    res_argmax = per_sample.argmax(axis=1)
    residuals = per_sample.max(axis=1)

    per_sample_mse = np.zeros(b)
    grad_res = np.zeros_like(residuals)
    by_policy = {}
    for i, s in enumerate(prepared):
        by_policy.setdefault(id(s.policy), []).append(i)
    for idx in by_policy.values():
        pol = prepared[idx[0]].policy
        head, sched = pol.head, pol.head.schedule
        sub = np.array(idx)
        chunks = np.stack([prepared[i].chunk_flat for i in sub])
        encs = np.stack([prepared[i].enc_feature for i in sub])
        ab = sched.alpha_bars[ks[sub]][:, None]
        noisy = np.sqrt(ab) * chunks + np.sqrt(1.0 - ab) * noises[sub]
        onehots = np.eye(sched.steps)[ks[sub]]
        head_in = np.concatenate([noisy, onehots, encs, residuals[sub]], axis=1)
        pred, cache = head.net.forward_cached(head_in)
        recon = (noisy - np.sqrt(1.0 - ab) * pred) / np.sqrt(ab)
        diff = recon - chunks
        n_comp = diff.shape[1]
        per_sample_mse[sub] = np.sum(diff * diff, axis=1) / n_comp
        grad_pred = (2.0 / (n_comp * b)) * diff * (-np.sqrt(1.0 - ab) / np.sqrt(ab))
        _, grad_in = head.net.backward(cache, grad_pred)
        f0 = head.chunk_size + sched.steps + pol.cfg.feature_width
        grad_res[sub] = grad_in[:, f0:f0 + rw]

    grad_out = np.zeros((b, g, rw))
    grad_out[np.arange(b)[:, None], res_argmax, np.arange(rw)[None, :]] = grad_res
    net_grads, grad_emb = dense.net.backward(net_cache, grad_out.reshape(n_groups, rw))
    grad_pp = np.zeros((n_groups, kk, ew))
    grad_pp[np.arange(n_groups)[:, None], emb_argmax, np.arange(ew)[None, :]] = grad_emb
    emb_grads, _ = dense.embedder.backward(emb_cache, grad_pp.reshape(n_groups * kk, ew))
    return float(per_sample_mse.mean()), emb_grads + net_grads, per_sample_mse


# -- adaptation loop ----------------------------------------------------------

@dataclass
class AdaptOutcome:
    loss_history: list = field(default_factory=list)
    last_records: list = field(default_factory=list)


def _prepare_pairs(pairs, policy, moe, start_id=0):
    return [
        prepare_sample(AdaptSample(obs, chunk, policy), moe, start_id + i)
        for i, (obs, chunk) in enumerate(pairs)
    ]


def adapt_task_moe(cfg, method, moe, policies, task_id, task_index,
                   corr_pairs, sim_pairs, buffer, util, prep_cache) -> AdaptOutcome:
    """Adapt the mixture on one task's mixed data, with the method's replay
    flavor. Base policies are digest-checked before and after."""
    policy = policies[task_id]
    digests = {tid: parameter_digest(p) for tid, p in policies.items()}
    prep_corr = _prepare_pairs(corr_pairs, policy, moe)
    prep_sim = _prepare_pairs(sim_pairs, policy, moe, start_id=len(prep_corr))
    td = TaskData(task_id, prep_corr, prep_sim)
    replay_frac = 0.0 if method == METHOD_NAIVE else cfg.replay_frac
    opt = Adam(moe.parameters(), cfg.adapt_lr)
    rng = np.random.default_rng(stream_seed(cfg.seed, task_key(task_id), _STREAM_ADAPT))
    outcome = AdaptOutcome()
    for step in range(cfg.adapt_steps):
        mix = build_training_mix(
            td, buffer, util, cfg.adapt_batch,
            seed=stream_seed(cfg.seed, task_key(task_id), _STREAM_MIX) + step,
            replay_frac=replay_frac, correction_frac=cfg.correction_frac,
            task_index=task_index)
        replay_prep = [_prepared_replay(rs, policies, moe, prep_cache) for rs in mix.replay]
        batch = mix.corrections + mix.sim_expert + replay_prep
        result = adapt_step(moe, batch, opt, rng)
        outcome.loss_history.append(result.loss)
        n_cur = len(mix.corrections) + len(mix.sim_expert)
        if method == METHOD_FULL:
            update_utilization(util, result.records[:n_cur])
            if len(buffer) > 0:
                compute_priorities(buffer, util)
        elif mix.replay:
            # standard PER: priority tracks the sample's latest task loss
            for rs, m in zip(mix.replay, result.per_sample_mse[n_cur:]):
                rs.priority = float(m)
        outcome.last_records = result.records[:n_cur]
    for tid, p in policies.items():
        if parameter_digest(p) != digests[tid]:
            raise ConfigError(f"frozen policy for {tid} changed during adaptation")
    return outcome


def _prepared_replay(rs: ReplaySample, policies, moe, cache):
    if rs.sample_id not in cache:
        cache[rs.sample_id] = prepare_sample(
            AdaptSample(rs.obs, rs.chunk, policies[rs.task_id]), moe, rs.sample_id)
    return cache[rs.sample_id]


def merge_task_into_buffer(buffer, moe, corr_pairs, sim_pairs, task_id, with_activations):
    """Store the task's mixed data with routing activations for replay."""
    for pairs, source in ((corr_pairs, SOURCE_CORRECTION), (sim_pairs, SOURCE_SIM)):
        for obs, chunk in pairs:
            rs = ReplaySample(obs, chunk, source, task_id)
            buffer.add(rs)
            if with_activations:
                _, rec = moe_forward(moe, obs.cloud)
                record_activation(buffer, rs.sample_id, rec)
            else:
                rs.activation = np.full(moe.cfg.experts, 1.0 / moe.cfg.experts)


def collect_for_task(cfg, task_id, act_fn, n_traj=None):
    spec = make_task(task_id, DOMAIN_REAL)
    n = cfg.correction_trajectories if n_traj is None else n_traj
    seed = stream_seed(cfg.seed, task_key(task_id), _STREAM_COLLECT)
    log.info("collect: task=%s trajectories=%d", task_id, n)
    trajs = collect_corrections(act_fn, spec, n, cfg.intervention_delta, seed,
                                cfg.point_budget, cfg.prune_window)
    return [p for t in trajs for p in trajectory_to_pairs(t, cfg.action_dim)]


# -- continual run ------------------------------------------------------------

@dataclass
class ContinualResult:
    config: ExperimentConfig
    matrix: EvalMatrix
    policies: dict
    moe: GeoMoeModule = None
    action_residuals: dict = None
    dense: DenseResidual = None
    buffer: UnifiedBuffer = None
    gate_records: dict = None


def run_continual(cfg: ExperimentConfig, base_cache: BasePolicyCache = None) -> ContinualResult:
    """Execute the full task sequence under cfg.method and fill the matrix."""
    cfg.validate()
    cache = base_cache or BasePolicyCache()
    method = cfg.method
    moe = GeoMoeModule(cfg.moe_config(cfg.seed + 7919))
    dense = DenseResidual(cfg, cfg.seed + 7919) if method == METHOD_DENSE else None
    action_residuals = {}
    buffer = UnifiedBuffer()
    util = UtilizationState(cfg.ema_coeff, cfg.per_eps, cfg.per_exponent)
    prep_cache = {}
    matrix = EvalMatrix(cfg.tasks, cfg.trials)
    policies = {}
    gate_records = {}

    for ti, task_id in enumerate(cfg.tasks):
        policy, sim_pairs = cache.get_or_train(cfg, task_id)
        policies[task_id] = policy

        if method != METHOD_DIRECT:
            deploy_fn = _deploy_act_fn(method, policy, moe, dense, ti)
            corr_pairs = collect_for_task(cfg, task_id, deploy_fn)
            log.info("adapt: task=%s method=%s steps=%d", task_id, method, cfg.adapt_steps)
            if method == METHOD_ACTION_RESIDUAL:
                resid = ActionResidual(cfg, cfg.seed + 7919)
                rng = np.random.default_rng(
                    stream_seed(cfg.seed, task_key(task_id), _STREAM_ADAPT))
                adapt_action_residual(cfg, resid, policy, corr_pairs + sim_pairs, rng)
                action_residuals[task_id] = resid
            elif method == METHOD_DENSE:
                _adapt_dense(cfg, dense, policies, task_id, ti, corr_pairs, sim_pairs,
                             buffer, util, moe, prep_cache)
            else:
                outcome = adapt_task_moe(cfg, method, moe, policies, task_id, ti,
                                         corr_pairs, sim_pairs, buffer, util, prep_cache)
                gate_records[task_id] = outcome.last_records

        for k in range(ti + 1):
            eval_task = cfg.tasks[k]
            act = _eval_act_fn(method, policies[eval_task], moe, dense,
                               action_residuals.get(eval_task))
            sr = success_rate(act, make_task(eval_task, DOMAIN_REAL), cfg.trials,
                              stream_seed(cfg.seed, task_key(eval_task), _STREAM_EVAL),
                              cfg.point_budget)
            matrix.set(ti, k, sr)
            log.info("eval: after=%s on=%s sr=%.3f", task_id, eval_task, sr)

        if method in (METHOD_FULL, METHOD_MOE_PER, METHOD_DENSE) and ti < len(cfg.tasks) - 1:
            corr = corr_pairs if method != METHOD_DIRECT else []
            merge_task_into_buffer(buffer, moe, corr, sim_pairs, task_id,
                                   with_activations=method == METHOD_FULL)

    return ContinualResult(cfg, matrix, policies, moe, action_residuals, dense,
                           buffer, gate_records)


def _deploy_act_fn(method, policy, moe, dense, task_index):
    """Collection-time controller: the shared residual rides along from the
    second task on, which is what makes continued adaptation data-efficient."""
    if method in (METHOD_FULL, METHOD_MOE_PER, METHOD_NAIVE) and task_index > 0:
        return moe_act_fn(policy, moe)
    if method == METHOD_DENSE and task_index > 0:
        return dense_act_fn(policy, moe, dense)
    return base_act_fn(policy)


def _eval_act_fn(method, policy, moe, dense, action_residual):
    if method == METHOD_DIRECT:
        return base_act_fn(policy)
    if method == METHOD_ACTION_RESIDUAL:
        if action_residual is None:
            return base_act_fn(policy)
        return action_residual_act_fn(policy, action_residual)
    if method == METHOD_DENSE:
        return dense_act_fn(policy, moe, dense)
    return moe_act_fn(policy, moe)


def _adapt_dense(cfg, dense, policies, task_id, task_index, corr_pairs, sim_pairs,
                 buffer, util, moe_grouper, prep_cache):
    policy = policies[task_id]
    prep_corr = _prepare_pairs(corr_pairs, policy, moe_grouper)
    prep_sim = _prepare_pairs(sim_pairs, policy, moe_grouper, start_id=len(prep_corr))
    td = TaskData(task_id, prep_corr, prep_sim)
    opt = Adam(dense.parameters(), cfg.adapt_lr)
    rng = np.random.default_rng(stream_seed(cfg.seed, task_key(task_id), _STREAM_ADAPT))
    for step in range(cfg.adapt_steps):
        mix = build_training_mix(
            td, buffer, util, cfg.adapt_batch,
            seed=stream_seed(cfg.seed, task_key(task_id), _STREAM_MIX) + step,
            replay_frac=cfg.replay_frac, correction_frac=cfg.correction_frac,
            task_index=task_index)
        replay_prep = [_prepared_replay(rs, policies, moe_grouper, prep_cache)
                       for rs in mix.replay]
        batch = mix.corrections + mix.sim_expert + replay_prep
        ks = rng.integers(0, policy.head.schedule.steps, size=len(batch))
        noises = rng.standard_normal((len(batch), policy.head.chunk_size))
        _, grads, per_mse = _dense_loss_and_grads(dense, batch, ks, noises)
        opt.step(dense.parameters(), grads)
        n_cur = len(mix.corrections) + len(mix.sim_expert)
        for rs, m in zip(mix.replay, per_mse[n_cur:]):
            rs.priority = float(m)


# -- protocols ----------------------------------------------------------------

def adapt_single_task(cfg, moe, policies, task_id, task_index, buffer, util,
                      prep_cache, base_cache, n_corrections=None, with_moe_deploy=False):
    """Collect and adapt on one task; returns the correction pairs used."""
    policy, sim_pairs = base_cache.get_or_train(cfg, task_id)
    policies[task_id] = policy
    act = moe_act_fn(policy, moe) if with_moe_deploy else base_act_fn(policy)
    corr_pairs = collect_for_task(cfg, task_id, act, n_corrections)
    adapt_task_moe(cfg, cfg.method, moe, policies, task_id, task_index,
                   corr_pairs, sim_pairs, buffer, util, prep_cache)
    return corr_pairs, sim_pairs


@dataclass
class EfficiencyRow:
    budget: int
    variant: str
    success: float


def run_efficiency(cfg: ExperimentConfig, budgets, base_cache=None):
    """From-scratch vs from-continued adaptation on the second task of the
    sequence, across correction budgets. Returns EfficiencyRow items."""
    cfg.validate()
    if len(budgets) < 2:
        raise ConfigError("efficiency protocol needs at least two budgets")
    if len(cfg.tasks) < 2:
        raise ConfigError("efficiency protocol needs a source and a target task")
    source, target = cfg.tasks[0], cfg.tasks[1]
    cache = base_cache or BasePolicyCache()
    target_policy, _ = cache.get_or_train(cfg, target)

    # pretrain the shared residual once on the source task
    pre_moe = GeoMoeModule(cfg.moe_config(cfg.seed + 7919))
    pre_buffer = UnifiedBuffer()
    pre_util = UtilizationState(cfg.ema_coeff, cfg.per_eps, cfg.per_exponent)
    pre_policies = {}
    corr, sim = adapt_single_task(cfg, pre_moe, pre_policies, source, 0, pre_buffer,
                                  pre_util, {}, cache)
    merge_task_into_buffer(pre_buffer, pre_moe, corr, sim, source,
                           with_activations=cfg.method == METHOD_FULL)

    rows = []
    for budget in budgets:
        for variant in ("from_scratch", "from_continued"):
            if budget == 0:
                if variant == "from_scratch":
                    act = base_act_fn(target_policy)
                else:
                    act = moe_act_fn(target_policy, pre_moe)
            elif variant == "from_scratch":
                moe = GeoMoeModule(cfg.moe_config(cfg.seed + 7919))
                policies = {}
                adapt_single_task(cfg, moe, policies, target, 0, UnifiedBuffer(),
                                  UtilizationState(cfg.ema_coeff, cfg.per_eps,
                                                   cfg.per_exponent),
                                  {}, cache, n_corrections=budget)
                act = moe_act_fn(target_policy, moe)
            else:
                moe = copy.deepcopy(pre_moe)
                buffer = copy.deepcopy(pre_buffer)
                util = copy.deepcopy(pre_util)
                policies = {source: pre_policies[source]}
                adapt_single_task(cfg, moe, policies, target, 1, buffer, util, {},
                                  cache, n_corrections=budget, with_moe_deploy=True)
                act = moe_act_fn(target_policy, moe)
            sr = success_rate(act, make_task(target, DOMAIN_REAL), cfg.trials,
                              stream_seed(cfg.seed, task_key(target), _STREAM_EVAL),
                              cfg.point_budget)
            rows.append(EfficiencyRow(budget, variant, sr))
            log.info("efficiency: budget=%d variant=%s sr=%.3f", budget, variant, sr)
    return rows


def run_cross_transfer(cfg: ExperimentConfig, source, target, budget, base_cache=None):
    """Adapt on source with the full correction budget, then on target with
    the small one; returns the target success rate."""
    cfg.validate()
    cache = base_cache or BasePolicyCache()
    moe = GeoMoeModule(cfg.moe_config(cfg.seed + 7919))
    buffer = UnifiedBuffer()
    util = UtilizationState(cfg.ema_coeff, cfg.per_eps, cfg.per_exponent)
    policies = {}
    prep_cache = {}
    corr, sim = adapt_single_task(cfg, moe, policies, source, 0, buffer, util,
                                  prep_cache, cache)
    merge_task_into_buffer(buffer, moe, corr, sim, source,
                           with_activations=cfg.method == METHOD_FULL)
    adapt_single_task(cfg, moe, policies, target, 1, buffer, util, prep_cache,
                      cache, n_corrections=budget, with_moe_deploy=True)
    target_policy = policies[target]
    return success_rate(moe_act_fn(target_policy, moe), make_task(target, DOMAIN_REAL),
                        cfg.trials, stream_seed(cfg.seed, task_key(target), _STREAM_EVAL),
                        cfg.point_budget)
