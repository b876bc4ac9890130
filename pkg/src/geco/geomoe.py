"""Geometry-gated mixture-of-experts perception residual.

Local groups are routed to experts by their geometric signature
(linearity, planarity, saliency, scale, centroid); the per-group expert
mixtures are max-pooled into one corrective residual vector that fills the
frozen head's residual slot. This module is the only trainable component
during adaptation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, FreezeViolationError, ShapeError
from .geomfeat import geometric_features
from .pointcloud import knn_groups
from .policy import ActionChunk, BasePolicy, encode, full_condition, sample_chunk
from .tinynn import Mlp, load_checkpoint, save_checkpoint, softmax

GATE_FEATURE_WIDTH = 7


@dataclass
class MoeConfig:
    experts: int = 3
    group_centers: int = 12
    group_k: int = 8
    group_seed: int = 0
    embed_widths: tuple = (16,)
    embed_width: int = 16
    gate_widths: tuple = (16,)
    expert_widths: tuple = (32,)
    residual_width: int = 16
    balance_weight: float = 0.01
    adapt_lr: float = 1e-3
    seed: int = 0


@dataclass
class GateRecord:
    """Per-sample routing trace: one weight row and one feature row per group."""

    weights: np.ndarray
    features: np.ndarray
    sample_id: int = -1

    @property
    def mean_activation(self):
        return self.weights.mean(axis=0)


class GeoMoeModule:
    """Gate + M experts + shared group embedder, all trainable together."""

    def __init__(self, cfg: MoeConfig):
        if cfg.experts < 2:
            raise ShapeError("mixture needs at least 2 experts")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.gate = Mlp([GATE_FEATURE_WIDTH, *cfg.gate_widths, cfg.experts], "tanh", rng)
        self.embedder = Mlp([3, *cfg.embed_widths, cfg.embed_width], "relu", rng)
        self.experts = [
            Mlp([cfg.embed_width, *cfg.expert_widths, cfg.residual_width], "relu", rng)
            for _ in range(cfg.experts)
        ]

    def parameters(self):
        out = self.gate.params() + self.embedder.params()
        for e in self.experts:
            out += e.params()
        return out

    def state_dict(self):
        d = {}
        d.update(self.gate.state_dict("gate."))
        d.update(self.embedder.state_dict("embed."))
        for j, e in enumerate(self.experts):
            d.update(e.state_dict(f"expert{j}."))
        return d

    def load_state_dict(self, d):
        self.gate.load_state_dict(d, "gate.")
        self.embedder.load_state_dict(d, "embed.")
        for j, e in enumerate(self.experts):
            e.load_state_dict(d, f"expert{j}.")

    def groups_for(self, cloud):
        return knn_groups(cloud, self.cfg.group_centers, self.cfg.group_k, self.cfg.group_seed)


def save_moe(path, moe: GeoMoeModule):
    save_checkpoint(path, moe.state_dict())


def load_moe(path, cfg: MoeConfig) -> GeoMoeModule:
    moe = GeoMoeModule(cfg)
    moe.load_state_dict(load_checkpoint(path))
    return moe


def gate_features(group):
    """Routing cues for one group: (features, degenerate_flag).

    Features are [linearity, planarity, saliency, log1p(l1), centroid xyz].
    Degenerate groups keep a zero geometric part instead of erroring.
    """
    gf = geometric_features(group)
    vec = np.concatenate([
        [gf.linearity, gf.planarity, gf.saliency, np.log1p(gf.eigvals[0])],
        group.centroid,
    ])
    return vec, gf.degenerate


def route(moe: GeoMoeModule, group) -> np.ndarray:
    """Softmax routing weights for one group."""
    vec, _ = gate_features(group)
    return softmax(moe.gate.forward(vec))


def _embed_groups(moe, member_stack):
    """Max-pooled per-point embedding for stacked groups (n, k, 3)."""
    n, k, _ = member_stack.shape
    per_point = moe.embedder.forward(member_stack.reshape(n * k, 3)).reshape(n, k, -1)
    return per_point.max(axis=1)


def expert_mix(moe: GeoMoeModule, group) -> np.ndarray:
    """Convex combination of expert outputs for one group (weighted by route)."""
    w = route(moe, group)
    emb = _embed_groups(moe, group.member_points[None])[0]
    out = np.zeros(moe.cfg.residual_width)
    for j, expert in enumerate(moe.experts):
        out += w[j] * expert.forward(emb)
    return out


def aggregate_residual(moe: GeoMoeModule, groups) -> np.ndarray:
    """Componentwise max over per-group mixtures; order invariant."""
    if not groups:
        raise EmptyInputError("aggregate_residual needs at least one group")
    mixed = np.stack([expert_mix(moe, g) for g in groups])
    return mixed.max(axis=0)


def moe_forward(moe: GeoMoeModule, cloud):
    """Residual vector and routing record for a full observation cloud."""
    groups = moe.groups_for(cloud)
    feats = np.stack([gate_features(g)[0] for g in groups])
    weights = softmax(moe.gate.forward(feats))
    members = np.stack([g.member_points for g in groups])
    emb = _embed_groups(moe, members)
    mixed = np.zeros((len(groups), moe.cfg.residual_width))
    for j, expert in enumerate(moe.experts):
        mixed += weights[:, j:j + 1] * expert.forward(emb)
    return mixed.max(axis=0), GateRecord(weights=weights, features=feats)


def corrected_forward(policy: BasePolicy, moe: GeoMoeModule, obs, seed: int):
    """Action chunk through the frozen head with the residual slot filled.

    Returns (chunk, gate_record); the record feeds replay prioritization.
    """
    if not policy.frozen:
        raise FreezeViolationError("base policy must be frozen before correction")
    residual, record = moe_forward(moe, obs.cloud)
    if residual.shape != (policy.cfg.residual_width,):
        raise ShapeError("residual width does not match the head's residual slot")
    cond = full_condition(policy, encode(policy, obs), residual)
    return sample_chunk(policy.head, cond, seed), record


def balance_loss(records) -> float:
    """Switch-style utilization balance: experts M times sum_j f_j p_j.

    f_j is the fraction of groups whose argmax weight is expert j (ties to
    the lowest index) and p_j the mean gate probability. Minimum 1 at
    perfect balance, M at total collapse.
    """
    loss, _ = _balance_with_grad(_stack_records(records))
    return loss


def _stack_records(records):
    if isinstance(records, GateRecord):
        return records.weights
    if isinstance(records, np.ndarray):
        return records
    return np.concatenate([r.weights for r in records], axis=0)


def _balance_with_grad(weights):
    n, m = weights.shape
    if n == 0:
        raise EmptyInputError("balance loss needs at least one routed group")
    counts = np.bincount(weights.argmax(axis=1), minlength=m)
    f = counts / n
    p = weights.mean(axis=0)
    loss = float(m * f @ p)
    # f is piecewise constant in the parameters; gradient flows through p only
    grad_w = np.tile(m * f / n, (n, 1))
    return loss, grad_w


@dataclass
class AdaptSample:
    """One adaptation example bound to the frozen policy of its task."""

    obs: object
    chunk: ActionChunk
    policy: BasePolicy


@dataclass
class PreparedSample:
    """Cached frozen-side quantities so adaptation steps stay cheap."""

    members: np.ndarray
    gate_feats: np.ndarray
    enc_feature: np.ndarray
    chunk_flat: np.ndarray
    policy: BasePolicy
    sample_id: int = -1


def prepare_sample(sample: AdaptSample, moe: GeoMoeModule, sample_id=-1) -> PreparedSample:
    groups = moe.groups_for(sample.obs.cloud)
    return PreparedSample(
        members=np.stack([g.member_points for g in groups]),
        gate_feats=np.stack([gate_features(g)[0] for g in groups]),
        enc_feature=encode(sample.policy, sample.obs),
        chunk_flat=sample.chunk.flat,
        policy=sample.policy,
        sample_id=sample_id,
    )


@dataclass
class AdaptLossResult:
    loss: float
    mse: float
    balance: float
    grads: list
    records: list
    per_sample_mse: np.ndarray


def adaptation_loss(moe, prepared, ks, noises, with_grads=True) -> AdaptLossResult:
    """Total adaptation objective over a prepared batch.

    Loss = mean_i MSE(a_hat_i, a_i) + balance_weight * balance, where a_hat
    is the one-step denoised reconstruction through each sample's frozen
    head at the drawn diffusion step. Gradients align with moe.parameters()
    and are None when with_grads is false.
    """
    b = len(prepared)
    g = moe.cfg.group_centers
    kk = moe.cfg.group_k
    rw = moe.cfg.residual_width
    m = moe.cfg.experts

    members = np.concatenate([s.members for s in prepared], axis=0)
    gfeats = np.concatenate([s.gate_feats for s in prepared], axis=0)
    n_groups = members.shape[0]

    per_point, emb_cache = moe.embedder.forward_cached(members.reshape(n_groups * kk, 3))
    ew = per_point.shape[1]
    per_point = per_point.reshape(n_groups, kk, ew)
    emb_argmax = per_point.argmax(axis=1)
    emb = per_point.max(axis=1)

    logits, gate_cache = moe.gate.forward_cached(gfeats)
    weights = softmax(logits)

    exp_out = []
    exp_caches = []
    for expert in moe.experts:
        out, cache = expert.forward_cached(emb)
        exp_out.append(out)
        exp_caches.append(cache)
    mixed = np.zeros((n_groups, rw))
    for j in range(m):
        mixed += weights[:, j:j + 1] * exp_out[j]

    per_sample = mixed.reshape(b, g, rw)
    res_argmax = per_sample.argmax(axis=1)
    residuals = per_sample.max(axis=1)

    # head passes grouped by task policy (frozen, so only input grads matter)
    per_sample_mse = np.zeros(b)
    grad_residuals = np.zeros_like(residuals)
    by_policy = {}
    for i, s in enumerate(prepared):
        by_policy.setdefault(id(s.policy), []).append(i)
    for idx in by_policy.values():
        pol = prepared[idx[0]].policy
        head = pol.head
        sched = head.schedule
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
        if with_grads:
            grad_pred = (2.0 / (n_comp * b)) * diff * (-np.sqrt(1.0 - ab) / np.sqrt(ab))
            _, grad_in = head.net.backward(cache, grad_pred)
            f0 = head.chunk_size + sched.steps + pol.cfg.feature_width
            grad_residuals[sub] = grad_in[:, f0:f0 + rw]
    mse = float(per_sample_mse.mean())

    bal, grad_w_bal = _balance_with_grad(weights)
    loss = mse + moe.cfg.balance_weight * bal
    records = [
        GateRecord(
            weights=weights[i * g:(i + 1) * g],
            features=gfeats[i * g:(i + 1) * g],
            sample_id=prepared[i].sample_id,
        )
        for i in range(b)
    ]
    if not with_grads:
        return AdaptLossResult(loss, mse, bal, None, records, per_sample_mse)

    # residual max-pool scatter back to per-group mixtures
    grad_mixed = np.zeros((b, g, rw))
    rows = np.arange(b)[:, None]
    cols = np.arange(rw)[None, :]
    grad_mixed[rows, res_argmax, cols] = grad_residuals
    grad_mixed = grad_mixed.reshape(n_groups, rw)

    grad_w = moe.cfg.balance_weight * grad_w_bal
    grad_emb = np.zeros_like(emb)
    expert_grads = []
    for j, expert in enumerate(moe.experts):
        grad_out_j = weights[:, j:j + 1] * grad_mixed
        g_params, g_in = expert.backward(exp_caches[j], grad_out_j)
        expert_grads.append(g_params)
        grad_emb += g_in
        grad_w[:, j] += np.sum(grad_mixed * exp_out[j], axis=1)

    grad_logits = weights * (grad_w - np.sum(grad_w * weights, axis=1, keepdims=True))
    gate_grads, _ = moe.gate.backward(gate_cache, grad_logits)

    grad_per_point = np.zeros((n_groups, kk, ew))
    grows = np.arange(n_groups)[:, None]
    gcols = np.arange(ew)[None, :]
    grad_per_point[grows, emb_argmax, gcols] = grad_emb
    embed_grads, _ = moe.embedder.backward(emb_cache, grad_per_point.reshape(n_groups * kk, ew))

    grads = gate_grads + embed_grads
    for eg in expert_grads:
        grads += eg
    return AdaptLossResult(loss, mse, bal, grads, records, per_sample_mse)


def adapt_step(moe: GeoMoeModule, prepared_batch, optimizer, rng) -> AdaptLossResult:
    """One Adam update of the mixture on a prepared batch.

    Draws (step, noise) per sample from rng and asserts every involved base
    policy is frozen before touching anything.
    """
    for s in prepared_batch:
        if not s.policy.frozen:
            raise FreezeViolationError("adaptation requires frozen base policies")
    b = len(prepared_batch)
    steps = prepared_batch[0].policy.head.schedule.steps
    ks = rng.integers(0, steps, size=b)
    noises = rng.standard_normal((b, prepared_batch[0].policy.head.chunk_size))
    result = adaptation_loss(moe, prepared_batch, ks, noises)
    optimizer.step(moe.parameters(), result.grads)
    return result


def write_gate_records(path, records):
    """CSV dump of routing traces: sample id, group index, weights, cues."""
    if not records:
        raise EmptyInputError("no gate records to write")
    m = records[0].weights.shape[1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["sample_id", "group_index"]
            + [f"w_{j + 1}" for j in range(m)]
            + ["linearity", "planarity", "saliency"])
        for rec in records:
            for gi in range(rec.weights.shape[0]):
                row = [rec.sample_id, gi]
                row += [f"{v:.9g}" for v in rec.weights[gi]]
                row += [f"{v:.9g}" for v in rec.features[gi, :3]]
                writer.writerow(row)
