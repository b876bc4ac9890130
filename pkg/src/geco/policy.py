"""Base simulation policy: a PointNet-style cloud encoder feeding a small
diffusion action head, trained by behavior cloning on scripted-expert
trajectories and frozen afterwards.

The head conditions on [encoder feature || residual slot]. During base
training the residual slot is held at zero; adaptation modules later fill
it without touching any base parameter, so the head stays byte-frozen.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .pointcloud import PointCloud
from .tinynn import Adam, Mlp, load_checkpoint, save_checkpoint

CHUNK_LEN = 8


@dataclass(frozen=True)
class Observation:
    """Policy input: a budgeted point cloud plus the proprioceptive state."""

    cloud: PointCloud
    proprio: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.proprio, dtype=np.float64)
        if p.ndim != 1:
            raise ShapeError(f"proprio must be a vector, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise NumericError("proprio contains non-finite values")
        object.__setattr__(self, "proprio", p)


@dataclass(frozen=True)
class ActionChunk:
    """Eight consecutive action vectors, each component in [-1, 1]."""

    actions: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != CHUNK_LEN:
            raise ShapeError(f"chunk must be ({CHUNK_LEN}, dim), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NumericError("chunk contains non-finite values")
        if np.any(np.abs(a) > 1.0 + 1e-12):
            raise ShapeError("chunk components must lie in [-1, 1]")
        object.__setattr__(self, "actions", a)

    @property
    def flat(self):
        return self.actions.reshape(-1)


class NoiseSchedule:
    """Linear-beta DDPM schedule; alpha_bar is strictly decreasing."""

    def __init__(self, steps=10, beta_start=1e-4, beta_end=0.2):
        self.steps = int(steps)
        self.betas = np.linspace(beta_start, beta_end, self.steps)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if self.alpha_bars[0] >= 1.0 or np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ConfigError("alpha_bar must start below 1 and decrease strictly")


@dataclass
class PolicyConfig:
    """Architecture and behavior-cloning hyperparameters."""

    point_budget: int = 256
    proprio_width: int = 4
    action_dim: int = 4
    encoder_widths: tuple = (32, 32)
    feature_width: int = 32
    residual_width: int = 16
    head_widths: tuple = (64, 64)
    denoise_steps: int = 10
    beta_start: float = 1e-4
    beta_end: float = 0.2
    bc_learning_rate: float = 3e-4
    bc_steps: int = 2000
    bc_batch: int = 16
    seed: int = 0


class DiffusionHead:
    """Noise-prediction network over [noisy chunk || step one-hot || condition]."""

    def __init__(self, cfg: PolicyConfig, rng):
        self.action_dim = cfg.action_dim
        self.chunk_size = CHUNK_LEN * cfg.action_dim
        self.cond_width = cfg.feature_width + cfg.residual_width
        self.schedule = NoiseSchedule(cfg.denoise_steps, cfg.beta_start, cfg.beta_end)
        in_width = self.chunk_size + self.schedule.steps + self.cond_width
        self.net = Mlp([in_width, *cfg.head_widths, self.chunk_size], "relu", rng)

    def step_onehot(self, k):
        if not 0 <= k < self.schedule.steps:
            raise ShapeError(f"denoise step {k} out of range")
        v = np.zeros(self.schedule.steps)
        v[k] = 1.0
        return v

    def input_vector(self, noisy_flat, k, condition):
        if condition.shape[-1] != self.cond_width:
            raise ShapeError(f"condition width {condition.shape[-1]} != {self.cond_width}")
        return np.concatenate([noisy_flat, self.step_onehot(k), condition])


class BasePolicy:
    """Frozen-after-training policy: per-point net, max-pool, projection, head."""

    def __init__(self, cfg: PolicyConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.point_net = Mlp([3, *cfg.encoder_widths], "relu", rng)
        pooled = cfg.encoder_widths[-1]
        self.projection = Mlp([pooled + cfg.proprio_width, cfg.feature_width], "relu", rng)
        self.head = DiffusionHead(cfg, rng)
        self.frozen = False

    def parameters(self):
        return self.point_net.params() + self.projection.params() + self.head.net.params()

    def state_dict(self):
        d = {}
        d.update(self.point_net.state_dict("enc."))
        d.update(self.projection.state_dict("proj."))
        d.update(self.head.net.state_dict("head."))
        return d

    def load_state_dict(self, d):
        self.point_net.load_state_dict(d, "enc.")
        self.projection.load_state_dict(d, "proj.")
        self.head.net.load_state_dict(d, "head.")


def parameter_digest(policy: BasePolicy) -> str:
    """SHA-256 over all base-policy parameters, for freeze contracts."""
    h = hashlib.sha256()
    for p in policy.parameters():
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def save_policy(path, policy: BasePolicy):
    save_checkpoint(path, policy.state_dict())


def load_policy(path, cfg: PolicyConfig) -> BasePolicy:
    """Rebuild the architecture from cfg and load frozen weights."""
    policy = BasePolicy(cfg)
    policy.load_state_dict(load_checkpoint(path))
    policy.frozen = True
    return policy


def encode(policy: BasePolicy, obs: Observation) -> np.ndarray:
    """Permutation-invariant feature: per-point net, componentwise max over
    points, proprio concatenated, projected to the feature width."""
    pts = obs.cloud.points
    if pts.shape[0] != policy.cfg.point_budget:
        raise ShapeError(f"expected {policy.cfg.point_budget} points, got {pts.shape[0]}")
    if obs.proprio.shape[0] != policy.cfg.proprio_width:
        raise ShapeError("proprio width mismatch")
    per_point = policy.point_net.forward(pts)
    pooled = per_point.max(axis=0)
    return policy.projection.forward(np.concatenate([pooled, obs.proprio]))


def full_condition(policy: BasePolicy, enc_feature, residual=None) -> np.ndarray:
    """Head conditioning vector [encoder feature || residual slot]."""
    r_w = policy.cfg.residual_width
    if residual is None:
        residual = np.zeros(r_w)
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != (r_w,):
        raise ShapeError(f"residual width {residual.shape} != ({r_w},)")
    return np.concatenate([enc_feature, residual])


def diffusion_loss(head: DiffusionHead, condition, chunk: ActionChunk, k, noise):
    """Simplified L2 denoising loss for one example.

    Forms the noised chunk a_k = sqrt(ab_k) a + sqrt(1 - ab_k) eps and
    returns (loss, head_param_grads, condition_grad) with
    loss = || eps - eps_hat ||^2 summed over chunk components.
    """
    noise = np.asarray(noise, dtype=np.float64)
    flat = chunk.flat
    if noise.shape != flat.shape:
        raise ShapeError("noise must match the flattened chunk")
    if not (np.all(np.isfinite(noise)) and np.all(np.isfinite(condition))):
        raise NumericError("non-finite inputs to diffusion loss")
    ab = head.schedule.alpha_bars[k]
    noisy = np.sqrt(ab) * flat + np.sqrt(1.0 - ab) * noise
    x = head.input_vector(noisy, k, np.asarray(condition, dtype=np.float64))
    pred, cache = head.net.forward_cached(x)
    diff = pred - noise
    loss = float(diff @ diff)
    grads, grad_in = head.net.backward(cache, 2.0 * diff)
    cond_grad = grad_in[head.chunk_size + head.schedule.steps:]
    return loss, grads, cond_grad


def sample_chunk(head: DiffusionHead, condition, seed: int) -> ActionChunk:
    """DDPM ancestral sampling, deterministic given the seed.

    Each reverse step forms the denoised estimate
    x0 = clip((x - sqrt(1 - ab_k) eps_hat) / sqrt(ab_k), -1, 1)
    and draws from the forward-process posterior
    mean = (sqrt(ab_{k-1}) b_k x0 + sqrt(a_k)(1 - ab_{k-1}) x) / (1 - ab_k)
    var  = (1 - ab_{k-1}) / (1 - ab_k) b_k
    with no noise at the last step. RNG consumption order: one
    standard-normal draw for the initial chunk, then one per step k > 0.
    The result is clamped to [-1, 1].
    """
    rng = np.random.default_rng(seed)
    condition = np.asarray(condition, dtype=np.float64)
    x = rng.standard_normal(head.chunk_size)
    sched = head.schedule
    for k in reversed(range(sched.steps)):
        beta = sched.betas[k]
        alpha = sched.alphas[k]
        ab = sched.alpha_bars[k]
        ab_prev = sched.alpha_bars[k - 1] if k > 0 else 1.0
        eps_hat = head.net.forward(head.input_vector(x, k, condition))
        x0 = np.clip((x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), -1.0, 1.0)
        mean = (np.sqrt(ab_prev) * beta * x0 + np.sqrt(alpha) * (1.0 - ab_prev) * x) / (1.0 - ab)
        if k > 0:
            std = np.sqrt((1.0 - ab_prev) / (1.0 - ab) * beta)
            x = mean + std * rng.standard_normal(head.chunk_size)
        else:
            x = mean
    return ActionChunk(np.clip(x, -1.0, 1.0).reshape(CHUNK_LEN, head.action_dim))


def policy_action(policy: BasePolicy, obs: Observation, seed: int) -> ActionChunk:
    """Base-policy action chunk with the residual slot zeroed."""
    return sample_chunk(policy.head, full_condition(policy, encode(policy, obs)), seed)


class _EncodeBatch:
    """Cached batched encoder pass with max-pool gradient routing."""

    def __init__(self, policy, points, proprio):
        self.policy = policy
        b, n, _ = points.shape
        per_point, self.pn_cache = policy.point_net.forward_cached(points.reshape(b * n, 3))
        per_point = per_point.reshape(b, n, -1)
        self.argmax = per_point.argmax(axis=1)
        self.pooled = per_point.max(axis=1)
        self.shape = (b, n, per_point.shape[2])
        enc_in = np.concatenate([self.pooled, proprio], axis=1)
        self.features, self.proj_cache = policy.projection.forward_cached(enc_in)

    def backward(self, grad_features):
        proj_grads, grad_enc_in = self.policy.projection.backward(self.proj_cache, grad_features)
        b, n, f = self.shape
        grad_pooled = grad_enc_in[:, :f]
        grad_pts = np.zeros(self.shape)
        rows = np.arange(b)[:, None]
        cols = np.arange(f)[None, :]
        grad_pts[rows, self.argmax, cols] = grad_pooled
        pn_grads, _ = self.policy.point_net.backward(self.pn_cache, grad_pts.reshape(b * n, f))
        return pn_grads, proj_grads


def _stack_dataset(dataset):
    points = np.stack([obs.cloud.points for obs, _ in dataset])
    proprio = np.stack([obs.proprio for obs, _ in dataset])
    chunks = np.stack([chunk.flat for _, chunk in dataset])
    return points, proprio, chunks


def bc_training_step(policy, points, proprio, chunks, ks, noises):
    """One behavior-cloning step over a stacked batch.

    Returns (mean loss, gradient list aligned with policy.parameters()).
    """
    b = points.shape[0]
    enc = _EncodeBatch(policy, points, proprio)
    sched = policy.head.schedule
    ab = sched.alpha_bars[ks][:, None]
    noisy = np.sqrt(ab) * chunks + np.sqrt(1.0 - ab) * noises
    onehots = np.eye(sched.steps)[ks]
    resid = np.zeros((b, policy.cfg.residual_width))
    head_in = np.concatenate([noisy, onehots, enc.features, resid], axis=1)
    pred, head_cache = policy.head.net.forward_cached(head_in)
    diff = pred - noises
    loss = float(np.sum(diff * diff) / b)
    head_grads, grad_in = policy.head.net.backward(head_cache, 2.0 * diff / b)
    f0 = policy.head.chunk_size + sched.steps
    grad_feat = grad_in[:, f0:f0 + policy.cfg.feature_width]
    pn_grads, proj_grads = enc.backward(grad_feat)
    return loss, pn_grads + proj_grads + head_grads


def train_bc(dataset, cfg: PolicyConfig) -> BasePolicy:
    """Behavior-clone a fresh policy on (Observation, ActionChunk) pairs.

    Minimizes the denoising loss over uniformly sampled (example, step,
    noise) triples with Adam, then freezes the policy. The per-step batch
    losses are kept on the returned policy as ``loss_history``.
    """
    if not dataset:
        raise ConfigError("behavior cloning needs a non-empty dataset")
    policy = BasePolicy(cfg)
    points, proprio, chunks = _stack_dataset(dataset)
    if points.shape[1] != cfg.point_budget:
        raise ShapeError("dataset clouds do not match the configured point budget")
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(policy.parameters(), cfg.bc_learning_rate)
    history = []
    for _ in range(cfg.bc_steps):
        idx = rng.integers(0, points.shape[0], size=cfg.bc_batch)
        ks = rng.integers(0, policy.head.schedule.steps, size=cfg.bc_batch)
        noises = rng.standard_normal((cfg.bc_batch, policy.head.chunk_size))
        loss, grads = bc_training_step(
            policy, points[idx], proprio[idx], chunks[idx], ks, noises)
        opt.step(policy.parameters(), grads)
        history.append(loss)
    policy.frozen = True
    policy.loss_history = history
    return policy
