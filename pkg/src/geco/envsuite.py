"""Synthetic desk-scale manipulation environments with paired sim/real
variants, a privileged scripted expert, and an oracle corrector that
stands in for a human overseer.

Dynamics are kinematic: the gripper moves by clamped deltas, a grasp
engages near a graspable point while closing, and a held object follows
the gripper. Sim and real variants share dynamics and goal predicates;
they differ only in how observations are corrupted (systematic offset,
jitter, dropout, distractor points). Both cuboid tasks share one
miscalibration transform while the curved task uses a different one, so
geometric similarity between tasks is reflected in their gaps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CollectionFailureError, ConfigError, ShapeError
from .pointcloud import (
    BASE_FRAME,
    CAMERA_FRAME,
    CameraExtrinsics,
    PointCloud,
    crop_aabb,
    fps_downsample,
    fuse_views,
    transform_to_base,
)
from .policy import CHUNK_LEN, ActionChunk, Observation

DOMAIN_SIM = "sim"
DOMAIN_REAL = "real"

TASK_CUBOID_REACH = "cuboid_reach"
TASK_CUBOID_STACK = "cuboid_stack"
TASK_CURVED_REACH = "curved_reach"
TASK_PEG_INSERT = "peg_insert"
ALL_TASKS = (TASK_CUBOID_REACH, TASK_CUBOID_STACK, TASK_CURVED_REACH, TASK_PEG_INSERT)

WORKSPACE_LO = np.array([0.05, -0.30, 0.00])
WORKSPACE_HI = np.array([0.55, 0.30, 0.40])

MAX_STEP = 0.035         # meters of gripper travel per action component
GRASP_RADIUS = 0.050
APERTURE_RATE = 0.5
LIFT_HEIGHT = 0.12
HOME_POSE = np.array([0.30, 0.00, 0.18])
CUBE_SIZE = 0.05


@dataclass(frozen=True)
class DomainGap:
    """Observation corruption of the real variant; all-zero in sim."""

    jitter_sigma: float = 0.0
    dropout_rate: float = 0.0
    offset_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    distractor_points: int = 0


# the two cuboid tasks share one systematic miscalibration; the curved and
# peg tasks see different ones
REAL_GAPS = {
    TASK_CUBOID_REACH: DomainGap(0.003, 0.15, np.array([0.055, -0.045, 0.0]), 8),
    TASK_CUBOID_STACK: DomainGap(0.003, 0.15, np.array([0.055, -0.045, 0.0]), 8),
    TASK_CURVED_REACH: DomainGap(0.004, 0.20, np.array([-0.045, 0.055, 0.0]), 10),
    TASK_PEG_INSERT: DomainGap(0.003, 0.15, np.array([0.035, 0.060, 0.0]), 8),
}


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    domain: str
    horizon: int
    gap: DomainGap


def make_task(task_id: str, domain: str) -> TaskSpec:
    """Task family entry point; sim gaps are all zero by construction."""
    if task_id not in ALL_TASKS:
        raise ConfigError(f"unknown task id {task_id!r}; known: {', '.join(ALL_TASKS)}")
    if domain not in (DOMAIN_SIM, DOMAIN_REAL):
        raise ConfigError(f"unknown domain {domain!r}")
    horizon = 40 if task_id in (TASK_CUBOID_REACH, TASK_CURVED_REACH) else 56
    gap = REAL_GAPS[task_id] if domain == DOMAIN_REAL else DomainGap()
    return TaskSpec(task_id, domain, horizon, gap)


def _look_at_rotation(eye, target):
    # camera z axis toward the target, x roughly horizontal
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(np.array([0.0, 0.0, 1.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def default_cameras():
    """Two fixed viewpoints flanking the workspace."""
    center = np.array([0.30, 0.0, 0.05])
    cams = []
    for eye in (np.array([0.30, -0.45, 0.35]), np.array([0.30, 0.45, 0.35])):
        cams.append(CameraExtrinsics(_look_at_rotation(eye, center), eye))
    return cams


def _cube_surface(center, size, m=4):
    """Deterministic grid sampling of the 6 faces of an axis-aligned cube."""
    h = size / 2.0
    lin = np.linspace(-h, h, m)
    u, v = np.meshgrid(lin, lin, indexing="ij")
    u = u.reshape(-1)
    v = v.reshape(-1)
    faces = []
    for axis in range(3):
        for sign in (-h, h):
            pts = np.zeros((u.size, 3))
            pts[:, axis] = sign
            pts[:, (axis + 1) % 3] = u
            pts[:, (axis + 2) % 3] = v
            faces.append(pts)
    return np.concatenate(faces, axis=0) + center


def _curved_cluster(center, yaw, radius=0.065, span=2.4, tube=0.009, n_arc=26, n_ring=5):
    """A bent tube of points resting on the table, like an elongated fruit."""
    t = np.linspace(-span / 2.0, span / 2.0, n_arc)
    ring = np.linspace(0.0, 2.0 * math.pi, n_ring, endpoint=False)
    pts = []
    for ti in t:
        cx = radius * math.cos(ti) - radius
        cy = radius * math.sin(ti)
        # tube cross-section in the local normal/vertical plane
        for r in ring:
            nx = math.cos(ti) * tube * math.cos(r)
            ny = math.sin(ti) * tube * math.cos(r)
            nz = tube * math.sin(r)
            pts.append([cx + nx, cy + ny, nz])
    pts = np.array(pts)
    rot = np.array([
        [math.cos(yaw), -math.sin(yaw), 0.0],
        [math.sin(yaw), math.cos(yaw), 0.0],
        [0.0, 0.0, 1.0],
    ])
    return pts @ rot.T + center


def _cylinder_surface(center, radius=0.012, height=0.05, n_theta=12, n_z=6):
    theta = np.linspace(0.0, 2.0 * math.pi, n_theta, endpoint=False)
    zs = np.linspace(-height / 2.0, height / 2.0, n_z)
    pts = [[radius * math.cos(a), radius * math.sin(a), z] for z in zs for a in theta]
    top = [[0.6 * radius * math.cos(a), 0.6 * radius * math.sin(a), height / 2.0] for a in theta]
    return np.array(pts + top) + center


@dataclass
class SceneObject:
    name: str
    position: np.ndarray          # reference point used for grasping/goals
    kind: str                     # cuboid | curved | peg | socket
    yaw: float = 0.0
    graspable: bool = True

    def cloud(self):
        if self.kind == "cuboid":
            return _cube_surface(self.position, CUBE_SIZE)
        if self.kind == "curved":
            return _curved_cluster(self.position, self.yaw)
        if self.kind == "peg":
            return _cylinder_surface(self.position)
        if self.kind == "socket":
            return _cube_surface(self.position, 0.055, m=4)
        raise ConfigError(f"unknown object kind {self.kind}")


class Env:
    """One episode of one task variant. Value object; no shared state."""

    def __init__(self, spec: TaskSpec, seed: int, point_budget=256, proprio_width=4):
        self.spec = spec
        self.seed = seed
        self.point_budget = point_budget
        self.proprio_width = proprio_width
        self.cameras = default_cameras()
        self._obs_rng = None
        self.reset(seed)

    # -- state ------------------------------------------------------------

    def reset(self, seed=None) -> Observation:
        if seed is not None:
            self.seed = seed
        place_rng = np.random.default_rng([self.seed, 0])
        self._obs_rng = np.random.default_rng([self.seed, 1])
        self.gripper = HOME_POSE.copy()
        self.aperture = 1.0
        self.held = None
        self._grasp_offset = None
        self.steps = 0
        self.done = False
        self.success = False
        self.objects = self._place_objects(place_rng)
        return self.observe()

    def _place_objects(self, rng):
        tid = self.spec.task_id
        if tid == TASK_CUBOID_REACH:
            x = rng.uniform(0.20, 0.42)
            y = rng.uniform(-0.15, 0.15)
            return [SceneObject("cube", np.array([x, y, CUBE_SIZE / 2]), "cuboid")]
        if tid == TASK_CUBOID_STACK:
            x = rng.uniform(0.22, 0.40)
            y = rng.uniform(-0.20, 0.0)
            dy = rng.uniform(0.11, 0.14)
            a = SceneObject("cube_a", np.array([x, y, CUBE_SIZE / 2]), "cuboid")
            b = SceneObject("cube_b", np.array([x, y + dy, CUBE_SIZE / 2]), "cuboid",
                            graspable=False)
            return [a, b]
        if tid == TASK_CURVED_REACH:
            x = rng.uniform(0.22, 0.40)
            y = rng.uniform(-0.14, 0.14)
            yaw = rng.uniform(0.0, 2.0 * math.pi)
            return [SceneObject("curved", np.array([x, y, 0.012]), "curved", yaw=yaw)]
        if tid == TASK_PEG_INSERT:
            x = rng.uniform(0.22, 0.38)
            y = rng.uniform(-0.20, -0.02)
            dy = rng.uniform(0.13, 0.16)
            peg = SceneObject("peg", np.array([x, y, 0.025]), "peg")
            sock = SceneObject("socket", np.array([x, y + dy, 0.0275]), "socket",
                               graspable=False)
            return [peg, sock]
        raise ConfigError(f"unknown task {tid}")

    def proprio(self):
        return np.array([*self.gripper, self.aperture])

    # -- observation rendering --------------------------------------------

    def scene_points(self):
        """Uncorrupted object points in the base frame."""
        return np.concatenate([o.cloud() for o in self.objects], axis=0)

    def observe(self) -> Observation:
        """Render the current scene through the acquisition pipeline.

        Corruption draws come from a dedicated per-episode stream, so the
        trajectory is a pure function of (seed, policy, call pattern).
        """
        gap = self.spec.gap
        rng = self._obs_rng
        pts = self.scene_points() + gap.offset_translation
        views = []
        for cam in self.cameras:
            local = (pts - cam.translation) @ cam.rotation
            if gap.dropout_rate > 0.0:
                keep = rng.random(local.shape[0]) >= gap.dropout_rate
                local = local[keep]
            if gap.jitter_sigma > 0.0:
                local = local + rng.normal(0.0, gap.jitter_sigma, size=local.shape)
            views.append(transform_to_base(PointCloud(local, CAMERA_FRAME), cam))
        fused = fuse_views(views)
        if gap.distractor_points > 0:
            extra = rng.uniform(WORKSPACE_LO + 0.02, WORKSPACE_HI - 0.02,
                                size=(gap.distractor_points, 3))
            fused = fuse_views([fused, PointCloud(extra, BASE_FRAME)])
        cropped = crop_aabb(fused, WORKSPACE_LO, WORKSPACE_HI)
        budgeted = fps_downsample(cropped, self.point_budget, seed=int(rng.integers(2 ** 31)))
        pts_out = budgeted.points
        if pts_out.shape[0] < self.point_budget:
            # cyclic pad keeps the budget exact when dropout bites too hard
            reps = int(np.ceil(self.point_budget / max(pts_out.shape[0], 1)))
            pts_out = np.tile(pts_out, (reps, 1))[:self.point_budget]
        return Observation(PointCloud(pts_out), self.proprio())

    # -- dynamics ----------------------------------------------------------

    def step(self, action):
        """Advance one step. Returns (done, success)."""
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (4,):
            raise ShapeError(f"action must be a 4-vector, got {action.shape}")
        if self.done:
            return True, self.success
        delta = np.clip(action[:3], -1.0, 1.0) * MAX_STEP
        self.gripper = np.clip(self.gripper + delta, WORKSPACE_LO, WORKSPACE_HI)
        self.aperture = float(np.clip(
            self.aperture + np.clip(action[3], -1.0, 1.0) * APERTURE_RATE, 0.0, 1.0))
        if self.held is None and self.aperture <= 0.45:
            for i, obj in enumerate(self.objects):
                if obj.graspable and np.linalg.norm(self.gripper - obj.position) <= GRASP_RADIUS:
                    self.held = i
                    self._grasp_offset = obj.position - self.gripper
                    break
        if self.held is not None:
            obj = self.objects[self.held]
            obj.position = self.gripper + self._grasp_offset
            if self.aperture >= 0.55:
                self._release(obj)
        self.steps += 1
        self.success = self._goal_reached()
        self.done = self.success or self.steps >= self.spec.horizon
        return self.done, self.success

    def _release(self, obj):
        self.held = None
        self._grasp_offset = None
        support = self._support_height(obj)
        obj.position = np.array([obj.position[0], obj.position[1], support])

    def _support_height(self, obj):
        rest = {"cuboid": CUBE_SIZE / 2, "curved": 0.012, "peg": 0.025}.get(obj.kind, 0.02)
        tid = self.spec.task_id
        if tid == TASK_CUBOID_STACK and obj.name == "cube_a":
            base = self.objects[1]
            if np.linalg.norm(obj.position[:2] - base.position[:2]) <= 0.035:
                return base.position[2] + CUBE_SIZE
        if tid == TASK_PEG_INSERT and obj.name == "peg":
            sock = self.objects[1]
            if np.linalg.norm(obj.position[:2] - sock.position[:2]) <= 0.032:
                return sock.position[2] + 0.04
        return rest

    def _goal_reached(self):
        tid = self.spec.task_id
        if tid in (TASK_CUBOID_REACH, TASK_CURVED_REACH):
            return self.held == 0 and self.objects[0].position[2] >= LIFT_HEIGHT
        if tid == TASK_CUBOID_STACK:
            a, b = self.objects
            return (self.held is None
                    and np.linalg.norm(a.position[:2] - b.position[:2]) <= 0.03
                    and abs(a.position[2] - (b.position[2] + CUBE_SIZE)) <= 0.018)
        if tid == TASK_PEG_INSERT:
            peg, sock = self.objects
            return (self.held is None
                    and np.linalg.norm(peg.position[:2] - sock.position[:2]) <= 0.03
                    and abs(peg.position[2] - (sock.position[2] + 0.04)) <= 0.02)
        return False


# -- scripted expert -------------------------------------------------------

def _move_toward(pos, target):
    return np.clip((target - pos) / MAX_STEP, -1.0, 1.0)


def scripted_expert(env: Env) -> np.ndarray:
    """Privileged piecewise straight-line plan. Zero action once the goal
    predicate holds.

    Branches are chosen so the plan converges even when executed actions are
    perturbed: above the object it steers toward a point just over the grasp
    target, below that height it servos straight at the target in 3D."""
    if env.success:
        return np.zeros(4)
    tid = env.spec.task_id
    pos = env.gripper
    if env.held is None:
        grasp = env.objects[0].position
        dist = np.linalg.norm(pos - grasp)
        # closing begins on final approach; the proximity latch does the rest,
        # so grasp timing needs no step-exact phase
        grip = -1.0 if dist < 0.07 else (1.0 if env.aperture < 0.95 else 0.0)
        if pos[2] > grasp[2] + 0.05:
            above = grasp + np.array([0.0, 0.0, 0.03])
            return np.array([*_move_toward(pos, above), grip])
        if dist > 0.01:
            return np.array([*_move_toward(pos, grasp), grip])
        return np.array([0.0, 0.0, 0.0, -1.0])
    # object grasped: transport phase
    if tid in (TASK_CUBOID_REACH, TASK_CURVED_REACH):
        lift = np.array([pos[0], pos[1], LIFT_HEIGHT + 0.05])
        return np.array([*_move_toward(pos, lift), -1.0 if env.aperture > 0.05 else 0.0])
    if tid == TASK_CUBOID_STACK:
        place = env.objects[1].position + np.array([0.0, 0.0, CUBE_SIZE]) - env._grasp_offset
    else:
        place = env.objects[1].position + np.array([0.0, 0.0, 0.04]) - env._grasp_offset
    hover = place + np.array([0.0, 0.0, 0.055])
    xy_err = np.linalg.norm(pos[:2] - place[:2])
    if xy_err > 0.025 or pos[2] > hover[2] + 0.02:
        return np.array([*_move_toward(pos, hover), 0.0])
    if np.linalg.norm(pos - place) > 0.01:
        return np.array([*_move_toward(pos, place), 0.0])
    return np.array([0.0, 0.0, 0.0, 1.0])


def oracle_correct(policy_action, env: Env, delta: float):
    """Override the policy action when it strays from the expert's.

    Returns (action, intervened); the comparison is the max-norm deviation
    in normalized action units.
    """
    expert = scripted_expert(env)
    if float(np.max(np.abs(np.asarray(policy_action) - expert))) > delta:
        return expert, True
    return np.asarray(policy_action, dtype=np.float64), False


# -- trajectories and rollouts ---------------------------------------------

@dataclass
class TrajectoryStep:
    obs: Observation
    action: np.ndarray
    intervened: bool = False


@dataclass
class Trajectory:
    task_id: str
    domain: str
    steps: list
    success: bool = False


def _chunk_seed(seed, idx):
    return (int(seed) * 100003 + idx) % (2 ** 31)


def rollout_policy(env: Env, act_fn, seed) -> bool:
    """Execute full chunks until done; renders only at prediction time."""
    env.reset(seed)
    chunk = None
    pred = 0
    t = 0
    while not env.done:
        if t % CHUNK_LEN == 0:
            chunk = act_fn(env.observe(), _chunk_seed(seed, pred)).actions
            pred += 1
        done, success = env.step(chunk[t % CHUNK_LEN])
        t += 1
    return env.success


def collect_expert_trajectory(env: Env, seed, noise_sigma=0.0) -> Trajectory:
    """Roll the privileged expert, recording per-step observations.

    With noise_sigma > 0 the executed translation is perturbed while the
    recorded label stays the clean state-feedback expert action, so the
    dataset covers recovery states around the nominal path."""
    env.reset(seed)
    noise_rng = np.random.default_rng([seed, 2])
    burn_in = int(noise_rng.integers(0, 6)) if noise_sigma > 0.0 else 0
    steps = []
    t = 0
    while not env.done:
        obs = env.observe()
        action = scripted_expert(env)
        if t < burn_in:
            # random wander first: the recorded labels then demonstrate
            # recovery from off-path states, including a mis-closed gripper
            executed = noise_rng.uniform(-1.0, 1.0, 4)
        elif noise_sigma > 0.0:
            executed = action.copy()
            executed[:3] = np.clip(executed[:3] + noise_rng.normal(0.0, noise_sigma, 3),
                                   -1.0, 1.0)
            if noise_rng.random() < 0.10:
                executed[3] = noise_rng.uniform(-1.0, 1.0)
        else:
            executed = action
        env.step(executed)
        steps.append(TrajectoryStep(obs, action, False))
        t += 1
    return Trajectory(env.spec.task_id, env.spec.domain, steps, env.success)


def collect_expert_dataset(spec: TaskSpec, n_traj, seed, point_budget=256,
                           noise_sigma=0.15):
    """Expert demonstrations: one third clean rollouts, two thirds with
    exploration noise and a random burn-in for state coverage. Failed
    noisy episodes are discarded."""
    env = Env(spec, seed, point_budget)
    trajs = []
    for i in range(n_traj):
        sigma = 0.0 if i % 3 == 0 else noise_sigma
        traj = collect_expert_trajectory(env, seed + i, sigma)
        if traj.success:
            trajs.append(traj)
    return trajs


def prune_pre_intervention(steps, window=2):
    """Drop the policy-generated steps just before each intervention onset."""
    flags = [s.intervened for s in steps]
    drop = set()
    for t, f in enumerate(flags):
        if f and (t == 0 or not flags[t - 1]):
            for d in range(1, window + 1):
                if t - d >= 0 and not flags[t - d]:
                    drop.add(t - d)
    return [s for t, s in enumerate(steps) if t not in drop]


def collect_corrections(act_fn, spec: TaskSpec, n_traj, delta, seed,
                        point_budget=256, prune_window=2, attempt_factor=3):
    """Shared-autonomy collection: per-step oracle overrides, pre-onset
    pruning, success-only retention. Raises after attempt_factor * n_traj
    failed attempts."""
    env = Env(spec, seed, point_budget)
    kept = []
    attempts = 0
    ep = 0
    while len(kept) < n_traj:
        if attempts >= attempt_factor * n_traj:
            raise CollectionFailureError(
                f"{spec.task_id}/{spec.domain}: {len(kept)}/{n_traj} successful "
                f"trajectories after {attempts} attempts")
        ep_seed = seed + 1000 + ep
        env.reset(ep_seed)
        steps = []
        chunk = None
        pred = 0
        t = 0
        while not env.done:
            obs = env.observe()
            if t % CHUNK_LEN == 0:
                chunk = act_fn(obs, _chunk_seed(ep_seed, pred)).actions
                pred += 1
            action, intervened = oracle_correct(chunk[t % CHUNK_LEN], env, delta)
            env.step(action)
            steps.append(TrajectoryStep(obs, action, intervened))
            t += 1
        attempts += 1
        ep += 1
        if env.success:
            kept.append(Trajectory(spec.task_id, spec.domain, prune_pre_intervention(
                steps, prune_window), True))
    return kept


def trajectory_to_pairs(traj: Trajectory, action_dim=4):
    """(Observation, ActionChunk) pairs; chunks are zero-padded past the end."""
    n = len(traj.steps)
    pairs = []
    for i in range(n):
        chunk = np.zeros((CHUNK_LEN, action_dim))
        for j in range(CHUNK_LEN):
            if i + j < n:
                chunk[j] = np.clip(traj.steps[i + j].action, -1.0, 1.0)
        pairs.append((traj.steps[i].obs, ActionChunk(chunk)))
    return pairs


def save_trajectories(path, trajectories):
    """Line-delimited JSON, one step per line."""
    with open(path, "w") as f:
        for traj in trajectories:
            for t, s in enumerate(traj.steps):
                rec = {
                    "task_id": traj.task_id,
                    "domain": traj.domain,
                    "t": t,
                    "proprio": s.obs.proprio.tolist(),
                    "points": s.obs.cloud.points.reshape(-1).tolist(),
                    "action": np.asarray(s.action).tolist(),
                    "intervened": bool(s.intervened),
                }
                f.write(json.dumps(rec) + "\n")


def load_trajectories(path):
    trajs = []
    current = None
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["t"] == 0:
                current = Trajectory(rec["task_id"], rec["domain"], [], True)
                trajs.append(current)
            pts = np.array(rec["points"], dtype=np.float64).reshape(-1, 3)
            obs = Observation(PointCloud(pts), np.array(rec["proprio"]))
            current.steps.append(TrajectoryStep(
                obs, np.array(rec["action"]), rec["intervened"]))
    return trajs
