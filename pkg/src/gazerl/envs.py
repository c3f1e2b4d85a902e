"""Bundled 2-d pixel push task with clean and cluttered variants.

A round effector pushes a square block toward a ring-shaped goal inside
the unit square; observations are flat-shaded 64x64x3 renders of the
scene.  Rewards are dense (negative distances) plus a success bonus, so
returns spread well enough for return-guided mining.  The cluttered
variant scatters 3-6 visual-only distractor shapes in near-block
colors.

Everything is deterministic given the seed: placement, stepping, and
rendering are pure functions of the evolving state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

V_MAX = 0.05
EFFECTOR_RADIUS = 0.06
BLOCK_HALF = 0.05          # rendered square half-side
BLOCK_CONTACT_RADIUS = 0.05  # physics treats the block as a disk
GOAL_OUTER = 0.08
GOAL_INNER = 0.05
SUCCESS_RADIUS = 0.06
REWARD_W_REACH = 0.3
REWARD_W_PUSH = 1.0
SUCCESS_BONUS = 5.0

IMAGE_SIZE = 64
BG_COLOR = (40, 40, 48)
EFFECTOR_COLOR = (70, 110, 230)
BLOCK_COLOR = (230, 70, 60)
GOAL_COLOR = (60, 200, 90)
# distractors stay in the block's warm corner of color space
DISTRACTOR_COLORS = (
    (235, 120, 60),
    (200, 60, 120),
    (240, 100, 100),
    (180, 90, 60),
    (215, 140, 120),
    (190, 50, 80),
)


@dataclass
class Distractor:
    kind: int        # 0 = square, 1 = circle
    color: int       # index into DISTRACTOR_COLORS
    size: float      # half-side or radius
    position: np.ndarray


@dataclass
class EnvState:
    effector: np.ndarray
    block: np.ndarray
    goal: np.ndarray
    distractors: list
    step_count: int = 0
    rng: object = field(default=None, repr=False)


def _sample_point(rng, lo, hi):
    return rng.uniform(lo, hi, size=2)


def _sample_layout(rng, clutter):
    goal = _sample_point(rng, 0.15, 0.85)
    for _ in range(200):
        block = _sample_point(rng, 0.15, 0.85)
        if 0.25 <= np.linalg.norm(block - goal) <= 0.6:
            break
    for _ in range(200):
        effector = _sample_point(rng, 0.1, 0.9)
        if np.linalg.norm(effector - block) >= 0.17:
            break
    distractors = []
    if clutter:
        count = int(rng.integers(3, 7))
        while len(distractors) < count:
            p = _sample_point(rng, 0.08, 0.92)
            if (
                np.linalg.norm(p - block) < 0.14
                or np.linalg.norm(p - goal) < 0.15
                or np.linalg.norm(p - effector) < 0.13
                or any(np.linalg.norm(p - d.position) < 0.05 for d in distractors)
            ):
                continue
            distractors.append(
                Distractor(
                    kind=int(rng.integers(0, 2)),
                    color=int(rng.integers(0, len(DISTRACTOR_COLORS))),
                    size=float(rng.uniform(0.03, 0.05)),
                    position=p,
                )
            )
    return EnvState(effector=effector, block=block, goal=goal,
                    distractors=distractors, step_count=0, rng=rng)


# ---------------------------------------------------------------------------
# rendering

_COORDS = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
_XG, _YG = np.meshgrid(_COORDS, _COORDS)  # x along columns, y along rows


def _paint(img, mask, color):
    img[mask] = color


def render(state):
    """Pure rasterization of a state into a 64x64x3 byte image."""
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[:] = BG_COLOR
    gx, gy = state.goal
    d_goal = np.hypot(_XG - gx, _YG - gy)
    _paint(img, (d_goal >= GOAL_INNER) & (d_goal <= GOAL_OUTER), GOAL_COLOR)
    for d in state.distractors:
        dx, dy = d.position
        if d.kind == 0:
            mask = np.maximum(np.abs(_XG - dx), np.abs(_YG - dy)) <= d.size
        else:
            mask = np.hypot(_XG - dx, _YG - dy) <= d.size
        _paint(img, mask, DISTRACTOR_COLORS[d.color])
    bx, by = state.block
    _paint(img, np.maximum(np.abs(_XG - bx), np.abs(_YG - by)) <= BLOCK_HALF, BLOCK_COLOR)
    ex, ey = state.effector
    _paint(img, np.hypot(_XG - ex, _YG - ey) <= EFFECTOR_RADIUS, EFFECTOR_COLOR)
    return img


# ---------------------------------------------------------------------------
# environment

REWARD_LOW = -(REWARD_W_REACH + REWARD_W_PUSH) * np.sqrt(2.0)  # loosest per-step bound


class PushEnv:
    """Single push-task instance; deterministic under its seed."""

    def __init__(self, seed=0, clutter=False, episode_len=50):
        self.clutter = bool(clutter)
        self.episode_len = int(episode_len)
        self.rng = np.random.default_rng(seed)
        self.state = None
        self.done = True
        self._episode_return = 0.0
        self._clip_logged = False

    def reset(self, seed=None, clutter=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        if clutter is not None:
            self.clutter = bool(clutter)
        self.state = _sample_layout(self.rng, self.clutter)
        self.done = False
        self._episode_return = 0.0
        self._clip_logged = False
        return render(self.state)

    def step(self, action):
        if self.done or self.state is None:
            raise RuntimeError("episode finished; call reset() first")
        a = np.asarray(action, dtype=np.float64).reshape(2)
        if np.any(np.abs(a) > 1.0):
            if not self._clip_logged:
                log.debug("action %s outside [-1, 1]^2; clipping", a)
                self._clip_logged = True
            a = np.clip(a, -1.0, 1.0)
        s = self.state
        s.effector = np.clip(s.effector + a * V_MAX, 0.0, 1.0)
        # positional push: expel the block along the contact normal
        d = s.block - s.effector
        dist = float(np.linalg.norm(d))
        overlap = (EFFECTOR_RADIUS + BLOCK_CONTACT_RADIUS) - dist
        if overlap > 0:
            normal = d / dist if dist > 1e-9 else np.array([1.0, 0.0])
            s.block = np.clip(s.block + normal * overlap, 0.0, 1.0)
        d_eb = float(np.linalg.norm(s.effector - s.block))
        d_bg = float(np.linalg.norm(s.block - s.goal))
        success = d_bg < SUCCESS_RADIUS
        reward = REWARD_W_REACH * (-d_eb) + REWARD_W_PUSH * (-d_bg)
        if success:
            reward += SUCCESS_BONUS
        s.step_count += 1
        self._episode_return += reward
        self.done = success or s.step_count >= self.episode_len
        info = {"success": success, "distance_to_goal": d_bg}
        if self.done:
            info["episode_return"] = self._episode_return
            info["episode_length"] = s.step_count
        return render(s), reward, self.done, info

    def render(self):
        return render(self.state)


class VecPushEnv:
    """E independent instances stepped in lockstep, with auto-reset."""

    def __init__(self, num_envs, seed=0, clutter=False, episode_len=50):
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        seeds = seed.spawn(num_envs)
        self.envs = [PushEnv(seed=s, clutter=clutter, episode_len=episode_len)
                     for s in seeds]
        self.num_envs = num_envs

    def reset(self):
        return np.stack([e.reset() for e in self.envs])

    def step(self, actions):
        """actions: (E, 2).  Done envs are reset and return the fresh obs.

        The frame the episode actually ended on is kept under
        ``info["final_observation"]`` so a learner can still bootstrap
        from it when the episode was cut by the step limit rather than
        by success.
        """
        obs = np.empty((self.num_envs, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
        rewards = np.zeros(self.num_envs, dtype=np.float64)
        dones = np.zeros(self.num_envs, dtype=bool)
        infos = []
        for i, env in enumerate(self.envs):
            o, r, d, info = env.step(actions[i])
            if d:
                info["final_observation"] = o
                o = env.reset()
            obs[i], rewards[i], dones[i] = o, r, d
            infos.append(info)
        return obs, rewards, dones, infos


def scripted_push_policy(state):
    """Hand-rolled oracle: swing behind the block, then drive it to the goal.

    Used by tests to certify the task is solvable within the step limit
    and by the heatmap tool to produce meaningful trajectories.
    """
    u = state.goal - state.block
    d_bg = float(np.linalg.norm(u))
    if d_bg < 1e-9:
        return np.zeros(2)
    u = u / d_bg
    rel = state.effector - state.block
    d_eb = float(np.linalg.norm(rel))
    reach = EFFECTOR_RADIUS + BLOCK_CONTACT_RADIUS
    aligned = d_eb > 1e-9 and float(rel @ -u) / d_eb > 0.9 and d_eb < reach + 0.06
    if aligned:
        desired = u  # full-speed push through the block toward the goal
    else:
        staging = state.block - u * (reach - 0.01)
        desired = staging - state.effector
        n = float(np.linalg.norm(desired))
        scale = min(1.0, n / V_MAX)
        desired = desired / n * scale if n > 1e-9 else np.zeros(2)
        if d_eb < reach + 0.03:
            # slide tangentially instead of plowing into the block
            outward = rel / max(d_eb, 1e-9)
            inward_part = float(desired @ -outward)
            if inward_part > 0:
                desired = desired + outward * inward_part
                n2 = float(np.linalg.norm(desired))
                if n2 > 1e-9:
                    desired = desired / n2
                else:
                    desired = np.array([-outward[1], outward[0]])
    return np.clip(desired, -1.0, 1.0)
