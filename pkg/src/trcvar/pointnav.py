"""Point-mass goal navigation with soft obstacle costs.

Desk-scale analog of a LIDAR-free point-goal task: a velocity-damped point
robot accelerates toward goals in a 4x4 arena scattered with circular
hazard regions. Hazards do not block motion; they only emit a logistic
cost of the distance to the nearest hazard surface, so safety must come
from the learned policy, not the physics. The goal respawns on arrival and
the episode ends only at the step limit.
"""

from __future__ import annotations

import numpy as np

from .cmdp import CostFunctionSpec

ARENA_HALF = 2.0
N_OBSTACLES = 6
OBSTACLE_RADIUS = 0.3
GOAL_RADIUS = 0.3
DT = 0.1
MAX_SPEED = 1.0
ACCEL_SCALE = 2.0
DRAG = 0.975
GOAL_BONUS = 1.0
PROGRESS_SCALE = 1.0


class PointNavEnv:
    """Cost-emitting navigation task; observation carries the goal directly."""

    cost_spec = CostFunctionSpec(k=10.0, b=0.2, kind="distance")
    max_episode_steps = 500

    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)
        self.obs_dim = 4 + 2 + 2 * N_OBSTACLES
        self.act_dim = 2
        self.action_low = -np.ones(2)
        self.action_high = np.ones(2)
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.goal = np.zeros(2)
        self.obstacles = np.zeros((N_OBSTACLES, 2))
        self._steps = 0

    def _sample_free_point(self, keep_away, min_dist, margin=0.2):
        for _ in range(200):
            p = self.rng.uniform(-ARENA_HALF + margin, ARENA_HALF - margin, size=2)
            if all(np.linalg.norm(p - q) >= min_dist for q in keep_away):
                return p
        return p

    def reset(self) -> np.ndarray:
        self.pos = self.rng.uniform(-0.5, 0.5, size=2)
        self.vel = np.zeros(2)
        placed = [self.pos]
        obstacles = []
        for _ in range(N_OBSTACLES):
            # spacing keeps corridors open and the spawn point out of hazards
            p = self._sample_free_point(placed, min_dist=0.85)
            obstacles.append(p)
            placed.append(p)
        self.obstacles = np.array(obstacles)
        self.goal = self._sample_free_point(placed, min_dist=0.8)
        self._steps = 0
        return self._observe()

    def _observe(self) -> np.ndarray:
        rel_obs = (self.obstacles - self.pos).ravel()
        return np.concatenate([self.pos, self.vel, self.goal - self.pos, rel_obs])

    def _min_obstacle_distance(self) -> float:
        gaps = np.linalg.norm(self.obstacles - self.pos, axis=1) - OBSTACLE_RADIUS
        return float(gaps.min())

    def step(self, action: np.ndarray):
        """Returns (obs, reward, cost, terminal, info). terminal is always
        False here (episodes end only by the step limit)."""
        a = np.clip(np.asarray(action, dtype=float), self.action_low, self.action_high)
        before = np.linalg.norm(self.goal - self.pos)
        self.vel = DRAG * self.vel + ACCEL_SCALE * a * DT
        speed = np.linalg.norm(self.vel)
        if speed > MAX_SPEED:
            self.vel *= MAX_SPEED / speed
        self.pos = self.pos + self.vel * DT
        hit_wall = (self.pos < -ARENA_HALF) | (self.pos > ARENA_HALF)
        self.pos = np.clip(self.pos, -ARENA_HALF, ARENA_HALF)
        self.vel[hit_wall] = 0.0

        after = np.linalg.norm(self.goal - self.pos)
        reward = PROGRESS_SCALE * (before - after)
        reached = after < GOAL_RADIUS
        if reached:
            reward += GOAL_BONUS
            keep_away = [self.pos] + list(self.obstacles)
            self.goal = self._sample_free_point(keep_away, min_dist=0.8)

        cost = self.cost_spec(self._min_obstacle_distance())
        self._steps += 1
        info = {"goal_reached": bool(reached), "steps": self._steps}
        return self._observe(), float(reward), float(cost), False, info
