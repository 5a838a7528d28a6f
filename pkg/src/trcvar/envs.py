"""Environment registry and the sampling wrapper for tabular CMDPs."""

from __future__ import annotations

import numpy as np

from .oracle import TabularCMDP, random_cmdp
from .pointnav import PointNavEnv


class TabularEnv:
    """Exposes a finite CMDP through the continuous-control interface.

    Observations are one-hot state vectors; the single continuous action in
    [-1, 1] is binned into the discrete action set, so the same Gaussian
    policy stack trains on tabular and continuous tasks alike.
    """

    max_episode_steps = 100

    def __init__(self, model: TabularCMDP, seed: int | None = None):
        self.model = model
        self.rng = np.random.default_rng(seed)
        self.obs_dim = model.num_states
        self.act_dim = 1
        self.action_low = -np.ones(1)
        self.action_high = np.ones(1)
        self.state = 0
        self._steps = 0

    def action_to_index(self, action) -> int:
        a = float(np.clip(np.asarray(action).ravel()[0], -1.0, 1.0))
        idx = int((a + 1.0) / 2.0 * self.model.num_actions)
        return min(idx, self.model.num_actions - 1)

    def _observe(self) -> np.ndarray:
        obs = np.zeros(self.model.num_states)
        obs[self.state] = 1.0
        return obs

    def reset(self) -> np.ndarray:
        self.state = int(self.rng.choice(self.model.num_states, p=self.model.rho))
        self._steps = 0
        return self._observe()

    def step(self, action):
        a = self.action_to_index(action)
        s = self.state
        s_next = int(self.rng.choice(self.model.num_states, p=self.model.P[s, a]))
        reward = float(self.model.R[s, a, s_next])
        cost = float(self.model.C[s, a, s_next])
        self.state = s_next
        self._steps += 1
        return self._observe(), reward, cost, False, {"steps": self._steps}


def make_env(env_id: str, seed: int | None = None):
    """Build an environment from its string id.

    Supported ids: "pointnav" and "tabular:<seed>" (the integer seeds the
    random CMDP instance; the sampling stream is seeded separately).
    """
    if env_id == "pointnav":
        return PointNavEnv(seed=seed)
    if env_id.startswith("tabular:"):
        model_seed = int(env_id.split(":", 1)[1])
        model = random_cmdp(np.random.default_rng(model_seed), gamma=0.9)
        return TabularEnv(model, seed=seed)
    raise ValueError(f"unknown environment id {env_id!r}")
