"""Diagonal-Gaussian policy, scalar critics, and trust-region KL machinery.

The policy mean comes from an MLP; log standard deviations are free
state-independent parameters kept inside [-5, 2]. The KL Hessian-vector
product uses the exact Gauss-Newton identity at the expansion point (the
first-order stat terms of the KL Hessian vanish there), implemented as a
forward parameter tangent, a diagonal Fisher scaling, and a reverse pass.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Adam, Mlp, sigmoid, softplus

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG2PI = np.log(2.0 * np.pi)


class GaussianPolicy:
    def __init__(self, obs_dim: int, act_dim: int, hidden: int = 64,
                 rng: np.random.Generator | None = None, init_log_std: float = -0.5):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.mean_net = Mlp([obs_dim, hidden, hidden, act_dim], rng=rng)
        self.log_std = np.full(act_dim, float(init_log_std))
        self.n_params = self.mean_net.n_params + act_dim

    # -------- flat parameter plumbing --------
    def get_params(self) -> np.ndarray:
        return np.concatenate([self.mean_net.get_params(), self.log_std])

    def set_params(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError("parameter length mismatch")
        self.mean_net.set_params(flat[: self.mean_net.n_params])
        # stored log-stds stay inside the clamp so sigma is always valid
        self.log_std = np.clip(flat[self.mean_net.n_params :], LOG_STD_MIN, LOG_STD_MAX)

    def _std_mask(self) -> np.ndarray:
        return ((self.log_std > LOG_STD_MIN) & (self.log_std < LOG_STD_MAX)).astype(float)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_std)

    # -------- distribution evaluations --------
    def stats(self, states: np.ndarray):
        """Means with forward cache, plus the shared sigma vector."""
        means, cache = self.mean_net.forward_cache(states)
        return means, cache, self.sigma

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        means = self.mean_net.forward(states)
        return gaussian_log_prob(actions, means, self.sigma)

    def sample(self, state: np.ndarray, rng: np.random.Generator):
        """Draw one action; returns (action, density) with the density of
        the unsquashed Gaussian, which is what gets stored as prob_t."""
        mean = self.mean_net.forward(state)[0]
        noise = rng.standard_normal(self.act_dim)
        action = mean + self.sigma * noise
        logp = gaussian_log_prob(action[None, :], mean[None, :], self.sigma)[0]
        return action, float(np.exp(logp))

    def mean_action(self, state: np.ndarray) -> np.ndarray:
        return self.mean_net.forward(state)[0]

    # -------- gradients --------
    def log_prob_grad(self, states: np.ndarray, actions: np.ndarray,
                      coeffs: np.ndarray) -> np.ndarray:
        """Flat gradient of sum_t coeffs[t] * log pi(a_t | s_t)."""
        means, cache, sig = self.stats(states)
        diff = (np.atleast_2d(actions) - means) / sig**2
        d_mean = diff * coeffs[:, None]
        g_mean = self.mean_net.backward(cache, d_mean)
        d_logstd = (((np.atleast_2d(actions) - means) ** 2 / sig**2 - 1.0)
                    * coeffs[:, None]).sum(axis=0) * self._std_mask()
        return np.concatenate([g_mean, d_logstd])

    def mean_kl(self, states: np.ndarray, old_means: np.ndarray,
                old_sigma: np.ndarray) -> float:
        """Batch average of KL(old || current), old treated as constant."""
        means = self.mean_net.forward(states)
        sig = self.sigma
        kl = (np.log(sig) - np.log(old_sigma)
              + (old_sigma**2 + (old_means - means) ** 2) / (2.0 * sig**2) - 0.5)
        return float(kl.sum(axis=1).mean())

    def mean_kl_grad(self, states: np.ndarray, old_means: np.ndarray,
                     old_sigma: np.ndarray) -> np.ndarray:
        means, cache, sig = self.stats(states)
        n = means.shape[0]
        d_mean = (means - old_means) / sig**2 / n
        g_mean = self.mean_net.backward(cache, d_mean)
        d_logstd = (1.0 - (old_sigma**2 + (old_means - means) ** 2) / sig**2).mean(axis=0)
        return np.concatenate([g_mean, d_logstd * self._std_mask()])

    def kl_hvp(self, cache, sigma_old: np.ndarray, v: np.ndarray,
               damping: float = 0.01) -> np.ndarray:
        """Hessian of the mean KL at the current parameters, times v."""
        n_mean = self.mean_net.n_params
        v_mean, v_std = v[:n_mean], v[n_mean:]
        batch = cache[0][0].shape[0]
        tangent = self.mean_net.param_jvp(cache, v_mean)
        h_mean = self.mean_net.backward(cache, tangent / sigma_old**2 / batch)
        h_std = 2.0 * v_std * self._std_mask()
        return np.concatenate([h_mean, h_std]) + damping * v


def gaussian_log_prob(actions: np.ndarray, means: np.ndarray,
                      sigma: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(actions)
    m = np.atleast_2d(means)
    z = (a - m) / sigma
    return -0.5 * (z**2).sum(axis=1) - np.log(sigma).sum() - 0.5 * a.shape[1] * LOG2PI


def diag_gaussian_kl(mean_p, sigma_p, mean_q, sigma_q) -> np.ndarray:
    """KL(p || q) per row for diagonal Gaussians."""
    mp, mq = np.atleast_2d(mean_p), np.atleast_2d(mean_q)
    kl = (np.log(sigma_q) - np.log(sigma_p)
          + (sigma_p**2 + (mp - mq) ** 2) / (2.0 * sigma_q**2) - 0.5)
    return kl.sum(axis=1)


class ScalarCritic:
    """State -> scalar network; optional softplus keeps the output >= 0."""

    def __init__(self, obs_dim: int, hidden: int = 64, nonnegative: bool = False,
                 rng: np.random.Generator | None = None, lr: float = 2e-4):
        self.net = Mlp([obs_dim, hidden, hidden, 1], rng=rng)
        self.nonnegative = nonnegative
        self.optimizer = Adam(self.net.n_params, lr=lr)

    def predict(self, states: np.ndarray) -> np.ndarray:
        z = self.net.forward(states)[:, 0]
        return softplus(z) if self.nonnegative else z

    def mse_and_grad(self, states: np.ndarray, targets: np.ndarray):
        z, cache = self.net.forward_cache(states)
        z = z[:, 0]
        pred = softplus(z) if self.nonnegative else z
        err = pred - targets
        loss = float(np.mean(err**2))
        dz = 2.0 * err / err.size
        if self.nonnegative:
            dz = dz * sigmoid(z)
        grad = self.net.backward(cache, dz[:, None])
        return loss, grad

    def train_step(self, states: np.ndarray, targets: np.ndarray) -> float:
        loss, grad = self.mse_and_grad(states, targets)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite critic loss")
        self.net.set_params(self.optimizer.step(self.net.get_params(), grad))
        return loss


class CriticSet:
    """Value, cost value, and nonnegative cost-square value critics."""

    def __init__(self, obs_dim: int, hidden: int = 64,
                 rng: np.random.Generator | None = None, lr: float = 2e-4):
        rng = rng if rng is not None else np.random.default_rng()
        self.value = ScalarCritic(obs_dim, hidden, rng=rng, lr=lr)
        self.cost_value = ScalarCritic(obs_dim, hidden, rng=rng, lr=lr)
        self.square_value = ScalarCritic(obs_dim, hidden, nonnegative=True, rng=rng, lr=lr)

    def networks(self):
        return {"value": self.value, "cost_value": self.cost_value,
                "square_value": self.square_value}
