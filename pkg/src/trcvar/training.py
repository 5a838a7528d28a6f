"""Training orchestration: collection, updates, logging, checkpoints, eval."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .cmdp import EpisodeMetrics, ReplayBuffer, Trajectory, Transition, count_cv
from .config import TrainConfig, config_snapshot
from .envs import make_env
from .optimizer import Batch, CVaRConfig, TrcOptimizer
from .policy import CriticSet, GaussianPolicy

METRIC_COLUMNS = ["epoch", "env_steps", "reward_sum", "cost_rate", "cv_count",
                  "score", "cum_cv"]
DIAG_COLUMNS = ["epoch", "j_cost", "j_sq", "approx_cvar", "c_slack", "delta_old",
                "measured_kl", "dual_tr", "dual_constraint", "recovery",
                "backtracks", "accepted", "objective",
                "value_loss", "cost_value_loss", "square_value_loss"]


class NumericalAbort(RuntimeError):
    """Raised when training hits non-finite numbers; maps to exit code 3."""


@dataclass
class RunLog:
    metrics: list[dict] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)

    def cumulative_cv(self) -> int:
        return int(self.metrics[-1]["cum_cv"]) if self.metrics else 0

    def write(self, out_dir: str | Path):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, rows, cols in (("metrics.csv", self.metrics, METRIC_COLUMNS),
                                 ("diagnostics.csv", self.diagnostics, DIAG_COLUMNS)):
            with open(out_dir / name, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=cols)
                writer.writeheader()
                writer.writerows(rows)


class Collector:
    """Steps one environment, cutting trajectory segments at episode ends
    and collection-phase boundaries while tracking episode metrics."""

    def __init__(self, env, policy: GaussianPolicy, rng: np.random.Generator,
                 max_episode_steps: int | None = None):
        self.env = env
        self.policy = policy
        self.rng = rng
        self.max_episode_steps = max_episode_steps or env.max_episode_steps
        self.obs = env.reset()
        self.episode_steps = 0
        self.episode_reward = 0.0
        self.episode_cv = 0

    def collect(self, n_steps: int) -> tuple[list[Trajectory], list[EpisodeMetrics]]:
        segments: list[Trajectory] = []
        finished: list[EpisodeMetrics] = []
        current = Trajectory(start_time=self.episode_steps)
        for _ in range(n_steps):
            action, prob = self.policy.sample(self.obs, self.rng)
            next_obs, reward, cost, terminal, _ = self.env.step(action)
            truncated = self.episode_steps + 1 >= self.max_episode_steps
            current.append(Transition(
                state=self.obs, action=action, behavior_prob=prob, reward=reward,
                cost=cost, next_state=next_obs, terminal=terminal,
            ))
            self.obs = next_obs
            self.episode_steps += 1
            self.episode_reward += reward
            self.episode_cv += count_cv(cost)
            if terminal or truncated:
                finished.append(EpisodeMetrics(
                    reward_sum=self.episode_reward, cv_count=self.episode_cv,
                    length=self.episode_steps, bootstrap_tail=not terminal,
                ))
                segments.append(current)
                self.obs = self.env.reset()
                self.episode_steps = 0
                self.episode_reward = 0.0
                self.episode_cv = 0
                current = Trajectory(start_time=0)
        if len(current) > 0:
            segments.append(current)
        return segments, finished


def _build_components(cfg: TrainConfig):
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    env = make_env(cfg.env, seed=int(seeds[0].generate_state(1)[0]))
    init_rng = np.random.default_rng(seeds[1])
    sample_rng = np.random.default_rng(seeds[2])
    batch_rng = np.random.default_rng(seeds[3])
    policy = GaussianPolicy(env.obs_dim, env.act_dim, hidden=cfg.hidden, rng=init_rng)
    critics = CriticSet(env.obs_dim, hidden=cfg.hidden, rng=init_rng, lr=cfg.lr)
    optimizer = TrcOptimizer(
        policy, critics,
        CVaRConfig(alpha=cfg.alpha, cost_limit=cfg.cost_limit, gamma=cfg.gamma),
        delta=cfg.delta, lam=cfg.trace_decay, damping=cfg.damping,
        cg_iters=cfg.cg_iters, line_search_max=cfg.line_search_max,
        critic_iters=cfg.critic_iters, assume_onpolicy=cfg.assume_onpolicy,
        unconstrained=cfg.unconstrained,
    )
    return env, policy, critics, optimizer, sample_rng, batch_rng


def train(cfg: TrainConfig, out_dir: str | Path | None = None) -> RunLog:
    """Run the full collect/update loop; deterministic under cfg.seed.

    Writes config snapshot, CSV logs, and checkpoints when out_dir is set
    (defaults to cfg.out_dir). Raises NumericalAbort after rolling back to
    the last checkpoint if anything becomes non-finite.
    """
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_snapshot(cfg))

    env, policy, critics, optimizer, sample_rng, batch_rng = _build_components(cfg)
    collector = Collector(env, policy, sample_rng,
                          max_episode_steps=cfg.max_episode_steps or None)
    buffer = ReplayBuffer(cfg.replay_length)
    log = RunLog()
    ckpt_path = out / "checkpoint.npz"

    def checkpoint(epoch):
        save_checkpoint(ckpt_path, policy, critics, epoch, cfg.env, cfg.hidden,
                        rng=sample_rng)

    checkpoint(0)
    cum_cv = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            rollout, episodes = collector.collect(cfg.collect_steps)
            epoch_cv = sum(count_cv(t.cost) for seg in rollout for t in seg.transitions)
            cum_cv += epoch_cv
            buffer.append(rollout)
            batch_segments, _ = buffer.sample_batch(cfg.batch_size, batch_rng)
            batch = Batch.from_segments(batch_segments)

            diag = optimizer.policy_update(batch, rollout)
            targets = optimizer.compute_targets(batch)
            report = optimizer.update_critics(batch, targets)

            if not np.all(np.isfinite(policy.get_params())):
                raise FloatingPointError("non-finite policy parameters")

            if episodes:
                reward_sum = float(np.mean([e.reward_sum for e in episodes]))
                cost_rate = float(np.mean([e.cost_rate for e in episodes]))
                ep_score = float(np.mean([e.score for e in episodes]))
            else:
                reward_sum = cost_rate = ep_score = float("nan")
            log.metrics.append({
                "epoch": epoch, "env_steps": epoch * cfg.collect_steps,
                "reward_sum": reward_sum, "cost_rate": cost_rate,
                "cv_count": epoch_cv, "score": ep_score, "cum_cv": cum_cv,
            })
            log.diagnostics.append({
                "epoch": epoch, "j_cost": diag.j_cost, "j_sq": diag.j_sq,
                "approx_cvar": diag.approx_cvar, "c_slack": diag.c_slack,
                "delta_old": diag.delta_old, "measured_kl": diag.measured_kl,
                "dual_tr": diag.dual_tr, "dual_constraint": diag.dual_constraint,
                "recovery": int(diag.recovery), "backtracks": diag.backtracks,
                "accepted": int(diag.accepted), "objective": diag.objective,
                "value_loss": report.value_loss,
                "cost_value_loss": report.cost_value_loss,
                "square_value_loss": report.square_value_loss,
            })
            if epoch % cfg.checkpoint_every == 0:
                checkpoint(epoch)
    except FloatingPointError as err:
        # roll back to the last good parameters before surfacing the abort
        _, ckpt_policy, ckpt_critics, _ = load_checkpoint(ckpt_path)
        policy.set_params(ckpt_policy.get_params())
        for name, critic in critics.networks().items():
            critic.net.set_params(ckpt_critics.networks()[name].net.get_params())
        log.write(out)
        raise NumericalAbort(str(err)) from err

    checkpoint(cfg.epochs)
    log.write(out)
    return log


def evaluate(checkpoint_path: str | Path, env_id: str | None = None,
             episodes: int = 10, seed: int = 0, gamma: float = 0.99) -> dict:
    """Deterministic mean-action rollouts of a saved policy.

    Reports mean/std of reward sum, CV count, and score, plus discounted
    reward/cost returns for oracle comparisons. Rejects checkpoints whose
    dimensions do not match the requested environment.
    """
    meta, policy, _, _ = load_checkpoint(checkpoint_path)
    env_id = env_id or meta["env_id"]
    env = make_env(env_id, seed=seed)
    if env.obs_dim != meta["obs_dim"] or env.act_dim != meta["act_dim"]:
        raise ValueError(
            f"checkpoint dims ({meta['obs_dim']}, {meta['act_dim']}) do not match "
            f"environment {env_id!r} ({env.obs_dim}, {env.act_dim})")
    rewards, cvs, scores, disc_r, disc_c = [], [], [], [], []
    for _ in range(episodes):
        obs = env.reset()
        total_r = 0.0
        total_cv = 0
        dr = dc = 0.0
        for t in range(env.max_episode_steps):
            action = np.clip(policy.mean_action(obs), env.action_low, env.action_high)
            obs, r, c, terminal, _ = env.step(action)
            total_r += r
            total_cv += count_cv(c)
            dr += gamma**t * r
            dc += gamma**t * c
            if terminal:
                break
        rewards.append(total_r)
        cvs.append(total_cv)
        scores.append(total_r / (1.0 + total_cv))
        disc_r.append(dr)
        disc_c.append(dc)
    return {
        "episodes": episodes,
        "reward_sum_mean": float(np.mean(rewards)),
        "reward_sum_std": float(np.std(rewards)),
        "cv_mean": float(np.mean(cvs)),
        "cv_std": float(np.std(cvs)),
        "score_mean": float(np.mean(scores)),
        "score_std": float(np.std(scores)),
        "discounted_return_mean": float(np.mean(disc_r)),
        "discounted_cost_return_mean": float(np.mean(disc_c)),
    }
