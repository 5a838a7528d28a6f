"""Experience containers, cost-signal conventions, and safety metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CV_THRESHOLD = 0.5


@dataclass
class Transition:
    """One environment step.

    behavior_prob is the density (or mass) of the stored action under the
    policy that sampled it; it must be strictly positive so importance
    ratios are well defined. cost must be nonnegative.
    """

    state: np.ndarray
    action: np.ndarray
    behavior_prob: float
    reward: float
    cost: float
    next_state: np.ndarray
    terminal: bool = False

    def __post_init__(self):
        if self.cost < 0.0:
            raise ValueError(f"cost must be nonnegative, got {self.cost}")
        if not self.behavior_prob > 0.0:
            raise ValueError(f"behavior_prob must be positive, got {self.behavior_prob}")


@dataclass
class Trajectory:
    """A contiguous run of transitions from one episode.

    start_time is the within-episode index of the first transition, needed
    for discount weights when an episode spans collection phases. A
    trajectory whose last transition has terminal=True ended the episode;
    otherwise it was cut (step limit or phase boundary) and value targets
    bootstrap at the final next_state.
    """

    transitions: list[Transition] = field(default_factory=list)
    start_time: int = 0

    def __len__(self) -> int:
        return len(self.transitions)

    def append(self, t: Transition):
        self.transitions.append(t)

    @property
    def terminal(self) -> bool:
        return bool(self.transitions) and self.transitions[-1].terminal

    def validate_chain(self) -> bool:
        """next_state of step i must equal state of step i+1."""
        return all(
            np.array_equal(a.next_state, b.state)
            for a, b in zip(self.transitions, self.transitions[1:])
        )


def cost_return(traj: Trajectory, gamma: float) -> tuple[float, bool]:
    """Discounted cost sum of one trajectory.

    Returns (value, empty_flag); an empty trajectory yields 0 with the
    flag raised instead of an error. Discounting starts at the
    trajectory's own start_time so partial segments stay consistent.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if len(traj) == 0:
        return 0.0, True
    total = 0.0
    for k, t in enumerate(traj.transitions):
        total += gamma ** (traj.start_time + k) * t.cost
    return total, False


class ReplayBuffer:
    """FIFO store of trajectory segments holding at most `capacity` steps.

    Eviction is oldest-first at step granularity: the oldest segment is
    head-trimmed when a partial eviction is needed, so the buffer always
    holds exactly the most recent steps and every stored segment remains
    contiguous (as retrace requires).
    """

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.segments: list[Trajectory] = []
        self.total_steps = 0

    def append(self, segments: list[Trajectory] | Trajectory):
        if isinstance(segments, Trajectory):
            segments = [segments]
        for seg in segments:
            if len(seg) == 0:
                continue
            self.segments.append(seg)
            self.total_steps += len(seg)
        self._evict()

    def _evict(self):
        while self.total_steps > self.capacity:
            excess = self.total_steps - self.capacity
            head = self.segments[0]
            if len(head) <= excess:
                self.segments.pop(0)
                self.total_steps -= len(head)
            else:
                self.segments[0] = Trajectory(
                    transitions=head.transitions[excess:],
                    start_time=head.start_time + excess,
                )
                self.total_steps -= excess

    def sample_batch(self, batch_steps: int, rng: np.random.Generator):
        """Draw whole segments uniformly without replacement until their
        cumulative length first reaches batch_steps.

        Returns (segments, short_flag); short_flag is set when the buffer
        holds fewer than batch_steps steps, in which case everything is
        returned.
        """
        if self.total_steps == 0:
            raise ValueError("cannot sample from an empty buffer")
        if self.total_steps < batch_steps:
            return list(self.segments), True
        order = rng.permutation(len(self.segments))
        picked, steps = [], 0
        for idx in order:
            picked.append(self.segments[idx])
            steps += len(self.segments[idx])
            if steps >= batch_steps:
                break
        return picked, False


@dataclass(frozen=True)
class CostFunctionSpec:
    """Logistic cost template sigmoid(k(b - x)) or sigmoid(k(|x| - b)).

    kind="distance" penalizes small x (distances, heights); kind="angle"
    penalizes large |x|. Output is strictly inside (0, 1) for finite x.
    """

    k: float
    b: float
    kind: str = "distance"

    def __post_init__(self):
        if self.k <= 0.0:
            raise ValueError("slope k must be positive")
        if self.kind not in ("distance", "angle"):
            raise ValueError(f"unknown cost kind {self.kind!r}")

    def __call__(self, x: float) -> float:
        return logistic_cost(x, self)


def logistic_cost(x: float, spec: CostFunctionSpec) -> float:
    if not math.isfinite(x):
        raise ValueError(f"cost input must be finite, got {x}")
    z = spec.k * (spec.b - x) if spec.kind == "distance" else spec.k * (abs(x) - spec.b)
    # stable sigmoid
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def count_cv(cost: float) -> int:
    """A step is a constraint violation when its cost reaches 0.5 (inclusive)."""
    return 1 if cost >= CV_THRESHOLD else 0


def score(reward_sum: float, cv_count: int) -> float:
    """Safety-adjusted performance: reward sum over (1 + violation count)."""
    if cv_count < 0:
        raise ValueError("cv_count must be nonnegative")
    return reward_sum / (1.0 + cv_count)


@dataclass
class EpisodeMetrics:
    """Per-episode record with the derived safety-adjusted score."""

    reward_sum: float
    cv_count: int
    length: int
    bootstrap_tail: bool = False

    @property
    def cost_rate(self) -> float:
        return self.cv_count / self.length if self.length > 0 else 0.0

    @property
    def score(self) -> float:
        return score(self.reward_sum, self.cv_count)
