"""Exact solver for finite constrained MDPs.

Everything here is closed-form linear algebra on small transition tensors:
value / cost-value / cost-square-value functions, discounted and doubly
discounted state distributions, Gaussian and empirical CVaR, off-policy
surrogate evaluations, and the analytic error bounds that relate them.
Serves as the ground-truth oracle for the sampling-based training stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm


@dataclass(frozen=True)
class TabularCMDP:
    """Finite CMDP with dense transition/reward/cost tensors.

    P[s, a, s'] rows sum to one, C >= 0 elementwise, rho is the initial
    state distribution and gamma in (0, 1).
    """

    P: np.ndarray
    R: np.ndarray
    C: np.ndarray
    rho: np.ndarray
    gamma: float

    def __post_init__(self):
        P, R, C, rho = (np.asarray(x, dtype=float) for x in (self.P, self.R, self.C, self.rho))
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "rho", rho)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"P must have shape (nS, nA, nS), got {P.shape}")
        if R.shape != P.shape or C.shape != P.shape:
            raise ValueError("R and C must match the shape of P")
        if np.any(C < 0):
            raise ValueError("cost tensor must be nonnegative")
        if not np.allclose(P.sum(axis=2), 1.0, atol=1e-10):
            raise ValueError("transition rows must sum to 1")
        if not np.isclose(rho.sum(), 1.0, atol=1e-10) or np.any(rho < 0):
            raise ValueError("rho must be a distribution over states")

    @property
    def num_states(self) -> int:
        return self.P.shape[0]

    @property
    def num_actions(self) -> int:
        return self.P.shape[1]


@dataclass(frozen=True)
class TabularPolicy:
    """Stochastic policy as an (nS, nA) row-stochastic matrix."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-10):
            raise ValueError("policy rows must be distributions over actions")


@dataclass
class ExactQuantities:
    """All closed-form quantities of one (CMDP, policy) pair."""

    v: np.ndarray
    q: np.ndarray
    adv: np.ndarray
    v_cost: np.ndarray
    q_cost: np.ndarray
    adv_cost: np.ndarray
    sq_state: np.ndarray
    sq_state_action: np.ndarray
    adv_sq: np.ndarray
    d_gamma: np.ndarray
    d_gamma2: np.ndarray
    j: float = 0.0
    j_cost: float = 0.0
    j_sq: float = 0.0


@dataclass
class Epsilons:
    """Max-absolute advantages and the composite CVaR constant."""

    eps_r: float
    eps_c: float
    eps_s: float
    eps_cvar: float = field(default=np.nan)


def _policy_kernel(m: TabularCMDP, pi: TabularPolicy) -> np.ndarray:
    # P_pi[s, s'] = sum_a pi(a|s) P[s, a, s']
    return np.einsum("sa,sat->st", pi.probs, m.P)


def _expected_signal(m: TabularCMDP, signal: np.ndarray) -> np.ndarray:
    # per-(s, a) expectation over next states
    return np.einsum("sat,sat->sa", m.P, signal)


def solve_values(m: TabularCMDP, pi: TabularPolicy) -> ExactQuantities:
    """Solve the Bellman linear systems exactly for one policy.

    Returns reward and cost value/advantage functions, the cost-square
    values, both discounted state distributions, and the scalar returns.
    """
    p_pi = _policy_kernel(m, pi)
    eye = np.eye(m.num_states)

    r_sa = _expected_signal(m, m.R)
    c_sa = _expected_signal(m, m.C)
    r_pi = np.einsum("sa,sa->s", pi.probs, r_sa)
    c_pi = np.einsum("sa,sa->s", pi.probs, c_sa)

    a_mat = eye - m.gamma * p_pi
    v = np.linalg.solve(a_mat, r_pi)
    v_cost = np.linalg.solve(a_mat, c_pi)

    q = r_sa + m.gamma * np.einsum("sat,t->sa", m.P, v)
    q_cost = c_sa + m.gamma * np.einsum("sat,t->sa", m.P, v_cost)
    adv = q - v[:, None]
    adv_cost = q_cost - v_cost[:, None]

    # cost-square recursion: S(s,a) = E[c^2 + 2 gamma c V_C(s') + gamma^2 S(s')]
    u_sa = _expected_signal(m, m.C**2) + 2.0 * m.gamma * np.einsum(
        "sat,sat,t->sa", m.P, m.C, v_cost
    )
    u_pi = np.einsum("sa,sa->s", pi.probs, u_sa)
    sq_state = np.linalg.solve(eye - m.gamma**2 * p_pi, u_pi)
    sq_sa = u_sa + m.gamma**2 * np.einsum("sat,t->sa", m.P, sq_state)
    adv_sq = sq_sa - sq_state[:, None]

    d_gamma = (1.0 - m.gamma) * np.linalg.solve(a_mat.T, m.rho)
    d_gamma2 = (1.0 - m.gamma**2) * np.linalg.solve((eye - m.gamma**2 * p_pi).T, m.rho)

    out = ExactQuantities(
        v=v, q=q, adv=adv,
        v_cost=v_cost, q_cost=q_cost, adv_cost=adv_cost,
        sq_state=sq_state, sq_state_action=sq_sa, adv_sq=adv_sq,
        d_gamma=d_gamma, d_gamma2=d_gamma2,
    )
    out.j = float(m.rho @ v)
    out.j_cost = float(m.rho @ v_cost)
    out.j_sq = float(m.rho @ sq_state)
    return out


def discounted_dists(m: TabularCMDP, pi: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Normalized occupancy measures with gamma^t and gamma^{2t} weights."""
    ex = solve_values(m, pi)
    return ex.d_gamma, ex.d_gamma2


def exact_J(m: TabularCMDP, pi: TabularPolicy) -> tuple[float, float, float]:
    """Scalar returns (J, J_C, J_S), cross-checked through both routes.

    Route one is rho . V; route two integrates the per-step signal against
    the discounted state distribution. Raises if they disagree, which would
    indicate a broken linear solve.
    """
    ex = solve_values(m, pi)
    c_sa = _expected_signal(m, m.C)
    u_sa = _expected_signal(m, m.C**2) + 2.0 * m.gamma * np.einsum(
        "sat,sat,t->sa", m.P, m.C, ex.v_cost
    )
    j_cost_dist = float(ex.d_gamma @ np.einsum("sa,sa->s", pi.probs, c_sa)) / (1.0 - m.gamma)
    j_sq_dist = float(ex.d_gamma2 @ np.einsum("sa,sa->s", pi.probs, u_sa)) / (1.0 - m.gamma**2)
    if abs(j_cost_dist - ex.j_cost) > 1e-8 or abs(j_sq_dist - ex.j_sq) > 1e-8:
        raise ArithmeticError("evaluation routes for J_C/J_S disagree")
    return ex.j, ex.j_cost, ex.j_sq


def gaussian_cvar(j_cost: float, j_sq: float, alpha: float) -> float:
    """Upper-tail CVaR of a Gaussian with mean J_C and second moment J_S.

    alpha is the tail mass; alpha=1 recovers the expectation (factor
    defined as exactly zero there).
    """
    variance = _checked_variance(j_cost, j_sq)
    return j_cost + cvar_factor(alpha) * np.sqrt(variance)


def cvar_factor(alpha: float) -> float:
    """phi(Phi^-1(alpha)) / alpha, with the alpha=1 limit pinned to 0."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return 0.0
    return float(norm.pdf(norm.ppf(alpha)) / alpha)


def _checked_variance(j_cost: float, j_sq: float) -> float:
    variance = j_sq - j_cost**2
    if variance < -1e-8:
        raise ValueError(f"second moment below squared mean: variance={variance}")
    return max(variance, 0.0)


def empirical_cvar(samples, alpha: float) -> float:
    """CVaR of the empirical distribution at tail mass alpha.

    Evaluates the variational form min_nu nu + E[(X - nu)_+] / alpha at its
    minimizing order statistic, i.e. the mean of the worst alpha fraction
    with the boundary sample fractionally weighted.
    """
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ValueError("empirical CVaR needs at least one sample")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if x.size < 1.0 / alpha:
        raise ValueError(f"need at least {int(np.ceil(1.0 / alpha))} samples for alpha={alpha}")
    x = np.sort(x)[::-1]
    tail = alpha * x.size
    k = int(np.ceil(tail))
    return float((x[: k - 1].sum() + (tail - (k - 1)) * x[k - 1]) / tail)


def surrogate_J(
    m: TabularCMDP,
    mu: TabularPolicy,
    pi: TabularPolicy,
    pi_new: TabularPolicy,
) -> tuple[float, float, float]:
    """Off-policy surrogate estimates (J, J_C, J_S) of pi_new.

    Uses data-distribution weights of mu and advantages of pi; exact up to
    the first-order correction term. mu must cover the support of pi_new.
    """
    if np.any((mu.probs <= 0.0) & (pi_new.probs > 0.0)):
        raise ValueError("behavior policy has zero mass on the support of the target policy")
    ex_pi = solve_values(m, pi)
    ex_mu = solve_values(m, mu)
    corr = np.einsum("s,sa,sa->", ex_mu.d_gamma, pi_new.probs, ex_pi.adv)
    corr_cost = np.einsum("s,sa,sa->", ex_mu.d_gamma, pi_new.probs, ex_pi.adv_cost)
    corr_sq = np.einsum("s,sa,sa->", ex_mu.d_gamma2, pi_new.probs, ex_pi.adv_sq)
    j = ex_pi.j + corr / (1.0 - m.gamma)
    j_cost = ex_pi.j_cost + corr_cost / (1.0 - m.gamma)
    j_sq = ex_pi.j_sq + corr_sq / (1.0 - m.gamma**2)
    return float(j), float(j_cost), float(j_sq)


def max_tv(mu: TabularPolicy, pi_new: TabularPolicy) -> float:
    """Max over states of the total variation between action distributions."""
    return float(0.5 * np.abs(mu.probs - pi_new.probs).sum(axis=1).max())


def epsilons(m: TabularCMDP, pi: TabularPolicy) -> Epsilons:
    ex = solve_values(m, pi)
    return Epsilons(
        eps_r=float(np.abs(ex.adv).max()),
        eps_c=float(np.abs(ex.adv_cost).max()),
        eps_s=float(np.abs(ex.adv_sq).max()),
    )


@dataclass
class BoundCheck:
    """One inequality instance: lhs <= rhs up to numerical slack."""

    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return self.rhs - self.lhs

    def holds(self, tol: float = 1e-9) -> bool:
        return self.gap >= -tol


def theorem1_check(
    m: TabularCMDP,
    mu: TabularPolicy,
    pi: TabularPolicy,
    pi_new: TabularPolicy,
    alpha: float,
) -> BoundCheck:
    """CVaR upper bound: true Gaussian CVaR of pi_new vs surrogate + penalty.

    The penalty combines the cost-surrogate constant with the composite
    CVaR constant scaled by phi(Phi^-1(alpha))/alpha and both TV products.
    Requires the surrogate variance and approximated CVaR to be positive.
    """
    gamma = m.gamma
    _, j_cost_new, j_sq_new = exact_J(m, pi_new)
    lhs = gaussian_cvar(j_cost_new, j_sq_new, alpha)

    _, j_cost_sur, j_sq_sur = surrogate_J(m, mu, pi, pi_new)
    var_sur = j_sq_sur - j_cost_sur**2
    if var_sur < 0.0:
        raise ValueError("surrogate variance is negative; approximated CVaR undefined")
    k_alpha = cvar_factor(alpha)
    cvar_bar = j_cost_sur + k_alpha * np.sqrt(var_sur)
    if cvar_bar <= 0.0:
        raise ValueError("approximated CVaR must be positive for the bound constant")

    eps = epsilons(m, pi)
    dd = max_tv(mu, pi_new) * max_tv(pi, pi_new)
    eps_cvar = (
        (4.0 * eps.eps_c * gamma / (1.0 - gamma**2)) ** 2 * dd
        + 8.0 * eps.eps_c * gamma / (1.0 - gamma) ** 2 * j_cost_new
        + 2.0 * eps.eps_s * gamma**2 / (1.0 - gamma**2) ** 2
    ) / cvar_bar
    rhs = cvar_bar + (4.0 * eps.eps_c * gamma / (1.0 - gamma) ** 2 + eps_cvar * k_alpha) * dd
    return BoundCheck(lhs=float(lhs), rhs=float(rhs))


def lemma1_check(
    m: TabularCMDP,
    mu: TabularPolicy,
    pi: TabularPolicy,
    pi_new: TabularPolicy,
) -> BoundCheck:
    """Cost-square surrogate error bound |J_S(pi') - J_S^{mu,pi}(pi')|."""
    gamma = m.gamma
    _, _, j_sq_new = exact_J(m, pi_new)
    _, _, j_sq_sur = surrogate_J(m, mu, pi, pi_new)
    eps = epsilons(m, pi)
    dd = max_tv(mu, pi_new) * max_tv(pi, pi_new)
    bound = 2.0 * eps.eps_s * gamma**2 / (1.0 - gamma**2) ** 2 * dd
    return BoundCheck(lhs=abs(j_sq_new - j_sq_sur), rhs=float(bound))


def objective_bound_check(
    m: TabularCMDP,
    mu: TabularPolicy,
    pi: TabularPolicy,
    pi_new: TabularPolicy,
    use_cost: bool = False,
) -> BoundCheck:
    """First-order surrogate error bound for the reward (or cost) return."""
    gamma = m.gamma
    j_new, j_cost_new, _ = exact_J(m, pi_new)
    j_sur, j_cost_sur, _ = surrogate_J(m, mu, pi, pi_new)
    eps = epsilons(m, pi)
    dd = max_tv(mu, pi_new) * max_tv(pi, pi_new)
    if use_cost:
        lhs = abs(j_cost_new - j_cost_sur)
        bound = 4.0 * eps.eps_c * gamma / (1.0 - gamma) ** 2 * dd
    else:
        lhs = abs(j_new - j_sur)
        bound = 4.0 * eps.eps_r * gamma / (1.0 - gamma) ** 2 * dd
    return BoundCheck(lhs=float(lhs), rhs=float(bound))


def random_cmdp(
    rng: np.random.Generator,
    num_states: int | None = None,
    num_actions: int | None = None,
    gamma: float | None = None,
) -> TabularCMDP:
    """Random small instance: Dirichlet(1) transitions, costs in [0, 1]."""
    n_s = int(num_states) if num_states is not None else int(rng.integers(2, 7))
    n_a = int(num_actions) if num_actions is not None else int(rng.integers(2, 5))
    if gamma is None:
        gamma = float(rng.choice([0.8, 0.9, 0.95]))
    p = rng.dirichlet(np.ones(n_s), size=(n_s, n_a))
    r = rng.uniform(-1.0, 1.0, size=(n_s, n_a, n_s))
    c = rng.uniform(0.0, 1.0, size=(n_s, n_a, n_s))
    rho = rng.dirichlet(np.ones(n_s))
    return TabularCMDP(P=p, R=r, C=c, rho=rho, gamma=gamma)


def random_policy(
    rng: np.random.Generator,
    num_states: int,
    num_actions: int,
    floor: float = 0.0,
) -> TabularPolicy:
    """Dirichlet(1) policy; optional probability floor keeps ratios bounded."""
    probs = rng.dirichlet(np.ones(num_actions), size=num_states)
    if floor > 0.0:
        probs = np.maximum(probs, floor)
        probs /= probs.sum(axis=1, keepdims=True)
    return TabularPolicy(probs=probs)
