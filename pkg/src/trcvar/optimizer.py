"""Off-policy constrained trust-region update.

Pieces: retrace critic targets with truncated importance ratios, on-policy
estimates of the discounted cost mean and second moment, the CVaR
constraint gradient, the replay-shrunken trust-region budget, an analytic
two-dual-variable subproblem solve with backtracking line search, and a
constraint-only recovery step for infeasible iterates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import conjugate_gradient
from .cmdp import Trajectory
from .oracle import cvar_factor
from .policy import CriticSet, GaussianPolicy, gaussian_log_prob

EPS = 1e-12
RATIO_CLIP_LOW = 1e-3
RATIO_CLIP_HIGH = 1e3
VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class CVaRConfig:
    """Risk level, per-step cost limit, and derived constants."""

    alpha: float
    cost_limit: float
    gamma: float

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def k_alpha(self) -> float:
        return cvar_factor(self.alpha)

    @property
    def threshold(self) -> float:
        return self.cost_limit / (1.0 - self.gamma)


@dataclass
class Batch:
    """Flat arrays over a set of contiguous segments.

    seg_slices index the flat arrays; start_times carry each segment's
    within-episode offset; bootstrap_value* are the critic values at each
    segment's final next_state (zeroed when that transition is terminal).
    """

    states: np.ndarray
    actions: np.ndarray
    behavior_probs: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    seg_slices: list[slice]
    start_times: list[int]

    @classmethod
    def from_segments(cls, segments: list[Trajectory]) -> "Batch":
        states, actions, probs, rewards, costs, nexts, terms = [], [], [], [], [], [], []
        slices, starts = [], []
        offset = 0
        for seg in segments:
            if len(seg) == 0:
                continue
            for t in seg.transitions:
                states.append(t.state)
                actions.append(np.atleast_1d(t.action))
                probs.append(t.behavior_prob)
                rewards.append(t.reward)
                costs.append(t.cost)
                nexts.append(t.next_state)
                terms.append(t.terminal)
            slices.append(slice(offset, offset + len(seg)))
            starts.append(seg.start_time)
            offset += len(seg)
        if offset == 0:
            raise ValueError("batch is empty")
        return cls(
            states=np.asarray(states, dtype=float),
            actions=np.asarray(actions, dtype=float),
            behavior_probs=np.asarray(probs, dtype=float),
            rewards=np.asarray(rewards, dtype=float),
            costs=np.asarray(costs, dtype=float),
            next_states=np.asarray(nexts, dtype=float),
            terminals=np.asarray(terms, dtype=bool),
            seg_slices=slices,
            start_times=starts,
        )

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass
class RetraceTargets:
    value: np.ndarray
    cost_value: np.ndarray
    square_value: np.ndarray
    ratios: np.ndarray


def retrace_targets(
    batch: Batch,
    values: np.ndarray,
    next_values: np.ndarray,
    cost_values: np.ndarray,
    next_cost_values: np.ndarray,
    square_values: np.ndarray,
    next_square_values: np.ndarray,
    log_pi: np.ndarray,
    lam: float,
    gamma: float,
    log_mu: np.ndarray | None = None,
) -> RetraceTargets:
    """Backward retrace recursions for all three critics.

    Ratios are min(1, pi/mu); bootstrap values at terminal next-states must
    already be zeroed by the caller; at segment ends the correction term is
    dropped (the tail estimate falls back to the critic). log_mu defaults
    to the stored behavior probabilities.
    """
    if log_mu is None:
        log_mu = np.log(batch.behavior_probs)
    rho = np.minimum(1.0, np.exp(log_pi - log_mu))
    v_bar = np.empty(len(batch))
    vc_bar = np.empty(len(batch))
    vs_bar = np.empty(len(batch))
    g, g2 = gamma, gamma * gamma
    for sl in batch.seg_slices:
        for t in reversed(range(sl.start, sl.stop)):
            v_bar[t] = batch.rewards[t] + g * next_values[t]
            vc_bar[t] = batch.costs[t] + g * next_cost_values[t]
            vs_bar[t] = (batch.costs[t] ** 2
                         + 2.0 * g * batch.costs[t] * next_cost_values[t]
                         + g2 * next_square_values[t])
            if t + 1 < sl.stop:
                corr = lam * rho[t + 1]
                v_bar[t] += g * corr * (v_bar[t + 1] - values[t + 1])
                vc_bar[t] += g * corr * (vc_bar[t + 1] - cost_values[t + 1])
                vs_bar[t] += g2 * corr * (vs_bar[t + 1] - square_values[t + 1])
    if not (np.all(np.isfinite(v_bar)) and np.all(np.isfinite(vc_bar))
            and np.all(np.isfinite(vs_bar))):
        raise FloatingPointError("non-finite retrace target")
    return RetraceTargets(value=v_bar, cost_value=vc_bar, square_value=vs_bar, ratios=rho)


def estimate_onpolicy_J(
    segments: list[Trajectory],
    cost_value_fn,
    gamma: float,
) -> tuple[float, float]:
    """(J_C, J_S) from a fresh on-policy rollout.

    Discount weights gamma^t and gamma^{2t} (t counted from episode start)
    are renormalized so the sums estimate the discounted state
    distributions; the second moment bootstraps with the cost critic at
    each next state, zeroed at terminals.
    """
    if not segments or all(len(s) == 0 for s in segments):
        raise ValueError("on-policy estimate needs a non-empty rollout")
    batch = Batch.from_segments(segments)
    t_idx = np.concatenate([
        start + np.arange(sl.stop - sl.start)
        for sl, start in zip(batch.seg_slices, batch.start_times)
    ])
    w1 = gamma**t_idx
    w2 = gamma ** (2.0 * t_idx)
    vc_next = np.asarray(cost_value_fn(batch.next_states), dtype=float)
    vc_next = np.where(batch.terminals, 0.0, vc_next)
    j_cost = float((w1 * batch.costs).sum() / w1.sum() / (1.0 - gamma))
    j_sq = float(
        (w2 * (batch.costs**2 + 2.0 * gamma * batch.costs * vc_next)).sum()
        / w2.sum() / (1.0 - gamma**2)
    )
    return j_cost, j_sq


def compute_delta_old(m_hat: float, delta: float) -> float:
    """Trust-region budget consumed by divergence from the replay data.

    Algebraically sqrt(m(delta + m/4)) - m/2, evaluated in the rationalized
    form 2*delta /(1 + sqrt(1 + 4*delta/m)) which stays exact for huge m.
    Negative m (MC noise) clamps to zero.
    """
    if m_hat <= 0.0:
        return 0.0
    return 2.0 * delta / (1.0 + np.sqrt(1.0 + 4.0 * delta / m_hat))


@dataclass
class LqclpSolution:
    direction: np.ndarray
    dual_tr: float
    dual_constraint: float
    feasible: bool
    case: str
    step_scale: float = 0.0
    accepted: bool = False
    backtracks: int = 0
    measured_kl: float = 0.0
    measured_objective: float = 0.0
    measured_cvar: float = np.nan


def solve_lqclp(
    g: np.ndarray,
    b: np.ndarray,
    c_slack: float,
    hvp,
    delta_eff: float,
    cg_iters: int = 10,
    cg_tol: float = 1e-8,
) -> LqclpSolution:
    """Maximize g.x subject to b.x + c_slack <= 0 and x.Hx/2 <= delta_eff.

    Analytic two-variable dual as in constrained trust-region practice.
    When the linearized constraint cannot be met inside the trust region,
    falls back to the pure constraint-descent recovery direction.
    """
    if delta_eff <= 0.0:
        raise ValueError("effective trust-region budget must be positive")
    x_g = conjugate_gradient(hvp, g, iters=cg_iters, tol=cg_tol)
    q = float(g @ x_g)

    if float(b @ b) < 1e-16:
        if c_slack > 0.0:
            # constraint gradient vanished while violating: nothing to descend
            return LqclpSolution(direction=np.zeros_like(g), dual_tr=0.0,
                                 dual_constraint=0.0, feasible=False, case="stuck")
        if q < EPS:
            return LqclpSolution(direction=np.zeros_like(g), dual_tr=0.0,
                                 dual_constraint=0.0, feasible=True, case="zero")
        lam = np.sqrt(q / (2.0 * delta_eff))
        return LqclpSolution(direction=x_g / (lam + EPS), dual_tr=float(lam),
                             dual_constraint=0.0, feasible=True, case="trust_region")

    x_b = conjugate_gradient(hvp, b, iters=cg_iters, tol=cg_tol)
    r = float(g @ x_b)
    s = float(b @ x_b)

    if c_slack - np.sqrt(2.0 * delta_eff * s) > 0.0:
        sol = recovery_step(b, hvp, delta_eff, cg_iters=cg_iters, cg_tol=cg_tol)
        sol.feasible = False
        return sol

    big_b = 2.0 * delta_eff - c_slack**2 / s
    if c_slack < 0.0 and big_b <= 0.0:
        # constraint plane lies outside the trust region: plain step
        lam = np.sqrt(q / (2.0 * delta_eff))
        return LqclpSolution(direction=x_g / (lam + EPS), dual_tr=float(lam),
                             dual_constraint=0.0, feasible=True, case="trust_region")
    if q < EPS:
        # no objective signal; project onto the constraint plane if needed
        coef = max(c_slack, 0.0) / s
        return LqclpSolution(direction=-coef * x_b, dual_tr=0.0,
                             dual_constraint=float(coef), feasible=True, case="project")

    big_a = max(q - r**2 / s, 0.0)
    # lambda intervals by the sign of nu(lambda) = (r + lambda c)/s
    inf = np.inf
    if c_slack > 0.0:
        lo_a, hi_a = max(0.0, -r / c_slack), inf
        lo_b, hi_b = 0.0, max(0.0, -r / c_slack)
    elif c_slack < 0.0:
        if r > 0.0:
            lo_a, hi_a = 0.0, -r / c_slack
            lo_b, hi_b = -r / c_slack, inf
        else:
            lo_a, hi_a = 1.0, 0.0  # empty
            lo_b, hi_b = 0.0, inf
    else:
        if r > 0.0:
            lo_a, hi_a, lo_b, hi_b = 0.0, inf, 1.0, 0.0
        else:
            lo_a, hi_a, lo_b, hi_b = 1.0, 0.0, 0.0, inf

    def dual_a(lam):
        return big_a / (2.0 * lam + EPS) + lam * big_b / 2.0 - c_slack * r / s

    def dual_b(lam):
        return q / (2.0 * lam + EPS) + lam * delta_eff

    best = None
    if lo_a <= hi_a and big_b > 0.0:
        lam_a = float(np.clip(np.sqrt(big_a / big_b), lo_a, hi_a))
        best = (dual_a(lam_a), lam_a)
    if lo_b <= hi_b:
        lam_b = float(np.clip(np.sqrt(q / (2.0 * delta_eff)), lo_b, hi_b))
        cand = (dual_b(lam_b), lam_b)
        if best is None or cand[0] < best[0]:
            best = cand
    lam = best[1]
    nu = max(0.0, (r + lam * c_slack) / s)
    direction = (x_g - nu * x_b) / (lam + EPS)
    return LqclpSolution(direction=direction, dual_tr=float(lam),
                         dual_constraint=float(nu), feasible=True, case="dual")


def recovery_step(
    b: np.ndarray,
    hvp,
    delta_eff: float,
    cg_iters: int = 10,
    cg_tol: float = 1e-8,
) -> LqclpSolution:
    """Constraint-only descent to the trust-region boundary."""
    if float(b @ b) < 1e-16:
        return LqclpSolution(direction=np.zeros_like(b), dual_tr=0.0,
                             dual_constraint=0.0, feasible=False, case="stuck")
    x_b = conjugate_gradient(hvp, b, iters=cg_iters, tol=cg_tol)
    s = float(b @ x_b)
    direction = -np.sqrt(2.0 * delta_eff / s) * x_b
    return LqclpSolution(direction=direction, dual_tr=0.0,
                         dual_constraint=float(np.sqrt(2.0 * delta_eff / s)),
                         feasible=False, case="recovery")


@dataclass
class UpdateDiagnostics:
    j_cost: float
    j_sq: float
    approx_cvar: float
    c_slack: float
    delta_old: float
    measured_kl: float
    dual_tr: float
    dual_constraint: float
    recovery: bool
    backtracks: int
    accepted: bool
    objective: float
    sigma_floored: bool


@dataclass
class CriticUpdateReport:
    value_loss: float
    cost_value_loss: float
    square_value_loss: float


class TrcOptimizer:
    """One policy/critic update round of the constrained trust-region loop.

    assume_onpolicy=True reproduces the naive variant that treats replay
    data as on-policy (ratios forced to pi/pi); unconstrained=True drops
    the CVaR constraint entirely (plain off-policy trust-region ascent).
    """

    def __init__(
        self,
        policy: GaussianPolicy,
        critics: CriticSet,
        cvar: CVaRConfig,
        delta: float = 1e-3,
        lam: float = 0.97,
        damping: float = 0.01,
        cg_iters: int = 10,
        line_search_max: int = 10,
        critic_iters: int = 40,
        assume_onpolicy: bool = False,
        unconstrained: bool = False,
    ):
        self.policy = policy
        self.critics = critics
        self.cvar = cvar
        self.delta = delta
        self.lam = lam
        self.damping = damping
        self.cg_iters = cg_iters
        self.line_search_max = line_search_max
        self.critic_iters = critic_iters
        self.assume_onpolicy = assume_onpolicy
        self.unconstrained = unconstrained

    # -------- critic-side helpers --------
    def _critic_values(self, batch: Batch):
        v = self.critics.value.predict(batch.states)
        vc = self.critics.cost_value.predict(batch.states)
        vs = self.critics.square_value.predict(batch.states)
        nv = np.where(batch.terminals, 0.0, self.critics.value.predict(batch.next_states))
        nvc = np.where(batch.terminals, 0.0, self.critics.cost_value.predict(batch.next_states))
        nvs = np.where(batch.terminals, 0.0, self.critics.square_value.predict(batch.next_states))
        return v, vc, vs, nv, nvc, nvs

    def compute_targets(self, batch: Batch) -> RetraceTargets:
        v, vc, vs, nv, nvc, nvs = self._critic_values(batch)
        log_pi = self.policy.log_prob(batch.states, batch.actions)
        log_mu = log_pi if self.assume_onpolicy else None
        return retrace_targets(batch, v, nv, vc, nvc, vs, nvs, log_pi,
                               self.lam, self.cvar.gamma, log_mu=log_mu)

    def update_critics(self, batch: Batch, targets: RetraceTargets) -> CriticUpdateReport:
        """Adam steps toward held-fixed retrace targets."""
        report = CriticUpdateReport(0.0, 0.0, 0.0)
        for _ in range(self.critic_iters):
            report.value_loss = self.critics.value.train_step(batch.states, targets.value)
            report.cost_value_loss = self.critics.cost_value.train_step(
                batch.states, targets.cost_value)
            report.square_value_loss = self.critics.square_value.train_step(
                batch.states, np.maximum(targets.square_value, 0.0))
        return report

    # -------- policy update --------
    def policy_update(self, batch: Batch, rollout: list[Trajectory]) -> UpdateDiagnostics:
        gamma = self.cvar.gamma
        k_alpha = self.cvar.k_alpha
        n = len(batch)

        j_cost, j_sq = estimate_onpolicy_J(rollout, self.critics.cost_value.predict, gamma)
        var = j_sq - j_cost**2
        sigma_floored = var < VAR_FLOOR
        sigma_hat = np.sqrt(max(var, VAR_FLOOR))
        approx_cvar0 = j_cost + k_alpha * sigma_hat
        c_slack = approx_cvar0 - self.cvar.threshold

        # advantages from retrace at the pre-update policy
        v, vc, vs, nv, nvc, nvs = self._critic_values(batch)
        theta_old = self.policy.get_params()
        log_pi_old = self.policy.log_prob(batch.states, batch.actions)
        log_mu = log_pi_old.copy() if self.assume_onpolicy else np.log(batch.behavior_probs)
        targets = retrace_targets(batch, v, nv, vc, nvc, vs, nvs,
                                  log_pi_old, self.lam, gamma, log_mu=log_mu)
        adv = targets.value - v
        adv_cost = targets.cost_value - vc
        adv_sq = targets.square_value - vs

        ratio_old = np.exp(log_pi_old - log_mu)
        in_range = (ratio_old > RATIO_CLIP_LOW) & (ratio_old < RATIO_CLIP_HIGH)
        ratio_old_c = np.clip(ratio_old, RATIO_CLIP_LOW, RATIO_CLIP_HIGH)

        def grad_of(advantages, horizon_scale):
            coeffs = ratio_old_c * in_range * advantages / (n * horizon_scale)
            return self.policy.log_prob_grad(batch.states, batch.actions, coeffs)

        g = grad_of(adv, 1.0 - gamma)
        grad_jc = grad_of(adv_cost, 1.0 - gamma)
        grad_js = grad_of(adv_sq, 1.0 - gamma**2)
        if sigma_floored:
            b = grad_jc  # square-root term suppressed at the variance floor
        else:
            b = grad_jc + k_alpha * (grad_js - 2.0 * j_cost * grad_jc) / (2.0 * sigma_hat)

        # adaptive budget from the batch divergence estimate
        m_hat = 0.0 if self.assume_onpolicy else max(float(np.mean(log_mu - log_pi_old)), 0.0)
        delta_old = compute_delta_old(m_hat, self.delta)
        delta_eff = self.delta - delta_old

        means_old, cache_old, sigma_old = self.policy.stats(batch.states)

        def hvp(vec):
            return self.policy.kl_hvp(cache_old, sigma_old, vec, damping=self.damping)

        if delta_eff <= 1e-14:
            self.policy.set_params(theta_old)
            return UpdateDiagnostics(
                j_cost=j_cost, j_sq=j_sq, approx_cvar=approx_cvar0, c_slack=c_slack,
                delta_old=delta_old, measured_kl=0.0, dual_tr=0.0, dual_constraint=0.0,
                recovery=False, backtracks=0, accepted=False, objective=0.0,
                sigma_floored=sigma_floored,
            )

        if self.unconstrained:
            sol = solve_lqclp(g, np.zeros_like(g), -1.0, hvp, delta_eff,
                              cg_iters=self.cg_iters)
        else:
            sol = solve_lqclp(g, b, c_slack, hvp, delta_eff, cg_iters=self.cg_iters)

        # measured quantities for the line search, all centered at theta_old
        base_corr = ratio_old_c * in_range

        def measured(theta):
            self.policy.set_params(theta)
            log_pi = self.policy.log_prob(batch.states, batch.actions)
            w = np.clip(np.exp(log_pi - log_mu), RATIO_CLIP_LOW, RATIO_CLIP_HIGH)
            dw = w - base_corr
            obj = float(np.mean(dw * adv)) / (1.0 - gamma)
            jc_s = j_cost + float(np.mean(dw * adv_cost)) / (1.0 - gamma)
            js_s = j_sq + float(np.mean(dw * adv_sq)) / (1.0 - gamma**2)
            cvar = jc_s + k_alpha * np.sqrt(max(js_s - jc_s**2, VAR_FLOOR))
            kl = self.policy.mean_kl(batch.states, means_old, sigma_old)
            return obj, cvar, kl

        feasible_start = c_slack < 0.0
        scale = 1.0
        accepted = False
        obj = kl = 0.0
        cvar_meas = approx_cvar0
        backtracks = 0
        if float(sol.direction @ sol.direction) > 0.0:
            for backtracks in range(self.line_search_max):
                theta = theta_old + scale * sol.direction
                obj, cvar_meas, kl = measured(theta)
                ok_kl = kl <= delta_eff
                if self.unconstrained:
                    ok_cvar, ok_obj = True, obj >= -EPS
                elif sol.case == "recovery":
                    ok_cvar, ok_obj = cvar_meas < approx_cvar0, True
                elif feasible_start:
                    ok_cvar, ok_obj = cvar_meas <= self.cvar.threshold, obj >= -EPS
                else:
                    ok_cvar, ok_obj = cvar_meas <= approx_cvar0, True
                if ok_kl and ok_cvar and ok_obj:
                    accepted = True
                    break
                scale *= 0.5
        if not accepted:
            self.policy.set_params(theta_old)
            obj, kl = 0.0, 0.0
            cvar_meas = approx_cvar0
            scale = 0.0
        sol.step_scale = scale
        sol.accepted = accepted

        return UpdateDiagnostics(
            j_cost=j_cost, j_sq=j_sq, approx_cvar=cvar_meas, c_slack=c_slack,
            delta_old=delta_old, measured_kl=kl, dual_tr=sol.dual_tr,
            dual_constraint=sol.dual_constraint, recovery=sol.case in ("recovery", "stuck"),
            backtracks=backtracks, accepted=accepted, objective=obj,
            sigma_floored=sigma_floored,
        )
