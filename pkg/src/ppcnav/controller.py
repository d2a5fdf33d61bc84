"""Planner/Simulator controller pair: penalized gradient descent on the free
energy c(u) - beta*ln p(u), the adaptive stiffness schedule, and the
score-ascent safety filter."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import density as dens
from . import env as envmod

L_COST = 2.0  # exact smoothness constant of the quadratic tracking cost


@dataclass(frozen=True)
class PlannerConfig:
    eta0: float = 0.02
    inner_steps_k: int = 50
    schedule_c: float = 10.0
    retraction_steps_j: int = 25
    # Retraction rate as a multiple of h^2, re-derived each step from the current
    # bandwidth; 0.5 gives monotone ascent for Gaussian mixtures.
    retraction_rate: float = 0.5
    alpha_percentile: float = 10.0
    n_samples: int = 300
    window_steps: int = 5
    probe_cap: int = 256
    # Fixed-stiffness mode for the ablation: beta = beta_ratio * beta_star,
    # schedule disabled. None means use the adaptive schedule.
    beta_ratio: float | None = None

    def __post_init__(self) -> None:
        if self.eta0 <= 0.0:
            raise ValueError("eta0 must be > 0")
        if self.inner_steps_k < 1:
            raise ValueError("inner_steps_k must be >= 1")
        if self.retraction_steps_j < 1:
            raise ValueError("retraction_steps_j must be >= 1")
        if self.retraction_rate <= 0.0:
            raise ValueError("retraction_rate must be > 0")
        if self.schedule_c <= 0.0:
            raise ValueError("schedule_c must be > 0")


@dataclass(frozen=True)
class PpcState:
    u_prev: np.ndarray
    n_cumulative: int = 0
    beta_t: float = 1.0
    last_filter_active: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "u_prev", np.asarray(self.u_prev, dtype=float).copy())


def initial_ppc_state() -> PpcState:
    return PpcState(u_prev=np.zeros(2))


@dataclass(frozen=True)
class CostModel:
    q: np.ndarray
    goal: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).copy())
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float).copy())


def cost_and_grad(cost: CostModel, u: np.ndarray) -> tuple[float, np.ndarray]:
    """Tracking cost ||q + u - goal||^2 and its gradient 2(q + u - goal)."""
    u = np.asarray(u, dtype=float)
    resid = cost.q + u - cost.goal
    return float(resid @ resid), 2.0 * resid


def grad_bound(cost: CostModel, u_max: float) -> float:
    """Exact bound on ||grad c|| over the action disk: 2(||q - goal|| + u_max)."""
    return 2.0 * (float(np.linalg.norm(cost.q - cost.goal)) + u_max)


def beta_schedule(beta_star: float, c: float, n_cumulative: int) -> float:
    """beta = beta_star * (1 + C / sqrt(N)); strictly decreasing in N with limit beta_star."""
    if n_cumulative < 1:
        raise ValueError("n_cumulative must be >= 1")
    return beta_star * (1.0 + c / math.sqrt(n_cumulative))


def step_size(l_c: float, beta: float, lambda_max: float, eta0: float) -> float:
    """eta = min(eta0, 1 / (L_c + beta * Lambda))."""
    return min(eta0, 1.0 / (l_c + beta * lambda_max))


def clip_to_disk(u: np.ndarray, u_max: float) -> np.ndarray:
    norm = float(np.linalg.norm(u))
    if norm > u_max:
        return u * (u_max / norm)
    return u


class PlanResult(NamedTuple):
    action: np.ndarray
    iterations: int
    underflow: bool


def plan(
    cost: CostModel,
    score_fn: Callable[[np.ndarray], np.ndarray],
    beta: float,
    eta: float,
    k: int,
    u_warm: np.ndarray,
    u_max: float = envmod.U_MAX,
) -> PlanResult:
    """k gradient steps on the free energy from the warm start, final iterate
    clipped to the action disk. Score underflow along the path stops the descent
    at the last valid iterate and flags it (the filter handles the fallback)."""
    u = np.asarray(u_warm, dtype=float).copy()
    underflow = False
    steps_taken = 0
    for _ in range(k):
        _, g = cost_and_grad(cost, u)
        if beta != 0.0:
            try:
                s = score_fn(u)
            except dens.DensityUnderflow:
                underflow = True
                break
            g = g - beta * s
        u = u - eta * g
        steps_taken += 1
    return PlanResult(action=clip_to_disk(u, u_max), iterations=steps_taken, underflow=underflow)


@dataclass(frozen=True)
class FilterReport:
    active: bool
    iterations: int
    final_density: float
    exhausted: bool

    @property
    def succeeded(self) -> bool:
        return self.active and not self.exhausted


def safety_filter(
    model: dens.KdeModel,
    alpha: float,
    u_ppc: np.ndarray,
    j: int,
    eta_r: float,
    u_max: float = envmod.U_MAX,
) -> tuple[np.ndarray, FilterReport]:
    """Score-ascent retraction: leave high-density candidates untouched, otherwise
    climb the score until density >= alpha (or, on exhaustion, return the
    highest-density iterate seen and flag it)."""
    u = np.asarray(u_ppc, dtype=float)
    d = dens.density(model, u)
    if d >= alpha:
        return u, FilterReport(active=False, iterations=0, final_density=d, exhausted=False)
    best_u, best_d = u, d
    iterations = 0
    for _ in range(j):
        try:
            s = dens.score(model, u)
        except dens.DensityUnderflow:
            break
        u = clip_to_disk(u + eta_r * s, u_max)
        iterations += 1
        d = dens.density(model, u)
        if d > best_d:
            best_u, best_d = u, d
        if d >= alpha:
            return u, FilterReport(active=True, iterations=iterations, final_density=d, exhausted=False)
    return best_u, FilterReport(active=True, iterations=iterations, final_density=best_d, exhausted=True)


@dataclass(frozen=True)
class PpcStepInfo:
    beta: float
    kappa: float
    r_alpha: float
    alpha: float
    g_c: float
    density_peak: np.ndarray
    bandwidth: float
    eta: float
    filter_active: bool
    filter_iterations: int
    filter_exhausted: bool
    plan_underflow: bool
    context_fallback: bool
    kappa_floored: bool
    n_model_points: int


def _strided_cap(points: np.ndarray, cap: int) -> np.ndarray:
    if points.shape[0] <= cap:
        return points
    idx = np.unique(np.linspace(0, points.shape[0] - 1, cap).astype(int))
    return points[idx]


def plan_and_filter(
    model: dens.KdeModel,
    cost: CostModel,
    alpha: float,
    beta: float,
    eta: float,
    config: PlannerConfig,
    u_warm: np.ndarray,
    u_max: float = envmod.U_MAX,
) -> tuple[np.ndarray, PlanResult, FilterReport]:
    plan_res = plan(cost, lambda u: dens.score(model, u), beta, eta, config.inner_steps_k, u_warm, u_max)
    eta_r = config.retraction_rate * model.bandwidth_u**2
    action, report = safety_filter(model, alpha, plan_res.action, config.retraction_steps_j, eta_r, u_max)
    return action, plan_res, report


def ppc_step(
    env_state: envmod.EnvState,
    buffer: dens.SampleBuffer,
    config: PlannerConfig,
    state: PpcState,
    rng: np.random.Generator,
    use_context: bool = False,
    xi: np.ndarray | None = None,
) -> tuple[np.ndarray, PpcState, PpcStepInfo]:
    """One full Simulator/Planner exchange: sample the oracle, refit the density,
    estimate curvature, schedule the stiffness, plan, and filter.

    Raises FeasibleRegionTooSmall when rejection sampling exhausts its budget;
    the caller logs a blocked step and applies the zero action.
    """
    samples = envmod.sample_feasible(env_state, config.n_samples, rng)
    buffer.add(samples, env_state.t, context=xi if use_context else None)

    context_fallback = False
    if use_context:
        if xi is None:
            raise ValueError("use_context requires a context vector")
        cond = dens.fit_conditional(buffer)
        try:
            model = dens.conditional_model(cond, xi)
        except dens.ContextUnderflow:
            model = dens.fit_marginal(buffer)
            context_fallback = True
    else:
        model = dens.fit_marginal(buffer)

    probes = _strided_cap(model.points, config.probe_cap)
    probe_densities = dens.density_batch(model, probes)
    alpha = float(np.percentile(probe_densities, config.alpha_percentile))
    cost = CostModel(q=env_state.q, goal=env_state.goal)
    g_c = grad_bound(cost, env_state.u_max)
    curv = dens.estimate_curvature(
        model, alpha, g_c, probes,
        probe_densities=probe_densities,
        cost_target=env_state.goal - env_state.q,
    )

    n_next = state.n_cumulative + samples.shape[0]
    if config.beta_ratio is None:
        beta_t = beta_schedule(curv.beta_star, config.schedule_c, n_next)
    else:
        beta_t = config.beta_ratio * curv.beta_star
    eta = step_size(L_COST, beta_t, curv.lambda_max, config.eta0)

    action, plan_res, report = plan_and_filter(
        model, cost, alpha, beta_t, eta, config, state.u_prev, env_state.u_max
    )

    new_state = PpcState(
        u_prev=action,
        n_cumulative=n_next,
        beta_t=beta_t,
        last_filter_active=report.active,
    )
    info = PpcStepInfo(
        beta=beta_t,
        kappa=curv.kappa,
        r_alpha=curv.r_alpha,
        alpha=alpha,
        g_c=g_c,
        density_peak=curv.density_peak,
        bandwidth=model.bandwidth_u,
        eta=eta,
        filter_active=report.active,
        filter_iterations=report.iterations,
        filter_exhausted=report.exhausted,
        plan_underflow=plan_res.underflow,
        context_fallback=context_fallback,
        kappa_floored=curv.kappa_floored,
        n_model_points=model.n_points,
    )
    return action, new_state, info
