"""Comparison controllers behind the same per-step interface as the penalized
planner, plus the grid oracle used as the cost normalizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import density as dens
from . import env as envmod
from .controller import (
    CostModel,
    FilterReport,
    PlannerConfig,
    L_COST,
    _strided_cap,
    beta_schedule,
    clip_to_disk,
    grad_bound,
    plan_and_filter,
    step_size,
)

ORACLE_GRID_N = 201
_QP_SLACK_TOL = -1e-9


class NoFeasibleCell(RuntimeError):
    """Every cell of the oracle grid is infeasible; the caller logs a zero action."""


def oracle_action(env_state: envmod.EnvState, grid_n: int = ORACLE_GRID_N) -> np.ndarray:
    """Single-step cost minimizer over a grid on the action disk intersected with
    the true feasibility oracle. Ties break toward smaller norm, then lexicographic."""
    axis = np.linspace(-env_state.u_max, env_state.u_max, grid_n)
    ux, uy = np.meshgrid(axis, axis, indexing="ij")
    candidates = np.column_stack([ux.ravel(), uy.ravel()])
    mask = envmod.feasibility_mask(env_state, candidates)
    if not np.any(mask):
        raise NoFeasibleCell("no feasible cell on the oracle grid")
    feas = candidates[mask]
    resid = env_state.q[None, :] + feas - env_state.goal[None, :]
    costs = np.einsum("ij,ij->i", resid, resid)
    norms = np.einsum("ij,ij->i", feas, feas)
    order = np.lexsort((feas[:, 1], feas[:, 0], norms, costs))
    return feas[order[0]].copy()


def _projection_qp(u_nom: np.ndarray, a_rows: np.ndarray, b_vec: np.ndarray, u_max: float) -> np.ndarray | None:
    """min ||u - u_nom||^2  s.t.  a_k . u >= b_k  and  ||u|| <= u_max.

    Exact active-set enumeration in 2-D: candidate optima are the nominal point,
    per-constraint projections, pairwise constraint intersections, and
    constraint/disk intersections. Returns None when no candidate is feasible."""
    m = a_rows.shape[0]
    candidates = [u_nom]
    for k in range(m):
        a = a_rows[k]
        denom = float(a @ a)
        if denom < 1e-14:
            continue
        candidates.append(u_nom + (b_vec[k] - float(a @ u_nom)) / denom * a)
        # intersections of the constraint line with the disk boundary
        p0 = a * (b_vec[k] / denom)
        rad_sq = u_max**2 - float(p0 @ p0)
        if rad_sq >= 0.0:
            d = np.array([-a[1], a[0]]) / math.sqrt(denom)
            t = math.sqrt(rad_sq)
            candidates.append(p0 + t * d)
            candidates.append(p0 - t * d)
        for l in range(k + 1, m):
            mat = np.array([a, a_rows[l]])
            det = mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
            if abs(det) < 1e-12:
                continue
            candidates.append(np.linalg.solve(mat, np.array([b_vec[k], b_vec[l]])))
    best, best_d = None, math.inf
    for u in candidates:
        if float(np.linalg.norm(u)) > u_max + 1e-12:
            continue
        if m and float(np.min(a_rows @ u - b_vec)) < _QP_SLACK_TOL:
            continue
        d = float(np.sum((u - u_nom) ** 2))
        if d < best_d:
            best, best_d = u, d
    return best


def _escape_step(
    a_rows: np.ndarray,
    b_vec: np.ndarray,
    u_max: float,
    env_state: envmod.EnvState | None = None,
    n_dirs: int = 64,
) -> np.ndarray:
    """Full-speed step maximizing the worst barrier slack over a direction fan.

    Used when no admissible action exists: standing still inside an inflated
    region leaves the robot parked in the path of sweeping obstacles, so the
    sane conservative behavior is to flee along the maximin-slack direction.
    These controllers have oracle obstacle access by definition, so directions
    that are truly unsafe for the next step are excluded whenever possible."""
    angles = 2.0 * math.pi * np.arange(n_dirs) / n_dirs
    dirs = u_max * np.column_stack([np.cos(angles), np.sin(angles)])
    slack = np.min(dirs @ a_rows.T - b_vec[None, :], axis=1)
    if env_state is not None:
        safe = envmod.feasibility_mask(env_state, dirs)
        if np.any(safe):
            slack = np.where(safe, slack, -np.inf)
    return dirs[int(np.argmax(slack))].copy()


def _scaled_nominal_fallback(
    u_nom: np.ndarray,
    a_rows: np.ndarray,
    b_vec: np.ndarray,
    u_max: float = envmod.U_MAX,
    env_state: envmod.EnvState | None = None,
) -> np.ndarray:
    """Largest s in [0, 1] with s*u_nom satisfying every linear constraint; when no
    scale works (the current position already violates the barrier book), take the
    steepest-escape step instead of freezing."""
    lo, hi = 0.0, 1.0
    for a, b in zip(a_rows, b_vec):
        c = float(a @ u_nom)
        if b > 0.0:
            if c <= 0.0:
                return _escape_step(a_rows, b_vec, u_max, env_state)
            lo = max(lo, b / c)
        elif c < 0.0:
            hi = min(hi, b / c)
    if lo > hi:
        return _escape_step(a_rows, b_vec, u_max, env_state)
    return hi * u_nom


def _workspace_rows(env_state: envmod.EnvState) -> tuple[np.ndarray, np.ndarray]:
    """Exact half-plane constraints keeping the next position inside the box."""
    lo, hi = env_state.bounds
    qx, qy = float(env_state.q[0]), float(env_state.q[1])
    a_rows = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    b_vec = np.array([lo - qx, qx - hi, lo - qy, qy - hi])
    return a_rows, b_vec


def _barrier_rows(env_state: envmod.EnvState, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Linearized one-step barrier constraints grad_h . u >= -gamma * h per obstacle,
    with h_k(q) = ||q - o_k(t+1)||^2 - (r_k + d_safe)^2, plus the workspace box."""
    centers = envmod.obstacle_positions(env_state, env_state.t + 1)
    margins = envmod.obstacle_radii(env_state) + env_state.d_safe
    diffs = env_state.q[None, :] - centers
    h_vals = np.einsum("ij,ij->i", diffs, diffs) - margins**2
    box_a, box_b = _workspace_rows(env_state)
    a_rows = np.vstack([2.0 * diffs, box_a])
    b_vec = np.concatenate([-gamma * h_vals, box_b])
    return a_rows, b_vec


def cbf_qp_action(env_state: envmod.EnvState, gamma: float = 0.5) -> np.ndarray:
    """Project the nominal goal-tracking input onto the linearized barrier constraints
    (oracle obstacle access) via the exact 2-D QP."""
    u_nom = clip_to_disk(env_state.goal - env_state.q, env_state.u_max)
    if not env_state.obstacles:
        return u_nom
    a_rows, b_vec = _barrier_rows(env_state, gamma)
    solution = _projection_qp(u_nom, a_rows, b_vec, env_state.u_max)
    if solution is None:
        return _scaled_nominal_fallback(u_nom, a_rows, b_vec, env_state.u_max, env_state)
    return solution


@dataclass
class GpConstraintModel:
    """RBF-kernel GP over next positions whose posterior mean acts as a learned barrier.

    Hyperparameters are refitted exactly every refit_period observations; the
    training set is capped at max_points by reservoir subsampling."""

    kernel_lengthscale: float = 1.0
    kernel_variance: float = 1.0
    noise_variance: float = 1e-4
    refit_period: int = 50
    max_points: int = 500
    inputs: list[np.ndarray] = field(default_factory=list)
    targets: list[float] = field(default_factory=list)
    _seen: int = 0
    _alpha: np.ndarray | None = None
    _dirty: bool = True

    def add(self, x: np.ndarray, y: float, rng: np.random.Generator) -> None:
        x = np.asarray(x, dtype=float).copy()
        self._seen += 1
        if len(self.inputs) < self.max_points:
            self.inputs.append(x)
            self.targets.append(float(y))
        else:
            j = int(rng.integers(0, self._seen))
            if j < self.max_points:
                self.inputs[j] = x
                self.targets[j] = float(y)
        self._dirty = True
        if self._seen % self.refit_period == 0:
            self._refit_hyperparameters()

    def _refit_hyperparameters(self) -> None:
        x = np.stack(self.inputs)
        sub = x[:: max(1, len(self.inputs) // 200)]
        diffs = sub[:, None, :] - sub[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diffs, diffs))
        upper = dist[np.triu_indices(dist.shape[0], k=1)]
        if upper.size:
            self.kernel_lengthscale = max(1e-2, float(np.median(upper)))
        self.kernel_variance = max(1e-4, float(np.var(np.asarray(self.targets))))
        self._dirty = True

    def _ensure_solved(self) -> None:
        if not self._dirty:
            return
        x = np.stack(self.inputs)
        diffs = x[:, None, :] - x[None, :, :]
        k = self.kernel_variance * np.exp(
            -np.einsum("ijk,ijk->ij", diffs, diffs) / (2.0 * self.kernel_lengthscale**2)
        )
        k[np.diag_indices_from(k)] += self.noise_variance
        self._alpha = np.linalg.solve(k, np.asarray(self.targets, dtype=float))
        self._x_arr = x
        self._dirty = False

    def posterior_mean_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        self._ensure_solved()
        x = np.asarray(x, dtype=float)
        diffs = self._x_arr - x[None, :]
        k_vec = self.kernel_variance * np.exp(
            -np.einsum("ij,ij->i", diffs, diffs) / (2.0 * self.kernel_lengthscale**2)
        )
        weights = self._alpha * k_vec
        mean = float(np.sum(weights))
        grad = (weights @ diffs) / self.kernel_lengthscale**2
        return mean, grad


def gp_cbf_action(env_state: envmod.EnvState, gp: GpConstraintModel, gamma: float = 0.5) -> np.ndarray:
    """Same QP as cbf_qp_action but with a single constraint from the GP posterior
    mean of the barrier and its analytic gradient."""
    u_nom = clip_to_disk(env_state.goal - env_state.q, env_state.u_max)
    if not gp.inputs:
        return u_nom
    h_val, h_grad = gp.posterior_mean_and_grad(env_state.q)
    box_a, box_b = _workspace_rows(env_state)
    a_rows = np.vstack([h_grad[None, :], box_a])
    b_vec = np.concatenate([np.array([-gamma * h_val]), box_b])
    solution = _projection_qp(u_nom, a_rows, b_vec, env_state.u_max)
    if solution is None:
        return _scaled_nominal_fallback(u_nom, a_rows, b_vec)
    return solution


def realized_barrier_value(env_state: envmod.EnvState) -> float:
    """Ground-truth clearance min_k(||q - o_k(t)|| - r_k - d_safe) at the current pose."""
    if not env_state.obstacles:
        return float(env_state.u_max)
    centers = envmod.obstacle_positions(env_state, env_state.t)
    dist = np.linalg.norm(env_state.q[None, :] - centers, axis=1)
    return float(np.min(dist - envmod.obstacle_radii(env_state) - env_state.d_safe))


@dataclass(frozen=True)
class CemConfig:
    n_candidates: int = 300
    elite_fraction: float = 0.1
    iterations: int = 5
    init_std: float = 0.5
    std_floor: float = 0.02

    def __post_init__(self) -> None:
        if int(self.elite_fraction * self.n_candidates) < 1:
            raise ValueError("elite count must be >= 1")


def _cem_search(
    cost_fn,
    log_density_fn,
    log_alpha: float,
    cfg: CemConfig,
    rng: np.random.Generator,
    u_max: float,
) -> tuple[np.ndarray, bool, np.ndarray]:
    """Returns (action, found_feasible, final_mean). Ties in the cost ranking are
    broken first-seen via stable sorting."""
    mean = np.zeros(2)
    std = np.full(2, cfg.init_std)
    elite_count = int(cfg.elite_fraction * cfg.n_candidates)
    best_u, best_cost = None, math.inf
    for _ in range(cfg.iterations):
        draws = mean[None, :] + std[None, :] * rng.normal(0.0, 1.0, (cfg.n_candidates, 2))
        norms = np.linalg.norm(draws, axis=1)
        over = norms > u_max
        draws[over] *= (u_max / norms[over])[:, None]
        feasible = log_density_fn(draws) >= log_alpha
        if not np.any(feasible):
            continue
        feas = draws[feasible]
        costs = cost_fn(feas)
        order = np.argsort(costs, kind="stable")
        if costs[order[0]] < best_cost:
            best_cost = float(costs[order[0]])
            best_u = feas[order[0]].copy()
        elites = feas[order[: min(elite_count, feas.shape[0])]]
        mean = elites.mean(axis=0)
        if elites.shape[0] >= 2:
            std = np.maximum(elites.std(axis=0), cfg.std_floor)
        else:
            std = np.full(2, cfg.std_floor)
    if best_u is None:
        return clip_to_disk(mean, u_max), False, mean
    return best_u, True, mean


def cem_action(
    env_state: envmod.EnvState,
    model: dens.KdeModel,
    cfg: CemConfig,
    rng: np.random.Generator,
    alpha: float | None = None,
) -> np.ndarray:
    """Cross-entropy search for the lowest-cost candidate the learned density deems
    feasible (density >= alpha); on total infeasibility the clipped proposal mean
    is returned."""
    if alpha is None:
        alpha = dens.select_alpha(model, model.points)

    def cost_fn(us: np.ndarray) -> np.ndarray:
        resid = env_state.q[None, :] + us - env_state.goal[None, :]
        return np.einsum("ij,ij->i", resid, resid)

    action, _found, _mean = _cem_search(
        cost_fn,
        lambda us: dens.log_density_batch(model, us),
        math.log(alpha),
        cfg,
        rng,
        env_state.u_max,
    )
    return action


@dataclass(frozen=True)
class StaticConservativeModel:
    centers: np.ndarray  # obstacle centers frozen at the build step
    radii_max: np.ndarray  # r_k + d_safe + max swept displacement over the horizon


def build_static_model(env_state: envmod.EnvState, horizon: int) -> StaticConservativeModel:
    """Freeze obstacle centers at the current step and inflate radii by the maximum
    displacement over a 1-step time grid across the remaining horizon."""
    t0 = env_state.t
    base = envmod.obstacle_positions(env_state, t0)
    max_disp = np.zeros(len(env_state.obstacles))
    for t in range(t0, t0 + horizon + 1):
        disp = np.linalg.norm(envmod.obstacle_positions(env_state, t) - base, axis=1)
        max_disp = np.maximum(max_disp, disp)
    radii_max = envmod.obstacle_radii(env_state) + env_state.d_safe + max_disp
    return StaticConservativeModel(centers=base, radii_max=radii_max)


def static_conservative_action(env_state: envmod.EnvState, model: StaticConservativeModel) -> np.ndarray:
    """Barrier QP with gamma = 1 against the static inflated obstacles."""
    u_nom = clip_to_disk(env_state.goal - env_state.q, env_state.u_max)
    if model.centers.shape[0] == 0:
        return u_nom
    diffs = env_state.q[None, :] - model.centers
    h_vals = np.einsum("ij,ij->i", diffs, diffs) - model.radii_max**2
    box_a, box_b = _workspace_rows(env_state)
    a_rows = np.vstack([2.0 * diffs, box_a])
    b_vec = np.concatenate([-1.0 * h_vals, box_b])
    solution = _projection_qp(u_nom, a_rows, b_vec, env_state.u_max)
    if solution is None:
        return _scaled_nominal_fallback(u_nom, a_rows, b_vec, env_state.u_max, env_state)
    return solution


@dataclass(frozen=True)
class FrozenPpcModel:
    """Density, threshold, stiffness, and step size all fixed at fit time."""

    model: dens.KdeModel
    alpha: float
    beta: float
    eta: float


def fit_frozen_model(
    env_state: envmod.EnvState,
    n_samples: int,
    rng: np.random.Generator,
    config: PlannerConfig,
) -> FrozenPpcModel:
    """Fit the offline model from the current configuration only; used by the
    frozen-density baseline (pretraining at t = 0, no online updates)."""
    samples = envmod.sample_feasible(env_state, n_samples, rng)
    model = dens.KdeModel(points=samples, bandwidth_u=dens.bandwidth_rule(samples))
    probes = _strided_cap(model.points, config.probe_cap)
    alpha = dens.select_alpha(model, probes, config.alpha_percentile)
    cost = CostModel(q=env_state.q, goal=env_state.goal)
    curv = dens.estimate_curvature(
        model, alpha, grad_bound(cost, env_state.u_max), probes,
        cost_target=env_state.goal - env_state.q,
    )
    beta = beta_schedule(curv.beta_star, config.schedule_c, n_samples)
    eta = step_size(L_COST, beta, curv.lambda_max, config.eta0)
    return FrozenPpcModel(model=model, alpha=alpha, beta=beta, eta=eta)


def offline_drgd_action(
    env_state: envmod.EnvState,
    frozen: FrozenPpcModel,
    config: PlannerConfig,
    u_warm: np.ndarray,
) -> tuple[np.ndarray, FilterReport]:
    """Identical planner + filter pipeline as the online controller, but run on the
    frozen density with the stiffness computed at fit time."""
    cost = CostModel(q=env_state.q, goal=env_state.goal)
    action, _plan_res, report = plan_and_filter(
        frozen.model, cost, frozen.alpha, frozen.beta, frozen.eta, config, u_warm, env_state.u_max
    )
    return action, report
