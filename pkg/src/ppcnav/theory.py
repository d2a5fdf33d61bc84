"""Grid-based numerical validation of the landscape, contraction, stiffness,
sensitivity, level-set, mixture-curvature, and Gibbs/MAP claims on synthetic
scenes where brute force is ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import density as dens

GRID_N_DEFAULT = 201
_EVAL_CHUNK = 16384


class MultiBasin(ValueError):
    """The thresholded component holds more than one density mode; scene rejected."""


class SmallnessViolated(ValueError):
    """The density gap is too large relative to the level threshold; check skipped."""


class IdentifiabilityViolated(ValueError):
    """Conditional Hessians differ across contexts; the engineered regime is broken."""


@dataclass(frozen=True)
class CheckReport:
    name: str
    passed: bool
    worst_violation: float
    tolerance: float
    probe_count: int
    parameters: dict = field(default_factory=dict)
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.passed != (self.worst_violation <= self.tolerance):
            raise ValueError("pass flag must equal (worst violation <= tolerance)")


def _report(name: str, worst: float, tol: float, probes: int, params: dict, notes: tuple[str, ...] = ()) -> CheckReport:
    return CheckReport(
        name=name,
        passed=bool(worst <= tol),
        worst_violation=float(worst),
        tolerance=float(tol),
        probe_count=int(probes),
        parameters=params,
        notes=notes,
    )


@dataclass(frozen=True)
class Scene:
    """A KDE landscape plus quadratic tracking cost on an explicit evaluation grid."""

    points: np.ndarray
    bandwidth: float
    alpha: float
    q: np.ndarray
    goal: np.ndarray
    beta: float
    grid_lo: np.ndarray
    grid_hi: np.ndarray
    grid_n: int = GRID_N_DEFAULT
    density_offset: float = 0.0  # synthetic perturbation knob for level-set checks

    def model(self) -> dens.KdeModel:
        return dens.KdeModel(points=self.points, bandwidth_u=self.bandwidth)


def make_scene(
    points: np.ndarray,
    bandwidth: float,
    alpha: float,
    q: np.ndarray = (0.0, 0.0),
    goal: np.ndarray = (0.0, 0.0),
    beta: float = 1.0,
    grid_n: int = GRID_N_DEFAULT,
    density_offset: float = 0.0,
) -> Scene:
    """Scene with grid bounds that provably cover the alpha-superlevel set with
    margin >= 3h: the mixture density is below alpha wherever every kernel is,
    which happens beyond r_cut of all points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    peak_term = 1.0 / (2.0 * math.pi * bandwidth**2)
    r_cut = bandwidth * math.sqrt(2.0 * max(0.0, math.log(peak_term / alpha)))
    margin = r_cut + 3.0 * bandwidth
    return Scene(
        points=points,
        bandwidth=bandwidth,
        alpha=alpha,
        q=np.asarray(q, dtype=float),
        goal=np.asarray(goal, dtype=float),
        beta=beta,
        grid_lo=points.min(axis=0) - margin,
        grid_hi=points.max(axis=0) + margin,
        grid_n=grid_n,
        density_offset=density_offset,
    )


@dataclass(frozen=True)
class MixtureScene:
    """Discrete context mixture: per-context action KDEs with prior weights."""

    context_models: tuple[dens.KdeModel, ...]
    weights: np.ndarray
    current_context: int
    alpha: float
    q: np.ndarray
    goal: np.ndarray
    beta: float
    grid_lo: np.ndarray
    grid_hi: np.ndarray
    grid_n: int = GRID_N_DEFAULT

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.shape[0] != len(self.context_models):
            raise ValueError("one weight per context model")
        if not math.isclose(float(w.sum()), 1.0, rel_tol=1e-9):
            raise ValueError("weights must sum to 1")
        object.__setattr__(self, "weights", w)


def make_mixture_scene(
    context_models: list[dens.KdeModel],
    weights: np.ndarray,
    alpha: float,
    current_context: int = 0,
    q: np.ndarray = (0.0, 0.0),
    goal: np.ndarray = (0.0, 0.0),
    beta: float = 1.0,
    grid_n: int = GRID_N_DEFAULT,
) -> MixtureScene:
    all_pts = np.vstack([m.points for m in context_models])
    h_max = max(m.bandwidth_u for m in context_models)
    peak_term = 1.0 / (2.0 * math.pi * min(m.bandwidth_u for m in context_models) ** 2)
    r_cut = h_max * math.sqrt(2.0 * max(0.0, math.log(peak_term / alpha)))
    margin = r_cut + 3.0 * h_max
    return MixtureScene(
        context_models=tuple(context_models),
        weights=np.asarray(weights, dtype=float),
        current_context=current_context,
        alpha=alpha,
        q=np.asarray(q, dtype=float),
        goal=np.asarray(goal, dtype=float),
        beta=beta,
        grid_lo=all_pts.min(axis=0) - margin,
        grid_hi=all_pts.max(axis=0) + margin,
        grid_n=grid_n,
    )


# ---------------------------------------------------------------------------
# grid helpers


def _grid_points(lo: np.ndarray, hi: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, float]:
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    cell = max((hi[0] - lo[0]) / (n - 1), (hi[1] - lo[1]) / (n - 1))
    return pts, np.array([n, n]), cell


def _chunked(fn, pts: np.ndarray) -> np.ndarray:
    outs = [fn(pts[i : i + _EVAL_CHUNK]) for i in range(0, pts.shape[0], _EVAL_CHUNK)]
    return np.concatenate(outs, axis=0)


def _component_mask(values_2d: np.ndarray, threshold: float) -> np.ndarray:
    """Connected component (8-connectivity) of {values >= threshold} containing the argmax."""
    mask = values_2d >= threshold
    labels, n_labels = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n_labels == 0:
        raise ValueError("superlevel set is empty on the grid")
    peak_idx = np.unravel_index(int(np.argmax(values_2d)), values_2d.shape)
    return labels == labels[peak_idx]


def _mode_count(values_2d: np.ndarray, component: np.ndarray) -> int:
    neigh_max = ndimage.maximum_filter(values_2d, size=3, mode="constant", cval=-np.inf)
    local_max = (values_2d >= neigh_max) & component
    return int(np.count_nonzero(local_max))


def _strict_interior(component: np.ndarray) -> np.ndarray:
    return ndimage.binary_erosion(component, structure=np.ones((3, 3), dtype=bool))


@dataclass(frozen=True)
class _GridScene:
    pts: np.ndarray
    shape: tuple[int, int]
    cell: float
    log_density: np.ndarray  # flattened, offset-free
    component: np.ndarray  # flattened bool
    cost: np.ndarray
    free_energy: np.ndarray


def _evaluate_scene(scene: Scene, require_single_basin: bool = True) -> _GridScene:
    if scene.density_offset != 0.0:
        raise ValueError("log-density checks require density_offset == 0")
    model = scene.model()
    pts, shape, cell = _grid_points(scene.grid_lo, scene.grid_hi, scene.grid_n)
    ld = _chunked(lambda p: dens.log_density_batch(model, p), pts)
    ld2d = ld.reshape(scene.grid_n, scene.grid_n)
    component2d = _component_mask(ld2d, math.log(scene.alpha))
    if require_single_basin and _mode_count(ld2d, component2d) > 1:
        raise MultiBasin("thresholded component contains multiple density modes")
    resid = scene.q[None, :] + pts - scene.goal[None, :]
    cost = np.einsum("ij,ij->i", resid, resid)
    return _GridScene(
        pts=pts,
        shape=(scene.grid_n, scene.grid_n),
        cell=cell,
        log_density=ld,
        component=component2d.ravel(),
        cost=cost,
        free_energy=cost - scene.beta * ld,
    )


def _component_curvature(model: dens.KdeModel, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mats = _chunked(lambda p: dens.fisher_batch(model, p), pts)
    return dens.sym2x2_eig_bounds(mats)


# ---------------------------------------------------------------------------
# checks


def check_landscape(scene: Scene) -> CheckReport:
    """Strong convexity, smoothness, and the PL inequality of the free energy on
    the thresholded component, against curvature bounds measured on that grid."""
    g = _evaluate_scene(scene)
    if scene.beta == 0.0:
        return _report(
            "landscape", 0.0, 1.0, 0, {"beta": 0.0}, notes=("degenerate-beta-zero",)
        )
    model = scene.model()
    comp_pts = g.pts[g.component]
    lam_min, lam_max = _component_curvature(model, comp_pts)
    kappa = float(np.min(lam_min))
    lam_cap = 1.0 / scene.bandwidth**2
    mu = scene.beta * kappa
    scale = float(np.max(np.abs(g.free_energy[g.component])))
    tol = 1e-6 * scale

    # Hessian of the free energy on the component: 2 I + beta * Fisher.
    hf_min = 2.0 + scene.beta * lam_min
    hf_max = 2.0 + scene.beta * lam_max
    viol_strong = float(np.max(mu - hf_min))
    viol_smooth = float(np.max(hf_max - (2.0 + scene.beta * lam_cap)))

    scores = _chunked(lambda p: dens.score_batch(model, p), comp_pts)
    grad_cost = 2.0 * (scene.q[None, :] + comp_pts - scene.goal[None, :])
    grad_f = grad_cost - scene.beta * scores
    grad_sq = np.einsum("ij,ij->i", grad_f, grad_f)
    f_comp = g.free_energy[g.component]
    viol_pl = float(np.max(2.0 * mu * (f_comp - np.min(f_comp)) - grad_sq))

    worst = max(viol_strong, viol_smooth, viol_pl)
    return _report(
        "landscape",
        worst,
        tol,
        comp_pts.shape[0],
        {
            "kappa": kappa,
            "lambda": lam_cap,
            "mu": mu,
            "beta": scene.beta,
            "strong_convexity_violation": viol_strong,
            "smoothness_violation": viol_smooth,
            "pl_violation": viol_pl,
            "scale": scale,
        },
    )


def check_contraction(scene: Scene, k: int, n_starts: int = 100, seed: int = 0) -> CheckReport:
    """Geometric function-value contraction from warm starts inside the attraction
    ball around the grid-restricted minimizer."""
    g = _evaluate_scene(scene)
    model = scene.model()
    comp2d = g.component.reshape(g.shape)
    comp_pts = g.pts[g.component]
    lam_min, _ = _component_curvature(model, comp_pts)
    kappa = float(np.min(lam_min))
    mu = scene.beta * kappa
    big_l = 2.0 + scene.beta / scene.bandwidth**2
    eta = 1.0 / big_l

    f_grid = np.where(g.component, g.free_energy, np.inf)
    star_flat = int(np.argmin(f_grid))
    u_star = g.pts[star_flat]
    f_star = float(g.free_energy[star_flat])
    dist_cells = ndimage.distance_transform_edt(comp2d)
    star_idx = np.unravel_index(star_flat, g.shape)
    radius = float(dist_cells[star_idx]) * g.cell

    def free_energy(u: np.ndarray) -> float:
        resid = scene.q + u - scene.goal
        return float(resid @ resid) - scene.beta * dens.log_density(model, u)

    rng = np.random.default_rng(seed)
    scale = float(np.max(np.abs(g.free_energy[g.component])))
    tol = 1e-9 * scale
    log_alpha = math.log(scene.alpha)
    worst = 0.0
    count = 0
    attempts = 0
    while count < n_starts and attempts < 20 * n_starts:
        attempts += 1
        r = radius * 0.95 * math.sqrt(rng.uniform())
        theta = rng.uniform(0.0, 2.0 * math.pi)
        u0 = u_star + r * np.array([math.cos(theta), math.sin(theta)])
        if dens.log_density(model, u0) < log_alpha:
            continue
        count += 1
        u = u0.copy()
        f0 = free_energy(u0)
        for _ in range(k):
            grad = 2.0 * (scene.q + u - scene.goal) - scene.beta * dens.score(model, u)
            u = u - eta * grad
        lhs = free_energy(u) - f_star
        rhs = (1.0 - eta * mu) ** k * (f0 - f_star)
        worst = max(worst, lhs - rhs)
    return _report(
        "contraction",
        worst,
        tol,
        count,
        {"k": k, "eta": eta, "mu": mu, "L": big_l, "attraction_radius": radius},
    )


def check_critical_stiffness(scene: Scene, beta_grid: np.ndarray) -> CheckReport:
    """Above the critical stiffness the grid argmin is strictly interior and within
    the displacement bound of the density peak; below it the transition is recorded."""
    g = _evaluate_scene(scene)
    model = scene.model()
    comp2d = g.component.reshape(g.shape)
    comp_pts = g.pts[g.component]
    lam_min, _ = _component_curvature(model, comp_pts)
    kappa = float(np.min(lam_min))
    if kappa <= 0.0:
        raise ValueError("scene violates local log-concavity; pick a higher alpha")

    peak_flat = int(np.argmax(np.where(g.component, g.log_density, -np.inf)))
    u_bar = g.pts[peak_flat]
    peak_idx = np.unravel_index(peak_flat, g.shape)
    mask2d = g.log_density.reshape(g.shape) >= math.log(scene.alpha)
    r_alpha = float(ndimage.distance_transform_edt(mask2d)[peak_idx]) * g.cell

    grad_cost = 2.0 * (scene.q[None, :] + comp_pts - scene.goal[None, :])
    g_c = float(np.max(np.linalg.norm(grad_cost, axis=1)))
    beta_star = g_c / (kappa * r_alpha)

    interior2d = _strict_interior(comp2d)
    worst = 0.0
    transitions = []
    for beta in np.asarray(beta_grid, dtype=float):
        f_beta = g.cost - beta * g.log_density
        idx_flat = int(np.argmin(f_beta))
        idx = np.unravel_index(idx_flat, g.shape)
        interior = bool(interior2d[idx])
        displacement = float(np.linalg.norm(g.pts[idx_flat] - u_bar))
        transitions.append(
            {"beta": float(beta), "interior": interior, "displacement": displacement}
        )
        if beta > beta_star:
            if not interior:
                worst = max(worst, math.inf)
            bound = g_c / (beta * kappa) + g.cell * math.sqrt(2.0)
            worst = max(worst, displacement - bound)
    return _report(
        "critical_stiffness",
        worst,
        1e-9,
        len(transitions),
        {
            "beta_star": beta_star,
            "kappa": kappa,
            "r_alpha": r_alpha,
            "g_c": g_c,
            "transitions": transitions,
        },
    )


def check_comparator_sensitivity(scene_t: Scene, scene_t1: Scene) -> CheckReport:
    """Per-step comparator shift against the score-variation bound of the
    sensitivity lemma; scenes must share beta (the lemma holds beta fixed)."""
    if scene_t.beta != scene_t1.beta:
        raise ValueError("comparator sensitivity requires identical beta across scenes")
    g_t = _evaluate_scene(scene_t)
    g_prev = _evaluate_scene(scene_t1)
    model_t = scene_t.model()
    model_prev = scene_t1.model()

    comp_pts = g_t.pts[g_t.component]
    lam_min, _ = _component_curvature(model_t, comp_pts)
    kappa = float(np.min(lam_min))
    if kappa <= 0.0:
        raise ValueError("scene violates local log-concavity")

    interior_t = _strict_interior(g_t.component.reshape(g_t.shape)).ravel()
    star_t = g_t.pts[int(np.argmin(np.where(g_t.component, g_t.free_energy, np.inf)))]
    star_prev = g_prev.pts[int(np.argmin(np.where(g_prev.component, g_prev.free_energy, np.inf)))]
    if dens.log_density(model_t, star_prev) < math.log(scene_t.alpha):
        raise ValueError("previous comparator left the current level set; precondition fails")
    if not interior_t[int(np.argmin(np.linalg.norm(g_t.pts - star_t[None, :], axis=1)))]:
        raise ValueError("current comparator is not interior")

    s_t = _chunked(lambda p: dens.score_batch(model_t, p), comp_pts)
    s_prev = _chunked(lambda p: dens.score_batch(model_prev, p), comp_pts)
    sup_diff = float(np.max(np.linalg.norm(s_t - s_prev, axis=1)))
    shift = float(np.linalg.norm(star_t - star_prev))
    tol = 2.0 * math.sqrt(2.0) * g_t.cell + 1e-9
    worst = shift - sup_diff / kappa
    return _report(
        "comparator_sensitivity",
        worst,
        tol,
        comp_pts.shape[0],
        {"kappa": kappa, "shift": shift, "sup_score_diff": sup_diff},
    )


def check_level_set_stability(scene_truth: Scene, scene_estimate: Scene, alpha: float) -> CheckReport:
    """Grid Hausdorff distance between the two alpha-superlevel sets against the
    (alpha + gap)/c_boundary bound with an empirical transversality constant."""
    model_t = scene_truth.model()
    model_e = scene_estimate.model()
    pts, shape, cell = _grid_points(scene_truth.grid_lo, scene_truth.grid_hi, scene_truth.grid_n)
    p_t = _chunked(lambda p: dens.density_batch(model_t, p), pts) + scene_truth.density_offset
    p_e = _chunked(lambda p: dens.density_batch(model_e, p), pts) + scene_estimate.density_offset
    gap = float(np.max(np.abs(p_t - p_e)))
    if gap >= alpha:
        raise SmallnessViolated(f"sup density gap {gap:.3g} >= alpha {alpha:.3g}")

    mask_t = (p_t >= alpha).reshape(shape[0], shape[1])
    mask_e = (p_e >= alpha).reshape(shape[0], shape[1])
    if not (mask_t.any() and mask_e.any()):
        raise ValueError("a superlevel set is empty on the grid")

    dist_to_t = ndimage.distance_transform_edt(~mask_t) * cell
    dist_to_e = ndimage.distance_transform_edt(~mask_e) * cell
    hausdorff = max(float(np.max(dist_to_t[mask_e])), float(np.max(dist_to_e[mask_t])))

    eroded = ndimage.binary_erosion(mask_t, structure=np.ones((3, 3), dtype=bool))
    boundary = mask_t & ~eroded
    dist_to_boundary = ndimage.distance_transform_edt(~boundary) * cell
    tube = (dist_to_boundary <= hausdorff + 3.0 * cell).ravel()
    tube_pts = pts[tube]
    grad_norm = np.linalg.norm(
        _chunked(lambda p: dens.score_batch(model_t, p), tube_pts)
        * _chunked(lambda p: dens.density_batch(model_t, p), tube_pts)[:, None],
        axis=1,
    )
    c_boundary = float(np.min(grad_norm))
    notes: tuple[str, ...] = ()
    if c_boundary < 1e-8:
        bound = math.inf
        notes = ("degenerate-transversality-bound-vacuous",)
    else:
        bound = (alpha + gap) / c_boundary + 2.0 * cell
    return _report(
        "level_set_stability",
        hausdorff - bound,
        1e-12,
        int(tube.sum()),
        {"hausdorff": hausdorff, "gap": gap, "c_boundary": c_boundary, "bound": bound},
        notes=notes,
    )


def _mixture_log_density(mix: MixtureScene, pts: np.ndarray) -> np.ndarray:
    logs = np.stack(
        [dens.log_density_batch(m, pts) + math.log(w) for m, w in zip(mix.context_models, mix.weights)]
    )
    top = np.max(logs, axis=0)
    return top + np.log(np.sum(np.exp(logs - top[None, :]), axis=0))


def _posterior_weights(mix: MixtureScene, pts: np.ndarray) -> np.ndarray:
    """(n_ctx, n_pts) posterior w(ctx | u) ∝ p(u | ctx) * pi(ctx)."""
    logs = np.stack(
        [dens.log_density_batch(m, pts) + math.log(w) for m, w in zip(mix.context_models, mix.weights)]
    )
    top = np.max(logs, axis=0)
    w = np.exp(logs - top[None, :])
    return w / np.sum(w, axis=0, keepdims=True)


def _fd_hessian(fn, u: np.ndarray, step: float) -> np.ndarray:
    h = np.zeros((2, 2))
    for i in range(2):
        ei = np.zeros(2)
        ei[i] = step
        h[i, i] = (fn(u + ei) - 2.0 * fn(u) + fn(u - ei)) / step**2
    e0 = np.array([step, 0.0])
    e1 = np.array([0.0, step])
    h[0, 1] = h[1, 0] = (
        fn(u + e0 + e1) - fn(u + e0 - e1) - fn(u - e0 + e1) + fn(u - e0 - e1)
    ) / (4.0 * step**2)
    return h


def mixture_hessian_closed_form(mix: MixtureScene, u: np.ndarray) -> np.ndarray:
    """E_w[∇² ln p(u|ctx)] + Cov_w(score(u|ctx)) with w the posterior over contexts."""
    u = np.asarray(u, dtype=float)
    w = _posterior_weights(mix, u[None, :])[:, 0]
    hessians = np.stack([-dens.fisher_info(m, u) for m in mix.context_models])
    scores = np.stack([dens.score(m, u) for m in mix.context_models])
    mean_h = np.einsum("c,cij->ij", w, hessians)
    mean_s = w @ scores
    cov = (scores * w[:, None]).T @ scores - np.outer(mean_s, mean_s)
    return mean_h + cov


def check_mixture_hessian(mix: MixtureScene, probes: np.ndarray) -> CheckReport:
    """Closed-form posterior decomposition of the marginal log-density Hessian
    against central finite differences at each probe."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    h_min = min(m.bandwidth_u for m in mix.context_models)
    step = 1e-4 * h_min

    def ln_marg(u: np.ndarray) -> float:
        return float(_mixture_log_density(mix, u[None, :])[0])

    worst = 0.0
    scale = 1.0
    for u in probes:
        closed = mixture_hessian_closed_form(mix, u)
        fd = _fd_hessian(ln_marg, u, step)
        scale = max(scale, float(np.linalg.norm(fd)))
        worst = max(worst, float(np.linalg.norm(closed - fd)))
    tol = 1e-5 * scale
    return _report(
        "mixture_hessian",
        worst,
        tol,
        probes.shape[0],
        {"fd_step": step, "scale": scale, "n_contexts": len(mix.context_models)},
    )


def check_ctx_gap(mix: MixtureScene) -> CheckReport:
    """Contextual safety gap: under the identifiable regime (equal conditional
    Hessians), conditioning gains at least the posterior score covariance in
    curvature, and the safety-bound gap at least its implied residual."""
    cond = mix.context_models[mix.current_context]
    pts, shape, cell = _grid_points(mix.grid_lo, mix.grid_hi, mix.grid_n)
    ld_cond = _chunked(lambda p: dens.log_density_batch(cond, p), pts)
    component = _component_mask(ld_cond.reshape(shape[0], shape[1]), math.log(mix.alpha)).ravel()
    region = pts[component]
    if region.shape[0] == 0:
        raise ValueError("conditional superlevel set is empty")

    sub = region[:: max(1, region.shape[0] // 64)]
    hessians = np.stack(
        [_chunked(lambda p, m=m: dens.fisher_batch(m, p), sub) for m in mix.context_models]
    )
    ident_dev = float(np.max(np.abs(hessians - hessians[:1])))
    if ident_dev > 1e-8 / min(m.bandwidth_u for m in mix.context_models) ** 2:
        raise IdentifiabilityViolated(
            f"conditional Hessians differ across contexts (max dev {ident_dev:.3g})"
        )

    lam_min_cond, _ = _component_curvature(cond, region)
    kappa_cond = float(np.min(lam_min_cond))

    w = _posterior_weights(mix, region)
    scores = np.stack([_chunked(lambda p, m=m: dens.score_batch(m, p), region) for m in mix.context_models])
    mean_s = np.einsum("ce,cej->ej", w, scores)
    second = np.einsum("ce,cei,cej->eij", w, scores, scores)
    cov = second - np.einsum("ei,ej->eij", mean_s, mean_s)
    cov_min, cov_max = dens.sym2x2_eig_bounds(cov)
    sigma_sq = float(np.min(cov_min))

    fisher_cond = _chunked(lambda p: dens.fisher_batch(cond, p), region)
    marg_fisher = fisher_cond - cov  # identifiable regime: H_marg = H_cond - Cov
    marg_min, _ = dens.sym2x2_eig_bounds(marg_fisher)
    kappa_marg = float(np.min(marg_min))
    if kappa_marg <= 0.0:
        raise ValueError("marginal curvature is not positive; contexts too dispersed")

    grad_cost = 2.0 * (mix.q[None, :] + region - mix.goal[None, :])
    g_c = float(np.max(np.linalg.norm(grad_cost, axis=1)))
    gap_bound = g_c * sigma_sq / (mix.beta * kappa_cond * kappa_marg)
    bound_gap = g_c / mix.beta * (1.0 / kappa_marg - 1.0 / kappa_cond)

    tol = 1e-9 * (1.0 + 1.0 / min(m.bandwidth_u for m in mix.context_models) ** 2)
    worst = max(sigma_sq - (kappa_cond - kappa_marg), gap_bound - bound_gap)
    return _report(
        "ctx_gap",
        worst,
        tol,
        region.shape[0],
        {
            "kappa_cond": kappa_cond,
            "kappa_marg": kappa_marg,
            "sigma_sq": sigma_sq,
            "gap_bound": gap_bound,
            "bound_gap": bound_gap,
        },
    )


def check_gibbs_map(scene: Scene) -> CheckReport:
    """Cell-exact agreement between the Gibbs-policy argmax and the penalized
    objective argmin, with a positive finite partition function."""
    model = scene.model()
    pts, shape, cell = _grid_points(scene.grid_lo, scene.grid_hi, scene.grid_n)
    ld = _chunked(lambda p: dens.log_density_batch(model, p), pts)
    resid = scene.q[None, :] + pts - scene.goal[None, :]
    cost = np.einsum("ij,ij->i", resid, resid)

    unnorm = np.exp(ld - cost / scene.beta)
    area = cell * cell
    z = float(np.sum(unnorm)) * area
    z_coarse = float(np.sum(unnorm.reshape(shape[0], shape[1])[::2, ::2])) * 4.0 * area
    if not (z > 0.0 and math.isfinite(z)):
        raise ValueError("partition function is not positive finite")
    if abs(z_coarse - z) > 0.05 * z:
        raise ValueError("grid quadrature of Z has not converged; refine the grid")

    gibbs = unnorm / z
    idx_map = int(np.argmax(gibbs))
    idx_ppc = int(np.argmin(cost - scene.beta * ld))
    agreement = float(np.linalg.norm(pts[idx_map] - pts[idx_ppc]))
    return _report(
        "gibbs_map",
        0.0 if idx_map == idx_ppc else agreement,
        0.0,
        pts.shape[0],
        {"z": z, "z_refinement_rel_err": abs(z_coarse - z) / z, "grid_n": scene.grid_n},
    )


def fit_rate_exponent(error_series) -> float:
    """Least-squares slope of ln(error) against ln(N)."""
    series = [(float(n), float(e)) for n, e in error_series]
    if len(series) < 4:
        raise ValueError("need at least 4 (N, error) points")
    ns = np.array([n for n, _ in series])
    errs = np.array([e for _, e in series])
    if np.any(np.diff(ns) <= 0):
        raise ValueError("N must be strictly increasing")
    if np.any(errs <= 0):
        raise ValueError("errors must be positive")
    slope, _ = np.polyfit(np.log(ns), np.log(errs), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# built-in scene families for `run checks`


def _cluster_scene(rng: np.random.Generator, beta: float = 1.0, grid_n: int = GRID_N_DEFAULT) -> Scene:
    """Tight cluster (spread below bandwidth) whose thresholded component is a
    single strictly log-concave basin."""
    h = float(rng.uniform(0.25, 0.45))
    n_pts = int(rng.integers(6, 14))
    center = rng.uniform(-0.3, 0.3, 2)
    points = center + rng.normal(0.0, 0.4 * h, (n_pts, 2))
    model = dens.KdeModel(points=points, bandwidth_u=h)
    peak = dens.density_peak(model, points[0])
    alpha = 0.45 * dens.density(model, peak)
    goal = center + rng.uniform(-0.5, 0.5, 2)
    return make_scene(points, h, alpha, q=(0.0, 0.0), goal=goal, beta=beta, grid_n=grid_n)


def _single_gaussian_scene(beta: float = 2.0, grid_n: int = GRID_N_DEFAULT) -> Scene:
    h = 0.3
    peak = 1.0 / (2.0 * math.pi * h**2)
    return make_scene(
        np.array([[0.1, -0.2]]), h, 0.3 * peak, q=(0.0, 0.0), goal=(0.4, 0.1), beta=beta, grid_n=grid_n
    )


def _identifiable_mixture(rng: np.random.Generator) -> MixtureScene:
    """Single-kernel conditionals sharing one bandwidth: equal Hessians everywhere,
    so the identifiable-regime hypothesis holds exactly."""
    h = 0.3
    n_ctx = int(rng.integers(2, 5))
    angles = 2.0 * math.pi * np.arange(n_ctx) / n_ctx
    centers = 0.5 * h * np.column_stack([np.cos(angles), np.sin(angles)])
    models = [dens.KdeModel(points=c[None, :], bandwidth_u=h) for c in centers]
    weights = rng.uniform(0.5, 1.5, n_ctx)
    weights /= weights.sum()
    cond = models[0]
    alpha = 0.3 * dens.density(cond, np.asarray(centers[0]))
    return make_mixture_scene(models, weights, alpha, current_context=0, goal=(0.3, 0.0), beta=1.5)


def _random_mixture(rng: np.random.Generator) -> MixtureScene:
    n_ctx = int(rng.integers(2, 5))
    models = []
    for _ in range(n_ctx):
        h = float(rng.uniform(0.15, 0.4))
        pts = rng.normal(0.0, 0.5, (int(rng.integers(3, 9)), 2))
        models.append(dens.KdeModel(points=pts, bandwidth_u=h))
    weights = rng.uniform(0.2, 1.0, n_ctx)
    weights /= weights.sum()
    return make_mixture_scene(models, weights, alpha=1e-3, beta=1.0)


def default_check_suite(seed: int = 0) -> list[CheckReport]:
    """The full theory-validation pass used by `run checks` and the acceptance gate."""
    rng = np.random.default_rng(seed)
    reports: list[CheckReport] = []

    landscape_scenes = [_single_gaussian_scene()] + [_cluster_scene(rng) for _ in range(4)]
    for scene in landscape_scenes:
        reports.append(check_landscape(scene))
    for scene in landscape_scenes[:3]:
        reports.append(check_contraction(scene, k=40, n_starts=100, seed=seed))
    for scene in landscape_scenes[:3]:
        base = check_critical_stiffness(
            scene, beta_grid=np.array([0.1, 0.5, 2.0, 5.0, 10.0]) * _beta_star_of(scene)
        )
        reports.append(base)
    for _ in range(3):
        scene_t = _cluster_scene(rng)
        delta = rng.normal(0.0, 0.3 * scene_t.bandwidth, 2)
        scene_prev = make_scene(
            scene_t.points + delta[None, :],
            scene_t.bandwidth,
            scene_t.alpha,
            q=scene_t.q,
            goal=scene_t.goal,
            beta=scene_t.beta,
            grid_n=scene_t.grid_n,
        )
        reports.append(check_comparator_sensitivity(scene_t, scene_prev))
    for _ in range(2):
        truth = _cluster_scene(rng)
        bump = make_scene(
            truth.points,
            truth.bandwidth,
            truth.alpha,
            q=truth.q,
            goal=truth.goal,
            beta=truth.beta,
            grid_n=truth.grid_n,
            density_offset=0.2 * truth.alpha,
        )
        reports.append(check_level_set_stability(truth, bump, truth.alpha))
        jitter = make_scene(
            truth.points + rng.normal(0.0, 0.05 * truth.bandwidth, truth.points.shape),
            truth.bandwidth,
            truth.alpha,
            q=truth.q,
            goal=truth.goal,
            beta=truth.beta,
            grid_n=truth.grid_n,
        )
        reports.append(check_level_set_stability(truth, jitter, truth.alpha))
    for _ in range(20):
        mix = _random_mixture(rng)
        probes = rng.normal(0.0, 0.4, (5, 2))
        reports.append(check_mixture_hessian(mix, probes))
    for _ in range(3):
        reports.append(check_ctx_gap(_identifiable_mixture(rng)))
    reports.append(check_gibbs_map(_cluster_scene(rng, beta=1.5, grid_n=401)))
    return reports


def _beta_star_of(scene: Scene) -> float:
    g = _evaluate_scene(scene)
    model = scene.model()
    comp_pts = g.pts[g.component]
    lam_min, _ = _component_curvature(model, comp_pts)
    kappa = float(np.min(lam_min))
    peak_flat = int(np.argmax(np.where(g.component, g.log_density, -np.inf)))
    peak_idx = np.unravel_index(peak_flat, g.shape)
    mask2d = g.log_density.reshape(g.shape) >= math.log(scene.alpha)
    r_alpha = float(ndimage.distance_transform_edt(mask2d)[peak_idx]) * g.cell
    grad_cost = 2.0 * (scene.q[None, :] + comp_pts - scene.goal[None, :])
    g_c = float(np.max(np.linalg.norm(grad_cost, axis=1)))
    return g_c / (kappa * r_alpha)
