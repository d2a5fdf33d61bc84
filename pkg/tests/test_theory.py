import math

import numpy as np
import pytest

from ppcnav import density as dens, theory


def single_gaussian_scene(beta=2.0, h=0.3, alpha_frac=0.3, goal=(0.4, 0.1), grid_n=161):
    peak = 1.0 / (2 * math.pi * h**2)
    return theory.make_scene(
        np.array([[0.1, -0.2]]), h, alpha_frac * peak, q=(0.0, 0.0), goal=goal,
        beta=beta, grid_n=grid_n,
    )


def two_point_scene(separation, alpha, h=0.3, beta=1.0, grid_n=161):
    pts = np.array([[-separation / 2, 0.0], [separation / 2, 0.0]])
    return theory.make_scene(pts, h, alpha, q=(0.0, 0.0), goal=(0.2, 0.0), beta=beta,
                             grid_n=grid_n)


def saddle_density(separation, h):
    pts = np.array([[-separation / 2, 0.0], [separation / 2, 0.0]])
    model = dens.KdeModel(points=pts, bandwidth_u=h)
    return dens.density(model, np.zeros(2))


# --- landscape -----------------------------------------------------------------


def test_landscape_single_gaussian_tight():
    report = theory.check_landscape(single_gaussian_scene())
    assert report.passed
    # H_F = 2I + beta * I/h^2 exactly: measured curvature equals the bound
    assert report.parameters["kappa"] == pytest.approx(1.0 / 0.09, rel=1e-9)
    assert report.parameters["strong_convexity_violation"] <= 0.0 + 1e-12


def test_landscape_beta_zero_degenerate_flagged():
    scene = single_gaussian_scene(beta=0.0)
    report = theory.check_landscape(scene)
    assert report.passed
    assert "degenerate-beta-zero" in report.notes


def test_landscape_two_point_alpha_above_saddle_passes():
    h, sep = 0.3, 0.9  # bimodal
    saddle = saddle_density(sep, h)
    report = theory.check_landscape(two_point_scene(sep, 1.1 * saddle, h))
    assert report.passed


def test_landscape_two_point_alpha_below_saddle_multibasin():
    h, sep = 0.3, 0.9
    saddle = saddle_density(sep, h)
    with pytest.raises(theory.MultiBasin):
        theory.check_landscape(two_point_scene(sep, 0.9 * saddle, h))


def test_landscape_random_cluster_scenes():
    rng = np.random.default_rng(0)
    for _ in range(3):
        report = theory.check_landscape(theory._cluster_scene(rng))
        assert report.passed


# --- contraction -----------------------------------------------------------------


def test_contraction_single_gaussian():
    report = theory.check_contraction(single_gaussian_scene(), k=30, n_starts=50)
    assert report.passed
    assert report.probe_count == 50


def test_contraction_k_zero_equality():
    report = theory.check_contraction(single_gaussian_scene(), k=0, n_starts=20)
    assert report.passed


def test_contraction_boundary_step_size():
    # eta = 1/L exactly is the theorem's boundary step size; the check uses it
    report = theory.check_contraction(single_gaussian_scene(beta=1.0), k=25, n_starts=30)
    assert report.passed
    assert report.parameters["eta"] == pytest.approx(1.0 / (2.0 + 1.0 / 0.09))


def test_contraction_exact_geometric_envelope_single_gaussian():
    # isotropic quadratic: one gradient step at eta = 1/L lands on the minimizer
    scene = single_gaussian_scene(beta=2.0)
    model = scene.model()
    eta = 1.0 / (2.0 + scene.beta / scene.bandwidth**2)
    v = scene.goal - scene.q
    u_bar = scene.points[0]
    ratio = scene.beta / scene.bandwidth**2
    u_star = (2.0 * v + ratio * u_bar) / (2.0 + ratio)
    u = u_star + np.array([0.05, -0.03])
    grad = 2.0 * (scene.q + u - scene.goal) - scene.beta * dens.score(model, u)
    stepped = u - eta * grad
    assert stepped == pytest.approx(u_star, abs=1e-12)


# --- critical stiffness ------------------------------------------------------------


def test_critical_stiffness_interior_above_threshold():
    scene = single_gaussian_scene(grid_n=201)
    beta_star = theory._beta_star_of(scene)
    report = theory.check_critical_stiffness(scene, np.array([0.1, 0.5, 2.0, 10.0]) * beta_star)
    assert report.passed
    transitions = report.parameters["transitions"]
    high = [t for t in transitions if t["beta"] > beta_star]
    assert all(t["interior"] for t in high)
    # margin at 10x: displacement leaves at least r_alpha - G_c/(beta kappa) of slack
    t10 = transitions[-1]
    margin = report.parameters["r_alpha"] - report.parameters["g_c"] / (
        t10["beta"] * report.parameters["kappa"]
    )
    assert margin > 0


def test_critical_stiffness_low_beta_boundary_illustration():
    # cost pulls outward strongly; far below beta* the argmin leaves the interior
    scene = single_gaussian_scene(goal=(3.0, 0.0), grid_n=201)
    beta_star = theory._beta_star_of(scene)
    report = theory.check_critical_stiffness(scene, np.array([0.02, 2.0]) * beta_star)
    assert report.passed  # low-beta rows are recorded, not asserted
    low = report.parameters["transitions"][0]
    assert not low["interior"]


def test_critical_stiffness_goal_at_peak_degenerate():
    scene = theory.make_scene(
        np.array([[0.1, -0.2]]), 0.3, 0.3 / (2 * math.pi * 0.09),
        q=(0.0, 0.0), goal=(0.1, -0.2), beta=1.0, grid_n=201,
    )
    beta_star = theory._beta_star_of(scene)
    report = theory.check_critical_stiffness(scene, np.array([2.0, 5.0]) * beta_star)
    assert report.passed
    for t in report.parameters["transitions"]:
        cell = math.sqrt(2.0) * (scene.grid_hi[0] - scene.grid_lo[0]) / (scene.grid_n - 1)
        assert t["displacement"] <= cell + 1e-12


# --- comparator sensitivity ----------------------------------------------------------


def test_comparator_identical_scenes():
    scene = single_gaussian_scene()
    report = theory.check_comparator_sensitivity(scene, scene)
    assert report.passed
    assert report.parameters["shift"] == 0.0


def test_comparator_translated_points():
    rng = np.random.default_rng(1)
    scene = theory._cluster_scene(rng)
    delta = np.array([0.1, -0.05]) * scene.bandwidth
    prev = theory.make_scene(scene.points + delta, scene.bandwidth, scene.alpha,
                             q=scene.q, goal=scene.goal, beta=scene.beta,
                             grid_n=scene.grid_n)
    report = theory.check_comparator_sensitivity(scene, prev)
    assert report.passed


def test_comparator_rejects_beta_mismatch():
    a = single_gaussian_scene(beta=1.0)
    b = single_gaussian_scene(beta=2.0)
    with pytest.raises(ValueError):
        theory.check_comparator_sensitivity(a, b)


# --- level-set stability ----------------------------------------------------------------


def test_level_set_identical_scenes_zero_hausdorff():
    scene = single_gaussian_scene()
    report = theory.check_level_set_stability(scene, scene, scene.alpha)
    assert report.passed
    assert report.parameters["hausdorff"] == 0.0


def test_level_set_uniform_bump_nests():
    truth = single_gaussian_scene()
    bumped = theory.make_scene(truth.points, truth.bandwidth, truth.alpha,
                               q=truth.q, goal=truth.goal, beta=truth.beta,
                               grid_n=truth.grid_n, density_offset=0.2 * truth.alpha)
    report = theory.check_level_set_stability(truth, bumped, truth.alpha)
    assert report.passed
    assert report.parameters["hausdorff"] <= report.parameters["bound"]


def test_level_set_smallness_violated():
    truth = single_gaussian_scene()
    other = theory.make_scene(truth.points, truth.bandwidth, truth.alpha,
                              q=truth.q, goal=truth.goal, beta=truth.beta,
                              grid_n=truth.grid_n, density_offset=2.0 * truth.alpha)
    with pytest.raises(theory.SmallnessViolated):
        theory.check_level_set_stability(truth, other, truth.alpha)


def test_level_set_flat_boundary_flagged_vacuous():
    # a huge-bandwidth, near-flat truth density: tiny boundary gradient
    truth = theory.make_scene(np.array([[0.0, 0.0]]), 60.0, 4.4e-5, beta=1.0, grid_n=81)
    est = theory.make_scene(np.array([[0.02, 0.0]]), 60.0, 4.4e-5, beta=1.0, grid_n=81)
    report = theory.check_level_set_stability(truth, est, 4.4e-5)
    assert report.passed
    assert report.parameters["bound"] == math.inf
    assert "degenerate-transversality-bound-vacuous" in report.notes


# --- mixture Hessian / contextual gap ------------------------------------------------------


def test_mixture_hessian_single_context_reduces_to_conditional():
    m = dens.KdeModel(points=np.array([[0.0, 0.0], [0.3, 0.1]]), bandwidth_u=0.25)
    mix = theory.make_mixture_scene([m], np.array([1.0]), alpha=1e-3)
    u = np.array([0.1, 0.05])
    closed = theory.mixture_hessian_closed_form(mix, u)
    assert closed == pytest.approx(-dens.fisher_info(m, u), abs=1e-12)


def test_mixture_hessian_two_symmetric_contexts():
    h = 0.3
    a = dens.KdeModel(points=np.array([[-0.2, 0.0]]), bandwidth_u=h)
    b = dens.KdeModel(points=np.array([[0.2, 0.0]]), bandwidth_u=h)
    mix = theory.make_mixture_scene([a, b], np.array([0.5, 0.5]), alpha=1e-3)
    center = np.zeros(2)
    closed = theory.mixture_hessian_closed_form(mix, center)
    # covariance term = outer product of the half score difference
    s_a = dens.score(a, center)
    s_b = dens.score(b, center)
    half = 0.5 * (s_a - s_b)
    expected = -np.eye(2) / h**2 + np.outer(half, half) * 1.0
    assert closed == pytest.approx(expected, abs=1e-12)
    report = theory.check_mixture_hessian(mix, center[None, :])
    assert report.passed


def test_mixture_hessian_weighted_equal_contexts():
    m = dens.KdeModel(points=np.array([[0.1, 0.0]]), bandwidth_u=0.3)
    mix = theory.make_mixture_scene([m, m], np.array([0.3, 0.7]), alpha=1e-3)
    report = theory.check_mixture_hessian(mix, np.array([[0.0, 0.1], [0.2, -0.1]]))
    assert report.passed


def test_mixture_hessian_twenty_random_mixtures():
    rng = np.random.default_rng(2)
    for _ in range(20):
        mix = theory._random_mixture(rng)
        probes = rng.normal(0.0, 0.4, (5, 2))
        report = theory.check_mixture_hessian(mix, probes)
        assert report.passed, report


def test_mixture_hessian_fd_richardson_consistency():
    rng = np.random.default_rng(3)
    mix = theory._random_mixture(rng)
    u = np.array([0.05, -0.1])

    def ln_marg(v):
        return float(theory._mixture_log_density(mix, v[None, :])[0])

    h_min = min(m.bandwidth_u for m in mix.context_models)
    full = theory._fd_hessian(ln_marg, u, 1e-4 * h_min)
    half = theory._fd_hessian(ln_marg, u, 5e-5 * h_min)
    closed = theory.mixture_hessian_closed_form(mix, u)
    tol = 1e-5 * max(1.0, float(np.linalg.norm(full)))
    assert np.linalg.norm(full - half) < 4 * tol
    assert np.linalg.norm(closed - full) < tol


def test_ctx_gap_single_context_degenerate():
    m = dens.KdeModel(points=np.array([[0.0, 0.0]]), bandwidth_u=0.3)
    mix = theory.make_mixture_scene([m], np.array([1.0]), alpha=0.3 / (2 * math.pi * 0.09),
                                    goal=(0.3, 0.0), beta=1.5)
    report = theory.check_ctx_gap(mix)
    assert report.passed
    assert report.parameters["sigma_sq"] == pytest.approx(0.0, abs=1e-12)


def test_ctx_gap_translated_copies_strict_gap():
    h = 0.3
    centers = [np.array([0.12, 0.0]), np.array([-0.06, 0.1]), np.array([-0.06, -0.1])]
    models = [dens.KdeModel(points=c[None, :], bandwidth_u=h) for c in centers]
    alpha = 0.35 / (2 * math.pi * h**2)
    mix = theory.make_mixture_scene(models, np.array([0.4, 0.3, 0.3]), alpha=alpha,
                                    goal=(0.25, 0.1), beta=1.5)
    report = theory.check_ctx_gap(mix)
    assert report.passed
    assert report.parameters["kappa_cond"] > report.parameters["kappa_marg"]
    assert report.parameters["bound_gap"] >= report.parameters["gap_bound"] - 1e-9


def test_ctx_gap_rejects_different_bandwidths():
    a = dens.KdeModel(points=np.array([[0.1, 0.0]]), bandwidth_u=0.3)
    b = dens.KdeModel(points=np.array([[-0.1, 0.0]]), bandwidth_u=0.4)
    mix = theory.make_mixture_scene([a, b], np.array([0.5, 0.5]),
                                    alpha=0.2 / (2 * math.pi * 0.09), beta=1.0)
    with pytest.raises(theory.IdentifiabilityViolated):
        theory.check_ctx_gap(mix)


# --- Gibbs/MAP --------------------------------------------------------------------------


def test_gibbs_map_constant_cost_is_density_peak():
    scene = theory.make_scene(np.array([[0.1, -0.2]]), 0.3, 0.3 / (2 * math.pi * 0.09),
                              q=(0.0, 0.0), goal=(0.1, -0.2), beta=1.0, grid_n=201)
    # goal at the kernel center: cost minimized exactly at the density peak
    report = theory.check_gibbs_map(scene)
    assert report.passed


def test_gibbs_map_large_beta_near_peak():
    scene = single_gaussian_scene(beta=1e6, grid_n=201)
    report = theory.check_gibbs_map(scene)
    assert report.passed


def test_gibbs_map_generic_cell_exact_401():
    rng = np.random.default_rng(4)
    scene = theory._cluster_scene(rng, beta=1.5, grid_n=401)
    report = theory.check_gibbs_map(scene)
    assert report.passed
    assert report.parameters["z"] > 0.0


# --- rate exponent -----------------------------------------------------------------------


def test_fit_rate_exponent_exact_power_law():
    ns = [10, 50, 100, 500, 1000]
    series = [(n, 7.0 / n) for n in ns]
    assert theory.fit_rate_exponent(series) == pytest.approx(-1.0, abs=1e-10)


def test_fit_rate_exponent_constant_is_zero():
    series = [(n, 3.3) for n in (10, 20, 40, 80)]
    assert theory.fit_rate_exponent(series) == pytest.approx(0.0, abs=1e-12)


def test_fit_rate_exponent_published_pairs():
    series = [(10, 10.51), (50, 2.59), (100, 1.10), (500, 0.29), (1000, 0.13)]
    slope = theory.fit_rate_exponent(series)
    assert slope == pytest.approx(-0.95, abs=0.03)


def test_fit_rate_exponent_validations():
    with pytest.raises(ValueError):
        theory.fit_rate_exponent([(10, 1.0), (20, 0.5), (30, 0.3)])
    with pytest.raises(ValueError):
        theory.fit_rate_exponent([(10, 1.0), (5, 0.5), (30, 0.3), (40, 0.2)])
    with pytest.raises(ValueError):
        theory.fit_rate_exponent([(10, 1.0), (20, -0.5), (30, 0.3), (40, 0.2)])


def test_check_report_consistency_enforced():
    with pytest.raises(ValueError):
        theory.CheckReport(name="x", passed=True, worst_violation=2.0, tolerance=1.0,
                           probe_count=1)


def test_default_suite_all_pass():
    reports = theory.default_check_suite(seed=0)
    assert len(reports) >= 30
    failed = [r for r in reports if not r.passed]
    assert failed == []
