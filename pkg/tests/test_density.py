import math

import numpy as np
import pytest

from ppcnav import density as dens


def single_point_model(point=(0.0, 0.0), h=0.3):
    return dens.KdeModel(points=np.array([point], dtype=float), bandwidth_u=h)


def random_model(rng, n_low=3, n_high=40):
    n = int(rng.integers(n_low, n_high))
    pts = rng.normal(0.0, 0.6, (n, 2))
    h = float(rng.uniform(0.1, 0.5))
    return dens.KdeModel(points=pts, bandwidth_u=h)


def fd_gradient(fn, u, step):
    g = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = step
        g[i] = (fn(u + e) - fn(u - e)) / (2.0 * step)
    return g


def fd_hessian(fn, u, step):
    h = np.zeros((2, 2))
    for i in range(2):
        e = np.zeros(2)
        e[i] = step
        h[i, i] = (fn(u + e) - 2.0 * fn(u) + fn(u - e)) / step**2
    ex, ey = np.array([step, 0.0]), np.array([0.0, step])
    h[0, 1] = h[1, 0] = (
        fn(u + ex + ey) - fn(u + ex - ey) - fn(u - ex + ey) + fn(u - ex - ey)
    ) / (4.0 * step**2)
    return h


# --- buffer ---------------------------------------------------------------


def test_buffer_eviction_window():
    buf = dens.SampleBuffer(window_steps=5, per_step_cap=10)
    for t in range(8):
        buf.add(np.full((2, 2), float(t)), t)
    assert min(buf.steps) == 3  # entries older than 8 - 5 evicted
    assert len(buf) == 2 * 5
    assert buf.steps == sorted(buf.steps)


def test_buffer_per_step_cap():
    buf = dens.SampleBuffer(window_steps=5, per_step_cap=3)
    buf.add(np.zeros((10, 2)), 0)
    assert len(buf) == 3


def test_fit_marginal_empty_buffer():
    with pytest.raises(dens.EmptyBuffer):
        dens.fit_marginal(dens.SampleBuffer(window_steps=5, per_step_cap=10))


# --- bandwidth ------------------------------------------------------------


def test_bandwidth_floor_on_single_point():
    buf = dens.SampleBuffer(window_steps=5, per_step_cap=10)
    buf.add(np.array([[0.3, 0.3]]), 0)
    model = dens.fit_marginal(buf)
    assert model.bandwidth_u == dens.BANDWIDTH_FLOOR_U


def test_bandwidth_scaling_exponent():
    rng = np.random.default_rng(0)
    pts = rng.normal(0.0, 1.0, (50, 2))
    # same spread, 16x the points: tile the cloud (population std unchanged)
    h1 = dens.bandwidth_rule(pts)
    h2 = dens.bandwidth_rule(np.tile(pts, (16, 1)))
    assert h2 / h1 == pytest.approx(16 ** (-1.0 / 6.0), rel=1e-12)


def test_bandwidth_uniform_disk_scale():
    rng = np.random.default_rng(1)
    r = np.sqrt(rng.uniform(0, 1, 300))
    th = rng.uniform(0, 2 * math.pi, 300)
    pts = np.column_stack([r * np.cos(th), r * np.sin(th)])
    sigma = float(np.mean(np.std(pts, axis=0)))
    assert sigma == pytest.approx(0.5, abs=0.03)  # uniform disk per-axis std
    expected = dens.BANDWIDTH_SCALE * sigma * 300 ** (-1.0 / 6.0)
    assert dens.bandwidth_rule(pts) == pytest.approx(expected)


# --- density / score / fisher closed forms ---------------------------------


def test_density_peak_value_single_gaussian():
    m = single_point_model((0.2, -0.4), h=0.3)
    assert dens.density(m, np.array([0.2, -0.4])) == pytest.approx(1.0 / (2 * math.pi * 0.09))


def test_density_gaussian_tail():
    m = single_point_model((0.0, 0.0), h=0.1)
    peak = dens.density(m, np.zeros(2))
    far = dens.density(m, np.array([1.0, 0.0]))  # 10h away
    assert far < 1e-20 * peak


def test_density_two_point_midpoint_average():
    pts = np.array([[0.0, 0.0], [0.4, 0.0]])
    m = dens.KdeModel(points=pts, bandwidth_u=0.2)
    mid = np.array([0.2, 0.0])
    k = math.exp(-0.2**2 / (2 * 0.04)) / (2 * math.pi * 0.04)
    assert dens.density(m, mid) == pytest.approx(k)  # both kernels equal here


def test_density_integrates_to_one():
    rng = np.random.default_rng(2)
    m = random_model(rng, 3, 8)
    h = m.bandwidth_u
    lo = m.points.min(axis=0) - 6 * h
    hi = m.points.max(axis=0) + 6 * h
    n = 700
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    vals = dens.density_batch(m, np.column_stack([gx.ravel(), gy.ravel()]))
    integral = vals.sum() * (xs[1] - xs[0]) * (ys[1] - ys[0])
    assert integral == pytest.approx(1.0, abs=1e-3)


def test_score_single_gaussian_closed_form():
    h = 0.25
    m = single_point_model((0.1, 0.2), h=h)
    assert dens.score(m, np.array([0.1, 0.2])) == pytest.approx([0.0, 0.0])
    s = dens.score(m, np.array([0.1 + h, 0.2]))
    assert s == pytest.approx([-1.0 / h, 0.0])


def test_score_symmetric_pair_midpoint():
    pts = np.array([[-0.3, 0.0], [0.3, 0.0]])
    m = dens.KdeModel(points=pts, bandwidth_u=0.2)
    assert dens.score(m, np.zeros(2)) == pytest.approx([0.0, 0.0], abs=1e-14)


def test_score_underflow_raises():
    m = single_point_model((0.0, 0.0), h=0.01)
    with pytest.raises(dens.DensityUnderflow):
        dens.score(m, np.array([5.0, 0.0]))
    # unchecked variant still returns the softmax form
    s = dens.score_unchecked(m, np.array([5.0, 0.0]))
    assert np.isfinite(s).all()


def test_score_matches_finite_differences_many_models():
    rng = np.random.default_rng(3)
    worst = 0.0
    checked = 0
    for _ in range(50):
        m = random_model(rng)
        h = m.bandwidth_u
        alpha = 0.1 * math.exp(float(np.max(dens.log_density_batch(m, m.points))))
        while checked % 20 != 0 or checked == 0:
            break
        for _ in range(20):
            u = m.points[int(rng.integers(0, m.n_points))] + rng.normal(0, 0.5 * h, 2)
            if dens.density(m, u) < alpha:
                continue
            checked += 1
            s = dens.score(m, u)
            fd = fd_gradient(lambda v: dens.log_density(m, v), u, 1e-6 * h * 100)
            rel = np.linalg.norm(s - fd) / max(np.linalg.norm(s), np.linalg.norm(fd), 1e-6 / h)
            worst = max(worst, rel)
    assert checked >= 500
    assert worst < 1e-5


def test_fisher_single_gaussian_identity_over_h_squared():
    h = 0.3
    m = single_point_model((0.5, -0.1), h=h)
    for u in (np.zeros(2), np.array([0.6, 0.2])):
        assert dens.fisher_info(m, u) == pytest.approx(np.eye(2) / h**2)


def test_fisher_matches_finite_differences():
    rng = np.random.default_rng(4)
    worst = 0.0
    checked = 0
    for _ in range(30):
        m = random_model(rng)
        h = m.bandwidth_u
        alpha = 0.1 * math.exp(float(np.max(dens.log_density_batch(m, m.points))))
        for _ in range(10):
            u = m.points[int(rng.integers(0, m.n_points))] + rng.normal(0, 0.5 * h, 2)
            if dens.density(m, u) < alpha:
                continue
            checked += 1
            f = dens.fisher_info(m, u)
            fd = -fd_hessian(lambda v: dens.log_density(m, v), u, 1e-4 * h)
            rel = np.linalg.norm(f - fd) / max(np.linalg.norm(fd), 1e-9)
            worst = max(worst, rel)
    assert checked >= 150
    assert worst < 1e-4


def test_fisher_indefinite_between_separated_modes():
    pts = np.array([[-1.0, 0.0], [1.0, 0.0]])
    m = dens.KdeModel(points=pts, bandwidth_u=0.3)
    f = dens.fisher_info(m, np.array([0.0, 0.0]))
    assert np.min(np.linalg.eigvalsh(f)) < 0.0


def test_fisher_lambda_max_bounded_by_inverse_h_squared():
    rng = np.random.default_rng(5)
    for _ in range(20):
        m = random_model(rng)
        pts = rng.normal(0.0, 0.8, (50, 2))
        _, lam_max = dens.sym2x2_eig_bounds(dens.fisher_batch(m, pts))
        assert np.all(lam_max <= 1.0 / m.bandwidth_u**2 + 1e-9)


# --- conditional ------------------------------------------------------------


def make_cond(points, contexts, h_u=0.2, h_ctx=0.3):
    return dens.CondKdeModel(points=np.asarray(points, float), contexts=np.asarray(contexts, float),
                             bandwidth_u=h_u, bandwidth_ctx=h_ctx)


def test_conditional_single_context_matches_marginal():
    rng = np.random.default_rng(6)
    pts = rng.normal(0, 0.5, (40, 2))
    xi = rng.normal(0, 1, 12)
    cond = make_cond(pts, np.tile(xi, (40, 1)))
    weighted = dens.conditional_model(cond, xi)
    marginal = dens.KdeModel(points=pts, bandwidth_u=cond.bandwidth_u)
    for _ in range(50):
        u = rng.normal(0, 0.7, 2)
        assert dens.density(weighted, u) == pytest.approx(dens.density(marginal, u), rel=1e-12)


def test_conditional_huge_bandwidth_is_marginal():
    rng = np.random.default_rng(7)
    pts = rng.normal(0, 0.5, (30, 2))
    ctx = rng.normal(0, 1, (30, 12))
    cond = make_cond(pts, ctx, h_ctx=1e9)
    weighted = dens.conditional_model(cond, rng.normal(0, 1, 12))
    marginal = dens.KdeModel(points=pts, bandwidth_u=cond.bandwidth_u)
    u = np.array([0.1, -0.2])
    assert dens.density(weighted, u) == pytest.approx(dens.density(marginal, u), rel=1e-9)


def test_conditional_cluster_separation():
    rng = np.random.default_rng(8)
    xi_a = np.full(12, 1.0)
    xi_b = np.full(12, -1.0)
    pts = rng.normal(0, 0.3, (40, 2))
    ctx = np.vstack([np.tile(xi_a, (20, 1)), np.tile(xi_b, (20, 1))])
    cond = make_cond(pts, ctx, h_ctx=0.05)
    weighted = dens.conditional_model(cond, xi_a)
    # cluster B is truncated outright or carries negligible mass
    if weighted.n_points > 20:
        w = np.exp(weighted.log_weights)
        assert w[20:].sum() < 1e-6
    else:
        assert weighted.n_points == 20


def test_conditional_context_underflow():
    cond = make_cond(np.zeros((3, 2)), np.zeros((3, 12)), h_ctx=0.01)
    with pytest.raises(dens.ContextUnderflow):
        dens.conditional_model(cond, np.full(12, 50.0))


# --- alpha / curvature ------------------------------------------------------


def test_select_alpha_constant_densities():
    m = single_point_model(h=0.3)
    pts = np.tile(np.array([[0.2, 0.0]]), (7, 1))
    v = dens.density(m, pts[0])
    assert dens.select_alpha(m, pts) == pytest.approx(v)


def test_select_alpha_linear_interpolation_percentile():
    # densities 1..100 -> 10th percentile = 10.9 under linear interpolation
    assert float(np.percentile(np.arange(1.0, 101.0), 10)) == pytest.approx(10.9)
    rng = np.random.default_rng(9)
    m = random_model(rng)
    probes = rng.normal(0, 0.5, (100, 2))
    alpha = dens.select_alpha(m, probes)
    assert alpha == pytest.approx(float(np.percentile(dens.density_batch(m, probes), 10)))


def test_select_alpha_single_probe():
    m = single_point_model(h=0.3)
    p = np.array([[0.1, 0.1]])
    assert dens.select_alpha(m, p) == pytest.approx(dens.density(m, p[0]))


def test_estimate_curvature_single_gaussian_closed_form():
    h = 0.25
    u0 = np.array([0.3, -0.2])
    m = single_point_model(tuple(u0), h=h)
    peak_value = 1.0 / (2 * math.pi * h**2)
    alpha = 0.3 * peak_value
    probes = u0[None, :] + np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1]])
    g_c = 4.0
    est = dens.estimate_curvature(m, alpha, g_c, probes, cost_target=np.array([2.0, 1.0]))
    r_expected = h * math.sqrt(2 * math.log(peak_value / alpha))
    kappa_expected = dens.KAPPA_SHADE / h**2
    assert est.density_peak == pytest.approx(u0, abs=1e-9)
    assert est.r_alpha == pytest.approx(r_expected, rel=1e-6)
    assert est.kappa == pytest.approx(kappa_expected, rel=1e-6)
    assert est.lambda_max == pytest.approx(1.0 / h**2)
    assert est.beta_star == pytest.approx(g_c / (est.kappa * est.r_alpha))
    assert not est.kappa_floored


def test_estimate_curvature_isotropic_ray_radii():
    h = 0.25
    m = single_point_model((0.0, 0.0), h=h)
    alpha = 0.4 / (2 * math.pi * h**2)
    probes = np.array([[0.0, 0.0], [0.05, 0.02]])
    est = dens.estimate_curvature(m, alpha, 1.0, probes)
    radii = dens._ray_level_radii(m, est.density_peak, alpha, 16)
    assert np.max(radii) / np.min(radii) < 1.02


def test_estimate_curvature_floor_engages_on_flat_ridge():
    # dense collinear ridge: along-track score is ~0 at the ring in the ridge direction
    xs = np.linspace(-3.0, 3.0, 121)
    pts = np.column_stack([xs, np.zeros_like(xs)])
    m = dens.KdeModel(points=pts, bandwidth_u=0.3)
    probes = pts[40:80]
    alpha = 0.5 * dens.density(m, np.zeros(2))
    est = dens.estimate_curvature(m, alpha, 1.0, probes, cost_target=np.array([10.0, 0.0]))
    assert est.kappa_floored
    assert est.kappa == dens.KAPPA_FLOOR


def test_estimate_curvature_floor_clamp_contract():
    m = single_point_model((0.0, 0.0), h=0.3)
    alpha = 0.3 / (2 * math.pi * 0.09)
    est = dens.estimate_curvature(m, alpha, 1.0, np.zeros((1, 2)), kappa_floor=1e6)
    assert est.kappa_floored
    # floor is clamped against the upper curvature bound
    assert est.kappa == pytest.approx(est.lambda_max)


def test_estimate_curvature_no_interior_point():
    m = single_point_model((0.0, 0.0), h=0.2)
    far = np.array([[3.0, 3.0]])
    with pytest.raises(dens.NoInteriorPoint):
        dens.estimate_curvature(m, 1.0, 1.0, far)


def test_estimate_curvature_deterministic():
    rng = np.random.default_rng(10)
    m = random_model(rng, 10, 30)
    probes = m.points
    alpha = dens.select_alpha(m, probes)
    a = dens.estimate_curvature(m, alpha, 2.0, probes, cost_target=np.array([1.0, 0.0]))
    b = dens.estimate_curvature(m, alpha, 2.0, probes, cost_target=np.array([1.0, 0.0]))
    assert a.kappa == b.kappa and a.r_alpha == b.r_alpha
    assert np.array_equal(a.density_peak, b.density_peak)


def test_curvature_bundle_invariant():
    with pytest.raises(ValueError):
        dens.CurvatureEstimate(
            kappa=10.0, lambda_max=1.0, r_alpha=0.5, alpha=0.1, beta_star=1.0,
            density_peak=np.zeros(2),
        )


# --- score error ------------------------------------------------------------


def test_score_error_identity_zero():
    m = single_point_model((0.0, 0.0), h=0.3)
    pts = np.random.default_rng(11).normal(0, 0.3, (50, 2))
    assert dens.score_error(m, m, pts) == 0.0


def test_score_error_offset_gaussians_constant():
    h = 0.3
    delta = np.array([0.2, -0.1])
    a = single_point_model((0.0, 0.0), h=h)
    b = single_point_model(tuple(delta), h=h)
    pts = np.random.default_rng(12).normal(0, 0.3, (100, 2))
    expected = float(delta @ delta) / h**4
    assert dens.score_error(a, b, pts) == pytest.approx(expected, rel=1e-12)


def test_score_error_non_negative():
    rng = np.random.default_rng(13)
    for _ in range(10):
        a, b = random_model(rng), random_model(rng)
        pts = rng.normal(0, 0.5, (30, 2))
        assert dens.score_error(a, b, pts) >= 0.0


def test_def4_ordering_on_single_gaussian_models():
    # kappa_est <= lambda_min(fisher) + eps at every interior probe; exact
    # equality family for single kernels (up to the documented shade margin)
    rng = np.random.default_rng(14)
    for _ in range(10):
        h = float(rng.uniform(0.1, 0.5))
        center = rng.normal(0, 0.5, 2)
        m = dens.KdeModel(points=center[None, :], bandwidth_u=h)
        alpha = 0.3 / (2 * math.pi * h**2)
        probes = center[None, :] + rng.normal(0, 0.3 * h, (20, 2))
        est = dens.estimate_curvature(m, alpha, 1.0, probes)
        lam_min = dens.fisher_lambda_min_batch(m, probes)
        assert np.all(est.kappa - 1e-9 <= lam_min)
        _, lam_max = dens.sym2x2_eig_bounds(dens.fisher_batch(m, probes))
        assert np.all(lam_max <= 1.0 / h**2 + 1e-9)


def test_sample_from_mixture_moments():
    pts = np.array([[1.0, 0.0], [-1.0, 0.0]])
    m = dens.KdeModel(points=pts, bandwidth_u=0.1)
    draws = dens.sample_from(m, 4000, np.random.default_rng(15))
    assert abs(float(draws[:, 0].mean())) < 0.1
    assert abs(float(np.abs(draws[:, 0]).mean()) - 1.0) < 0.05
