"""Throwaway tuning probe: kappa aggregation vs displacement bound / cost / safety."""
import time

import numpy as np

from ppcnav import env, density as dens, controller as ctrl
from ppcnav import baselines


def run_ppc(seed, T, kappa_q, n=300):
    rng = np.random.default_rng([seed, 7])
    goals = np.random.default_rng([seed, 11])
    state = env.make_env(np.random.default_rng([seed, 3]))
    buf = dens.SampleBuffer(window_steps=5, per_step_cap=n)
    st = ctrl.initial_ppc_state()
    cfg = ctrl.PlannerConfig(n_samples=n)
    stats = dict(viol=0, blocked=0, filt=0, disp_viol=0, cost=0.0, worst_ratio=0.0)
    orig = dens.estimate_curvature

    def patched(model, alpha, g_c, probes, **kw):
        est = orig(model, alpha, g_c, probes, **kw)
        if kappa_q is None:
            return est
        # recompute with percentile aggregation
        pr = np.atleast_2d(probes)
        d = dens.density_batch(model, pr)
        interior = pr[d >= alpha]
        angles = 2 * np.pi * np.arange(16) / 16
        dirs = np.column_stack([np.cos(angles), np.sin(angles)])
        from ppcnav.density import _ray_level_radii
        radii = _ray_level_radii(model, est.density_peak, alpha, 16)
        bpts = est.density_peak[None, :] + radii[:, None] * dirs
        pts = np.vstack([interior, bpts])
        dist = np.linalg.norm(pts - est.density_peak[None, :], axis=1)
        keep = dist > 1e-9
        ratios = np.linalg.norm(dens.score_batch(model, pts[keep]), axis=1) / dist[keep]
        kap = max(1e-3, float(np.percentile(ratios, kappa_q)))
        kap = min(kap, est.lambda_max)
        return dens.CurvatureEstimate(kappa=kap, lambda_max=est.lambda_max, r_alpha=est.r_alpha,
                                      alpha=alpha, beta_star=g_c / (kap * est.r_alpha),
                                      density_peak=est.density_peak, kappa_floored=kap == 1e-3)

    dens_est = dens.estimate_curvature
    dens.estimate_curvature = patched
    ctrl_dens = ctrl.dens
    t0 = time.perf_counter()
    try:
        for t in range(T):
            try:
                a, st, info = ctrl.ppc_step(state, buf, cfg, st, rng)
            except env.FeasibleRegionTooSmall:
                a = np.zeros(2)
                stats["blocked"] += 1
                stats["viol"] += not env.is_feasible(state, a)
                state = env.step(state, a, goals)
                continue
            feas = env.is_feasible(state, a)
            stats["viol"] += not feas
            c, _ = ctrl.cost_and_grad(ctrl.CostModel(q=state.q, goal=state.goal), a)
            stats["cost"] += c
            if info.filter_active:
                stats["filt"] += 1
            else:
                bound = info.g_c / (info.beta * info.kappa) + 1e-3
                d = float(np.linalg.norm(a - info.density_peak))
                stats["worst_ratio"] = max(stats["worst_ratio"], d / bound)
                stats["disp_viol"] += d > bound
            state = env.step(state, a, goals)
    finally:
        dens.estimate_curvature = dens_est
    stats["ms"] = (time.perf_counter() - t0) / T * 1000
    stats["beta"] = info.beta
    stats["kappa"] = info.kappa
    return stats


def run_oracle(seed, T):
    goals = np.random.default_rng([seed, 11])
    state = env.make_env(np.random.default_rng([seed, 3]))
    total = 0.0
    for t in range(T):
        try:
            a = baselines.oracle_action(state)
        except baselines.NoFeasibleCell:
            a = np.zeros(2)
        c, _ = ctrl.cost_and_grad(ctrl.CostModel(q=state.q, goal=state.goal), a)
        total += c
        state = env.step(state, a, goals)
    return total


if __name__ == "__main__":
    T = 150
    for q in [None, 25, 50]:
        for seed in [0, 1]:
            s = run_ppc(seed, T, q)
            oc = run_oracle(seed, T)
            print(
                f"q={q} seed={seed}: safety={1-s['viol']/T:.3f} normcost={s['cost']/oc:.2f} "
                f"disp_viol={s['disp_viol']} worst_ratio={s['worst_ratio']:.2f} filt={s['filt']} "
                f"blocked={s['blocked']} beta={s['beta']:.1f} kappa={s['kappa']:.2f} ms={s['ms']:.0f}"
            )
