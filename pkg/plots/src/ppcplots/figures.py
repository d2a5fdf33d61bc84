"""Figure renderers. Every plotted quantity comes from the CSVs; the only
recomputed values are the annotation slope/correlation of the plotted points."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import SchemaMismatch, column, first_seed, read_manifest, read_rows

STEP_REQUIRED = ["t", "qx", "qy", "ux", "uy", "feasible", "cost", "event"]

plt.rcParams.update({
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
})


def _save(fig, out_path: Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def _rolling(flags: np.ndarray, window: int) -> np.ndarray:
    if flags.size < window:
        return np.array([])
    return np.convolve(flags, np.ones(window) / window, mode="valid")


def _group_mean(rows, key, metric):
    values: dict[float, list[float]] = {}
    for r in rows:
        values.setdefault(float(r[key]), []).append(float(r[metric]))
    keys = sorted(values)
    return (np.array(keys),
            np.array([np.mean(values[k]) for k in keys]),
            np.array([np.std(values[k]) for k in keys]))


def render_trajectories(run_dir: Path, out_path: Path) -> Path:
    """Trajectory panels with violation markers plus rolling safety, cumulative
    violations, and rolling cost for the main-comparison episode."""
    run_dir = Path(run_dir)
    exp_dir = run_dir / "exp1"
    manifest = read_manifest(run_dir)
    window = int(manifest.get("rolling_window", "50"))
    controllers = ["ppc", "offline_drgd", "cbf_qp"]
    seed = first_seed(exp_dir, "ppc")
    obstacle_rows = read_rows(exp_dir / "obstacles" / f"{seed}.csv", ["t", "k", "x", "y", "r"])

    fig, axes = plt.subplots(2, 3, figsize=(12, 7))
    for i, name in enumerate(controllers):
        rows = read_rows(exp_dir / name / f"{seed}.csv", STEP_REQUIRED)
        q = np.column_stack([column(rows, "qx"), column(rows, "qy")])
        feas = np.array(column(rows, "feasible")) > 0.5
        events = [int(float(r["t"])) for r in rows if r["event"] == "reshuffle"]
        change = events[0] if events else len(rows)
        ax = axes[0, i]
        ax.plot(q[:change, 0], q[:change, 1], color="#7fb3d5", lw=1.2, label="before reshuffle")
        ax.plot(q[change:, 0], q[change:, 1], color="#1a5276", lw=1.2, label="after reshuffle")
        bad = ~feas
        ax.plot(q[bad, 0], q[bad, 1], "x", color="red", ms=5, label="violation")
        t_last = max(int(float(r["t"])) for r in obstacle_rows)
        for r in obstacle_rows:
            if int(float(r["t"])) == t_last:
                ax.add_patch(plt.Circle((float(r["x"]), float(r["y"])), float(r["r"]),
                                        fill=False, color="gray", lw=0.8))
        ax.set_xlim(0, 10)
        ax.set_ylim(0, 10)
        ax.set_aspect("equal")
        ax.set_title(f"{name} (seed {seed})")
        if i == 0:
            ax.legend(loc="upper left", fontsize=7)

    axes[1, 0].set_title(f"rolling safety (window {window})")
    axes[1, 1].set_title("cumulative violations")
    axes[1, 2].set_title(f"rolling cost (window {window})")
    for name in controllers:
        rows = read_rows(exp_dir / name / f"{seed}.csv", STEP_REQUIRED)
        feas = np.array(column(rows, "feasible"))
        cost = np.array(column(rows, "cost"))
        roll = _rolling(feas, window)
        axes[1, 0].plot(np.arange(roll.size) + window - 1, roll, label=name)
        axes[1, 1].plot(np.cumsum(1.0 - feas), label=name)
        axes[1, 2].plot(np.arange(_rolling(cost, window).size) + window - 1,
                        _rolling(cost, window), label=name)
        events = [int(float(r["t"])) for r in rows if r["event"] == "reshuffle"]
        if events:
            for ax in axes[1]:
                ax.axvline(events[0], color="magenta", lw=0.8, ls="--")
    axes[1, 0].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out_path)


def render_stiffness(run_dir: Path, out_path: Path) -> Path:
    """Safety/cost phase transition across the stiffness ratio sweep."""
    rows = read_rows(Path(run_dir) / "exp2" / "summary.csv",
                     ["beta_ratio", "seed", "safety_rate", "normalized_cost"])
    ratios, safety, safety_std = _group_mean(rows, "beta_ratio", "safety_rate")
    _, cost, cost_std = _group_mean(rows, "beta_ratio", "normalized_cost")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(ratios, safety, yerr=safety_std, color="tab:blue", marker="o", label="safety rate")
    ax.axhline(0.95, color="gray", lw=0.8, ls=":")
    ax.axvline(1.0, color="red", lw=0.8, ls="--", label="critical stiffness")
    ax.set_xscale("log")
    ax.set_xlabel("beta / beta*")
    ax.set_ylabel("safety rate", color="tab:blue")
    ax2 = ax.twinx()
    ax2.errorbar(ratios, cost, yerr=cost_std, color="tab:orange", marker="s", label="normalized cost")
    ax2.set_ylabel("normalized cost", color="tab:orange")
    ax2.grid(False)
    fig.tight_layout()
    return _save(fig, out_path)


def fit_slope(ns: np.ndarray, errors: np.ndarray) -> float:
    slope, _ = np.polyfit(np.log(ns), np.log(errors), 1)
    return float(slope)


def render_sample_budget(run_dir: Path, out_path: Path) -> Path:
    """Safety and score error versus sample budget with the log-log fit slope
    recomputed from the plotted means and annotated."""
    rows = read_rows(Path(run_dir) / "exp3" / "summary.csv",
                     ["n_samples", "seed", "safety_rate", "score_error", "fit_exponent"])
    ns, safety, safety_std = _group_mean(rows, "n_samples", "safety_rate")
    _, err, err_std = _group_mean(rows, "n_samples", "score_error")
    slope = fit_slope(ns, err)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(ns, safety, yerr=safety_std, color="tab:blue", marker="o", label="safety rate")
    ax.axhline(0.95, color="gray", lw=0.8, ls=":")
    ax.set_xscale("log")
    ax.set_xlabel("feasibility samples per step N")
    ax.set_ylabel("safety rate", color="tab:blue")
    ax2 = ax.twinx()
    ax2.errorbar(ns, err, yerr=err_std, color="tab:red", marker="s", label="score error")
    intercept = np.exp(np.mean(np.log(err) - slope * np.log(ns)))
    ax2.plot(ns, intercept * ns**slope, "k--", lw=1.0,
             label=f"fit slope {slope:.3f}")
    ax2.set_yscale("log")
    ax2.set_ylabel("squared score error", color="tab:red")
    ax2.grid(False)
    ax2.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return _save(fig, out_path)


def render_scalability(run_dir: Path, out_path: Path) -> Path:
    """Safety, total cost, and per-step time as the obstacle count grows."""
    exp_dir = Path(run_dir) / "exp4"
    rows = read_rows(exp_dir / "summary.csv",
                     ["n_obstacles", "controller", "seed", "safety_rate", "total_cost"])
    timing = read_rows(exp_dir / "timing.csv",
                       ["experiment", "variant", "controller", "seed", "mean_step_ns"])
    controllers = sorted({r["controller"] for r in rows})
    k_values = sorted({int(float(r["n_obstacles"])) for r in rows})
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    width = 0.8 / len(controllers)
    x = np.arange(len(k_values))
    for j, name in enumerate(controllers):
        safety = [np.mean([float(r["safety_rate"]) for r in rows
                           if r["controller"] == name and int(float(r["n_obstacles"])) == k])
                  for k in k_values]
        cost = [np.mean([float(r["total_cost"]) for r in rows
                         if r["controller"] == name and int(float(r["n_obstacles"])) == k])
                for k in k_values]
        step_ms = [np.mean([float(r["mean_step_ns"]) for r in timing
                            if r["controller"] == name and r["variant"].endswith(f"ko{k}")]) / 1e6
                   for k in k_values]
        offset = (j - (len(controllers) - 1) / 2) * width
        axes[0].bar(x + offset, safety, width, label=name)
        axes[1].bar(x + offset, cost, width, label=name)
        axes[2].bar(x + offset, step_ms, width, label=name)
    for ax, title in zip(axes, ["safety rate", "total tracking cost", "ms per step"]):
        ax.set_xticks(x)
        ax.set_xticklabels(k_values)
        ax.set_xlabel("number of obstacles")
        ax.set_title(title)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out_path)


def render_drift(run_dir: Path, out_path: Path) -> Path:
    """Cost and safety across obstacle speeds plus the cost-vs-path-length
    scatter with its correlation recomputed from the plotted points."""
    rows = read_rows(Path(run_dir) / "exp5" / "summary.csv",
                     ["omega_mult", "seed", "safety_rate", "normalized_cost", "path_length"])
    omegas, cost, cost_std = _group_mean(rows, "omega_mult", "normalized_cost")
    _, safety, safety_std = _group_mean(rows, "omega_mult", "safety_rate")
    pts_cost = np.array(column(rows, "normalized_cost"))
    pts_len = np.array(column(rows, "path_length"))
    pearson = float(np.corrcoef(pts_cost, pts_len)[0, 1])
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    axes[0].errorbar(omegas, cost, yerr=cost_std, marker="o")
    axes[0].set_xscale("log")
    axes[0].set_xlabel("obstacle speed multiplier")
    axes[0].set_title("normalized cost")
    axes[1].plot(pts_len, pts_cost, "o", ms=4)
    slope, icept = np.polyfit(pts_len, pts_cost, 1)
    xs = np.linspace(pts_len.min(), pts_len.max(), 50)
    axes[1].plot(xs, slope * xs + icept, "k--", lw=1.0)
    axes[1].annotate(f"pearson r = {pearson:.3f}", xy=(0.05, 0.92), xycoords="axes fraction")
    axes[1].set_xlabel("manifold path length P_T")
    axes[1].set_title("cost vs drift")
    axes[2].errorbar(omegas, safety, yerr=safety_std, marker="o", color="tab:green")
    axes[2].axhline(0.85, color="gray", lw=0.8, ls=":")
    axes[2].set_xscale("log")
    axes[2].set_xlabel("obstacle speed multiplier")
    axes[2].set_title("safety rate")
    fig.tight_layout()
    return _save(fig, out_path)


def render_contextual(run_dir: Path, out_path: Path) -> Path:
    """Violation counts, steady/post-switch scatter, cumulative violations, and
    rolling safety for the mode-switching ablation."""
    run_dir = Path(run_dir)
    exp_dir = run_dir / "exp6"
    manifest = read_manifest(run_dir)
    window = int(manifest.get("exp6_mode_period", "40"))
    rows = read_rows(exp_dir / "summary.csv",
                     ["controller", "seed", "safety_rate", "post_switch_safety",
                      "steady_safety", "violations_total"])
    controllers = ["ppc_context", "ppc_marginal", "offline_contextual"]
    colors = {"ppc_context": "tab:blue", "ppc_marginal": "tab:orange",
              "offline_contextual": "tab:red"}
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.4))
    means = [np.mean([float(r["violations_total"]) for r in rows if r["controller"] == c])
             for c in controllers]
    axes[0].bar(range(3), means, color=[colors[c] for c in controllers])
    axes[0].set_xticks(range(3))
    axes[0].set_xticklabels(controllers, rotation=20, fontsize=7)
    axes[0].set_title("mean violations per episode")
    for c in controllers:
        post = [float(r["post_switch_safety"]) for r in rows if r["controller"] == c]
        steady = [float(r["steady_safety"]) for r in rows if r["controller"] == c]
        axes[1].plot(steady, post, "o", color=colors[c], label=c)
    axes[1].plot([0.5, 1.0], [0.5, 1.0], "k:", lw=0.7)
    axes[1].set_xlabel("steady safety")
    axes[1].set_ylabel("post-switch safety")
    axes[1].legend(fontsize=6)
    seed = first_seed(exp_dir, "ppc_context")
    for c in controllers:
        step_rows = read_rows(exp_dir / c / f"{seed}.csv", STEP_REQUIRED)
        feas = np.array(column(step_rows, "feasible"))
        axes[2].plot(np.cumsum(1.0 - feas), color=colors[c], label=c)
        roll = _rolling(feas, window)
        axes[3].plot(np.arange(roll.size) + window - 1, roll, color=colors[c], label=c)
        switches = [int(float(r["t"])) for r in step_rows if r["event"] == "mode_switch"]
        for s in switches:
            axes[3].axvline(s, color="gray", lw=0.4, alpha=0.5)
    axes[2].set_title("cumulative violations")
    axes[3].set_title(f"rolling safety (window {window})")
    axes[3].set_ylim(0.0, 1.05)
    fig.tight_layout()
    return _save(fig, out_path)


def render_landscape(run_dir: Path, out_path: Path) -> Path:
    """Free-energy landscape snapshot: cost with the true/learned feasibility
    geometry and the penalized objective with its key points."""
    exp_dir = Path(run_dir) / "exp2"
    grid_rows = read_rows(exp_dir / "landscape.csv",
                          ["ux", "uy", "cost", "log_density", "free_energy", "feasible"])
    point_rows = read_rows(exp_dir / "landscape_points.csv", ["label", "value_x", "value_y"])
    points = {r["label"]: (float(r["value_x"]), float(r["value_y"])) for r in point_rows}
    ux = np.array(column(grid_rows, "ux"))
    uy = np.array(column(grid_rows, "uy"))
    n = int(round(np.sqrt(ux.size)))
    shape = (n, n)
    gx, gy = ux.reshape(shape), uy.reshape(shape)
    cost = np.array(column(grid_rows, "cost")).reshape(shape)
    log_density = np.array(column(grid_rows, "log_density")).reshape(shape)
    free_energy = np.array(column(grid_rows, "free_energy")).reshape(shape)
    feasible = np.array(column(grid_rows, "feasible")).reshape(shape)

    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    cs = axes[0].contourf(gx, gy, cost, levels=25, cmap="viridis")
    fig.colorbar(cs, ax=axes[0], shrink=0.85)
    axes[0].contour(gx, gy, feasible, levels=[0.5], colors="blue", linewidths=1.2)
    alpha = points.get("alpha", (np.nan, 0.0))[0]
    axes[0].contour(gx, gy, np.exp(log_density), levels=[alpha], colors="cyan",
                    linestyles="dashed", linewidths=1.2)
    axes[0].set_title("cost with true (blue) and learned (cyan) boundaries")

    fe = np.clip(free_energy, None, np.percentile(free_energy, 95))
    cs = axes[1].contourf(gx, gy, fe, levels=25, cmap="magma")
    fig.colorbar(cs, ax=axes[1], shrink=0.85)
    axes[1].plot(*points["free_energy_argmin"], "r^", ms=8, label="free-energy argmin")
    axes[1].plot(*points["peak"], "cs", ms=7, label="density peak")
    axes[1].plot(*points["applied_action"], "w*", ms=9, label="applied action")
    axes[1].legend(fontsize=7, loc="lower left")
    axes[1].set_title("free energy")

    displacement = float(np.hypot(points["free_energy_argmin"][0] - points["peak"][0],
                                  points["free_energy_argmin"][1] - points["peak"][1]))
    bound = points.get("displacement_bound", (np.nan, 0.0))[0]
    beta = points.get("beta", (np.nan, 0.0))[0]
    kappa = points.get("kappa", (np.nan, 0.0))[0]
    axes[2].axis("off")
    axes[2].text(0.05, 0.7,
                 "geometric gaps\n\n"
                 f"|argmin - peak| = {displacement:.3f}\n"
                 f"bound G_c/(beta*kappa) = {bound:.3f}\n"
                 f"beta = {beta:.2f}, kappa = {kappa:.2f}",
                 fontsize=10, family="monospace", va="top")
    for ax in axes[:2]:
        ax.set_aspect("equal")
        ax.set_xlabel("u_x")
        ax.set_ylabel("u_y")
    fig.tight_layout()
    return _save(fig, out_path)


FIGURES = {
    "trajectories": render_trajectories,
    "stiffness": render_stiffness,
    "sample_budget": render_sample_budget,
    "scalability": render_scalability,
    "drift": render_drift,
    "contextual": render_contextual,
    "landscape": render_landscape,
}


def render(figure_id: str, run_dir: Path, out_path: Path) -> Path:
    if figure_id not in FIGURES:
        raise SchemaMismatch(f"unknown figure id {figure_id!r}; known: {sorted(FIGURES)}")
    return FIGURES[figure_id](Path(run_dir), Path(out_path))
