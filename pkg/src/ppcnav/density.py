"""Gaussian KDE over actions with closed-form density, score, and Fisher information.

All kernel arithmetic is done in the log domain with log-sum-exp; the conditional
(context-weighted) form reuses the same model type through per-point log weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_FLOOR = -700.0
# Scale constant of the N^(-1/(m+4)) bandwidth rule. Rate-wise any constant is
# equivalent; at desk-scale N smaller constants leave the feasibility density
# multi-modal (unstable peak / curvature estimates), so the default oversmooths.
BANDWIDTH_SCALE = 2.5
BANDWIDTH_FLOOR_U = 0.02
BANDWIDTH_FLOOR_CTX = 0.05
KAPPA_FLOOR = 1e-3
N_LEVEL_RAYS = 16
# Context weights below this relative mass contribute nothing detectable and are dropped.
_WEIGHT_TRUNCATION_LOG = math.log(1e-16)


class EmptyBuffer(ValueError):
    """A density fit was requested from a buffer with no samples."""


class DensityUnderflow(ArithmeticError):
    """Every kernel underflowed at the query point; treat it as far outside the manifold."""


class ContextUnderflow(ArithmeticError):
    """The query context is too far from every stored context; fall back to the marginal."""


class NoInteriorPoint(ValueError):
    """No probe point reaches the level threshold; curvature estimation is undefined."""


@dataclass
class SampleBuffer:
    """Time-stamped feasible actions (optionally with context vectors).

    `window_steps` is the retention horizon; entries older than
    `current_step - window_steps` are evicted on add(). `per_step_cap` bounds
    how many samples a single step may contribute.
    """

    window_steps: int
    per_step_cap: int
    actions: list[np.ndarray] = field(default_factory=list)
    contexts: list[np.ndarray | None] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)

    def add(self, actions: np.ndarray, step: int, context: np.ndarray | None = None) -> None:
        actions = np.atleast_2d(np.asarray(actions, dtype=float))[: self.per_step_cap]
        if self.steps and step < self.steps[-1]:
            raise ValueError("steps must be added in non-decreasing order")
        for row in actions:
            self.actions.append(row.copy())
            self.contexts.append(None if context is None else np.asarray(context, float).copy())
            self.steps.append(step)
        self._evict(step)

    def _evict(self, current_step: int) -> None:
        # strict cutoff keeps exactly the last window_steps distinct steps,
        # which is what the length cap window_steps * per_step_cap presumes
        cutoff = current_step - self.window_steps
        keep = 0
        while keep < len(self.steps) and self.steps[keep] <= cutoff:
            keep += 1
        if keep:
            del self.actions[:keep]
            del self.contexts[:keep]
            del self.steps[:keep]

    def __len__(self) -> int:
        return len(self.actions)

    def action_array(self) -> np.ndarray:
        if not self.actions:
            return np.zeros((0, 2))
        return np.stack(self.actions)

    def context_array(self) -> np.ndarray:
        return np.stack([c for c in self.contexts if c is not None])


def bandwidth_rule(
    points: np.ndarray, floor: float = BANDWIDTH_FLOOR_U, scale: float = BANDWIDTH_SCALE
) -> float:
    """h = scale * sigma_hat * N^(-1/(m+4)) with m = 2; sigma_hat is the mean
    per-axis standard deviation, and the result is floored for degenerate spreads."""
    points = np.atleast_2d(points)
    n, m = points.shape
    sigma = float(np.mean(np.std(points, axis=0)))
    return max(floor, scale * sigma * n ** (-1.0 / (m + 4)))


@dataclass(frozen=True)
class KdeModel:
    points: np.ndarray  # (N, 2)
    bandwidth_u: float
    log_weights: np.ndarray | None = None  # normalized; None means uniform

    def __post_init__(self) -> None:
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] == 0:
            raise ValueError("KdeModel needs at least one point")
        if self.bandwidth_u <= 0.0:
            raise ValueError("bandwidth must be > 0")
        object.__setattr__(self, "points", pts)
        if self.log_weights is not None:
            lw = np.asarray(self.log_weights, dtype=float)
            if lw.shape != (pts.shape[0],):
                raise ValueError("log_weights must match points")
            object.__setattr__(self, "log_weights", lw)
        object.__setattr__(self, "_sq_norms", np.einsum("ij,ij->i", pts, pts))

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class CondKdeModel:
    points: np.ndarray  # (N, 2)
    contexts: np.ndarray  # (N, d)
    bandwidth_u: float
    bandwidth_ctx: float

    def __post_init__(self) -> None:
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        ctx = np.atleast_2d(np.asarray(self.contexts, dtype=float))
        if pts.shape[0] != ctx.shape[0]:
            raise ValueError("points and contexts must have the same length")
        if self.bandwidth_u <= 0.0 or self.bandwidth_ctx <= 0.0:
            raise ValueError("bandwidths must be > 0")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "contexts", ctx)


@dataclass(frozen=True)
class CurvatureEstimate:
    kappa: float
    lambda_max: float
    r_alpha: float
    alpha: float
    beta_star: float
    density_peak: np.ndarray
    kappa_floored: bool = False

    def __post_init__(self) -> None:
        if self.alpha <= 0.0:
            raise ValueError("alpha must be > 0")
        if self.kappa > self.lambda_max + 1e-9:
            raise ValueError("kappa cannot exceed the curvature upper bound")


def fit_marginal(buffer: SampleBuffer) -> KdeModel:
    if len(buffer) == 0:
        raise EmptyBuffer("cannot fit a KDE from an empty buffer")
    points = buffer.action_array()
    return KdeModel(points=points, bandwidth_u=bandwidth_rule(points))


def fit_conditional(buffer: SampleBuffer) -> CondKdeModel:
    if len(buffer) == 0:
        raise EmptyBuffer("cannot fit a KDE from an empty buffer")
    points = buffer.action_array()
    contexts = buffer.context_array()
    if contexts.shape[0] != points.shape[0]:
        raise ValueError("every buffered sample needs a context vector")
    d = contexts.shape[1]
    sigma_ctx = float(np.mean(np.std(contexts, axis=0)))
    h_ctx = max(BANDWIDTH_FLOOR_CTX, 1.06 * sigma_ctx * contexts.shape[0] ** (-1.0 / (d + 4)))
    return CondKdeModel(
        points=points,
        contexts=contexts,
        bandwidth_u=bandwidth_rule(points),
        bandwidth_ctx=h_ctx,
    )


def conditional_model(cond: CondKdeModel, xi: np.ndarray) -> KdeModel:
    """Condition on a context: a weighted action KDE with w_i ∝ K_{h_ctx}(xi - xi_i).

    Points whose normalized weight is below the truncation floor are dropped;
    with a single stored context (or uniform weights) nothing is truncated and
    the result matches the marginal fit on the same actions.
    """
    xi = np.asarray(xi, dtype=float)
    diffs = cond.contexts - xi[None, :]
    raw = -np.einsum("ij,ij->i", diffs, diffs) / (2.0 * cond.bandwidth_ctx**2)
    top = float(np.max(raw))
    if top < LOG_FLOOR:
        raise ContextUnderflow("context is too far from every stored context")
    keep = raw - top >= _WEIGHT_TRUNCATION_LOG
    raw = raw[keep]
    log_norm = top + math.log(float(np.sum(np.exp(raw - top))))
    return KdeModel(
        points=cond.points[keep],
        bandwidth_u=cond.bandwidth_u,
        log_weights=raw - log_norm,
    )


def _log_kernel_matrix(model: KdeModel, u_batch: np.ndarray) -> np.ndarray:
    """(n_eval, N) matrix of log w_i - ||u - U_i||^2 / (2 h^2)."""
    pts = model.points
    h2 = model.bandwidth_u**2
    sq = (
        np.einsum("ij,ij->i", u_batch, u_batch)[:, None]
        - 2.0 * u_batch @ pts.T
        + model._sq_norms[None, :]  # type: ignore[attr-defined]
    )
    a = -sq / (2.0 * h2)
    if model.log_weights is not None:
        a = a + model.log_weights[None, :]
    else:
        a = a - math.log(model.n_points)
    return a


def log_density_batch(model: KdeModel, u_batch: np.ndarray) -> np.ndarray:
    u_batch = np.atleast_2d(np.asarray(u_batch, dtype=float))
    a = _log_kernel_matrix(model, u_batch)
    top = np.max(a, axis=1)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    lse = safe_top + np.log(np.sum(np.exp(a - safe_top[:, None]), axis=1))
    norm = math.log(2.0 * math.pi * model.bandwidth_u**2)
    return lse - norm


def density_batch(model: KdeModel, u_batch: np.ndarray) -> np.ndarray:
    return np.exp(log_density_batch(model, u_batch))


def log_density(model: KdeModel, u: np.ndarray) -> float:
    return float(log_density_batch(model, np.asarray(u, dtype=float)[None, :])[0])


def density(model: KdeModel, u: np.ndarray) -> float:
    """Exact mixture-of-Gaussians evaluation, O(N*m)."""
    return math.exp(log_density(model, u))


def _log_kernels_single(model: KdeModel, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diffs = model.points - u[None, :]
    a = -np.einsum("ij,ij->i", diffs, diffs) / (2.0 * model.bandwidth_u**2)
    if model.log_weights is not None:
        a = a + model.log_weights
    else:
        a = a - math.log(model.n_points)
    return a, diffs


def _responsibilities(a: np.ndarray) -> np.ndarray:
    top = float(np.max(a))
    r = np.exp(a - top)
    return r / float(np.sum(r))


def _responsibilities_checked(model: KdeModel, a: np.ndarray) -> np.ndarray:
    top = float(np.max(a))
    r = np.exp(a - top)
    total = float(np.sum(r))
    log_dens = top + math.log(total) - math.log(2.0 * math.pi * model.bandwidth_u**2)
    if log_dens < LOG_FLOOR:
        raise DensityUnderflow("density underflow at query point")
    return r / total


def score(model: KdeModel, u: np.ndarray) -> np.ndarray:
    """Closed-form gradient of ln density: sum_i r_i(u) (U_i - u) / h^2."""
    u = np.asarray(u, dtype=float)
    a, diffs = _log_kernels_single(model, u)
    r = _responsibilities_checked(model, a)
    return (r @ diffs) / model.bandwidth_u**2


def score_unchecked(model: KdeModel, u: np.ndarray) -> np.ndarray:
    """Score without the underflow guard; the softmax form stays numerically valid
    arbitrarily far out, which error-metric and filter paths rely on."""
    u = np.asarray(u, dtype=float)
    a, diffs = _log_kernels_single(model, u)
    r = _responsibilities(a)
    return (r @ diffs) / model.bandwidth_u**2


def score_batch(model: KdeModel, u_batch: np.ndarray) -> np.ndarray:
    u_batch = np.atleast_2d(np.asarray(u_batch, dtype=float))
    a = _log_kernel_matrix(model, u_batch)
    top = np.max(a, axis=1, keepdims=True)
    r = np.exp(a - top)
    r /= np.sum(r, axis=1, keepdims=True)
    means = r @ model.points
    return (means - u_batch) / model.bandwidth_u**2


def fisher_info(model: KdeModel, u: np.ndarray) -> np.ndarray:
    """Closed-form -∇² ln density = I/h² - Cov_r((U_i - u)/h²); symmetric by construction."""
    u = np.asarray(u, dtype=float)
    a, diffs = _log_kernels_single(model, u)
    r = _responsibilities_checked(model, a)
    g = diffs / model.bandwidth_u**2
    mean_g = r @ g
    cov = (g * r[:, None]).T @ g - np.outer(mean_g, mean_g)
    f = np.eye(2) / model.bandwidth_u**2 - cov
    return 0.5 * (f + f.T)


def fisher_batch(model: KdeModel, u_batch: np.ndarray) -> np.ndarray:
    """(n, 2, 2) local Fisher information at each query point."""
    u_batch = np.atleast_2d(np.asarray(u_batch, dtype=float))
    a = _log_kernel_matrix(model, u_batch)
    top = np.max(a, axis=1, keepdims=True)
    r = np.exp(a - top)
    r /= np.sum(r, axis=1, keepdims=True)
    h2 = model.bandwidth_u**2
    g = (model.points[None, :, :] - u_batch[:, None, :]) / h2
    mean_g = np.einsum("ek,ekj->ej", r, g)
    second = np.einsum("ek,eki,ekj->eij", r, g, g)
    cov = second - np.einsum("ei,ej->eij", mean_g, mean_g)
    return np.eye(2)[None, :, :] / h2 - cov


def sym2x2_eig_bounds(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(lambda_min, lambda_max) for a batch of symmetric 2x2 matrices, closed form."""
    axx, ayy, axy = mats[..., 0, 0], mats[..., 1, 1], mats[..., 0, 1]
    mid = 0.5 * (axx + ayy)
    spread = np.sqrt(np.maximum(0.25 * (axx - ayy) ** 2 + axy**2, 0.0))
    return mid - spread, mid + spread


def fisher_lambda_min_batch(model: KdeModel, u_batch: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of the local Fisher information at each query point."""
    lam_min, _ = sym2x2_eig_bounds(fisher_batch(model, u_batch))
    return lam_min


def select_alpha(model: KdeModel, probe_points: np.ndarray, percentile: float = 10.0) -> float:
    """Level threshold as a low percentile of probe densities (linear interpolation),
    so most observed samples lie inside the learned level set."""
    probe_points = np.atleast_2d(np.asarray(probe_points, dtype=float))
    if probe_points.shape[0] == 0:
        raise ValueError("probe_points must be non-empty")
    densities = density_batch(model, probe_points)
    return float(np.percentile(densities, percentile))


def density_peak(model: KdeModel, start: np.ndarray, max_iter: int = 60, tol: float = 1e-10) -> np.ndarray:
    """Mode of the mixture by mean-shift ascent (score ascent with rate h^2)."""
    u = np.asarray(start, dtype=float).copy()
    for _ in range(max_iter):
        a, _ = _log_kernels_single(model, u)
        r = _responsibilities(a)
        target = r @ model.points
        if float(np.linalg.norm(target - u)) < tol:
            return target
        u = target
    return u


def _ray_level_radii(
    model: KdeModel,
    peak: np.ndarray,
    alpha: float,
    n_rays: int,
    n_bisect: int = 22,
    _dirs: np.ndarray | None = None,
) -> np.ndarray:
    if _dirs is not None:
        dirs = _dirs
        n_rays = dirs.shape[0]
    else:
        angles = 2.0 * math.pi * np.arange(n_rays) / n_rays
        dirs = np.column_stack([np.cos(angles), np.sin(angles)])
    log_alpha = math.log(alpha)
    h = model.bandwidth_u
    lo = np.zeros(n_rays)
    hi = np.full(n_rays, h)
    for _ in range(48):
        vals = log_density_batch(model, peak[None, :] + hi[:, None] * dirs)
        outside = vals < log_alpha
        if np.all(outside):
            break
        hi = np.where(outside, hi, hi * 2.0)
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        vals = log_density_batch(model, peak[None, :] + mid[:, None] * dirs)
        inside = vals >= log_alpha
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return 0.5 * (lo + hi)


_CONE_DEGREES = np.array([-35.0, 0.0, 35.0])
# Fixed conservativeness margin on the secant ratio: keeps the scheduled
# equilibrium strictly inside the displacement bound under sampling noise.
# Transit speed is insensitive to this scale (the bound and the schedule move
# together), so the margin is nearly free.
KAPPA_SHADE = 0.7


def estimate_curvature(
    model: KdeModel,
    alpha: float,
    g_c: float,
    probes: np.ndarray,
    n_rays: int = N_LEVEL_RAYS,
    kappa_floor: float = KAPPA_FLOOR,
    probe_densities: np.ndarray | None = None,
    cost_target: np.ndarray | None = None,
) -> CurvatureEstimate:
    """Barrier curvature, level-set radius, and the curvature-critical stiffness.

    The peak is found by score ascent from the highest-density probe; r_alpha is
    the minimum bisection distance to the level boundary over n_rays rays. kappa
    is the secant score-growth modulus at that radius, ||score(peak + r_alpha d)||
    / r_alpha, minimized over a small cone of directions around the cost descent
    ray when a cost target is supplied (the directions the penalized minimizer
    can lie along) and over all rays otherwise, then shaded by KAPPA_SHADE. For a
    single Gaussian the unshaded ratio equals the Fisher eigenvalue 1/h^2 exactly
    in every direction. Flat ridges drive the ratio toward zero, so it is floored
    at kappa_floor with a flag.
    """
    if alpha <= 0.0:
        raise ValueError("alpha must be > 0")
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if probe_densities is None:
        probe_densities = density_batch(model, probes)
    dens = np.asarray(probe_densities, dtype=float)
    if not np.any(dens >= alpha):
        raise NoInteriorPoint("no probe has density >= alpha")
    peak = density_peak(model, probes[int(np.argmax(dens))])

    direction = None
    if cost_target is not None:
        towards = np.asarray(cost_target, dtype=float) - peak
        norm = float(np.linalg.norm(towards))
        if norm > 1e-9:
            direction = towards / norm
    angles = 2.0 * math.pi * np.arange(n_rays) / n_rays
    level_dirs = np.column_stack([np.cos(angles), np.sin(angles)])
    if direction is not None:
        base = math.atan2(direction[1], direction[0])
        cone = base + np.radians(_CONE_DEGREES)
        cone_dirs = np.column_stack([np.cos(cone), np.sin(cone)])
    else:
        cone_dirs = level_dirs
    radii = _ray_level_radii(model, peak, alpha, n_rays, _dirs=level_dirs)
    r_alpha = float(np.min(radii))

    ring = peak[None, :] + r_alpha * cone_dirs
    kappa_raw = (
        KAPPA_SHADE
        * float(np.min(np.linalg.norm(score_batch(model, ring), axis=1)))
        / max(r_alpha, 1e-12)
    )
    floored = kappa_raw < kappa_floor
    kappa = min(max(kappa_raw, kappa_floor), 1.0 / model.bandwidth_u**2)
    return CurvatureEstimate(
        kappa=kappa,
        lambda_max=1.0 / model.bandwidth_u**2,
        r_alpha=r_alpha,
        alpha=alpha,
        beta_star=g_c / (kappa * r_alpha),
        density_peak=peak,
        kappa_floored=floored,
    )


def score_error(model_a: KdeModel, reference_model: KdeModel, eval_points: np.ndarray) -> float:
    """Mean squared score discrepancy over eval_points; the empirical proxy for the
    integrated squared score error."""
    eval_points = np.atleast_2d(np.asarray(eval_points, dtype=float))
    sa = score_batch(model_a, eval_points)
    sr = score_batch(reference_model, eval_points)
    return float(np.mean(np.sum((sa - sr) ** 2, axis=1)))


def sample_from(model: KdeModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points from the mixture (component by weight, then Gaussian noise)."""
    if model.log_weights is None:
        idx = rng.integers(0, model.n_points, n)
    else:
        idx = rng.choice(model.n_points, size=n, p=np.exp(model.log_weights))
    return model.points[idx] + rng.normal(0.0, model.bandwidth_u, (n, 2))
