"""2D dynamic-obstacle navigation world: ground truth, feasibility oracle, sampler, context."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

WORKSPACE_LO = 0.0
WORKSPACE_HI = 10.0
U_MAX = 1.0
D_SAFE = 0.3
GOAL_RADIUS = 0.5
GOAL_BOX = (1.0, 9.0)

# Per-seed obstacle parameter distributions. Amplitudes top out well below the
# base-box half-width: episode-horizon sweeps otherwise reach ~2*sqrt(2)*A and
# the worst-case-inflated obstacles of the conservative baseline swallow the
# spawn corner, parking it inside a region that moving obstacles cross.
BASE_BOX = (2.0, 8.0)
RADIUS_RANGE = (0.4, 0.8)
AMP_RANGE = (0.8, 1.2)
FREQ_RANGE = (0.02, 0.08)

# Quadrant-cluster layouts (set_mode): tighter motion keeps each mode concentrated.
MODE_AMP_RANGE = (0.3, 0.8)
MODE_N_OBSTACLES = 4
_LOW_BOX = (1.2, 4.2)
_HIGH_BOX = (5.8, 8.8)
# mode index -> (x box, y box): 0=SW, 1=SE, 2=NW, 3=NE
_MODE_BOXES = ((_LOW_BOX, _LOW_BOX), (_HIGH_BOX, _LOW_BOX), (_LOW_BOX, _HIGH_BOX), (_HIGH_BOX, _HIGH_BOX))

MAX_ATTEMPTS_PER_SAMPLE = 50

RASTER_RES = 16
RASTER_CHANNELS = 3
CONTEXT_DIM = 12


class FeasibleRegionTooSmall(RuntimeError):
    """Rejection sampling accept rate fell below the per-sample attempt budget."""


@dataclass(frozen=True)
class ObstacleSpec:
    center_base: tuple[float, float]
    radius: float
    amp_x: float
    amp_y: float
    freq_x: float
    freq_y: float
    phase_x: float
    phase_y: float

    def __post_init__(self) -> None:
        if not (RADIUS_RANGE[0] <= self.radius <= RADIUS_RANGE[1]):
            raise ValueError(f"radius must be in {RADIUS_RANGE}, got {self.radius}")
        if self.amp_x < 0.0 or self.amp_y < 0.0:
            raise ValueError("amplitudes must be non-negative")


@dataclass(frozen=True)
class EnvState:
    t: int
    q: np.ndarray
    goal: np.ndarray
    obstacles: tuple[ObstacleSpec, ...]
    u_max: float = U_MAX
    d_safe: float = D_SAFE
    bounds: tuple[float, float] = (WORKSPACE_LO, WORKSPACE_HI)
    # Quadrant layouts are generated once per episode and reused when a mode recurs.
    mode_layouts: tuple[tuple[ObstacleSpec, ...], ...] | None = None
    mode: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).copy())
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float).copy())
        if self.u_max <= 0.0:
            raise ValueError("u_max must be > 0")
        if self.d_safe < 0.0:
            raise ValueError("d_safe must be >= 0")
        lo, hi = self.bounds
        if not (np.all(self.q >= lo) and np.all(self.q <= hi)):
            raise ValueError("robot position outside workspace bounds")


@dataclass(frozen=True)
class ContextObservation:
    raster: np.ndarray  # (16, 16, 3), row-major, channel-last, cell (0,0) at workspace corner (0,0)
    embedding: np.ndarray  # (12,), entries strictly inside (-1, 1)


def obstacle_position(spec: ObstacleSpec, t: int | float) -> np.ndarray:
    """Center at step t, clamped so the full disk stays inside the workspace."""
    x = spec.center_base[0] + spec.amp_x * math.sin(spec.freq_x * t + spec.phase_x)
    y = spec.center_base[1] + spec.amp_y * math.cos(spec.freq_y * t + spec.phase_y)
    lo = WORKSPACE_LO + spec.radius
    hi = WORKSPACE_HI - spec.radius
    return np.array([min(max(x, lo), hi), min(max(y, lo), hi)])


def obstacle_positions(state: EnvState, t: int | float) -> np.ndarray:
    """(K, 2) array of all obstacle centers at step t."""
    if not state.obstacles:
        return np.zeros((0, 2))
    return np.stack([obstacle_position(spec, t) for spec in state.obstacles])


def obstacle_radii(state: EnvState) -> np.ndarray:
    return np.array([spec.radius for spec in state.obstacles])


def feasibility_mask(state: EnvState, actions: np.ndarray) -> np.ndarray:
    """Vectorized oracle verdicts for an (n, 2) action batch."""
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    norm_ok = np.einsum("ij,ij->i", actions, actions) <= state.u_max**2
    q_next = state.q[None, :] + actions
    lo, hi = state.bounds
    bounds_ok = np.all((q_next >= lo) & (q_next <= hi), axis=1)
    ok = norm_ok & bounds_ok
    if state.obstacles:
        centers = obstacle_positions(state, state.t + 1)
        margins = obstacle_radii(state) + state.d_safe
        diffs = q_next[:, None, :] - centers[None, :, :]
        dist_sq = np.einsum("ikj,ikj->ik", diffs, diffs)
        ok &= np.all(dist_sq >= margins[None, :] ** 2, axis=1)
    return ok


def is_feasible(state: EnvState, u: np.ndarray) -> bool:
    """True iff u keeps the next position safe: norm, bounds, and all obstacle margins."""
    return bool(feasibility_mask(state, np.asarray(u, dtype=float)[None, :])[0])


def sample_feasible(state: EnvState, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. uniform draws from the feasible subset of the u_max-disk.

    Uniform disk proposal with accept/reject against the oracle. The proposal
    budget is MAX_ATTEMPTS_PER_SAMPLE per requested sample; exhausting it means
    the accept rate is below 1/MAX_ATTEMPTS_PER_SAMPLE and the robot is treated
    as (near-)blocked.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return np.zeros((0, 2))
    budget = MAX_ATTEMPTS_PER_SAMPLE * n
    collected: list[np.ndarray] = []
    have = 0
    spent = 0
    # escalating chunks: clearly-open regions finish in the first draw while the
    # total proposal budget stays exactly MAX_ATTEMPTS_PER_SAMPLE per sample
    for fraction in (4, 8, 16, 22):
        chunk = min(fraction * n, budget - spent)
        if chunk <= 0:
            break
        radii = state.u_max * np.sqrt(rng.uniform(0.0, 1.0, chunk))
        theta = rng.uniform(0.0, 2.0 * math.pi, chunk)
        proposals = np.column_stack([radii * np.cos(theta), radii * np.sin(theta)])
        spent += chunk
        accepted = proposals[feasibility_mask(state, proposals)]
        collected.append(accepted)
        have += accepted.shape[0]
        if have >= n:
            break
    if have < n:
        raise FeasibleRegionTooSmall(f"accepted {have}/{n} after {spent} proposals")
    return np.vstack(collected)[:n].copy()


def step(state: EnvState, u: np.ndarray, rng: np.random.Generator) -> EnvState:
    """Apply u (even if infeasible; the plant does not reject), clamp to bounds, advance t.

    The goal is resampled uniformly from GOAL_BOX**2 upon arrival within GOAL_RADIUS.
    """
    u = np.asarray(u, dtype=float)
    lo, hi = state.bounds
    q_next = np.clip(state.q + u, lo, hi)
    goal = state.goal
    if float(np.linalg.norm(q_next - goal)) <= GOAL_RADIUS:
        goal = rng.uniform(GOAL_BOX[0], GOAL_BOX[1], 2)
    return replace(state, t=state.t + 1, q=q_next, goal=goal)


def draw_obstacle(
    rng: np.random.Generator,
    base_box: tuple[float, float] = BASE_BOX,
    amp_range: tuple[float, float] = AMP_RANGE,
    base_box_y: tuple[float, float] | None = None,
) -> ObstacleSpec:
    if base_box_y is None:
        base_box_y = base_box
    return ObstacleSpec(
        center_base=(
            float(rng.uniform(base_box[0], base_box[1])),
            float(rng.uniform(base_box_y[0], base_box_y[1])),
        ),
        radius=float(rng.uniform(*RADIUS_RANGE)),
        amp_x=float(rng.uniform(*amp_range)),
        amp_y=float(rng.uniform(*amp_range)),
        freq_x=float(rng.uniform(*FREQ_RANGE)),
        freq_y=float(rng.uniform(*FREQ_RANGE)),
        phase_x=float(rng.uniform(0.0, 2.0 * math.pi)),
        phase_y=float(rng.uniform(0.0, 2.0 * math.pi)),
    )


def make_env(
    rng: np.random.Generator,
    n_obstacles: int = 5,
    canonical_placement: bool = True,
    freq_multiplier: float = 1.0,
) -> EnvState:
    """New episode. Obstacle kinematics are always drawn; robot/goal are canonical
    ((1,1) -> (9,9)) unless canonical_placement is False, in which case both are
    seed-randomized inside GOAL_BOX**2."""
    obstacles = []
    for _ in range(n_obstacles):
        spec = draw_obstacle(rng)
        if freq_multiplier != 1.0:
            spec = replace(
                spec,
                freq_x=spec.freq_x * freq_multiplier,
                freq_y=spec.freq_y * freq_multiplier,
            )
        obstacles.append(spec)
    if canonical_placement:
        q, goal = np.array([1.0, 1.0]), np.array([9.0, 9.0])
    else:
        q = rng.uniform(GOAL_BOX[0], GOAL_BOX[1], 2)
        goal = rng.uniform(GOAL_BOX[0], GOAL_BOX[1], 2)
    return EnvState(t=0, q=q, goal=goal, obstacles=tuple(obstacles))


def reshuffle(state: EnvState, rng: np.random.Generator) -> EnvState:
    """Re-randomize every obstacle's kinematic parameters and radius; robot/goal unchanged."""
    obstacles = tuple(draw_obstacle(rng) for _ in state.obstacles)
    return replace(state, obstacles=obstacles)


def _draw_mode_layout(rng: np.random.Generator, mode: int) -> tuple[ObstacleSpec, ...]:
    box_x, box_y = _MODE_BOXES[mode]
    return tuple(
        draw_obstacle(rng, base_box=box_x, amp_range=MODE_AMP_RANGE, base_box_y=box_y)
        for _ in range(MODE_N_OBSTACLES)
    )


def set_mode(state: EnvState, mode: int, rng: np.random.Generator) -> EnvState:
    """Relocate obstacles into quadrant cluster `mode` (0=SW, 1=SE, 2=NW, 3=NE).

    All four layouts are generated on first use and cached on the state, so a
    recurring mode reuses its exact layout.
    """
    if mode not in (0, 1, 2, 3):
        raise ValueError(f"mode must be in 0..3, got {mode}")
    layouts = state.mode_layouts
    if layouts is None:
        layouts = tuple(_draw_mode_layout(rng, m) for m in range(4))
    return replace(state, obstacles=layouts[mode], mode_layouts=layouts, mode=mode)


def make_projection(rng: np.random.Generator) -> np.ndarray:
    """Fixed-per-run random projection for the context embedding."""
    flat = RASTER_RES * RASTER_RES * RASTER_CHANNELS
    return rng.normal(0.0, 1.0, (CONTEXT_DIM, flat)) / math.sqrt(flat)


def render_context(state: EnvState, projection: np.ndarray) -> ContextObservation:
    """Top-down raster (obstacle occupancy, robot, goal) plus tanh-squashed projection.

    Raster layout: row-major, channel-last; cell (0, 0) covers the workspace
    corner at (0, 0); cell centers are sampled for obstacle occupancy.
    """
    lo, hi = WORKSPACE_LO, WORKSPACE_HI
    cell = (hi - lo) / RASTER_RES
    centers_1d = lo + (np.arange(RASTER_RES) + 0.5) * cell
    raster = np.zeros((RASTER_RES, RASTER_RES, RASTER_CHANNELS))
    if state.obstacles:
        cx = np.tile(centers_1d[None, :], (RASTER_RES, 1))
        cy = np.tile(centers_1d[:, None], (1, RASTER_RES))
        centers = obstacle_positions(state, state.t)
        radii = obstacle_radii(state)
        for k in range(len(state.obstacles)):
            inside = (cx - centers[k, 0]) ** 2 + (cy - centers[k, 1]) ** 2 <= radii[k] ** 2
            raster[:, :, 0][inside] = 1.0

    def cell_index(p: np.ndarray) -> tuple[int, int]:
        ix = min(int((p[0] - lo) / cell), RASTER_RES - 1)
        iy = min(int((p[1] - lo) / cell), RASTER_RES - 1)
        return iy, ix

    ry, rx = cell_index(state.q)
    raster[ry, rx, 1] = 1.0
    gy, gx = cell_index(state.goal)
    raster[gy, gx, 2] = 1.0

    embedding = np.tanh(projection @ raster.reshape(-1))
    return ContextObservation(raster=raster, embedding=embedding)
