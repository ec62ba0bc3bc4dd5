"""Synthetic bird's-eye-view driving world.

Scenarios contain rectangular agents moving with constant speed and
constant turn rate on a flat plane, observed from a static ego vehicle at
the origin.  Every frame can be rasterized onto the ego-centred grid as an
instance-id map, and consecutive frames are linked by dense backward flow
fields that describe, for each occupied cell, where that piece of agent
surface was one frame earlier.

Conventions used throughout the package:

- World frame: x right, y up, yaw measured counter-clockwise from +x.
- Grid: row i spans y, column j spans x.  Cell (i, j) has its center at
  ``x = (j + 0.5 - width / 2) * resolution`` and
  ``y = (i + 0.5 - height / 2) * resolution``.
- Flow and rasterized velocities are expressed in grid cells per frame,
  flow channel 0 along x (columns), channel 1 along y (rows).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import GridConfig, WorldConfig

# State vector layout for one agent at one frame.
STATE_X = 0
STATE_Y = 1
STATE_YAW = 2
STATE_SPEED = 3
STATE_YAW_RATE = 4
STATE_DIM = 5

_STRAIGHT_YAW_RATE = 1e-6  # below this, integrate as straight-line motion


def cell_centers(grid: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return (xs, ys) world coordinates of all cell centers, each (H, W)."""
    xs = (np.arange(grid.width) + 0.5 - grid.width / 2.0) * grid.resolution
    ys = (np.arange(grid.height) + 0.5 - grid.height / 2.0) * grid.resolution
    return np.meshgrid(xs, ys, indexing="xy")


def world_to_cell(grid: GridConfig, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map world coordinates to fractional (row, col) grid coordinates.

    The mapping is the exact inverse of :func:`cell_centers`: a point at a
    cell center maps to integral (row, col).
    """
    col = np.asarray(x) / grid.resolution + grid.width / 2.0 - 0.5
    row = np.asarray(y) / grid.resolution + grid.height / 2.0 - 0.5
    return row, col


def step_ctrv(state: np.ndarray, dt: float) -> np.ndarray:
    """Advance constant-turn-rate-and-velocity states by one time step.

    ``state`` is (..., 5).  Works for negative ``dt``, which is how past
    frames are produced from the current one.
    """
    out = np.array(state, dtype=np.float64, copy=True)
    x, y, yaw = state[..., STATE_X], state[..., STATE_Y], state[..., STATE_YAW]
    v, w = state[..., STATE_SPEED], state[..., STATE_YAW_RATE]
    turning = np.abs(w) > _STRAIGHT_YAW_RATE
    ws = np.where(turning, w, 1.0)  # avoid divide-by-zero in the unused branch
    new_yaw = yaw + w * dt
    x_turn = x + v / ws * (np.sin(new_yaw) - np.sin(yaw))
    y_turn = y + v / ws * (-np.cos(new_yaw) + np.cos(yaw))
    x_line = x + v * np.cos(yaw) * dt
    y_line = y + v * np.sin(yaw) * dt
    out[..., STATE_X] = np.where(turning, x_turn, x_line)
    out[..., STATE_Y] = np.where(turning, y_turn, y_line)
    out[..., STATE_YAW] = new_yaw
    return out


@dataclass
class Scenario:
    """One generated scene.

    ``states`` has shape (T, N, 5) with T = t_in + 1 + t_out frames ordered
    oldest to newest; frame index ``t_in`` is the current frame.  ``dims``
    is (N, 2) holding (length, width) in meters; ``agent_ids`` is (N,) with
    ids starting at 1 (0 is reserved for background in rasters).
    """

    grid: GridConfig
    t_in: int
    t_out: int
    dt: float
    states: np.ndarray
    dims: np.ndarray
    agent_ids: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.t_in + 1 + self.t_out

    @property
    def current_index(self) -> int:
        return self.t_in

    @property
    def num_agents(self) -> int:
        return int(self.states.shape[1])


def generate_scenario(cfg: WorldConfig, seed: int) -> Scenario:
    """Sample one scenario deterministically from ``seed``.

    Agents are sampled at the current frame (guaranteeing they sit on the
    grid there, with a spawn-separation rejection pass to avoid heavily
    stacked boxes) and integrated forward for the future frames and
    backward for the past ones.
    """
    rng = np.random.default_rng(seed)
    g = cfg.grid
    n = int(rng.integers(cfg.num_agents_min, cfg.num_agents_max + 1))

    half_x = g.width * g.resolution / 2.0 - cfg.spawn_margin
    half_y = g.height * g.resolution / 2.0 - cfg.spawn_margin
    half_x = max(half_x, 0.5 * g.resolution)
    half_y = max(half_y, 0.5 * g.resolution)

    current = np.zeros((n, STATE_DIM))
    dims = np.zeros((n, 2))
    placed_xy: list[np.ndarray] = []
    for i in range(n):
        length = rng.uniform(cfg.length_min, cfg.length_max)
        width = rng.uniform(cfg.width_min, cfg.width_max)
        # Rejection-sample the center so spawns are not stacked on top of
        # each other; after enough failures accept the overlap (the
        # rasterizer resolves it with a deterministic tie-break).
        for _ in range(100):
            xy = rng.uniform([-half_x, -half_y], [half_x, half_y])
            if all(np.linalg.norm(xy - p) > 0.75 * (length + dims[j, 0]) / 2.0 + 1.0
                   for j, p in enumerate(placed_xy)):
                break
        placed_xy.append(xy)
        current[i, STATE_X], current[i, STATE_Y] = xy
        current[i, STATE_YAW] = rng.uniform(-np.pi, np.pi)
        current[i, STATE_SPEED] = rng.uniform(cfg.speed_min, cfg.speed_max)
        current[i, STATE_YAW_RATE] = rng.uniform(cfg.yaw_rate_min, cfg.yaw_rate_max)
        dims[i] = (length, width)

    frames = [current]
    for _ in range(cfg.t_out):
        frames.append(step_ctrv(frames[-1], cfg.dt))
    past = [current]
    for _ in range(cfg.t_in):
        past.append(step_ctrv(past[-1], -cfg.dt))
    states = np.stack(past[:0:-1] + frames, axis=0)  # (T, N, 5), oldest first

    return Scenario(
        grid=g,
        t_in=cfg.t_in,
        t_out=cfg.t_out,
        dt=cfg.dt,
        states=states,
        dims=dims,
        agent_ids=np.arange(1, n + 1, dtype=np.int32),
    )


def _inside_box(
    xs: np.ndarray, ys: np.ndarray, state: np.ndarray, dims: np.ndarray
) -> np.ndarray:
    """Boolean mask of points inside one agent's oriented rectangle."""
    dx = xs - state[STATE_X]
    dy = ys - state[STATE_Y]
    c, s = np.cos(state[STATE_YAW]), np.sin(state[STATE_YAW])
    u = c * dx + s * dy       # along-length coordinate
    v = -s * dx + c * dy      # along-width coordinate
    return (np.abs(u) <= dims[0] / 2.0) & (np.abs(v) <= dims[1] / 2.0)


def rasterize_instances(scenario: Scenario, frame: int) -> np.ndarray:
    """Instance-id map (H, W) int32 for one frame; 0 is background.

    Where boxes overlap, the smaller agent id wins (ids are visited in
    ascending order and never overwritten).
    """
    g = scenario.grid
    xs, ys = cell_centers(g)
    out = np.zeros((g.height, g.width), dtype=np.int32)
    for i in np.argsort(scenario.agent_ids):
        inside = _inside_box(xs, ys, scenario.states[frame, i], scenario.dims[i])
        out[inside & (out == 0)] = scenario.agent_ids[i]
    return out


def rasterize_velocity(scenario: Scenario, frame: int, ids: np.ndarray | None = None) -> np.ndarray:
    """(2, H, W) map of agent center velocity in grid cells per frame.

    Channel 0 is the x (column) component, channel 1 the y (row)
    component; background cells are zero.
    """
    g = scenario.grid
    if ids is None:
        ids = rasterize_instances(scenario, frame)
    out = np.zeros((2, g.height, g.width), dtype=np.float64)
    scale = scenario.dt / g.resolution  # m/s -> cells per frame
    for i, agent_id in enumerate(scenario.agent_ids):
        mask = ids == agent_id
        if not mask.any():
            continue
        st = scenario.states[frame, i]
        out[0][mask] = st[STATE_SPEED] * np.cos(st[STATE_YAW]) * scale
        out[1][mask] = st[STATE_SPEED] * np.sin(st[STATE_YAW]) * scale
    return out


def backward_flow(
    scenario: Scenario,
    frame: int,
    rigid: bool = True,
    ids: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Backward flow from ``frame`` to ``frame - 1``.

    Returns ``(flow, valid)`` where ``flow`` is (2, H, W) in grid cells
    (channel 0 along x, channel 1 along y) and ``valid`` is the (H, W)
    boolean occupancy of ``frame``: flow is only defined on occupied
    cells, elsewhere it is zero.

    With ``rigid=True`` each occupied cell center is treated as a material
    point of the agent and mapped through the agent's rigid motion, so
    rotation produces spatially varying flow.  With ``rigid=False`` every
    cell of an agent gets the same center-displacement vector.
    """
    if frame < 1:
        raise ValueError("backward flow needs a previous frame")
    g = scenario.grid
    if ids is None:
        ids = rasterize_instances(scenario, frame)
    xs, ys = cell_centers(g)
    flow = np.zeros((2, g.height, g.width), dtype=np.float64)
    valid = ids > 0
    for i, agent_id in enumerate(scenario.agent_ids):
        mask = ids == agent_id
        if not mask.any():
            continue
        cur = scenario.states[frame, i]
        prev = scenario.states[frame - 1, i]
        if rigid:
            # Body-frame coordinates of the cell centers now, re-expressed
            # in the world at the previous pose.
            dx = xs[mask] - cur[STATE_X]
            dy = ys[mask] - cur[STATE_Y]
            dyaw = prev[STATE_YAW] - cur[STATE_YAW]
            c, s = np.cos(dyaw), np.sin(dyaw)
            px = prev[STATE_X] + c * dx - s * dy
            py = prev[STATE_Y] + s * dx + c * dy
            flow[0][mask] = (px - xs[mask]) / g.resolution
            flow[1][mask] = (py - ys[mask]) / g.resolution
        else:
            flow[0][mask] = (prev[STATE_X] - cur[STATE_X]) / g.resolution
            flow[1][mask] = (prev[STATE_Y] - cur[STATE_Y]) / g.resolution
    return flow, valid


def sample_bilinear_map(field: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinearly sample a (H, W) map at fractional (row, col) positions.

    Out-of-bounds reads contribute zero, matching the zero-padding
    convention used by the model-side sampler.
    """
    h, w = field.shape
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr = rows - r0
    fc = cols - c0
    total = np.zeros_like(rows, dtype=np.float64)
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        vals = np.where(ok, field[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)], 0.0)
        total += wgt * vals
    return total


def flow_warp_agreement(
    scenario: Scenario,
    frame: int,
    rigid: bool = True,
    threshold: float = 0.0,
) -> tuple[int, int]:
    """Check that backward flow lands inside the previous frame's occupancy.

    For every flow-valid cell of ``frame`` the previous occupancy raster is
    bilinearly sampled at the flow target; the cell counts as consistent
    when the sampled mass exceeds ``threshold``.  Returns
    ``(consistent, total)`` counts.
    """
    ids_now = rasterize_instances(scenario, frame)
    occ_prev = (rasterize_instances(scenario, frame - 1) > 0).astype(np.float64)
    flow, valid = backward_flow(scenario, frame, rigid=rigid, ids=ids_now)
    rows, cols = np.nonzero(valid)
    if rows.size == 0:
        return 0, 0
    target_r = rows + flow[1][rows, cols]
    target_c = cols + flow[0][rows, cols]
    mass = sample_bilinear_map(occ_prev, target_r, target_c)
    return int(np.count_nonzero(mass > threshold)), int(rows.size)
