"""
Envs - differentiable toy environments.

One-step bandits (bandit_a, bandit_b and the synthetic linear/step/quadratic/smooth_bandit
checks), 2-D move tasks with Gaussian peaks and elastic circular obstacles, a linear 2-D
system for dynamics learning, and a 5x5 room maze for exploration.

All envs are stateless: step(state, action, t) maps batched Nodes of shape (B, d) to the
next state and a (B,) reward Node.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import EnvError
from .graph import (
    Node,
    clamp,
    const,
    exp,
    lift,
    reduce_sum,
    sqrt,
    square,
    where,
)

BOUND_TOL = 1e-9


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    action_bounds: Tuple[Tuple[float, float], ...]
    discontinuous: bool = False
    differentiable: bool = True
    state_bounds: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.horizon < 1:
            raise EnvError(f"{self.name}: horizon must be >= 1, got {self.horizon}")
        if len(self.action_bounds) != self.action_dim:
            raise EnvError(f"{self.name}: {len(self.action_bounds)} bounds for {self.action_dim} action dims")
        for lo, hi in self.action_bounds:
            if not lo < hi:
                raise EnvError(f"{self.name}: action bounds out of order ({lo}, {hi})")

    @property
    def low(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.action_bounds])

    @property
    def high(self) -> np.ndarray:
        return np.array([hi for _, hi in self.action_bounds])

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.low)) and np.all(np.isfinite(self.high)))

    @property
    def action_range(self) -> float:
        """Largest per-dimension width of the action box."""
        return float(np.max(self.high - self.low))


@dataclass
class StepResult:
    next_state: Node
    reward: Node
    done: bool


@dataclass(frozen=True)
class ObstacleSet:
    circles: Tuple[Tuple[Tuple[float, float], float], ...] = ()
    arena: float = 1.0

    def __post_init__(self):
        for center, radius in self.circles:
            if radius <= 0.0:
                raise EnvError(f"obstacle radius must be positive, got {radius}")
            if max(abs(center[0]), abs(center[1])) > self.arena:
                raise EnvError(f"obstacle center {center} outside the arena")
        for i, (c1, r1) in enumerate(self.circles):
            for c2, r2 in self.circles[i + 1:]:
                if math.dist(c1, c2) <= r1 + r2:
                    raise EnvError(f"obstacles at {c1} and {c2} overlap or touch")

    def __len__(self) -> int:
        return len(self.circles)


class Env(ABC):
    spec: EnvSpec
    jumps: Tuple[float, ...] = ()

    @property
    def name(self) -> str:
        return self.spec.name

    @abstractmethod
    def initial_state(self, batch: int) -> Node:
        pass

    @abstractmethod
    def step(self, state: Node, action: Node, t: int) -> StepResult:
        pass

    @abstractmethod
    def landscape(self, points: np.ndarray) -> np.ndarray:
        """Reward over a set of points: actions for one-step envs, terminal states otherwise."""
        pass

    def one_step_reward(self, actions: np.ndarray) -> np.ndarray:
        """Reward of a single step from the initial state, for each row of `actions`."""
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, self.spec.action_dim)
        state = self.initial_state(len(actions))
        return self.step(state, const(actions), 0).reward.value

    def check_action(self, action: Node):
        a = action.value
        if a.ndim != 2 or a.shape[1] != self.spec.action_dim:
            raise EnvError(f"{self.name}: action shape {a.shape}, expected (B, {self.spec.action_dim})")
        low, high = self.spec.low, self.spec.high
        bad = (a < low - BOUND_TOL) | (a > high + BOUND_TOL)
        if np.any(bad):
            value = float(a[bad][0])
            raise EnvError(f"{self.name}: action {value:.6g} outside bounds {self.spec.action_bounds}")


# ---------------------------------------------------------------------------
# One-step bandits
# ---------------------------------------------------------------------------

def _two_mode(a: Node) -> Node:
    return 1.2 * exp(square(a + 0.6) * (-1.0 / 0.01)) + 0.8 * exp(square(a - 0.3) * (-1.0 / 0.02))


# Cliff at the right mode's peak (0.3), not 0.45: at 0.45 the smooth slope already points
# left, so pathwise ascent would never reach the plateau. Pass jump=0.45 for the other layout.
def bandit_a_reward(a: Node, jump: float = 0.3) -> Node:
    """Two smooth modes; everything right of `jump` drops onto a -0.5 plateau."""
    a = lift(a)
    plateau = a.value > jump
    return where(plateau, const(np.full(a.shape, -0.5)), _two_mode(a))


def bandit_b_reward(a: Node, jump: float = -0.85, drop: float = 0.6) -> Node:
    """Two smooth modes (left higher) with a drop of `drop` for a < jump."""
    a = lift(a)
    cliff = (a.value < jump).astype(np.float64)
    return _two_mode(a) - const(drop * cliff)


def smooth_bandit_reward(a: Node) -> Node:
    return _two_mode(lift(a))


def linear_reward(a: Node) -> Node:
    return lift(a) * 1.0


def step_reward(a: Node, c: float = 0.0) -> Node:
    """Indicator 1[a < c]: piecewise constant, zero pathwise derivative everywhere."""
    return const((lift(a).value < c).astype(np.float64))


def quadratic_reward(a: Node) -> Node:
    return -square(lift(a) - 0.5)


class BanditEnv(Env):
    """One-step env with state [0] and a 1-D action."""

    def __init__(
        self,
        name: str,
        reward_fn: Callable[[Node], Node],
        bounds: Tuple[float, float] = (-1.0, 1.0),
        jumps: Sequence[float] = (),
    ):
        self.spec = EnvSpec(
            name=name,
            state_dim=1,
            action_dim=1,
            horizon=1,
            action_bounds=(bounds,),
            discontinuous=bool(jumps),
            differentiable=True,
        )
        self.reward_fn = reward_fn
        self.jumps = tuple(jumps)

    def initial_state(self, batch: int) -> Node:
        return const(np.zeros((batch, 1)))

    def step(self, state: Node, action: Node, t: int) -> StepResult:
        self.check_action(action)
        reward = self.reward_fn(action[:, 0])
        return StepResult(next_state=state, reward=reward, done=True)

    def landscape(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1)
        return self.reward_fn(const(points)).value


# ---------------------------------------------------------------------------
# Move tasks
# ---------------------------------------------------------------------------

MOVE_HORIZON = 20
MOVE_MAX_STEP = 0.12
PEAK_STD = 0.08
MOVE1_FLAT_RADIUS = 0.3
# The bumps fade in (smoothstep in |s|^2) between the flat disc and this radius.
MOVE1_RAMP_RADIUS = 0.4
MAX_BOUNCES = 4
SURFACE_MARGIN = 1e-9

MOVE1_PEAKS = (((0.0, 0.75), 1.0), ((-0.55, 0.0), 0.6), ((0.55, 0.0), 0.5), ((0.0, -0.55), 0.4))
MOVE2_PEAKS = (((0.7, 0.7), 1.0), ((-0.5, 0.5), 0.7), ((-0.5, -0.5), 0.5), ((0.5, -0.5), 0.6))
MOVE3_GOAL = (((0.0, 0.8), 1.0),)
MOVE3_GOAL_STD = 0.35
# Cup opening towards the start; neighbouring circles leave a gap of about 0.07.
MOVE3_OBSTACLES = ObstacleSet(circles=(((-0.28, 0.36), 0.12), ((0.0, 0.5), 0.12), ((0.28, 0.36), 0.12)))

NAV4_GOAL = (((0.8, 0.8), 1.0),)
NAV4_GOAL_STD = 0.3
NAV4_OBSTACLES = ObstacleSet(
    circles=(((-0.3, -0.3), 0.15), ((0.3, 0.3), 0.15), ((-0.3, 0.3), 0.15), ((0.3, -0.3), 0.15))
)


def _row_dot(x: Node, y: Node) -> Node:
    return reduce_sum(x * y, axis=-1, keepdims=True)


def _peaks(state: Node, peaks, std: float) -> Node:
    total = None
    for center, amplitude in peaks:
        bump = amplitude * exp(reduce_sum(square(state - np.asarray(center)), axis=-1) * (-0.5 / std ** 2))
        total = bump if total is None else total + bump
    return total


def move_terminal_reward(state: Node, variant: str) -> Node:
    """Terminal reward landscape of the move tasks over (B, 2) positions."""
    state = lift(state)
    if variant == "move1":
        bumps = _peaks(state, MOVE1_PEAKS, PEAK_STD)
        width = MOVE1_RAMP_RADIUS ** 2 - MOVE1_FLAT_RADIUS ** 2
        u = clamp((reduce_sum(square(state), axis=-1) - MOVE1_FLAT_RADIUS ** 2) * (1.0 / width), 0.0, 1.0)
        return u * u * (3.0 - 2.0 * u) * bumps
    if variant == "move2":
        return _peaks(state, MOVE2_PEAKS, PEAK_STD)
    if variant == "move3":
        return _peaks(state, MOVE3_GOAL, MOVE3_GOAL_STD)
    if variant == "nav4":
        return _peaks(state, NAV4_GOAL, NAV4_GOAL_STD)
    raise EnvError(f"unknown move variant '{variant}'")


def _first_hits(p: np.ndarray, d: np.ndarray, obstacles: ObstacleSet, skip: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Index of the earliest circle each row's segment p -> p + d enters (-1 for none).

    `skip` names, per row, the circle the segment starts on after a bounce; it is never re-entered.
    """
    best_t = np.full(len(p), np.inf)
    best_k = np.full(len(p), -1)
    aa = np.sum(d * d, axis=-1)
    for k, (center, radius) in enumerate(obstacles.circles):
        f = p - np.asarray(center)
        bb = 2.0 * np.sum(f * d, axis=-1)
        cc = np.sum(f * f, axis=-1) - radius ** 2
        disc = bb * bb - 4.0 * aa * cc
        with np.errstate(all="ignore"):
            t = (-bb - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * aa)
        hit = (aa > 0.0) & (disc > 0.0) & (cc > 0.0) & (t >= 0.0) & (t <= 1.0) & (t < best_t)
        if skip is not None:
            hit &= skip != k
        best_t = np.where(hit, t, best_t)
        best_k = np.where(hit, k, best_k)
    return best_k


def _bounce(pos: Node, disp: Node, first: np.ndarray, obstacles: ObstacleSet) -> Tuple[Node, Node]:
    """Advance hitting rows to their contact point and mirror what is left of the displacement."""
    new_pos, new_disp = pos, disp
    for k, (center, radius) in enumerate(obstacles.circles):
        mask = (first == k)
        if not np.any(mask):
            continue
        m = mask.astype(np.float64)[:, None]
        f = pos - np.asarray(center)
        aa = _row_dot(disp, disp) + (1.0 - m)
        bb = 2.0 * _row_dot(f, disp)
        cc = _row_dot(f, f) - radius ** 2
        disc = clamp(bb * bb - 4.0 * aa * cc, 1e-12)
        t_hit = (-1.0 * bb - sqrt(disc)) / (2.0 * aa)
        contact = pos + t_hit * disp
        normal = (contact - np.asarray(center)) * (1.0 / radius)
        remaining = (1.0 - t_hit) * disp
        reflected = remaining - 2.0 * _row_dot(remaining, normal) * normal
        new_pos = where(m, contact, new_pos)
        new_disp = where(m, reflected, new_disp)
    return new_pos, new_disp


def _push_out(point: Node, obstacles: ObstacleSet) -> Node:
    """Project endpoints left inside a circle onto its surface."""
    for center, radius in obstacles.circles:
        offset = point.value - np.asarray(center)
        inside = np.sum(offset * offset, axis=-1) < radius ** 2
        if not np.any(inside):
            continue
        m = inside.astype(np.float64)[:, None]
        f = point - np.asarray(center)
        norm = sqrt(clamp(_row_dot(f, f) + (1.0 - m), 1e-24))
        surface = f * ((1.0 + SURFACE_MARGIN) * radius) / norm + np.asarray(center)
        point = where(m, surface, point)
    return point


def move_step(state: Node, action: Node, obstacles: ObstacleSet, arena: float = 1.0) -> Node:
    """
    Translate by `action`, reflecting elastically off every circle the path meets, clamp to the arena.

    Up to MAX_BOUNCES reflections are resolved in order of contact; an endpoint still inside a
    circle after that is projected onto its surface. Contact masks are constants; within a
    branch the contact times, normals and reflected displacements are differentiable in
    state and action.
    """
    state, action = lift(state), lift(action)
    if len(obstacles) == 0:
        return clamp(state + action, -arena, arena)

    pos, disp = state, action
    skip = np.full(state.shape[0], -1)
    for _ in range(MAX_BOUNCES):
        first = _first_hits(pos.value, disp.value, obstacles, skip)
        if not np.any(first >= 0):
            break
        pos, disp = _bounce(pos, disp, first, obstacles)
        skip = np.where(first >= 0, first, skip)
    return clamp(_push_out(pos + disp, obstacles), -arena, arena)


class MoveEnv(Env):
    def __init__(
        self,
        variant: str,
        obstacles: ObstacleSet = ObstacleSet(),
        horizon: int = MOVE_HORIZON,
        max_step: float = MOVE_MAX_STEP,
        start: Tuple[float, float] = (0.0, 0.0),
    ):
        self.variant = variant
        self.obstacles = obstacles
        self.start = np.asarray(start, dtype=np.float64)
        self.spec = EnvSpec(
            name=variant,
            state_dim=2,
            action_dim=2,
            horizon=horizon,
            action_bounds=((-max_step, max_step), (-max_step, max_step)),
            discontinuous=len(obstacles) > 0,
            differentiable=True,
            state_bounds=(-1.0, 1.0),
        )

    def initial_state(self, batch: int) -> Node:
        return const(np.tile(self.start, (batch, 1)))

    def step(self, state: Node, action: Node, t: int) -> StepResult:
        self.check_action(action)
        next_state = move_step(state, action, self.obstacles)
        done = t >= self.spec.horizon - 1
        if done:
            reward = move_terminal_reward(next_state, self.variant)
        else:
            reward = const(np.zeros(next_state.shape[0]))
        return StepResult(next_state=next_state, reward=reward, done=done)

    def landscape(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return move_terminal_reward(const(points), self.variant).value


class Linear2DEnv(Env):
    """s' = s + 0.1 a with reward -|s'|^2 every step; used to check dynamics learning."""

    def __init__(self, horizon: int = 10, rate: float = 0.1):
        self.rate = rate
        self.spec = EnvSpec(
            name="linear2d",
            state_dim=2,
            action_dim=2,
            horizon=horizon,
            action_bounds=((-1.0, 1.0), (-1.0, 1.0)),
            state_bounds=(-1.0, 1.0),
        )

    def initial_state(self, batch: int) -> Node:
        return const(np.zeros((batch, 2)))

    def step(self, state: Node, action: Node, t: int) -> StepResult:
        self.check_action(action)
        next_state = clamp(state + self.rate * action, -1.0, 1.0)
        reward = -reduce_sum(square(next_state), axis=-1)
        return StepResult(next_state=next_state, reward=reward, done=t >= self.spec.horizon - 1)

    def landscape(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return -np.sum(points ** 2, axis=-1)


# ---------------------------------------------------------------------------
# Maze
# ---------------------------------------------------------------------------

MAZE_ROOMS = 5
MAZE_ROOM_SIZE = 0.4
MAZE_PASSAGE = 0.08
MAZE_MAX_STEP = 0.1
MAZE_HORIZON = 50
MAZE_WALLS = tuple(-1.0 + MAZE_ROOM_SIZE * k for k in range(1, MAZE_ROOMS))


def room_index(coord: np.ndarray) -> np.ndarray:
    """Room column/row index (0..4) of each coordinate."""
    idx = np.floor((np.asarray(coord) + 1.0) / MAZE_ROOM_SIZE).astype(np.int64)
    return np.clip(idx, 0, MAZE_ROOMS - 1)


def room_center(coord: np.ndarray) -> np.ndarray:
    return -1.0 + MAZE_ROOM_SIZE * (room_index(coord) + 0.5)


def _blocked(moving: np.ndarray, target: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Rows whose move moving -> target crosses a wall away from the passage on `other`."""
    crossing = np.zeros(len(moving), dtype=bool)
    for wall in MAZE_WALLS:
        crossing |= ((moving < wall) & (target >= wall)) | ((moving >= wall) & (target < wall))
    in_passage = np.abs(other - room_center(other)) <= MAZE_PASSAGE / 2.0
    return crossing & ~in_passage


def maze_step(state: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Move x then y; a component that would cross a wall outside a passage is dropped."""
    x, y = state[:, 0].copy(), state[:, 1].copy()
    new_x = np.clip(x + action[:, 0], -1.0, 1.0)
    x = np.where(_blocked(x, new_x, y), x, new_x)
    new_y = np.clip(y + action[:, 1], -1.0, 1.0)
    y = np.where(_blocked(y, new_y, x), y, new_y)
    return np.stack([x, y], axis=-1)


def room_ids(states) -> np.ndarray:
    """Flat room id (row * 5 + column) of each (x, y) state."""
    states = np.asarray(states, dtype=np.float64).reshape(-1, 2)
    if np.any(np.abs(states) > 1.0 + BOUND_TOL):
        raise EnvError("coverage: state outside the maze arena")
    return room_index(states[:, 1]) * MAZE_ROOMS + room_index(states[:, 0])


def coverage(visited_states) -> int:
    """Number of distinct maze rooms containing at least one visited state."""
    states = np.asarray(visited_states, dtype=np.float64).reshape(-1, 2)
    if len(states) == 0:
        return 0
    return int(len(np.unique(room_ids(states))))


class MazeEnv(Env):
    def __init__(self, horizon: int = MAZE_HORIZON):
        self.spec = EnvSpec(
            name="maze",
            state_dim=2,
            action_dim=2,
            horizon=horizon,
            action_bounds=((-MAZE_MAX_STEP, MAZE_MAX_STEP), (-MAZE_MAX_STEP, MAZE_MAX_STEP)),
            discontinuous=True,
            differentiable=False,
            state_bounds=(-1.0, 1.0),
        )

    def initial_state(self, batch: int) -> Node:
        return const(np.zeros((batch, 2)))

    def step(self, state: Node, action: Node, t: int) -> StepResult:
        self.check_action(action)
        next_state = const(maze_step(state.value, action.value))
        return StepResult(
            next_state=next_state,
            reward=const(np.zeros(next_state.shape[0])),
            done=t >= self.spec.horizon - 1,
        )

    def landscape(self, points: np.ndarray) -> np.ndarray:
        return np.zeros(len(np.asarray(points).reshape(-1, 2)))


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

_REGISTRY: Dict[str, Callable[..., Env]] = {
    "bandit_a": lambda jump=0.3: BanditEnv("bandit_a", lambda a: bandit_a_reward(a, jump), jumps=(jump,)),
    "bandit_b": lambda: BanditEnv("bandit_b", bandit_b_reward, jumps=(-0.85,)),
    "smooth_bandit": lambda: BanditEnv("smooth_bandit", smooth_bandit_reward),
    "linear": lambda: BanditEnv("linear", linear_reward, bounds=(-math.inf, math.inf)),
    "step": lambda c=0.0: BanditEnv("step", lambda a: step_reward(a, c), bounds=(-math.inf, math.inf), jumps=(c,)),
    "quadratic": lambda: BanditEnv("quadratic", quadratic_reward),
    "move1": lambda: MoveEnv("move1"),
    "move2": lambda: MoveEnv("move2"),
    "move3": lambda: MoveEnv("move3", obstacles=MOVE3_OBSTACLES),
    "nav4": lambda: MoveEnv("nav4", obstacles=NAV4_OBSTACLES, horizon=30, start=(-0.8, -0.8)),
    "linear2d": lambda: Linear2DEnv(),
    "maze": lambda: MazeEnv(),
}

ENV_IDS: Tuple[str, ...] = tuple(_REGISTRY)


def make_env(env_id: str, **kwargs) -> Env:
    if env_id not in _REGISTRY:
        raise EnvError(f"unknown environment '{env_id}' (known: {', '.join(ENV_IDS)})")
    return _REGISTRY[env_id](**kwargs)
