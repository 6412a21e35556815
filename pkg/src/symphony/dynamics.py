"""Vehicle motion models, discrete and continuous action spaces, box overlap tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACCEL_LEVELS = np.linspace(-8.0, 8.0, 7)    # m/s^2
STEER_LEVELS = np.linspace(-0.3, 0.3, 21)   # rad
N_DISCRETE_ACTIONS = ACCEL_LEVELS.size * STEER_LEVELS.size
SPEED_MAX = 30.0             # m/s, speed never goes negative
WHEELBASE_FRACTION = 0.6     # wheelbase as a fraction of vehicle length
HEADING_DISP_MIN = 0.05      # m, displacements below this leave heading unchanged


@dataclass
class AgentState:
    """Pose, velocity and bounding box of one agent at one step."""

    position: np.ndarray      # (2,) metres, world frame
    heading: float            # rad
    velocity: np.ndarray      # (2,) m/s, world frame
    length: float = 4.5
    width: float = 2.0
    valid: bool = True

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)

    @property
    def speed(self) -> float:
        return float(np.hypot(self.velocity[0], self.velocity[1]))

    @staticmethod
    def invalid() -> "AgentState":
        """Zero-padded placeholder used for absent agents."""
        return AgentState(np.zeros(2), 0.0, np.zeros(2), 0.0, 0.0, False)


@dataclass(frozen=True)
class DiscreteAction:
    """One cell of the acceleration x steering grid."""

    accel_index: int
    steer_index: int

    def __post_init__(self):
        if not (0 <= self.accel_index < ACCEL_LEVELS.size):
            raise ValueError(f"bad-label: accel_index {self.accel_index}")
        if not (0 <= self.steer_index < STEER_LEVELS.size):
            raise ValueError(f"bad-label: steer_index {self.steer_index}")

    @property
    def accel(self) -> float:
        return float(ACCEL_LEVELS[self.accel_index])

    @property
    def steer(self) -> float:
        return float(STEER_LEVELS[self.steer_index])

    @property
    def flat_index(self) -> int:
        return self.accel_index * STEER_LEVELS.size + self.steer_index

    @staticmethod
    def from_flat(index: int) -> "DiscreteAction":
        if not (0 <= index < N_DISCRETE_ACTIONS):
            raise ValueError(f"bad-label: flat index {index}")
        return DiscreteAction(index // STEER_LEVELS.size, index % STEER_LEVELS.size)


@dataclass(frozen=True)
class ContinuousAction:
    """One-step positional displacement in metres, world frame."""

    dx: float
    dy: float


def wheelbase(length: float | np.ndarray):
    return WHEELBASE_FRACTION * np.asarray(length, dtype=float)


def step_discrete_arrays(px, py, heading, speed, length, accel, steer, dt):
    """Vectorised kinematic bicycle step on parallel arrays.

    Heading advances with the pre-step speed; position advances with the
    mean of pre and post speed along the mean heading.
    """
    base = wheelbase(length)
    new_speed = np.clip(speed + accel * dt, 0.0, SPEED_MAX)
    yaw_rate = speed / base * np.tan(steer)
    new_heading = heading + yaw_rate * dt
    mid_heading = heading + 0.5 * yaw_rate * dt
    avg_speed = 0.5 * (speed + new_speed)
    new_px = px + avg_speed * dt * np.cos(mid_heading)
    new_py = py + avg_speed * dt * np.sin(mid_heading)
    return new_px, new_py, new_heading, new_speed


def step_discrete(s: AgentState, a: DiscreteAction, dt: float) -> AgentState:
    """Advance one agent by one discrete action."""
    if not s.valid:
        raise ValueError("invalid-agent: cannot step an invalid state")
    px, py, heading, speed = step_discrete_arrays(
        s.position[0], s.position[1], s.heading, s.speed, s.length, a.accel, a.steer, dt
    )
    velocity = np.array([speed * np.cos(heading), speed * np.sin(heading)])
    return AgentState(np.array([px, py]), float(heading), velocity, s.length, s.width, True)


def step_continuous(s: AgentState, a: ContinuousAction, dt: float) -> AgentState:
    """Advance one agent by a raw displacement; heading follows the displacement."""
    if not s.valid:
        raise ValueError("invalid-agent: cannot step an invalid state")
    disp = np.array([a.dx, a.dy], dtype=float)
    position = s.position + disp
    velocity = disp / dt
    norm = float(np.hypot(disp[0], disp[1]))
    heading = float(np.arctan2(disp[1], disp[0])) if norm > HEADING_DISP_MIN else s.heading
    return AgentState(position, heading, velocity, s.length, s.width, True)


@dataclass
class ContinuousJacobian:
    """Exact partials of step_continuous output w.r.t. (dx, dy)."""

    d_position: np.ndarray   # (2, 2)
    d_velocity: np.ndarray   # (2, 2)
    d_heading: np.ndarray    # (2,)
    heading_defined: bool
    note: str = field(default="")

    def matrix(self) -> np.ndarray:
        """Rows ordered (x, y, vx, vy, heading)."""
        out = np.zeros((5, 2))
        out[0:2] = self.d_position
        out[2:4] = self.d_velocity
        out[4] = self.d_heading
        return out


def jacobian_continuous(s: AgentState, a: ContinuousAction, dt: float) -> ContinuousJacobian:
    """Analytic Jacobian of step_continuous at (s, a).

    Below the heading threshold the heading output is held, which is not
    differentiable in general; the heading row is zeroed and flagged so
    callers can substitute a zero gradient.
    """
    disp = np.array([a.dx, a.dy], dtype=float)
    r2 = float(disp @ disp)
    d_position = np.eye(2)
    d_velocity = np.eye(2) / dt
    if np.sqrt(r2) > HEADING_DISP_MIN:
        d_heading = np.array([-disp[1] / r2, disp[0] / r2])
        return ContinuousJacobian(d_position, d_velocity, d_heading, True)
    return ContinuousJacobian(
        d_position, d_velocity, np.zeros(2), False, note="nondifferentiable-region"
    )


def box_corners(cx, cy, heading, length, width):
    """Corners of oriented rectangles, shape (..., 4, 2)."""
    cx, cy, heading = np.asarray(cx, float), np.asarray(cy, float), np.asarray(heading, float)
    length, width = np.asarray(length, float), np.asarray(width, float)
    c, s = np.cos(heading), np.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    sign_l = np.array([1.0, 1.0, -1.0, -1.0])
    sign_w = np.array([1.0, -1.0, -1.0, 1.0])
    lx = sign_l * hl[..., None]
    wy = sign_w * hw[..., None]
    x = cx[..., None] + lx * c[..., None] - wy * s[..., None]
    y = cy[..., None] + lx * s[..., None] + wy * c[..., None]
    return np.stack([x, y], axis=-1)


def obb_overlap_many(acx, acy, ah, al, aw, bcx, bcy, bh, bl, bw):
    """Vectorised separating-axis test for pairs of oriented boxes.

    Touching boundaries count as overlap.
    """
    acx, acy, ah = np.asarray(acx, float), np.asarray(acy, float), np.asarray(ah, float)
    al, aw = np.asarray(al, float), np.asarray(aw, float)
    bcx, bcy, bh = np.asarray(bcx, float), np.asarray(bcy, float), np.asarray(bh, float)
    bl, bw = np.asarray(bl, float), np.asarray(bw, float)
    dx, dy = bcx - acx, bcy - acy
    overlap = np.ones(np.broadcast(acx, bcx).shape, dtype=bool)
    axes = []
    for h in (ah, bh):
        c, s = np.cos(h), np.sin(h)
        axes.append((c, s))
        axes.append((-s, c))
    for nx, ny in axes:
        centre_dist = np.abs(dx * nx + dy * ny)
        ra = 0.5 * (al * np.abs(np.cos(ah) * nx + np.sin(ah) * ny)
                    + aw * np.abs(-np.sin(ah) * nx + np.cos(ah) * ny))
        rb = 0.5 * (bl * np.abs(np.cos(bh) * nx + np.sin(bh) * ny)
                    + bw * np.abs(-np.sin(bh) * nx + np.cos(bh) * ny))
        overlap &= centre_dist <= ra + rb
    return overlap


def obb_overlap(a: AgentState, b: AgentState) -> bool:
    """True when the two agent boxes intersect or touch."""
    return bool(
        obb_overlap_many(
            a.position[0], a.position[1], a.heading, a.length, a.width,
            b.position[0], b.position[1], b.heading, b.length, b.width,
        )
    )
