"""Run segments, dataset persistence, synthetic worlds, scripted expert logs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (ACCEL_LEVELS, STEER_LEVELS, AgentState, DiscreteAction,
                       N_DISCRETE_ACTIONS, obb_overlap_many, step_discrete_arrays,
                       wheelbase)
from .roadgraph import (LaneSegment, Roadgraph, Route, RoutePath, enumerate_routes,
                        segment_curvature)

DATASET_SCHEMA = 1
POINT_SPACING = 2.0        # m between polyline points in generated worlds
MIN_TRAVEL = 2.0           # m of reference travel for an agent to count as a mover
SPAWN_RETRIES = 10
VEHICLE_TYPE = 1.0
MAX_LAT_ACCEL = 3.0        # m/s^2 comfort bound used to cap expert speed in curves

WORLD_KINDS = ("straight", "curve", "fork", "merge", "four-way")

DEFAULT_WORLD_PARAMS = {
    "straight": {"length": 300.0},
    "curve": {"lead_in": 60.0, "radius": 60.0, "angle": 1.2, "tail": 60.0},
    "fork": {"stem": 80.0, "radius": 50.0, "angle": 1.0, "tail": 140.0},
    "merge": {"arm": 120.0, "half_angle": 0.15, "shared": 200.0},
    "four-way": {"arm": 90.0, "radius": 25.0, "tail": 90.0},
}


@dataclass(eq=False)
class RunSegment:
    """Reference log of one scene: a road network plus N x T agent states."""

    id: str
    roadgraph: Roadgraph
    pos: np.ndarray          # (N, T, 2)
    heading: np.ndarray      # (N, T)
    vel: np.ndarray          # (N, T, 2)
    valid: np.ndarray        # (N, T) bool
    length: np.ndarray       # (N,)
    width: np.ndarray        # (N,)
    obj_type: np.ndarray     # (N,)
    dynamic_xy: np.ndarray   # (T, K, 2) traffic light positions, K may be 0
    dynamic_state: np.ndarray  # (T, K) int state
    ego_index: int = 0
    step_dt: float = 0.2

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float)
        self.heading = np.asarray(self.heading, dtype=float)
        self.vel = np.asarray(self.vel, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        n, t = self.valid.shape
        if self.pos.shape != (n, t, 2) or self.heading.shape != (n, t) \
                or self.vel.shape != (n, t, 2):
            raise ValueError(f"shape-error: inconsistent agent arrays in {self.id}")
        if not (0 <= self.ego_index < n):
            raise ValueError(f"invalid-agent: ego index {self.ego_index}")
        if not self.valid[self.ego_index, 0]:
            raise ValueError("invalid-agent: ego must be valid at the first step")
        bad = self.valid.any(axis=1) & ((self.length <= 0) | (self.width <= 0))
        if bad.any():
            raise ValueError(f"invalid-agent: nonpositive box for agent {int(np.where(bad)[0][0])}")

    @property
    def n_agents(self) -> int:
        return self.valid.shape[0]

    @property
    def n_steps(self) -> int:
        return self.valid.shape[1]

    @property
    def duration(self) -> float:
        return self.n_steps * self.step_dt

    def state(self, agent: int, t: int) -> AgentState:
        if not (0 <= agent < self.n_agents):
            raise ValueError(f"invalid-agent: {agent}")
        if not self.valid[agent, t]:
            return AgentState.invalid()
        return AgentState(self.pos[agent, t].copy(), float(self.heading[agent, t]),
                          self.vel[agent, t].copy(), float(self.length[agent]),
                          float(self.width[agent]), True)

    def travel(self, agent: int) -> float:
        """Total reference path length of an agent over its valid steps."""
        ok = self.valid[agent]
        pts = self.pos[agent][ok]
        if pts.shape[0] < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())

    def __eq__(self, other):
        if not isinstance(other, RunSegment):
            return NotImplemented
        return (self.id == other.id and self.ego_index == other.ego_index
                and self.step_dt == other.step_dt
                and roadgraph_to_dict(self.roadgraph) == roadgraph_to_dict(other.roadgraph)
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("pos", "heading", "vel", "valid", "length", "width",
                                  "obj_type", "dynamic_xy", "dynamic_state")))


@dataclass
class Dataset:
    train: list[RunSegment]
    test: list[RunSegment]
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.meta == other.meta and self.train == other.train
                and self.test == other.test)


# ------------------------------------------------------------- world build

def _line_points(a, b, spacing=POINT_SPACING):
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(2, int(np.ceil(np.linalg.norm(b - a) / spacing)) + 1)
    return a[None, :] + np.linspace(0.0, 1.0, n)[:, None] * (b - a)[None, :]


def _arc_points(centre, radius, a0, a1, spacing=POINT_SPACING):
    sweep = abs(a1 - a0) * radius
    n = max(2, int(np.ceil(sweep / spacing)) + 1)
    ang = np.linspace(a0, a1, n)
    return np.stack([centre[0] + radius * np.cos(ang),
                     centre[1] + radius * np.sin(ang)], axis=1)


def _check_params(kind, p):
    if kind in ("curve", "fork", "four-way") and p["radius"] < 20.0:
        raise ValueError(f"invalid-world-params: radius {p['radius']} below 20 m")
    arms = {"straight": ("length",), "curve": ("lead_in", "tail"),
            "fork": ("stem", "tail"), "merge": ("arm", "shared"),
            "four-way": ("arm", "tail")}
    for key in arms[kind]:
        if p[key] < 50.0:
            raise ValueError(f"invalid-world-params: {key} {p[key]} below 50 m")


def generate_world(kind: str, params: dict | None = None, seed: int = 0) -> Roadgraph:
    """Build one of the synthetic road networks. Deterministic in its inputs."""
    del seed  # geometry is fully parametric
    if kind not in WORLD_KINDS:
        raise ValueError(f"invalid-world-params: unknown kind {kind}")
    p = dict(DEFAULT_WORLD_PARAMS[kind])
    p.update(params or {})
    _check_params(kind, p)
    segs: list[LaneSegment] = []

    def link(parent: LaneSegment, child: LaneSegment):
        parent.descendants.append(child.id)
        child.ancestors.append(parent.id)

    if kind == "straight":
        segs.append(LaneSegment("s00", _line_points((0, 0), (p["length"], 0))))
    elif kind == "curve":
        lead = LaneSegment("c00_in", _line_points((0, 0), (p["lead_in"], 0)))
        r, ang = p["radius"], p["angle"]
        arc = LaneSegment("c01_arc", _arc_points((p["lead_in"], r), r, -np.pi / 2,
                                                 -np.pi / 2 + ang))
        end = arc.polyline[-1]
        out_dir = np.array([np.cos(ang), np.sin(ang)])
        tail = LaneSegment("c02_out", _line_points(end, end + p["tail"] * out_dir))
        link(lead, arc)
        link(arc, tail)
        segs += [lead, arc, tail]
    elif kind == "fork":
        stem = LaneSegment("f00_stem", _line_points((0, 0), (p["stem"], 0)))
        r, ang = p["radius"], p["angle"]
        x0 = p["stem"]
        left = LaneSegment("f01_left", _arc_points((x0, r), r, -np.pi / 2, -np.pi / 2 + ang))
        right = LaneSegment("f02_right", _arc_points((x0, -r), r, np.pi / 2, np.pi / 2 - ang))
        ldir = np.array([np.cos(ang), np.sin(ang)])
        rdir = np.array([np.cos(ang), -np.sin(ang)])
        ltail = LaneSegment("f03_left_tail",
                            _line_points(left.polyline[-1], left.polyline[-1] + p["tail"] * ldir))
        rtail = LaneSegment("f04_right_tail",
                            _line_points(right.polyline[-1], right.polyline[-1] + p["tail"] * rdir))
        link(stem, left)
        link(stem, right)
        link(left, ltail)
        link(right, rtail)
        segs += [stem, left, right, ltail, rtail]
    elif kind == "merge":
        th = p["half_angle"]
        start_a = np.array([-p["arm"] * np.cos(th), p["arm"] * np.sin(th)])
        start_b = np.array([-p["arm"] * np.cos(th), -p["arm"] * np.sin(th)])
        in_a = LaneSegment("m00_in_a", _line_points(start_a, (0, 0)))
        in_b = LaneSegment("m01_in_b", _line_points(start_b, (0, 0)))
        out = LaneSegment("m02_out", _line_points((0, 0), (p["shared"], 0)))
        link(in_a, out)
        link(in_b, out)
        segs += [in_a, in_b, out]
    else:  # four-way
        r = p["radius"]
        app = LaneSegment("x00_app", _line_points((-p["arm"], 0), (0, 0)))
        left = LaneSegment("x01_left", _arc_points((0, r), r, -np.pi / 2, 0.0))
        straight = LaneSegment("x02_str", _line_points((0, 0), (2 * r, 0)))
        right = LaneSegment("x03_right", _arc_points((0, -r), r, np.pi / 2, 0.0))
        ltail = LaneSegment("x04_left_tail", _line_points((r, r), (r, r + p["tail"])))
        stail = LaneSegment("x05_str_tail", _line_points((2 * r, 0), (2 * r + p["tail"], 0)))
        rtail = LaneSegment("x06_right_tail", _line_points((r, -r), (r, -r - p["tail"])))
        link(app, left)
        link(app, straight)
        link(app, right)
        link(left, ltail)
        link(straight, stail)
        link(right, rtail)
        segs += [app, left, straight, right, ltail, stail, rtail]
    return Roadgraph(segs)


def dynamic_records(kind: str, T: int):
    """Per-step traffic light records for a world kind; most have none."""
    if kind != "four-way":
        return np.zeros((T, 0, 2)), np.zeros((T, 0), dtype=int)
    xy = np.zeros((T, 1, 2))
    state = (np.arange(T) // 25) % 3
    return xy, state[:, None]


# ------------------------------------------------------------ expert logs

def _source_segments(rg: Roadgraph) -> list[str]:
    return [sid for sid in rg.ids if not rg.segments[sid].ancestors]


def _sample_route(rng, routes: list[Route], route_weights):
    if route_weights is not None and len(route_weights) == len(routes):
        w = np.asarray(route_weights, dtype=float)
        w = w / w.sum()
    else:
        w = np.full(len(routes), 1.0 / len(routes))
    return int(rng.choice(len(routes), p=w))


def _route_speed_cap(rg: Roadgraph, route: Route) -> float:
    kmax = max((abs(segment_curvature(rg.segments[sid])) for sid in route.segment_ids),
               default=0.0)
    if kmax < 1e-9:
        return np.inf
    return float(np.sqrt(MAX_LAT_ACCEL / kmax))


def scripted_expert_rollout(rg: Roadgraph, n_agents: int, T: int, seed: int, *,
                            step_dt: float = 0.2, route_weights=None,
                            speed_range=(8.0, 14.0), headway: float = 10.0,
                            segment_id: str = "segment-0",
                            world_kind: str = "straight") -> RunSegment:
    """Collision-free reference log from a pure-pursuit platoon controller.

    Agents actuate through the discrete action grid, so every logged
    transition is exactly reproducible by one grid action. Spawns that end
    up colliding or off road are regenerated with a derived seed.
    """
    if n_agents < 1:
        raise ValueError("not-enough-agents: need at least one agent")
    last_err = "no attempt"
    for attempt in range(SPAWN_RETRIES):
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=seed, spawn_key=(97, attempt))))
        seg = _expert_attempt(rg, n_agents, T, rng, step_dt, route_weights,
                              speed_range, headway, segment_id, world_kind)
        if seg is not None:
            return seg
        last_err = f"attempt {attempt}"
    raise ValueError(f"spawn-failed: no clean spawn after {SPAWN_RETRIES} tries ({last_err})")


def _expert_attempt(rg, n_agents, T, rng, step_dt, route_weights, speed_range,
                    headway, segment_id, world_kind):
    sources = _source_segments(rg)
    if not sources:
        raise ValueError("empty-roadgraph: no source segments")
    lengths = np.full(n_agents, 0.0)
    widths = np.full(n_agents, 0.0)
    routes: list[RoutePath] = []
    targets = np.zeros(n_agents)
    pos = np.zeros((n_agents, T, 2))
    heading = np.zeros((n_agents, T))
    vel = np.zeros((n_agents, T, 2))
    valid = np.ones((n_agents, T), dtype=bool)

    next_arc = {sid: 8.0 for sid in sources}
    spawn_arcs = np.zeros(n_agents)
    spawn_src = []
    for i in range(n_agents):
        src = sources[i % len(sources)]
        route_list = enumerate_routes(rg, src)
        ridx = _sample_route(rng, route_list, route_weights)
        path = RoutePath(rg, route_list[ridx])
        arc = next_arc[src]
        next_arc[src] = arc + rng.uniform(14.0, 26.0)
        lengths[i] = rng.uniform(4.2, 4.8)
        widths[i] = rng.uniform(1.8, 2.1)
        target = rng.uniform(*speed_range)
        targets[i] = min(target, _route_speed_cap(rg, route_list[ridx]))
        routes.append(path)
        spawn_arcs[i] = arc
        spawn_src.append(src)
        p0 = path.point_at(arc)
        tan = path.tangent_at(arc)
        pos[i, 0] = p0
        heading[i, 0] = np.arctan2(tan[1], tan[0])
        vel[i, 0] = targets[i] * tan

    # Make the ego the second agent from the front of the first source's
    # platoon, so both it and its nearest neighbour reach any branch point.
    first_src = sources[0]
    platoon = [i for i in range(n_agents) if spawn_src[i] == first_src]
    platoon.sort(key=lambda i: -spawn_arcs[i])
    ego = platoon[1] if len(platoon) >= 2 else platoon[0]
    order = [ego] + [i for i in range(n_agents) if i != ego]
    lengths, widths, targets = lengths[order], widths[order], targets[order]
    routes = [routes[i] for i in order]
    pos[:, 0] = pos[order, 0]
    heading[:, 0] = heading[order, 0]
    vel[:, 0] = vel[order, 0]

    for t in range(T - 1):
        speeds = np.linalg.norm(vel[:, t], axis=1)
        arcs = np.zeros(n_agents)
        for i in range(n_agents):
            arcs[i], _, _ = routes[i].project(pos[i, t])
        for i in range(n_agents):
            v = speeds[i]
            path = routes[i]
            look = float(np.clip(0.8 * v, 4.0, 10.0))
            target_pt = path.point_at(arcs[i] + look)
            delta = target_pt - pos[i, t]
            alpha = np.arctan2(delta[1], delta[0]) - heading[i, t]
            alpha = (alpha + np.pi) % (2 * np.pi) - np.pi
            steer_cmd = np.arctan2(2.0 * wheelbase(lengths[i]) * np.sin(alpha), look)
            accel_cmd = np.clip(1.5 * (targets[i] - v), -8.0, 3.0)
            gap = np.inf
            lead_speed = 0.0
            lead_len = 0.0
            for j in range(n_agents):
                if j == i:
                    continue
                d_lat = path.distances(pos[j, t][None, :])[0]
                arc_j, _, _ = path.project(pos[j, t])
                ahead = arc_j - arcs[i]
                if d_lat < 2.5 and 0.0 < ahead < gap:
                    gap = ahead
                    lead_speed = speeds[j]
                    lead_len = lengths[j]
            gap_clear = gap - (lengths[i] + lead_len) / 2
            if gap_clear < headway:
                brake = -1.0 - 7.0 * max(headway - gap_clear, 0.0) / headway
                if gap_clear < 3.0 or lead_speed + 1.0 < v:
                    brake = min(brake, -4.0)
                accel_cmd = min(accel_cmd, brake)
            a_idx = int(np.argmin(np.abs(ACCEL_LEVELS - accel_cmd)))
            s_idx = int(np.argmin(np.abs(STEER_LEVELS - steer_cmd)))
            px, py, h2, v2 = step_discrete_arrays(
                pos[i, t, 0], pos[i, t, 1], heading[i, t], v, lengths[i],
                ACCEL_LEVELS[a_idx], STEER_LEVELS[s_idx], step_dt)
            pos[i, t + 1] = (px, py)
            heading[i, t + 1] = h2
            vel[i, t + 1] = (v2 * np.cos(h2), v2 * np.sin(h2))

    # Reject attempts that collide or leave the road anywhere.
    for t in range(T):
        ii, jj = np.triu_indices(n_agents, k=1)
        if ii.size and obb_overlap_many(
                pos[ii, t, 0], pos[ii, t, 1], heading[ii, t], lengths[ii], widths[ii],
                pos[jj, t, 0], pos[jj, t, 1], heading[jj, t], lengths[jj], widths[jj]).any():
            return None
    _, _, dists = rg.nearest_edges(pos.reshape(-1, 2))
    if (dists > rg.lane_half_width).any():
        return None

    dyn_xy, dyn_state = dynamic_records(world_kind, T)
    return RunSegment(segment_id, rg, pos, heading, vel, valid, lengths, widths,
                      np.full(n_agents, VEHICLE_TYPE), dyn_xy, dyn_state,
                      ego_index=0, step_dt=step_dt)


def generate_dataset(kind: str, n_train: int, n_test: int, n_agents: int, T: int,
                     seed: int, params: dict | None = None, route_weights=None,
                     step_dt: float = 0.2) -> Dataset:
    """Expert dataset over one world kind with per-segment derived seeds."""
    rg = generate_world(kind, params, seed)
    splits = {"train": n_train, "test": n_test}
    out = {"train": [], "test": []}
    for s_idx, (split, count) in enumerate(splits.items()):
        for i in range(count):
            seg_seed = int(np.random.SeedSequence(
                entropy=seed, spawn_key=(s_idx, i)).generate_state(1)[0])
            seg = scripted_expert_rollout(
                rg, n_agents, T, seg_seed, step_dt=step_dt, route_weights=route_weights,
                segment_id=f"{kind}-{split}-{i:05d}", world_kind=kind)
            out[split].append(seg)
    meta = {"schema": DATASET_SCHEMA, "kind": kind, "seed": int(seed),
            "n_agents": int(n_agents), "T": int(T), "step_dt": step_dt,
            "route_weights": list(route_weights) if route_weights is not None else None,
            "world_params": params or {}}
    return Dataset(out["train"], out["test"], meta)


# -------------------------------------------------- interactive selection

def select_interactive(seg: RunSegment, n_interactive: int,
                       min_travel: float = MIN_TRAVEL) -> list[int]:
    """Ego plus the nearest moving agents at the first step."""
    if n_interactive < 1:
        raise ValueError("not-enough-agents: need at least one interactive agent")
    ego = seg.ego_index
    candidates = []
    for i in range(seg.n_agents):
        if i == ego or not seg.valid[i, 0]:
            continue
        if seg.travel(i) > min_travel:
            d = float(np.linalg.norm(seg.pos[i, 0] - seg.pos[ego, 0]))
            candidates.append((d, i))
    candidates.sort()
    chosen = [ego] + [i for _, i in candidates[:n_interactive - 1]]
    if len(chosen) < n_interactive:
        raise ValueError(
            f"not-enough-agents: wanted {n_interactive}, found {len(chosen)}")
    return chosen


def fit_reference_actions(seg: RunSegment, agent: int) -> list[DiscreteAction]:
    """Greedy per-step grid action whose step lands closest to the logged state.

    Ties resolve to the smaller flat action index. Steps where the agent is
    not valid map to the neutral action.
    """
    if not (0 <= agent < seg.n_agents):
        raise ValueError(f"invalid-agent: {agent}")
    T = seg.n_steps
    accels = np.repeat(ACCEL_LEVELS, STEER_LEVELS.size)
    steers = np.tile(STEER_LEVELS, ACCEL_LEVELS.size)
    speeds = np.linalg.norm(seg.vel[agent], axis=1)
    px, py, h2, _ = step_discrete_arrays(
        seg.pos[agent, :-1, 0][:, None], seg.pos[agent, :-1, 1][:, None],
        seg.heading[agent, :-1][:, None], speeds[:-1][:, None],
        seg.length[agent], accels[None, :], steers[None, :], seg.step_dt)
    err = np.hypot(px - seg.pos[agent, 1:, 0][:, None],
                   py - seg.pos[agent, 1:, 1][:, None])
    best = np.argmin(err, axis=1)
    neutral = DiscreteAction(ACCEL_LEVELS.size // 2, STEER_LEVELS.size // 2)
    ok = seg.valid[agent, :-1] & seg.valid[agent, 1:]
    return [DiscreteAction.from_flat(int(b)) if o else neutral
            for b, o in zip(best, ok)]


# ---------------------------------------------------------------- file io

def roadgraph_to_dict(rg: Roadgraph) -> dict:
    return {
        "lane_half_width": rg.lane_half_width,
        "segments": [{
            "id": s.id,
            "polyline": s.polyline.tolist(),
            "ancestors": list(s.ancestors),
            "descendants": list(s.descendants),
            "left": s.left_neighbour,
            "right": s.right_neighbour,
        } for s in (rg.segments[sid] for sid in rg.ids)],
    }


def roadgraph_from_dict(d: dict) -> Roadgraph:
    segs = [LaneSegment(e["id"], np.asarray(e["polyline"]), list(e["ancestors"]),
                        list(e["descendants"]), e["left"], e["right"])
            for e in d["segments"]]
    return Roadgraph(segs, lane_half_width=d["lane_half_width"])


def _segment_to_dict(seg: RunSegment) -> dict:
    return {
        "id": seg.id,
        "step_dt": seg.step_dt,
        "ego_index": seg.ego_index,
        "roadgraph": roadgraph_to_dict(seg.roadgraph),
        "pos": seg.pos.tolist(),
        "heading": seg.heading.tolist(),
        "vel": seg.vel.tolist(),
        "valid": seg.valid.astype(int).tolist(),
        "length": seg.length.tolist(),
        "width": seg.width.tolist(),
        "obj_type": seg.obj_type.tolist(),
        "dynamic_xy": seg.dynamic_xy.tolist(),
        "dynamic_state": seg.dynamic_state.tolist(),
    }


def _segment_from_dict(d: dict) -> RunSegment:
    t = len(d["valid"][0]) if d["valid"] else 0
    return RunSegment(
        d["id"], roadgraph_from_dict(d["roadgraph"]), np.asarray(d["pos"], dtype=float),
        np.asarray(d["heading"], dtype=float), np.asarray(d["vel"], dtype=float),
        np.asarray(d["valid"], dtype=bool), np.asarray(d["length"], dtype=float),
        np.asarray(d["width"], dtype=float), np.asarray(d["obj_type"], dtype=float),
        np.asarray(d["dynamic_xy"], dtype=float).reshape(t, -1, 2),
        np.asarray(d["dynamic_state"], dtype=int).reshape(t, -1),
        ego_index=d["ego_index"], step_dt=d["step_dt"])


def save_dataset(ds: Dataset, path):
    """Line-delimited JSON: a header line then one line per run segment."""
    with open(path, "w") as fh:
        header = dict(ds.meta)
        header["schema"] = DATASET_SCHEMA
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split in ("train", "test"):
            for seg in getattr(ds, split):
                row = {"split": split, "segment": _segment_to_dict(seg)}
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError("unsupported-schema: empty dataset file")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise ValueError(f"malformed-line: 1 ({err.msg})") from err
    if meta.get("schema") != DATASET_SCHEMA:
        raise ValueError(f"unsupported-schema: got {meta.get('schema')}, "
                         f"expected {DATASET_SCHEMA}")
    ds = Dataset([], [], meta)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            seg = _segment_from_dict(row["segment"])
            split = row["split"]
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise ValueError(f"malformed-line: {lineno} ({err})") from err
        if split not in ("train", "test"):
            raise ValueError(f"malformed-line: {lineno} (unknown split {split})")
        getattr(ds, split).append(seg)
    return ds
