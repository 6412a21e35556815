"""Parallel beam-search rollouts coupled to reference run segments.

S branches simulate simultaneously. Interactive agents sample actions from the
policy; playback agents replay the reference verbatim. A discriminator scores
every interactive agent after every step; every prune_every steps the half of
the branches with the highest aggregated score (least realistic) is dropped
and the survivors are duplicated with fresh rng streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import neural as nn
from .agents import EncoderConfig, FrameArrays, build_observations
from .dynamics import ACCEL_LEVELS, STEER_LEVELS, HEADING_DISP_MIN, step_discrete_arrays
from .roadgraph import Route, RoutePath, RoutePathBatch
from .scenario import RunSegment


@dataclass
class BeamConfig:
    n_branches: int = 4
    prune_every: int = 10
    horizon: int = 49
    prune: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.prune_every < 1 or self.n_branches < 1 or self.horizon < 1:
            raise ValueError("shape-error: beam sizes must be positive")
        if self.prune and (self.n_branches < 2 or self.n_branches % 2):
            raise ValueError("shape-error: pruning needs an even branch count >= 2")


@dataclass
class Branch:
    """Identity of one beam branch: its rng stream and tiling provenance."""

    lineage: int
    gen: np.random.Generator
    payload: object = None


def branch_stream(entropy, key: tuple) -> np.random.Generator:
    """Counter-based stream for one branch, keyed so scheduling cannot reorder it."""
    ss = np.random.SeedSequence(entropy=entropy, spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(ss))


def aggregate_scores(win: np.ndarray, prune_every: int) -> np.ndarray:
    """Window scores [B, N_I, T_p, S] -> [B, S]: max over time, sum over agents."""
    win = np.asarray(win, dtype=float)
    if win.ndim != 4:
        raise ValueError("shape-error: score window must be 4-d")
    if win.shape[2] != prune_every:
        raise ValueError(
            f"incomplete-window: {win.shape[2]} of {prune_every} steps recorded")
    if win.shape[1] == 0:
        return np.zeros((win.shape[0], win.shape[3]))
    return win.max(axis=2).sum(axis=1)


def prune_order(aggregates: np.ndarray):
    """Survivor indices (ascending) and the gather order [survivors, clones].

    The S/2 branches with the highest aggregate are dropped; on ties the lower
    index survives. Survivors keep ascending index order and each is cloned
    once, in the same order.
    """
    agg = np.asarray(aggregates, dtype=float)
    S = agg.shape[0]
    if S < 2 or S % 2:
        raise ValueError("shape-error: pruning needs an even branch count >= 2")
    survivors = np.sort(np.argsort(agg, kind="stable")[: S // 2])
    return survivors, np.concatenate([survivors, survivors])


def prune_and_tile(branches: list, aggregates: np.ndarray, make_stream,
                   next_lineage: int | None = None, clone_payload=None) -> list:
    """Drop the worst half, duplicate survivors with fresh streams; length stays S.

    make_stream(lineage) supplies the rng for each clone. clone_payload, when
    given, copies a survivor's payload into its duplicate.
    """
    survivors, _ = prune_order(aggregates)
    if next_lineage is None:
        next_lineage = max(b.lineage for b in branches) + 1
    kept = [branches[i] for i in survivors]
    clones = []
    for i in survivors:
        src = branches[i]
        payload = clone_payload(src.payload) if clone_payload else src.payload
        clones.append(Branch(next_lineage, make_stream(next_lineage), payload))
        next_lineage += 1
    return kept + clones


@dataclass
class PruneEvent:
    step: int
    segment: int
    survivors: list
    aggregates: list


@dataclass
class BeamResult:
    """Branch-major rollout record for B segments and S branches each."""

    segs: list
    interactive: list            # per segment, agent indices driven by the policy
    goals: list                  # goals[b][s][slot] -> Route or None
    pos: np.ndarray              # (B, S, N, H+1, 2)
    heading: np.ndarray          # (B, S, N, H+1)
    vel: np.ndarray              # (B, S, N, H+1, 2)
    valid: np.ndarray            # (B, S, N, H+1) bool
    actions: np.ndarray          # (B, S, N, H) int; or (B, S, N, H, 2) float
    scores: np.ndarray           # (B, S, N, H) score of the post-step state
    lineages: np.ndarray         # (B, S) int
    prune_events: list
    continuous: bool
    step_dt: float

    @property
    def n_transitions(self) -> int:
        return self.actions.shape[3]


def _goal_paths(segs, interactive, goals, S):
    """One RoutePath per (segment, branch, slot) row; None rows stay goal free."""
    paths = []
    cache = {}
    for b, seg in enumerate(segs):
        for s in range(S):
            for slot in range(len(interactive[b])):
                route = goals[b][s][slot]
                if route is None:
                    paths.append(None)
                else:
                    key = (b, route.segment_ids)
                    if key not in cache:
                        cache[key] = RoutePath(seg.roadgraph, route)
                    paths.append(cache[key])
    return paths


def rollout_segments(segs: list[RunSegment], interactive: list, goals: list,
                     policy, disc, cfg: BeamConfig, enc: EncoderConfig, *,
                     entropy=None, stream_key: tuple = (),
                     seg_keys: list | None = None,
                     score_states: bool = True) -> BeamResult:
    """Run the beam over B segments at once; branches and agents vectorise.

    goals[b][s] lists one Route (or None) per interactive slot; with pruning
    enabled, every branch of a segment must share the same goals. Streams are
    keyed (stream_key..., seg_keys[b], 1 + lineage) so neither batching nor
    worker count can reorder rng consumption.
    """
    B = len(segs)
    S = cfg.n_branches
    H = cfg.horizon
    if B == 0:
        raise ValueError("empty-batch: no segments to roll out")
    if entropy is None:
        entropy = cfg.seed
    if cfg.prune and not score_states:
        raise ValueError("shape-error: pruning requires discriminator scoring")
    dt = segs[0].step_dt
    if any(abs(g.step_dt - dt) > 1e-12 for g in segs):
        raise ValueError("shape-error: segments disagree on step_dt")
    if seg_keys is None:
        seg_keys = list(range(B))
    if cfg.prune:
        for b in range(B):
            if any(goals[b][s] != goals[b][0] for s in range(S)):
                raise ValueError("shape-error: beam branches must share goals")
    continuous = bool(getattr(policy, "continuous", False))

    N = max(seg.n_agents for seg in segs)
    pos = np.zeros((B, S, N, 2))
    head = np.zeros((B, S, N))
    vel = np.zeros((B, S, N, 2))
    valid = np.zeros((B, S, N), dtype=bool)
    exists = np.zeros((B, N), dtype=bool)
    length = np.zeros((B, N))
    width = np.zeros((B, N))
    otype = np.zeros((B, N))
    inter_mask = np.zeros((B, N), dtype=bool)
    for b, seg in enumerate(segs):
        n = seg.n_agents
        pos[b, :, :n] = seg.pos[:, 0]
        head[b, :, :n] = seg.heading[:, 0]
        vel[b, :, :n] = seg.vel[:, 0]
        valid[b, :, :n] = seg.valid[:, 0]
        exists[b, :n] = True
        length[b, :n] = seg.length
        width[b, :n] = seg.width
        otype[b, :n] = seg.obj_type
        for i in interactive[b]:
            if not seg.valid[i, 0]:
                raise ValueError(f"invalid-agent: {i} invalid at rollout start")
            inter_mask[b, i] = True
    valid |= inter_mask[:, None, :]

    # flat observation rows: one per (segment, branch, interactive slot)
    row_b, row_s, row_agent = [], [], []
    for b in range(B):
        for s in range(S):
            for agent in interactive[b]:
                row_b.append(b)
                row_s.append(s)
                row_agent.append(agent)
    row_b = np.array(row_b, dtype=int)
    row_s = np.array(row_s, dtype=int)
    row_agent = np.array(row_agent, dtype=int)
    R = row_b.shape[0]
    others_idx = np.zeros((R, max(N - 1, 0)), dtype=int)
    for r in range(R):
        others = [j for j in range(N) if j != row_agent[r]]
        others_idx[r] = others
    rpb = RoutePathBatch(_goal_paths(segs, interactive, goals, S), enc.goal_points)

    # static map points padded across segments; dynamic slots refreshed per step
    statics = [seg.roadgraph.static_points() for seg in segs]
    P = max(st.shape[0] + seg.dynamic_xy.shape[1] for st, seg in zip(statics, segs))
    pts_xy = np.zeros((B, P, 2))
    pts_lane = np.zeros((B, P))
    pts_dyn = np.zeros((B, P))
    pts_state = np.zeros((B, P))
    pts_valid = np.zeros((B, P), dtype=bool)
    dyn_at = []
    for b, (st, seg) in enumerate(zip(statics, segs)):
        p = st.shape[0]
        k = seg.dynamic_xy.shape[1]
        pts_xy[b, :p] = st
        pts_lane[b, :p] = 1.0
        pts_dyn[b, p:p + k] = 1.0
        pts_valid[b, :p + k] = True
        dyn_at.append(slice(p, p + k))

    def refresh_dynamic(t):
        for b, seg in enumerate(segs):
            if seg.dynamic_xy.shape[1]:
                tc = min(t, seg.n_steps - 1)
                pts_xy[b, dyn_at[b]] = seg.dynamic_xy[tc]
                pts_state[b, dyn_at[b]] = seg.dynamic_state[tc]

    def frame():
        rb = row_b[:, None]
        rs = row_s[:, None]
        return FrameArrays(
            own_pos=pos[row_b, row_s, row_agent],
            own_head=head[row_b, row_s, row_agent],
            own_vel=vel[row_b, row_s, row_agent],
            others_pos=pos[rb, rs, others_idx],
            others_head=head[rb, rs, others_idx],
            others_vel=vel[rb, rs, others_idx],
            others_dim=np.stack([length[rb, others_idx], width[rb, others_idx]], axis=2),
            others_type=otype[rb, others_idx],
            others_valid=valid[rb, rs, others_idx] & exists[rb, others_idx],
            pts_xy=pts_xy[row_b], pts_lane=pts_lane[row_b], pts_dyn=pts_dyn[row_b],
            pts_state=pts_state[row_b], pts_valid=pts_valid[row_b],
        )

    pos_h = np.zeros((B, S, N, H + 1, 2))
    head_h = np.zeros((B, S, N, H + 1))
    vel_h = np.zeros((B, S, N, H + 1, 2))
    valid_h = np.zeros((B, S, N, H + 1), dtype=bool)
    if continuous:
        act_h = np.zeros((B, S, N, H, 2))
    else:
        act_h = np.full((B, S, N, H), -1, dtype=np.int64)
    score_h = np.zeros((B, S, N, H))
    pos_h[:, :, :, 0] = pos
    head_h[:, :, :, 0] = head
    vel_h[:, :, :, 0] = vel
    valid_h[:, :, :, 0] = valid

    def make_stream_for(b):
        return lambda lineage: branch_stream(
            entropy, tuple(stream_key) + (seg_keys[b], 1 + lineage))

    branches = [[Branch(s, make_stream_for(b)(s)) for s in range(S)] for b in range(B)]
    next_lineage = [S] * B
    prune_events = []
    n_slots = [len(interactive[b]) for b in range(B)]

    # rows are (segment, branch, slot) ordered; branch permutations gather rows
    offsets = np.concatenate([[0], np.cumsum([S * n for n in n_slots])])

    def permute_obs(obs, b, order):
        ns = n_slots[b]
        rows = offsets[b] + (order[:, None] * ns + np.arange(ns)[None, :]).ravel()
        sl = slice(offsets[b], offsets[b + 1])
        for name in ("self_feat", "obj_feat", "obj_mask", "pt_feat", "pt_mask",
                     "goal_feat", "disc_feat", "disc_mask"):
            arr = getattr(obs, name)
            arr[sl] = arr[rows]

    refresh_dynamic(0)
    obs = build_observations(frame(), rpb, enc, want_policy=True, want_disc=False)
    for t in range(H):
        out = policy.head_np(obs)
        if continuous:
            eps = np.empty((R, 2))
            r0 = 0
            for b in range(B):
                for s in range(S):
                    eps[r0:r0 + n_slots[b]] = branches[b][s].gen.standard_normal((n_slots[b], 2))
                    r0 += n_slots[b]
            c = np.cos(head[row_b, row_s, row_agent])
            sn = np.sin(head[row_b, row_s, row_agent])
            mean = np.stack([c * out[:, 0] - sn * out[:, 1],
                             sn * out[:, 0] + c * out[:, 1]], axis=1)
            disp = mean + enc.sigma * eps
            act_h[row_b, row_s, row_agent, t] = disp
            newp = pos[row_b, row_s, row_agent] + disp
            norm = np.hypot(disp[:, 0], disp[:, 1])
            newh = np.where(norm > HEADING_DISP_MIN,
                            np.arctan2(disp[:, 1], disp[:, 0]),
                            head[row_b, row_s, row_agent])
            pos[row_b, row_s, row_agent] = newp
            head[row_b, row_s, row_agent] = newh
            vel[row_b, row_s, row_agent] = disp / dt
        else:
            u = np.empty(R)
            r0 = 0
            for b in range(B):
                for s in range(S):
                    u[r0:r0 + n_slots[b]] = branches[b][s].gen.random(n_slots[b])
                    r0 += n_slots[b]
            p = nn.softmax_probs(out)
            idx = np.clip((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1),
                          0, p.shape[1] - 1)
            act_h[row_b, row_s, row_agent, t] = idx
            speed = np.hypot(vel[row_b, row_s, row_agent, 0],
                             vel[row_b, row_s, row_agent, 1])
            px, py, nh, ns = step_discrete_arrays(
                pos[row_b, row_s, row_agent, 0], pos[row_b, row_s, row_agent, 1],
                head[row_b, row_s, row_agent], speed, length[row_b, row_agent],
                ACCEL_LEVELS[idx // STEER_LEVELS.shape[0]],
                STEER_LEVELS[idx % STEER_LEVELS.shape[0]], dt)
            pos[row_b, row_s, row_agent] = np.stack([px, py], axis=1)
            head[row_b, row_s, row_agent] = nh
            vel[row_b, row_s, row_agent] = ns[:, None] * np.stack(
                [np.cos(nh), np.sin(nh)], axis=1)

        # playback agents copy the reference at t+1, holding the last state
        for b, seg in enumerate(segs):
            n = seg.n_agents
            tc = min(t + 1, seg.n_steps - 1)
            pb = exists[b, :n] & ~inter_mask[b, :n]
            if pb.any():
                pos[b, :, :n][:, pb] = seg.pos[pb, tc]
                head[b, :, :n][:, pb] = seg.heading[pb, tc]
                vel[b, :, :n][:, pb] = seg.vel[pb, tc]
                valid[b, :, :n][:, pb] = seg.valid[pb, tc]
        pos_h[:, :, :, t + 1] = pos
        head_h[:, :, :, t + 1] = head
        vel_h[:, :, :, t + 1] = vel
        valid_h[:, :, :, t + 1] = valid

        refresh_dynamic(t + 1)
        obs = build_observations(frame(), rpb, enc,
                                 want_policy=t + 1 < H, want_disc=score_states)
        if score_states:
            score_h[row_b, row_s, row_agent, t] = disc.prob_np(obs)

        if cfg.prune and (t + 1) % cfg.prune_every == 0:
            t0 = t + 1 - cfg.prune_every
            for b in range(B):
                ia = np.asarray(interactive[b], dtype=int)
                win = score_h[b][:, ia, t0:t + 1].transpose(1, 2, 0)[None]
                agg = aggregate_scores(win, cfg.prune_every)[0]
                survivors, order = prune_order(agg)
                for arr in (pos, head, vel, valid):
                    arr[b] = arr[b][order]
                for arr in (pos_h, head_h, vel_h, valid_h, act_h, score_h):
                    arr[b] = arr[b][order]
                permute_obs(obs, b, order)
                branches[b] = prune_and_tile(branches[b], agg, make_stream_for(b),
                                             next_lineage[b])
                next_lineage[b] += survivors.shape[0]
                prune_events.append(PruneEvent(t + 1, b, survivors.tolist(),
                                               agg.tolist()))

    lineages = np.array([[br.lineage for br in branches[b]] for b in range(B)])
    return BeamResult(segs, [list(ia) for ia in interactive], goals, pos_h, head_h,
                      vel_h, valid_h, act_h, score_h, lineages, prune_events,
                      continuous, dt)


def write_trace(result: BeamResult, path: str) -> None:
    """Line-delimited rollout trace: meta, per-branch steps, prune events."""
    with open(path, "w") as fh:
        meta = {"kind": "meta", "segments": [seg.id for seg in result.segs],
                "branches": int(result.pos.shape[1]),
                "transitions": result.n_transitions,
                "interactive": [list(map(int, ia)) for ia in result.interactive],
                "continuous": result.continuous}
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        B, S = result.pos.shape[0], result.pos.shape[1]
        for b in range(B):
            for s in range(S):
                for t in range(result.pos.shape[3]):
                    rec = {"kind": "branch-step", "segment": result.segs[b].id,
                           "branch": s, "lineage": int(result.lineages[b, s]),
                           "step": t,
                           "pos": result.pos[b, s, :, t].round(6).tolist(),
                           "heading": result.heading[b, s, :, t].round(6).tolist(),
                           "scores": (result.scores[b, s, :, t - 1].round(6).tolist()
                                      if t else None)}
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        for ev in result.prune_events:
            rec = {"kind": "prune", "segment": result.segs[ev.segment].id,
                   "step": ev.step, "survivors": ev.survivors,
                   "aggregates": [round(a, 6) for a in ev.aggregates]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
