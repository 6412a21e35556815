"""Learning rules and the training loop.

Four parameter-block updates: action cloning on logged pairs (optionally
distilling surviving beam branches back into the policy), route-goal NLL,
the discriminator, and an adversarial update whose gradient flows through
the differentiable dynamics. Checkpointing and selection live here too.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import neural as nn
from .agents import (EncoderConfig, FrameAD, FrameArrays, ObservationBatch,
                     build_models, build_observations, build_observations_ad,
                     sample_goal_rows)
from .beam import BeamConfig, BeamResult, rollout_segments
from .dynamics import HEADING_DISP_MIN
from .neural import GradCtx, OptimState, ParamStore, Tensor, save_checkpoint
from .roadgraph import (Route, RoutePath, RoutePathBatch, enumerate_routes,
                        nearest_segment, route_bend_total)
from .scenario import Dataset, RunSegment, fit_reference_actions, select_interactive

VARIANTS = ("bc", "bc-ts", "mgail", "mgail-ts")

# stream namespaces; every rng consumer gets its own spawn-key prefix
_KEY_SAMPLE = 2
_KEY_GOAL = 4
_KEY_ROLLOUT = 5
_KEY_BC = 6
_KEY_DISC = 7
_KEY_NOISE = 8


@dataclass
class TrainConfig:
    variant: str = "bc"
    hierarchy: bool = True
    steps: int = 5000
    batch: int = 16
    n_interactive: int = 2
    checkpoint_every: int = 2000
    seed: int = 0
    lr: float = 3e-4
    distill_weight: float = 1.0
    expert_pairs: int = 256
    distill_pairs: int = 256
    disc_pairs: int = 256
    val_segments: int = 32
    beam_branches: int = 4
    prune_every: int = 10
    rollout_horizon: int | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant: {self.variant}")
        if self.steps < 1 or self.batch < 1 or self.n_interactive < 1:
            raise ValueError("shape-error: steps, batch and agents must be positive")

    @property
    def uses_beam(self) -> bool:
        return self.variant.endswith("-ts")

    @property
    def continuous(self) -> bool:
        return self.variant.startswith("mgail")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "variant", "hierarchy", "steps", "batch", "n_interactive",
            "checkpoint_every", "seed", "lr", "distill_weight", "expert_pairs",
            "distill_pairs", "disc_pairs", "val_segments", "beam_branches",
            "prune_every", "rollout_horizon")}
        d["encoder"] = self.encoder.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        return TrainConfig(**d)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SegmentContext:
    """Per-segment caches: feasible routes, labels, fitted expert actions."""

    seg: RunSegment
    interactive: list
    routes: dict            # agent -> list[Route]
    gt_label: dict          # agent -> route index matching the logged trajectory
    straight_label: dict    # agent -> route index with least total heading change
    fitted: dict            # agent -> (T-1,) flat action labels
    paths: dict             # (agent, route index) -> RoutePath

    def path(self, agent: int, idx: int) -> RoutePath:
        key = (agent, idx)
        if key not in self.paths:
            self.paths[key] = RoutePath(self.seg.roadgraph, self.routes[agent][idx])
        return self.paths[key]


def build_segment_context(seg: RunSegment, n_interactive: int,
                          max_routes: int) -> SegmentContext:
    interactive = select_interactive(seg, n_interactive)
    routes, gt, straight, fitted = {}, {}, {}, {}
    ctx = SegmentContext(seg, interactive, routes, gt, straight, fitted, {})
    for agent in interactive:
        start = nearest_segment(seg.roadgraph, seg.pos[agent, 0]).segment_id
        rs = enumerate_routes(seg.roadgraph, start, max_routes=max_routes)
        if not rs:
            raise ValueError(f"no-feasible-routes: agent {agent} at {start}")
        routes[agent] = rs
        pts = seg.pos[agent][seg.valid[agent]]
        errs = [np.mean(ctx.path(agent, i).distances(pts)) for i in range(len(rs))]
        gt[agent] = int(np.argmin(errs))
        bend = [route_bend_total(ctx.path(agent, i)) for i in range(len(rs))]
        straight[agent] = int(np.argmin(bend))
        acts = fit_reference_actions(seg, agent)
        fitted[agent] = np.array([a.flat_index for a in acts], dtype=np.int64)
    return ctx


# -------------------------------------------------------- row encoders

def _seg_dims(seg: RunSegment, n_pad: int):
    length = np.zeros(n_pad)
    width = np.zeros(n_pad)
    otype = np.zeros(n_pad)
    n = seg.n_agents
    length[:n] = seg.length
    width[:n] = seg.width
    otype[:n] = seg.obj_type
    return length, width, otype


def _seg_points(seg: RunSegment, n_pad: int):
    st = seg.roadgraph.static_points()
    p, k = st.shape[0], seg.dynamic_xy.shape[1]
    xy = np.zeros((n_pad, 2))
    lane = np.zeros(n_pad)
    dyn = np.zeros(n_pad)
    valid = np.zeros(n_pad, dtype=bool)
    xy[:p] = st
    lane[:p] = 1.0
    dyn[p:p + k] = 1.0
    valid[:p + k] = True
    return xy, lane, dyn, valid, slice(p, p + k)


def _alloc_frame(R, M, P):
    return FrameArrays(
        own_pos=np.zeros((R, 2)), own_head=np.zeros(R), own_vel=np.zeros((R, 2)),
        others_pos=np.zeros((R, M, 2)), others_head=np.zeros((R, M)),
        others_vel=np.zeros((R, M, 2)), others_dim=np.zeros((R, M, 2)),
        others_type=np.zeros((R, M)), others_valid=np.zeros((R, M), dtype=bool),
        pts_xy=np.zeros((R, P, 2)), pts_lane=np.zeros((R, P)),
        pts_dyn=np.zeros((R, P)), pts_state=np.zeros((R, P)),
        pts_valid=np.zeros((R, P), dtype=bool))


def reference_rows(items: list, enc: EncoderConfig) -> ObservationBatch:
    """Encode (segment, agent, step, path) rows straight off the logs."""
    if not items:
        raise ValueError("empty-batch: no reference rows")
    R = len(items)
    segs = {id(it[0]): it[0] for it in items}
    N = max(s.n_agents for s in segs.values())
    P = max(s.roadgraph.static_points().shape[0] + s.dynamic_xy.shape[1]
            for s in segs.values())
    M = max(N - 1, 0)
    f = _alloc_frame(R, M, P)
    by_seg = {}
    for r, it in enumerate(items):
        by_seg.setdefault(id(it[0]), []).append(r)
    for key, rows in by_seg.items():
        seg = segs[key]
        rows = np.array(rows)
        agents = np.array([items[r][1] for r in rows])
        ts = np.array([items[r][2] for r in rows])
        n = seg.n_agents
        others = np.array([[j for j in range(n) if j != a] + [0] * (M - n + 1)
                           for a in agents], dtype=int)
        omask = np.arange(M)[None, :] < n - 1
        f.own_pos[rows] = seg.pos[agents, ts]
        f.own_head[rows] = seg.heading[agents, ts]
        f.own_vel[rows] = seg.vel[agents, ts]
        f.others_pos[rows] = seg.pos[others, ts[:, None]]
        f.others_head[rows] = seg.heading[others, ts[:, None]]
        f.others_vel[rows] = seg.vel[others, ts[:, None]]
        length, width, otype = _seg_dims(seg, N)
        f.others_dim[rows] = np.stack([length[others], width[others]], axis=2)
        f.others_type[rows] = otype[others]
        f.others_valid[rows] = seg.valid[others, ts[:, None]] & omask
        xy, lane, dyn, pvalid, dslot = _seg_points(seg, P)
        f.pts_xy[rows] = xy
        f.pts_lane[rows] = lane
        f.pts_dyn[rows] = dyn
        f.pts_valid[rows] = pvalid
        if seg.dynamic_xy.shape[1]:
            tc = np.minimum(ts, seg.n_steps - 1)
            f.pts_xy[rows[:, None], np.arange(P)[dslot][None, :]] = seg.dynamic_xy[tc]
            f.pts_state[rows[:, None], np.arange(P)[dslot][None, :]] = seg.dynamic_state[tc]
    rpb = RoutePathBatch([it[3] for it in items], enc.goal_points)
    return build_observations(f, rpb, enc)


def rollout_rows(res: BeamResult, picks: list, paths: list,
                 enc: EncoderConfig) -> ObservationBatch:
    """Encode (segment b, branch s, slot, step) rows from simulated states."""
    if not picks:
        raise ValueError("empty-batch: no rollout rows")
    R = len(picks)
    N = res.pos.shape[2]
    P = max(s.roadgraph.static_points().shape[0] + s.dynamic_xy.shape[1]
            for s in res.segs)
    M = max(N - 1, 0)
    f = _alloc_frame(R, M, P)
    by_seg = {}
    for r, (b, s, slot, t) in enumerate(picks):
        by_seg.setdefault(b, []).append(r)
    for b, rows in by_seg.items():
        seg = res.segs[b]
        rows = np.array(rows)
        ss = np.array([picks[r][1] for r in rows])
        agents = np.array([res.interactive[b][picks[r][2]] for r in rows])
        ts = np.array([picks[r][3] for r in rows])
        others = np.array([[j for j in range(N) if j != a] for a in agents], dtype=int)
        f.own_pos[rows] = res.pos[b][ss, agents, ts]
        f.own_head[rows] = res.heading[b][ss, agents, ts]
        f.own_vel[rows] = res.vel[b][ss, agents, ts]
        f.others_pos[rows] = res.pos[b][ss[:, None], others, ts[:, None]]
        f.others_head[rows] = res.heading[b][ss[:, None], others, ts[:, None]]
        f.others_vel[rows] = res.vel[b][ss[:, None], others, ts[:, None]]
        length, width, otype = _seg_dims(seg, N)
        f.others_dim[rows] = np.stack([length[others], width[others]], axis=2)
        f.others_type[rows] = otype[others]
        f.others_valid[rows] = res.valid[b][ss[:, None], others, ts[:, None]]
        xy, lane, dyn, pvalid, dslot = _seg_points(seg, P)
        f.pts_xy[rows] = xy
        f.pts_lane[rows] = lane
        f.pts_dyn[rows] = dyn
        f.pts_valid[rows] = pvalid
        if seg.dynamic_xy.shape[1]:
            tc = np.minimum(ts, seg.n_steps - 1)
            f.pts_xy[rows[:, None], np.arange(P)[dslot][None, :]] = seg.dynamic_xy[tc]
            f.pts_state[rows[:, None], np.arange(P)[dslot][None, :]] = seg.dynamic_state[tc]
    rpb = RoutePathBatch(paths, enc.goal_points)
    return build_observations(f, rpb, enc)


# ------------------------------------------------------------ update rules

def goal_update(gg, opt: OptimState, obs: ObservationBatch, labels: np.ndarray,
                n_routes: np.ndarray) -> float:
    """One NLL step on the route-goal head; mask restricts to feasible routes."""
    if labels.shape[0] == 0:
        raise ValueError("empty-batch: goal update needs rows")
    ctx = GradCtx(gg.head.store)
    logits = gg.logits_ad(obs, ctx)
    mask = np.arange(nn._val(logits).shape[1])[None, :] < np.asarray(n_routes)[:, None]
    loss = nn.softmax_nll_mean(logits, labels, mask)
    nn.run_backward(loss)
    params = {k: gg.head.store.params[k] for k in gg.head.store.block("goal_gen/")}
    nn.adam_step(opt, params, {k: v for k, v in ctx.grads().items() if k in params})
    return float(loss.value)


def bc_update(policy, opt: OptimState, expert_obs: ObservationBatch,
              expert_labels: np.ndarray, distill_obs: ObservationBatch | None = None,
              distill_labels: np.ndarray | None = None,
              distill_weight: float = 1.0) -> float:
    """Action NLL on logged pairs, plus an equally weighted term on pairs
    drawn from surviving beam branches when distillation is active."""
    if expert_labels.shape[0] == 0:
        raise ValueError("empty-batch: cloning update needs rows")
    ctx = GradCtx(policy.head.store)
    loss = nn.softmax_nll_mean(policy.head_ad(expert_obs, ctx), expert_labels)
    if distill_obs is not None:
        extra = nn.softmax_nll_mean(policy.head_ad(distill_obs, ctx), distill_labels)
        loss = nn.add(loss, nn.scale(extra, distill_weight))
    nn.run_backward(loss)
    params = {k: policy.head.store.params[k] for k in policy.head.store.block("policy/")}
    nn.adam_step(opt, params, {k: v for k, v in ctx.grads().items() if k in params})
    return float(loss.value)


def discriminator_update(disc, opt: OptimState, policy_obs: ObservationBatch,
                         expert_obs: ObservationBatch) -> float:
    """Push scores up on simulated states and down on logged ones."""
    if nn._val(policy_obs.self_feat).shape[0] == 0 or \
            nn._val(expert_obs.self_feat).shape[0] == 0:
        raise ValueError("empty-batch: discriminator update needs both sides")
    ctx = GradCtx(disc.head.store)
    p_pol = disc.prob_ad(policy_obs, ctx)
    p_exp = disc.prob_ad(expert_obs, ctx)
    loss = nn.add(nn.neg(nn.mean_(nn.log(p_pol))),
                  nn.neg(nn.mean_(nn.log(nn.sub(1.0, p_exp)))))
    nn.run_backward(loss)
    params = {k: disc.head.store.params[k] for k in disc.head.store.block("disc/")}
    nn.adam_step(opt, params, {k: v for k, v in ctx.grads().items() if k in params})
    return float(loss.value)


# ---------------------------------------------- differentiable rollout

def _col(t: Tensor, k: int) -> Tensor:
    R = nn._val(t).shape[0]
    return nn.reshape(nn.take_slots(t, np.full((R, 1), k)), (R,))


def mgail_rollout_loss(segs: list, interactive: list, paths: list, policy, disc,
                       enc: EncoderConfig, horizon: int, eps: np.ndarray,
                       ctx: GradCtx):
    """Taped joint rollout; loss is the per-row sum over steps of log score.

    paths lists one RoutePath (or None) per interactive row in (segment, slot)
    order. eps must be (rows, horizon, 2); it is the only noise source, so the
    value is a deterministic function of parameters. Returns (loss tensor,
    state history arrays, count of steps with undefined heading gradient).
    """
    B = len(segs)
    dt = segs[0].step_dt
    N = max(seg.n_agents for seg in segs)
    row_b, row_agent = [], []
    for b in range(B):
        for agent in interactive[b]:
            row_b.append(b)
            row_agent.append(agent)
    row_b = np.array(row_b, dtype=int)
    row_agent = np.array(row_agent, dtype=int)
    Q = row_b.shape[0]
    if eps.shape != (Q, horizon, 2):
        raise ValueError(f"shape-error: noise must be {(Q, horizon, 2)}")
    M = max(N - 1, 0)
    others_idx = np.zeros((Q, M), dtype=int)
    for q in range(Q):
        others_idx[q] = [j for j in range(N) if j != row_agent[q]]

    # map others-slots onto taped rows; playback slots come from constants
    row_of = -np.ones((B, N), dtype=int)
    for q in range(Q):
        row_of[row_b[q], row_agent[q]] = q
    map_idx = row_of[row_b[:, None], others_idx]
    is_int = (map_idx >= 0).astype(float)
    map_idx = np.maximum(map_idx, 0)
    inter_mask = row_of >= 0

    length = np.zeros((B, N))
    width = np.zeros((B, N))
    otype = np.zeros((B, N))
    exists = np.zeros((B, N), dtype=bool)
    for b, seg in enumerate(segs):
        length[b], width[b], otype[b] = _seg_dims(seg, N)
        exists[b, :seg.n_agents] = True
    dims_const = np.stack([length[row_b[:, None], others_idx],
                           width[row_b[:, None], others_idx]], axis=2)
    type_const = otype[row_b[:, None], others_idx]

    P = max(s.roadgraph.static_points().shape[0] + s.dynamic_xy.shape[1]
            for s in segs)
    pts_xy = np.zeros((B, P, 2))
    pts_lane = np.zeros((B, P))
    pts_dyn = np.zeros((B, P))
    pts_state = np.zeros((B, P))
    pts_valid = np.zeros((B, P), dtype=bool)
    dslots = []
    for b, seg in enumerate(segs):
        xy, lane, dyn, pvalid, dslot = _seg_points(seg, P)
        pts_xy[b], pts_lane[b], pts_dyn[b], pts_valid[b] = xy, lane, dyn, pvalid
        dslots.append(dslot)

    def playback_consts(t):
        pb_pos = np.zeros((B, N, 2))
        pb_head = np.zeros((B, N))
        pb_vel = np.zeros((B, N, 2))
        pb_valid = np.zeros((B, N), dtype=bool)
        for b, seg in enumerate(segs):
            n = seg.n_agents
            tc = min(t, seg.n_steps - 1)
            pb_pos[b, :n] = seg.pos[:, tc]
            pb_head[b, :n] = seg.heading[:, tc]
            pb_vel[b, :n] = seg.vel[:, tc]
            pb_valid[b, :n] = seg.valid[:, tc]
            if seg.dynamic_xy.shape[1]:
                pts_xy[b, dslots[b]] = seg.dynamic_xy[tc]
                pts_state[b, dslots[b]] = seg.dynamic_state[tc]
            pb_pos[b][inter_mask[b]] = 0.0
            pb_head[b][inter_mask[b]] = 0.0
            pb_vel[b][inter_mask[b]] = 0.0
        o_pos = pb_pos[row_b[:, None], others_idx]
        o_head = pb_head[row_b[:, None], others_idx]
        o_vel = pb_vel[row_b[:, None], others_idx]
        o_valid = (pb_valid | inter_mask)[row_b[:, None], others_idx] \
            & exists[row_b[:, None], others_idx]
        return o_pos, o_head, o_vel, o_valid

    def frame_ad(pos_t, head_t, vel_t, t):
        o_pos, o_head, o_vel, o_valid = playback_consts(t)
        others_pos = nn.add(nn.mul(nn.take_rows(pos_t, map_idx), is_int[..., None]),
                            o_pos)
        others_head = nn.add(nn.mul(nn.take_rows(head_t, map_idx), is_int), o_head)
        others_vel = nn.add(nn.mul(nn.take_rows(vel_t, map_idx), is_int[..., None]),
                            o_vel)
        return FrameAD(own_pos=pos_t, own_head=head_t, own_vel=vel_t,
                       others_pos=others_pos, others_head=others_head,
                       others_vel=others_vel, others_dim=dims_const,
                       others_type=type_const, others_valid=o_valid,
                       pts_xy=pts_xy[row_b].copy(), pts_lane=pts_lane[row_b],
                       pts_dyn=pts_dyn[row_b], pts_state=pts_state[row_b].copy(),
                       pts_valid=pts_valid[row_b])

    rpb = RoutePathBatch(paths, enc.goal_points)
    pos_t = Tensor(np.stack([segs[b].pos[a, 0] for b, a in zip(row_b, row_agent)]))
    head_t = Tensor(np.array([segs[b].heading[a, 0] for b, a in zip(row_b, row_agent)]))
    vel_t = Tensor(np.stack([segs[b].vel[a, 0] for b, a in zip(row_b, row_agent)]))

    hist = {"pos": np.zeros((Q, horizon + 1, 2)), "heading": np.zeros((Q, horizon + 1)),
            "vel": np.zeros((Q, horizon + 1, 2))}
    hist["pos"][:, 0] = pos_t.value
    hist["heading"][:, 0] = head_t.value
    hist["vel"][:, 0] = vel_t.value

    obs = build_observations_ad(frame_ad(pos_t, head_t, vel_t, 0), rpb, enc,
                                want_disc=False)
    loss = None
    n_nondiff = 0
    for t in range(horizon):
        mean = policy.head_ad(obs, ctx)
        m0, m1 = _col(mean, 0), _col(mean, 1)
        c, s = nn.cos(head_t), nn.sin(head_t)
        disp_x = nn.add(nn.sub(nn.mul(c, m0), nn.mul(s, m1)),
                        enc.sigma * eps[:, t, 0])
        disp_y = nn.add(nn.add(nn.mul(s, m0), nn.mul(c, m1)),
                        enc.sigma * eps[:, t, 1])
        pos_t = nn.stack([nn.add(_col(pos_t, 0), disp_x),
                          nn.add(_col(pos_t, 1), disp_y)], axis=1)
        vel_t = nn.stack([nn.scale(disp_x, 1.0 / dt),
                          nn.scale(disp_y, 1.0 / dt)], axis=1)
        norm = np.hypot(disp_x.value, disp_y.value)
        moving = norm > HEADING_DISP_MIN
        n_nondiff += int((~moving).sum())
        head_t = nn.where_mask(moving, nn.arctan2(disp_y, disp_x), head_t)
        hist["pos"][:, t + 1] = pos_t.value
        hist["heading"][:, t + 1] = head_t.value
        hist["vel"][:, t + 1] = vel_t.value
        obs = build_observations_ad(frame_ad(pos_t, head_t, vel_t, t + 1), rpb, enc,
                                    want_disc=True)
        term = nn.sum_(nn.log(disc.prob_ad(obs, ctx)))
        loss = term if loss is None else nn.add(loss, term)
    loss = nn.scale(loss, 1.0 / Q)
    return loss, hist, n_nondiff


def mgail_result_from_hist(segs, interactive, goals, hist, horizon, dt) -> BeamResult:
    """Wrap a taped rollout's history as a one-branch BeamResult for reuse."""
    B = len(segs)
    N = max(seg.n_agents for seg in segs)
    pos = np.zeros((B, 1, N, horizon + 1, 2))
    head = np.zeros((B, 1, N, horizon + 1))
    vel = np.zeros((B, 1, N, horizon + 1, 2))
    valid = np.zeros((B, 1, N, horizon + 1), dtype=bool)
    for b, seg in enumerate(segs):
        n = seg.n_agents
        for t in range(horizon + 1):
            tc = min(t, seg.n_steps - 1)
            pos[b, 0, :n, t] = seg.pos[:, tc]
            head[b, 0, :n, t] = seg.heading[:, tc]
            vel[b, 0, :n, t] = seg.vel[:, tc]
            valid[b, 0, :n, t] = seg.valid[:, tc]
    q = 0
    for b in range(B):
        for agent in interactive[b]:
            pos[b, 0, agent] = hist["pos"][q]
            head[b, 0, agent] = hist["heading"][q]
            vel[b, 0, agent] = hist["vel"][q]
            valid[b, 0, agent] = True
            q += 1
    acts = np.diff(pos, axis=3)
    return BeamResult(segs, [list(ia) for ia in interactive], goals, pos, head, vel,
                      valid, acts, np.zeros((B, 1, N, horizon)),
                      np.zeros((B, 1), dtype=int), [], True, dt)


def mgail_update(policy, opt: OptimState, segs, interactive, paths, disc,
                 enc: EncoderConfig, horizon: int, eps: np.ndarray):
    """Descent step on the policy through dynamics and discriminator."""
    ctx = GradCtx(policy.head.store)
    loss, hist, n_nondiff = mgail_rollout_loss(segs, interactive, paths, policy,
                                               disc, enc, horizon, eps, ctx)
    nn.run_backward(loss)
    params = {k: policy.head.store.params[k] for k in policy.head.store.block("policy/")}
    nn.adam_step(opt, params, {k: v for k, v in ctx.grads().items() if k in params})
    return float(loss.value), hist, n_nondiff


# ------------------------------------------------------------- trainer

@dataclass
class TrainResult:
    checkpoints: list        # (step, path) pairs
    history: list            # per-step loss dicts
    config: dict


class Trainer:
    """Owns parameters, per-segment caches, and the per-step update recipe."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, out_dir: str,
                 goal_recorder=None):
        if not dataset.train:
            raise ValueError("empty-batch: dataset has no training segments")
        self.cfg = cfg
        self.out_dir = out_dir
        self.goal_recorder = goal_recorder
        n_val = min(cfg.val_segments, len(dataset.train) // 4)
        self.val_segs = dataset.train[-n_val:] if n_val else list(dataset.train)
        self.train_segs = dataset.train[:-n_val] if n_val else list(dataset.train)
        self.store = ParamStore(cfg.seed)
        self.gg, self.policy, self.disc = build_models(self.store, cfg.encoder,
                                                       cfg.continuous)
        self.opts = {"goal_gen": OptimState(lr=cfg.lr), "policy": OptimState(lr=cfg.lr),
                     "disc": OptimState(lr=cfg.lr)}
        self._contexts = {}
        t_ref = min(seg.n_steps for seg in self.train_segs)
        self.horizon = cfg.rollout_horizon if cfg.rollout_horizon else t_ref - 1

    def context(self, seg: RunSegment) -> SegmentContext:
        if seg.id not in self._contexts:
            self._contexts[seg.id] = build_segment_context(
                seg, self.cfg.n_interactive, self.cfg.encoder.max_routes)
        return self._contexts[seg.id]

    def _stream(self, *key) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.cfg.seed, spawn_key=tuple(key))
        return np.random.Generator(np.random.Philox(ss))

    def _sample_batch(self, step: int):
        gen = self._stream(_KEY_SAMPLE, step)
        idx = gen.integers(0, len(self.train_segs), size=self.cfg.batch)
        return [self.train_segs[i] for i in idx], idx.tolist()

    def _rollout_goals(self, step: int, ctxs: list, seg_keys: list):
        """Goal per (segment, slot): sampled when hierarchical, logged otherwise."""
        goals, paths, idxs = [], [], []
        if self.cfg.hierarchy:
            items = [(c.seg, a, 0, None) for c in ctxs for a in c.interactive]
            obs = reference_rows(items, self.cfg.encoder)
            n_routes = np.array([len(c.routes[a]) for c in ctxs for a in c.interactive])
            u = np.concatenate([
                self._stream(_KEY_GOAL, step, seg_keys[b]).random(len(c.interactive))
                for b, c in enumerate(ctxs)])
            picked, _ = sample_goal_rows(self.gg, obs, n_routes, u)
        r = 0
        for b, c in enumerate(ctxs):
            g_seg, p_seg, i_seg = [], [], []
            for slot, agent in enumerate(c.interactive):
                if self.cfg.hierarchy:
                    idx = int(picked[r])
                    r += 1
                    source = "sampled"
                else:
                    idx = c.gt_label[agent]
                    source = "ground-truth"
                g_seg.append(c.routes[agent][idx])
                p_seg.append(c.path(agent, idx))
                i_seg.append(idx)
                if self.goal_recorder:
                    self.goal_recorder(step, c.seg.id, agent, c.routes[agent][idx],
                                       source)
            goals.append(g_seg)
            paths.append(p_seg)
            idxs.append(i_seg)
        return goals, paths, idxs

    def _expert_minibatch(self, step: int, ctxs: list, n_pairs: int):
        """Logged (state, fitted action) pairs, goal conditioned on the true route."""
        pool = [(b, slot, t)
                for b, c in enumerate(ctxs)
                for slot in range(len(c.interactive))
                for t in range(c.seg.n_steps - 1)]
        gen = self._stream(_KEY_BC, step)
        sel = gen.integers(0, len(pool), size=n_pairs)
        items, labels = [], []
        for k in sel:
            b, slot, t = pool[k]
            c = ctxs[b]
            agent = c.interactive[slot]
            items.append((c.seg, agent, t, c.path(agent, c.gt_label[agent])))
            labels.append(c.fitted[agent][t])
        return reference_rows(items, self.cfg.encoder), np.array(labels, dtype=int)

    def _expert_disc_rows(self, step: int, ctxs: list, n: int) -> ObservationBatch:
        pool = [(b, slot, t)
                for b, c in enumerate(ctxs)
                for slot in range(len(c.interactive))
                for t in range(1, c.seg.n_steps)]
        gen = self._stream(_KEY_DISC, step, 0)
        sel = gen.integers(0, len(pool), size=n)
        items = []
        for k in sel:
            b, slot, t = pool[k]
            c = ctxs[b]
            agent = c.interactive[slot]
            items.append((c.seg, agent, t, c.path(agent, c.gt_label[agent])))
        return reference_rows(items, self.cfg.encoder)

    def _rollout_disc_rows(self, step: int, res: BeamResult, ctxs: list,
                           goal_paths: list, n: int) -> ObservationBatch:
        S = res.pos.shape[1]
        pool = [(b, s, slot, t)
                for b in range(len(res.segs))
                for s in range(S)
                for slot in range(len(res.interactive[b]))
                for t in range(1, res.n_transitions + 1)]
        gen = self._stream(_KEY_DISC, step, 1)
        sel = gen.integers(0, len(pool), size=n)
        picks = [pool[k] for k in sel]
        paths = [goal_paths[b][slot] for b, s, slot, t in picks]
        return rollout_rows(res, picks, paths, self.cfg.encoder)

    def _distill_minibatch(self, step: int, res: BeamResult, goal_paths: list,
                           n: int):
        S = res.pos.shape[1]
        pool = [(b, s, slot, t)
                for b in range(len(res.segs))
                for s in range(S)
                for slot in range(len(res.interactive[b]))
                for t in range(res.n_transitions)]
        gen = self._stream(_KEY_BC, step, 1)
        sel = gen.integers(0, len(pool), size=n)
        picks = [pool[k] for k in sel]
        paths = [goal_paths[b][slot] for b, s, slot, t in picks]
        labels = np.array([res.actions[b, s, res.interactive[b][slot], t]
                           for b, s, slot, t in picks], dtype=int)
        return rollout_rows(res, picks, paths, self.cfg.encoder), labels

    def _goal_update(self, step: int, ctxs: list) -> float:
        items = [(c.seg, a, 0, None) for c in ctxs for a in c.interactive]
        obs = reference_rows(items, self.cfg.encoder)
        labels = np.array([c.gt_label[a] for c in ctxs for a in c.interactive])
        n_routes = np.array([len(c.routes[a]) for c in ctxs for a in c.interactive])
        return goal_update(self.gg, self.opts["goal_gen"], obs, labels, n_routes)

    def train_step(self, step: int) -> dict:
        cfg = self.cfg
        segs, seg_keys = self._sample_batch(step)
        ctxs = [self.context(s) for s in segs]
        interactive = [c.interactive for c in ctxs]
        losses = {"step": step}
        losses["goal"] = self._goal_update(step, ctxs)

        if cfg.variant == "bc":
            obs, labels = self._expert_minibatch(step, ctxs, cfg.expert_pairs)
            losses["bc"] = bc_update(self.policy, self.opts["policy"], obs, labels)
            return losses

        goals, goal_paths, _ = self._rollout_goals(step, ctxs, seg_keys)
        res = None
        if cfg.uses_beam:
            beam_cfg = BeamConfig(cfg.beam_branches, cfg.prune_every, self.horizon,
                                  prune=True)
            beam_goals = [[list(goals[b]) for _ in range(cfg.beam_branches)]
                          for b in range(len(segs))]
            res = rollout_segments(segs, interactive, beam_goals, self.policy,
                                   self.disc, beam_cfg, cfg.encoder,
                                   entropy=cfg.seed,
                                   stream_key=(_KEY_ROLLOUT, step),
                                   seg_keys=seg_keys)

        if cfg.variant == "bc-ts":
            pol_rows = self._rollout_disc_rows(step, res, ctxs, goal_paths,
                                               cfg.disc_pairs)
            exp_rows = self._expert_disc_rows(step, ctxs, cfg.disc_pairs)
            losses["disc"] = discriminator_update(self.disc, self.opts["disc"],
                                                  pol_rows, exp_rows)
            obs, labels = self._expert_minibatch(step, ctxs, cfg.expert_pairs)
            if cfg.distill_weight:
                d_obs, d_labels = self._distill_minibatch(step, res, goal_paths,
                                                          cfg.distill_pairs)
                losses["bc"] = bc_update(self.policy, self.opts["policy"], obs,
                                         labels, d_obs, d_labels, cfg.distill_weight)
            else:
                losses["bc"] = bc_update(self.policy, self.opts["policy"], obs, labels)
        elif cfg.variant in ("mgail", "mgail-ts"):
            flat_paths = [p for ps in goal_paths for p in ps]
            Q = len(flat_paths)
            eps = self._stream(_KEY_NOISE, step).standard_normal((Q, self.horizon, 2))
            mg_loss, hist, n_nondiff = mgail_update(
                self.policy, self.opts["policy"], segs, interactive, flat_paths,
                self.disc, cfg.encoder, self.horizon, eps)
            losses["mgail"] = mg_loss
            losses["nondiff_steps"] = n_nondiff
            if cfg.variant == "mgail-ts":
                disc_source = res
            else:
                goals_nested = [[list(goals[b])] for b in range(len(segs))]
                disc_source = mgail_result_from_hist(segs, interactive, goals_nested,
                                                     hist, self.horizon, segs[0].step_dt)
            pol_rows = self._rollout_disc_rows(step, disc_source, ctxs, goal_paths,
                                               cfg.disc_pairs)
            exp_rows = self._expert_disc_rows(step, ctxs, cfg.disc_pairs)
            losses["disc"] = discriminator_update(self.disc, self.opts["disc"],
                                                  pol_rows, exp_rows)
        return losses

    def save(self, step: int) -> str:
        config = self.cfg.to_dict()
        config["hash"] = config_hash(self.cfg.to_dict())
        path = os.path.join(self.out_dir, f"ckpt_{step}")
        save_checkpoint(path, self.store, self.opts, step, config)
        return path

    def run(self) -> TrainResult:
        os.makedirs(self.out_dir, exist_ok=True)
        history = []
        checkpoints = []
        for step in range(1, self.cfg.steps + 1):
            history.append(self.train_step(step))
            if step % self.cfg.checkpoint_every == 0 or step == self.cfg.steps:
                checkpoints.append((step, self.save(step)))
        config = self.cfg.to_dict()
        config["hash"] = config_hash(self.cfg.to_dict())
        return TrainResult(checkpoints, history, config)


def train(cfg: TrainConfig, dataset: Dataset, out_dir: str,
          goal_recorder=None) -> TrainResult:
    """Run the full loop; returns checkpoint paths and the loss history."""
    return Trainer(cfg, dataset, out_dir, goal_recorder).run()


def select_checkpoint(checkpoint_paths: list, val_segs: list, m: int = 16,
                      workers: int = 1):
    """Pick the checkpoint minimising collision%% + offroad%% on validation.

    Ties go to the earlier checkpoint. Returns (best path, per-path table).
    """
    from . import metrics
    if not checkpoint_paths:
        raise ValueError("empty-batch: no checkpoints to select from")
    table = []
    for path in checkpoint_paths:
        report = metrics.evaluate(path, val_segs, m=m, workers=workers)
        table.append({"path": path, "collision_rate": report.collision_rate,
                      "offroad_time": report.offroad_time,
                      "score": report.collision_rate + report.offroad_time})
    scores = np.array([row["score"] for row in table])
    return checkpoint_paths[int(np.argmin(scores))], table
