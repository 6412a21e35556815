"""Observation encoding and the learned models: goal generator, goal-conditional
policy, and the discriminator.

Every spatial feature is expressed relative to the observing agent. The
builders come in two flavours with identical outputs: a plain numpy path used
inside rollouts, and a taped path whose gradients flow back to agent states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import neural as nn
from .dynamics import ContinuousAction, DiscreteAction, N_DISCRETE_ACTIONS
from .neural import Mlp, ParamStore, Tensor
from .roadgraph import Route, RoutePath, RoutePathBatch
from .scenario import RunSegment

POS_SCALE = 0.1
VEL_SCALE = 0.1
DIM_SCALE = 0.1
GOAL_SCALE = 0.02
STATE_SCALE = 0.5

OBJ_FEAT = 9      # relx, rely, relvx, relvy, cos, sin of rel heading, len, wid, type
PT_FEAT = 5       # relx, rely, is_lane, is_dyn, state
SELF_FEAT = 4     # speed, cos/sin of goal direction, lateral offset
DISC_FEAT = 12    # object and point features folded into one entry layout


@dataclass
class EncoderConfig:
    max_objects: int = 16
    max_points: int = 64
    disc_radius: float = 20.0
    goal_points: int = 16
    lookahead: float = 10.0
    enc_units: tuple = (64, 64)
    head_units: tuple = (128, 128)
    max_routes: int = 200
    sigma: float = 0.1           # m, continuous action noise scale

    def to_dict(self) -> dict:
        return {"max_objects": self.max_objects, "max_points": self.max_points,
                "disc_radius": self.disc_radius, "goal_points": self.goal_points,
                "lookahead": self.lookahead, "enc_units": list(self.enc_units),
                "head_units": list(self.head_units), "max_routes": self.max_routes,
                "sigma": self.sigma}

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        d = dict(d)
        d["enc_units"] = tuple(d["enc_units"])
        d["head_units"] = tuple(d["head_units"])
        return EncoderConfig(**d)


@dataclass
class FrameArrays:
    """Scene context for R observation rows at one simulation step."""

    own_pos: np.ndarray       # (R, 2)
    own_head: np.ndarray      # (R,)
    own_vel: np.ndarray       # (R, 2)
    others_pos: np.ndarray    # (R, M, 2)
    others_head: np.ndarray   # (R, M)
    others_vel: np.ndarray    # (R, M, 2)
    others_dim: np.ndarray    # (R, M, 2) length, width
    others_type: np.ndarray   # (R, M)
    others_valid: np.ndarray  # (R, M) bool
    pts_xy: np.ndarray        # (R, P, 2)
    pts_lane: np.ndarray      # (R, P)
    pts_dyn: np.ndarray       # (R, P)
    pts_state: np.ndarray     # (R, P)
    pts_valid: np.ndarray     # (R, P) bool


@dataclass
class ObservationBatch:
    """Encoded features for R rows; fields are numpy arrays or taped tensors."""

    self_feat: object         # (R, SELF_FEAT)
    obj_feat: object          # (R, K, OBJ_FEAT)
    obj_mask: np.ndarray      # (R, K)
    pt_feat: object           # (R, P, PT_FEAT)
    pt_mask: np.ndarray       # (R, P)
    goal_feat: object         # (R, 2 * goal_points)
    disc_feat: object         # (R, K + P, DISC_FEAT)
    disc_mask: np.ndarray     # (R, K + P)


@dataclass
class Observation:
    """Single-agent view: the row 0 slice of a batch, plus the agent pose."""

    self_feat: np.ndarray
    objects: np.ndarray
    obj_mask: np.ndarray
    points: np.ndarray
    pt_mask: np.ndarray
    goal: np.ndarray
    disc_entries: np.ndarray
    disc_mask: np.ndarray
    own_pos: np.ndarray
    own_heading: float

    def as_batch(self) -> ObservationBatch:
        return ObservationBatch(
            self.self_feat[None], self.objects[None], self.obj_mask[None],
            self.points[None], self.pt_mask[None], self.goal[None],
            self.disc_entries[None], self.disc_mask[None])


def nearest_indices(dist: np.ndarray, valid: np.ndarray, k: int):
    """Indices of the k nearest valid entries per row; ties keep lower index."""
    d = np.where(valid, dist, np.inf)
    k = min(k, d.shape[1]) if d.shape[1] else 0
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    rows = np.arange(d.shape[0])[:, None]
    mask = np.isfinite(d[rows, order])
    return order, mask, d


def build_observations(f: FrameArrays, rpb: RoutePathBatch | None, cfg: EncoderConfig,
                       want_policy: bool = True, want_disc: bool = True) -> ObservationBatch:
    """Numpy observation builder shared by rollouts and update batches."""
    R = f.own_pos.shape[0]
    c, s = np.cos(f.own_head), np.sin(f.own_head)
    speed = np.hypot(f.own_vel[:, 0], f.own_vel[:, 1])

    # objects, agent frame
    d = f.others_pos - f.own_pos[:, None, :]
    ox = c[:, None] * d[..., 0] + s[:, None] * d[..., 1]
    oy = -s[:, None] * d[..., 0] + c[:, None] * d[..., 1]
    dv = f.others_vel - f.own_vel[:, None, :]
    ovx = c[:, None] * dv[..., 0] + s[:, None] * dv[..., 1]
    ovy = -s[:, None] * dv[..., 0] + c[:, None] * dv[..., 1]
    rh = f.others_head - f.own_head[:, None]
    odist = np.hypot(d[..., 0], d[..., 1])
    oidx, omask, _ = nearest_indices(odist, f.others_valid, cfg.max_objects)
    rows = np.arange(R)[:, None]

    def pick(a):
        return a[rows, oidx]

    obj = np.stack([pick(ox) * POS_SCALE, pick(oy) * POS_SCALE,
                    pick(ovx) * VEL_SCALE, pick(ovy) * VEL_SCALE,
                    np.cos(pick(rh)), np.sin(pick(rh)),
                    pick(f.others_dim[..., 0]) * DIM_SCALE,
                    pick(f.others_dim[..., 1]) * DIM_SCALE,
                    pick(f.others_type)], axis=2)
    obj *= omask[..., None]

    # map and dynamic points, agent frame
    pd = f.pts_xy - f.own_pos[:, None, :]
    px = c[:, None] * pd[..., 0] + s[:, None] * pd[..., 1]
    py = -s[:, None] * pd[..., 0] + c[:, None] * pd[..., 1]
    pdist = np.hypot(pd[..., 0], pd[..., 1])
    pidx, pmask, _ = nearest_indices(pdist, f.pts_valid, cfg.max_points)

    def ppick(a):
        return a[rows, pidx]

    pts = np.stack([ppick(px) * POS_SCALE, ppick(py) * POS_SCALE,
                    ppick(f.pts_lane), ppick(f.pts_dyn),
                    ppick(f.pts_state) * STATE_SCALE], axis=2)
    pts *= pmask[..., None]

    # goal-dependent self features and the goal polyline
    G = cfg.goal_points
    if rpb is not None:
        arc, lateral, _ = rpb.project(f.own_pos)
        look, _, _ = rpb.point_at(arc + cfg.lookahead)
        dl = look - f.own_pos
        ang = np.arctan2(dl[:, 1], dl[:, 0]) - f.own_head
        has = rpb.has_route
        self_feat = np.stack([speed * VEL_SCALE, np.where(has, np.cos(ang), 0.0),
                              np.where(has, np.sin(ang), 0.0),
                              np.where(has, lateral * POS_SCALE, 0.0)], axis=1)
        gd = rpb.goal_pts - f.own_pos[:, None, :]
        gx = c[:, None] * gd[..., 0] + s[:, None] * gd[..., 1]
        gy = -s[:, None] * gd[..., 0] + c[:, None] * gd[..., 1]
        goal = np.stack([gx, gy], axis=2).reshape(R, 2 * G) * GOAL_SCALE
        goal *= has[:, None]
    else:
        self_feat = np.stack([speed * VEL_SCALE, np.zeros(R), np.zeros(R),
                              np.zeros(R)], axis=1)
        goal = np.zeros((R, 2 * G))

    # unified entries for the discriminator, radius limited
    if want_disc:
        zK = np.zeros_like(obj[..., 0])
        zP = np.zeros_like(pts[..., 0])
        obj_u = np.concatenate([obj[..., 0:8], np.ones_like(zK)[..., None],
                                np.zeros((R, obj.shape[1], 3))], axis=2)
        pt_u = np.concatenate([pts[..., 0:2], np.zeros((R, pts.shape[1], 6)),
                               np.zeros_like(zP)[..., None], pts[..., 2:3],
                               pts[..., 3:4], pts[..., 4:5]], axis=2)
        disc_feat = np.concatenate([obj_u, pt_u], axis=1)
        odist_sel = odist[rows, oidx] if oidx.size else np.zeros((R, 0))
        pdist_sel = pdist[rows, pidx] if pidx.size else np.zeros((R, 0))
        disc_mask = np.concatenate([omask & (odist_sel <= cfg.disc_radius),
                                    pmask & (pdist_sel <= cfg.disc_radius)], axis=1)
        disc_feat *= disc_mask[..., None]
    else:
        disc_feat = np.zeros((R, 0, DISC_FEAT))
        disc_mask = np.zeros((R, 0), dtype=bool)

    return ObservationBatch(self_feat, obj, omask, pts, pmask, goal, disc_feat, disc_mask)


# ------------------------------------------------------------- taped build

def _project_arc_op(pos: Tensor, rpb: RoutePathBatch) -> Tensor:
    """Arc length of the nearest path point; gradient is the path tangent."""
    arc, _, tangent = rpb.project(pos.value)
    out = Tensor(arc, (pos,))

    def bw(g):
        nn._accum(pos, g[:, None] * tangent)

    out.bw = bw
    return out


def _path_point_op(arc: Tensor, rpb: RoutePathBatch) -> Tensor:
    """Point on the path at an arc length; gradient moves along the tangent."""
    q, tangent, interior = rpb.point_at(arc.value)
    out = Tensor(q, (arc,))

    def bw(g):
        nn._accum(arc, np.sum(g * tangent, axis=1) * interior)

    out.bw = bw
    return out


@dataclass
class FrameAD:
    """Taped twin of FrameArrays; spatial fields are tensors."""

    own_pos: Tensor
    own_head: Tensor
    own_vel: Tensor
    others_pos: Tensor
    others_head: Tensor
    others_vel: Tensor
    others_dim: np.ndarray
    others_type: np.ndarray
    others_valid: np.ndarray
    pts_xy: np.ndarray
    pts_lane: np.ndarray
    pts_dyn: np.ndarray
    pts_state: np.ndarray
    pts_valid: np.ndarray


def build_observations_ad(f: FrameAD, rpb: RoutePathBatch | None, cfg: EncoderConfig,
                          want_policy: bool = True, want_disc: bool = True) -> ObservationBatch:
    """Taped observation builder; mirrors build_observations exactly."""
    R = f.own_pos.value.shape[0]
    rows = np.arange(R)[:, None]
    c, s = nn.cos(f.own_head), nn.sin(f.own_head)
    c1 = nn.reshape(c, (R, 1))
    s1 = nn.reshape(s, (R, 1))

    def col(t, k):
        # column k of a (R, 2) tensor as (R,)
        return nn.reshape(nn.take_slots(t, np.full((R, 1), k)), (R,))

    speed = nn.hypot(col(f.own_vel, 0), col(f.own_vel, 1))
    own_x = nn.take_slots(f.own_pos, np.zeros((R, 1), dtype=int))
    own_y = nn.take_slots(f.own_pos, np.ones((R, 1), dtype=int))

    def split_last(t):
        # (R, M, 2) tensor to two (R, M) tensors
        M = nn._val(t).shape[1]
        flat = nn.reshape(t, (R, 2 * M))
        x = nn.take_slots(flat, np.tile(np.arange(0, 2 * M, 2), (R, 1)))
        y = nn.take_slots(flat, np.tile(np.arange(1, 2 * M, 2), (R, 1)))
        return x, y

    opx, opy = split_last(f.others_pos)
    ovx_w, ovy_w = split_last(f.others_vel)
    own_vx = nn.take_slots(f.own_vel, np.zeros((R, 1), dtype=int))
    own_vy = nn.take_slots(f.own_vel, np.ones((R, 1), dtype=int))

    dx, dy = nn.sub(opx, own_x), nn.sub(opy, own_y)
    ox = nn.add(nn.mul(c1, dx), nn.mul(s1, dy))
    oy = nn.sub(nn.mul(c1, dy), nn.mul(s1, dx))
    dvx, dvy = nn.sub(ovx_w, own_vx), nn.sub(ovy_w, own_vy)
    rvx = nn.add(nn.mul(c1, dvx), nn.mul(s1, dvy))
    rvy = nn.sub(nn.mul(c1, dvy), nn.mul(s1, dvx))
    rh = nn.sub(f.others_head, nn.reshape(f.own_head, (R, 1)))
    odist = np.hypot(dx.value, dy.value)
    oidx, omask, _ = nearest_indices(odist, f.others_valid, cfg.max_objects)

    obj = nn.stack([
        nn.scale(nn.take_slots(ox, oidx), POS_SCALE),
        nn.scale(nn.take_slots(oy, oidx), POS_SCALE),
        nn.scale(nn.take_slots(rvx, oidx), VEL_SCALE),
        nn.scale(nn.take_slots(rvy, oidx), VEL_SCALE),
        nn.cos(nn.take_slots(rh, oidx)),
        nn.sin(nn.take_slots(rh, oidx)),
        Tensor(f.others_dim[rows, oidx, 0] * DIM_SCALE),
        Tensor(f.others_dim[rows, oidx, 1] * DIM_SCALE),
        Tensor(f.others_type[rows, oidx]),
    ], axis=2)
    obj = nn.mul(obj, omask[..., None].astype(float))

    pdx = nn.sub(Tensor(f.pts_xy[..., 0]), own_x)
    pdy = nn.sub(Tensor(f.pts_xy[..., 1]), own_y)
    pxr = nn.add(nn.mul(c1, pdx), nn.mul(s1, pdy))
    pyr = nn.sub(nn.mul(c1, pdy), nn.mul(s1, pdx))
    pdist = np.hypot(pdx.value, pdy.value)
    pidx, pmask, _ = nearest_indices(pdist, f.pts_valid, cfg.max_points)
    pts = nn.stack([
        nn.scale(nn.take_slots(pxr, pidx), POS_SCALE),
        nn.scale(nn.take_slots(pyr, pidx), POS_SCALE),
        Tensor(f.pts_lane[rows, pidx]),
        Tensor(f.pts_dyn[rows, pidx]),
        Tensor(f.pts_state[rows, pidx] * STATE_SCALE),
    ], axis=2)
    pts = nn.mul(pts, pmask[..., None].astype(float))

    G = cfg.goal_points
    if rpb is not None:
        has = rpb.has_route.astype(float)
        arc = _project_arc_op(f.own_pos, rpb)
        q = _path_point_op(arc, rpb)
        tangent_const = rpb.project(f.own_pos.value)[2]
        relq_x = nn.sub(col(f.own_pos, 0), col(q, 0))
        relq_y = nn.sub(col(f.own_pos, 1), col(q, 1))
        lateral = nn.sub(nn.mul(tangent_const[:, 0], relq_y),
                         nn.mul(tangent_const[:, 1], relq_x))
        look = _path_point_op(nn.add(arc, cfg.lookahead * np.ones(R)), rpb)
        dlx = nn.sub(col(look, 0), col(f.own_pos, 0))
        dly = nn.sub(col(look, 1), col(f.own_pos, 1))
        ang = nn.sub(nn.arctan2(dly, dlx), f.own_head)
        self_feat = nn.stack([
            nn.scale(speed, VEL_SCALE),
            nn.mul(nn.cos(ang), has),
            nn.mul(nn.sin(ang), has),
            nn.scale(nn.mul(lateral, has), POS_SCALE),
        ], axis=1)
        gdx = nn.sub(Tensor(rpb.goal_pts[..., 0]), own_x)
        gdy = nn.sub(Tensor(rpb.goal_pts[..., 1]), own_y)
        ggx = nn.add(nn.mul(c1, gdx), nn.mul(s1, gdy))
        ggy = nn.sub(nn.mul(c1, gdy), nn.mul(s1, gdx))
        goal = nn.scale(nn.reshape(nn.stack([ggx, ggy], axis=2), (R, 2 * G)), GOAL_SCALE)
        goal = nn.mul(goal, has[:, None])
    else:
        zero = Tensor(np.zeros(R))
        self_feat = nn.stack([nn.scale(speed, VEL_SCALE), zero, zero, zero], axis=1)
        goal = Tensor(np.zeros((R, 2 * G)))

    if want_disc:
        K = oidx.shape[1]
        P = pidx.shape[1]
        obj_u = nn.concat([
            nn.take_slots(nn.stack([
                nn.scale(ox, POS_SCALE), nn.scale(oy, POS_SCALE),
                nn.scale(rvx, VEL_SCALE), nn.scale(rvy, VEL_SCALE),
                nn.cos(rh), nn.sin(rh),
                Tensor(f.others_dim[..., 0] * DIM_SCALE),
                Tensor(f.others_dim[..., 1] * DIM_SCALE),
            ], axis=2), oidx),
            Tensor(np.concatenate([np.ones((R, K, 1)), np.zeros((R, K, 3))], axis=2)),
        ], axis=2)
        pt_u = nn.concat([
            nn.take_slots(nn.stack([nn.scale(pxr, POS_SCALE),
                                    nn.scale(pyr, POS_SCALE)], axis=2), pidx),
            Tensor(np.zeros((R, P, 7))),
            Tensor(np.stack([f.pts_lane[rows, pidx], f.pts_dyn[rows, pidx],
                             f.pts_state[rows, pidx] * STATE_SCALE], axis=2)),
        ], axis=2)
        disc_feat = nn.concat([obj_u, pt_u], axis=1)
        odist_sel = odist[rows, oidx] if oidx.size else np.zeros((R, 0))
        pdist_sel = pdist[rows, pidx] if pidx.size else np.zeros((R, 0))
        disc_mask = np.concatenate([omask & (odist_sel <= cfg.disc_radius),
                                    pmask & (pdist_sel <= cfg.disc_radius)], axis=1)
        disc_feat = nn.mul(disc_feat, disc_mask[..., None].astype(float))
    else:
        disc_feat = Tensor(np.zeros((R, 0, DISC_FEAT)))
        disc_mask = np.zeros((R, 0), dtype=bool)

    return ObservationBatch(self_feat, obj, omask, pts, pmask, goal, disc_feat, disc_mask)


# ------------------------------------------------------------------ models

def _masked_pool_np(emb: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if emb.shape[1] == 0:
        return np.zeros((emb.shape[0], emb.shape[2]))
    masked = np.where(mask[:, :, None], emb, -np.inf)
    any_valid = mask.any(axis=1)
    pooled = masked.max(axis=1)
    return np.where(any_valid[:, None], pooled, 0.0)


class GoalConditionalPolicy:
    """Action head over set-pooled object and map embeddings plus the goal."""

    def __init__(self, store: ParamStore, cfg: EncoderConfig, continuous: bool = False):
        self.cfg = cfg
        self.continuous = continuous
        e = list(cfg.enc_units)
        h = list(cfg.head_units)
        n_out = 2 if continuous else N_DISCRETE_ACTIONS
        self.obj_enc = Mlp(store, "policy/obj_enc", [OBJ_FEAT] + e)
        self.pt_enc = Mlp(store, "policy/pt_enc", [PT_FEAT] + e)
        head_in = SELF_FEAT + 2 * e[-1] + 2 * cfg.goal_points
        self.head = Mlp(store, "policy/head", [head_in] + h + [n_out], zero_final=True)

    def head_np(self, obs: ObservationBatch) -> np.ndarray:
        R = obs.self_feat.shape[0]
        obj_e = self.obj_enc.forward_np(obs.obj_feat.reshape(-1, OBJ_FEAT))
        obj_p = _masked_pool_np(obj_e.reshape(R, -1, obj_e.shape[-1]), obs.obj_mask)
        pt_e = self.pt_enc.forward_np(obs.pt_feat.reshape(-1, PT_FEAT))
        pt_p = _masked_pool_np(pt_e.reshape(R, -1, pt_e.shape[-1]), obs.pt_mask)
        x = np.concatenate([obs.self_feat, obj_p, pt_p, obs.goal_feat], axis=1)
        return self.head.forward_np(x)

    def head_ad(self, obs: ObservationBatch, ctx: nn.GradCtx) -> Tensor:
        R = nn._val(obs.self_feat).shape[0]
        K = nn._val(obs.obj_feat).shape[1]
        P = nn._val(obs.pt_feat).shape[1]
        obj_e = self.obj_enc.forward_ad(nn.reshape(obs.obj_feat, (R * K, OBJ_FEAT)), ctx)
        obj_p = nn.masked_max(nn.reshape(obj_e, (R, K, -1)), obs.obj_mask)
        pt_e = self.pt_enc.forward_ad(nn.reshape(obs.pt_feat, (R * P, PT_FEAT)), ctx)
        pt_p = nn.masked_max(nn.reshape(pt_e, (R, P, -1)), obs.pt_mask)
        x = nn.concat([obs.self_feat, obj_p, pt_p, obs.goal_feat], axis=1)
        return self.head.forward_ad(x, ctx)


class GoalGenerator:
    """Route logits from the initial state; no goal inputs by construction."""

    def __init__(self, store: ParamStore, cfg: EncoderConfig):
        self.cfg = cfg
        e = list(cfg.enc_units)
        h = list(cfg.head_units)
        self.obj_enc = Mlp(store, "goal_gen/obj_enc", [OBJ_FEAT] + e)
        self.pt_enc = Mlp(store, "goal_gen/pt_enc", [PT_FEAT] + e)
        self.head = Mlp(store, "goal_gen/head",
                        [SELF_FEAT + 2 * e[-1]] + h + [cfg.max_routes], zero_final=True)

    def logits_np(self, obs: ObservationBatch) -> np.ndarray:
        R = obs.self_feat.shape[0]
        obj_e = self.obj_enc.forward_np(obs.obj_feat.reshape(-1, OBJ_FEAT))
        obj_p = _masked_pool_np(obj_e.reshape(R, -1, obj_e.shape[-1]), obs.obj_mask)
        pt_e = self.pt_enc.forward_np(obs.pt_feat.reshape(-1, PT_FEAT))
        pt_p = _masked_pool_np(pt_e.reshape(R, -1, pt_e.shape[-1]), obs.pt_mask)
        x = np.concatenate([obs.self_feat, obj_p, pt_p], axis=1)
        return self.head.forward_np(x)

    def logits_ad(self, obs: ObservationBatch, ctx: nn.GradCtx) -> Tensor:
        R = nn._val(obs.self_feat).shape[0]
        K = nn._val(obs.obj_feat).shape[1]
        P = nn._val(obs.pt_feat).shape[1]
        obj_e = self.obj_enc.forward_ad(nn.reshape(obs.obj_feat, (R * K, OBJ_FEAT)), ctx)
        obj_p = nn.masked_max(nn.reshape(obj_e, (R, K, -1)), obs.obj_mask)
        pt_e = self.pt_enc.forward_ad(nn.reshape(obs.pt_feat, (R * P, PT_FEAT)), ctx)
        pt_p = nn.masked_max(nn.reshape(pt_e, (R, P, -1)), obs.pt_mask)
        x = nn.concat([obs.self_feat, obj_p, pt_p], axis=1)
        return self.head.forward_ad(x, ctx)


class Discriminator:
    """Realism score in (0, 1) from one pooled encoder over nearby entries."""

    PROB_EPS = 1e-6

    def __init__(self, store: ParamStore, cfg: EncoderConfig):
        self.cfg = cfg
        e = list(cfg.enc_units)
        h = list(cfg.head_units)
        self.ent_enc = Mlp(store, "disc/ent_enc", [DISC_FEAT] + e)
        self.head = Mlp(store, "disc/head",
                        [SELF_FEAT + e[-1] + 2 * cfg.goal_points] + h + [1],
                        zero_final=True)

    def prob_np(self, obs: ObservationBatch) -> np.ndarray:
        R = obs.self_feat.shape[0]
        ent = self.ent_enc.forward_np(obs.disc_feat.reshape(-1, DISC_FEAT))
        pooled = _masked_pool_np(ent.reshape(R, -1, ent.shape[-1]), obs.disc_mask)
        x = np.concatenate([obs.self_feat, pooled, obs.goal_feat], axis=1)
        logit = self.head.forward_np(x)[:, 0]
        return np.clip(1.0 / (1.0 + np.exp(-logit)), self.PROB_EPS, 1.0 - self.PROB_EPS)

    def prob_ad(self, obs: ObservationBatch, ctx: nn.GradCtx) -> Tensor:
        R = nn._val(obs.self_feat).shape[0]
        D = nn._val(obs.disc_feat).shape[1]
        ent = self.ent_enc.forward_ad(nn.reshape(obs.disc_feat, (R * D, DISC_FEAT)), ctx)
        pooled = nn.masked_max(nn.reshape(ent, (R, D, -1)), obs.disc_mask)
        x = nn.concat([obs.self_feat, pooled, obs.goal_feat], axis=1)
        logit = nn.reshape(self.head.forward_ad(x, ctx), (R,))
        return nn.clip(nn.sigmoid(logit), self.PROB_EPS, 1.0 - self.PROB_EPS)


def build_models(store: ParamStore, cfg: EncoderConfig, continuous: bool):
    """The three learned components over one parameter store."""
    return (GoalGenerator(store, cfg), GoalConditionalPolicy(store, cfg, continuous),
            Discriminator(store, cfg))


# ------------------------------------------------------------- public ops

def encode_observation(seg: RunSegment, t: int, agent: int, goal: Route | None,
                       cfg: EncoderConfig) -> Observation:
    """Observation of one logged agent at one step, optionally goal conditioned."""
    if not (0 <= agent < seg.n_agents) or not seg.valid[agent, t]:
        raise ValueError(f"invalid-agent: {agent} at step {t}")
    others = [i for i in range(seg.n_agents) if i != agent]
    frame = FrameArrays(
        own_pos=seg.pos[agent, t][None],
        own_head=seg.heading[agent, t][None],
        own_vel=seg.vel[agent, t][None],
        others_pos=seg.pos[others, t][None],
        others_head=seg.heading[others, t][None],
        others_vel=seg.vel[others, t][None],
        others_dim=np.stack([seg.length[others], seg.width[others]], axis=1)[None],
        others_type=seg.obj_type[others][None],
        others_valid=seg.valid[others, t][None],
        **_point_frame(seg, np.array([t]), 1),
    )
    rpb = None
    if goal is not None:
        rpb = RoutePathBatch([RoutePath(seg.roadgraph, goal)], cfg.goal_points)
    b = build_observations(frame, rpb, cfg)
    return Observation(b.self_feat[0], b.obj_feat[0], b.obj_mask[0], b.pt_feat[0],
                       b.pt_mask[0], b.goal_feat[0], b.disc_feat[0], b.disc_mask[0],
                       seg.pos[agent, t].copy(), float(seg.heading[agent, t]))


def _point_frame(seg: RunSegment, t_of_row: np.ndarray, n_rows: int) -> dict:
    """Static map points plus per-step dynamic records, tiled across rows."""
    static = seg.roadgraph.static_points()
    P, K = static.shape[0], seg.dynamic_xy.shape[1]
    pts_xy = np.zeros((n_rows, P + K, 2))
    pts_xy[:, :P] = static[None]
    pts_lane = np.zeros((n_rows, P + K))
    pts_lane[:, :P] = 1.0
    pts_dyn = np.zeros((n_rows, P + K))
    pts_dyn[:, P:] = 1.0
    pts_state = np.zeros((n_rows, P + K))
    if K:
        pts_xy[:, P:] = seg.dynamic_xy[t_of_row]
        pts_state[:, P:] = seg.dynamic_state[t_of_row]
    return {"pts_xy": pts_xy, "pts_lane": pts_lane, "pts_dyn": pts_dyn,
            "pts_state": pts_state, "pts_valid": np.ones((n_rows, P + K), dtype=bool)}


def discriminator_score(disc: Discriminator, obs: Observation) -> float:
    """Clamped realism probability for one observation."""
    return float(disc.prob_np(obs.as_batch())[0])


def sample_goal(gg: GoalGenerator, obs: Observation, n_routes: int,
                rng: np.random.Generator):
    """Sample a route index among the first n_routes classes; returns (idx, logp)."""
    if n_routes < 1 or n_routes > gg.cfg.max_routes:
        raise ValueError(f"no-feasible-routes: {n_routes} routes")
    logits = gg.logits_np(obs.as_batch())[0]
    mask = np.zeros(logits.shape[0], dtype=bool)
    mask[:n_routes] = True
    p = nn.softmax_probs(logits, mask)
    idx = int(rng.choice(logits.shape[0], p=p))
    return idx, float(np.log(p[idx]))


def sample_goal_rows(gg: GoalGenerator, obs: ObservationBatch, n_routes: np.ndarray,
                     u: np.ndarray):
    """Batched route sampling from pre-drawn uniforms; returns (idx, logp) per row."""
    n_routes = np.asarray(n_routes, dtype=int)
    if np.any(n_routes < 1) or np.any(n_routes > gg.cfg.max_routes):
        raise ValueError("no-feasible-routes: route count outside [1, max_routes]")
    logits = gg.logits_np(obs)
    mask = np.arange(logits.shape[1])[None, :] < n_routes[:, None]
    p = nn.softmax_probs(logits, mask)
    idx = (np.cumsum(p, axis=1) < np.asarray(u)[:, None]).sum(axis=1)
    idx = np.minimum(idx, n_routes - 1)
    rows = np.arange(logits.shape[0])
    return idx, np.log(p[rows, idx])


def sample_action_discrete(policy: GoalConditionalPolicy, obs: Observation,
                           rng: np.random.Generator):
    """Sample a grid action from the policy softmax; returns (action, logp)."""
    logits = policy.head_np(obs.as_batch())[0]
    p = nn.softmax_probs(logits)
    idx = int(rng.choice(p.shape[0], p=p))
    return DiscreteAction.from_flat(idx), float(np.log(p[idx]))


def argmax_action_discrete(policy: GoalConditionalPolicy, obs: Observation) -> DiscreteAction:
    logits = policy.head_np(obs.as_batch())[0]
    return DiscreteAction.from_flat(int(np.argmax(logits)))


def sample_action_continuous(policy: GoalConditionalPolicy, obs: Observation,
                             rng: np.random.Generator):
    """Reparameterised displacement: world-frame mean plus sigma times noise."""
    mean_local = policy.head_np(obs.as_batch())[0]
    c, s = np.cos(obs.own_heading), np.sin(obs.own_heading)
    mean_world = np.array([c * mean_local[0] - s * mean_local[1],
                           s * mean_local[0] + c * mean_local[1]])
    noise = rng.standard_normal(2)
    act = mean_world + policy.cfg.sigma * noise
    logp = float(-0.5 * np.sum(noise ** 2) - np.log(2 * np.pi * policy.cfg.sigma ** 2))
    return ContinuousAction(float(act[0]), float(act[1])), logp
