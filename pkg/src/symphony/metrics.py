"""Realism and diversity metrics plus the m-rollout evaluation protocol.

Collision and off-road rates measure realism, displacement errors measure
reference fidelity, and the curvature divergence over visited fork arms
measures whether rollouts cover the logged route distribution.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .agents import EncoderConfig, build_models, sample_goal_rows
from .beam import BeamConfig, BeamResult, rollout_segments
from .dynamics import obb_overlap_many
from .neural import load_checkpoint
from .roadgraph import (Roadgraph, RoutePath, branching_regions, enumerate_routes,
                        nearest_segment, route_bend_total, segment_curvature)
from .scenario import RunSegment, select_interactive
from .training import reference_rows

REPORT_SCHEMA = 1
OFFROAD_PERCENT_SCALE = 100.0


# ------------------------------------------------------------ core metrics

def collision_mask(res: BeamResult) -> np.ndarray:
    """(B, S) bool: any step where an interactive box hits any other box."""
    B, S, N, T1, _ = res.pos.shape
    out = np.zeros((B, S), dtype=bool)
    for b, seg in enumerate(res.segs):
        n = seg.n_agents
        length = np.zeros(N)
        width = np.zeros(N)
        length[:n] = seg.length
        width[:n] = seg.width
        pb, hb, vb = res.pos[b], res.heading[b], res.valid[b]
        for a in res.interactive[b]:
            js = np.array([j for j in range(n) if j != a], dtype=int)
            if js.size == 0:
                continue
            pj, hj, vj = pb[:, js], hb[:, js], vb[:, js]
            hit = obb_overlap_many(
                pb[:, a, :, 0][:, None, :], pb[:, a, :, 1][:, None, :],
                hb[:, a][:, None, :], length[a], width[a],
                pj[..., 0], pj[..., 1], hj,
                length[js][None, :, None], width[js][None, :, None])
            hit &= vb[:, a][:, None, :] & vj
            out[b] |= hit.any(axis=(1, 2))
    return out


def collision_rate(results: list[BeamResult]) -> float:
    """Percent of (segment, rollout) pairs containing at least one collision."""
    masks = [collision_mask(r) for r in results]
    total = sum(m.size for m in masks)
    if total == 0:
        raise ValueError("empty-batch: no rollouts to score")
    return 100.0 * sum(int(m.sum()) for m in masks) / total


def offroad_counts(res: BeamResult) -> tuple[int, int]:
    """(off, total) over (rollout, interactive agent, simulated step) samples."""
    off = total = 0
    for b, seg in enumerate(res.segs):
        rg = seg.roadgraph
        for a in res.interactive[b]:
            pts = res.pos[b, :, a, 1:, :].reshape(-1, 2)
            _, _, dist = rg.nearest_edges(pts)
            off += int((dist > rg.lane_half_width).sum())
            total += pts.shape[0]
    return off, total


def offroad_time(results: list[BeamResult]) -> float:
    """Percent of simulated interactive-agent steps spent off the road."""
    off = total = 0
    for r in results:
        o, t = offroad_counts(r)
        off += o
        total += t
    if total == 0:
        raise ValueError("empty-batch: no rollouts to score")
    return OFFROAD_PERCENT_SCALE * off / total


def scene_ade(res: BeamResult, b: int) -> np.ndarray:
    """(S,) mean displacement of interactive agents vs the reference log."""
    seg = res.segs[b]
    inter = np.array(res.interactive[b], dtype=int)
    H = res.n_transitions
    sim = res.pos[b][:, inter, 1:H + 1, :]
    ref = seg.pos[inter, 1:H + 1, :][None]
    d = np.linalg.norm(sim - ref, axis=3)
    return d.mean(axis=(1, 2))


def ade(results: list[BeamResult]) -> float:
    """Mean over segments of the rollout-averaged scene displacement error."""
    vals = [scene_ade(r, b).mean() for r in results for b in range(len(r.segs))]
    if not vals:
        raise ValueError("empty-batch: no rollouts to score")
    return float(np.mean(vals))


def min_sade(results: list[BeamResult]) -> float:
    """Mean over segments of the best joint rollout's scene displacement error."""
    vals = [scene_ade(r, b).min() for r in results for b in range(len(r.segs))]
    if not vals:
        raise ValueError("empty-batch: no rollouts to score")
    return float(np.mean(vals))


def visited_region_curvatures(rg: Roadgraph, pos: np.ndarray,
                              valid: np.ndarray | None = None) -> list[float]:
    """One curvature sample per fork arm this trajectory enters.

    pos is (T, 2) for a single agent; a fork arm counts once no matter how
    many steps fall inside it.
    """
    regions = branching_regions(rg)
    if not regions:
        return []
    pts = np.asarray(pos, dtype=float)
    if valid is not None:
        pts = pts[np.asarray(valid, dtype=bool)]
    if pts.shape[0] == 0:
        return []
    seg_idx, _, _ = rg.nearest_edges(pts)
    hit_ids = {rg.ids[i] for i in set(int(j) for j in seg_idx)}
    return [segment_curvature(rg.segments[sid]) for sid in sorted(hit_ids & regions)]


def curvature_histogram(values) -> tuple[np.ndarray, bool]:
    """201-bin probability vector on [-1, 1]; uniform (flagged) when empty."""
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        return np.full(201, 1.0 / 201), True
    v = np.clip(values, -1.0, 1.0)
    bins = np.clip(np.floor((v + 1.005) / 0.01).astype(int), 0, 200)
    hist = np.bincount(bins, minlength=201).astype(float)
    return hist / hist.sum(), False


def _entropy2(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def curvature_jsd(policy_values, reference_values) -> tuple[float, bool]:
    """Base-2 Jensen-Shannon divergence between binned curvature samples."""
    p, ep = curvature_histogram(policy_values)
    q, eq = curvature_histogram(reference_values)
    m = 0.5 * (p + q)
    jsd = _entropy2(m) - 0.5 * (_entropy2(p) + _entropy2(q))
    return float(max(jsd, 0.0)), ep or eq


def reference_result(seg: RunSegment, interactive: list) -> BeamResult:
    """The logged segment itself viewed as a single one-branch rollout."""
    N, T = seg.n_agents, seg.n_steps
    return BeamResult([seg], [list(interactive)], [[[None] * len(interactive)]],
                      seg.pos[None, None].copy(), seg.heading[None, None].copy(),
                      seg.vel[None, None].copy(), seg.valid[None, None].copy(),
                      np.zeros((1, 1, N, T - 1), dtype=int),
                      np.zeros((1, 1, N, T - 1)), np.zeros((1, 1), dtype=int),
                      [], False, seg.step_dt)


# ------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    collision_rate: float
    offroad_time: float
    ade: float
    min_sade: float
    curvature_jsd: float
    empty_histogram: bool
    m: int
    beam: bool
    seed: int
    config: dict
    per_segment: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA,
                "collision_rate": self.collision_rate,
                "offroad_time": self.offroad_time,
                "ade": self.ade, "min_sade": self.min_sade,
                "curvature_jsd": self.curvature_jsd,
                "empty_histogram": self.empty_histogram,
                "m": self.m, "beam": self.beam, "seed": self.seed,
                "config": self.config, "per_segment": self.per_segment}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def load_models(ckpt_path: str):
    """(goal generator, policy, discriminator, encoder, config) off a checkpoint."""
    store, _, _, config = load_checkpoint(ckpt_path)
    enc = EncoderConfig.from_dict(config["encoder"])
    gg, policy, disc = build_models(ParamStoreView(store), enc,
                                    continuous=config["variant"].startswith("mgail"))
    return gg, policy, disc, enc, config


def eval_goals(seg: RunSegment, interactive, gg, enc: EncoderConfig,
               hierarchy: bool, S: int, shared: bool, seed: int, seg_idx: int):
    """Goals per (branch, slot): generator samples or straightest continuation."""
    routes = {}
    for agent in interactive:
        start = nearest_segment(seg.roadgraph, seg.pos[agent, 0]).segment_id
        routes[agent] = enumerate_routes(seg.roadgraph, start,
                                         max_routes=enc.max_routes)
        if not routes[agent]:
            raise ValueError(f"no-feasible-routes: agent {agent}")
    n_slots = len(interactive)
    if not hierarchy:
        picks = []
        for agent in interactive:
            bends = [route_bend_total(RoutePath(seg.roadgraph, r))
                     for r in routes[agent]]
            picks.append(routes[agent][int(np.argmin(bends))])
        return [list(picks) for _ in range(S)], routes
    gen = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=seed, spawn_key=(seg_idx, 0))))
    rows = 1 if shared else S
    u = gen.random((rows, n_slots))
    items = [(seg, a, 0, None) for a in interactive]
    obs = reference_rows(items * rows, enc)
    n_routes = np.array([len(routes[a]) for a in interactive] * rows)
    idx, _ = sample_goal_rows(gg, obs, n_routes, u.reshape(-1))
    idx = idx.reshape(rows, n_slots)
    out = []
    for s in range(S):
        r = 0 if shared else s
        out.append([routes[a][int(idx[r, k])] for k, a in enumerate(interactive)])
    return out, routes


def _eval_segment(args):
    (seg, seg_idx, gg, policy, disc, enc, hierarchy, m, use_beam, prune_every,
     seed, n_interactive) = args
    interactive = select_interactive(seg, n_interactive)
    goals, _ = eval_goals(seg, interactive, gg, enc, hierarchy, m,
                          shared=use_beam, seed=seed, seg_idx=seg_idx)
    cfg = BeamConfig(m, prune_every, seg.n_steps - 1, prune=use_beam)
    res = rollout_segments([seg], [interactive], [goals], policy, disc, cfg, enc,
                           entropy=seed, stream_key=(), seg_keys=[seg_idx],
                           score_states=use_beam)
    col = collision_mask(res)[0]
    off, tot = offroad_counts(res)
    sade = scene_ade(res, 0)
    pol_curv = []
    for s in range(m):
        for a in interactive:
            pol_curv += visited_region_curvatures(seg.roadgraph, res.pos[0, s, a])
    ref_curv = []
    for a in interactive:
        ref_curv += visited_region_curvatures(seg.roadgraph, seg.pos[a],
                                              seg.valid[a])
    return {"id": seg.id, "collisions": int(col.sum()), "rollouts": int(m),
            "offroad": [int(off), int(tot)],
            "ade": float(sade.mean()), "min_sade": float(sade.min()),
            "policy_curvatures": [round(float(c), 12) for c in pol_curv],
            "reference_curvatures": [round(float(c), 12) for c in ref_curv]}


def evaluate(ckpt_path: str, segments: list[RunSegment], m: int = 16,
             beam: bool | None = None, seed: int = 0, workers: int = 1,
             n_interactive: int | None = None, out: str | None = None) -> EvalReport:
    """Score a checkpoint over test segments with m rollouts per segment.

    Tree-search variants run one m-branch pruned beam per segment and treat
    the surviving branches as the rollout set; other variants run m
    independent unpruned rollouts with independently sampled goals. Work is
    split one segment per task, so the worker count cannot change any
    result.
    """
    if not segments:
        raise ValueError("empty-batch: no segments to evaluate")
    gg, policy, disc, enc, config = load_models(ckpt_path)
    if beam is None:
        beam = config["variant"].endswith("-ts")
    hierarchy = bool(config.get("hierarchy", True))
    if n_interactive is None:
        n_interactive = int(config.get("n_interactive", 2))
    prune_every = int(config.get("prune_every", 10))
    tasks = [(seg, i, gg, policy, disc, enc, hierarchy, m, beam, prune_every,
              seed, n_interactive) for i, seg in enumerate(segments)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_eval_segment, tasks))
    else:
        rows = [_eval_segment(t) for t in tasks]

    n_pairs = sum(r["rollouts"] for r in rows)
    collisions = sum(r["collisions"] for r in rows)
    off = sum(r["offroad"][0] for r in rows)
    tot = sum(r["offroad"][1] for r in rows)
    ade_v = float(np.mean([r["ade"] for r in rows]))
    msade_v = float(np.mean([r["min_sade"] for r in rows]))
    if msade_v > ade_v + 1e-12:
        raise AssertionError("min over rollouts exceeded the mean")
    pol = [c for r in rows for c in r["policy_curvatures"]]
    ref = [c for r in rows for c in r["reference_curvatures"]]
    jsd, empty = curvature_jsd(pol, ref)
    report = EvalReport(100.0 * collisions / n_pairs,
                        OFFROAD_PERCENT_SCALE * off / tot if tot else 0.0,
                        ade_v, msade_v, jsd, empty, m, bool(beam), seed,
                        config, rows)
    if out:
        os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
        with open(out, "w") as fh:
            fh.write(report.to_json())
    return report


class ParamStoreView:
    """Adapter so loaded parameter dicts satisfy the model constructors."""

    def __init__(self, store):
        self.params = store.params

    def create(self, name, shape, init="he", fan_in=None):
        if name not in self.params:
            raise ValueError(f"shape-error: checkpoint missing {name}")
        if tuple(self.params[name].shape) != tuple(shape):
            raise ValueError(f"shape-error: {name} expected {shape}")
        return self.params[name]

    def block(self, prefix):
        return sorted(n for n in self.params if n.startswith(prefix))
