"""End-to-end acceptance gate.

Each test prints one [PASS]/[FAIL] line for its criterion. The training
ladder (criterion 4) trains three full 5000-step variants on one CPU core
and takes most of the file's runtime.
"""

import time

import numpy as np
import pytest
import shapely.geometry as sgeom

import symphony.neural as nn
from symphony.agents import EncoderConfig, build_models
from symphony.beam import aggregate_scores, prune_and_tile, prune_order, Branch, branch_stream
from symphony.dynamics import (ContinuousAction, jacobian_continuous, AgentState,
                               step_continuous)
from symphony.metrics import (ade, collision_rate, curvature_jsd, evaluate,
                              load_models, min_sade, offroad_time,
                              reference_result)
from symphony.neural import GradCtx, ParamStore, load_checkpoint
from symphony.scenario import RunSegment, generate_dataset, generate_world
from symphony.training import (TrainConfig, Trainer, mgail_rollout_loss,
                               reference_rows, select_checkpoint)

ENC = EncoderConfig(max_points=32)


def check(ok, name, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}"
    if detail:
        line += f"  {detail}"
    print(line)
    assert ok, line


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


# ----------------------------------------------------- criterion 1: beam

def test_criterion_1_beam_mechanics():
    rng = np.random.default_rng(100)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        S = int(rng.choice([2, 4, 16]))
        B = int(rng.integers(1, 4))
        NI = int(rng.integers(0, 4))
        Tp = int(rng.integers(1, 12))
        win = rng.normal(size=(B, NI, Tp, S))
        if trial % 3 == 0:
            win = np.round(win, 1)  # force score ties
        got = aggregate_scores(win, Tp)
        for b in range(B):
            for s in range(S):
                want = 0.0
                for i in range(NI):
                    best = -np.inf
                    for t in range(Tp):
                        best = max(best, win[b, i, t, s])
                    want += best
                worst = max(worst, abs(got[b, s] - want))
            survivors, order = prune_order(got[b])
            ranked = sorted(range(S), key=lambda i: (got[b, i], i))
            want_surv = sorted(ranked[: S // 2])
            assert survivors.tolist() == want_surv
            assert order.tolist() == want_surv + want_surv
            branches = [Branch(s, branch_stream(0, (b, 1 + s))) for s in range(S)]
            tiled = prune_and_tile(branches, got[b], lambda lin: branch_stream(0, (b, 1 + lin)),
                                   next_lineage=S)
            assert [x.lineage for x in tiled] == want_surv + list(range(S, S + S // 2))
    dt = time.perf_counter() - t0
    check(worst <= 1e-12 and dt < 10.0, "criterion-1 beam mechanics",
          f"100 trials, max aggregate err {worst:.1e}, {dt:.1f}s")


# ------------------------------------------------- criterion 2: gradients

def _fd_check(store, names_and_idx, loss_fn, h, tol):
    """Central finite differences on selected parameter entries."""
    ctx = GradCtx(store)
    loss = loss_fn(ctx)
    nn.run_backward(loss)
    grads = ctx.grads()
    worst = 0.0
    for name, idx in names_and_idx:
        an = grads[name][idx]
        keep = store.params[name][idx]
        store.params[name][idx] = keep + h
        up = loss_fn(GradCtx(store)).value
        store.params[name][idx] = keep - h
        dn = loss_fn(GradCtx(store)).value
        store.params[name][idx] = keep
        fd = (up - dn) / (2 * h)
        worst = max(worst, rel_err(float(an), float(fd)))
    assert worst < tol, f"{worst:.2e} >= {tol}"
    return worst


def _argmax_entry(arr):
    return np.unravel_index(np.argmax(np.abs(arr)), arr.shape)


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)

    # mlp + masked pooling + softmax-nll + bce against central differences
    store = ParamStore(7)
    mlp = nn.Mlp(store, "m", [6, 8, 5], zero_final=False)
    x = rng.normal(size=(4, 6))
    w_out = rng.normal(size=(4, 5))
    names = [(n, _argmax_entry(store.params[n])) for n in store.block("m/")]

    def mlp_loss(ctx):
        return nn.sum_(nn.mul(mlp.forward_ad(nn.Tensor(x), ctx), nn.Tensor(w_out)))

    e_mlp = _fd_check(store, names, mlp_loss, 1e-5, 1e-5)

    slots = rng.normal(size=(3, 5, 4))
    mask = rng.random((3, 5)) > 0.3
    mask[0] = False
    mask[1, 2] = mask[2, 0] = True
    w_pool = rng.normal(size=(3, 4))
    store.create("pool/x", slots.shape, init="zeros")
    store.params["pool/x"][:] = slots

    def pool_loss(ctx):
        return nn.sum_(nn.mul(nn.masked_max(ctx.leaf("pool/x"), mask), nn.Tensor(w_pool)))

    e_pool = _fd_check(store, [("pool/x", (1, 2, 3)), ("pool/x", (2, 0, 1))],
                       pool_loss, 1e-5, 1e-5)

    logits = rng.normal(size=(6, 9))
    labels = rng.integers(0, 9, size=6)
    store.create("nll/x", logits.shape, init="zeros")
    store.params["nll/x"][:] = logits

    def nll_loss(ctx):
        return nn.softmax_nll_mean(ctx.leaf("nll/x"), labels)

    e_nll = _fd_check(store, [("nll/x", (0, 3)), ("nll/x", (5, 8))],
                      nll_loss, 1e-5, 1e-5)

    probs = rng.uniform(0.05, 0.95, size=(8,))
    targets = rng.integers(0, 2, size=8).astype(float)
    _, bgrad = nn.bce_loss(probs, targets)
    e_bce = 0.0
    for i in range(8):
        keep = probs[i]
        probs[i] = keep + 1e-5
        up, _ = nn.bce_loss(probs, targets)
        probs[i] = keep - 1e-5
        dn, _ = nn.bce_loss(probs, targets)
        probs[i] = keep
        e_bce = max(e_bce, rel_err(bgrad[i], (up - dn) / 2e-5))
    assert e_bce < 1e-5

    # dynamics jacobian against central differences
    worst_jac = 0.0
    for _ in range(25):
        state = AgentState(rng.normal(size=2) * 20, rng.uniform(-np.pi, np.pi),
                           rng.normal(size=2) * 5)
        act = ContinuousAction(*(rng.normal(size=2) * 2))
        if np.hypot(act.dx, act.dy) < 0.06:
            act = ContinuousAction(0.5, 0.3)
        jac = jacobian_continuous(state, act, 0.2)
        assert jac.heading_defined
        J = jac.matrix()
        h = 1e-5
        for k in range(2):
            d = [0.0, 0.0]
            d[k] = h
            up = step_continuous(state, ContinuousAction(act.dx + d[0], act.dy + d[1]), 0.2)
            dn = step_continuous(state, ContinuousAction(act.dx - d[0], act.dy - d[1]), 0.2)
            fd = np.concatenate([
                (up.position - dn.position) / (2 * h),
                (up.velocity - dn.velocity) / (2 * h),
                [(up.heading - dn.heading) / (2 * h)]])
            for row in range(5):
                worst_jac = max(worst_jac, rel_err(J[row, k], fd[row]))
    assert worst_jac < 1e-6

    # rollout gradients through the differentiable dynamics
    ds = generate_dataset("fork", 2, 1, 3, 16, seed=9, route_weights=(0.7, 0.3))
    seg = ds.train[0]
    from symphony.training import build_segment_context
    ctx_seg = build_segment_context(seg, 2, 200)
    paths = [ctx_seg.path(a, ctx_seg.gt_label[a]) for a in ctx_seg.interactive]
    store2 = ParamStore(3)
    _, policy, disc = build_models(store2, ENC, continuous=True)
    prng = np.random.default_rng(11)
    for name in store2.params:
        store2.params[name][:] = prng.normal(size=store2.params[name].shape) * 0.15
    fd_params = ("policy/head/w1", "policy/obj_enc/w0", "disc/head/w1",
                 "disc/ent_enc/w0", "policy/pt_enc/w0")
    for name in fd_params:
        assert name in store2.params, name
    worst_mg = {}
    for H, tol in ((1, 1e-4), (10, 1e-3)):
        Q = len(paths)
        eps = np.random.default_rng(100 + H).normal(size=(Q, H, 2)) + 1.0

        def mg_loss(ctx):
            loss, _, _ = mgail_rollout_loss([seg], [ctx_seg.interactive], paths,
                                            policy, disc, ENC, H, eps, ctx)
            return loss

        # stay clear of the heading hold threshold so +-h cannot flip branches
        _, hist, _ = mgail_rollout_loss([seg], [ctx_seg.interactive], paths,
                                        policy, disc, ENC, H, eps, GradCtx(store2))
        disp = np.diff(hist["pos"], axis=1)
        margin = np.abs(np.hypot(disp[..., 0], disp[..., 1]) - 0.05).min()
        assert margin > 1e-3, f"displacement margin {margin:.2e}"

        gctx = GradCtx(store2)
        loss = mg_loss(gctx)
        nn.run_backward(loss)
        grads = gctx.grads()
        picks = [(n, _argmax_entry(grads[n])) for n in fd_params]
        worst = 0.0
        for name, idx in picks:
            an = grads[name][idx]
            keep = store2.params[name][idx]
            store2.params[name][idx] = keep + 1e-5
            up = mg_loss(GradCtx(store2)).value
            store2.params[name][idx] = keep - 1e-5
            dn = mg_loss(GradCtx(store2)).value
            store2.params[name][idx] = keep
            fd = (up - dn) / 2e-5
            worst = max(worst, rel_err(float(an), float(fd)))
        assert worst < tol, f"{H}-step rollout gradient rel err {worst:.2e}"
        worst_mg[H] = worst

    dt = time.perf_counter() - t0
    check(dt < 60.0, "criterion-2 gradient suite",
          f"mlp {e_mlp:.1e} pool {e_pool:.1e} nll {e_nll:.1e} bce {e_bce:.1e} "
          f"jac {worst_jac:.1e} mgail1 {worst_mg[1]:.1e} mgail10 {worst_mg[10]:.1e} "
          f"{dt:.1f}s")


# --------------------------------------------------- criterion 3: metrics

def _random_scene(rng, k):
    kind = "fork" if k % 2 else "straight"
    rg = generate_world(kind)
    T, N = 8, 3
    S = int(rng.integers(1, 5))
    pts = rg.static_points()
    pos = np.zeros((N, T, 2))
    heading = rng.uniform(-np.pi, np.pi, size=(N, T))
    vel = rng.normal(size=(N, T, 2))
    valid = np.ones((N, T), dtype=bool)
    for a in range(N):
        base = pts[rng.integers(0, pts.shape[0])]
        pos[a] = base + rng.normal(scale=3.0, size=(T, 2))
    valid[2] = rng.random(T) > 0.3
    seg = RunSegment(id=f"mini-{k}", roadgraph=rg, pos=pos, heading=heading,
                     vel=vel, valid=valid, length=np.full(N, 4.5),
                     width=np.full(N, 2.0), obj_type=np.zeros(N),
                     dynamic_xy=np.zeros((T, 0, 2)), dynamic_state=np.zeros((T, 0)),
                     ego_index=0, step_dt=0.2)
    sim_pos = pos[None].repeat(S, axis=0) + rng.normal(scale=2.0, size=(S, N, T, 2))
    sim_head = heading[None].repeat(S, axis=0) + rng.normal(scale=0.3, size=(S, N, T))
    sim_valid = valid[None].repeat(S, axis=0)
    from symphony.beam import BeamResult
    return BeamResult([seg], [[0, 1]], [[[None, None]] * S], sim_pos[None],
                      sim_head[None], vel[None, None].repeat(S, axis=1),
                      sim_valid[None], np.zeros((1, S, N, T - 1), dtype=int),
                      np.zeros((1, S, N, T - 1)), np.zeros((1, S), dtype=int),
                      [], False, 0.2)


def _box(p, h, length, width):
    c, s = np.cos(h), np.sin(h)
    dx, dy = length / 2, width / 2
    corners = [(dx, dy), (dx, -dy), (-dx, -dy), (-dx, dy)]
    return sgeom.Polygon([(p[0] + c * x - s * y, p[1] + s * x + c * y)
                          for x, y in corners])


def test_criterion_3_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(31)
    scenes = [_random_scene(rng, k) for k in range(50)]

    worst = 0.0
    # collisions against shapely polygon intersection
    hits = pairs = 0
    for res in scenes:
        seg = res.segs[0]
        S, N, T = res.pos.shape[1], seg.n_agents, seg.n_steps
        for s in range(S):
            pairs += 1
            found = False
            for a in res.interactive[0]:
                for j in range(N):
                    if j == a or found:
                        continue
                    for t in range(T):
                        if not (res.valid[0, s, a, t] and res.valid[0, s, j, t]):
                            continue
                        ba = _box(res.pos[0, s, a, t], res.heading[0, s, a, t],
                                  seg.length[a], seg.width[a])
                        bj = _box(res.pos[0, s, j, t], res.heading[0, s, j, t],
                                  seg.length[j], seg.width[j])
                        if ba.intersects(bj):
                            found = True
                            break
            hits += int(found)
    want_coll = 100.0 * hits / pairs
    got_coll = collision_rate(scenes)
    worst = max(worst, abs(got_coll - want_coll))
    assert hits > 0

    # offroad against shapely distance to the lane polylines
    off = tot = 0
    for res in scenes:
        seg = res.segs[0]
        lines = [sgeom.LineString(s2.polyline) for s2 in seg.roadgraph.segments.values()]
        for a in res.interactive[0]:
            for s in range(res.pos.shape[1]):
                for t in range(1, seg.n_steps):
                    p = sgeom.Point(res.pos[0, s, a, t])
                    d = min(ln.distance(p) for ln in lines)
                    off += int(d > seg.roadgraph.lane_half_width)
                    tot += 1
    want_off = 100.0 * off / tot
    worst = max(worst, abs(offroad_time(scenes) - want_off))
    assert off > 0

    # displacement errors against the triple loop
    vals_mean, vals_min = [], []
    for res in scenes:
        seg = res.segs[0]
        S = res.pos.shape[1]
        per = np.zeros(S)
        for s in range(S):
            ds = []
            for a in res.interactive[0]:
                for t in range(1, seg.n_steps):
                    ds.append(np.hypot(*(res.pos[0, s, a, t] - seg.pos[a, t])))
            per[s] = np.mean(ds)
        vals_mean.append(per.mean())
        vals_min.append(per.min())
    worst = max(worst, abs(ade(scenes) - np.mean(vals_mean)))
    worst = max(worst, abs(min_sade(scenes) - np.mean(vals_min)))

    # one rollout per scene makes the best and the mean identical
    singles = [reference_result(r.segs[0], r.interactive[0]) for r in scenes[:10]]
    bit_equal = min_sade(singles) == ade(singles)

    j_same, _ = curvature_jsd([0.1, -0.2, 0.3], [0.1, -0.2, 0.3])
    j_disj, _ = curvature_jsd([-0.4] * 5, [0.4] * 9)
    rnd = rng.normal(scale=0.2, size=40)
    j_rand, _ = curvature_jsd(rnd, rng.normal(scale=0.2, size=30))
    jsd_ok = (abs(j_same) <= 1e-12 and abs(j_disj - 1.0) <= 1e-12
              and 0.0 <= j_rand <= 1.0)

    dt = time.perf_counter() - t0
    check(worst <= 1e-12 and bit_equal and jsd_ok and dt < 30.0,
          "criterion-3 metric oracles",
          f"50 scenes, max err {worst:.1e}, minSADE==ADE {bit_equal}, "
          f"jsd bounds ok, {dt:.1f}s")


# --------------------------------------- criteria 4 + 5: training ladder

LADDER_STEPS = 5000


@pytest.fixture(scope="session")
def accept_ds():
    return generate_dataset("fork", 200, 60, 3, 50, seed=0,
                            route_weights=(0.7, 0.3))


@pytest.fixture(scope="session")
def ladder(accept_ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("ladder")
    runs = {}
    total = 0.0
    for name, variant, hier in (("bc", "bc", True), ("bc-ts", "bc-ts", False),
                                ("bc-ts-h", "bc-ts", True)):
        cfg = TrainConfig(variant=variant, hierarchy=hier, steps=LADDER_STEPS,
                          batch=8, checkpoint_every=2000, val_segments=32,
                          encoder=ENC, seed=0)
        t0 = time.perf_counter()
        trainer = Trainer(cfg, accept_ds, str(out / name))
        res = trainer.run()
        best, _ = select_checkpoint([p for _, p in res.checkpoints],
                                    trainer.val_segs, m=16)
        t1 = time.perf_counter()
        report = evaluate(best, accept_ds.test, m=16, seed=0, workers=1)
        t2 = time.perf_counter()
        total += t2 - t0
        runs[name] = {"best": best, "final": res.checkpoints[-1][1],
                      "report": report, "train_s": t1 - t0, "eval_s": t2 - t1}
        print(f"ladder {name}: train+select {t1 - t0:.0f}s eval {t2 - t1:.0f}s "
              f"collision={report.collision_rate:.3f}% "
              f"jsd={report.curvature_jsd:.4f}")
    runs["total_s"] = total
    return runs


def test_criterion_4_training_ladder(ladder):
    bc = ladder["bc"]["report"]
    ts = ladder["bc-ts"]["report"]
    tsh = ladder["bc-ts-h"]["report"]
    coll_ok = ts.collision_rate <= 0.5 * bc.collision_rate
    jsd_up = ts.curvature_jsd >= bc.curvature_jsd
    jsd_down = tsh.curvature_jsd <= ts.curvature_jsd
    time_ok = ladder["total_s"] < 7200.0
    check(coll_ok and jsd_up and jsd_down and time_ok,
          "criterion-4 training ladder",
          f"collision bc={bc.collision_rate:.3f}% ts={ts.collision_rate:.3f}% "
          f"(halved: {coll_ok}); jsd bc={bc.curvature_jsd:.4f} "
          f"ts={ts.curvature_jsd:.4f} ts+h={tsh.curvature_jsd:.4f}; "
          f"{ladder['total_s']:.0f}s")


def test_criterion_5_goal_marginals(ladder, accept_ds):
    gg, _, _, enc, _ = load_models(ladder["bc"]["final"])
    from symphony.training import build_segment_context
    probs = []
    for seg in accept_ds.train:
        ctx = build_segment_context(seg, 2, enc.max_routes)
        items = [(seg, a, 0, None) for a in ctx.interactive]
        obs = reference_rows(items, enc)
        logits = gg.logits_np(obs)
        for r, a in enumerate(ctx.interactive):
            n = len(ctx.routes[a])
            if n != 2:
                continue
            mask = np.zeros(logits.shape[1], dtype=bool)
            mask[:n] = True
            probs.append(nn.softmax_probs(logits[r], mask)[:2])
    marg = np.array(probs).mean(axis=0)
    ok = abs(marg[0] - 0.7) <= 0.05 and abs(marg[1] - 0.3) <= 0.05
    check(ok, "criterion-5 goal marginals",
          f"mean p(route) = ({marg[0]:.3f}, {marg[1]:.3f}) vs (0.7, 0.3) +-0.05 "
          f"over {len(probs)} rows")


# ------------------------------------------------ criterion 6: determinism

def test_criterion_6_bitwise_determinism(accept_ds, tmp_path):
    cfg = TrainConfig(variant="bc-ts", steps=40, batch=4, checkpoint_every=20,
                      val_segments=8, encoder=ENC, seed=0)
    paths = []
    for run in ("a", "b"):
        trainer = Trainer(cfg, accept_ds, str(tmp_path / run))
        res = trainer.run()
        paths.append([p for _, p in res.checkpoints])
    same = True
    for pa, pb in zip(*paths):
        sa, oa, st_a, cf_a = load_checkpoint(pa)
        sb, ob, st_b, cf_b = load_checkpoint(pb)
        same &= sorted(sa.params) == sorted(sb.params)
        for name in sa.params:
            same &= bool(np.array_equal(sa.params[name], sb.params[name]))
        for block in oa:
            same &= oa[block].t == ob[block].t
            for name in oa[block].m:
                same &= bool(np.array_equal(oa[block].m[name], ob[block].m[name]))
                same &= bool(np.array_equal(oa[block].v[name], ob[block].v[name]))
        same &= (st_a, cf_a) == (st_b, cf_b)

    ckpt = paths[0][-1]
    r1 = evaluate(ckpt, accept_ds.test[:8], m=4, seed=5, workers=1,
                  out=str(tmp_path / "r1.json"))
    r2 = evaluate(ckpt, accept_ds.test[:8], m=4, seed=5, workers=3,
                  out=str(tmp_path / "r2.json"))
    reports_equal = ((tmp_path / "r1.json").read_bytes()
                     == (tmp_path / "r2.json").read_bytes())
    assert r1.to_json() == r2.to_json()
    check(same and reports_equal, "criterion-6 determinism",
          f"2 runs x {len(paths[0])} checkpoints array-identical; "
          f"reports byte-identical across 1 vs 3 workers")


# ------------------------------------------- criterion 7: expert validity

def test_criterion_7_expert_log_clean(accept_ds):
    results = []
    for seg in accept_ds.train + accept_ds.test:
        from symphony.scenario import select_interactive
        results.append(reference_result(seg, select_interactive(seg, 2)))
    coll = collision_rate(results)
    off = offroad_time(results)
    check(coll == 0.0 and off == 0.0, "criterion-7 expert log clean",
          f"{len(results)} segments: collision {coll}% offroad {off}%")
