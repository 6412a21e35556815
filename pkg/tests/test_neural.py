"""Tape, ops, optimiser, parameter store, checkpoint format."""

import numpy as np
import pytest

import symphony.neural as nn
from symphony.neural import (GradCtx, Mlp, OptimState, ParamStore, Tensor,
                             adam_step, bce_loss, load_checkpoint,
                             masked_max, run_backward, save_checkpoint,
                             softmax_nll_mean, softmax_probs)

H = 1e-5
REL = 1e-5


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)


def fd_grad(f, x, h=H):
    """Central finite differences of a scalar function over one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def scalar_loss(t):
    """Deterministic weighted sum so every output entry matters."""
    w = np.arange(1, t.value.size + 1, dtype=float).reshape(t.value.shape)
    return nn.sum_(nn.mul(t, w))


def test_mlp_forward_matches_manual_matmul():
    store = ParamStore(0)
    mlp = Mlp(store, "m", [3, 8, 8, 2])
    rng = np.random.default_rng(1)
    for name in store.params:
        store.params[name][:] = rng.normal(size=store.params[name].shape)
    x = rng.normal(size=(5, 3))
    h = x
    for i in range(3):
        h = h @ store.params[f"m/w{i}"] + store.params[f"m/b{i}"]
        if i < 2:
            h = np.maximum(h, 0.0)
    np.testing.assert_allclose(mlp.forward_np(x), h, atol=1e-12)


def test_mlp_gradients_match_finite_differences():
    store = ParamStore(0)
    mlp = Mlp(store, "m", [4, 16, 16, 3])
    rng = np.random.default_rng(2)
    for name in store.params:
        store.params[name][:] = rng.normal(size=store.params[name].shape) * 0.7
    x = rng.normal(size=(6, 4))

    ctx = GradCtx(store)
    loss = scalar_loss(mlp.forward_ad(Tensor(x), ctx))
    run_backward(loss)
    grads = ctx.grads()
    for name in store.params:
        fd = fd_grad(lambda: float(scalar_loss_value(mlp, x)), store.params[name])
        assert rel_err(grads[name], fd).max() < REL


def scalar_loss_value(mlp, x):
    out = mlp.forward_np(x)
    w = np.arange(1, out.size + 1, dtype=float).reshape(out.shape)
    return (out * w).sum()


def test_masked_max_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6, 5))
    mask = rng.random((4, 6)) < 0.7
    mask[0] = False  # fully masked row must pool to zero

    t = Tensor(x.copy())
    pooled = masked_max(t, mask)
    np.testing.assert_array_equal(pooled.value[0], 0.0)
    loss = scalar_loss(pooled)
    run_backward(loss)
    g = t.grad

    def f():
        v = masked_max(Tensor(x), mask).value
        w = np.arange(1, v.size + 1, dtype=float).reshape(v.shape)
        return float((v * w).sum())

    fd = fd_grad(f, x)
    assert rel_err(g, fd).max() < REL


def test_masked_max_zero_slots():
    pooled = masked_max(Tensor(np.zeros((3, 0, 5))), np.zeros((3, 0), dtype=bool))
    assert pooled.value.shape == (3, 5)
    np.testing.assert_array_equal(pooled.value, 0.0)


def test_softmax_nll_matches_finite_differences_and_formula():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 7))
    labels = rng.integers(0, 7, size=5)
    mask = np.ones((5, 7), dtype=bool)
    mask[:, 5:] = False
    labels = np.minimum(labels, 4)

    t = Tensor(logits.copy())
    loss = softmax_nll_mean(t, labels, mask)
    p = softmax_probs(logits, mask)
    want = -np.log(p[np.arange(5), labels]).mean()
    assert loss.value == pytest.approx(want, abs=1e-12)
    run_backward(loss)

    def f():
        q = softmax_probs(logits, mask)
        return float(-np.log(q[np.arange(5), labels]).mean())

    fd = fd_grad(f, logits)
    assert rel_err(t.grad, fd).max() < REL


def test_softmax_nll_rejects_bad_labels():
    with pytest.raises(ValueError, match="bad-label"):
        softmax_nll_mean(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_bce_loss_matches_finite_differences():
    rng = np.random.default_rng(5)
    probs = rng.uniform(0.05, 0.95, size=12)
    targets = (rng.random(12) < 0.5).astype(float)
    loss, grad = bce_loss(probs, targets)
    want = -(targets * np.log(probs) + (1 - targets) * np.log(1 - probs)).mean()
    assert loss == pytest.approx(want, abs=1e-12)

    def f():
        return bce_loss(probs, targets)[0]

    fd = fd_grad(f, probs)
    assert rel_err(grad, fd).max() < REL
    # saturated probabilities clamp with zero gradient
    lc, gc = bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert np.isfinite(lc) and np.all(gc == 0.0)


def test_gather_ops_match_finite_differences():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 3))
    idx = rng.integers(0, 5, size=(4, 2))

    t = Tensor(x.copy())
    loss = scalar_loss(nn.take_rows(t, idx))
    run_backward(loss)

    def f():
        v = x[idx]
        w = np.arange(1, v.size + 1, dtype=float).reshape(v.shape)
        return float((v * w).sum())

    fd = fd_grad(f, x)
    assert rel_err(t.grad, fd).max() < REL

    slots = rng.integers(0, 3, size=(5, 2))
    t2 = Tensor(x.copy())
    loss2 = scalar_loss(nn.take_slots(t2, slots))
    run_backward(loss2)

    def f2():
        v = x[np.arange(5)[:, None], slots]
        w = np.arange(1, v.size + 1, dtype=float).reshape(v.shape)
        return float((v * w).sum())

    fd2 = fd_grad(f2, x)
    assert rel_err(t2.grad, fd2).max() < REL


def test_composite_ops_match_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6,)) + 2.5
    y = rng.normal(size=(6,))

    t = Tensor(x.copy())
    u = Tensor(y.copy())
    expr = nn.add(nn.mul(nn.log(t), nn.cos(u)),
                  nn.arctan2(u, t))
    loss = scalar_loss(expr)
    run_backward(loss)

    w = np.arange(1, 7, dtype=float)

    def f():
        return float((w * (np.log(x) * np.cos(y) + np.arctan2(y, x))).sum())

    assert rel_err(t.grad, fd_grad(f, x)).max() < REL
    assert rel_err(u.grad, fd_grad(f, y)).max() < REL


def test_where_mask_routes_gradients():
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    y = Tensor(np.array([10.0, 20.0, 30.0]))
    mask = np.array([True, False, True])
    out = nn.where_mask(mask, x, y)
    np.testing.assert_array_equal(out.value, [1.0, 20.0, 3.0])
    run_backward(nn.sum_(out))
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(y.grad, [0.0, 1.0, 0.0])


def test_param_store_init_is_deterministic():
    a = ParamStore(9)
    b = ParamStore(9)
    wa = a.create("x/w0", (4, 4))
    wb = b.create("x/w0", (4, 4))
    np.testing.assert_array_equal(wa, wb)
    c = ParamStore(10)
    assert not np.array_equal(c.create("x/w0", (4, 4)), wa)
    with pytest.raises(ValueError, match="shape-error"):
        a.create("x/w0", (4, 4))


def test_adam_matches_reference_implementation():
    opt = OptimState(lr=0.01)
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, 0.25])}
    m = v = np.zeros(2)
    w_ref = params["w"].copy()
    for t in range(1, 4):
        adam_step(opt, params, grads)
        m = 0.9 * m + 0.1 * grads["w"]
        v = 0.999 * v + 0.001 * grads["w"] ** 2
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        w_ref -= 0.01 * mh / (np.sqrt(vh) + 1e-8)
        np.testing.assert_allclose(params["w"], w_ref, atol=1e-15)


def test_adam_rejects_nonfinite_gradients():
    opt = OptimState()
    with pytest.raises(ValueError, match="nonfinite-grad"):
        adam_step(opt, {"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])})


def test_checkpoint_roundtrip(tmp_path):
    store = ParamStore(3)
    Mlp(store, "pol", [3, 4, 2])
    opt = OptimState(lr=2e-4)
    adam_step(opt, {k: store.params[k] for k in store.block("pol/")},
              {k: np.full_like(store.params[k], 0.1) for k in store.block("pol/")})
    path = tmp_path / "ckpt_7"
    save_checkpoint(str(path), store, {"policy": opt}, 7, {"variant": "bc"})
    assert path.exists()  # exact name, no added extension
    store2, opts2, step, config = load_checkpoint(str(path))
    assert step == 7 and config == {"variant": "bc"}
    assert opts2["policy"].lr == 2e-4 and opts2["policy"].t == opt.t
    for name in store.params:
        np.testing.assert_array_equal(store.params[name], store2.params[name])
        np.testing.assert_array_equal(opt.m[name], opts2["policy"].m[name])


def test_checkpoint_schema_guard(tmp_path):
    store = ParamStore(0)
    store.create("a/w0", (2, 2))
    path = tmp_path / "ck"
    save_checkpoint(str(path), store, {}, 1, {})
    import json
    data = dict(np.load(path, allow_pickle=False))
    meta = json.loads(str(data["meta"]))
    meta["schema"] = 99
    data["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **data)
    with pytest.raises(ValueError, match="unsupported-schema"):
        load_checkpoint(str(path))
