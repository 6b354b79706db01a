import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sboed.errors import ContractError, NumericFailure
from sboed.nn import (
    MASK_VALUE,
    Adam,
    Layout,
    NetParams,
    attention_block,
    attention_layout,
    causal_mask,
    grad_of_jvp_loss,
    grad_params,
    init_params,
    jvp_input,
    layer_norm,
    load_checkpoint,
    mlp,
    mlp_layout,
    save_checkpoint,
    softmax,
)


def _fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_layout_roundtrip():
    lay = Layout().add("a", (2, 3), "he").add("b", (3,), "ones")
    p = init_params(lay, 1)
    tree = p.tree()
    assert tree["a"].shape == (2, 3) and np.allclose(tree["b"], 1.0)
    assert np.array_equal(lay.pack({k: np.asarray(v) for k, v in tree.items()}), p.flat)
    assert Layout.from_json(lay.to_json()).entries == lay.entries


def test_params_reject_bad_vectors():
    lay = Layout().add("a", (2,))
    with pytest.raises(ContractError):
        NetParams(np.zeros(3), lay)
    with pytest.raises(NumericFailure):
        NetParams(np.array([0.0, np.nan]), lay)


def test_params_are_frozen_so_the_cached_tree_stays_valid():
    lay = Layout().add("a", (2,))
    src = np.array([1.0, 2.0])
    p = NetParams(src, lay)
    src[0] = 9.0
    assert p.tree() is p.tree() and float(p.tree()["a"][0]) == 1.0
    with pytest.raises(ValueError):
        p.flat[0] = 3.0


def test_init_is_seeded_and_bounded():
    lay = Layout().add("w", (4, 50, 8), "he")
    a, b = init_params(lay, 3), init_params(lay, 3)
    assert np.array_equal(a.flat, b.flat)
    assert np.abs(a.flat).max() <= np.sqrt(6 / 50)


def test_mlp_parameter_gradient_matches_fd():
    lay = mlp_layout("f", [3, 5, 2])
    p = init_params(lay, 0)
    x = np.random.default_rng(1).standard_normal((4, 3))

    def loss(tree, xb):
        return jnp.sum(mlp(tree, "f", xb, 2, act="tanh") ** 2)

    g = grad_params(loss, p, x)
    fd = _fd_grad(lambda f: float(loss(lay.unpack(jnp.asarray(f)), x)), p.flat)
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_jvp_matches_fd():
    lay = mlp_layout("f", [3, 6, 2])
    p = init_params(lay, 2)
    fn = lambda tree, z: mlp(tree, "f", z, 2, act="elu")  # noqa: E731
    x = np.array([0.3, -0.2, 0.5])
    t = np.array([1.0, 2.0, -1.0])
    h = 1e-6
    fd = (np.asarray(fn(p.tree(), x + h * t)) - np.asarray(fn(p.tree(), x - h * t))) / (2 * h)
    assert np.allclose(jvp_input(fn, p, x, t), fd, atol=1e-8)
    with pytest.raises(ContractError):
        jvp_input(fn, p, x, t[:2])


def test_grad_of_jvp_loss_matches_fd():
    lay = mlp_layout("f", [2, 4, 2])
    p = init_params(lay, 4)
    fn = lambda tree, z: mlp(tree, "f", z, 2, act="tanh")  # noqa: E731
    x = np.array([0.2, -0.7])
    tangents = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    loss = lambda out, jv: jnp.sum(out**2) + jnp.sum(jv[0] ** 2) + 0.5 * jnp.sum(jv[1])  # noqa: E731

    def scalar(flat):
        tree = lay.unpack(jnp.asarray(flat))
        out = np.asarray(fn(tree, x))
        J = []
        for t in tangents:
            h = 1e-5
            J.append((np.asarray(fn(tree, x + h * t)) - np.asarray(fn(tree, x - h * t))) / (2 * h))
        return float(np.sum(out**2) + np.sum(J[0] ** 2) + 0.5 * np.sum(J[1]))

    g = grad_of_jvp_loss(fn, p, x, tangents, loss)
    assert np.allclose(g, _fd_grad(scalar, p.flat, 1e-5), rtol=1e-4, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_layer_norm_standardises(vals):
    x = np.asarray(vals)
    if np.std(x) < 1e-3:
        return
    y = np.asarray(layer_norm(jnp.asarray(x)))
    assert abs(y.mean()) < 1e-9
    assert abs(y.std() - 1.0) < 1e-6


def test_layer_norm_constant_row_is_finite():
    y = np.asarray(layer_norm(jnp.full(5, 2.0)))
    assert np.all(np.isfinite(y)) and np.allclose(y, 0.0)


def test_softmax_is_shift_invariant_and_stable():
    x = jnp.array([1000.0, 1001.0, 999.0])
    s = np.asarray(softmax(x))
    assert np.isclose(s.sum(), 1.0)
    assert np.allclose(s, np.asarray(softmax(x - 1000.0)))


def test_causal_attention_ignores_future():
    K, dz, da = 6, 8, 4
    p = init_params(attention_layout("a", dz, da), 0).tree()
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((K, dz))
    out, W = attention_block(p, "a", jnp.asarray(Z), causal_mask(K), return_weights=True)
    W = np.asarray(W)
    assert np.allclose(W.sum(axis=1), 1.0)
    assert np.allclose(np.triu(W, 1), 0.0)
    Z2 = Z.copy()
    Z2[4:] += 10 * rng.standard_normal((2, dz))
    out2 = np.asarray(attention_block(p, "a", jnp.asarray(Z2), causal_mask(K)))
    assert np.allclose(np.asarray(out)[:4], out2[:4])
    assert causal_mask(3)[0, 2] == MASK_VALUE


def test_attention_closed_form_identity_projections():
    # Wq = Wk = 0 gives uniform weights over the visible prefix
    dz = 3
    p = {"a.Wq": jnp.zeros((dz, dz)), "a.Wk": jnp.zeros((dz, dz)), "a.Wv": jnp.eye(dz)}
    Z = np.arange(12.0).reshape(4, 3)
    out = np.asarray(attention_block(p, "a", jnp.asarray(Z), causal_mask(4)))
    expect = np.cumsum(Z, axis=0) / np.arange(1, 5)[:, None]
    assert np.allclose(out, expect)


def test_attention_batches():
    p = init_params(attention_layout("a", 4, 2), 0).tree()
    Z = np.random.default_rng(2).standard_normal((3, 5, 4))
    batched = np.asarray(attention_block(p, "a", jnp.asarray(Z), causal_mask(5)))
    single = np.stack([np.asarray(attention_block(p, "a", jnp.asarray(z), causal_mask(5))) for z in Z])
    assert np.allclose(batched, single)


def test_adam_first_step_is_lr_times_sign():
    opt = Adam(0.1)
    x = opt.step(np.zeros(3), np.array([2.0, -0.5, 1e-3]))
    assert np.allclose(x, -0.1 * np.sign([2.0, -0.5, 1e-3]), atol=1e-4)
    up = Adam(0.1).step(np.zeros(1), np.array([1.0]), ascent=True)
    assert up[0] > 0


def test_adam_minimises_quadratic_and_decays():
    opt = Adam(0.05, decay=0.999)
    x = np.array([3.0, -2.0])
    for _ in range(3000):
        x = opt.step(x, 2 * x)
    assert np.linalg.norm(x) < 1e-3
    assert np.isclose(opt.lr, 0.05 * 0.999**3000)
    with pytest.raises(NumericFailure):
        opt.step(x, np.array([np.inf, 0.0]))


def test_checkpoint_roundtrip(tmp_path):
    lay = mlp_layout("f", [2, 3, 1])
    p = init_params(lay, 5)
    opt = Adam(0.01)
    opt.step(p.flat, np.ones_like(p.flat))
    save_checkpoint(tmp_path / "net", p, opt, note="x")
    q, o, desc = load_checkpoint(tmp_path / "net")
    assert np.array_equal(q.flat, p.flat) and desc["note"] == "x"
    assert np.array_equal(o.m, opt.m) and o.t == 1
    # corrupt the weights
    raw = np.fromfile(tmp_path / "net.params.bin")
    raw[0] += 1.0
    raw.tofile(tmp_path / "net.params.bin")
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "net")
