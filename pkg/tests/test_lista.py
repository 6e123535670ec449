import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, rel_err
from twrmcae.core import ShapeError, make_rng
from twrmcae.lista import (
    ListaConfig,
    encoder_matrices,
    init_lista_layer,
    init_lista_stack,
    lista_layer_forward,
    lift_top_singular,
    lista_stack_backward,
    lista_stack_forward,
    spectral_gap,
    soft_threshold,
    to_fragments,
    from_fragments,
)
from twrmcae.nn import conv2d_forward, conv_transpose2d_forward


def test_soft_threshold_examples():
    assert soft_threshold(0.5, 0.2) == pytest.approx(0.3, abs=1e-15)
    assert soft_threshold(0.5, 0.2, paper_literal=True) == pytest.approx(0.3, abs=1e-15)
    assert soft_threshold(0.1, 0.2) == 0.0
    assert soft_threshold(0.1, 0.2, paper_literal=True) == pytest.approx(0.1, abs=1e-15)
    assert soft_threshold(-0.5, 0.2) == pytest.approx(-0.3, abs=1e-15)
    # the literal form is not odd: |-0.5 - 0.2| * sgn(-0.5) = -0.7
    assert soft_threshold(-0.5, 0.2, paper_literal=True) == pytest.approx(-0.7, abs=1e-15)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 5))
def test_soft_threshold_one_lipschitz(a, b, theta):
    assert abs(soft_threshold(a, theta) - soft_threshold(b, theta)) <= abs(a - b) + 1e-12


@given(st.integers(0, 2**31), st.sampled_from([None, 2, 4]))
def test_fragments_roundtrip(seed, patch):
    y = make_rng(seed).standard_normal((2, 3, 8, 4))
    f = to_fragments(y, patch)
    assert f.shape[-1] == (32 if patch is None else patch * patch)
    np.testing.assert_array_equal(from_fragments(f, y.shape, patch), y)


def test_fragment_tiles_are_row_major_patches():
    y = np.arange(16.0).reshape(1, 1, 4, 4)
    f = to_fragments(y, 2)
    np.testing.assert_array_equal(f[0, 0, 1], [2, 3, 6, 7])
    with pytest.raises(ShapeError):
        to_fragments(np.zeros((1, 1, 5, 4)), 2)


@pytest.mark.parametrize("patch", [None, 4])
def test_identity_layer_is_exact(patch):
    cfg = ListaConfig(patch=patch)
    x = make_rng(1).standard_normal((2, 3, 8, 8))
    p = init_lista_layer(None, 3, cfg.fragment_dim(8, 8), cfg, identity=True)
    S, we, _ = encoder_matrices(p, cfg)
    assert not np.any(S)
    np.testing.assert_array_equal(we, np.eye(we.shape[0]))
    out, _ = lista_layer_forward(x, p, cfg)
    np.testing.assert_array_equal(out, x)


def test_large_theta_gives_bias_map():
    cfg = ListaConfig(patch=4)
    rng = make_rng(2)
    p = init_lista_layer(rng, 3, 16, cfg, noise=0.05)
    p["theta"] = np.array(1e6)
    p["deconv_b"] = np.array([0.1, -0.2, 0.3])
    out, _ = lista_layer_forward(rng.standard_normal((1, 3, 8, 8)), p, cfg)
    np.testing.assert_array_equal(out, np.broadcast_to(p["deconv_b"][None, :, None, None], out.shape))


@pytest.mark.parametrize("cfg", [ListaConfig(patch=None), ListaConfig(patch=4), ListaConfig(patch=4, paper_literal=True)])
def test_layer_matches_straight_line_reimplementation(cfg):
    rng = make_rng(3)
    x = rng.standard_normal((1, 3, 8, 8))
    n = cfg.fragment_dim(8, 8)
    p = init_lista_layer(rng, 3, n, cfg, noise=0.1, theta=0.05)
    out, _ = lista_layer_forward(x, p, cfg)

    wd = p["W_d"]
    L = np.linalg.norm(wd, 2) ** 2
    S = np.eye(n) - wd.T @ wd
    we = np.linalg.pinv(wd) / L
    y, _ = conv2d_forward(x, p["conv_w"], p["conv_b"], 1, 1)
    h = np.zeros_like(y)
    side = 8 if cfg.patch is None else cfg.patch
    theta = float(p["theta"])
    for c in range(3):
        for r0 in range(0, 8, side):
            for c0 in range(0, 8, side):
                frag = y[0, c, r0 : r0 + side, c0 : c0 + side].reshape(-1)
                g = S @ frag + we @ frag
                if cfg.paper_literal:
                    shr = np.abs(g - theta) * np.sign(g)
                else:
                    shr = np.sign(g) * np.maximum(np.abs(g) - theta, 0.0)
                h[0, c, r0 : r0 + side, c0 : c0 + side] = shr.reshape(side, side)
    ref, _ = conv_transpose2d_forward(h, p["deconv_w"], p["deconv_b"], 1)
    # the oracle builds pinv and L on its own, so agreement is to round-off rather than bitwise
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_wd_shape_mismatch():
    cfg = ListaConfig(patch=4)
    p = init_lista_layer(None, 3, 9, cfg, identity=True)
    with pytest.raises(ShapeError):
        lista_layer_forward(np.zeros((1, 3, 8, 8)), p, cfg)


def test_identity_stack_and_inject_ones():
    cfg = ListaConfig(n_layers=12, patch=4)
    x = make_rng(4).standard_normal((2, 3, 8, 8))
    layers = init_lista_stack(None, 3, 16, cfg, identity=True)
    z, taps, _ = lista_stack_forward(x, layers, None, cfg)
    assert len(taps) == 12
    np.testing.assert_array_equal(z, x)
    for t in taps:
        np.testing.assert_array_equal(t, x)
    rng = make_rng(5)
    noisy = init_lista_stack(rng, 3, 16, cfg, noise=0.05)
    a, ta, _ = lista_stack_forward(x, noisy, None, cfg)
    b, tb, _ = lista_stack_forward(x, noisy, np.ones_like(x), cfg)
    np.testing.assert_array_equal(a, b)
    for u, v in zip(ta, tb):
        np.testing.assert_array_equal(u, v)


def test_inject_zero_propagates_bias_only():
    cfg = ListaConfig(n_layers=4, patch=4)
    rng = make_rng(6)
    layers = init_lista_stack(rng, 3, 16, cfg, noise=0.05)
    for p in layers:
        p["conv_b"] = rng.standard_normal(3) * 0.3
        p["deconv_b"] = rng.standard_normal(3) * 0.3
    x1 = rng.standard_normal((1, 3, 8, 8))
    x2 = rng.standard_normal((1, 3, 8, 8))
    _, t1, _ = lista_stack_forward(x1, layers, np.zeros_like(x1), cfg)
    _, t2, _ = lista_stack_forward(x2, layers, np.zeros_like(x2), cfg)
    # by hand: a zero input to layer j gives deconv(shrink(S c + We c)) with c the conv bias map
    for j in range(1, 4):
        zero_in, _ = lista_layer_forward(np.zeros_like(x1), layers[j], cfg)
        np.testing.assert_array_equal(t1[j], zero_in)
        np.testing.assert_array_equal(t2[j], zero_in)
    assert not np.array_equal(t1[0], t2[0])


def kink_distance(x, layers, inject, cfg):
    cur = x
    worst = np.inf
    for j, p in enumerate(layers):
        y, _ = conv2d_forward(cur, p["conv_w"], p["conv_b"], 1, 1)
        f = to_fragments(y, cfg.patch)
        S, we, _ = encoder_matrices(p, cfg)
        g = f @ S.T + f @ we.T
        t = float(p["theta"])
        d = np.abs(np.abs(g) - t) if not cfg.paper_literal else np.minimum(np.abs(g - t), np.abs(g))
        worst = min(worst, float(d.min()))
        z, _ = lista_layer_forward(cur, p, cfg)
        cur = z * inject if j + 1 < len(layers) else z
    return worst


VARIANTS = [
    ListaConfig(n_layers=2, patch=None),
    ListaConfig(n_layers=2, patch=3, encoder="transpose"),
    ListaConfig(n_layers=2, patch=None, untied_S=True),
    ListaConfig(n_layers=2, patch=3, paper_literal=True),
]


@pytest.mark.parametrize("cfg", VARIANTS, ids=["pinv", "transpose", "untied", "literal"])
def test_stack_backward_finite_difference(cfg):
    n = cfg.fragment_dim(6, 6)
    for seed in range(50):
        rng = make_rng(seed, 77)
        layers = init_lista_stack(rng, 3, n, cfg, noise=0.01, theta=0.02)
        # near-identity W_d has almost tied singular values, where ||W_d||^2 bends sharply
        for p in layers:
            p["W_d"] = lift_top_singular(p["W_d"], 0.05)
        # positive inputs keep the shrinkage far from its kinks at this near-identity init
        x = rng.uniform(0.3, 1.0, (1, 3, 6, 6))
        inject = rng.uniform(0.5, 1.0, x.shape)
        if kink_distance(x, layers, inject, cfg) >= 1e-2:
            break
    else:
        pytest.fail("no kink-free sample found")
    w_z = rng.standard_normal(x.shape)
    w_t = [rng.standard_normal(x.shape) for _ in layers]

    def objective(xx, ls, inj):
        z, taps, _ = lista_stack_forward(xx, ls, inj, cfg)
        return float(np.sum(z * w_z) + sum(np.sum(t * w) for t, w in zip(taps, w_t)))

    _, _, cache = lista_stack_forward(x, layers, inject, cfg)
    dx, grads, dinj = lista_stack_backward(w_z, w_t, layers, cache, cfg)
    assert rel_err(dx, central_difference(lambda v: objective(v, layers, inject), x), 1e-7) < 1e-4
    assert rel_err(dinj, central_difference(lambda v: objective(x, layers, v), inject), 1e-7) < 1e-4
    for j, p in enumerate(layers):
        for name, g in grads[j].items():

            def f(v, j=j, name=name):
                ls = [dict(q) for q in layers]
                ls[j][name] = v
                return objective(x, ls, inject)

            assert rel_err(g, central_difference(f, p[name]), 1e-7) < 1e-4, (j, name)


def test_theta_gradient_zero_in_dead_zone():
    cfg = ListaConfig(n_layers=1, patch=None)
    rng = make_rng(9)
    layers = init_lista_stack(rng, 3, 16, cfg, noise=0.01)
    layers[0]["theta"] = np.array(1e3)
    x = rng.standard_normal((1, 3, 4, 4))
    _, _, cache = lista_stack_forward(x, layers, None, cfg)
    _, grads, _ = lista_stack_backward(rng.standard_normal(x.shape), None, layers, cache, cfg)
    assert grads[0]["theta"] == 0.0


def test_zero_upstream_zero_gradients():
    cfg = ListaConfig(n_layers=3, patch=None)
    rng = make_rng(10)
    layers = init_lista_stack(rng, 3, 16, cfg, noise=0.05)
    x = rng.standard_normal((1, 3, 4, 4))
    inj = rng.uniform(0.5, 1, x.shape)
    _, _, cache = lista_stack_forward(x, layers, inj, cfg)
    dx, grads, dinj = lista_stack_backward(None, None, layers, cache, cfg)
    assert not np.any(dx) and not np.any(dinj)
    assert all(not np.any(v) for g in grads for v in g.values())


def test_config_validation():
    with pytest.raises(ValueError):
        ListaConfig(encoder="inverse")
    with pytest.raises(ValueError):
        ListaConfig(n_layers=0)
    p = init_lista_layer(None, 3, 4, ListaConfig(patch=None), identity=True)
    p["W_d"] = np.zeros((4, 4))
    with pytest.raises(FloatingPointError):
        encoder_matrices(p, ListaConfig(patch=None))


@given(st.integers(0, 2**31), st.floats(1e-3, 0.5))
def test_lift_top_singular_opens_gap(seed, gap):
    w = np.eye(8) + 1e-3 * make_rng(seed).standard_normal((8, 8))
    s = np.linalg.svd(w, compute_uv=False)
    lifted = lift_top_singular(w, gap)
    t = np.linalg.svd(lifted, compute_uv=False)
    assert spectral_gap(lifted) >= gap - 1e-12
    # only sigma_1 moves
    np.testing.assert_allclose(t[1:], s[1:], rtol=0, atol=1e-12)
    if s[0] - s[1] >= gap:
        assert lifted is w
