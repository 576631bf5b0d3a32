import numpy as np
import pytest

from mapo_lab.deformation import (DELTA_DIM, MLP, DeformNet, apply_delta, deform, deform_at,
                                  load_net, save_net, temporal_embed)
from oracles import micro_scene, random_params, relative_error, small_net


def test_zero_heads_give_zero_delta():
    rng = np.random.default_rng(0)
    net = DeformNet.create(20, rng, d_gauss=4, hidden=(8, 8))
    z = rng.normal(size=(5, 4))
    for t in (0, 7, 19):
        delta, _ = deform_at(z, t, net)
        assert delta.vector.shape == (5, DELTA_DIM)
        assert np.all(delta.vector == 0.0)
    p = random_params(rng, 5)
    q = apply_delta(p, deform_at(z, 3, net)[0])
    assert np.array_equal(q.mu, p.mu) and np.array_equal(q.rot, p.rot)


def test_coarse_knots_are_global_and_interpolate():
    net = DeformNet.create(40, np.random.default_rng(1), d_gauss=2, hidden=(4,))
    emb = net.temporal
    assert emb.n_coarse == 4
    assert emb.knot_weights(0) == (0, 0.0)
    k, w = emb.knot_weights(20)      # u = 20 * 3 / 40 = 1.5
    assert k == 1 and np.isclose(w, 0.5)
    assert emb.knot_weights(39)[0] == 2
    z_tc, z_tf = temporal_embed(20, emb)
    assert np.allclose(z_tc, 0.5 * (emb.coarse_table[1] + emb.coarse_table[2]))
    assert np.array_equal(z_tf, emb.fine_table[20])
    with pytest.raises(ValueError):
        emb.knot_weights(40)
    with pytest.raises(ValueError):
        emb.knot_weights(-1)


def test_dimension_mismatch_rejected():
    net = DeformNet.create(10, np.random.default_rng(2), d_gauss=4, hidden=(4,))
    with pytest.raises(ValueError):
        deform(np.zeros((2, 3)), np.zeros(8), np.zeros(8), net)
    with pytest.raises(ValueError):
        deform(np.zeros((2, 4)), np.zeros(7), np.zeros(8), net)


def test_replicate_is_independent_and_bit_equal():
    net = small_net(np.random.default_rng(3), 12)
    twin = net.replicate(7, (6, 12))
    assert twin.network_id == 7 and twin.segment_range == (6, 12)
    for k, v in net.parameters().items():
        assert v.tobytes() == twin.parameters()[k].tobytes()
    twin.parameters()["coarse.W0"][0, 0] += 1.0
    assert net.coarse.W[0][0, 0] != twin.coarse.W[0][0, 0]


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    mlp = MLP([3, 5, 4], rng, zero_head=False)
    X = rng.normal(size=(6, 3))
    G = rng.normal(size=(6, 4))
    y, cache = mlp.forward(X)
    if np.abs(cache[1][0]).min() < 1e-3:
        pytest.skip("pre-activation too close to the ReLU kink")
    dX, dW, _ = mlp.backward(cache, G)
    h = 1e-6
    fd = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        fd[idx] = ((mlp.forward(Xp)[0] - mlp.forward(Xm)[0]) * G).sum() / (2 * h)
    assert relative_error(dX, fd).max() < 1e-6


def test_full_pipeline_gradient_on_one_micro_scene():
    pipe = micro_scene(123)
    a, f = pipe.analytic(), pipe.finite_difference()
    for k in a:
        assert relative_error(a[k], f[k]).max() < 1e-4, k


def test_save_load_roundtrip(tmp_path):
    net = small_net(np.random.default_rng(5), 9)
    net.network_id, net.segment_range = 3, (0, 9)
    save_net(tmp_path / "n.bin", net)
    back = load_net(tmp_path / "n.bin")
    assert back.header() == net.header()
    for k, v in net.parameters().items():
        assert np.array_equal(v, back.parameters()[k])
    z = np.random.default_rng(6).normal(size=(3, net.d_gauss))
    assert np.array_equal(deform_at(z, 4, net)[0].vector, deform_at(z, 4, back)[0].vector)
