import numpy as np
import pytest

from nagen.errors import DataError
from nagen.generator import (GeneratorParams, GruLayer, forward_batch, generator_backward, generator_forward,
                             gru_cell_forward, init_params, load_checkpoint, make_latent, make_latents,
                             save_checkpoint)


def scalar_gru(w_x, w_h, b_x, b_h, x, hp):
    """Element-by-element reference of the gate equations."""
    h = len(hp)
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    out = np.zeros(h)
    for k in range(h):
        pre = [sum(x[i] * w_x[i, g * h + k] for i in range(len(x))) + b_x[g * h + k] for g in range(3)]
        rec = [sum(hp[i] * w_h[i, g * h + k] for i in range(h)) + b_h[g * h + k] for g in range(3)]
        r = sig(pre[0] + rec[0])
        u = sig(pre[1] + rec[1])
        n = np.tanh(pre[2] + r * rec[2])
        out[k] = (1 - u) * hp[k] + u * n
    return out


def small_params(rng, hidden=(4,), N=2, latent_dim=3, C=2, bias=0.3):
    p = init_params(hidden, N, rng, latent_dim, C)
    for layer in p.layers:
        layer.b_x[:] = rng.uniform(-bias, bias, layer.b_x.shape)
        layer.b_h[:] = rng.uniform(-bias, bias, layer.b_h.shape)
    p.b_out[:] = rng.uniform(-bias, bias, p.b_out.shape)
    return p


# -------------------------------------------------------------------- latent


def test_latent_shape_and_onehot():
    z = make_latent(2, 5, rng=0)
    assert z.values.shape == (32 + 5, 64)
    np.testing.assert_array_equal(z.values[32:], np.eye(5)[2][:, None] * np.ones((1, 64)))
    with pytest.raises(ValueError):
        make_latent(5, 5)


def test_latent_determinism_and_batch_order():
    a = make_latent(1, 3, 8, 4, np.random.default_rng(7)).values
    b = make_latent(1, 3, 8, 4, np.random.default_rng(7)).values
    np.testing.assert_array_equal(a, b)
    rng = np.random.default_rng(7)
    Z = make_latents([1, 0], 3, 8, 4, rng)
    np.testing.assert_array_equal(Z[0], a)


def test_latent_statistics():
    rng = np.random.default_rng(1)
    s = np.zeros(32)
    ss = np.zeros(32)
    n = 0
    for _ in range(10_000):
        v = make_latent(0, 2, 64, 32, rng).values[:32]
        s += v.sum(axis=1)
        ss += (v**2).sum(axis=1)
        n += v.shape[1]
    mean = s / n
    var = ss / n - mean**2
    assert np.all(np.abs(mean) < 0.05)
    assert np.all(np.abs(var - 1) < 0.1)


# ---------------------------------------------------------------------- cell


def test_cell_zero_weights_halves_state():
    h = 3
    layer = GruLayer(np.zeros((2, 3 * h)), np.zeros((h, 3 * h)), np.zeros(3 * h), np.zeros(3 * h))
    hp = np.array([0.4, -1.0, 2.0])
    np.testing.assert_array_equal(gru_cell_forward(layer, np.array([5.0, -2.0]), hp), 0.5 * hp)


def test_cell_zero_state_zero_input():
    rng = np.random.default_rng(2)
    layer = init_params([4], 2, rng, 3, 1).layers[0]
    np.testing.assert_array_equal(gru_cell_forward(layer, np.zeros(4), np.zeros(4)), np.zeros(4))


def test_cell_matches_scalar_reference():
    rng = np.random.default_rng(3)
    for _ in range(5):
        w_x, w_h = rng.standard_normal((3, 12)), rng.standard_normal((4, 12))
        b_x, b_h = rng.standard_normal(12), rng.standard_normal(12)
        x, hp = rng.standard_normal(3), rng.standard_normal(4)
        got = gru_cell_forward(GruLayer(w_x, w_h, b_x, b_h), x, hp)
        np.testing.assert_allclose(got, scalar_gru(w_x, w_h, b_x, b_h, x, hp), atol=1e-12)


# ------------------------------------------------------------------- forward


def test_forward_range_shape_and_determinism():
    rng = np.random.default_rng(4)
    p = init_params([8, 6], 3, rng, 5, 4)
    z = make_latent(3, 4, 20, 5, 11)
    g1, _ = generator_forward(p, z)
    g2, _ = generator_forward(p, z)
    assert g1.points.shape == (3, 20) and g1.class_id == 3
    assert np.all(np.abs(g1.points) < 1)
    np.testing.assert_array_equal(g1.points, g2.points)


def test_forward_zero_params_is_constant_tanh_bias():
    p = init_params([4, 5], 2, 0, 3, 2)
    for layer in p.layers:
        for a in (layer.w_x, layer.w_h, layer.b_x, layer.b_h):
            a[:] = 0
    p.w_out[:] = 0
    p.b_out[:] = [0.3, -1.2]
    g, _ = generator_forward(p, make_latent(1, 2, 9, 3, 0))
    np.testing.assert_array_equal(g.points, np.tanh(np.array([[0.3], [-1.2]])) * np.ones((1, 9)))


def test_forward_matches_cellwise_unroll():
    rng = np.random.default_rng(5)
    p = small_params(rng, (4, 3))
    z = make_latent(0, 2, 6, 3, rng).values
    x = z.T
    for layer in p.layers:
        hp = np.zeros(layer.hidden_size)
        outs = []
        for t in range(x.shape[0]):
            hp = gru_cell_forward(layer, x[t], hp)
            outs.append(hp)
        x = np.array(outs)
    expect = np.tanh(x @ p.w_out + p.b_out).T
    got, _ = forward_batch(p, z[None])
    np.testing.assert_allclose(got[0], expect, atol=1e-14)


def test_forward_rejects_bad_latent():
    p = init_params([4], 2, 0, 3, 2)
    with pytest.raises(ValueError):
        forward_batch(p, np.zeros((1, 6, 5)))


def test_onehot_changes_output():
    rng = np.random.default_rng(6)
    p = small_params(rng, (5,), C=3)
    z = make_latent(0, 3, 7, 3, rng).values
    z2 = z.copy()
    z2[3:] = 0
    z2[4] = 1
    out = forward_batch(p, np.stack([z, z2]))[0]
    assert not np.allclose(out[0], out[1])


# ------------------------------------------------------------------ backward


def fd_params(p, Z, upstream, h=1e-5):
    loss = lambda q: float(np.sum(forward_batch(q, Z, False)[0] * upstream))
    grads = {}
    for name, arr in p.arrays().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = loss(p)
            arr[idx] = old - h
            lm = loss(p)
            arr[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        grads[name] = g
    return grads


def max_rel(a, b):
    return max(np.max(np.abs(a[k] - b[k])) / max(np.max(np.abs(b[k])), 1e-8) for k in b)


@pytest.mark.parametrize("hidden", [(4,), (4, 3), (3, 4, 2)])
def test_backward_finite_differences(hidden):
    rng = np.random.default_rng(7)
    p = small_params(rng, hidden)
    Z = make_latents([0, 1], 2, 3, 3, rng)
    up = rng.standard_normal((2, 2, 3))
    _, tape = forward_batch(p, Z)
    got = generator_backward(tape, up)
    fd = fd_params(p, Z, up)
    assert list(got) == list(p.arrays())
    tol = 1e-5 if len(hidden) == 1 else 1e-4
    assert max_rel(got, fd) <= tol


def test_backward_zero_upstream():
    rng = np.random.default_rng(8)
    p = small_params(rng, (4, 3))
    z = make_latent(1, 2, 5, 3, rng)
    _, tape = generator_forward(p, z)
    for g in generator_backward(tape, np.zeros((2, 5))).values():
        assert not np.any(g)


def test_backward_reaches_first_layer():
    rng = np.random.default_rng(9)
    p = small_params(rng, (4, 3))
    _, tape = generator_forward(p, make_latent(0, 2, 5, 3, rng))
    g = generator_backward(tape, rng.standard_normal((2, 5)))
    assert np.abs(g["layers.0.w_x"]).max() > 0


def test_backward_rows_subset():
    rng = np.random.default_rng(10)
    p = small_params(rng, (4,))
    Z = make_latents([0, 1, 1], 2, 4, 3, rng)
    _, tape = forward_batch(p, Z)
    up = rng.standard_normal((1, 2, 4))
    a = generator_backward(tape.rows([2]), up)
    b = generator_backward(forward_batch(p, Z[2:])[1], up)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], atol=1e-14)


# ---------------------------------------------------------------------- init


def test_init_deterministic_and_bounded():
    a = init_params([16, 8], 3, 5, 32, 4)
    b = init_params([16, 8], 3, 5, 32, 4)
    for k, v in a.arrays().items():
        np.testing.assert_array_equal(v, b.arrays()[k])
        if ".b_" in k or k == "b_out":
            assert not np.any(v)
    lim = np.sqrt(6 / (36 + 16))
    assert np.abs(a.layers[0].w_x).max() <= lim


def test_init_variance():
    p = init_params([200], 2, 3, 32, 8)
    block = p.layers[0].w_h[:, :200]
    lim = np.sqrt(6 / 400)
    assert block.var() == pytest.approx(lim**2 / 3, rel=0.2)


def test_params_reject_inconsistent_chain():
    p = init_params([4, 3], 2, 0, 3, 1)
    with pytest.raises(ValueError):
        GeneratorParams([p.layers[1], p.layers[0]], p.w_out, p.b_out, 3, 1)


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_and_bytes(tmp_path):
    p = init_params([4, 3], 2, 9, 3, 2)
    save_checkpoint(tmp_path / "a.npz", p, 17, {"x": np.arange(3.0)}, {"note": "hi"})
    save_checkpoint(tmp_path / "b.npz", p, 17, {"x": np.arange(3.0)}, {"note": "hi"})
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    q, header, extra = load_checkpoint(tmp_path / "a.npz")
    assert header["step"] == 17 and header["meta"] == {"note": "hi"} and header["hidden_sizes"] == [4, 3]
    np.testing.assert_array_equal(extra["x"], np.arange(3.0))
    for k, v in p.arrays().items():
        np.testing.assert_array_equal(q.arrays()[k], v)


def test_checkpoint_version_mismatch(tmp_path, monkeypatch):
    import nagen.generator as gen

    p = init_params([2], 2, 0, 3, 1)
    monkeypatch.setattr(gen, "CHECKPOINT_VERSION", 99)
    save_checkpoint(tmp_path / "v.npz", p)
    monkeypatch.undo()
    with pytest.raises(DataError, match="version"):
        load_checkpoint(tmp_path / "v.npz")
    (tmp_path / "junk.npz").write_text("nope")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "junk.npz")
