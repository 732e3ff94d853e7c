import numpy as np
import pytest

from dabdunet import tensor as T
from dabdunet.fusion import (
    bidirectional_pass,
    channel_attention,
    combine_y,
    fuse_skip,
    fusion_shapes,
    lstm_cell,
    lstm_shapes,
    scope,
)
from dabdunet.gradcheck import check
from dabdunet.tensor import ContractError, Tensor


def params(shapes, rng, scale=0.7, prefix=None):
    p = {k: Tensor(rng.normal(scale=scale, size=s), requires_grad=True) for k, s in shapes.items()}
    return scope(p, prefix) if prefix else p


def lstm_params(rng, d_in=3, d_h=4, scale=0.7):
    return params(lstm_shapes("l", d_in, d_h), rng, scale, "l")


def sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def reference_cell(x, h, c, p, tanh_h=False):
    """The gate equations written out longhand in numpy."""
    P = {k: v.data for k, v in p.items()}
    i = sig(P["Wi"] @ x + P["Ui"] @ h + P["bi"])
    f = sig(P["Wf"] @ x + P["Uf"] @ h + P["bf"])
    o = sig(P["Wo"] @ x + P["Uo"] @ h + P["bo"])
    c_new = f * c + i * np.tanh(P["Wc"] @ x + P["Uc"] @ h + P["bc"])
    h_new = o * (np.tanh(c_new) if tanh_h else c_new)
    return h_new, c_new


def reference_attention(y1, y2, va, wa):
    """Per-channel softmax over two steps; score = va . sigmoid(Wa [s_c, y_c])."""
    s = 0.5 * (y1 + y2)
    scores = []
    for y in (y1, y2):
        e = np.zeros_like(y)
        for idx in np.ndindex(y.shape):
            e[idx] = va @ sig(wa @ np.array([s[idx], y[idx]]))
        scores.append(e)
    e1, e2 = scores
    b1 = np.exp(e1) / (np.exp(e1) + np.exp(e2))
    b2 = np.exp(e2) / (np.exp(e1) + np.exp(e2))
    return b1 * y1 + b2 * y2, b1, b2


@pytest.mark.parametrize("tanh_h", [False, True])
def test_lstm_cell_matches_longhand_equations(tanh_h):
    rng = np.random.default_rng(0)
    for _ in range(5):
        p = lstm_params(rng)
        x, h, c = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
        h_t, c_t = lstm_cell(Tensor(x), Tensor(h), Tensor(c), p, "tanh" if tanh_h else "identity")
        h_ref, c_ref = reference_cell(x, h, c, p, tanh_h)
        np.testing.assert_allclose(h_t.data, h_ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(c_t.data, c_ref, rtol=0, atol=1e-12)


def test_lstm_cell_row_batch_matches_vectors():
    rng = np.random.default_rng(1)
    p = lstm_params(rng)
    xs, hs, cs = rng.normal(size=(5, 3)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    h_t, c_t = lstm_cell(Tensor(xs), Tensor(hs), Tensor(cs), p)
    for r in range(5):
        h_ref, c_ref = reference_cell(xs[r], hs[r], cs[r], p)
        np.testing.assert_allclose(h_t.data[r], h_ref, atol=1e-12, rtol=0)
        np.testing.assert_allclose(c_t.data[r], c_ref, atol=1e-12, rtol=0)


def test_lstm_zero_fixed_point():
    p = {k.split(".", 1)[1]: T.zeros(s) for k, s in lstm_shapes("l", 3, 4).items()}
    x = Tensor(np.random.default_rng(2).normal(size=3))
    h_t, c_t = lstm_cell(x, T.zeros((4,)), T.zeros((4,)), p)
    assert np.all(h_t.data == 0.0) and np.all(c_t.data == 0.0)


def test_lstm_forget_saturation_keeps_memory():
    p = {k.split(".", 1)[1]: T.zeros(s) for k, s in lstm_shapes("l", 3, 4).items()}
    p["bf"] = Tensor(np.full(4, 20.0))
    c = np.array([1.5, -2.0, 0.25, 3.0])
    _, c_t = lstm_cell(Tensor(np.ones(3)), T.zeros((4,)), Tensor(c), p)
    # f = sigmoid(20) and the candidate is tanh(0) = 0, so c_t = sigmoid(20) * c exactly
    np.testing.assert_array_equal(c_t.data, sig(20.0) * c)
    np.testing.assert_allclose(c_t.data, c, rtol=1e-8)


def test_lstm_gate_ranges_with_tanh_output():
    rng = np.random.default_rng(3)
    p = lstm_params(rng, scale=3.0)
    h_t, _ = lstm_cell(Tensor(rng.normal(size=(50, 3)) * 5), Tensor(rng.normal(size=(50, 4))),
                       Tensor(rng.normal(size=(50, 4)) * 5), p, "tanh")
    assert np.all(np.abs(h_t.data) < 1)


def test_lstm_cell_gradient():
    rng = np.random.default_rng(4)
    p = lstm_params(rng)
    x, h, c = (Tensor(rng.normal(size=n), True) for n in (3, 4, 4))
    r = Tensor(rng.normal(size=4))
    res = check("cell", lambda: T.sum(lstm_cell(x, h, c, p)[0] * r), [x, h, c, *p.values()], tol=1e-6)
    assert res.passed, res


def test_bidirectional_mirror_symmetry():
    rng = np.random.default_rng(5)
    p = lstm_params(rng)
    x = Tensor(rng.normal(size=3))
    hf, hb = bidirectional_pass([x, x], p, p)
    np.testing.assert_array_equal(hf[0].data, hb[1].data)
    np.testing.assert_array_equal(hf[1].data, hb[0].data)


def test_bidirectional_zero_params_and_empty():
    p = {k.split(".", 1)[1]: T.zeros(s) for k, s in lstm_shapes("l", 3, 4).items()}
    hf, hb = bidirectional_pass([Tensor(np.ones(3)), Tensor(-np.ones(3))], p, p)
    assert all(np.all(h.data == 0) for h in hf + hb)
    with pytest.raises(ContractError):
        bidirectional_pass([], p, p)


def test_bidirectional_matches_longhand():
    rng = np.random.default_rng(6)
    pf, pb = lstm_params(rng), lstm_params(rng)
    x1, x2 = rng.normal(size=3), rng.normal(size=3)
    hf, hb = bidirectional_pass([Tensor(x1), Tensor(x2)], pf, pb)
    z = np.zeros(4)
    f1, cf1 = reference_cell(x1, z, z, pf)
    f2, _ = reference_cell(x2, f1, cf1, pf)
    b2, cb2 = reference_cell(x2, z, z, pb)
    b1, _ = reference_cell(x1, b2, cb2, pb)
    for got, ref in [(hf[0], f1), (hf[1], f2), (hb[0], b1), (hb[1], b2)]:
        np.testing.assert_allclose(got.data, ref, atol=1e-12, rtol=0)


def test_bidirectional_gradient():
    rng = np.random.default_rng(7)
    pf, pb = lstm_params(rng), lstm_params(rng)
    x1, x2 = Tensor(rng.normal(size=3), True), Tensor(rng.normal(size=3))
    r = Tensor(rng.normal(size=4))

    def loss():
        hf, hb = bidirectional_pass([x1, x2], pf, pb)
        return T.sum((hf[0] + hf[1] + hb[0] * 2.0 + hb[1]) * r)

    res = check("bd", loss, [x1], tol=1e-6)
    assert res.passed, res


def fuse_params(rng, d=4, d_a=8, attention=True, scale=0.7):
    return params(fusion_shapes("f", d, d, d_a, attention), rng, scale, "f")


def test_combine_y_limits():
    rng = np.random.default_rng(8)
    p = {k: T.zeros(v.shape) for k, v in fuse_params(rng).items()}
    y = combine_y(Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4)), p)
    np.testing.assert_array_equal(y.data, 0.5)
    p = fuse_params(rng)
    p["Wyb"] = T.zeros((4, 4))
    hf = Tensor(rng.normal(size=4))
    a = combine_y(hf, Tensor(rng.normal(size=4)), p).data
    b = combine_y(hf, Tensor(rng.normal(size=4)), p).data
    np.testing.assert_array_equal(a, b)
    expected = sig(p["Wyf"].data @ hf.data + p["by"].data)
    np.testing.assert_allclose(a, expected, atol=1e-15, rtol=0)


def test_combine_y_gradient():
    rng = np.random.default_rng(9)
    p = fuse_params(rng)
    hf, hb = Tensor(rng.normal(size=(3, 4)), True), Tensor(rng.normal(size=(3, 4)), True)
    r = Tensor(rng.normal(size=(3, 4)))
    res = check("y", lambda: T.sum(combine_y(hf, hb, p) * r), [hf, hb, p["Wyf"], p["Wyb"], p["by"]], tol=1e-6)
    assert res.passed, res


def test_channel_attention_equal_states():
    rng = np.random.default_rng(10)
    p = fuse_params(rng)
    y = Tensor(rng.uniform(size=(6, 4)))
    fused, beta = channel_attention([y, y], p)
    np.testing.assert_array_equal(beta.data, 0.5)
    np.testing.assert_allclose(fused.data, y.data, rtol=0, atol=1e-15)


def test_channel_attention_zero_va_is_uniform():
    rng = np.random.default_rng(11)
    p = fuse_params(rng)
    p["va"] = T.zeros((8,))
    _, beta = channel_attention([Tensor(rng.uniform(size=4)), Tensor(rng.uniform(size=4))], p)
    np.testing.assert_array_equal(beta.data, 0.5)


def test_channel_attention_matches_direct_formula():
    rng = np.random.default_rng(12)
    for scale in (1.0, 30.0):
        p = fuse_params(rng, scale=scale)
        y1, y2 = rng.uniform(size=(7, 4)), rng.uniform(size=(7, 4))
        fused, beta = channel_attention([Tensor(y1), Tensor(y2)], p)
        ref, b1, b2 = reference_attention(y1, y2, p["va"].data, p["Wa"].data)
        np.testing.assert_allclose(fused.data, ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(beta.data[:, 0], b1, rtol=0, atol=1e-12)
        np.testing.assert_allclose(beta.data[:, 1], b2, rtol=0, atol=1e-12)
        np.testing.assert_allclose(beta.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_channel_attention_disabled_is_mean_and_arity():
    rng = np.random.default_rng(13)
    p = fuse_params(rng, attention=False)
    y1, y2 = rng.uniform(size=(3, 4)), rng.uniform(size=(3, 4))
    fused, beta = channel_attention([Tensor(y1), Tensor(y2)], p, enabled=False)
    np.testing.assert_array_equal(fused.data, (y1 + y2) * 0.5)
    np.testing.assert_array_equal(beta.data, 0.5)
    with pytest.raises(ContractError):
        channel_attention([Tensor(y1)], p)


def test_channel_attention_gradient():
    rng = np.random.default_rng(14)
    p = fuse_params(rng)
    y1, y2 = Tensor(rng.uniform(size=(3, 4)), True), Tensor(rng.uniform(size=(3, 4)), True)
    r = Tensor(rng.normal(size=(3, 4)))
    res = check("att", lambda: T.sum(channel_attention([y1, y2], p)[0] * r), [y1, y2, p["va"], p["Wa"]], tol=1e-6)
    assert res.passed, res


def skip_params(rng, c=4, attention=True):
    shapes = {**lstm_shapes("s.lstm.fwd", c, c), **lstm_shapes("s.lstm.bwd", c, c),
              **fusion_shapes("s.fuse", c, c, 8, attention)}
    return params(shapes, rng, 0.6)


def test_fuse_skip_symmetric_setup_gives_y():
    # identical steps, shared direction weights and Wyf == Wyb make Y_1 == Y_2
    rng = np.random.default_rng(16)
    p = skip_params(rng)
    for k in list(p):
        if k.startswith("s.lstm.bwd."):
            p[k] = p["s.lstm.fwd." + k.split(".")[-1]]
    p["s.fuse.Wyb"] = p["s.fuse.Wyf"]
    x = Tensor(rng.normal(size=(1, 4, 2, 2)))
    out, beta = fuse_skip(x, x, p, "s")
    np.testing.assert_array_equal(beta.data, 0.5)
    rows = x.data.transpose(0, 2, 3, 1).reshape(4, 4)
    hf, hb = bidirectional_pass([Tensor(rows)] * 2, scope(p, "s.lstm.fwd"), scope(p, "s.lstm.bwd"))
    y1 = combine_y(hf[0], hb[0], scope(p, "s.fuse")).data
    np.testing.assert_allclose(out.data.transpose(0, 2, 3, 1).reshape(4, 4), y1, atol=1e-15, rtol=0)


def test_fuse_skip_spatial_equivariance():
    rng = np.random.default_rng(17)
    p = skip_params(rng)
    a, b = rng.normal(size=(2, 4, 3, 5)), rng.normal(size=(2, 4, 3, 5))
    perm = rng.permutation(15)

    def shuffle(arr):
        return arr.reshape(*arr.shape[:-2], 15)[..., perm].reshape(arr.shape)

    out, beta = fuse_skip(Tensor(a), Tensor(b), p, "s")
    out_p, beta_p = fuse_skip(Tensor(shuffle(a)), Tensor(shuffle(b)), p, "s")
    np.testing.assert_allclose(out_p.data, shuffle(out.data), atol=1e-14, rtol=0)
    np.testing.assert_allclose(beta_p.data, shuffle(beta.data), atol=1e-14, rtol=0)


@pytest.mark.parametrize("attention", [True, False])
def test_fuse_skip_single_pixel_is_vector_pipeline(attention):
    rng = np.random.default_rng(18)
    p = skip_params(rng, attention=attention)
    a, b = rng.normal(size=4), rng.normal(size=4)
    out, _ = fuse_skip(Tensor(a.reshape(1, 4, 1, 1)), Tensor(b.reshape(1, 4, 1, 1)), p, "s", attention=attention)
    hf, hb = bidirectional_pass([Tensor(a), Tensor(b)], scope(p, "s.lstm.fwd"), scope(p, "s.lstm.bwd"))
    fp = scope(p, "s.fuse")
    ys = [combine_y(hf[t], hb[t], fp) for t in range(2)]
    fused, _ = channel_attention(ys, fp, enabled=attention)
    np.testing.assert_array_equal(out.data.reshape(4), fused.data)


def test_fuse_skip_gradient():
    rng = np.random.default_rng(19)
    p = skip_params(rng)
    a, b = Tensor(rng.normal(size=(1, 4, 4, 4)), True), Tensor(rng.normal(size=(1, 4, 4, 4)), True)
    r = Tensor(rng.normal(size=(1, 4, 4, 4)))
    res = check("fuse", lambda: T.sum(fuse_skip(a, b, p, "s")[0] * r), [a, b, *p.values()], tol=1e-4,
                sample=60, rng=rng)
    assert res.passed, res
