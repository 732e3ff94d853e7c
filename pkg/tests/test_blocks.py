import numpy as np
import pytest

from dabdunet import tensor as T
from dabdunet.blocks import (
    DenseBlockConfig,
    attention_gate,
    attention_gate_shapes,
    attention_width,
    dense_block,
    transition_down,
    transition_up,
)
from dabdunet.gradcheck import check
from dabdunet.tensor import ShapeError, Tensor


def random_params(shapes, rng, scale=0.5):
    return {k: Tensor(rng.normal(scale=scale, size=s), requires_grad=True) for k, s in shapes.items()}


def test_dense_block_channel_arithmetic():
    cfg = DenseBlockConfig(in_channels=3, num_layers=2, growth_rate=4)
    p = random_params(cfg.param_shapes("b"), np.random.default_rng(0))
    out = dense_block(T.zeros((1, 3, 8, 8)), p, "b", cfg)
    assert out.shape == (1, 11, 8, 8) == (1, cfg.out_channels, 8, 8)


def test_dense_block_rejects_bad_config_and_input():
    with pytest.raises(ValueError):
        DenseBlockConfig(3, num_layers=0)
    cfg = DenseBlockConfig(3, 2, 4)
    p = random_params(cfg.param_shapes("b"), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        dense_block(T.zeros((1, 2, 8, 8)), p, "b", cfg)


def test_dense_block_zero_weights_pass_input_through():
    cfg = DenseBlockConfig(3, 2, 4)
    p = {k: T.zeros(s) for k, s in cfg.param_shapes("b").items()}
    x = np.random.default_rng(1).normal(size=(1, 3, 8, 8))
    out = dense_block(Tensor(x), p, "b", cfg).data
    np.testing.assert_array_equal(out[:, :3], x)
    np.testing.assert_array_equal(out[:, 3:], 0.0)


def test_dense_connectivity_by_layer_ablation():
    """Zeroing layer 0 changes only its own slice and the slices of later layers."""
    cfg = DenseBlockConfig(3, 3, 2)
    rng = np.random.default_rng(2)
    p = random_params(cfg.param_shapes("b"), rng)
    x = Tensor(rng.normal(size=(1, 3, 6, 6)))
    base = dense_block(x, p, "b", cfg).data

    def kill(target):
        return lambda j, out: T.zeros(out.shape) if j == target else out

    for j in range(cfg.num_layers):
        out = dense_block(x, p, "b", cfg, layer_hook=kill(j)).data
        start = cfg.layer_in_channels(j)
        np.testing.assert_array_equal(out[:, :start], base[:, :start])
        np.testing.assert_array_equal(out[:, start:start + 2], 0.0)
        # every later layer reads layer j's output, so its slice must move
        for later in range(j + 1, cfg.num_layers):
            s = cfg.layer_in_channels(later)
            assert not np.array_equal(out[:, s:s + 2], base[:, s:s + 2])


def test_dense_block_param_count_closed_form():
    # sum over layers of k*(C + j*k)*9 + k, counted independently
    for c, layers, k in [(3, 2, 4), (16, 2, 8), (5, 4, 3)]:
        cfg = DenseBlockConfig(c, layers, k)
        counted = sum(int(np.prod(s)) for s in cfg.param_shapes("b").values())
        expected = sum(9 * k * (c + j * k) + k for j in range(layers))
        assert counted == expected == cfg.param_count()


def test_dense_block_gradient():
    cfg = DenseBlockConfig(2, 2, 3)
    rng = np.random.default_rng(3)
    p = random_params(cfg.param_shapes("b"), rng)
    x = Tensor(rng.normal(size=(1, 2, 5, 5)))
    r = Tensor(rng.normal(size=(1, 8, 5, 5)))
    res = check("dense", lambda: T.sum(dense_block(x, p, "b", cfg) * r), [p["b.layer1.w"]], tol=1e-4)
    assert res.passed, res


def test_transitions():
    rng = np.random.default_rng(4)
    down = transition_down(T.zeros((1, 8, 16, 16)), Tensor(rng.normal(size=(4, 8, 1, 1))), T.zeros((4,)))
    assert down.shape == (1, 4, 8, 8)
    up = transition_up(T.zeros((1, 4, 8, 8)), Tensor(rng.normal(size=(8, 4, 3, 3))), T.zeros((8,)))
    assert up.shape == (1, 8, 16, 16)


def test_transition_round_trip_gradient():
    rng = np.random.default_rng(5)
    wd, bd = Tensor(rng.normal(size=(2, 4, 1, 1)), True), Tensor(rng.normal(size=2), True)
    wu, bu = Tensor(rng.normal(size=(4, 2, 3, 3)), True), Tensor(rng.normal(size=4), True)
    x = Tensor(rng.normal(size=(1, 4, 8, 8)), True)
    r = Tensor(rng.normal(size=(1, 4, 8, 8)))
    res = check("trans", lambda: T.sum(transition_up(transition_down(x, wd, bd), wu, bu) * r),
                [x, wd, bd, wu, bu], tol=1e-4)
    assert res.passed, res


def gate_params(rng, f_l=4, f_g=6):
    return random_params(attention_gate_shapes("ag", f_l, f_g, attention_width(f_l)), rng)


def test_attention_gate_range_and_shape():
    rng = np.random.default_rng(6)
    p = gate_params(rng)
    x, g = Tensor(rng.normal(size=(2, 4, 8, 8))), Tensor(rng.normal(size=(2, 6, 4, 4)))
    out, alpha = attention_gate(x, g, p, "ag")
    assert alpha.shape == (2, 1, 8, 8) and out.shape == x.shape
    assert np.all(alpha.data > 0) and np.all(alpha.data < 1)


def test_attention_gate_constant_half():
    rng = np.random.default_rng(7)
    p = gate_params(rng)
    p["ag.psi"].data[:] = 0.0
    p["ag.bpsi"].data[:] = 0.0
    x, g = Tensor(rng.normal(size=(1, 4, 8, 8))), Tensor(rng.normal(size=(1, 6, 4, 4)))
    out, alpha = attention_gate(x, g, p, "ag")
    np.testing.assert_array_equal(alpha.data, 0.5)
    np.testing.assert_array_equal(out.data, 0.5 * x.data)


def test_attention_gate_saturates_open():
    rng = np.random.default_rng(8)
    p = gate_params(rng)
    p["ag.psi"].data[:] = 0.0
    p["ag.bpsi"].data[:] = 20.0
    x, g = Tensor(rng.normal(size=(1, 4, 8, 8))), Tensor(rng.normal(size=(1, 6, 4, 4)))
    out, alpha = attention_gate(x, g, p, "ag")
    assert alpha.data.min() >= 1 - 1e-8
    np.testing.assert_allclose(out.data, x.data, atol=1e-8 * np.abs(x.data).max())


def test_attention_gate_constant_alpha_scales_exactly():
    rng = np.random.default_rng(9)
    p = gate_params(rng)
    p["ag.psi"].data[:] = 0.0
    p["ag.bpsi"].data[:] = 1.3
    x, g = Tensor(rng.normal(size=(1, 4, 8, 8))), Tensor(rng.normal(size=(1, 6, 4, 4)))
    out, alpha = attention_gate(x, g, p, "ag")
    c = alpha.data.flat[0]
    np.testing.assert_array_equal(alpha.data, c)
    np.testing.assert_array_equal(out.data, c * x.data)


def test_attention_gate_grid_check():
    rng = np.random.default_rng(10)
    p = gate_params(rng)
    with pytest.raises(ShapeError):
        attention_gate(T.zeros((1, 4, 8, 8)), T.zeros((1, 6, 3, 3)), p, "ag")


def test_attention_gate_gradients():
    rng = np.random.default_rng(11)
    p = gate_params(rng)
    x, g = Tensor(rng.normal(size=(1, 4, 8, 8)), True), Tensor(rng.normal(size=(1, 6, 4, 4)), True)
    r = Tensor(rng.normal(size=(1, 4, 8, 8)))
    res = check("ag", lambda: T.sum(attention_gate(x, g, p, "ag")[0] * r), [x, g, *p.values()], tol=1e-4)
    assert res.passed, res
