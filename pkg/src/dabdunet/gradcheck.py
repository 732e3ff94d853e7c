"""Central finite-difference gradient checking.

The checker perturbs raw parameter arrays in place and re-evaluates a scalar
function without any tape, so it shares nothing with the reverse-mode path it
verifies beyond the forward arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def rel_error(analytic, numeric) -> np.ndarray:
    """|g - g_hat| / max(1, |g|, |g_hat|), elementwise."""
    g = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(g - n) / np.maximum(1.0, np.maximum(np.abs(g), np.abs(n)))


def numeric_grad(fn: Callable[[], float], t: Tensor, h: float = 1e-5,
                 indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of ``fn`` with respect to entries of ``t``.

    When ``indices`` is given only those entries are perturbed and the result
    is a flat array in the same order.
    """
    flat = t.data.reshape(-1)
    if indices is None:
        positions = range(flat.size)
    else:
        positions = [int(np.ravel_multi_index(ix, t.shape)) for ix in indices]
    out = np.empty(len(positions))
    for k, pos in enumerate(positions):
        orig = flat[pos]
        flat[pos] = orig + h
        fp = fn()
        flat[pos] = orig - h
        fm = fn()
        flat[pos] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out if indices is not None else out.reshape(t.shape)


def analytic_grads(fn: Callable[[], Tensor], wrt: Sequence[Tensor]) -> list[np.ndarray]:
    saved = [w.requires_grad for w in wrt]
    for w in wrt:
        w.requires_grad = True
        w.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    grads = [w.grad if w.grad is not None else np.zeros_like(w.data) for w in wrt]
    for w, s in zip(wrt, saved):
        w.requires_grad = s
        w.grad = None
    return grads


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    checked: int = 0
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def check(name: str, fn: Callable[[], Tensor], wrt: Sequence[Tensor], tol: float = 1e-4,
          h: float = 1e-5, sample: int | None = None, rng: np.random.Generator | None = None) -> CheckResult:
    """Compare reverse-mode and finite-difference gradients of scalar ``fn``.

    ``sample`` limits the comparison to that many randomly chosen scalar
    entries across all of ``wrt``.
    """
    grads = analytic_grads(fn, wrt)

    def value() -> float:
        return float(fn().data.reshape(-1)[0])

    worst = 0.0
    count = 0
    if sample is None:
        for w, g in zip(wrt, grads):
            num = numeric_grad(value, w, h)
            worst = max(worst, float(rel_error(g, num).max(initial=0.0)))
            count += w.size
    else:
        rng = rng or np.random.default_rng(0)
        sizes = np.array([w.size for w in wrt])
        picks = rng.choice(int(sizes.sum()), size=min(sample, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        for p in np.sort(picks):
            k = int(np.searchsorted(bounds, p, side="right"))
            local = int(p - (bounds[k - 1] if k else 0))
            ix = np.unravel_index(local, wrt[k].shape)
            num = numeric_grad(value, wrt[k], h, indices=[ix])[0]
            worst = max(worst, float(rel_error(grads[k][ix], num)))
            count += 1
    return CheckResult(name, worst, tol, count)


# ---------------------------------------------------------------------------
# suite run by the ``gradcheck`` command

SMOOTH_TOL = 1e-6
KINKED_TOL = 1e-4


def _cases():
    """Yield ``(name, tol, setup)``; ``setup(rng)`` returns ``(fn, wrt, sample)``."""
    from . import tensor as T
    from .blocks import DenseBlockConfig, attention_gate, attention_gate_shapes, dense_block, transition_down, transition_up
    from .fusion import bidirectional_pass, channel_attention, combine_y, fuse_skip, fusion_shapes, lstm_cell, lstm_shapes
    from .model import ModelConfig, build
    from .train import soft_dice_loss

    def leaf(rng, *shape, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale)

    def params(rng, shapes, scale=0.5):
        return {k: Tensor(rng.normal(size=s) * scale) for k, s in shapes.items()}

    def short(p, prefix):
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in p.items()}

    def weighted(build_out, wrt, rng, sample=None):
        out = build_out()
        r = rng.normal(size=out.shape)
        return (lambda: T.sum(build_out() * r)), wrt, sample

    def elementwise(kind):
        def setup(rng):
            a, b, bias = leaf(rng, 3, 4), leaf(rng, 3, 4), leaf(rng, 4)
            if kind == "div":  # divisors bounded away from zero
                b = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)))
                bias = Tensor(rng.uniform(0.5, 2.0, size=4))
            return weighted(lambda: T.elementwise(kind, T.elementwise(kind, a, b), bias), [a, b, bias], rng)
        return setup

    def activation(kind):
        def setup(rng):
            x = leaf(rng, 4, 5)
            if kind == "relu":  # keep away from the kink
                x.data += np.sign(x.data) * 0.05
            return weighted(lambda: T.activation(kind, x), [x], rng)
        return setup

    def matmul(rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        return (lambda: T.sum(T.matmul(a, b))), [a, b], None

    def conv(stride, pad):
        def setup(rng):
            x, w, b = leaf(rng, 1, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
            return weighted(lambda: T.conv2d(x, w, b, stride, pad), [x, w, b], rng)
        return setup

    def pool_up(rng):
        x = leaf(rng, 1, 1, 4, 4)
        return weighted(lambda: T.upsample2d(T.maxpool2d(x), 2), [x], rng)

    def concat_reduce(rng):
        a, b = leaf(rng, 2, 2, 3, 3), leaf(rng, 2, 3, 3, 3)
        return weighted(lambda: T.reduce(T.concat([a, b], axis=1), "mean", axis=(2, 3)), [a, b], rng)

    def softmax(rng):
        x = leaf(rng, 5, scale=2.0)
        return weighted(lambda: T.softmax(x, axis=0), [x], rng)

    def dense(rng):
        cfg = DenseBlockConfig(3, 2, 4)
        p = params(rng, cfg.param_shapes("b"))
        x = leaf(rng, 1, 3, 6, 6)
        return weighted(lambda: dense_block(x, p, "b", cfg), [x, *p.values()], rng, sample=60)

    def transitions(rng):
        x = leaf(rng, 1, 8, 8, 8)
        wd, bd = leaf(rng, 4, 8, 1, 1, scale=0.5), leaf(rng, 4)
        wu, bu = leaf(rng, 8, 4, 3, 3, scale=0.5), leaf(rng, 8)
        return weighted(lambda: transition_up(transition_down(x, wd, bd), wu, bu), [x, wd, bd, wu, bu], rng,
                        sample=60)

    def gate(rng):
        p = params(rng, attention_gate_shapes("ag", 4, 6, 2))
        x, g = leaf(rng, 1, 4, 8, 8), leaf(rng, 1, 6, 4, 4)
        return weighted(lambda: attention_gate(x, g, p, "ag")[0], [x, g, *p.values()], rng, sample=80)

    def cell(rng):
        p = short(params(rng, lstm_shapes("l", 3, 4)), "l")
        x, h, c = leaf(rng, 3), leaf(rng, 4), leaf(rng, 4)
        r1, r2 = rng.normal(size=4), rng.normal(size=4)

        def fn():
            h_t, c_t = lstm_cell(x, h, c, p)
            return T.sum(h_t * r1) + T.sum(c_t * r2)
        return fn, [x, h, c, *p.values()], None

    def bidir(rng):
        pf = short(params(rng, lstm_shapes("f", 3, 4)), "f")
        pb = short(params(rng, lstm_shapes("b", 3, 4)), "b")
        x1, x2 = leaf(rng, 3), leaf(rng, 3)
        rs = [rng.normal(size=4) for _ in range(4)]

        def fn():
            hf, hb = bidirectional_pass([x1, x2], pf, pb)
            return T.sum(hf[0] * rs[0]) + T.sum(hf[1] * rs[1]) + T.sum(hb[0] * rs[2]) + T.sum(hb[1] * rs[3])
        return fn, [x1, x2, *pf.values(), *pb.values()], None

    def combine(rng):
        p = short(params(rng, fusion_shapes("u", 4, 5, 3, attention=False)), "u")
        hf, hb = leaf(rng, 4), leaf(rng, 4)
        return weighted(lambda: combine_y(hf, hb, p), [hf, hb, *p.values()], rng)

    def attend(rng):
        p = short(params(rng, fusion_shapes("u", 4, 5, 3), scale=1.0), "u")
        y1, y2 = Tensor(rng.uniform(size=5)), Tensor(rng.uniform(size=5))
        return weighted(lambda: channel_attention([y1, y2], p)[0], [y1, y2, p["va"], p["Wa"]], rng)

    def fuse(rng):
        shapes = {**lstm_shapes("s.lstm.fwd", 4, 4), **lstm_shapes("s.lstm.bwd", 4, 4),
                  **fusion_shapes("s.fuse", 4, 4, 3)}
        p = params(rng, shapes)
        e, u = leaf(rng, 1, 4, 4, 4), leaf(rng, 1, 4, 4, 4)
        return weighted(lambda: fuse_skip(e, u, p, "s")[0], [e, u, *p.values()], rng, sample=80)

    def dice(rng):
        prob = Tensor(rng.uniform(0.05, 0.95, size=(8, 8)))
        y = (rng.uniform(size=(8, 8)) < 0.4).astype(float)
        return (lambda: soft_dice_loss(prob, y)), [prob], None

    def full_model(rng):
        cfg = ModelConfig(height=16, width=16, seed=int(rng.integers(1 << 30)))
        model = build(cfg)
        x = Tensor(rng.uniform(size=(1, 1, 16, 16)))
        y = (rng.uniform(size=(1, 1, 16, 16)) < 0.3).astype(float)
        return (lambda: soft_dice_loss(model(x), y)), model.parameters(), 20

    yield "elementwise.add", SMOOTH_TOL, elementwise("add")
    yield "elementwise.sub", SMOOTH_TOL, elementwise("sub")
    yield "elementwise.mul", SMOOTH_TOL, elementwise("mul")
    yield "elementwise.div", SMOOTH_TOL, elementwise("div")
    for kind in ("sigmoid", "tanh", "identity"):
        yield f"activation.{kind}", SMOOTH_TOL, activation(kind)
    yield "activation.relu", KINKED_TOL, activation("relu")
    yield "matmul", SMOOTH_TOL, matmul
    yield "conv2d.s1p1", KINKED_TOL, conv(1, 1)
    yield "conv2d.s2p0", KINKED_TOL, conv(2, 0)
    yield "maxpool2d+upsample2d", SMOOTH_TOL, pool_up
    yield "concat+reduce", SMOOTH_TOL, concat_reduce
    yield "softmax", SMOOTH_TOL, softmax
    yield "dense_block", KINKED_TOL, dense
    yield "transition_down+up", KINKED_TOL, transitions
    yield "attention_gate", KINKED_TOL, gate
    yield "lstm_cell", SMOOTH_TOL, cell
    yield "bidirectional_pass", SMOOTH_TOL, bidir
    yield "combine_y", SMOOTH_TOL, combine
    yield "channel_attention", SMOOTH_TOL, attend
    yield "fuse_skip", KINKED_TOL, fuse
    yield "soft_dice_loss", SMOOTH_TOL, dice
    yield "model", KINKED_TOL, full_model


def run_suite(seed: int = 0, repeats: int = 5, only: Sequence[str] | None = None) -> list[CheckResult]:
    """Every case on ``repeats`` independent seeds derived from ``seed``."""
    results = []
    for name, tol, setup in _cases():
        if only and not any(name.startswith(o) for o in only):
            continue
        for r in range(repeats):
            rng = np.random.default_rng([seed, r, _stable_hash(name)])
            fn, wrt, sample = setup(rng)
            res = check(name, fn, wrt, tol=tol, sample=sample, rng=rng)
            res.details["repeat"] = r
            results.append(res)
    return results


def _stable_hash(name: str) -> int:
    import zlib

    return zlib.crc32(name.encode("utf-8"))
