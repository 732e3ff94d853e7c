"""Bidirectional-LSTM skip fusion with channel attention.

At every pixel the encoder feature and the up-sampled decoder feature form a
two-step sequence.  A bidirectional LSTM runs over it, the two directions are
merged per step into ``Y_t``, and softmax weights over the two steps (resolved
per channel) produce the fused vector.  All weights are shared across pixels,
so the pixel grid is flattened into the batch dimension.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor

GATES = ("i", "f", "o", "c")


def lstm_shapes(prefix: str, d_in: int, d_h: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for q in GATES:
        shapes[f"{prefix}.W{q}"] = (d_h, d_in)
        shapes[f"{prefix}.U{q}"] = (d_h, d_h)
        shapes[f"{prefix}.b{q}"] = (d_h,)
    return shapes


def fusion_shapes(prefix: str, d_h: int, d_out: int, d_a: int, attention: bool = True) -> dict[str, tuple[int, ...]]:
    shapes = {
        f"{prefix}.Wyf": (d_out, d_h),
        f"{prefix}.Wyb": (d_out, d_h),
        f"{prefix}.by": (d_out,),
    }
    if attention:
        shapes[f"{prefix}.va"] = (d_a,)
        shapes[f"{prefix}.Wa"] = (d_a, 2)
    return shapes


def scope(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Strip ``prefix.`` from matching keys."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match map {w.shape}")
    out = T.matmul(x, T.transpose(w))
    return out + b if b is not None else out


def _as_rows(v: Tensor) -> tuple[Tensor, bool]:
    if v.ndim == 1:
        return T.reshape(v, (1, v.shape[0])), True
    return v, False


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, p: Mapping[str, Tensor],
              cell_activation: str = "identity") -> tuple[Tensor, Tensor]:
    """One LSTM step; accepts vectors or row-batches [P, D].

    Gate/parameter pairing is the conventional one (input gate uses W_i, forget
    gate uses W_f). Swapping the two subscripts would only relabel parameters.
    """
    x, vec = _as_rows(x_t)
    h, _ = _as_rows(h_prev)
    c, _ = _as_rows(c_prev)
    d_h = p["Wi"].shape[0]
    if h.shape[-1] != d_h or c.shape[-1] != d_h:
        raise ShapeError(f"state width {h.shape[-1]}/{c.shape[-1]} != hidden size {d_h}")

    state = _lstm_step(x, h, c, p, cell_activation)
    h_t, c_t = state[:, :d_h], state[:, d_h:]
    if vec:
        return T.reshape(h_t, (d_h,)), T.reshape(c_t, (d_h,))
    return h_t, c_t


def _lstm_step(x: Tensor, h: Tensor, c: Tensor, p: Mapping[str, Tensor], cell_activation: str) -> Tensor:
    """Fused cell: one tape node returning ``[h_t | c_t]`` as [P, 2*D_h]."""
    if cell_activation not in ("identity", "tanh"):
        raise ValueError(f"unsupported cell activation {cell_activation!r}")
    d_h = p["Wi"].shape[0]
    ws = [p[f"W{q}"] for q in GATES]
    us = [p[f"U{q}"] for q in GATES]
    bs = [p[f"b{q}"] for q in GATES]
    if x.shape[-1] != ws[0].shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match W {ws[0].shape}")
    w_all = np.concatenate([w.data for w in ws], axis=0)
    u_all = np.concatenate([u.data for u in us], axis=0)
    b_all = np.concatenate([b.data for b in bs])
    xd, hd, cd = x.data, h.data, c.data

    pre = xd @ w_all.T
    pre += b_all
    if hd.any():
        pre += hd @ u_all.T
    gates = expit(pre[:, :3 * d_h])
    i_t, f_t, o_t = gates[:, :d_h], gates[:, d_h:2 * d_h], gates[:, 2 * d_h:]
    g_t = np.tanh(pre[:, 3 * d_h:])
    c_t = f_t * cd + i_t * g_t
    act = c_t if cell_activation == "identity" else np.tanh(c_t)
    h_t = o_t * act
    out = np.concatenate([h_t, c_t], axis=1)

    def grad_fn(g):
        gh, gc = g[:, :d_h], g[:, d_h:]
        d_o = gh * act
        dc = gh * o_t
        if cell_activation == "tanh":
            dc = dc * (1.0 - act * act)
        dc = dc + gc
        dpre = np.empty_like(pre)
        dpre[:, :d_h] = dc * g_t * i_t * (1.0 - i_t)
        dpre[:, d_h:2 * d_h] = dc * cd * f_t * (1.0 - f_t)
        dpre[:, 2 * d_h:3 * d_h] = d_o * o_t * (1.0 - o_t)
        dpre[:, 3 * d_h:] = dc * i_t * (1.0 - g_t * g_t)
        dx = dpre @ w_all
        dh = dpre @ u_all
        dw = dpre.T @ xd
        du = dpre.T @ hd
        db = dpre.sum(axis=0)
        split = [slice(k * d_h, (k + 1) * d_h) for k in range(4)]
        return (dx, dh, dc * f_t, *[dw[sl] for sl in split], *[du[sl] for sl in split],
                *[db[sl] for sl in split])

    return T.record(out, (x, h, c, *ws, *us, *bs), grad_fn)


def bidirectional_pass(seq: Sequence[Tensor], p_fwd: Mapping[str, Tensor], p_bwd: Mapping[str, Tensor],
                       cell_activation: str = "identity") -> tuple[list[Tensor], list[Tensor]]:
    """Run both directions from zero state; outputs are indexed by timestep."""
    if len(seq) == 0:
        raise ContractError("bidirectional_pass needs a non-empty sequence")

    def run(order, p):
        d_h = p["Wi"].shape[0]
        lead = seq[0].shape[:-1]
        h = T.zeros(lead + (d_h,))
        c = T.zeros(lead + (d_h,))
        states = {}
        for t in order:
            h, c = lstm_cell(seq[t], h, c, p, cell_activation)
            states[t] = h
        return [states[t] for t in range(len(seq))]

    n = len(seq)
    return run(range(n), p_fwd), run(range(n - 1, -1, -1), p_bwd)


def combine_y(h_fwd: Tensor, h_bwd: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """sigmoid(Wyf h_fwd + Wyb h_bwd + by)."""
    hf, vec = _as_rows(h_fwd)
    hb, _ = _as_rows(h_bwd)
    y = T.sigmoid(_affine(hf, p["Wyf"]) + _affine(hb, p["Wyb"], p["by"]))
    return T.reshape(y, (y.shape[1],)) if vec else y


def channel_attention(states: Sequence[Tensor], p: Mapping[str, Tensor],
                      enabled: bool = True) -> tuple[Tensor, Tensor]:
    """Softmax-weight the two combined states channel by channel.

    The query is the mean of the two states.  For channel ``c`` and step
    ``i`` the score is ``va . sigmoid(Wa [s_c, Y_i,c])`` with ``Wa`` shared by
    all channels.  Returns ``(fused, beta)`` with beta shaped [..., 2, C].
    With ``enabled=False`` the fusion is the plain mean and beta is 0.5.
    """
    if len(states) != 2:
        raise ContractError(f"channel_attention expects exactly 2 states, got {len(states)}")
    y1, vec = _as_rows(states[0])
    y2, _ = _as_rows(states[1])
    if y1.shape != y2.shape:
        raise ShapeError(f"state shapes differ: {y1.shape} vs {y2.shape}")
    rows, ch = y1.shape
    if not enabled:
        fused = (y1 + y2) * 0.5
        beta = np.full((rows, 2, ch), 0.5)
    else:
        fused, beta = _attend(y1, y2, p["va"], p["Wa"])
    if vec:
        return T.reshape(fused, (ch,)), T.Tensor(beta.reshape(2, ch))
    return fused, T.Tensor(beta)


def _squash(z: np.ndarray) -> np.ndarray:
    """In-place logistic via tanh; absolute error stays at rounding level."""
    z *= 0.5
    np.tanh(z, out=z)
    z *= 0.5
    z += 0.5
    return z


def _attend(y1: Tensor, y2: Tensor, va: Tensor, wa: Tensor) -> tuple[Tensor, np.ndarray]:
    """Fused score/softmax/weighting; beta is returned as a plain array."""
    if wa.shape != (va.shape[0], 2):
        raise ShapeError(f"Wa must be [{va.shape[0]}, 2], got {wa.shape}")
    a, b = y1.data, y2.data
    v, w0, w1 = va.data, wa.data[:, 0], wa.data[:, 1]
    s = 0.5 * (a + b)
    zs = s[:, :, None] * w0
    acts = []
    for y in (a, b):
        z = y[:, :, None] * w1
        z += zs
        acts.append(_squash(z))
    del zs
    e1, e2 = acts[0] @ v, acts[1] @ v
    top = np.maximum(e1, e2)
    x1, x2 = np.exp(e1 - top), np.exp(e2 - top)
    den = x1 + x2
    b1, b2 = x1 / den, x2 / den
    fused = b1 * a + b2 * b

    def grad_fn(g):
        de1 = b1 * b2 * (g * a - g * b)
        dva = np.tensordot(acts[0], de1, axes=([0, 1], [0, 1])) - np.tensordot(acts[1], de1, axes=([0, 1], [0, 1]))
        dz1 = acts[0] * (1.0 - acts[0])
        dz1 *= de1[:, :, None] * v
        dz2 = acts[1] * (1.0 - acts[1])
        dz2 *= (-de1)[:, :, None] * v
        dzs = dz1 + dz2
        dw0 = np.tensordot(dzs, s, axes=([0, 1], [0, 1]))
        dw1 = np.tensordot(dz1, a, axes=([0, 1], [0, 1])) + np.tensordot(dz2, b, axes=([0, 1], [0, 1]))
        half_ds = 0.5 * (dzs @ w0)
        dy1 = g * b1 + dz1 @ w1 + half_ds
        dy2 = g * b2 + dz2 @ w1 + half_ds
        return dy1, dy2, dva, np.stack([dw0, dw1], axis=1)

    out = T.record(fused, (y1, y2, va, wa), grad_fn)
    return out, np.stack([b1, b2], axis=1)


def fuse_skip(encoded: Tensor, upsampled: Tensor, params: Mapping[str, Tensor], prefix: str,
              attention: bool = True, cell_activation: str = "identity") -> tuple[Tensor, Tensor]:
    """Fuse two same-shaped [N,C,H,W] maps pixel by pixel.

    Returns the fused map and beta as [N,2,C,H,W].
    """
    if encoded.shape != upsampled.shape or encoded.ndim != 4:
        raise ShapeError(f"{prefix}: encoded {encoded.shape} vs upsampled {upsampled.shape}")
    n, c, h, w = encoded.shape

    def rows(t):
        return T.reshape(T.transpose(t, (0, 2, 3, 1)), (n * h * w, c))

    seq = [rows(encoded), rows(upsampled)]
    hf, hb = bidirectional_pass(seq, scope(params, f"{prefix}.lstm.fwd"), scope(params, f"{prefix}.lstm.bwd"),
                                cell_activation)
    fp = scope(params, f"{prefix}.fuse")
    ys = [combine_y(hf[t], hb[t], fp) for t in range(2)]
    fused, beta = channel_attention(ys, fp, enabled=attention)
    out = T.transpose(T.reshape(fused, (n, h, w, c)), (0, 3, 1, 2))
    beta_map = beta.data.reshape(n, h, w, 2, c).transpose(0, 3, 4, 1, 2)
    return out, T.Tensor(beta_map)
