"""Convolutional building blocks: dense blocks, transitions, attention gate.

Blocks are plain functions of ``(input, params)``.  ``params`` is any mapping
from full parameter name to :class:`Tensor`; the ``prefix`` argument selects
the block's entries, e.g. ``enc1.block`` or ``ag2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class DenseBlockConfig:
    in_channels: int
    num_layers: int = 2
    growth_rate: int = 8

    def __post_init__(self):
        if self.num_layers < 1 or self.growth_rate < 1 or self.in_channels < 1:
            raise ValueError(f"invalid dense block config {self}")

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.num_layers * self.growth_rate

    def layer_in_channels(self, j: int) -> int:
        return self.in_channels + j * self.growth_rate

    def param_shapes(self, prefix: str) -> dict[str, tuple[int, ...]]:
        shapes = {}
        k = self.growth_rate
        for j in range(self.num_layers):
            shapes[f"{prefix}.layer{j}.w"] = (k, self.layer_in_channels(j), 3, 3)
            shapes[f"{prefix}.layer{j}.b"] = (k,)
        return shapes

    def param_count(self) -> int:
        k = self.growth_rate
        return sum(9 * k * self.layer_in_channels(j) + k for j in range(self.num_layers))


def dense_block(x: Tensor, params: Mapping[str, Tensor], prefix: str, cfg: DenseBlockConfig,
                layer_hook=None) -> Tensor:
    """Each layer sees the concatenation of the block input and all earlier layer outputs.

    Composite layer is ReLU followed by a padded 3x3 conv producing
    ``growth_rate`` channels.  ``layer_hook(j, out)`` may replace a layer's
    output (used to probe connectivity).
    """
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"{prefix}: expected {cfg.in_channels} input channels, got {x.shape}")
    features = [x]
    for j in range(cfg.num_layers):
        inp = features[0] if len(features) == 1 else T.concat(features, axis=1)
        out = T.conv2d(T.relu(inp), params[f"{prefix}.layer{j}.w"], params[f"{prefix}.layer{j}.b"],
                       padding=1)
        if layer_hook is not None:
            out = layer_hook(j, out)
        features.append(out)
    return T.concat(features, axis=1)


def compressed_channels(channels: int, theta: float) -> int:
    return max(1, int(math.floor(theta * channels)))


def transition_down(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 channel compression, then 2x2 max pooling."""
    return T.maxpool2d(T.conv2d(x, w, b), 2, 2)


def transition_up(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Nearest 2x upsampling, then a padded 3x3 conv."""
    return T.conv2d(T.upsample2d(x, 2), w, b, padding=1)


def attention_width(f_l: int) -> int:
    return int(math.ceil(f_l / 2))


def attention_gate_shapes(prefix: str, f_l: int, f_g: int, f_a: int) -> dict[str, tuple[int, ...]]:
    # kernels are stored as [out, in, 1, 1], i.e. the transposes of W_x, W_g, psi
    return {
        f"{prefix}.wx": (f_a, f_l, 1, 1),
        f"{prefix}.wg": (f_a, f_g, 1, 1),
        f"{prefix}.bg": (f_a,),
        f"{prefix}.psi": (1, f_a, 1, 1),
        f"{prefix}.bpsi": (1,),
    }


def attention_gate(x: Tensor, g: Tensor, params: Mapping[str, Tensor], prefix: str) -> tuple[Tensor, Tensor]:
    """Gate skip features ``x`` with a per-pixel coefficient computed from ``x`` and ``g``.

    Returns ``(x * alpha, alpha)`` where ``alpha`` is [N,1,H,W].  ``g`` may sit
    on the same grid as ``x`` or one level coarser; in the latter case its
    projection is nearest-upsampled (a 1x1 conv commutes with that).
    """
    if x.ndim != 4 or g.ndim != 4 or x.shape[0] != g.shape[0]:
        raise ShapeError(f"{prefix}: incompatible x {x.shape} and g {g.shape}")
    h, w = x.shape[2:]
    hg, wg = g.shape[2:]
    if (hg, wg) == (h, w):
        factor = 1
    elif (2 * hg, 2 * wg) == (h, w):
        factor = 2
    else:
        raise ShapeError(f"{prefix}: gating grid {hg}x{wg} is neither {h}x{w} nor half of it")
    gproj = T.conv2d(g, params[f"{prefix}.wg"], params[f"{prefix}.bg"])
    if factor == 2:
        gproj = T.upsample2d(gproj, 2)
    xproj = T.conv2d(x, params[f"{prefix}.wx"])
    q = T.conv2d(T.relu(xproj + gproj), params[f"{prefix}.psi"], params[f"{prefix}.bpsi"])
    alpha = T.sigmoid(q)
    return x * alpha, alpha
