"""DA-BDense-UNet assembly, ablation variants and weight files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import dtf
from . import tensor as T
from .blocks import (
    DenseBlockConfig,
    attention_gate,
    attention_gate_shapes,
    attention_width,
    compressed_channels,
    dense_block,
    transition_down,
    transition_up,
)
from .fusion import fuse_skip, fusion_shapes, lstm_shapes
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    pass


class WeightsError(ValueError):
    """Weight file does not match the schema derived from the config."""

    def __init__(self, missing: list[str], extra: list[str], mismatched: list[str] | None = None):
        self.missing = missing
        self.extra = extra
        self.mismatched = mismatched or []
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if extra:
            parts.append("unexpected: " + ", ".join(extra))
        if self.mismatched:
            parts.append("shape mismatch: " + ", ".join(self.mismatched))
        super().__init__("weight schema mismatch; " + "; ".join(parts))


VARIANT_FLAGS = {
    # name: (use_attention_gate, use_lstm_attention, use_bdlstm)
    "UNet-skip-concat": (False, False, False),
    "BDLSTM-DenseUNet": (False, False, True),
    "BDense-UNet-1": (False, True, True),
    "BDense-UNet-2": (True, False, True),
    "DA-BDense-UNet": (True, True, True),
}
VARIANTS = tuple(VARIANT_FLAGS)


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 4
    stem_channels: int = 16
    growth_rate: int = 8
    block_layers: int = 2
    compression: float = 0.5
    height: int = 32
    width: int = 32
    attention_dim: int = 8
    cell_activation: str = "identity"
    use_attention_gate: bool = True
    use_lstm_attention: bool = True
    use_bdlstm: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        step = 2 ** self.levels
        if self.height % step or self.width % step:
            raise ConfigError(
                f"input {self.height}x{self.width} not divisible by 2**levels = {step}"
            )
        if min(self.stem_channels, self.growth_rate, self.block_layers, self.attention_dim) < 1:
            raise ConfigError("channel counts must be positive")
        if not 0 < self.compression <= 1:
            raise ConfigError("compression must lie in (0, 1]")
        if self.cell_activation not in ("identity", "tanh"):
            raise ConfigError("cell_activation must be 'identity' or 'tanh'")
        if self.use_lstm_attention and not self.use_bdlstm:
            raise ConfigError("LSTM attention requires the BD-LSTM skip fusion")

    @property
    def variant(self) -> str:
        flags = (self.use_attention_gate, self.use_lstm_attention, self.use_bdlstm)
        for name, f in VARIANT_FLAGS.items():
            if f == flags:
                return name
        return "custom"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ParameterStore:
    """Ordered name -> trainable tensor map, with the init recipe of each entry."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    recipes: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, data: np.ndarray, recipe: str) -> Tensor:
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.tensors[name] = t
        self.recipes[name] = recipe
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def keys(self):
        return self.tensors.keys()

    def values(self):
        return self.tensors.values()

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def schema(self) -> dict[str, list[int]]:
        return {k: list(t.shape) for k, t in self.tensors.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def _init(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> tuple[np.ndarray, str]:
    leaf = name.rsplit(".", 1)[-1]
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
        bound = float(np.sqrt(6.0 / fan_in))
        return rng.uniform(-bound, bound, size=shape), f"he_uniform(fan_in={fan_in})"
    if leaf == "bf":
        return np.ones(shape), "const(1.0)"
    if len(shape) == 1 and leaf.startswith("b"):
        return np.zeros(shape), "zeros"
    fan_in = shape[1] if len(shape) == 2 else shape[0]
    bound = 1.0 / float(np.sqrt(fan_in))
    return rng.uniform(-bound, bound, size=shape), f"uniform(+-1/sqrt({fan_in}))"


def _block_shapes(cfg: ModelConfig, prefix: str, in_ch: int) -> tuple[dict, int]:
    block = DenseBlockConfig(in_ch, cfg.block_layers, cfg.growth_rate)
    return block.param_shapes(prefix), block.out_channels


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in initialization order."""
    cfg.validate()
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["stem.w"] = (cfg.stem_channels, 1, 3, 3)
    shapes["stem.b"] = (cfg.stem_channels,)
    ch = cfg.stem_channels
    skips = []
    for lvl in range(1, cfg.levels + 1):
        s, ch = _block_shapes(cfg, f"enc{lvl}.block", ch)
        shapes.update(s)
        skips.append(ch)
        down = compressed_channels(ch, cfg.compression)
        shapes[f"enc{lvl}.down.w"] = (down, ch, 1, 1)
        shapes[f"enc{lvl}.down.b"] = (down,)
        ch = down
    s, ch = _block_shapes(cfg, "mid.block", ch)
    shapes.update(s)
    for lvl in range(cfg.levels, 0, -1):
        c_skip = skips[lvl - 1]
        shapes[f"dec{lvl}.up.w"] = (c_skip, ch, 3, 3)
        shapes[f"dec{lvl}.up.b"] = (c_skip,)
        if cfg.use_attention_gate:
            shapes.update(attention_gate_shapes(f"ag{lvl}", c_skip, ch, attention_width(c_skip)))
        if cfg.use_bdlstm:
            shapes.update(lstm_shapes(f"skip{lvl}.lstm.fwd", c_skip, c_skip))
            shapes.update(lstm_shapes(f"skip{lvl}.lstm.bwd", c_skip, c_skip))
            shapes.update(fusion_shapes(f"skip{lvl}.fuse", c_skip, c_skip, cfg.attention_dim,
                                        cfg.use_lstm_attention))
        # the decoder block sees [skip or fused skip, up-sampled map]
        s, ch = _block_shapes(cfg, f"dec{lvl}.block", 2 * c_skip)
        shapes.update(s)
    shapes["head.w"] = (1, ch, 1, 1)
    shapes["head.b"] = (1,)
    return shapes


class Model:
    """A built network: config, parameters, and the forward pass."""

    def __init__(self, cfg: ModelConfig, params: ParameterStore):
        self.cfg = cfg
        self.params = params

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return self.params.count()

    def forward(self, x: Tensor, inspect: dict | None = None) -> Tensor:
        """Per-pixel foreground probability for a [N,1,H,W] batch.

        When ``inspect`` is a dict it receives ``alpha`` (attention-gate maps)
        and ``beta`` (fusion weights), one entry per decoder level, deepest
        first.
        """
        cfg, p = self.cfg, self.params
        if x.ndim != 4 or x.shape[1:] != (1, cfg.height, cfg.width):
            raise ShapeError(f"expected input [N,1,{cfg.height},{cfg.width}], got {x.shape}")
        alphas, betas = [], []
        h = T.conv2d(x, p["stem.w"], p["stem.b"], padding=1)
        skips = []
        for lvl in range(1, cfg.levels + 1):
            h = dense_block(h, p, f"enc{lvl}.block", self._block(h.shape[1]))
            skips.append(h)
            h = transition_down(h, p[f"enc{lvl}.down.w"], p[f"enc{lvl}.down.b"])
        h = dense_block(h, p, "mid.block", self._block(h.shape[1]))
        for lvl in range(cfg.levels, 0, -1):
            skip = skips[lvl - 1]
            up = transition_up(h, p[f"dec{lvl}.up.w"], p[f"dec{lvl}.up.b"])
            if cfg.use_attention_gate:
                skip, alpha = attention_gate(skip, h, p, f"ag{lvl}")
                alphas.append(alpha.data)
            if cfg.use_bdlstm:
                fused, beta = fuse_skip(skip, up, p, f"skip{lvl}", attention=cfg.use_lstm_attention,
                                        cell_activation=cfg.cell_activation)
                betas.append(beta.data)
                merged = T.concat([fused, up], axis=1)
            else:
                merged = T.concat([skip, up], axis=1)
            h = dense_block(merged, p, f"dec{lvl}.block", self._block(merged.shape[1]))
        out = T.sigmoid(T.conv2d(h, p["head.w"], p["head.b"]))
        if inspect is not None:
            inspect["alpha"] = alphas
            inspect["beta"] = betas
        return out

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Tape-free forward over a [N,1,H,W] array, batched."""
        outs = [self.forward(Tensor(images[i:i + batch_size])).data for i in range(0, len(images), batch_size)]
        return np.concatenate(outs, axis=0)

    def _block(self, in_ch: int) -> DenseBlockConfig:
        return DenseBlockConfig(in_ch, self.cfg.block_layers, self.cfg.growth_rate)

    def schema(self) -> dict:
        return {
            "variant": self.variant,
            "config": asdict(self.cfg),
            "num_parameters": self.num_parameters(),
            "parameters": [
                {"name": k, "shape": list(t.shape), "init": self.params.recipes.get(k, "")}
                for k, t in self.params.items()
            ],
        }


def build(cfg: ModelConfig) -> Model:
    shapes = parameter_shapes(cfg)
    rng = np.random.default_rng(cfg.seed)
    store = ParameterStore()
    for name, shape in shapes.items():
        data, recipe = _init(name, shape, rng)
        store.add(name, data, recipe)
    return Model(cfg, store)


def variant_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    try:
        ag, la, bd = VARIANT_FLAGS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from None
    return replace(base or ModelConfig(), use_attention_gate=ag, use_lstm_attention=la, use_bdlstm=bd)


def build_variant(name: str, base: ModelConfig | None = None) -> Model:
    return build(variant_config(name, base))


SCHEMA_FILE = "model.schema.json"


def save_weights(model: Model, path: str | Path) -> None:
    """Write the DTF weight file and ``model.schema.json`` beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dtf.write_many(path, model.params.arrays())
    (path.parent / SCHEMA_FILE).write_text(json.dumps(model.schema(), indent=2, sort_keys=True) + "\n")


def load_weights(path: str | Path, cfg: ModelConfig | None = None) -> Model:
    """Build a model from ``cfg`` (or the sibling schema file) and fill its weights.

    The whole file is parsed and checked before any tensor is assigned.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weight file {path} not found")
    if cfg is None:
        schema_path = path.parent / SCHEMA_FILE
        if not schema_path.exists():
            raise ConfigError(f"no config given and {schema_path} not found")
        cfg = ModelConfig.from_dict(json.loads(schema_path.read_text())["config"])
    arrays = dtf.read_many(path)
    expected = parameter_shapes(cfg)
    missing = [k for k in expected if k not in arrays]
    extra = [k for k in arrays if k not in expected]
    mismatched = [k for k in expected if k in arrays and tuple(arrays[k].shape) != expected[k]]
    if missing or extra or mismatched:
        raise WeightsError(missing, extra, mismatched)
    model = build(cfg)
    for name, t in model.params.items():
        t.data = arrays[name].copy()
        model.params.recipes[name] = "loaded"
    return model
