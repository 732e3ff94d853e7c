"""Dice metric and loss, SGD with momentum, training loop, ablation runner."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import Sample, stack
from .model import Model, ModelConfig, build, variant_config
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

REPORT_VERSION = 1

# Published full-scale results on the private clinical CT set; shown beside our
# numbers for orientation only.  UNet-skip-concat is the dense U-Net without
# BD-LSTM fusion, reported there as "DenUNet".
PUBLISHED_DC = {
    "UNet-skip-concat": ("DenUNet", 0.7989),
    "BDLSTM-DenseUNet": ("BDLSTM-DenseUNet", 0.8435),
    "BDense-UNet-1": ("BDense-UNet-1", 0.8482),
    "BDense-UNet-2": ("BDense-UNet-2", 0.8498),
    "DA-BDense-UNet": ("DA-BDense-UNet", 0.8520),
}
PUBLISHED_NOTE = "full-scale clinical CT result; not reproducible on the synthetic desk-scale data"


@dataclass(frozen=True)
class DiceResult:
    intersection: int
    size_pred: int
    size_true: int
    dc: float


def _binary(x, what: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all((arr == 0) | (arr == 1)):
        raise ContractError(f"{what} must contain only 0 and 1")
    return arr.astype(bool)


def dice_coefficient(pred_mask, true_mask) -> DiceResult:
    """2|A & B| / (|A| + |B|); two empty masks score 1.0."""
    a = _binary(pred_mask, "pred_mask")
    b = _binary(true_mask, "true_mask")
    if a.shape != b.shape:
        raise T.ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    sp, st = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    dc = 1.0 if sp + st == 0 else 2.0 * inter / (sp + st)
    return DiceResult(inter, sp, st, dc)


def soft_dice_loss(prob: Tensor, true_mask, eps: float = 1.0) -> Tensor:
    """1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps)."""
    y = T.as_tensor(true_mask)
    if prob.shape != y.shape:
        raise T.ShapeError(f"prob {prob.shape} vs mask {y.shape}")
    num = T.sum(prob * y) * 2.0 + eps
    den = T.sum(prob) + T.sum(y) + eps
    return 1.0 - num / den


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], lr: float, momentum: float,
             velocity: dict[int, np.ndarray]) -> None:
    """v <- momentum * v - lr * g;  p <- p + v.  ``velocity`` is keyed by position."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        v = velocity.get(k)
        v = -lr * g if v is None else momentum * v - lr * g
        velocity[k] = v
        p.data = p.data + v


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 0.003
    momentum: float = 0.9
    threshold: float = 0.5
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    def __init__(self, snapshot: dict):
        self.snapshot = snapshot
        super().__init__(f"training diverged: {json.dumps(snapshot, sort_keys=True)}")


@dataclass
class RunReport:
    variant: str
    seed: int
    epochs: list[dict] = field(default_factory=list)
    val_dc_mean: float | None = None
    val_dc_std: float | None = None
    baseline_dc: float | None = None
    num_parameters: int = 0
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    report_version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


def evaluate(model: Model, samples: Sequence[Sample], threshold: float = 0.5,
             batch_size: int = 16) -> np.ndarray:
    """Per-sample Dice coefficients of the thresholded prediction."""
    if not samples:
        return np.zeros(0)
    images, masks = stack(list(samples))
    prob = model.predict(images, batch_size)
    pred = (prob >= threshold).astype(np.float64)
    return np.array([dice_coefficient(p, m).dc for p, m in zip(pred, masks)])


def constant_baseline(samples: Sequence[Sample]) -> float:
    """Best mean DC reachable by predicting all-foreground or all-background everywhere."""
    _, masks = stack(list(samples))
    fg = np.mean([dice_coefficient(np.ones_like(m), m).dc for m in masks])
    bg = np.mean([dice_coefficient(np.zeros_like(m), m).dc for m in masks])
    return float(max(fg, bg))


def train(model: Model, train_set: Sequence[Sample], val_set: Sequence[Sample],
          hp: TrainConfig = TrainConfig()) -> RunReport:
    if not train_set:
        raise ContractError("training set is empty")
    images, masks = stack(list(train_set))
    rng = np.random.default_rng(hp.seed)
    params = model.parameters()
    velocity: dict[int, np.ndarray] = {}
    report = RunReport(
        variant=model.variant,
        seed=hp.seed,
        num_parameters=model.num_parameters(),
        model_config=asdict(model.cfg),
        train_config=asdict(hp),
        baseline_dc=constant_baseline(val_set) if val_set else None,
    )
    n = len(images)
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, hp.batch_size)):
            idx = order[start:start + hp.batch_size]
            model.params.zero_grad()
            with T.Tape() as tape:
                loss = soft_dice_loss(model(Tensor(images[idx])), masks[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged({
                    "variant": model.variant, "epoch": epoch, "step": step, "loss": repr(value),
                    "param_norms": {k: float(np.linalg.norm(t.data)) for k, t in model.params.items()},
                })
            T.backward(loss, tape)
            sgd_step(params, [p.grad for p in params], hp.lr, hp.momentum, velocity)
            losses.append(value)
        dcs = evaluate(model, val_set, hp.threshold)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                 "val_dc": float(dcs.mean()) if dcs.size else None}
        report.epochs.append(entry)
        log.info("%s epoch %d loss %.4f val DC %s", model.variant, epoch, entry["train_loss"], entry["val_dc"])
    dcs = evaluate(model, val_set, hp.threshold)
    if dcs.size:
        report.val_dc_mean = float(dcs.mean())
        report.val_dc_std = float(dcs.std())
    return report


@dataclass
class AblationTable:
    rows: list[RunReport]
    seed: int

    def to_dict(self) -> dict:
        rows = []
        for r in self.rows:
            published_row, published_dc = PUBLISHED_DC.get(r.variant, (None, None))
            rows.append({
                "model": r.variant,
                "status": r.status,
                "val_dc_mean": r.val_dc_mean,
                "val_dc_std": r.val_dc_std,
                "num_parameters": r.num_parameters,
                "published_reference": {"row": published_row, "dc": published_dc,
                                        "reproducible": False, "note": PUBLISHED_NOTE},
                "report": r.to_dict(),
            })
        return {"report_version": REPORT_VERSION, "seed": self.seed, "rows": rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        """Aligned ``Model | DC`` table, published figure alongside."""
        head = ("Model", "DC (ours)", "DC (published*)")
        body = []
        for r in self.rows:
            ours = "failed" if r.status != "ok" else f"{r.val_dc_mean:.4f} ± {r.val_dc_std:.4f}"
            pub = PUBLISHED_DC.get(r.variant, (None, None))[1]
            body.append((r.variant, ours, "-" if pub is None else f"{pub:.4f}"))
        widths = [max(len(row[i]) for row in [head, *body]) for i in range(3)]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        lines = [fmt.format(*head), "  ".join("-" * w for w in widths)]
        lines += [fmt.format(*row) for row in body]
        lines.append(f"* {PUBLISHED_NOTE}")
        return "\n".join(lines) + "\n"


def run_ablation(base: ModelConfig, train_set: Sequence[Sample], val_set: Sequence[Sample],
                 variants: Iterable[str], hp: TrainConfig = TrainConfig()) -> AblationTable:
    """Train every variant from the same seed and data order."""
    variants = list(variants)
    if len(variants) < 2:
        raise ContractError("an ablation needs at least two variants")
    rows = []
    for name in variants:
        cfg = variant_config(name, base)
        try:
            model = build(cfg)
            rows.append(train(model, train_set, val_set, hp))
        except Exception as err:  # one bad variant must not sink the table
            log.error("variant %s failed: %s", name, err)
            rows.append(RunReport(variant=name, seed=hp.seed, status="failed", error=str(err),
                                  model_config=asdict(cfg), train_config=asdict(hp)))
    return AblationTable(rows, hp.seed)

