"""Synthetic lesion images, sample files and PGM previews."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dtf

SPLITS = {"train": 0, "val": 1}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 200
    n_val: int = 40
    size: int = 32
    blobs: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (3.0, 6.0)
    contrast: float = 0.35
    noise: float = 0.05
    background: float = 0.4
    field_amplitude: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blobs", tuple(int(b) for b in self.blobs))
        object.__setattr__(self, "radius", tuple(float(r) for r in self.radius))

    def validate(self) -> None:
        lo, hi = self.blobs
        if lo < 0 or hi < lo:
            raise SpecError(f"bad blob count range {self.blobs}")
        rlo, rhi = self.radius
        if rlo <= 0 or rhi < rlo:
            raise SpecError(f"bad radius range {self.radius}")
        if 2 * rhi + 1 > self.size:
            raise SpecError(f"radius {rhi} does not fit in a {self.size}x{self.size} image")
        if self.n_train < 0 or self.n_val < 0 or self.size < 1:
            raise SpecError("counts and size must be non-negative")
        if self.noise < 0:
            raise SpecError("noise must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # [1, H, W] in [0, 1]
    mask: np.ndarray  # [1, H, W] in {0, 1}
    seed: tuple[int, int, int]
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    spec: DatasetSpec
    train: list[Sample]
    val: list[Sample]

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise SpecError(f"unknown split {name!r}")
        return getattr(self, name)


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Images and masks as [N,1,H,W] arrays."""
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return (u * u + v * v) <= 1.0


def make_sample(spec: DatasetSpec, split: str, index: int) -> Sample:
    seed = (int(spec.seed), SPLITS[split], int(index))
    rng = np.random.default_rng(list(seed))
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n] / n
    bg = np.full((n, n), spec.background)
    for _ in range(3):
        fy, fx = rng.integers(0, 3, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        bg += spec.field_amplitude / 3 * np.cos(2 * math.pi * (fy * yy + fx * xx) + phase)
    count = int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))
    mask = np.zeros((n, n), dtype=bool)
    radii = []
    for _ in range(count):
        ry, rx = rng.uniform(spec.radius[0], spec.radius[1], size=2)
        angle = rng.uniform(0, math.pi)
        reach = max(ry, rx)
        cy, cx = rng.uniform(reach, n - 1 - reach, size=2)
        mask |= ellipse_mask(n, cy, cx, ry, rx, angle)
        radii.append([float(ry), float(rx)])
    image = bg + spec.contrast * mask
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=(n, n))
    image = np.clip(image, 0.0, 1.0)
    return Sample(image[None].astype(np.float64), mask[None].astype(np.float64), seed,
                  {"blobs": count, "radii": radii})


def generate_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    train = [make_sample(spec, "train", i) for i in range(spec.n_train)]
    val = [make_sample(spec, "val", i) for i in range(spec.n_val)]
    return Dataset(spec, train, val)


# ---------------------------------------------------------------------------
# files


def write_sample(directory: str | Path, index: int, sample: Sample, emit_pgm: bool = False) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dtf.write(d / f"{index}.img.dtf", sample.image)
    dtf.write(d / f"{index}.mask.dtf", sample.mask)
    if emit_pgm:
        write_pgm(d / f"{index}.img.pgm", sample.image[0])
        write_pgm(d / f"{index}.mask.pgm", sample.mask[0])


def read_sample(directory: str | Path, index: int) -> Sample:
    """Both files are parsed before a sample is returned."""
    d = Path(directory)
    image = dtf.read(d / f"{index}.img.dtf")
    mask = dtf.read(d / f"{index}.mask.dtf")
    if image.shape != mask.shape:
        raise dtf.DTFError(f"image {image.shape} and mask {mask.shape} disagree", 0)
    return Sample(image, mask, (-1, -1, index))


def write_dataset(ds: Dataset, root: str | Path, emit_pgm: bool = False) -> None:
    root = Path(root)
    manifest = {"spec": asdict(ds.spec), "samples": {}}
    for split in SPLITS:
        for i, s in enumerate(ds.split(split)):
            write_sample(root / split, i, s, emit_pgm)
        manifest["samples"][split] = [{"index": i, "seed": list(s.seed), **s.meta}
                                      for i, s in enumerate(ds.split(split))]
    (root / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "dataset.json").read_text())
    spec = DatasetSpec.from_dict(manifest["spec"])
    splits = {}
    for split in SPLITS:
        samples = []
        for entry in manifest["samples"][split]:
            s = read_sample(root / split, entry["index"])
            s.seed = tuple(entry["seed"])
            s.meta = {k: v for k, v in entry.items() if k not in ("index", "seed")}
            samples.append(s)
        splits[split] = samples
    return Dataset(spec, splits["train"], splits["val"])


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PGM of a 2-D array with values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {arr.shape}")
    h, w = arr.shape
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = (int(v) for v in parts[1].split())
    body = parts[3]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask."""
    m = np.asarray(mask) > 0.5
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def overlay(image: np.ndarray, pred_mask: np.ndarray) -> np.ndarray:
    """Image with the predicted mask outline burnt in at full intensity."""
    out = np.array(image, dtype=np.float64, copy=True)
    out[boundary(pred_mask)] = 1.0
    return out
