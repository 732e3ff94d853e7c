"""Command-line surface: gen, train, eval, infer, ablate, gradcheck.

Settings come from a TOML file with ``[data]``, ``[model]`` and ``[train]``
tables, then ``--set section.key=value`` overrides, then the dedicated flags
(``--seed``, ``--epochs``, ``--variant``).  Exit codes: 0 success, 1 usage or
config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from . import data as D
from . import dtf
from .dtf import DTFError
from .model import VARIANTS, ConfigError, ModelConfig, WeightsError, build, load_weights, save_weights, variant_config
from .train import TrainConfig, TrainingDiverged, evaluate, run_ablation, train

log = logging.getLogger("dabdunet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SECTIONS = ("data", "model", "train")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_settings(config: str | None, overrides: Sequence[str]) -> dict[str, dict]:
    settings: dict[str, dict] = {s: {} for s in SECTIONS}
    if config:
        try:
            raw = tomllib.loads(Path(config).read_text())
        except tomllib.TOMLDecodeError as err:
            raise UsageError(f"{config}: {err}") from None
        for key, table in raw.items():
            if key not in SECTIONS or not isinstance(table, dict):
                raise UsageError(f"{config}: unknown table [{key}]")
            settings[key].update(table)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise UsageError(f"--set expects section.key=value with section in {SECTIONS}, got {item!r}")
        settings[section][name] = _parse_value(value.strip())
    return settings


def _configs(args) -> tuple[D.DatasetSpec, ModelConfig, TrainConfig]:
    s = load_settings(args.config, args.set)
    try:
        spec = D.DatasetSpec.from_dict(s["data"])
        model = ModelConfig.from_dict(s["model"])
        hp = TrainConfig.from_dict(s["train"])
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from None
    seed = getattr(args, "seed", None)
    if seed is not None:
        spec, model, hp = replace(spec, seed=seed), replace(model, seed=seed), replace(hp, seed=seed)
    if getattr(args, "epochs", None) is not None:
        hp = replace(hp, epochs=args.epochs)
    if getattr(args, "variant", None):
        try:
            model = variant_config(args.variant, model)
        except ConfigError as err:
            raise UsageError(str(err)) from None
    try:
        spec.validate()
        model.validate()
    except (D.SpecError, ConfigError) as err:
        raise UsageError(str(err)) from None
    return spec, model, hp


def _dataset(args, spec: D.DatasetSpec) -> D.Dataset:
    """Files under ``--data`` when given, otherwise generated in memory from the spec."""
    if args.data:
        return D.read_dataset(args.data)
    return D.generate_dataset(spec)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    spec, _, _ = _configs(args)
    ds = D.generate_dataset(spec)
    D.write_dataset(ds, args.out, emit_pgm=args.emit_pgm)
    print(f"wrote {len(ds.train)} train and {len(ds.val)} val samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import training_curves

    spec, cfg, hp = _configs(args)
    ds = _dataset(args, spec)
    run = Path(args.runs) / args.name
    model = build(cfg)
    t0 = time.perf_counter()
    report = train(model, ds.train, ds.val, hp)
    elapsed = time.perf_counter() - t0
    save_weights(model, run / "weights.dtf")
    (run / "report.json").write_text(report.to_json())
    # wall-clock lives outside report.json so the report stays reproducible
    _write_json(run / "timing.json", {"train_seconds": round(elapsed, 3)})
    training_curves(report, run / "curves.png")
    if report.val_dc_mean is None:
        print(f"{report.variant}: trained without a validation split -> {run}")
    else:
        print(f"{report.variant}: val DC {report.val_dc_mean:.4f} ± {report.val_dc_std:.4f} "
              f"(constant-mask baseline {report.baseline_dc:.4f}) -> {run}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _, _, hp = _configs(args)
    model = load_weights(args.weights)
    samples = D.read_dataset(args.data).split(args.split)
    dcs = evaluate(model, samples, hp.threshold)
    out = {"split": args.split, "n": int(dcs.size), "threshold": hp.threshold,
           "dc_mean": float(dcs.mean()) if dcs.size else None,
           "dc_std": float(dcs.std()) if dcs.size else None}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_infer(args) -> int:
    _, _, hp = _configs(args)
    model = load_weights(args.weights)
    samples = D.read_dataset(args.data).split(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if samples:
        images, _ = D.stack(samples)
        prob = model.predict(images)
        for i, (img, p) in enumerate(zip(images, prob)):
            pred = (p >= hp.threshold).astype(np.float64)
            dtf.write(out / f"{i}.pred.dtf", pred)
            D.write_pgm(out / f"{i}.pred.pgm", pred[0])
            D.write_pgm(out / f"{i}.overlay.pgm", D.overlay(img[0], pred[0]))
    print(f"wrote {len(samples)} predictions to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .plotting import ablation_bars

    spec, cfg, hp = _configs(args)
    if args.variants == "all":
        names = list(VARIANTS)
    else:
        names = [v.strip() for v in args.variants.split(",") if v.strip()]
        unknown = [v for v in names if v not in VARIANTS]
        if unknown:
            raise UsageError(f"unknown variants {unknown}; choose from {', '.join(VARIANTS)}")
    if len(names) < 2:
        raise UsageError("an ablation needs at least two variants")
    ds = _dataset(args, spec)
    out = Path(args.out)
    t0 = time.perf_counter()
    table = run_ablation(cfg, ds.train, ds.val, names, hp)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(table.to_json())
    text = table.to_text()
    (out / "ablation.txt").write_text(text)
    _write_json(out / "timing.json", {"ablate_seconds": round(time.perf_counter() - t0, 3)})
    ablation_bars(table, out / "ablation.png")
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed, repeats=args.repeats)
    failed = 0
    for r in results:
        mark = "ok  " if r.passed else "FAIL"
        failed += not r.passed
        print(f"{mark} {r.name:<28} seed-repeat {r.details.get('repeat', 0)} "
              f"max rel err {r.max_rel_error:.2e} (tol {r.tolerance:.0e}, {r.checked} entries)")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML file with [data], [model], [train] tables")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one setting; repeatable")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    parser = _Parser(prog="dabdunet", description="Dense U-Net with attention gates and BD-LSTM skip fusion")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", default="data")
    p.add_argument("--seed", type=int)
    p.add_argument("--emit-pgm", action="store_true", help="also write 8-bit PGM previews")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--data", help="dataset directory; generated from [data] when omitted")
    p.add_argument("--runs", default="runs")
    p.add_argument("--name", default="default")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Dice over a dataset split")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=tuple(D.SPLITS), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="write predicted masks and overlays")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=tuple(D.SPLITS), default="val")
    p.add_argument("--out", default="predictions")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", parents=[common], help="train every variant on the same data")
    p.add_argument("--variants", default="all", help="'all' or a comma-separated list")
    p.add_argument("--data")
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as err:
        print(str(err).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DTFError, WeightsError, ConfigError, TrainingDiverged, ValueError, RuntimeError) as err:
        print(f"dabdunet: error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
