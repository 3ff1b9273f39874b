"""treecount command line.

    treecount synth --out data/ --n 8 --size 256
    treecount train --manifest data/manifest.csv --out runs/a --config desk.cfg
    treecount evaluate --checkpoint runs/a/last.ckpt --manifest data/manifest.csv --out runs/a/eval
    treecount predict --checkpoint runs/a/last.ckpt --image data/images/img0000.png --out pred/
    treecount ablate --config desk.cfg --manifest data/manifest.csv --out runs/abl --switch "w/o LTC"

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import data, engine
from .data import DataError, DatasetSplit
from .model import PRESETS

log = logging.getLogger("treecount")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; we reserve 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _density_range(s: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo,hi got {s!r}")
    if lo < 0 or hi < lo:
        raise argparse.ArgumentTypeError(f"bad range {s!r}")
    return lo, hi


def _fraction(s: str) -> float:
    v = float(s)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"labeled fraction must be in (0, 1], got {s}")
    return v


def _non_negative(s: str) -> float:
    v = float(s)
    if v < 0 or math.isnan(v):
        raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
    return v


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--labeled-fraction", type=_fraction)
    p.add_argument("--lambda", dest="lam", type=_non_negative)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--max-steps", type=int)
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="treecount", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare-data", help="validate a manifest and write GT density maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=data.DEFAULT_SIGMA)
    p.add_argument("--factor", type=int, default=engine.OUTPUT_STRIDE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labeled-fraction", type=_fraction, default=1.0)

    p = sub.add_parser("synth", help="write a synthetic annotated dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--density", type=_density_range, default=(5, 40), metavar="LO,HI")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="img")
    p.add_argument("--unlabeled-every", type=int, default=0)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.add_argument("--switch", action="append", default=[], help="ablation switch (repeatable)")

    p = sub.add_parser("evaluate", help="score a checkpoint on an annotated manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="density map and count for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train one variant per switch and compare")
    _add_train_flags(p)
    p.add_argument("--switch", action="append", default=[],
                   help="variant switches; join several with ';' for one variant")
    p.add_argument("--baseline", action="store_true", help="also train the unswitched model")
    p.add_argument("--eval-manifest", help="held-out manifest (default: hold out --test-fraction)")
    p.add_argument("--test-fraction", type=float, default=0.2)
    return ap


# -- helpers ------------------------------------------------------------------

def _train_config(args, switches=()) -> engine.TrainConfig:
    overrides = {"seed": args.seed, "labeled_fraction": args.labeled_fraction,
                 "lam": args.lam, "preset": args.preset, "max_steps": args.max_steps,
                 "epochs": args.epochs}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        if args.config:
            cfg = engine.read_config(args.config, **overrides)
        else:
            cfg = engine.TrainConfig(**overrides)
        return engine.apply_switches(cfg, switches) if switches else cfg
    except OSError as e:
        raise UsageError(f"cannot read config: {e}")
    except ValueError as e:
        raise UsageError(str(e))


def _split(images, cfg: engine.TrainConfig) -> DatasetSplit:
    # manifest-unlabeled images stay unlabeled; the fraction applies to the rest
    annotated = [im.id for im in images if im.is_labeled]
    if not annotated:
        raise DataError("manifest has no labeled images")
    s = data.split_dataset(annotated, cfg.labeled_fraction, cfg.seed)
    extra = [im.id for im in images if not im.is_labeled]
    return DatasetSplit(s.labeled, sorted(s.unlabeled + extra), s.seed)


def _write_split(path: Path, split: DatasetSplit) -> None:
    path.write_text(json.dumps({"seed": split.seed, "labeled": split.labeled,
                                "unlabeled": split.unlabeled}, indent=1) + "\n")


def _heatmap(d: np.ndarray, scale: int) -> np.ndarray:
    top = float(d.max())
    v = np.clip(d / top, 0, 1) if top > 0 else np.zeros_like(d)
    # dark blue -> red -> yellow ramp
    stops = np.array([[0, 0, 64], [0, 128, 255], [255, 64, 0], [255, 255, 0]], dtype=np.float64)
    pos = v * (len(stops) - 1)
    i = np.minimum(pos.astype(int), len(stops) - 2)
    t = (pos - i)[..., None]
    rgb = stops[i] * (1 - t) + stops[i + 1] * t
    return np.kron(rgb, np.ones((scale, scale, 1))) / 255.0


# -- commands -------------------------------------------------------------------

def cmd_prepare_data(args) -> int:
    if args.sigma <= 0 or args.factor < 1:
        raise UsageError("--sigma must be > 0 and --factor >= 1")
    images = data.parse_annotations(args.manifest)
    out = Path(args.out)
    (out / "density").mkdir(parents=True, exist_ok=True)
    rows = []
    for im in images:
        d = data.generate_density_map(im.points, im.height, im.width, args.sigma)
        ds = data.downsample_density(d, args.factor) if args.factor > 1 else d
        data.save_density(out / "density" / f"{im.id}.bin", ds)
        rows.append({"id": im.id, "labeled": im.is_labeled, "points": len(im.points),
                     "height": im.height, "width": im.width, "density_count": f"{ds.count:.6f}"})
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    cfg = engine.TrainConfig(labeled_fraction=args.labeled_fraction, seed=args.seed)
    _write_split(out / "split.json", _split(images, cfg))
    print(f"{len(images)} images, {sum(len(im.points) for im in images)} points -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.size <= 0 or args.size % 32:
        raise UsageError(f"--size must be a positive multiple of 32, got {args.size}")
    from .synth import synth
    manifest = synth(args.out, args.n, args.size, args.density, args.seed, args.prefix,
                     args.unlabeled_every)
    print(manifest)
    return EXIT_OK


def _fit(cfg, images, out: Path, final_eval=None):
    split = _split(images, cfg)
    out.mkdir(parents=True, exist_ok=True)
    engine.write_config(out / "config.txt", cfg)
    _write_split(out / "split.json", split)
    return engine.fit(cfg, images, split, out, final_eval=final_eval)


def cmd_train(args) -> int:
    cfg = _train_config(args, args.switch)
    images = data.parse_annotations(args.manifest)
    ck = _fit(cfg, images, Path(args.out))
    print(ck.path)
    return EXIT_OK


def _write_report(out: Path, report) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.summary(), indent=1) + "\n")
    if report.per_image:
        with open(out / "per_image.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(report.per_image[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(report.per_image)


def cmd_evaluate(args) -> int:
    ck = engine.load_checkpoint(args.checkpoint)
    images = [im for im in data.parse_annotations(args.manifest) if im.is_labeled]
    if not images:
        raise DataError("manifest has no annotated images to evaluate on")
    report = engine.evaluate(ck, images)
    _write_report(Path(args.out), report)
    s = report.summary()
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in s.items()))
    return EXIT_OK


def cmd_predict(args) -> int:
    ck = engine.load_checkpoint(args.checkpoint)
    pixels = data.load_image(args.image)
    d1, _, _ = engine.predict_image(ck.model, pixels)
    d1 = np.ascontiguousarray(d1, dtype=np.float32)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    data.save_density(out / f"{stem}_density.bin", d1)
    data.save_image(out / f"{stem}_heatmap.png", _heatmap(d1, engine.OUTPUT_STRIDE))
    print(f"{float(d1.sum(dtype=np.float64)):.4f}")
    return EXIT_OK


ABLATION_FIELDS = ["variant", "seed", "labeled_fraction", "lam", "E_MAE", "E_RMS", "E_R2",
                   "E_G0", "E_G1", "E_G2", "E_G3", "E_P", "E_R", "E_F1", "N"]


def cmd_ablate(args) -> int:
    if not args.switch:
        raise UsageError("ablate needs at least one --switch")
    if not 0 <= args.test_fraction < 1:
        raise UsageError("--test-fraction must be in [0, 1)")
    base = _train_config(args)
    variants = [("full", [])] if args.baseline else []
    for spec in args.switch:
        names = engine.split_switches(spec)
        try:
            names = [engine.canonical_switch(n) for n in names]
        except ValueError as e:
            raise UsageError(str(e))
        variants.append((";".join(names), names))

    images = data.parse_annotations(args.manifest)
    if args.eval_manifest:
        test = [im for im in data.parse_annotations(args.eval_manifest) if im.is_labeled]
    else:
        annotated = [im for im in images if im.is_labeled]
        n_test = int(math.floor(args.test_fraction * len(annotated) + 1e-9))
        order = np.random.default_rng(base.seed + 7).permutation(len(annotated))
        test_ids = {annotated[i].id for i in order[:n_test]}
        test = [im for im in annotated if im.id in test_ids]
        images = [im for im in images if im.id not in test_ids]
    if not test:
        raise UsageError("no held-out images; pass --eval-manifest or raise --test-fraction")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, switches in variants:
        cfg = engine.apply_switches(base, switches) if switches else base
        slug = "".join(c if c.isalnum() else "_" for c in name).strip("_") or "full"
        ck = _fit(cfg, images, out / slug)
        report = engine.evaluate(ck, test)
        _write_report(out / slug / "eval", report)
        rows.append({"variant": name, "seed": cfg.seed, "labeled_fraction": cfg.labeled_fraction,
                     "lam": cfg.lam, **report.summary()})
        log.info("%s: E_MAE %.3f E_F1 %.2f", name, report.E_MAE, report.E_F1)
    fields = [f for f in ABLATION_FIELDS if f in rows[0]]
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(out / "ablation.csv")
    return EXIT_OK


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"treecount {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"treecount {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
