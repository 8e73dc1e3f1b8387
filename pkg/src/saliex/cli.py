"""Command line: ``saliex {synth,train,predict,explain,eval,report}``.

Exit codes: 0 success, 1 usage error, 2 data/contract error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataio, encoder, explainer, metrics
from .encoder import EncoderConfig, TrainHyper
from .errors import ConfigError, DataError, SaliexError
from .explainer import ExplainConfig

log = logging.getLogger("saliex")

WORKERS_ENV = "SALIEX_WORKERS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    data: dict = field(default_factory=lambda: {"train": None, "val": None})
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        top_seed = int(d.get("seed", 0)) if seed is None else seed

        def section(name: str) -> dict:
            sub = dict(d.get(name) or {})
            if seed is not None or "seed" not in sub:
                sub["seed"] = top_seed
            return sub

        data = dict(d.get("data") or {})
        bad = set(data) - {"train", "val"}
        if bad:
            raise ConfigError(f"unknown data keys: {sorted(bad)}")
        return cls(
            encoder=EncoderConfig.from_dict(section("encoder")),
            explain=ExplainConfig.from_dict(section("explain")),
            train=TrainHyper.from_dict(section("train")),
            data={"train": data.get("train"), "val": data.get("val")},
            seed=top_seed,
        )

    @classmethod
    def load(cls, path, seed: int | None = None) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        try:
            return cls.from_dict(d, seed)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_json(self) -> str:
        d = {
            "data": self.data,
            "encoder": json.loads(self.encoder.to_json()),
            "explain": asdict(self.explain),
            "seed": self.seed,
            "train": asdict(self.train),
        }
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


def _run_config(args) -> RunConfig:
    if args.config:
        return RunConfig.load(args.config, args.seed)
    return RunConfig.from_dict({}, args.seed)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec_dict = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if not isinstance(spec_dict, dict):
        raise ConfigError(f"{args.spec}: synth spec must be a JSON object")
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    if args.count is not None:
        spec_dict["count"] = args.count
    try:
        spec = dataio.SynthSpec.from_dict(spec_dict)
    except TypeError as exc:
        raise ConfigError(f"{args.spec}: {exc}") from exc
    manifest = dataio.write_dataset(args.out, dataio.synth_dataset(spec))
    log.info("wrote %d samples, manifest %s", spec.count, manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train_path = args.data or cfg.data["train"]
    val_path = args.val or cfg.data["val"] or train_path
    if not train_path:
        raise ConfigError("no training manifest: pass --data or set data.train")
    hyper = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    train_set = dataio.load_manifest(train_path)
    val_set = dataio.load_manifest(val_path)
    size = tuple(train_set[0][0].shape[:2])
    enc_cfg = cfg.encoder
    if size != enc_cfg.input_size:
        raise DataError(f"{train_path}: images are {size}, config input_size is {enc_cfg.input_size}")
    model = encoder.build_encoder(enc_cfg)
    tlog = encoder.train(model, train_set, val_set, hyper)
    encoder.save_checkpoint(model, args.out)
    Path(str(args.out) + ".trainlog.csv").write_text(tlog.to_csv(include_time=args.log_time))
    log.info("saved %s (final val F=%.4f MAE=%.4f)", args.out, tlog.val_fmeasure[-1], tlog.val_mae[-1])
    return 0


def _predict_file(model, image_path) -> np.ndarray:
    img = dataio.load_netpbm(image_path)
    return model(dataio.to_tensor(img).data)


def cmd_predict(args) -> int:
    model = encoder.load_checkpoint(args.ckpt)
    if args.manifest:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for img_path, _ in dataio.read_manifest(args.manifest):
            dataio.save_pgm(out_dir / (img_path.stem + ".pgm"), _predict_file(model, img_path))
        return 0
    if not args.image:
        raise UsageError("predict: pass --image or --manifest")
    dataio.save_pgm(args.out, _predict_file(model, args.image))
    return 0


def _center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    top, left = max(0, (h - size) // 2), max(0, (w - size) // 2)
    return img[top : top + min(size, h), left : left + min(size, w)]


def cmd_explain(args) -> int:
    if args.preset is None and args.config:
        cfg = RunConfig.load(args.config, args.seed).explain
    else:
        cfg = explainer.PRESETS[args.preset or "desk"]
        cfg = replace(cfg, seed=args.seed if args.seed is not None else 0)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            cfg = replace(cfg, parallel_workers=int(env))
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV}={env!r} is not an integer") from exc
    if args.workers is not None:
        cfg = replace(cfg, parallel_workers=args.workers)

    img = dataio.load_netpbm(args.image)
    if args.preset == "paper":
        img = _center_crop(img, explainer.PAPER_CROP)
    if args.constant_predictor:
        predictor = explainer.constant_predictor(0.5)
    elif args.ckpt:
        predictor = encoder.load_checkpoint(args.ckpt)
    else:
        raise UsageError("explain: pass --ckpt or --constant-predictor")

    emap = explainer.explain(predictor, dataio.to_tensor(img).data, cfg)
    prefix = str(args.out)
    Path(prefix + ".csv").write_text(emap.to_csv())
    dataio.save_ppm(prefix + ".ppm", dataio.colormap_diverging(emap.values))
    Path(prefix + ".stats.csv").write_text(explainer.fse_stats(emap).to_csv())
    return 0


def _pred_paths(pred, gt_pairs) -> list[Path]:
    pred = Path(pred)
    if pred.is_dir():
        paths = [pred / (img.stem + ".pgm") for img, _ in gt_pairs]
    else:
        lines = [ln for ln in pred.read_text().splitlines() if ln.strip()]
        paths = [pred.parent / ln.split("\t")[0] for ln in lines]
        if len(paths) != len(gt_pairs):
            raise DataError(f"{pred}: {len(paths)} predictions but {len(gt_pairs)} ground-truth entries")
    for p in paths:
        if not p.exists():
            raise DataError(f"prediction {p} does not exist")
    return paths


def _parse_widths(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(w) for w in text.split(",") if w.strip())
    except ValueError as exc:
        raise UsageError(f"--widths: {exc}") from exc
    if not widths or min(widths) < 1:
        raise UsageError("--widths needs positive integers")
    return widths


def cmd_eval(args) -> int:
    widths = _parse_widths(args.widths)
    gt_pairs = dataio.read_manifest(args.gt)
    preds = _pred_paths(args.pred, gt_pairs)
    maps = [dataio.load_map(p) for p in preds]
    gts = [dataio.load_mask(m) for _, m in gt_pairs]
    names = [img.stem for img, _ in gt_pairs]
    report = metrics.evaluate_dataset(maps, gts, widths, names=names)
    out = Path(args.out)
    out.write_text(report.to_csv())
    pr_dir = out.with_name(out.stem + "_pr")
    pr_dir.mkdir(parents=True, exist_ok=True)
    for e in report.images:
        (pr_dir / f"{e.name}.csv").write_text(e.pr.to_csv())
    (pr_dir / "MEAN.csv").write_text(report.mean_pr.to_csv())
    log.info("F=%.4f MAE=%.4f over %d images", report.mean_fmeasure, report.mean_mae, len(report.images))
    return 0


def cmd_report(args) -> int:
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.eval]
    if len(labels) != len(args.eval):
        raise UsageError("--labels must name every --eval file")
    header = None
    rows = []
    for label, path in zip(labels, args.eval):
        with open(path, newline="") as fh:
            table = list(csv.reader(fh))
        if not table or table[0][0] != "image":
            raise DataError(f"{path}: not an evaluation report")
        if header is None:
            header = table[0]
        elif table[0] != header:
            raise DataError(f"{path}: columns differ from {args.eval[0]}")
        mean = [r for r in table[1:] if r and r[0] == "MEAN"]
        if not mean:
            raise DataError(f"{path}: missing MEAN row")
        rows.append([label] + mean[0][1:])
    text = "\n".join([",".join(["run"] + header[1:])] + [",".join(r) for r in rows]) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    width = max(len(label) for label in labels)
    print(f"{'run':<{width}}  " + "  ".join(f"{h:>14}" for h in header[1:]))
    for r in rows:
        print(f"{r[0]:<{width}}  " + "  ".join(f"{float(v):>14.4f}" for v in r[1:]))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saliex", description="Dense-connection saliency encoder and explainer")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", help="JSON synth spec")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train an encoder")
    s.add_argument("--config", help="JSON run config")
    s.add_argument("--data", help="training manifest")
    s.add_argument("--val", help="validation manifest")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--log-time", action="store_true", help="add wall-clock seconds to the train log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="saliency map(s) from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image")
    s.add_argument("--manifest", help="predict every image; --out is then a directory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("explain", help="explanation map for one image")
    s.add_argument("--ckpt")
    s.add_argument("--constant-predictor", action="store_true", help="explain a constant 0.5 predictor")
    s.add_argument("--image", required=True)
    s.add_argument("--preset", choices=sorted(explainer.PRESETS), help="default: desk")
    s.add_argument("--config", help="JSON run config (its explain section is used without --preset)")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("eval", help="evaluate saliency maps against ground truth")
    s.add_argument("--pred", required=True, help="directory of <stem>.pgm maps or a manifest")
    s.add_argument("--gt", required=True, help="ground-truth manifest")
    s.add_argument("--widths", default=",".join(map(str, metrics.DEFAULT_WIDTHS)))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="compare evaluation reports")
    s.add_argument("--eval", nargs="+", required=True)
    s.add_argument("--labels")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"saliex {args.command}: {exc}", file=sys.stderr)
        return 1
    except (SaliexError, OSError, json.JSONDecodeError) as exc:
        print(f"saliex {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
