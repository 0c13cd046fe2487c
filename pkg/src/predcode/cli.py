"""``predcode`` command line: train, refine, metrics, encode, decode, gradcheck.

Exit codes: 0 success, 2 usage or configuration error, 3 training aborted,
4 codec error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import codec, gradcheck, imageio, metrics, training, weights_io
from .model import PredNetConfig, PredNetWeights, RefineNetWeights
from .predictors import make_predictor

EXIT_OK, EXIT_USAGE, EXIT_TRAIN, EXIT_CODEC = 0, 2, 3, 4
OBJECTIVE_FLAGS = {"l1": "l1", "l2": "l2", "linf": "lp8"}

log = logging.getLogger("predcode")


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration


TRAIN_KEYS = {f.name for f in dataclasses.fields(training.TrainConfig)}
MODEL_KEYS = {"context_size", "channels", "num_residual_units", "leak_slope"}
TOP_KEYS = {"train", "model", "data", "out", "patches", "sample_seed", "threads"}


@dataclasses.dataclass
class RunConfig:
    train: training.TrainConfig
    model: PredNetConfig
    data: Optional[str] = None
    out: Optional[str] = None
    patches: int = 200_000
    sample_seed: int = 0
    threads: Optional[int] = None

    def as_dict(self) -> dict:
        model = dataclasses.asdict(self.model)
        model.pop("objective")
        return {
            "train": dataclasses.asdict(self.train),
            "model": model,
            "data": self.data,
            "out": self.out,
            "patches": self.patches,
            "sample_seed": self.sample_seed,
            "threads": self.threads,
        }


def _reject_unknown(section: str, given: dict, allowed: set) -> None:
    extra = sorted(set(given) - allowed)
    if extra:
        raise UsageError(f"unknown key(s) in {section}: {', '.join(extra)}")


def load_run_config(path: Optional[str], overrides: dict) -> RunConfig:
    """Config file values, then flag overrides (flags left at None are ignored)."""
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
    _reject_unknown("config", raw, TOP_KEYS)
    train = dict(raw.get("train", {}))
    model = dict(raw.get("model", {}))
    _reject_unknown("config.train", train, TRAIN_KEYS)
    _reject_unknown("config.model", model, MODEL_KEYS)
    top = {k: raw[k] for k in ("data", "out", "patches", "sample_seed", "threads") if k in raw}
    for key, value in overrides.items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        {"train": train, "model": model, "top": top}[section][name] = value
    base_model = dict(context_size=11, channels=8, num_residual_units=4)
    base_model.update(model)
    try:
        cfg = RunConfig(training.TrainConfig(**train), PredNetConfig(**base_model), **top)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    if cfg.patches < 1:
        raise UsageError("patches must be positive")
    return cfg


def echo_config(out_path: Path, doc: dict) -> Path:
    """Persist the effective configuration next to an output file."""
    target = out_path.with_name(out_path.name + ".config.json")
    target.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return target


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


# ---------------------------------------------------------------------------
# helpers


def _load_prednet(path) -> PredNetWeights:
    try:
        w = weights_io.load_weights(path)
    except (OSError, weights_io.WeightFileError) as exc:
        raise UsageError(f"cannot load weights {path}: {exc}") from exc
    if not isinstance(w, PredNetWeights):
        raise UsageError(f"{path} does not hold a prediction network")
    return w.set_mode("eval")


def _load_refine(path) -> RefineNetWeights:
    try:
        w = weights_io.load_weights(path)
    except (OSError, weights_io.WeightFileError) as exc:
        raise UsageError(f"cannot load weights {path}: {exc}") from exc
    if not isinstance(w, RefineNetWeights):
        raise UsageError(f"{path} does not hold a refinement network")
    return w


def build_predictor(name: str, weight_paths: Sequence[str]):
    key = name.replace("_", "-")
    if key in ("left", "gap"):
        if weight_paths:
            raise UsageError(f"predictor {key} takes no weights")
        return make_predictor(key)
    if key == "prednet":
        if len(weight_paths) != 1:
            raise UsageError("--predictor prednet needs exactly one --weights file")
        return make_predictor(key, _load_prednet(weight_paths[0]))
    if key == "prednet-r":
        if len(weight_paths) != 4:
            raise UsageError("--predictor prednet-r needs --weights L1 L2 LINF REFINE")
        nets = [_load_prednet(p) for p in weight_paths[:3]]
        try:
            return make_predictor(key, nets, _load_refine(weight_paths[3]))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    raise UsageError(f"unknown predictor {name!r}")


def _read_images(paths: Sequence[Path]) -> list:
    try:
        return [imageio.read_image(p) for p in paths]
    except (OSError, imageio.ImageFormatError) as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    objective = OBJECTIVE_FLAGS[args.objective]
    cfg = load_run_config(args.config, {
        "top.data": args.data, "top.out": args.out, "top.patches": args.patches,
        "top.sample_seed": args.sample_seed, "top.threads": args.threads,
        "train.steps": args.steps, "train.seed": args.seed, "train.lam": args.lam,
        "train.lr": args.lr, "train.batch_size": args.batch_size, "train.l2_loss": args.l2_loss,
        "model.context_size": args.context_size, "model.channels": args.channels,
        "model.num_residual_units": args.units,
    })
    if not cfg.data or not cfg.out:
        raise UsageError("train needs --data and --out (or config keys data/out)")
    try:
        images = imageio.ingest_images(cfg.data)
    except (OSError, imageio.ImageFormatError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = {"command": "train", "objective": objective, **cfg.as_dict()}
    echo_config(out, doc)

    with threadpool_limits(cfg.threads):
        ds = training.sample_patches(images, cfg.patches, cfg.model, cfg.sample_seed, training.TAG_S)
        trace = training.LossTrace()
        try:
            weights = training.train_stage1(ds, objective, cfg.train, cfg.model, trace=trace)
        except training.TrainingAborted as exc:
            trace_path = out.with_name(out.name + ".loss.csv")
            trace.to_csv(trace_path)
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_TRAIN
    weights_io.save_weights(weights, out)
    trace_path = out.with_name(out.name + ".loss.csv")
    trace.to_csv(trace_path)
    meta = {
        "step": cfg.train.steps,
        "objective": objective,
        "objective_flag": args.objective,
        "training_loss": cfg.train.loss_name(objective),
        "loss_trace": str(trace_path),
        "dataset_seed": cfg.sample_seed,
        "data_dir": str(Path(cfg.data).resolve()),
        "images": len(images),
        "checksum": f"{weights_io.checksum(weights):016x}",
    }
    _sidecar(out).write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"wrote {out} ({objective}, {cfg.train.steps} steps, final loss {trace.rows[-1][1]:.6f})")
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = load_run_config(args.config, {
        "top.data": args.data, "top.out": args.out, "top.patches": args.patches,
        "top.sample_seed": args.sample_seed, "top.threads": args.threads,
        "train.steps": args.steps, "train.seed": args.seed, "train.lr": args.lr,
        "train.batch_size": args.batch_size,
    })
    if not cfg.data or not cfg.out:
        raise UsageError("refine needs --data and --out")
    data_dir = Path(cfg.data).resolve()
    nets, sources = [], []
    for p in args.weights:
        nets.append(_load_prednet(p))
        side = _sidecar(Path(p))
        meta = json.loads(side.read_text()) if side.exists() else {}
        sources.append({"path": str(p), "checksum": f"{weights_io.checksum(nets[-1]):016x}",
                        "data_dir": meta.get("data_dir")})
    stage1_dirs = {s["data_dir"] for s in sources if s["data_dir"]}
    if args.stage1_data:
        stage1_dirs.add(str(Path(args.stage1_data).resolve()))
    if str(data_dir) in stage1_dirs:
        raise UsageError(f"refinement data {data_dir} is the stage-one training directory; S' must be disjoint from S")
    try:
        stage1 = training.StageOneResult(*nets)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        images = imageio.ingest_images(data_dir)
    except (OSError, imageio.ImageFormatError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    echo_config(out, {"command": "refine", "weights": list(args.weights), **cfg.as_dict()})
    model = nets[0].config
    with threadpool_limits(cfg.threads):
        ds = training.sample_patches(images, cfg.patches, model, cfg.sample_seed, training.TAG_S_PRIME)
        rd = training.build_refine_dataset(stage1, ds)
        trace = training.LossTrace()
        try:
            refine = training.train_stage2(rd, cfg.train, trace=trace)
        except training.TrainingAborted as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_TRAIN
    weights_io.save_weights(refine, out)
    trace_path = out.with_name(out.name + ".loss.csv")
    trace.to_csv(trace_path)
    meta = {
        "step": cfg.train.steps,
        "objective": "l1",
        "loss_trace": str(trace_path),
        "dataset_seed": cfg.sample_seed,
        "data_dir": str(data_dir),
        "sources": sources,
        "checksum": f"{weights_io.checksum(refine):016x}",
    }
    _sidecar(out).write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"wrote {out} ({cfg.train.steps} steps, final loss {trace.rows[-1][1]:.6f})")
    return EXIT_OK


def cmd_metrics(args) -> int:
    if bool(args.image) == bool(args.dir):
        raise UsageError("metrics needs exactly one of --image or --dir")
    predictor = build_predictor(args.predictor, args.weights or [])
    if args.image:
        paths = [Path(args.image)]
    else:
        try:
            paths = imageio.image_files(args.dir)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
        if not paths:
            raise UsageError(f"no images in {args.dir}")
    rows, maps = [], []
    with threadpool_limits(args.threads):
        for p, img in zip(paths, _read_images(paths)):
            res = metrics.residuals(img, predictor.predict_image(img))
            rows.append(metrics.ReportRow(p.name, predictor.name, metrics.stats(res, img)))
            maps.append(res)
            if args.residual_pgm:
                target = Path(args.residual_pgm)
                if args.dir:
                    target.mkdir(parents=True, exist_ok=True)
                    target = target / (p.stem + ".residual.pgm")
                metrics.export_residual_pgm(res, target)
    csv_text = metrics.aggregate_report(rows, "csv")
    if args.csv:
        Path(args.csv).write_text(csv_text)
        echo_config(Path(args.csv), {"command": "metrics", **_plain(vars(args))})
    if args.json:
        Path(args.json).write_text(metrics.aggregate_report(rows, "json", maps))
    if not args.csv and not args.json:
        sys.stdout.write(csv_text)
    else:
        m = metrics.mean_stats(rows)
        print(f"{len(rows)} image(s), mean l1 {m.l1:.4f} l2 {m.l2:.4f} linf {m.linf:.2f} "
              f"entropy {m.entropy:.4f} rho_max {m.rho_max:.4f}")
    return EXIT_OK


def cmd_encode(args) -> int:
    predictor = build_predictor(args.predictor, args.weights or [])
    (img,) = _read_images([Path(args.input)])
    with threadpool_limits(args.threads):
        try:
            stream = codec.encode(img, predictor)
        except (codec.CodecError, ArithmeticError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CODEC
    data = stream.to_bytes()
    Path(args.output).write_bytes(data)
    raw = img.size
    print(f"{args.output}: {len(data)} bytes (header+trailer {len(data) - len(stream.payload)}, "
          f"payload {len(stream.payload)}), {8 * len(data) / raw:.4f} bpp, raw {raw} bytes")
    return EXIT_OK


def cmd_decode(args) -> int:
    predictor = build_predictor(args.predictor, args.weights or [])
    try:
        data = Path(args.input).read_bytes()
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    with threadpool_limits(args.threads):
        try:
            img = codec.decode(data, predictor)
        except codec.CodecError as exc:
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_CODEC
    out = Path(args.output)
    if out.suffix.lower() == ".png":
        imageio.write_png(img, out)
    else:
        imageio.write_pgm(img, out)
    print(f"{out}: {img.shape[1]}x{img.shape[0]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run(seed=args.seed, seeds=args.seeds)
    for line in report.lines():
        print(line)
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else 1


def _plain(d: dict) -> dict:
    return {k: v for k, v in d.items() if k != "func"}


# ---------------------------------------------------------------------------
# parser


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="predcode", description="Lossless predictive coding of grayscale images.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def threads(sp):
        sp.add_argument("--threads", type=_positive, default=None, help="cap on BLAS worker threads")

    t = sub.add_parser("train", help="train one stage-one network")
    t.add_argument("--objective", required=True, choices=sorted(OBJECTIVE_FLAGS))
    t.add_argument("--data")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--steps", type=_positive)
    t.add_argument("--patches", type=_positive)
    t.add_argument("--seed", type=int)
    t.add_argument("--sample-seed", type=int)
    t.add_argument("--lam", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=_positive)
    t.add_argument("--l2-loss", choices=("rms", "mse"))
    t.add_argument("--context-size", type=int)
    t.add_argument("--channels", type=_positive)
    t.add_argument("--units", type=_positive)
    threads(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("refine", help="train the refinement network on a disjoint set")
    r.add_argument("--weights", nargs=3, required=True, metavar=("L1", "L2", "LINF"))
    r.add_argument("--data")
    r.add_argument("--stage1-data", help="stage-one data directory, if not recorded next to the weights")
    r.add_argument("--config")
    r.add_argument("--out")
    r.add_argument("--steps", type=_positive)
    r.add_argument("--patches", type=_positive)
    r.add_argument("--seed", type=int)
    r.add_argument("--sample-seed", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--batch-size", type=_positive)
    threads(r)
    r.set_defaults(func=cmd_refine)

    m = sub.add_parser("metrics", help="residual statistics for one image or a directory")
    m.add_argument("--image")
    m.add_argument("--dir")
    m.add_argument("--predictor", required=True, choices=("gap", "left", "prednet", "prednet-r"))
    m.add_argument("--weights", nargs="+")
    m.add_argument("--csv")
    m.add_argument("--json")
    m.add_argument("--residual-pgm")
    threads(m)
    m.set_defaults(func=cmd_metrics)

    for name, fn, helptext in (("encode", cmd_encode, "compress an image to a .prc stream"),
                               ("decode", cmd_decode, "reconstruct an image from a .prc stream")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--in", dest="input", required=True)
        c.add_argument("--out", dest="output", required=True)
        c.add_argument("--predictor", required=True, choices=("gap", "left", "prednet", "prednet-r"))
        c.add_argument("--weights", nargs="+")
        threads(c)
        c.set_defaults(func=fn)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seeds", type=_positive, default=100)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
