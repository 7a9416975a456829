"""Command-line entry point: ``papmask <command> [options]``.

Every command reads an optional ``--config`` file of ``key=value`` lines
(``#`` comments allowed); command-line flags override file values. Logs go
to stderr, data to stdout or the files named by ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from papmask import hogdet, nnet
from papmask.core import ESON_CHART, Raster, SeededRng, SizeChart
from papmask.errors import DataError, PapmaskError
from papmask.synthgen import SynthConfig

log = logging.getLogger("papmask")

EXIT_OK, EXIT_USAGE = 0, 2

_TRAIN_ALIASES = {"lr": "learning_rate", "batch": "batch_size", "epochs": "max_epochs"}


# -- configuration -------------------------------------------------------------

@dataclass
class RunConfig:
    seed: int = 0
    paths: dict[str, str] = field(default_factory=dict)
    synth: SynthConfig = field(default_factory=SynthConfig)
    hog: dict[str, hogdet.HogParams] = field(default_factory=lambda: dict(hogdet.DEFAULT_PARAMS))
    svm: dict[str, hogdet.SvmConfig] = field(default_factory=lambda: {c: hogdet.SvmConfig() for c in hogdet.CLASSES})
    train: dict[str, nnet.TrainConfig] = field(
        default_factory=lambda: {c: nnet.TrainConfig() for c in ("nose", "coin")})
    chart: SizeChart = ESON_CHART
    tolerance_base: str = "boundary"

    def train_for(self, stage: str) -> nnet.TrainConfig:
        return replace(self.train[stage], seed=self.seed)


def _coerce(template, text: str):
    """Parse ``text`` to the type of ``template`` (tuples are comma separated)."""
    if isinstance(template, bool):
        low = text.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("1", "true", "yes")
    if isinstance(template, tuple):
        parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
        if len(parts) != len(template):
            raise ValueError(f"expected {len(template)} comma-separated values")
        return tuple(_coerce(t, p) for t, p in zip(template, parts))
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text.strip()


def _set_field(obj, name: str, text: str):
    names = {f.name for f in fields(obj)}
    if name not in names:
        raise KeyError(name)
    return replace(obj, **{name: _coerce(getattr(obj, name), text)})


def apply_setting(cfg: RunConfig, key: str, value: str) -> None:
    parts = key.split(".")
    try:
        if key == "seed":
            cfg.seed = int(value)
        elif parts[0] == "paths" and len(parts) == 2:
            cfg.paths[parts[1]] = value.strip()
        elif parts[0] == "synth" and len(parts) == 2:
            cfg.synth = _set_field(cfg.synth, parts[1], value)
        elif parts[0] == "chart" and len(parts) == 2:
            cfg.chart = _set_field(cfg.chart, parts[1], value)
        elif key == "eval.tolerance_base":
            cfg.tolerance_base = value.strip()
        elif len(parts) == 3 and parts[1] == "hog" and parts[0] in cfg.hog:
            cfg.hog[parts[0]] = _set_field(cfg.hog[parts[0]], parts[2], value)
        elif len(parts) == 3 and parts[1] == "svm" and parts[0] in cfg.svm:
            cfg.svm[parts[0]] = _set_field(cfg.svm[parts[0]], parts[2], value)
        elif len(parts) == 3 and parts[1] == "train" and parts[0] in cfg.train:
            name = _TRAIN_ALIASES.get(parts[2], parts[2])
            cfg.train[parts[0]] = _set_field(cfg.train[parts[0]], name, value)
        else:
            raise KeyError(key)
    except KeyError:
        raise DataError(f"unknown config key {key!r}") from None
    except ValueError as exc:
        raise DataError(f"bad value for {key}: {exc}") from None


def load_config(path: Path | None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from None
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            try:
                apply_setting(cfg, key.strip(), value)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise DataError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply_setting(cfg, key.strip(), value)
    return cfg


# -- helpers ---------------------------------------------------------------------

def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _path_arg(args, name: str, cfg: RunConfig, what: str, must_exist: bool = True) -> Path:
    value = getattr(args, name, None) or cfg.paths.get(name)
    if not value:
        raise DataError(f"no {what} given (use --{name.replace('_', '-')} or paths.{name})")
    return _existing(value, what) if must_exist else Path(value)


def _write_text(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


def _epoch_logger(stage: str):
    def emit(rec):
        log.info("%s epoch %d train %.5f val %.5f", stage, rec.epoch, rec.train_rmse, rec.val_rmse)
    return emit


def _negatives(directory) -> list[Raster]:
    if directory is None:
        return []
    files = sorted(_existing(directory, "negatives directory").glob("*.png"))
    if not files:
        raise DataError(f"no PNG images in {directory}")
    return [Raster.load(p) for p in files]


# -- commands --------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    from papmask.ingest import load_manifest
    from papmask.synthgen import generate_dataset, load_assets

    faces = load_manifest(_path_arg(args, "faces", cfg, "face manifest"))
    assets = load_assets(_path_arg(args, "assets", cfg, "coin asset directory"))
    out = _path_arg(args, "out", cfg, "output directory", must_exist=False)
    man = generate_dataset(faces, assets, cfg.synth, SeededRng(cfg.seed), out, args.mode, log.info)
    log.info("wrote %d coin samples to %s", len(man), out)
    return EXIT_OK


def cmd_demo_corpus(args, cfg: RunConfig) -> int:
    from papmask.schematic import build_corpus

    out = _path_arg(args, "out", cfg, "output directory", must_exist=False)
    man = build_corpus(out, args.count, SeededRng(cfg.seed), style=args.style, widths=args.widths,
                       with_coin=not args.no_coin, cfg=cfg.synth, log=log.info)
    log.info("wrote %d scenes to %s", len(man), out)
    return EXIT_OK


def cmd_train_detector(args, cfg: RunConfig) -> int:
    from papmask.ingest import load_manifest
    from papmask.pipeline import train_stage_detector

    man = load_manifest(_path_arg(args, "manifest", cfg, "manifest"))
    cls = args.cls
    model = train_stage_detector(man, cls, SeededRng(cfg.seed).child(cls), _negatives(args.negatives),
                                 cfg.hog[cls], cfg.svm[cls], log.info)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    hogdet.save_detector(model, out)
    log.info("saved %s detector to %s", cls, out)
    return EXIT_OK


def _training_outputs(args, res, stage: str) -> None:
    from papmask.plotting import history_figure

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nnet.save_weights(res.model, out)
    log.info("%s: %d train / %d val crops, best val %.5f at epoch %d; saved %s",
             stage, res.n_train, res.n_val, res.history.best_val, res.history.best_epoch, out)
    if args.history:
        _write_text(res.history.to_csv(), Path(args.history))
    if args.figure:
        history_figure(res.history, args.figure, f"{stage} landmark regressor")


def _load_optional_detector(path):
    return hogdet.load_detector(_existing(path, "detector")) if path else None


def cmd_train_cnn(args, cfg: RunConfig) -> int:
    from papmask.ingest import load_manifest
    from papmask.pipeline import train_stage_cnn

    man = load_manifest(_path_arg(args, "manifest", cfg, "manifest"))
    tcfg = cfg.train_for(args.cls)
    if args.max_epochs is not None:
        tcfg = replace(tcfg, max_epochs=args.max_epochs)
    res = train_stage_cnn(man, args.cls, tcfg, detector=_load_optional_detector(args.detector),
                          face=_load_optional_detector(args.face_detector), log=_epoch_logger(args.cls))
    _training_outputs(args, res, args.cls)
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    from papmask.ingest import augment_with_flips, load_manifest
    from papmask.pipeline import transfer_train

    base = nnet.load_weights(_existing(args.base, "base weights"))
    man = load_manifest(_path_arg(args, "manifest", cfg, "manifest"))
    if args.flip:
        man = augment_with_flips(man)
    stage = base.name or "nose"
    tcfg = replace(cfg.train_for(stage), batch_size=1)
    if args.max_epochs is not None:
        tcfg = replace(tcfg, max_epochs=args.max_epochs)
    res = transfer_train(base, man, tcfg, stage, detector=_load_optional_detector(args.detector),
                         face=_load_optional_detector(args.face_detector), log=_epoch_logger(stage))
    _training_outputs(args, res, stage)
    return EXIT_OK


PREDICT_FIELDS = ("image", "nose_width_mm", "scale_px_per_mm", "size", "near_boundary",
                  "face_box", "nose_box", "coin_box", "nose_points", "coin_points")


def _models(args, cfg: RunConfig):
    from papmask.pipeline import StageModels

    return StageModels.load(_path_arg(args, "models", cfg, "model directory"), cfg.chart)


def cmd_predict(args, cfg: RunConfig) -> int:
    from papmask.ingest import load_manifest
    from papmask.pipeline import run_pipeline

    models = _models(args, cfg)
    if args.manifest:
        images = [r.path for r in load_manifest(_existing(args.manifest, "manifest"), check_images=False)]
    else:
        images = [_existing(p, "image") for p in args.image]
    if not images:
        raise DataError("give --image or --manifest")
    records, failure = [], None
    for path in images:
        try:
            res = run_pipeline(Raster.load(path), models, Path(path).name)
        except PapmaskError as exc:
            if exc.exit_code != 4 or len(images) == 1:
                raise
            # batch mode: keep going, report the first failure through the exit code
            failure = failure or exc
            log.warning("%s: %s", path, exc.kind)
            records.append({"image": Path(path).name, "error": exc.kind})
            continue
        records.append(res.record())
        if args.overlay_dir:
            from papmask.plotting import overlay_figure

            Path(args.overlay_dir).mkdir(parents=True, exist_ok=True)
            overlay_figure(Raster.load(path), res.record(), Path(args.overlay_dir) / f"{Path(path).stem}.png")
    if args.format == "csv":
        buf = io.StringIO()
        wr = csv.DictWriter(buf, PREDICT_FIELDS + ("error",), lineterminator="\n", restval="")
        wr.writeheader()
        wr.writerows(records)
        text = buf.getvalue()
    else:
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    _write_text(text, Path(args.out) if args.out else None)
    if failure is not None:
        raise failure
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from papmask.evaluate import evaluate_manifest, outcomes_csv
    from papmask.ingest import load_manifest

    models = _models(args, cfg)
    man = load_manifest(_path_arg(args, "manifest", cfg, "manifest"))
    base = args.tolerance_base or cfg.tolerance_base
    rep, outcomes = evaluate_manifest(man, models, cfg.chart, base, log.info)
    sys.stdout.write(rep.render())
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "samples.csv").write_text(outcomes_csv(outcomes), encoding="utf-8")
        (out / "confusion.csv").write_text(rep.matrix.to_csv(), encoding="utf-8")
        if rep.evaluated:
            from papmask.plotting import confusion_figure

            confusion_figure(rep, out / "confusion.png")
    return EXIT_OK


def cmd_report_matrix(args, cfg: RunConfig) -> int:
    from papmask.evaluate import ConfusionMatrix, compare_rates, read_reference_rates, report

    text = _existing(args.csv, "matrix CSV").read_text(encoding="utf-8")
    rep = report(ConfusionMatrix.from_csv(text))
    out = [rep.render()]
    if args.reference:
        ref = read_reference_rates(_existing(args.reference, "reference CSV").read_text(encoding="utf-8"))
        diffs = compare_rates(rep.rates, ref)
        for d in diffs:
            out.append(f"discrepancy: {d.size.value} {d.metric} computed {d.computed:.1f} "
                       f"reference {d.reference:g}\n")
        if not diffs:
            out.append("reference rates: all match\n")
    sys.stdout.write("".join(out))
    if args.figure:
        from papmask.plotting import confusion_figure

        confusion_figure(rep, args.figure)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value settings file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker cap; all stages currently run on one thread")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="papmask", description="Nasal mask sizing from a face photo with a coin.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", parents=[common], help="composite coins onto annotated faces")
    s.add_argument("--faces", help="face manifest (eye and nose_tip landmarks)")
    s.add_argument("--assets", help="coin asset directory")
    s.add_argument("--out", help="output directory")
    s.add_argument("--mode", choices=("ipd", "inner_corner"), default="ipd")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("demo-corpus", parents=[common], help="render a schematic face corpus with coins")
    s.add_argument("--out", help="output directory")
    s.add_argument("--count", type=int, default=40)
    s.add_argument("--style", choices=("public", "patient"), default="public")
    s.add_argument("--widths", choices=("bin-core", "uniform"), default="bin-core")
    s.add_argument("--no-coin", action="store_true")
    s.set_defaults(func=cmd_demo_corpus)

    s = sub.add_parser("train-detector", parents=[common], help="train a HOG window detector")
    s.add_argument("--manifest")
    s.add_argument("--class", dest="cls", choices=hogdet.CLASSES, required=True)
    s.add_argument("--negatives", help="directory of object-free PNG backgrounds")
    s.add_argument("--out", required=True, help="detector file to write")
    s.set_defaults(func=cmd_train_detector)

    for name, func, helptext in (("train-cnn", cmd_train_cnn, "train a landmark regressor from scratch"),
                                 ("finetune", cmd_finetune, "continue training saved weights on a new set")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--manifest")
        if name == "train-cnn":
            s.add_argument("--class", dest="cls", choices=("nose", "coin"), required=True)
        else:
            s.add_argument("--base", required=True, help="weights to start from")
            s.add_argument("--flip", action="store_true", help="add mirrored copies of every record")
        s.add_argument("--detector", help="crop with this detector as well as with jittered annotation boxes")
        s.add_argument("--face-detector", help="face detector bounding the nose search")
        s.add_argument("--max-epochs", type=int)
        s.add_argument("--out", required=True, help="weight file to write")
        s.add_argument("--history", help="per-epoch RMSE CSV")
        s.add_argument("--figure", help="training-curve PNG")
        s.set_defaults(func=func)

    s = sub.add_parser("predict", parents=[common], help="size one or more photographs")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", nargs="+")
    src.add_argument("--manifest")
    s.add_argument("--models", help="directory with face/nose/coin detectors and nose/coin weights")
    s.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    s.add_argument("--out")
    s.add_argument("--overlay-dir", help="write annotated PNGs here")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="score the pipeline on a labelled manifest")
    s.add_argument("--manifest")
    s.add_argument("--models")
    s.add_argument("--tolerance-base", choices=("boundary", "measurement"))
    s.add_argument("--out-dir", help="per-sample CSV, matrix CSV and figure")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report-matrix", parents=[common], help="metrics from a 4x4 confusion matrix CSV")
    s.add_argument("--csv", required=True)
    s.add_argument("--reference", help="class,sensitivity,ppv percentages to compare against")
    s.add_argument("--figure", help="confusion-matrix PNG")
    s.set_defaults(func=cmd_report_matrix)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads < 1:
            raise DataError("--threads must be at least 1")
        return args.func(args, cfg)
    except PapmaskError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"error: internal: {exc}", file=sys.stderr)
        return PapmaskError.exit_code


if __name__ == "__main__":
    sys.exit(main())
