"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, classify, consistency4d, metrics, prototype_bank, synth, tensor_io
from .errors import FormatError, ManifestError, NumericError

log = logging.getLogger("protoseg")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _positive(kind):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return parse


def cmd_build_bank(args) -> None:
    manifest = prototype_bank.PromptManifest.load(args.manifest)
    bank = prototype_bank.build_bank(manifest, threads=args.threads)
    bank.save(args.out)
    log.info("bank: %d prototypes, %d subclasses, D=%d", len(bank), bank.num_subclasses, bank.dims)


def cmd_fit(args) -> None:
    bank = prototype_bank.PrototypeBank.load(args.bank)
    model = classify.fit_lr(bank, args.C, multinomial=args.multinomial, threads=args.threads)
    model.save(args.out)
    log.info("fit: %d subclasses, C=%g", len(model.weights), model.C)


def cmd_classify(args) -> None:
    points = tensor_io.read_feature_matrix(args.points)
    if args.mode == "lr":
        if args.model:
            model = classify.LinearClassifier.load(args.model)
        elif args.bank:
            model = classify.fit_lr(prototype_bank.PrototypeBank.load(args.bank), args.C, threads=args.threads)
        else:
            raise _usage("--mode lr needs --model or --bank")
        out = classify.lr_classify(points, model, threads=args.threads)
        ignore_id = model.ignore_id
    else:
        if not args.bank:
            raise _usage(f"--mode {args.mode} needs --bank")
        bank = prototype_bank.PrototypeBank.load(args.bank)
        ignore_id = bank.ignore_id
        if args.mode == "nn":
            out = classify.nn_classify(points, bank, threads=args.threads)
        else:
            if args.tau is None:
                raise _usage("--mode threshold needs --tau")
            out = classify.threshold_classify(points, bank, args.tau, threads=args.threads)
    tensor_io.write_labels(tensor_io.LabelArray(out.classes, ignore_id), args.out)
    if args.subclass_out:
        tensor_io.write_labels(tensor_io.LabelArray(out.subclasses, ignore_id), args.subclass_out)
    if args.scores_out:
        tensor_io.write_feature_matrix(out.scores[:, None], args.scores_out)


def cmd_retrieve(args) -> None:
    points = tensor_io.read_feature_matrix(args.points)
    bank = prototype_bank.PrototypeBank.load(args.bank)
    if args.subclass not in bank.subclass_names:
        raise ManifestError(f"unknown subclass {args.subclass!r}", args.bank)
    s = bank.subclass_names.index(args.subclass)
    mask = np.zeros(len(points), bool)
    for row in np.flatnonzero(bank.subclass_of == s):
        mask |= classify.threshold_retrieve(points, bank.prototypes[row], args.tau)
    tensor_io.write_labels(tensor_io.LabelArray(mask.astype(np.uint32), bank.ignore_id), args.out)
    log.info("retrieve: %d of %d points", int(mask.sum()), len(points))


def cmd_ensemble(args) -> None:
    a = tensor_io.read_feature_matrix(args.a)
    b = tensor_io.read_feature_matrix(args.b)
    tensor_io.write_feature_matrix(classify.concat_features(a, b, args.renorm), args.out)


def cmd_consist(args) -> None:
    scans = consistency4d.load_scan_manifest(args.scans)
    ignore_id = scans[0].labels.ignore_id if scans else tensor_io.DEFAULT_IGNORE_ID
    table = consistency4d.vote(scans, args.voxel, ignore_id, weighted=args.weighted, threads=args.threads)
    relabeled = consistency4d.propagate(scans, table, args.voxel, threads=args.threads)
    paths = consistency4d.export_pseudolabels(relabeled, args.out)
    log.info("consist: %d voxels voted, %d files", len(table.winners()[0]), len(paths))


def cmd_eval(args) -> None:
    classes, ignore_id = prototype_bank.load_class_names(args.classes)
    gt = tensor_io.read_labels(args.gt, num_classes=len(classes))
    names = args.name or []
    if names and len(names) != len(args.pred):
        raise _usage("--name must be given once per --pred")
    reports = []
    for i, pred_path in enumerate(args.pred):
        pred = tensor_io.read_labels(pred_path, num_classes=len(classes))
        conf = metrics.confusion(gt, pred, len(classes), threads=args.threads)
        try:
            report = metrics.iou(conf, classes)
        except ValueError as exc:
            raise NumericError(str(exc)) from None
        reports.append((names[i] if names else Path(pred_path).stem, report))
    text = metrics.compare(reports, "csv")
    if args.out:
        tensor_io._atomic_write(args.out, text.encode())
    sys.stdout.write(metrics.compare(reports, "text"))


def cmd_synth(args) -> None:
    try:
        cfg = synth.SynthConfig.load(args.config)
    except (ValueError, TypeError) as exc:
        raise ManifestError(f"bad synth config: {exc}", args.config) from None
    synth.write_outputs(cfg, args.out)


def cmd_crop(args) -> None:
    image = tensor_io.read_image(args.image)
    tensor_io.write_image(prototype_bank.tight_crop(image, args.white), args.out)


class _UsageError(Exception):
    pass


def _usage(msg: str) -> _UsageError:
    return _UsageError(msg)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive(int), default=1, help="worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="protoseg", description="Prototype-based open-vocabulary point labeling.")
    p.add_argument(
        "--version",
        action="version",
        version=f"protoseg {__version__} (igft v{tensor_io.IGFT_VERSION}, igl v{tensor_io.IGL_VERSION}, "
        "ppm P6/255, poses 3x4 text)",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-bank", parents=[common], help="average patch features into a prototype bank")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="bank JSON; rows go to <stem>.igft")
    s.set_defaults(func=cmd_build_bank)

    s = sub.add_parser("fit", parents=[common], help="fit the logistic-regression classifier")
    s.add_argument("--bank", required=True)
    s.add_argument("--C", type=_positive(float), default=1.0)
    s.add_argument("--multinomial", action="store_true", help="softmax instead of one-vs-rest")
    s.add_argument("--out", required=True, help="model .igft; metadata goes to <stem>.json")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("classify", parents=[common], help="label point features")
    s.add_argument("--mode", choices=("nn", "lr", "threshold"), default="lr")
    s.add_argument("--points", required=True)
    s.add_argument("--bank")
    s.add_argument("--model")
    s.add_argument("--C", type=_positive(float), default=1.0, help="used when fitting from --bank")
    s.add_argument("--tau", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--subclass-out")
    s.add_argument("--scores-out")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("retrieve", parents=[common], help="threshold retrieval for one subclass")
    s.add_argument("--points", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--subclass", required=True)
    s.add_argument("--tau", type=float, required=True)
    s.add_argument("--out", required=True, help="0/1 mask as .igl")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("ensemble", parents=[common], help="concatenate two feature spaces")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--renorm", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("consist", parents=[common], help="voxel majority voting over a scan sequence")
    s.add_argument("--scans", required=True)
    s.add_argument("--voxel", type=_positive(float), default=consistency4d.DEFAULT_VOXEL_SIZE)
    s.add_argument("--weighted", action="store_true", help="confidence-weighted votes")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_consist)

    s = sub.add_parser("eval", parents=[common], help="per-class IoU and mIoU")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True, action="append")
    s.add_argument("--name", action="append", help="column name per --pred")
    s.add_argument("--classes", required=True, help="manifest or bank JSON with the class list")
    s.add_argument("--out", help="CSV report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic scene and scan sequence")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("crop", parents=[common], help="tight-crop the white border of a P6 image")
    s.add_argument("--image", required=True)
    s.add_argument("--white", type=int, default=prototype_bank.DEFAULT_WHITE_THRESHOLD)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_crop)
    return p


def _fail(code: int, kind: str, exc) -> int:
    msg = " ".join(str(exc).split())
    print(f"protoseg: error[{code}] {kind}: {msg}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "usage", exc)
    except FormatError as exc:
        return _fail(EXIT_DATA, "data", exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except OSError as exc:
        return _fail(EXIT_DATA, "io", f"{exc.strerror or exc} ({exc.filename})")
    except ValueError as exc:
        return _fail(EXIT_DATA, "data", exc)
    return EXIT_OK


def main() -> None:
    sys.exit(run())
