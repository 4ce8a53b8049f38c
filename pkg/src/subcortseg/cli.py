"""Command-line interface: phantom, train, segment, evaluate.

Exit codes: 0 success, 1 usage error, 2 bad or missing input data,
3 runtime failure.  Diagnostics go to stderr; results go to files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import inference, metrics, model, phantom, sampling, trainer
from .errors import DataError, SegmentationError
from .nifti_io import read_atlas, read_labels, read_volume, write_volume

log = logging.getLogger("subcortseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class MissingInput(DataError):
    pass


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--threads", type=_positive_int, default=1,
                        help="worker threads; affects wall time only (default 1)")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="subcortseg",
                                     description="Patch-based CNN segmentation of sub-cortical structures.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--subjects", required=True, type=_positive_int)
    p.add_argument("--size", type=_positive_int, default=96, help="cubic volume extent (default 96)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--images", required=True, type=Path, help="directory of T1 images")
    p.add_argument("--labels", required=True, type=Path, help="directory of label maps")
    p.add_argument("--atlas", required=True, type=Path, help="atlas prior volume")
    p.add_argument("--out", required=True, type=Path, help="checkpoint to write")
    p.add_argument("--epochs", type=_positive_int, default=200)
    p.add_argument("--batch", type=_positive_int, default=128)
    p.add_argument("--patience", type=_positive_int, default=20)
    p.add_argument("--no-atlas", action="store_true", help="drop the atlas prior branch")
    p.add_argument("--sampling", choices=("boundary", "random"), default="boundary",
                   help="negative sampling scheme (default boundary)")
    p.add_argument("--boundary-distance", type=_positive_int, default=5)
    p.add_argument("--history", type=Path, help="per-epoch JSON lines log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", parents=[common], help="segment one image")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--atlas", required=True, type=Path)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--roi-threshold", type=float, default=0.0)
    p.add_argument("--roi-margin", type=int, default=8)
    p.add_argument("--batch", type=_positive_int, default=128)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", parents=[common], help="score a segmentation against ground truth")
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path, help="JSON report to write")
    p.add_argument("--surface", action="store_true", help="Hausdorff over boundary voxels only")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _require_files(*paths):
    for path in paths:
        if not path.is_file():
            raise MissingInput(f"no such file: {path}")


def _require_dirs(*paths):
    for path in paths:
        if not path.is_dir():
            raise MissingInput(f"no such directory: {path}")


def pair_subjects(images_dir: Path, labels_dir: Path, exclude=()) -> list:
    """Match ``<id>_t1.nii`` images to ``<id>_labels.nii`` label maps.

    Without any ``*_t1.nii`` file, the sorted ``*.nii`` files of the two
    (distinct) directories are paired in order.
    """
    exclude = {p.resolve() for p in exclude}
    t1 = sorted(images_dir.glob("*_t1.nii"))
    if t1:
        pairs = []
        for image in t1:
            label = labels_dir / (image.name[:-len("_t1.nii")] + "_labels.nii")
            if not label.is_file():
                raise MissingInput(f"no label map {label} for image {image}")
            pairs.append((image, label))
        return pairs
    if images_dir.resolve() == labels_dir.resolve():
        raise MissingInput(f"{images_dir}: no *_t1.nii images to pair with labels")
    images = [p for p in sorted(images_dir.glob("*.nii")) if p.resolve() not in exclude]
    labels = [p for p in sorted(labels_dir.glob("*.nii")) if p.resolve() not in exclude]
    if not images:
        raise MissingInput(f"no images found in {images_dir}")
    if len(images) != len(labels):
        raise MissingInput(f"{len(images)} images but {len(labels)} label maps")
    return list(zip(images, labels))


def cmd_phantom(args) -> None:
    dataset = phantom.default_dataset(args.subjects, args.seed, args.size)
    for path in phantom.write_dataset(dataset, args.out):
        log.info("wrote %s", path)


def cmd_train(args) -> None:
    _require_dirs(args.images, args.labels)
    _require_files(args.atlas)
    pairs = pair_subjects(args.images, args.labels, exclude=[args.atlas])
    atlas = read_atlas(args.atlas)
    mode = sampling.BOUNDARY if args.sampling == "boundary" else sampling.RANDOM
    seeds = phantom.subject_seeds(len(pairs), args.seed)
    sets = []
    for (image_path, label_path), seed in zip(pairs, seeds):
        image, labels = read_volume(image_path), read_labels(label_path)
        config = sampling.SamplingConfig(mode, args.boundary_distance, seed)
        sets.append(sampling.select_samples(image, labels, atlas, config))
        log.info("%s: %d samples", image_path.name, len(sets[-1]))
    samples = sampling.SampleSet.concatenate(sets)

    net = model.build_model(args.seed, use_atlas_branch=not args.no_atlas)
    config = trainer.TrainConfig(epochs_max=args.epochs, batch_size=args.batch,
                                 patience=args.patience, seed=args.seed)
    best, history = trainer.train(net, samples, config, history_path=args.history)
    model.save_checkpoint(best, args.out)
    log.info("best validation accuracy %.4f at epoch %d", history.best_val_acc, history.best_epoch)


def cmd_segment(args) -> None:
    _require_files(args.image, args.atlas, args.model)
    params = model.load_checkpoint(args.model)
    image, atlas = read_volume(args.image), read_atlas(args.atlas)
    seg = inference.segment(params, image, atlas, args.roi_threshold, args.roi_margin,
                            args.batch, args.threads)
    write_volume(seg, args.out)


def cmd_evaluate(args) -> None:
    _require_files(args.pred, args.gt)
    report = metrics.evaluate(read_labels(args.pred), read_labels(args.gt), surface_only=args.surface)
    report.write_json(args.report)
    log.info("mean DSC %.4f", report.avg_dsc)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except DataError as exc:
        print(f"subcortseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SegmentationError, OSError, MemoryError, ValueError) as exc:
        print(f"subcortseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
