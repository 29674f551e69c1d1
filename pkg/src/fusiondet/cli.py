"""``fusiondet`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation failure,
3 numerical failure (non-finite values, gradient tolerance exceeded).
Every output file is written to a temporary name and renamed on success.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__, bench, gradsuite, models
from . import detect_toy as dt
from . import io_formats as fio
from . import metrics_eval as me
from .tensor_core import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("fusiondet")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _positive(kind=int, minimum=1):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value {text!r}") from None
        if not v >= minimum:
            raise argparse.ArgumentTypeError(f"must be >= {minimum}, got {text}")
        return v
    return parse


def _shape_list(text):
    shapes = []
    for part in text.split(","):
        try:
            c, h, w = (int(v) for v in part.lower().split("x"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"shape {part!r} is not CxHxW") from None
        if min(c, h, w) < 1:
            raise argparse.ArgumentTypeError(f"shape {part!r} has a non-positive size")
        shapes.append((c, h, w))
    return shapes


def _add_scene_flags(p):
    g = p.add_argument_group("scene")
    g.add_argument("--scene", choices=("default", "trivial"), default="default",
                   help="trivial: one large centred disc, no noise (other scene flags ignored)")
    g.add_argument("--height", type=_positive(), default=64)
    g.add_argument("--width", type=_positive(), default=64)
    g.add_argument("--min-objects", type=_positive(minimum=0), default=1)
    g.add_argument("--max-objects", type=_positive(minimum=0), default=4)
    g.add_argument("--noise", type=_positive(float, 0.0), default=0.05)
    g.add_argument("--blur", type=_positive(float, 0.0), default=0.5)


def _scene(args) -> dt.SceneConfig:
    if args.height % dt.STRIDE or args.width % dt.STRIDE:
        raise UsageError(f"--height/--width must be multiples of {dt.STRIDE}")
    if args.scene == "trivial":
        return dt.trivial_scene(args.seed)
    try:
        return dt.SceneConfig(height=args.height, width=args.width, objects=(args.min_objects, args.max_objects),
                              noise=args.noise, blur=args.blur, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _scene_from_dict(d: dict) -> dt.SceneConfig:
    return dt.SceneConfig(**d)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusiondet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="render a synthetic dataset directory")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", type=_positive(minimum=0), default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "val"), default="train",
                   help="val draws from a disjoint index range")
    _add_scene_flags(p)

    p = sub.add_parser("train", help="train the toy detector with SGD")
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--loss-csv", type=Path, help="default: <out>.loss.csv")
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")
    p.add_argument("--steps", type=_positive(minimum=0), default=3000)
    p.add_argument("--lr", type=_positive(float, 0.0), default=0.01)
    p.add_argument("--batch", type=_positive(), default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-caf-block", action="store_true", help="ablation arm without the fusion block")
    p.add_argument("--blocks", type=_positive(), default=1)
    p.add_argument("--n1", type=_positive(), default=2, help="first dilation rate")
    p.add_argument("--n2", type=_positive(), default=3, help="second dilation rate")
    p.add_argument("--hidden", type=_positive(), help="feed-forward width (default 2x block width)")
    p.add_argument("--patience", type=_positive(minimum=0), default=10, help="0 disables early stopping")
    p.add_argument("--eval-every", type=_positive(), default=100)
    p.add_argument("--val-images", type=_positive(), default=32)
    p.add_argument("--train-images", type=_positive(), help="fixed training pool size")
    p.add_argument("--clip-norm", type=_positive(float, 0.0), default=10.0,
                   help="global gradient-norm cap, 0 disables")
    _add_scene_flags(p)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--dets", type=Path)
    p.add_argument("--gts", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, help="dataset directory from gen-data")
    p.add_argument("--out", type=Path, help="also write the report here")
    p.add_argument("--classes", help="comma-separated class ids (default: inferred)")
    p.add_argument("--conf", type=_positive(float, 0.0), default=0.05, help="decode confidence threshold")
    p.add_argument("--nms", type=_positive(float, 0.0), default=0.5, help="decode NMS IoU threshold")
    p.add_argument("--score-threshold", type=_positive(float, 0.0), default=me.SCORE_THRESHOLD)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--instances", type=_positive(), default=3)
    p.add_argument("--samples", type=_positive(), default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops", help=f"comma-separated subset of: {', '.join(gradsuite.CASES)}")
    p.add_argument("--tolerance", type=_positive(float, 0.0), default=gradsuite.TOLERANCE)

    p = sub.add_parser("bench", help="time kernels and compare attention layouts")
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    p.add_argument("--shapes", type=_shape_list, default=list(bench.DEFAULT_SHAPES), help="e.g. 8x8x8,32x16x16")
    p.add_argument("--repeats", type=_positive(), default=5)
    p.add_argument("--batch", type=_positive(), default=1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("forward", help="run a saved model on a tensor file")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def cmd_gen_data(args) -> int:
    scene = _scene(args)
    offset = dt.VAL_OFFSET if args.split == "val" else 0
    images, records = [], []
    for k in range(args.count):
        img, gts = dt.gen_scene(scene, offset + k)
        image_id = f"img{offset + k}"
        images.append((image_id, img))
        records += [(image_id, g) for g in gts]
    meta = {"scene": dt.scene_to_dict(scene), "split": args.split, "offset": offset}
    fio.write_dataset(args.out, images, records, meta)
    _validate_dataset(args.out, scene)
    print(f"wrote {len(images)} images with {len(records)} objects to {args.out}")
    return EXIT_OK


def _validate_dataset(directory: Path, scene: dt.SceneConfig) -> None:
    manifest, images, gts = fio.read_dataset(directory)
    ids = {i for i, _ in images}
    for image_id, img in images:
        if img.shape != (1, 1, scene.height, scene.width):
            raise DataError(f"{image_id}: image shape {img.shape}")
    for image_id, boxes in gts.items():
        if image_id not in ids:
            raise DataError(f"ground truth for unknown image {image_id}")
        for b in boxes:
            if not (0 <= b.x1 <= b.x2 <= scene.width and 0 <= b.y1 <= b.y2 <= scene.height):
                raise DataError(f"{image_id}: box outside the image: {b}")
            if not 0 <= b.class_id < scene.num_classes:
                raise DataError(f"{image_id}: class {b.class_id} out of range")


def cmd_train(args) -> int:
    if args.resume is not None:
        cfg, p = models.load(args.resume)
        if cfg.get("kind") != "detector":
            raise DataError(f"{args.resume} does not hold a detector")
        scene = _scene_from_dict(cfg["scene"])
        start, seed = int(cfg["step"]), int(cfg["seed"])
        log.info("resuming from step %d of %s", start, args.resume)
    else:
        scene = _scene(args)
        start, seed = 0, args.seed
        try:
            p = dt.init_detector(num_classes=scene.num_classes, seed=seed, use_caf_block=not args.no_caf_block,
                                 blocks=args.blocks, hidden=args.hidden, dilations=(args.n1, args.n2))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    tcfg = dt.TrainConfig(lr=args.lr, batch_size=args.batch, steps=args.steps,
                          patience=args.patience or None, eval_every=args.eval_every,
                          val_images=args.val_images, train_images=args.train_images,
                          clip_norm=args.clip_norm or None)

    def progress(step, loss):
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, loss)

    try:
        result = dt.train(tcfg, scene, p, start_step=start, callback=progress)
    except dt.TrainingDivergedError as exc:
        raise NumericalError(str(exc)) from None
    end = start + len(result.loss_history)
    config = models.detector_config(result.params, seed=seed, step=result.best_step, steps_run=end,
                                    scene=dt.scene_to_dict(scene),
                                    train={"lr": tcfg.lr, "batch_size": tcfg.batch_size,
                                           "patience": tcfg.patience, "eval_every": tcfg.eval_every,
                                           "val_images": tcfg.val_images, "train_images": tcfg.train_images,
                                           "clip_norm": tcfg.clip_norm},
                                    stopped_early=result.stopped_early)
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for i, loss in enumerate(result.loss_history):
        writer.writerow([start + i + 1, repr(loss)])
    loss_csv = args.loss_csv or args.out.with_name(args.out.name + ".loss.csv")
    _ensure_parent(args.out)
    _ensure_parent(loss_csv)
    models.save(args.out, result.params, config)
    fio.atomic_write_bytes(loss_csv, buf.getvalue().encode("utf-8"))
    last = result.loss_history[-1] if result.loss_history else float("nan")
    print(f"trained steps {start}..{end} final_loss={last:.6g} best_step={result.best_step} "
          f"stopped_early={result.stopped_early}")
    print(f"checkpoint={args.out}")
    print(f"loss_csv={loss_csv}")
    return EXIT_OK


def _parse_classes(text: Optional[str]):
    if text is None:
        return None
    try:
        return sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError:
        raise UsageError(f"--classes must be comma-separated integers, got {text!r}") from None


def cmd_eval(args) -> int:
    file_mode = args.dets is not None or args.gts is not None
    model_mode = args.checkpoint is not None or args.data is not None
    if file_mode == model_mode:
        raise UsageError("give either --dets and --gts, or --checkpoint and --data")
    if file_mode and (args.dets is None or args.gts is None):
        raise UsageError("--dets and --gts go together")
    if model_mode and (args.checkpoint is None or args.data is None):
        raise UsageError("--checkpoint and --data go together")
    classes = _parse_classes(args.classes)
    if file_mode:
        dets = fio.group_by_image(fio.read_detections(args.dets, "det"))
        gts = fio.group_by_image(fio.read_detections(args.gts, "gt"))
    else:
        cfg, p = models.load(args.checkpoint)
        if cfg.get("kind") != "detector":
            raise DataError(f"{args.checkpoint} does not hold a detector")
        _, images, gts = fio.read_dataset(args.data)
        dets = {}
        for image_id, img in images:
            [boxes] = dt.decode(dt.detector_forward(img, p), args.conf, args.nms, img.shape[2:])
            dets[image_id] = boxes
        gts = {image_id: gts.get(image_id, []) for image_id, _ in images}
        if classes is None:
            classes = list(range(cfg["num_classes"]))
    try:
        report = me.evaluate(dets, gts, classes=classes, score_threshold=args.score_threshold)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    text = report.to_text()
    if args.out is not None:
        _ensure_parent(args.out)
        fio.atomic_write_bytes(args.out, text.encode("utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = list(gradsuite.CASES)
    if args.ops:
        ops = [o.strip() for o in args.ops.split(",") if o.strip()]
        unknown = [o for o in ops if o not in gradsuite.CASES]
        if unknown:
            raise UsageError(f"unknown ops {unknown}; choose from {list(gradsuite.CASES)}")
    try:
        rows = gradsuite.run_suite(args.instances, args.seed, args.samples, ops)
    except FloatingPointError as exc:
        raise NumericalError(str(exc)) from None
    print(f"{'op':<22} {'instances':>9} {'max_rel_err':>12} {'checked':>8} {'skipped':>8}  status")
    failed = []
    for r in rows:
        ok = r.max_rel_error < args.tolerance
        print(f"{r.op:<22} {r.instances:>9} {r.max_rel_error:>12.3e} {r.checked:>8} {r.skipped:>8}  "
              f"{'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(r.op)
    print(f"tolerance={args.tolerance!r}")
    print(f"failed={','.join(failed) if failed else 'none'}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_bench(args) -> int:
    rows = bench.run_bench(args.shapes, args.repeats, args.batch, args.seed)
    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=bench.FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    if args.out is None:
        sys.stdout.write(buf.getvalue())
    else:
        _ensure_parent(args.out)
        fio.atomic_write_bytes(args.out, buf.getvalue().encode("utf-8"))
        print(f"wrote {len(rows)} rows to {args.out}")
    for c, h, w in args.shapes:
        cxc, hwhw = bench.attention_macs(c, h, w, "cxc"), bench.attention_macs(c, h, w, "hwxhw")
        print(f"# attention macs c={c} hw={h * w}: cxc={cxc} hwxhw={hwhw} ratio={cxc / hwhw:.4g}",
              file=sys.stderr)
    return EXIT_OK


def cmd_forward(args) -> int:
    cfg, p = models.load(args.checkpoint)
    x = fio.read_tensor(args.input)
    if x.ndim != 4:
        raise DataError(f"input must be a 4-d tensor (n, c, h, w), got shape {x.shape}")
    y = np.asarray(models.forward(cfg, p, x))
    if not np.all(np.isfinite(y)):
        raise NumericalError("forward produced non-finite values")
    _ensure_parent(args.out)
    fio.write_tensor(args.out, y)
    print(f"input={tuple(x.shape)} output={tuple(y.shape)} kind={cfg['kind']}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "forward": cmd_forward,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fusiondet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, fio.FormatError, ShapeError, FileNotFoundError, IsADirectoryError,
            NotADirectoryError, KeyError, ValueError) as exc:
        print(f"fusiondet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"fusiondet {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
