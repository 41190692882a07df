"""Command line entry point: ``lesionkit <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import augment as aug
from . import colorconst, fusion, metrics, postprocess as pp
from .imgcore import (ATTRIBUTES, CLASSES, BinaryMask, DataError, ProbMap, load_mask_png,
                      load_probmap, load_rgb, read_class_table, save_mask_png, save_rgb)
from .report import Report, plot_attribute_scores, plot_confusion, plot_jaccard_histogram

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# config files


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(action: argparse.Action, value: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        truthy = value.lower() in ("1", "true", "yes", "on")
        if not truthy and value.lower() not in ("0", "false", "no", "off"):
            raise UsageError(f"bad boolean {value!r} for {action.dest}")
        return truthy if isinstance(action, argparse._StoreTrueAction) else not truthy
    if action.type is not None:
        try:
            return action.type(value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value {value!r} for {action.dest}: {exc}") from None
    return value


# --------------------------------------------------------------------------
# helpers


def _pmap(workers, fn, items):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _strip_suffix(stem: str, suffix: str) -> str:
    return stem[: -len(suffix)] if suffix and stem.endswith(suffix) else stem


def _index_dir(path, suffixes=(".png",), strip="") -> dict[str, Path]:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"not a directory: {path}")
    out = {}
    for f in sorted(path.iterdir()):
        if f.is_file() and f.suffix.lower() in suffixes:
            key = _strip_suffix(f.stem, strip)
            if key in out:
                raise DataError(f"two files map to image {key!r} in {path}")
            out[key] = f
    return out


def _pair(pred: dict, gt: dict, what: str):
    if not pred and not gt:
        raise DataError(f"no {what} files found")
    missing_gt = sorted(set(pred) - set(gt))
    missing_pred = sorted(set(gt) - set(pred))
    if missing_gt or missing_pred:
        lines = [f"unmatched {what} stems:"]
        lines += [f"  prediction without ground truth: {s}" for s in missing_gt]
        lines += [f"  ground truth without prediction: {s}" for s in missing_pred]
        raise DataError("\n".join(lines))
    return sorted(pred)


def _figures_dir(args):
    if args.figures is None:
        return None
    d = Path(args.figures)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _report(args, command, columns):
    return Report(command, columns, fmt=args.report, banner=not args.no_banner)


# --------------------------------------------------------------------------
# eval-seg


def cmd_eval_seg(args):
    preds = _index_dir(args.pred_dir, strip="_segmentation")
    gts = _index_dir(args.gt_dir, strip="_segmentation")
    stems = _pair(preds, gts, "mask")

    def score(stem):
        return metrics.SegScore.of(load_mask_png(preds[stem]), load_mask_png(gts[stem]),
                                   args.threshold)

    scores = _pmap(args.jobs, score, stems)
    rep = _report(args, "eval-seg", ["image", "raw_jaccard", "thresholded"])
    for stem, s in zip(stems, scores):
        rep.add(image=stem, raw_jaccard=s.raw_jaccard, thresholded=s.thresholded)
    rep.add(image="__mean__",
            raw_jaccard=metrics.mean(s.raw_jaccard for s in scores),
            thresholded=metrics.mean(s.thresholded for s in scores))
    rep.write(args.report_out)
    figs = _figures_dir(args)
    if figs is not None:
        plot_jaccard_histogram([s.raw_jaccard for s in scores], args.threshold,
                               figs / "jaccard_histogram.png")


# --------------------------------------------------------------------------
# eval-attr


def _attribute_sources(path) -> dict[str, object]:
    """Map stem -> PMAP path or {attribute: png path} for one directory."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"not a directory: {path}")
    out: dict[str, object] = {}
    for f in sorted(path.iterdir()):
        if not f.is_file():
            continue
        if f.suffix.lower() == ".pmap":
            out[f.stem] = f
        elif f.suffix.lower() == ".png" and "_attribute_" in f.stem:
            stem, attr = f.stem.split("_attribute_", 1)
            if attr not in ATTRIBUTES:
                raise DataError(f"{f}: unknown attribute {attr!r}")
            slot = out.setdefault(stem, {})
            if not isinstance(slot, dict):
                raise DataError(f"image {stem!r} has both a PMAP and attribute PNGs")
            slot[attr] = f
    return out


def _load_attribute_map(src, stem, binary) -> ProbMap:
    if isinstance(src, Path):
        prob = load_probmap(src)
        if prob.channels != 5:
            raise DataError(f"{src}: expected 5 attribute channels, got {prob.channels}")
        return prob
    missing = [a for a in ATTRIBUTES if a not in src]
    if missing:
        raise DataError(f"image {stem!r}: missing attribute channel(s) {missing}")
    chans = []
    for a in ATTRIBUTES:
        if binary:
            chans.append(load_mask_png(src[a]).data.astype(np.float64))
        else:
            chans.append(_load_png_probability(src[a]))
    shapes = {c.shape for c in chans}
    if len(shapes) != 1:
        raise DataError(f"image {stem!r}: attribute channels differ in size {shapes}")
    return ProbMap(np.stack(chans, axis=2))


def _load_png_probability(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "L":
            return np.asarray(im).astype(np.float64) / 255.0
    return load_probmap(path).data[:, :, 0].astype(np.float64)


def cmd_eval_attr(args):
    preds = _attribute_sources(args.pred_dir)
    gts = _attribute_sources(args.gt_dir)
    stems = _pair(preds, gts, "attribute")

    def score(stem):
        pred = _load_attribute_map(preds[stem], stem, binary=False)
        gt = _load_attribute_map(gts[stem], stem, binary=True)
        if isinstance(gts[stem], Path):
            gt = ProbMap((gt.data >= 0.5).astype(np.float64))
        return metrics.attribute_scores(pred, gt, args.bin_threshold)

    results = _pmap(args.jobs, score, stems)
    rep = _report(args, "eval-attr", ["image", *ATTRIBUTES, "mean"])
    for stem, (scores, m) in zip(stems, results):
        rep.add(image=stem, mean=m, **dict(zip(ATTRIBUTES, scores)))
    col_means = [metrics.mean(r[0][k] for r in results) for k in range(len(ATTRIBUTES))]
    overall = metrics.mean(v for r in results for v in r[0])
    rep.add(image="__mean__", mean=overall, **dict(zip(ATTRIBUTES, col_means)))
    rep.write(args.report_out)
    figs = _figures_dir(args)
    if figs is not None:
        plot_attribute_scores(col_means, figs / "attribute_scores.png")


# --------------------------------------------------------------------------
# eval-cls


def cmd_eval_cls(args):
    cm = metrics.confusion_from_tables(read_class_table(args.pred_csv),
                                       read_class_table(args.gt_csv))
    bacc = metrics.balanced_accuracy(cm)
    recall = metrics.per_class_recall(cm)
    cols = ["class", "support", "correct", "recall", *(f"pred_{c}" for c in CLASSES)]
    rep = _report(args, "eval-cls", cols)
    for i, name in enumerate(CLASSES):
        row = {f"pred_{c}": int(cm.counts[i, j]) for j, c in enumerate(CLASSES)}
        rep.add(**row, **{"class": name, "support": int(cm.counts[i].sum()),
                          "correct": int(cm.counts[i, i]), "recall": recall[name]})
    rep.add(**{"class": "__balanced_accuracy__", "support": int(cm.counts.sum()),
               "correct": int(np.trace(cm.counts)), "recall": bacc})
    rep.write(args.report_out)
    figs = _figures_dir(args)
    if figs is not None:
        plot_confusion(cm.counts, figs / "confusion_matrix.png")


# --------------------------------------------------------------------------
# postprocess


def _chain_params(args) -> pp.ChainParams:
    crf = pp.CrfParams(
        iterations=args.iterations,
        w_spatial=args.w_spatial,
        sigma_spatial=args.sigma_spatial,
        w_bilateral=args.w_bilateral,
        sigma_bilateral_xy=args.sigma_bilateral_xy,
        sigma_bilateral_rgb=args.sigma_bilateral_rgb,
        kernel_truncation_radius_sigmas=args.truncation,
        max_window_pairs=args.max_window_pairs or None,
    )
    return pp.ChainParams(
        crf=crf, use_crf=not args.no_crf, use_watershed=not args.no_watershed,
        fg_threshold=args.fg_threshold, bg_threshold=args.bg_threshold,
        bin_threshold=args.bin_threshold, connectivity=args.connectivity,
        exact=args.exact, elevation=args.elevation,
    )


def cmd_postprocess(args):
    params = _chain_params(args)
    prob_path, image_path, out_path = Path(args.prob), Path(args.image), Path(args.out)
    if prob_path.is_dir():
        probs = _index_dir(prob_path, suffixes=(".pmap", ".png"))
        images = _index_dir(image_path)
        stems = _pair(probs, images, "probability/image")
        out_path.mkdir(parents=True, exist_ok=True)
        jobs = [(probs[s], images[s], out_path / f"{s}_segmentation.png", s) for s in stems]
    else:
        jobs = [(prob_path, image_path, out_path, prob_path.stem)]

    def run(job):
        prob_file, image_file, out_file, stem = job
        debug = Path(args.debug_dir) / stem if args.debug_dir else None
        mask = pp.postprocess_chain(load_rgb(image_file), load_probmap(prob_file), params, debug)
        save_mask_png(mask, out_file)
        return int(mask.data.sum())

    areas = _pmap(args.jobs, run, jobs)
    rep = _report(args, "postprocess", ["image", "output", "lesion_pixels"])
    for (_, _, out_file, stem), area in zip(jobs, areas):
        rep.add(image=stem, output=str(out_file), lesion_pixels=area)
    rep.write(args.report_out)


# --------------------------------------------------------------------------
# augment

_SPEC_FLAGS = {
    "flip_horizontal": "flip_horizontal",
    "flip_vertical": "flip_vertical",
    "scale_enabled": "scale",
    "color_jitter_enabled": "color_jitter",
}


def _augment_spec(args) -> aug.AugmentSpec:
    values = {}
    for f in fields(aug.AugmentSpec):
        v = getattr(args, _SPEC_FLAGS.get(f.name, f.name), None)
        if v is not None:
            values[f.name] = v
    values["seed"] = args.seed
    return aug.AugmentSpec(**values)


def _read_labels(path) -> dict[str, str]:
    """Accept either ``image,class`` or the one-hot ground-truth table."""
    path = Path(path)
    with path.open(newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise DataError(f"{path}: empty label table")
    header = [h.strip() for h in header]
    if header == ["image", "class"]:
        with path.open(newline="") as fh:
            return {r["image"].strip(): r["class"].strip() for r in csv.DictReader(fh)}
    table = read_class_table(path)
    labels = {}
    for image, row in table.items():
        if sorted(row) != [0.0] * 6 + [1.0]:
            raise DataError(f"{path}: label row for {image!r} is not one-hot")
        labels[image] = CLASSES[row.index(1.0)]
    return labels


def cmd_augment(args):
    spec = _augment_spec(args)
    if args.make_plan:
        if not args.plan:
            raise UsageError("--make-plan needs --plan to say where to write the plan")
        plan = aug.balance_plan(_read_labels(args.make_plan), args.target, args.seed, spec)
        plan.write_csv(args.plan)
        rep = _report(args, "augment", ["class", "entries"])
        for label, n in plan.counts().items():
            rep.add(**{"class": label, "entries": n})
        rep.write(args.report_out)
        return

    if not (args.plan and args.images and args.out):
        raise UsageError("augment needs --plan, --images and --out (or --make-plan)")
    rows = aug.read_plan_csv(args.plan)
    images_dir = Path(args.images)
    masks_dir = Path(args.masks) if args.masks else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if masks_dir is not None:
        (out / "masks").mkdir(exist_ok=True)

    def find_mask(image):
        for name in (f"{image}_segmentation.png", f"{image}.png"):
            if (masks_dir / name).is_file():
                return masks_dir / name
        raise DataError(f"no mask for image {image!r} in {masks_dir}")

    def run(row):
        image, _, index = row
        img = load_rgb(images_dir / f"{image}.png")
        mask = load_mask_png(find_mask(image)) if masks_dir is not None else None
        params = aug.draw_params(spec, index)
        img2, mask2 = aug.apply_params(img, mask, spec, params)
        save_rgb(img2, out / f"{image}_{index}.png")
        if mask2 is not None:
            save_mask_png(mask2, out / "masks" / f"{image}_{index}.png")
        return params

    drawn = _pmap(args.jobs, run, rows)
    rep = _report(args, "augment", ["image", "class", "entry_index", "flip_h", "flip_v",
                                    "scale", "brightness", "contrast", "saturation", "hue"])
    for (image, label, index), p in zip(rows, drawn):
        rep.add(image=image, entry_index=index, flip_h=int(p.flip_h), flip_v=int(p.flip_v),
                scale=p.scale, brightness=p.jitter[0], contrast=p.jitter[1],
                saturation=p.jitter[2], hue=p.jitter[3], **{"class": label})
    rep.write(args.report_out)


# --------------------------------------------------------------------------
# color constancy


def cmd_color(args):
    src, dst = Path(args.input), Path(args.output)
    if src.is_dir():
        files = _index_dir(src)
        if not files:
            raise DataError(f"no PNG images in {src}")
        dst.mkdir(parents=True, exist_ok=True)
        jobs = [(files[s], dst / f"{s}.png", s) for s in sorted(files)]
    else:
        jobs = [(src, dst, src.stem)]

    def run(job):
        inp, outp, _ = job
        img = load_rgb(inp)
        illum = colorconst.estimate_illuminant(img, args.p)
        save_rgb(colorconst.correct(img, illum), outp)
        return illum

    illums = _pmap(args.jobs, run, jobs)
    rep = _report(args, "color-constancy", ["image", "e_r", "e_g", "e_b"])
    for (_, _, stem), e in zip(jobs, illums):
        rep.add(image=stem, e_r=e.e_r, e_g=e.e_g, e_b=e.e_b)
    rep.write(args.report_out)


# --------------------------------------------------------------------------
# hierarchy fusion


def cmd_fuse(args):
    out = args.out if args.out else sys.stdout
    fusion.fuse_csv(args.level1, args.level2, args.level3, out, hard=args.hard)


# --------------------------------------------------------------------------
# parser


def _positive_int(v):
    n = int(v)
    if n < 1:
        raise ValueError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", help="key=value file; command-line flags take precedence")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jobs", type=_positive_int, default=1, help="worker threads")
    g.add_argument("--report", choices=("csv", "jsonl"), default="csv")
    g.add_argument("--report-out", help="write the report here instead of stdout")
    g.add_argument("--figures", help="directory for report figures (PNG)")
    g.add_argument("--no-banner", action="store_true", help="omit the timestamp comment line")

    parser = _Parser(prog="lesionkit",
                     description="Scoring and image-processing tools for dermoscopy lesion analysis.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("eval-seg", parents=[common], help="thresholded Jaccard over mask dirs")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--threshold", type=float, default=metrics.SEG_THRESHOLD)
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("eval-attr", parents=[common], help="per-attribute Jaccard")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--bin-threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval_attr)

    p = sub.add_parser("eval-cls", parents=[common], help="balanced multi-class accuracy")
    p.add_argument("pred_csv")
    p.add_argument("gt_csv")
    p.set_defaults(func=cmd_eval_cls)

    d = pp.CrfParams()
    p = sub.add_parser("postprocess", parents=[common], help="CRF + watershed + largest component")
    p.add_argument("--prob", required=True, help="PMAP/16-bit PNG file, or a directory")
    p.add_argument("--image", required=True, help="RGB PNG file, or a directory")
    p.add_argument("--out", required=True, help="output mask PNG, or a directory")
    p.add_argument("--no-crf", action="store_true")
    p.add_argument("--no-watershed", action="store_true")
    p.add_argument("--exact", action="store_true", help="dense O(N^2) CRF (small images only)")
    p.add_argument("--iterations", type=int, default=d.iterations)
    p.add_argument("--w-spatial", type=float, default=d.w_spatial)
    p.add_argument("--sigma-spatial", type=float, default=d.sigma_spatial)
    p.add_argument("--w-bilateral", type=float, default=d.w_bilateral)
    p.add_argument("--sigma-bilateral-xy", type=float, default=d.sigma_bilateral_xy)
    p.add_argument("--sigma-bilateral-rgb", type=float, default=d.sigma_bilateral_rgb)
    p.add_argument("--truncation", type=float, default=d.kernel_truncation_radius_sigmas,
                   help="window radius in multiples of the largest spatial sigma")
    p.add_argument("--max-window-pairs", type=int, default=d.max_window_pairs,
                   help="downsample the CRF above this many window pairs (0 = never)")
    p.add_argument("--fg-threshold", type=float, default=0.8)
    p.add_argument("--bg-threshold", type=float, default=0.2)
    p.add_argument("--bin-threshold", type=float, default=0.5)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--elevation", choices=("inverse", "gradient"), default="inverse")
    p.add_argument("--debug-dir", help="dump every intermediate stage here")
    p.set_defaults(func=cmd_postprocess)

    s = aug.AugmentSpec()
    p = sub.add_parser("augment", parents=[common], help="seeded augmentation from a plan")
    p.add_argument("--plan", help="plan CSV (image,class,entry_index)")
    p.add_argument("--images", help="directory of <image>.png")
    p.add_argument("--masks", help="directory of masks to transform alongside")
    p.add_argument("--out", help="output directory")
    p.add_argument("--make-plan", metavar="LABELS_CSV",
                   help="write a class-balanced plan to --plan and exit")
    p.add_argument("--target", type=_positive_int, default=20000, help="entries per class")
    for flag, dest in (("flip-horizontal", "flip_horizontal"), ("flip-vertical", "flip_vertical"),
                       ("scale", "scale"), ("color-jitter", "color_jitter")):
        p.add_argument(f"--{flag}", dest=dest, action=argparse.BooleanOptionalAction,
                       default=None)
    for name in ("scale_low", "scale_high", "brightness_max_delta", "contrast_max_delta",
                 "saturation_max_delta", "hue_max_delta"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=_fraction, default=None,
                       help=f"default {getattr(s, name):.6g}")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("color-constancy", parents=[common], help="shades-of-gray normalization")
    p.add_argument("input", help="RGB PNG or directory")
    p.add_argument("output", help="output PNG or directory")
    p.add_argument("--p", type=float, default=6.0, help="Minkowski norm order")
    p.set_defaults(func=cmd_color)

    p = sub.add_parser("fuse-hierarchy", parents=[common], help="fuse three level CSVs")
    p.add_argument("--level1", required=True, help="image,NV,OTHER")
    p.add_argument("--level2", required=True, help="image,MEL,BKL,OTHER")
    p.add_argument("--level3", required=True, help="image,BCC,AKIEC,DF,VASC")
    p.add_argument("--out", help="fused 7-class CSV (default stdout)")
    p.add_argument("--hard", action="store_true", help="argmax routing instead of products")
    p.set_defaults(func=cmd_fuse)
    return parser


def _fraction(v: str) -> float:
    if "/" in v:
        num, den = v.split("/", 1)
        return float(num) / float(den)
    return float(v)


def _apply_config(parser, argv):
    args = parser.parse_args(argv)
    if not args.config:
        return args
    config = read_config(args.config)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparser = sub.choices[args.command]
    actions = {a.dest: a for a in subparser._actions
               if a.dest not in ("help", "config", "func") and a.option_strings}
    # BooleanOptionalAction flags are matched by their dest
    unknown = sorted(set(config) - set(actions))
    if unknown:
        raise UsageError(f"unknown config key(s) for {args.command}: {', '.join(unknown)}")
    defaults = {}
    for key, value in config.items():
        action = actions[key]
        if isinstance(action, argparse.BooleanOptionalAction):
            defaults[key] = _coerce(argparse._StoreTrueAction([], key), value)
        else:
            defaults[key] = _coerce(action, value)
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"lesionkit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, OSError) as exc:
        print(f"lesionkit: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
