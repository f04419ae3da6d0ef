"""Command-line entry points: gen-pairs, train, eval, register, mosaic.

Exit codes: 0 success, 1 usage or configuration error, 2 pipeline failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import training as tr
from .detector import Detector
from .evaluation import EvalConfig, evaluate_directory, register_pair, write_report
from .geometry import HomographySampleRanges, write_homography
from .imaging import AugmentationConfig, ImageFormatError, atomic_write_bytes, load_image, save_image
from .mosaic import list_frames, load_frames, register_sequence, render, write_summary
from .net import CheckpointError, load_checkpoint
from .registration import is_failed_transform

EXIT_OK, EXIT_USAGE, EXIT_PIPELINE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("kpreward")


class UsageError(Exception):
    pass


class PipelineError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_range_flags(p):
    g = p.add_argument_group("homography sampling ranges")
    for f in fields(HomographySampleRanges):
        g.add_argument(_flag(f.name), type=float, default=None, help=f"default {f.default}")


def _add_aug_flags(p):
    g = p.add_argument_group("appearance augmentation")
    g.add_argument("--no-augment", action="store_true", help="disable every appearance transform")
    for name in ("noise", "contrast", "illumination", "gamma", "motion_blur", "invert"):
        g.add_argument(_flag("no_" + name), action="store_true")
    for name in ("noise_sigma", "contrast_gain", "illumination_offset", "gamma_range", "blur_angle_deg"):
        g.add_argument(_flag(name), type=float, nargs=2, metavar=("LO", "HI"), default=None)
    g.add_argument("--blur-lengths", type=int, nargs="+", default=None)
    g.add_argument("--invert-prob", type=float, default=None)
    g.add_argument("--select-prob", type=float, default=None)


def _ranges(args, base: HomographySampleRanges) -> HomographySampleRanges:
    over = {f.name: getattr(args, f.name) for f in fields(HomographySampleRanges)
            if getattr(args, f.name) is not None}
    return replace(base, **over)


def _augmentation(args, base: AugmentationConfig) -> AugmentationConfig:
    if args.no_augment:
        return AugmentationConfig.disabled()
    over = {}
    for name in ("noise", "contrast", "illumination", "gamma", "motion_blur", "invert"):
        if getattr(args, "no_" + name):
            over[name] = False
    for name in ("noise_sigma", "contrast_gain", "illumination_offset", "gamma_range", "blur_angle_deg",
                 "blur_lengths"):
        if getattr(args, name) is not None:
            over[name] = tuple(getattr(args, name))
    for name in ("invert_prob", "select_prob"):
        if getattr(args, name) is not None:
            over[name] = getattr(args, name)
    return replace(base, **over)


def _write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _resolved(args, **extra) -> dict:
    d = {k: v for k, v in vars(args).items() if k != "func"}
    d.update(extra)
    return json.loads(json.dumps(d, default=str))


def _config_path_for(out_file: Path) -> Path:
    return out_file.with_name(out_file.name + ".config.json")


def _load_detector(args) -> Detector:
    if args.checkpoint is None:
        model = tr.Unet(tuple(args.channels), tr.stream(args.seed, tr.STREAM_INIT))
    else:
        model, _, _ = load_checkpoint(args.checkpoint)
    return Detector(model, args.nms_window, args.nms_threshold, args.max_kp)


def _eval_config(args) -> EvalConfig:
    return EvalConfig(ratio=args.ratio, matcher=args.matcher, eps=args.eps, coverage_radius=args.coverage_radius,
                      ransac_iters=args.ransac_iters, ransac_thresh=args.ransac_thresh)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_pairs(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    ranges = _ranges(args, HomographySampleRanges())
    aug = _augmentation(args, AugmentationConfig())
    bases = tr.load_bases(tr.read_manifest(args.bases))
    if args.count and not bases:
        raise UsageError("manifest lists no base images")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", _resolved(args, ranges=asdict(ranges), augmentation=asdict(aug)))
    for i in range(args.count):
        j = i % len(bases)
        pair = tr.generate_pair(bases[j], ranges, aug, tr.stream(args.seed, tr.STREAM_PAIRS, i), args.crop, j)
        save_image(pair.a, out / f"pair_{i:06d}_a.pgm")
        save_image(pair.b, out / f"pair_{i:06d}_b.pgm")
        write_homography(pair.h, out / f"pair_{i:06d}_h.txt")
    log.info("wrote %d pairs to %s", args.count, out)
    return EXIT_OK


def train_config_from_args(args) -> tr.TrainConfig:
    base = tr.desk_config(args.seed) if args.preset == "desk" else tr.TrainConfig(seed=args.seed)
    over = {}
    for f in fields(tr.TrainConfig):
        if f.name in ("ranges", "augmentation", "seed"):
            continue
        v = getattr(args, f.name, None)
        if v is not None:
            over[f.name] = tuple(v) if f.name == "channels" else v
    cfg = replace(base, **over)
    return replace(cfg, ranges=_ranges(args, cfg.ranges), augmentation=_augmentation(args, cfg.augmentation))


def cmd_train(args) -> int:
    try:
        cfg = train_config_from_args(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    bases = tr.load_bases(tr.read_manifest(args.bases))
    if not bases:
        raise UsageError("manifest lists no base images")
    for i, b in enumerate(bases):
        if min(b.shape) < cfg.crop:
            raise UsageError(f"base image {i} ({b.shape[1]}x{b.shape[0]}) is smaller than the crop {cfg.crop}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {"train": cfg.to_json(), "bases": args.bases, "resume": args.resume})

    def progress(rec):
        log.info("step %d epoch %d loss %s tp %d/%d", rec["step"], rec["epoch"], rec["loss"], rec["n_tp"],
                 rec["n_matches"])

    if args.resume:
        tr.resume(bases, cfg, args.resume, out, callback=progress)
    else:
        tr.train(bases, cfg, out, callback=progress)
    return EXIT_OK


def cmd_eval(args) -> int:
    det = _load_detector(args)
    cfg = _eval_config(args)
    pairs_dir = Path(args.pairs)
    if not pairs_dir.is_dir():
        raise OSError(f"pairs directory {pairs_dir} not found")
    report = evaluate_directory(det, pairs_dir, lambda i: tr.stream(args.seed, tr.STREAM_RANSAC, i), cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(_config_path_for(out), _resolved(args, eval=asdict(cfg)))
    write_report(out, report)
    s = report["summary"]
    log.info("%d pairs: acceptable %.1f%% inaccurate %.1f%% failed %.1f%%", s["n_pairs"], s["acceptable_pct"],
             s["inaccurate_pct"], s["failed_pct"])
    return EXIT_OK


def _gray(img):
    return img[..., 1] if img.ndim == 3 else img


def cmd_register(args) -> int:
    det = _load_detector(args)
    a, b = _gray(load_image(args.a)), _gray(load_image(args.b))
    h, info = register_pair(det, a, b, tr.stream(args.seed, tr.STREAM_RANSAC, 0), _eval_config(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(_config_path_for(out), _resolved(args))
    if h is None or is_failed_transform(h):
        raise PipelineError(f"registration failed ({len(info['matches'])} matches)")
    write_homography(h, out)
    return EXIT_OK


def cmd_mosaic(args) -> int:
    det = _load_detector(args)
    paths = list_frames(args.frames)
    if not paths:
        raise UsageError(f"no frames found in {args.frames}")
    frames = load_frames(paths)
    state = register_sequence(frames, det, _eval_config(args), tr.stream(args.seed, tr.STREAM_RANSAC, 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", _resolved(args, frames_list=[str(p) for p in paths]))
    save_image(render(state, frames), out / "mosaic.pgm")
    write_summary(out / "summary.json", state)
    log.info("registered %d of %d frames", state.frames_registered, len(frames))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_detector_flags(p):
    p.add_argument("--checkpoint", default=None, help="trained model; without it a fresh model from --seed")
    p.add_argument("--channels", type=int, nargs="+", default=[8, 16, 32, 64],
                   help="channel plan of the fresh model used without --checkpoint")
    p.add_argument("--nms-window", type=int, default=10)
    p.add_argument("--nms-threshold", type=float, default=0.0)
    p.add_argument("--max-kp", type=int, default=1000)
    p.add_argument("--matcher", choices=("nndr", "cross_check"), default="nndr")
    p.add_argument("--ratio", type=float, default=0.8, help="NNDR threshold")
    p.add_argument("--eps", type=float, default=3.0, help="true-positive distance in pixels")
    p.add_argument("--coverage-radius", type=float, default=25.0)
    p.add_argument("--ransac-iters", type=int, default=1000)
    p.add_argument("--ransac-thresh", type=float, default=3.0)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kpreward", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="root seed of every random stream")
    p.add_argument("--threads", type=int, default=1,
                   help="bound on worker threads; every stage currently runs sequentially")
    p.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-pairs", help="synthesize image pairs with known homographies")
    g.add_argument("--bases", required=True, help="manifest of base images, one path per line")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--crop", type=int, default=None, help="square crop side (default: whole base)")
    _add_range_flags(g)
    _add_aug_flags(g)
    g.set_defaults(func=cmd_gen_pairs)

    t = sub.add_parser("train", help="train the detector from the matching reward",
                       description="Defaults are the full-scale values (batch 5, 256 px crops, 35 epochs, "
                                   "lr 1e-3). --preset desk switches to the 64 px desk-scale setup: "
                                   "300 steps, batch 5, narrower homography ranges and milder augmentation.")
    t.add_argument("--bases", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--preset", choices=("full", "desk"), default="full")
    for f in fields(tr.TrainConfig):
        if f.name in ("ranges", "augmentation", "seed"):
            continue
        if f.name == "channels":
            t.add_argument("--channels", type=int, nargs="+", default=None)
        else:
            kind = float if f.type in ("float", float) else int
            if f.name == "max_steps":
                kind = int
            t.add_argument(_flag(f.name), type=kind, default=None)
    _add_range_flags(t)
    _add_aug_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a detector on a directory of pairs")
    e.add_argument("--pairs", required=True)
    e.add_argument("--out", required=True, help="report JSON path")
    _add_detector_flags(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("register", help="estimate the homography between two images")
    r.add_argument("--a", required=True)
    r.add_argument("--b", required=True)
    r.add_argument("--out", required=True, help="homography output file")
    _add_detector_flags(r)
    r.set_defaults(func=cmd_register)

    m = sub.add_parser("mosaic", help="register a frame sequence and blend it")
    m.add_argument("--frames", required=True, help="frame directory or manifest")
    m.add_argument("--out", required=True, help="output directory")
    _add_detector_flags(m)
    m.set_defaults(func=cmd_mosaic)
    return p


def _check_threads(n: int) -> None:
    if n < 1:
        raise UsageError("--threads must be >= 1")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (OSError, ImageFormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
