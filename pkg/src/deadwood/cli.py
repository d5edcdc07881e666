"""Command-line front door: tile -> synth -> (external detector) -> eval.

Every subcommand writes only under its --out destination, all
randomness flows from the --seed flag, and identical invocations on
identical inputs produce byte-identical outputs. A JSON config file
can pre-set any flag; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__, losses, synth, tiler
from .coco_io import CocoError, read_coco
from .evaluation import evaluate, ground_truths_from_coco, read_detections, write_report

OCCLUSION_FLAGS = {"keep": "keep", "drop": "drop_fragmented", "split": "split_components"}


class CliError(Exception):
    """Validation failure; message names the offending flag or field."""


def _load_config(path: str | None, section: str) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"--config: file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"--config: not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise CliError("--config: top level must be a JSON object")
    value = raw.get(section, {})
    if not isinstance(value, dict):
        raise CliError(f"--config: section '{section}' must be an object")
    return value


def _pick(flag_value, config: dict, key: str, default):
    """Flags beat config, config beats defaults."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _parse_tile_size(text: str) -> tuple[int, int]:
    try:
        w_str, h_str = text.lower().split("x")
        w, h = int(w_str), int(h_str)
    except ValueError:
        raise CliError(f"--tile-size: expected WxH, got {text!r}")
    if w <= 0 or h <= 0:
        raise CliError(f"--tile-size: dimensions must be positive, got {text!r}")
    return w, h


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deadwood",
        description="Aerial dead-tree dataset tooling: tiling, synthesis, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; explicit flags override it")
    common.add_argument("--threads", type=int, default=None, help="worker count (default 1)")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p_tile = sub.add_parser("tile", parents=[common], help="split a raster into fixed-size patches")
    p_tile.add_argument("--input", required=True, help="input raster (PNG or TIFF)")
    p_tile.add_argument("--tile-size", default=None, help="tile size as WxH (default 800x800)")
    p_tile.add_argument("--out", required=True, help="output directory")
    pad_group = p_tile.add_mutually_exclusive_group()
    pad_group.add_argument("--pad", action="store_true", help="zero-pad edge tiles (default)")
    pad_group.add_argument("--truncate", action="store_true", help="emit truncated edge tiles")
    p_tile.add_argument("--min-content", type=float, default=None,
                        help="skip tiles whose non-zero pixel fraction is below this")

    p_synth = sub.add_parser("synth", parents=[common], help="generate cut-paste scenes + COCO file")
    p_synth.add_argument("--fg", required=True, help="directory of RGBA PNG foreground cut-outs")
    p_synth.add_argument("--bg", required=True, help="directory of RGB PNG backgrounds")
    p_synth.add_argument("--n", required=True, type=int, help="number of scenes")
    p_synth.add_argument("--seed", required=True, type=int, help="master seed (reproducibility)")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--occlusion", choices=sorted(OCCLUSION_FLAGS), default=None,
                         help="policy for instances fragmented by overlap (default keep)")
    p_synth.add_argument("--min-area", type=int, default=None,
                         help="minimum component area in pixels (default 25)")
    p_synth.add_argument("--augment", action="store_true",
                         help="apply the rotation/flip/brightness/contrast/clip recipe")

    p_eval = sub.add_parser("eval", parents=[common], help="score detections against a COCO file")
    p_eval.add_argument("--gt", required=True, help="ground-truth COCO JSON")
    p_eval.add_argument("--dets", required=True, help="detections JSON array (COCO results format)")
    p_eval.add_argument("--masks", action="store_true", help="match by mask IoU instead of box IoU")
    p_eval.add_argument("--out", required=True, help="report JSON path")
    p_eval.add_argument("--csv", default=None, help="also write metrics CSV (+ .hist.csv)")
    p_eval.add_argument("--iou", type=float, default=None,
                        help="matching IoU for precision/recall (default 0.5)")

    p_losses = sub.add_parser("losses", parents=[common], help="loss/optimizer reference numerics")
    losses_sub = p_losses.add_subparsers(dest="losses_command", required=True)
    losses_sub.add_parser("check", parents=[common],
                          help="run the oracle and finite-difference self-checks")
    p_losses_eval = losses_sub.add_parser("eval", parents=[common],
                                          help="evaluate losses from a case file")
    p_losses_eval.add_argument("--file", required=True,
                               help="one case per line: '<op> <json-args>'")

    sub.add_parser("version", parents=[common], help="print the version")
    return parser


def _cmd_tile(args: argparse.Namespace) -> int:
    config = _load_config(args.config, "tile")
    tile_w, tile_h = _parse_tile_size(str(_pick(args.tile_size, config, "tile_size", "800x800")))
    min_content = float(_pick(args.min_content, config, "min_content", 0.0))
    threads = int(_pick(args.threads, config, "threads", 1))
    pad = not args.truncate if (args.pad or args.truncate) else bool(config.get("pad", True))
    input_path = Path(args.input)
    if not input_path.is_file():
        raise CliError(f"--input: file not found: {input_path}")
    try:
        image = tiler.load_raster(input_path)
    except (ValueError, OSError) as exc:
        raise CliError(f"--input: {exc}")
    grid = tiler.plan_grid(image.shape[1], image.shape[0], tile_w, tile_h, pad=pad)
    paths = tiler.split(image, grid, args.out, min_content=min_content, threads=threads)
    if not args.quiet:
        print(f"wrote {len(paths)} tiles ({grid.cols}x{grid.rows} grid) to {args.out}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    config = _load_config(args.config, "synth")
    occlusion = OCCLUSION_FLAGS[_pick(args.occlusion, config, "occlusion", "keep")]
    min_area = int(_pick(args.min_area, config, "min_area", 25))
    threads = int(_pick(args.threads, config, "threads", 1))
    fg_dir, bg_dir = Path(args.fg), Path(args.bg)
    if not fg_dir.is_dir():
        raise CliError(f"--fg: directory not found: {fg_dir}")
    if not bg_dir.is_dir():
        raise CliError(f"--bg: directory not found: {bg_dir}")
    if args.n <= 0:
        raise CliError(f"--n: must be positive, got {args.n}")
    try:
        fg_library = synth.load_foregrounds(fg_dir)
        bg_library = synth.load_backgrounds(bg_dir)
    except ValueError as exc:
        raise CliError(str(exc))
    cfg = synth.SynthConfig(
        occlusion=occlusion,
        min_area=min_area,
        augment=synth.AugmentConfig() if args.augment or config.get("augment") else None,
    )
    ds = synth.generate_dataset(args.n, fg_library, bg_library, cfg,
                                seed=args.seed, out_dir=args.out, threads=threads)
    if not args.quiet:
        print(f"wrote {len(ds.images)} scenes, {len(ds.annotations)} annotations to {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args.config, "eval")
    matching_iou = float(_pick(args.iou, config, "iou", 0.5))
    if not 0.0 <= matching_iou <= 1.0:
        raise CliError(f"--iou: must lie in [0,1], got {matching_iou}")
    try:
        ds = read_coco(args.gt)
    except FileNotFoundError:
        raise CliError(f"--gt: file not found: {args.gt}")
    except CocoError as exc:
        raise CliError(f"--gt: {exc}")
    sizes = {img.id: (img.width, img.height) for img in ds.images}
    try:
        dets = read_detections(args.dets, image_sizes=sizes, decode_masks=args.masks)
    except FileNotFoundError:
        raise CliError(f"--dets: file not found: {args.dets}")
    except CocoError as exc:
        raise CliError(f"--dets: {exc}")
    gts = ground_truths_from_coco(ds, decode_masks=args.masks)
    try:
        report = evaluate(dets, gts, matching_iou=matching_iou, use_masks=args.masks,
                          image_ids=[img.id for img in ds.images])
    except ValueError as exc:
        raise CliError(str(exc))
    write_report(report, args.out, args.csv)
    if not args.quiet:
        print(f"AP50={report.ap50:.4f} AP75={report.ap75:.4f} mAP={report.mean_ap:.4f} "
              f"mP={report.m_precision:.4f} mR={report.m_recall:.4f} mF1={report.m_f1:.4f}")
    return 0


def _cmd_losses(args: argparse.Namespace) -> int:
    if args.losses_command == "check":
        rows = losses.run_self_checks()
        width = max(len(name) for name, _, _ in rows)
        failed = 0
        for name, ok, detail in rows:
            status = "PASS" if ok else "FAIL"
            failed += 0 if ok else 1
            print(f"{status}  {name:<{width}}  {detail}")
        print(f"{len(rows) - failed}/{len(rows)} checks passed")
        return 0 if failed == 0 else 1
    path = Path(args.file)
    if not path.is_file():
        raise CliError(f"--file: file not found: {path}")
    try:
        for value in losses.evaluate_cases(path.read_text(encoding="utf-8")):
            print(repr(value))
    except (ValueError, KeyError) as exc:
        raise CliError(f"--file: {exc}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "tile":
            return _cmd_tile(args)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "losses":
            return _cmd_losses(args)
        if args.command == "version":
            print(__version__)
            return 0
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    raise AssertionError(f"unhandled command {args.command}")


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
