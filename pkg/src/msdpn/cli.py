# src/msdpn/cli.py
"""
Command-line experiment drivers.

    msdpn synth            --scenes N --out DIR [--seed S --height H --width W --beams B]
    msdpn encode           --dataset DIR --mode proj-d|ref-d --out DIR
    msdpn train            --config cfg.json --out DIR [--resume CKPT]
    msdpn eval             --checkpoint F --dataset DIR --report out.csv
    msdpn sweep-dropout    --checkpoint F [--checkpoint F2 ...] --dataset DIR --fractions 0.1,0.5,1.0 --report out.csv
    msdpn sweep-resolution --checkpoint F [--checkpoint F2 ...] --resolutions 0.25,1.0 --scenes N --report out.csv
    msdpn stats            --dataset DIR

Exit codes: 0 success, 1 invalid configuration or arguments, 2 missing or
corrupt input file, 3 internal invariant violation.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import ConfigError, FormatError, InvariantError, ShapeError, __version__
from .config_utils import load_configuration, resolve_run_config, write_resolved_config
from .data_utils import save_dataframe_to_csv
from .datagen import beams_for_resolution, generate_dataset, read_dataset, write_dataset, write_tensor
from .encoding import DepthImage, make_proj_d, make_ref_d, scan_row_stats, write_depth_png
from .geometry import project_scan
from .logging_utils import parse_log_level, setup_logger
from .metrics import pooled_report, predict_depths, report_frame
from .nn import NetworkConfig, build_msdpn
from .system_utils import ordered_map
from .train import TrainConfig, load_checkpoint, prepare_examples, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INPUT = 2
EXIT_INVARIANT = 3

SWEEP_COLUMNS = ["model", "fraction", "rmse_mm", "rel", "delta1"]
RESOLUTION_COLUMNS = ["model", "resolution_deg", "beams", "rmse_mm", "rel", "delta1"]


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad arguments; report them as ConfigError instead."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _start_logging(args, command: str, base: Optional[Path]) -> logging.Logger:
    directory = args.log_dir if args.log_dir is not None else (base if base is not None else Path.cwd())
    log, log_file = setup_logger(command, log_directory_base=str(directory), log_level=args.log_level)
    log.debug(f"msdpn {__version__} '{command}', logging to {log_file}")
    return log


def _parse_numbers(text: str, flag: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{flag} must be comma-separated numbers, got '{text}'.")
    if not values:
        raise ConfigError(f"{flag} is empty.")
    return values


def parse_fractions(text: str) -> List[float]:
    """Comma-separated keep fractions in [0, 1], returned sorted and de-duplicated."""
    values = _parse_numbers(text, "--fractions")
    bad = [v for v in values if not 0.0 <= v <= 1.0]
    if bad:
        raise ConfigError(f"Dropout fractions must lie in [0, 1], got {bad}.")
    return sorted(set(values))


def parse_resolutions(text: str) -> List[float]:
    """Comma-separated angular resolutions in degrees, in (0, 360], sorted finest first."""
    values = _parse_numbers(text, "--resolutions")
    bad = [v for v in values if not 0.0 < v <= 360.0]
    if bad:
        raise ConfigError(f"Angular resolutions must lie in (0, 360] degrees, got {bad}.")
    return sorted(set(values))


# --- commands ---

def cmd_synth(args) -> int:
    out = Path(args.out)
    log = _start_logging(args, "synth", out)
    if args.scenes < 0:
        raise ConfigError(f"--scenes must be >= 0, got {args.scenes}.")
    samples = generate_dataset(args.scenes, seed=args.seed, height=args.height, width=args.width,
                               beams=args.beams, fov_rad=math.radians(args.fov_deg), r_max=args.r_max,
                               noise_std=args.noise_std, logger_instance=log)
    write_dataset(out, samples, logger_instance=log)
    print(f"synth: {len(samples)} samples -> {out}")
    return EXIT_OK


def cmd_encode(args) -> int:
    out = Path(args.out)
    log = _start_logging(args, "encode", out)
    samples = read_dataset(args.dataset, logger_instance=log)

    def _encode(sample) -> DepthImage:
        height, width = sample.gt_depth.shape
        proj_d = make_proj_d(project_scan(sample.scan, sample.rig.extrinsic, sample.rig.intrinsics), height, width)
        return make_ref_d(proj_d) if args.mode == "ref-d" else proj_d

    for sample, depth in zip(samples, ordered_map(_encode, samples, logger_instance=log)):
        write_tensor(out / sample.sample_id / "depth.msdt", depth.data, logger_instance=log)
        write_depth_png(out / sample.sample_id / "depth.png", depth, logger_instance=log)
    print(f"encode: {len(samples)} samples ({args.mode}) -> {out}")
    return EXIT_OK


def _load_samples(data_settings: Dict, log: logging.Logger):
    if data_settings["dataset"] is not None:
        return read_dataset(data_settings["dataset"], logger_instance=log)
    return generate_dataset(data_settings["scenes"], seed=data_settings["seed"], height=data_settings["height"],
                            width=data_settings["width"], beams=data_settings["beams"],
                            fov_rad=math.radians(data_settings["fov_deg"]), r_max=data_settings["r_max"],
                            noise_std=data_settings["noise_std"], min_boxes=data_settings["min_boxes"],
                            max_boxes=data_settings["max_boxes"], logger_instance=log)


def cmd_train(args) -> int:
    out = Path(args.out)
    log = _start_logging(args, "train", out)
    resolved = resolve_run_config(load_configuration(args.config, logger_instance=log))
    write_resolved_config(resolved, out, logger_instance=log)

    model_settings = dict(resolved["model"])
    model_seed = model_settings.pop("seed")
    train_config = TrainConfig(**resolved["train"])
    samples = _load_samples(resolved["data"], log)
    if not samples:
        raise ConfigError("The training dataset is empty.")
    eval_settings = resolved["eval"]
    eval_samples = None
    if eval_settings["dataset"] is not None:
        eval_samples = read_dataset(eval_settings["dataset"], logger_instance=log)
        if not eval_samples:
            raise ConfigError(f"Evaluation dataset {eval_settings['dataset']} holds no samples.")
    model = None
    if args.resume is None:
        model = build_msdpn(NetworkConfig(**model_settings), seed=model_seed, logger_instance=log)
    examples = prepare_examples(samples, model_settings["input_mode"], logger_instance=log)
    model, trace = train(model, examples, train_config, out_dir=out, resume_from=args.resume, logger_instance=log)
    final = f"{trace[-1]:.6f}" if trace else "n/a"
    print(f"train: {len(trace)} epochs, final loss {final} -> {out}")

    if eval_samples is not None:
        report_path = out / "eval" / "report.csv"
        report = evaluate_to_files(model, eval_samples, report_path, eval_settings["write_png"], logger_instance=log)
        print(_report_line(report, report_path))
    return EXIT_OK


def evaluate_to_files(model, samples, report_path: Path, write_png: bool,
                      logger_instance: Optional[logging.Logger] = None):
    """
    Evaluates model on samples, writes the per-image + summary CSV to report_path and,
    if write_png, one predicted-depth PNG per sample under <report dir>/predictions.

    Returns:
        EvalReport: The pooled summary.
    """
    log = logger_instance if logger_instance is not None else logger
    examples = prepare_examples(samples, model.config.input_mode, logger_instance=log)
    preds = predict_depths(model, examples, logger_instance=log)
    report, per_image = pooled_report(preds, [e.gt for e in examples], [e.sample_id for e in examples])
    save_dataframe_to_csv(report_frame(report, per_image), report_path, logger_instance=log)
    if write_png:
        for example, pred in zip(examples, preds):
            write_depth_png(report_path.parent / "predictions" / f"{example.sample_id}.png",
                            DepthImage(np.clip(pred, 0.0, None)), logger_instance=log)
    return report


def _report_line(report, report_path: Path) -> str:
    return (f"eval: rmse={report.rmse_mm:.1f} mm rel={report.rel:.4f} delta1={report.delta1:.2f}% "
            f"({report.n_images} images) -> {report_path}")


def cmd_eval(args) -> int:
    report_path = Path(args.report)
    log = _start_logging(args, "eval", report_path.parent)
    checkpoint = load_checkpoint(args.checkpoint, logger_instance=log)
    samples = read_dataset(args.dataset, logger_instance=log)
    if not samples:
        raise ConfigError(f"Dataset {args.dataset} holds no samples.")
    report = evaluate_to_files(checkpoint.model, samples, report_path, not args.no_png, logger_instance=log)
    print(_report_line(report, report_path))
    return EXIT_OK


def _model_labels(modes: Sequence[str]) -> List[str]:
    labels = []
    for index, mode in enumerate(modes):
        labels.append(mode if modes.count(mode) == 1 else f"{mode}#{index}")
    return labels


def sweep_dropout(models: Sequence, labels: Sequence[str], samples, fractions: Sequence[float], seed: int,
                  logger_instance: Optional[logging.Logger] = None) -> pd.DataFrame:
    """One row (model, fraction, rmse_mm, rel, delta1) per model and fraction, fractions ascending."""
    log = logger_instance if logger_instance is not None else logger
    rows = []
    for model, label in zip(models, labels):
        for fraction in sorted(fractions):
            examples = prepare_examples(samples, model.config.input_mode, keep_fraction=fraction, seed=seed,
                                        logger_instance=log)
            preds = predict_depths(model, examples, logger_instance=log)
            report, _ = pooled_report(preds, [e.gt for e in examples], [e.sample_id for e in examples])
            log.info(f"{label} keep={fraction:g}: rmse={report.rmse_mm:.1f} mm")
            rows.append({"model": label, "fraction": fraction, "rmse_mm": report.rmse_mm,
                         "rel": report.rel, "delta1": report.delta1})
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def cmd_sweep_dropout(args) -> int:
    report_path = Path(args.report)
    log = _start_logging(args, "sweep-dropout", report_path.parent)
    fractions = parse_fractions(args.fractions)
    models = [load_checkpoint(path, logger_instance=log).model for path in args.checkpoint]
    samples = read_dataset(args.dataset, logger_instance=log)
    if not samples:
        raise ConfigError(f"Dataset {args.dataset} holds no samples.")
    labels = _model_labels([m.config.input_mode for m in models])
    table = sweep_dropout(models, labels, samples, fractions, args.seed, logger_instance=log)
    save_dataframe_to_csv(table, report_path, logger_instance=log)
    print(f"sweep-dropout: {len(table)} rows ({len(models)} model(s) x {len(fractions)} fractions) -> {report_path}")
    return EXIT_OK


def sweep_resolution(models: Sequence, labels: Sequence[str], resolutions_deg: Sequence[float], scenes: int,
                     seed: int = 0, fov_deg: float = 180.0, r_max: float = 20.0, noise_std: float = 0.0,
                     logger_instance: Optional[logging.Logger] = None) -> pd.DataFrame:
    """
    Scans the same synthetic scenes at each LiDAR angular resolution and evaluates
    every model on them.

    Args:
        models: Trained networks sharing one input size.
        labels: One label per model for the `model` column.
        resolutions_deg: Beam spacings in degrees.
        scenes (int): Scenes per resolution (seeds seed, seed+1, ...).
        fov_deg (float): Scan field of view in degrees.

    Returns:
        pd.DataFrame: One row (model, resolution_deg, beams, rmse_mm, rel, delta1) per
                      model and resolution, finest resolution first.

    Raises:
        ConfigError: If the models differ in input size or scenes < 1.
    """
    log = logger_instance if logger_instance is not None else logger
    sizes = {(m.config.height, m.config.width) for m in models}
    if len(sizes) != 1:
        raise ConfigError(f"Resolution sweeps need models of one input size, got {sorted(sizes)}.")
    if scenes < 1:
        raise ConfigError(f"--scenes must be >= 1, got {scenes}.")
    height, width = sizes.pop()
    fov_rad = math.radians(fov_deg)
    datasets = []
    for resolution in sorted(resolutions_deg):
        beams = beams_for_resolution(math.radians(resolution), fov_rad)
        datasets.append((resolution, beams, generate_dataset(scenes, seed=seed, height=height, width=width,
                                                             beams=beams, fov_rad=fov_rad, r_max=r_max,
                                                             noise_std=noise_std, logger_instance=log)))
    rows = []
    for model, label in zip(models, labels):
        for resolution, beams, samples in datasets:
            examples = prepare_examples(samples, model.config.input_mode, logger_instance=log)
            preds = predict_depths(model, examples, logger_instance=log)
            report, _ = pooled_report(preds, [e.gt for e in examples], [e.sample_id for e in examples])
            log.info(f"{label} at {resolution:g} deg ({beams} beams): rmse={report.rmse_mm:.1f} mm")
            rows.append({"model": label, "resolution_deg": resolution, "beams": beams,
                         "rmse_mm": report.rmse_mm, "rel": report.rel, "delta1": report.delta1})
    return pd.DataFrame(rows, columns=RESOLUTION_COLUMNS)


def cmd_sweep_resolution(args) -> int:
    report_path = Path(args.report)
    log = _start_logging(args, "sweep-resolution", report_path.parent)
    resolutions = parse_resolutions(args.resolutions)
    if not 0.0 < args.fov_deg <= 360.0:
        raise ConfigError(f"--fov-deg must lie in (0, 360], got {args.fov_deg}.")
    models = [load_checkpoint(path, logger_instance=log).model for path in args.checkpoint]
    labels = _model_labels([m.config.input_mode for m in models])
    table = sweep_resolution(models, labels, resolutions, args.scenes, seed=args.seed, fov_deg=args.fov_deg,
                             r_max=args.r_max, noise_std=args.noise_std, logger_instance=log)
    save_dataframe_to_csv(table, report_path, logger_instance=log)
    print(f"sweep-resolution: {len(table)} rows ({len(models)} model(s) x {len(resolutions)} resolutions) "
          f"-> {report_path}")
    return EXIT_OK


def cmd_stats(args) -> int:
    log = _start_logging(args, "stats", None)
    samples = read_dataset(args.dataset, logger_instance=log)
    if not samples:
        raise ConfigError(f"Dataset {args.dataset} holds no samples.")
    images = [make_proj_d(project_scan(s.scan, s.rig.extrinsic, s.rig.intrinsics), *s.gt_depth.shape)
              for s in samples]
    stats = scan_row_stats(images, logger_instance=log)
    print(f"min_v: mean={stats['mean_min_v']:.2f} std={stats['std_min_v']:.2f} "
          f"p5={stats['p10_low']:g} p95={stats['p10_high']:g}")
    if stats["n_excluded"]:
        print(f"excluded: {stats['n_excluded']} image(s) without hits")
    return EXIT_OK


# --- entry point ---

def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="msdpn", description="Multi-stage depth prediction from an image and a 2D LiDAR scan.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", type=parse_log_level, default=logging.INFO,
                        help="DEBUG, INFO, WARNING, ERROR or CRITICAL")
    parser.add_argument("--log-dir", type=Path, default=None,
                        help="Directory receiving logs/<command>.log (default: the command's output directory)")
    sub = parser.add_subparsers(dest="command", parser_class=_ArgumentParser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--beams", type=int, default=360)
    p.add_argument("--fov-deg", type=float, default=180.0)
    p.add_argument("--r-max", type=float, default=20.0)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("encode", help="write proj-d / ref-d channels and PNG previews")
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--mode", choices=["proj-d", "ref-d"], required=True)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(handler=cmd_encode)

    p = sub.add_parser("train", help="train from a JSON run configuration")
    p.add_argument("--config", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--resume", type=str, default=None, help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--report", type=str, required=True)
    p.add_argument("--no-png", action="store_true", help="skip the predicted-depth PNGs")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("sweep-dropout", help="metrics versus the fraction of kept scan beams")
    p.add_argument("--checkpoint", type=str, action="append", required=True)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--fractions", type=str, default="0.1,0.25,0.5,0.75,1.0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", type=str, required=True)
    p.set_defaults(handler=cmd_sweep_dropout)

    p = sub.add_parser("sweep-resolution", help="metrics versus the LiDAR angular resolution")
    p.add_argument("--checkpoint", type=str, action="append", required=True)
    p.add_argument("--resolutions", type=str, default="0.25,0.5,1.0,2.0", help="beam spacings in degrees")
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fov-deg", type=float, default=180.0)
    p.add_argument("--r-max", type=float, default=20.0)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--report", type=str, required=True)
    p.set_defaults(handler=cmd_sweep_resolution)

    p = sub.add_parser("stats", help="minimum scan-row statistics of a dataset")
    p.add_argument("--dataset", type=str, required=True)
    p.set_defaults(handler=cmd_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "handler", None) is None:
            raise ConfigError("No command given; see 'msdpn --help'.")
        handler: Callable = args.handler
        return handler(args)
    except (FileNotFoundError, FormatError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantError as e:
        logger.critical(f"Invariant violated: {e}")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, ShapeError, json.JSONDecodeError, ValueError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
