import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from itd_tool.acoustics import SimGrid
from itd_tool.audio import DEFAULT_RATE, StereoClip, load_wav, resample
from itd_tool.bench import METHODS, SWEEP_AXES, SweepConfig, center_crop, evaluate, gen_dataset, load_cases, \
    sweep, write_sweep
from itd_tool.embedder import load_checkpoint
from itd_tool.errors import ErrorKind, ItdError
from itd_tool.estimator import EstimatorConfig, default_max_lag, delay_to_angle, estimate_delay, iid_direction
from itd_tool.gcc import classic_estimate
from itd_tool.trainer import TrainConfig, train
from itd_tool.utils import _parse_number, _string_parse, load_config

logger = logging.getLogger(__name__)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Reports usage problems as exceptions so main can map them to exit 1."""

    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _section(config: Dict[str, Any], name: str) -> Dict[str, Any]:
    section = config.get(name) or {}
    if not isinstance(section, dict):
        raise ItdError(ErrorKind.INVALID_INPUT, f"config section '{name}' must be a mapping")
    return dict(section)


def _estimator(config: Dict[str, Any], args) -> EstimatorConfig:
    values = _section(config, "estimator")
    for key in ("window", "step", "votes", "input_len", "agg", "vote_mode"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    return EstimatorConfig.from_mapping(values)


def _number(value: str) -> float:
    parsed = _parse_number(value)
    if parsed is None:
        raise argparse.ArgumentTypeError(f"not a number: '{value}'")
    return parsed


def _snr(value: str) -> Optional[float]:
    """An SNR in dB, or 'clean' for no added noise."""
    if _string_parse(value) == "clean":
        return None
    return _number(value)


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML file with simulate/train/estimator/sweep sections")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    estimator = _Parser(add_help=False)
    estimator.add_argument("--window", type=int)
    estimator.add_argument("--step", type=int)
    estimator.add_argument("--votes", type=int)
    estimator.add_argument("--input-len", dest="input_len", type=int,
                           help="samples of context the model method reads, centered in the file")
    estimator.add_argument("--agg", choices=("mean", "mode"))
    estimator.add_argument("--vote-mode", dest="vote_mode", choices=("argmax", "expectation"))

    parser = _Parser(prog="itd_tool", description="Interaural time delay estimation and benchmarks")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # simulate
    sim = subparsers.add_parser("simulate", parents=[common], help="Generate a labeled stereo dataset")
    sim.add_argument("--count", type=int, help="scenes per grid cell")
    sim.add_argument("--rooms", type=int, nargs="+", choices=(1, 2, 3))
    sim.add_argument("--snr", type=_snr, nargs="+", help="dB values, or 'clean'")
    sim.add_argument("--rt60", type=_number, nargs="+")
    sim.add_argument("--duration", type=_number, help="clip length in seconds")
    sim.add_argument("--mixture", type=_number, nargs="+", help="distractor intensities")
    sim.add_argument("--integer-delays", action="store_true")

    # train
    tr = subparsers.add_parser("train", parents=[common], help="Train an embedder self-supervised")
    tr.add_argument("--corpus", required=True, help="manifest, dataset directory or WAV directory")
    tr.add_argument("--loss", choices=("crw", "zero", "monoclr"))
    tr.add_argument("--max-steps", dest="max_steps", type=int)

    # eval
    ev = subparsers.add_parser("eval", parents=[common, estimator], help="Evaluate a method on a manifest")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--method", choices=METHODS, default="gcc")
    ev.add_argument("--checkpoint")

    # sweep
    sw = subparsers.add_parser("sweep", parents=[common, estimator], help="Robustness sweep along one axis")
    sw.add_argument("--axis", choices=SWEEP_AXES)
    sw.add_argument("--methods", nargs="+", choices=METHODS)
    sw.add_argument("--values", type=_number, nargs="+")
    sw.add_argument("--count", type=int)
    sw.add_argument("--checkpoint")

    # estimate
    es = subparsers.add_parser("estimate", parents=[common, estimator], help="Delay of one stereo WAV file")
    es.add_argument("--input", required=True)
    es.add_argument("--method", choices=("gcc", "model", "iid"), default="gcc")
    es.add_argument("--checkpoint")
    es.add_argument("--mic-distance", dest="mic_distance", type=_number, help="meters, adds angle_deg")

    return parser


def _load_params(args, config):
    if not args.checkpoint:
        raise ItdError(ErrorKind.INVALID_INPUT, "--checkpoint is required for the model method")
    train_section = _section(config, "train")
    arch = TrainConfig.from_mapping({"arch": train_section["arch"]}).arch if "arch" in train_section else None
    return load_checkpoint(args.checkpoint, arch)


def _simulate(args, config) -> None:
    values = _section(config, "simulate")
    seed = values.pop("seed", 0)
    if args.seed is not None:
        seed = args.seed
    overrides = {"count": args.count, "rooms": args.rooms, "snrs": args.snr, "rt60s": args.rt60,
                 "duration": args.duration, "mixture_intensities": args.mixture}
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.integer_delays:
        values["integer_delays"] = True
    manifest = gen_dataset(SimGrid.from_mapping(values), args.out or "data", seed)
    print(f"Wrote {manifest}")


def _train(args, config) -> None:
    values = _section(config, "train")
    overrides = {"seed": args.seed, "loss": args.loss, "max_steps": args.max_steps}
    values.update({k: v for k, v in overrides.items() if v is not None})
    result = train(TrainConfig.from_mapping(values), args.corpus, args.out or "runs")
    print(f"Best held-out MAE {result.best_mae_ms:.4f} ms at step {result.best_step} "
          f"(untrained {result.initial_mae_ms:.4f} ms)")
    print(f"Checkpoint {result.checkpoint_path}")


def _eval(args, config) -> None:
    params = _load_params(args, config) if args.method == "model" else None
    seed = args.seed if args.seed is not None else 0
    report = evaluate(args.method, load_cases(args.manifest), _estimator(config, args), params, seed)
    out = Path(args.out) if args.out else Path(f"eval_{args.method}.csv")
    report.to_csv(out)
    summary = report.summary
    print(f"{args.method}: MAE {summary['mae_ms']:.4f} ms, RMSE {summary['rmse_ms']:.4f} ms, "
          f"LR accuracy {summary['lr_accuracy']:.3f}, n={summary['n']}")


def _sweep(args, config) -> None:
    values = _section(config, "sweep")
    values["estimator"] = _estimator(config, args)
    overrides = {"axis": args.axis, "methods": args.methods, "values": args.values,
                 "count": args.count, "seed": args.seed}
    values.update({k: v for k, v in overrides.items() if v is not None})
    sweep_config = SweepConfig.from_mapping(values)
    params = _load_params(args, config) if "model" in sweep_config.methods else None
    rows = sweep(sweep_config, params)
    out = write_sweep(rows, args.out or f"sweep_{sweep_config.axis}.csv")
    for row in rows:
        print(f"{row.axis}={row.value} {row.method}: MAE {row.summary['mae_ms']:.4f} ms, "
              f"RMSE {row.summary['rmse_ms']:.4f} ms")
    print(f"Wrote {out}")


def _estimate(args, config) -> None:
    clip = load_wav(args.input)
    if not isinstance(clip, StereoClip):
        raise ItdError(ErrorKind.INVALID_INPUT, f"{args.input} is mono, a stereo file is needed")
    clip = resample(clip, DEFAULT_RATE)
    est = _estimator(config, args)

    if args.method == "iid":
        print(json.dumps({"direction": iid_direction(clip).value, "method": "iid"}))
        return
    max_lag = est.max_delay_samples if est.max_delay_samples is not None \
        else default_max_lag(args.mic_distance, clip.rate)
    if args.method == "gcc":
        window = min(est.window, len(clip))
        votes = min(est.votes, len(clip) - window + 1)
        estimate = classic_estimate(clip, votes, window, est.agg, max_lag, est.inlier_threshold)
    else:
        if len(clip) > est.input_len:
            logger.info("model reads the middle %d of %d samples", est.input_len, len(clip))
            clip = center_crop(clip, est.input_len)
        estimate = estimate_delay(_load_params(args, config), clip, est.window, est.step, est.agg,
                                  est.vote_mode, max_lag / clip.rate, est.temperature, est.inlier_threshold)
    if args.mic_distance is not None:
        estimate.angle_deg = delay_to_angle(estimate.delay_s, args.mic_distance)
    print(estimate.to_json())


_COMMANDS = {
    "simulate": _simulate,
    "train": _train,
    "eval": _eval,
    "sweep": _sweep,
    "estimate": _estimate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point. Exit codes: 0 success, 1 usage error, 2 runtime error."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config) if args.config else {}
        _COMMANDS[args.command](args, config)
    except (ItdError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
