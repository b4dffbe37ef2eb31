"""Command line interface.

Commands: synth, train-base, train-ssl, detect, eval, plot. Exit codes:
0 success, 1 usage/config error, 2 data error, 3 numeric failure. All
outputs are deterministic for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, DataFormatError, NumericError
from .detector import detect_sequence, read_detections_csv, write_detections_csv
from .evaluation import (
    EvalConfig,
    curve,
    log_average_miss_rate,
    plot_curves_svg,
    read_curve_csv,
    write_curve_csv,
)
from .features import ChannelConfig
from .linear_svm import bootstrap_train
from .sequence_io import load_model, load_sequence, save_model, save_sequence
from .ssl_core import NeighborhoodSpec, train_ssl
from .synth import generate_splits


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_common(p):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )


def _cfg(args):
    return load_config(args.config, args.overrides)


def cmd_synth(args) -> int:
    cfg = _cfg(args)
    train, test = generate_splits(cfg.synth)
    out = Path(args.out)
    save_sequence(train, out / "train")
    save_sequence(test, out / "test")
    print(f"train: {out / 'train'} ({train.n_frames} frames)")
    print(f"test: {out / 'test'} ({test.n_frames} frames)")
    return 0


def cmd_train_base(args) -> int:
    cfg = _cfg(args)
    seq = load_sequence(args.data)
    model = bootstrap_train(seq, cfg.svm, cfg.channels, cfg.detector)
    save_model(model, args.out)
    print(f"base model: {args.out} ({model.weights.size} weights)")
    return 0


def cmd_train_ssl(args) -> int:
    cfg = _cfg(args)
    seq = load_sequence(args.data)
    c_b, c_ssl = train_ssl(
        seq, cfg.svm, cfg.channels, cfg.neighborhood, cfg.detector, folds=cfg.folds
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(c_b, out / "base.sslmodel")
    save_model(c_ssl, out / "ssl.sslmodel")
    print(f"base model: {out / 'base.sslmodel'} ({c_b.weights.size} weights)")
    print(f"ssl model: {out / 'ssl.sslmodel'} ({c_ssl.weights.size} weights)")
    return 0


def cmd_detect(args) -> int:
    cfg = _cfg(args)
    seq = load_sequence(args.data)
    base = load_model(args.base)
    channel_cfg = ChannelConfig.from_dict(base.meta["channels"])
    ssl_model = None
    spec = None
    if not args.baseline:
        if not args.ssl:
            raise ConfigError("detect needs --ssl MODEL unless --baseline is given")
        ssl_model = load_model(args.ssl)
        channel_cfg = ChannelConfig.from_dict(ssl_model.meta["channels"])
        spec = NeighborhoodSpec.from_dict(ssl_model.meta["neighborhood"])
    dets, stats = detect_sequence(
        seq,
        base,
        ssl_model,
        spec,
        channel_cfg,
        cfg.detector,
        ssl_disabled=args.baseline,
    )
    write_detections_csv(args.out, dets)
    print(
        f"frames={stats.frames} scored_windows={stats.scored_windows} "
        f"stage2_candidates={stats.stage2_candidates} detections={len(dets)}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _cfg(args)
    ecfg = cfg.eval
    if args.subset:
        ecfg = EvalConfig(
            iou_match=ecfg.iou_match,
            subset=args.subset,
            fppi_range=ecfg.fppi_range,
            n_fppi_samples=ecfg.n_fppi_samples,
            height_margin=ecfg.height_margin,
        )
    seq = load_sequence(args.data)
    dets = read_detections_csv(args.dets)
    points = curve(dets, seq.annotations, seq.n_frames, ecfg)
    lamr = log_average_miss_rate(points, ecfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_curve_csv(out / "curve.csv", points)
    print(f"subset={ecfg.subset}")
    print(f"LAMR={lamr:.4f}")
    return 0


def cmd_plot(args) -> int:
    named = []
    for item in args.curves:
        if "=" not in item:
            raise ConfigError(f"plot arguments must be LABEL=CURVE.CSV, got {item!r}")
        label, path = item.split("=", 1)
        named.append((label, read_curve_csv(path)))
    plot_curves_svg(named, args.out)
    print(f"plot: {args.out}")
    return 0


def make_parser() -> _Parser:
    ap = _Parser(prog="seqssl", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic train/test sequences")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-base", help="train the base classifier")
    _add_common(p)
    p.add_argument("--data", required=True, help="training sequence directory")
    p.add_argument("--out", required=True, help="output .sslmodel path")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-ssl", help="train base + SSL classifiers")
    _add_common(p)
    p.add_argument("--data", required=True, help="training sequence directory")
    p.add_argument("--out-dir", required=True, help="directory for the two models")
    p.set_defaults(func=cmd_train_ssl)

    p = sub.add_parser("detect", help="run the two-stage detector")
    _add_common(p)
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--base", required=True, help="base .sslmodel")
    p.add_argument("--ssl", help="ssl .sslmodel")
    p.add_argument("--baseline", action="store_true", help="stage 1 + NMS only")
    p.add_argument("--out", required=True, help="detections CSV path")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="FPPI / miss-rate evaluation")
    _add_common(p)
    p.add_argument("--data", required=True, help="sequence directory (ground truth)")
    p.add_argument("--dets", required=True, help="detections CSV")
    p.add_argument("--subset", choices=("near", "medium", "reasonable"))
    p.add_argument("--out-dir", required=True, help="directory for curve.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="overlay curves into an SVG")
    p.add_argument("--out", required=True, help="output SVG path")
    p.add_argument("curves", nargs="+", metavar="LABEL=CURVE.CSV")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        return args.func(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
