"""Command-line entry point.

Commands: pretrain, finetune, forecast, evaluate, synth, inspect.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort,
5 protocol violation. Runs are reproducible: identical config, seed and
inputs give identical output bytes at --threads 1.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import parse_run_config, render_resolved
from .data import build_mixed_dataset, load_csv_dataset, synth_generate, write_csv_dataset
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DataError,
    InputTooShortError,
    NumericAbort,
    ProtocolError,
)
from .evaluate import (
    EvalReport,
    evaluate,
    few_shot_protocol,
    format_table,
    report_to_csv,
    zero_shot_protocol,
)
from .infer import ForecastRequest, ar_forecast
from .model import count_parameters
from .train import finetune_heads, pretrain, write_loss_curve

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_PROTOCOL = 5


def _prepare_out_dir(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"output directory {out_dir} is not empty (use --force)")
    out_dir.mkdir(parents=True, exist_ok=True)


def _mixed_pair(datasets):
    return (build_mixed_dataset(datasets, "train"),
            build_mixed_dataset(datasets, "validation"))


def _save_checkpoint_atomic(ckpt, path: Path) -> None:
    tmp = path.with_suffix(".tmp")
    ckpt_io.save_checkpoint(ckpt, tmp)
    tmp.replace(path)


def cmd_pretrain(args) -> int:
    run = parse_run_config(args.config)
    out_dir = Path(args.out_dir)
    _prepare_out_dir(out_dir, args.force)
    model_cfg = run.model_config(preset=args.preset, seed=args.seed)
    train_cfg = run.train_config(seed=args.seed)
    datasets = run.load_datasets()
    train_mixed, val_mixed = _mixed_pair(datasets)
    ckpt, history = pretrain(model_cfg, train_cfg, train_mixed, val_mixed)
    _save_checkpoint_atomic(ckpt, out_dir / "model.ckpt")
    write_loss_curve(history, out_dir / "loss.csv")
    (out_dir / "resolved.cfg").write_text(
        render_resolved(model=model_cfg, train=train_cfg,
                        data=run.sections.get("data")),
        encoding="utf-8",
    )
    best = ckpt.metadata.get("best_val_mse", "nan")
    print(f"pretrained {len(history)} epochs, best val mse {best}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    run = parse_run_config(args.config)
    out_dir = Path(args.out_dir)
    _prepare_out_dir(out_dir, args.force)
    source = ckpt_io.load_checkpoint(args.checkpoint)
    raw_scope = run.get("train", "scope")
    if args.full_tune:
        scope = "all"
    elif raw_scope == "all":
        raise ConfigError("[train] scope=all requires the --full-tune flag")
    else:
        scope = "head"
    train_cfg = run.train_config(seed=args.seed, scope=scope)
    datasets = run.load_datasets()
    train_mixed, val_mixed = _mixed_pair(datasets)
    tuned, history = finetune_heads(source, train_cfg, train_mixed, val_mixed)
    _save_checkpoint_atomic(tuned, out_dir / "model.ckpt")
    write_loss_curve(history, out_dir / "loss.csv")
    (out_dir / "resolved.cfg").write_text(
        render_resolved(model=tuned.config, train=train_cfg,
                        data=run.sections.get("data")),
        encoding="utf-8",
    )
    print(f"finetuned ({train_cfg.scope} scope), {len(history)} epochs")
    return EXIT_OK


def cmd_forecast(args) -> int:
    if args.horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {args.horizon}")
    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    series = load_csv_dataset(args.input_csv, Path(args.input_csv).stem)
    params = ckpt_io.to_params(ckpt)
    result = ar_forecast(params, ForecastRequest(series.values, args.horizon))
    with open(args.out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"ch{i}" for i in range(result.predictions.shape[0])])
        for t in range(args.horizon):
            writer.writerow([repr(float(v)) for v in result.predictions[:, t]])
    print(f"decode_steps={result.decode_steps}", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = parse_run_config(args.config)
    out_dir = Path(args.out_dir)
    _prepare_out_dir(out_dir, args.force)
    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    settings = run.eval_settings()
    datasets = run.load_datasets()
    rows = []
    fingerprint = ""
    for series, split in datasets:
        if settings["protocol"] == "standard":
            report = evaluate(ckpt, series, split, settings["horizons"],
                              settings["lookback"], stride=settings["stride"],
                              threads=args.threads)
        elif settings["protocol"] == "zero-shot":
            report = zero_shot_protocol(ckpt, series, split, settings["horizons"],
                                        settings["lookback"],
                                        stride=settings["stride"],
                                        threads=args.threads)
        else:
            train_cfg = run.train_config(seed=args.seed, scope="head")
            report = few_shot_protocol(ckpt, series, split, settings["fraction"],
                                       train_cfg, settings["horizons"],
                                       settings["lookback"],
                                       stride=settings["stride"],
                                       threads=args.threads)
        rows.extend(report.rows)
        fingerprint = report.fingerprint
    combined = EvalReport(rows=rows, fingerprint=fingerprint)
    (out_dir / "report.csv").write_text(report_to_csv(combined), encoding="utf-8")
    (out_dir / "resolved.cfg").write_text(
        render_resolved(data=run.sections.get("data"), eval_settings=settings),
        encoding="utf-8",
    )
    print(format_table(combined))
    return EXIT_OK


def cmd_synth(args) -> int:
    run = parse_run_config(args.config)
    spec, seed = run.synth_spec(seed=args.seed)
    series = synth_generate(spec, seed=seed)
    write_csv_dataset(series, args.out_csv)
    print(f"wrote {series.num_channels}x{series.length} series to {args.out_csv}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = ckpt_io.load_checkpoint(args.checkpoint)
    params = ckpt_io.to_params(ckpt)
    total = count_parameters(params, "all")
    head = count_parameters(params, "head")
    print(f"version = {ckpt.version}")
    for key in ("num_stages", "pool_kernels", "token_len", "max_tokens",
                "model_width", "layers_per_stage", "attention_heads",
                "feedforward_width", "dropout_rate", "seed"):
        print(f"{key} = {getattr(ckpt.config, key)}")
    for key, value in sorted(ckpt.metadata.items()):
        print(f"meta.{key} = {value}")
    print(f"params.total = {total}")
    print(f"params.head = {head}")
    print(f"params.non_head = {total - head}")
    print(f"params.head_fraction = {head / total:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokencast",
        description="Hierarchical auto-regressive time series forecaster",
    )
    parser.add_argument("--seed", type=int, default=None,
                        help="override every configured seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for window evaluation "
                             "(determinism guaranteed only at 1)")
    parser.add_argument("--force", action="store_true",
                        help="allow writing into a non-empty output directory")
    parser.add_argument("--preset", default=None,
                        help="named model preset (currently: paper)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train all parameters on the mixed dataset")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="update forecast heads on a target dataset")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.add_argument("--full-tune", action="store_true",
                   help="update every parameter, not only the heads")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("forecast", help="forecast a CSV lookback at some horizon")
    p.add_argument("checkpoint")
    p.add_argument("input_csv")
    p.add_argument("horizon", type=int)
    p.add_argument("out_csv")
    p.set_defaults(fn=cmd_forecast)

    p = sub.add_parser("evaluate", help="run an evaluation protocol")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    p.add_argument("config")
    p.add_argument("out_csv")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("inspect", help="print checkpoint config and parameter counts")
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InputTooShortError, CheckpointFormatError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ProtocolError as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
