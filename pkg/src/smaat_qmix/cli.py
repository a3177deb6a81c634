"""Command-line entry point.

Every subcommand reads an optional key=value config file, lets flags
override it, and writes the fully resolved configuration next to its
outputs so a run can be reproduced from that artifact alone. All
randomness derives from the single ``seed`` key, fanned out with fixed
offsets (data +0, model init +1, shuffling +2).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .data import (GeneratorConfig, generate, read_rseq, samples_to_arrays,
                   split_sequence, write_rseq)
from .errors import (ConfigError, FormatError, IoError, ShapeError,
                     SmaatQmixError, UsageError)
from .gradcam import export_embedding_inputs, export_gradcam_images, gradcam_sweep
from .model import (DISPLAY_NAMES, ModelConfig, build, count_parameters,
                    load_checkpoint, parameter_reduction, save_checkpoint)
from .train import (TrainConfig, evaluate, model_predict_fn,
                    persistence_forecast, train, tune_vq, write_grid_csv,
                    write_history_csv, write_metrics_csv)
from .vq import export_codebook

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_USAGE = 5

# key -> (type, default); bools are "true"/"false" in config files
DEFAULTS = {
    "seed": (int, 0),
    "variant": (str, "qmix"),
    "in_frames": (int, 12),
    "input_size": (int, 64),
    "base_width": (int, 64),
    "depthwise_multiplier": (int, 2),
    "cbam_ratio": (int, 16),
    "vq_codewords": (int, 32),
    "vq_beta": (float, 0.75),
    "vq_per_element_norm": (bool, False),
    "lr": (float, 0.001),
    "batch_size": (int, 8),
    "max_epochs": (int, 100),
    "lr_patience": (int, 4),
    "lr_factor": (float, 0.1),
    "early_stop_patience": (int, 15),
    "vq_weight": (float, 1.0),
    "lead_steps": (int, 6),
    "rain_threshold": (float, 0.5),
    "grid_size": (int, 64),
    "num_frames": (int, 120),
    "n_cells": (int, 6),
    "tune_max_epochs": (int, 25),
    "tune_early_stop_patience": (int, 8),
}


def _parse_value(key: str, raw: str):
    typ = DEFAULTS[key][0]
    if typ is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"boolean key {key!r} got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}") from exc


def load_config(path=None, overrides=None) -> dict:
    """defaults < file < flags; unknown keys are rejected."""
    cfg = {k: v for k, (_, v) in DEFAULTS.items()}
    if path is not None:
        if not os.path.exists(path):
            raise IoError(f"config file not found: {path}")
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, raw = (s.strip() for s in line.split("=", 1))
                if key not in DEFAULTS:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                cfg[key] = _parse_value(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = raw if not isinstance(raw, str) else _parse_value(key, raw)
    return cfg


def write_resolved(cfg: dict, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.resolved.cfg"), "w") as fh:
        for key in sorted(cfg):
            val = cfg[key]
            if isinstance(val, bool):
                val = "true" if val else "false"
            fh.write(f"{key}={val}\n")


def model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(
        variant=cfg["variant"],
        in_frames=cfg["in_frames"],
        input_size=cfg["input_size"],
        base_width=cfg["base_width"],
        depthwise_multiplier=cfg["depthwise_multiplier"],
        cbam_ratio=cfg["cbam_ratio"],
        vq_codewords=cfg["vq_codewords"],
        vq_beta=cfg["vq_beta"],
        vq_per_element_norm=cfg["vq_per_element_norm"],
    )


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
        lr_patience=cfg["lr_patience"],
        lr_factor=cfg["lr_factor"],
        early_stop_patience=cfg["early_stop_patience"],
        seed=cfg["seed"] + 2,
    )


def _load_splits(cfg: dict, data_path):
    if not os.path.exists(data_path):
        raise IoError(f"data file not found: {data_path}")
    seq = read_rseq(data_path)
    parts = split_sequence(seq, cfg["in_frames"], cfg["lead_steps"])
    return tuple(samples_to_arrays(p) if p else (np.empty(0), np.empty(0))
                 for p in parts)


# ---------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    gen = GeneratorConfig(seed=cfg["seed"], grid_size=cfg["grid_size"],
                          num_frames=cfg["num_frames"], n_cells=cfg["n_cells"])
    seq = generate(gen)
    os.makedirs(args.out, exist_ok=True)
    write_rseq(seq, os.path.join(args.out, "synthetic.rseq"))
    write_resolved(cfg, args.out)
    print(f"wrote {seq.num_frames} frames to {args.out}/synthetic.rseq")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    mc = model_config_from(cfg)
    if mc.input_size != cfg["grid_size"]:
        mc = replace(mc, input_size=cfg["grid_size"])
        cfg["input_size"] = cfg["grid_size"]
    train_xy, val_xy, _ = _load_splits(cfg, args.data)
    if len(train_xy[0]) == 0 or len(val_xy[0]) == 0:
        raise UsageError("sequence too short for a non-empty train/val split")
    model = build(mc, seed=cfg["seed"] + 1)
    result = train(model, train_xy, val_xy, train_config_from(cfg),
                   vq_weight=cfg["vq_weight"])
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(model, os.path.join(args.out, "model.ckpt"))
    write_history_csv(result.history, os.path.join(args.out, "history.csv"))
    write_resolved(cfg, args.out)
    print(f"best val loss {result.best_val_loss:.6g} at epoch "
          f"{result.best_epoch} ({len(result.history)} epochs run)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    _, _, test_xy = _load_splits(cfg, args.data)
    if len(test_xy[0]) == 0:
        raise UsageError("sequence too short for a non-empty test split")
    if args.baseline == "persistence":
        predict = lambda xb: persistence_forecast(xb)
        name = "Persistence"
    else:
        if not args.checkpoint:
            raise UsageError("evaluate needs --checkpoint or --baseline")
        if not os.path.exists(args.checkpoint):
            raise IoError(f"checkpoint not found: {args.checkpoint}")
        mc = model_config_from(cfg)
        model = build(mc, seed=cfg["seed"] + 1)
        load_checkpoint(model, args.checkpoint)
        predict = model_predict_fn(model)
        name = DISPLAY_NAMES[cfg["variant"]]
    report = evaluate(predict, test_xy[0], test_xy[1],
                      rain_threshold=cfg["rain_threshold"],
                      batch_size=cfg["batch_size"])
    os.makedirs(args.out, exist_ok=True)
    write_metrics_csv({name: report}, os.path.join(args.out, "metrics.csv"))
    write_resolved(cfg, args.out)
    print(f"{name}: mse={report.mse:.6g} precision={report.precision:.4f} "
          f"recall={report.recall:.4f} accuracy={report.accuracy:.4f} "
          f"f1={report.f1:.4f}")
    return EXIT_OK


def cmd_audit_params(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if args.all_variants:
        totals = {}
        for variant in ("baseline", "q", "mix", "qmix"):
            mc = replace(model_config_from(cfg), variant=variant)
            totals[variant] = count_parameters(build(mc, seed=0))["total"]
        print(f"{'model':<18}{'parameters':>12}{'vs baseline':>14}")
        for variant, total in totals.items():
            red = parameter_reduction(totals["baseline"], total)
            print(f"{DISPLAY_NAMES[variant]:<18}{total:>12,}{red:>13.1%}")
    else:
        mc = model_config_from(cfg)
        counts = count_parameters(build(mc, seed=0))
        print(f"{DISPLAY_NAMES[mc.variant]}: {counts['total']:,} parameters")
        for name, n in counts["per_module"].items():
            print(f"  {name:<8}{n:>12,}")
    return EXIT_OK


def cmd_tune_vq(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    mc = model_config_from(cfg)
    if not mc.uses_vq:
        raise UsageError("tune-vq needs variant q or qmix")
    if mc.input_size != cfg["grid_size"]:
        mc = replace(mc, input_size=cfg["grid_size"])
    train_xy, val_xy, _ = _load_splits(cfg, args.data)
    tc = replace(train_config_from(cfg), max_epochs=cfg["tune_max_epochs"],
                 early_stop_patience=cfg["tune_early_stop_patience"])
    result = tune_vq(mc, train_xy, val_xy, tc, model_seed=cfg["seed"] + 1,
                     progress=lambda k, b, v: print(f"K={k} beta={b}: {v:.6g}"))
    os.makedirs(args.out, exist_ok=True)
    write_grid_csv(result, os.path.join(args.out, "vq_grid.csv"))
    write_resolved(cfg, args.out)
    k, beta = result.argmin
    print(f"best cell: K={k}, beta={beta}")
    return EXIT_OK


def _build_from_checkpoint(cfg: dict, checkpoint):
    if not checkpoint:
        raise UsageError("--checkpoint is required")
    if not os.path.exists(checkpoint):
        raise IoError(f"checkpoint not found: {checkpoint}")
    model = build(model_config_from(cfg), seed=cfg["seed"] + 1)
    load_checkpoint(model, checkpoint)
    return model


def cmd_gradcam(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if not os.path.exists(args.sample):
        raise IoError(f"sample file not found: {args.sample}")
    seq = read_rseq(args.sample)
    from .data import window

    samples = list(window(seq, cfg["in_frames"], cfg["lead_steps"]))
    if not samples:
        raise UsageError("sample sequence too short for one window")
    model = _build_from_checkpoint(cfg, args.checkpoint)
    maps = gradcam_sweep(model, samples[0].input)
    os.makedirs(args.out, exist_ok=True)
    export_gradcam_images(maps, cfg["variant"], args.out)
    write_resolved(cfg, args.out)
    print(f"wrote {len(maps)} saliency maps to {args.out}")
    return EXIT_OK


def cmd_export_codebook(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    model = _build_from_checkpoint(cfg, args.checkpoint)
    if model.vq is None:
        raise UsageError("export-codebook needs a VQ variant checkpoint")
    os.makedirs(args.out, exist_ok=True)
    codebook_path = os.path.join(args.out, "codebook.csv")
    if args.sample:
        if not os.path.exists(args.sample):
            raise IoError(f"sample file not found: {args.sample}")
        seq = read_rseq(args.sample)
        from .data import window

        samples = list(window(seq, cfg["in_frames"], cfg["lead_steps"]))
        if not samples:
            raise UsageError("sample sequence too short for one window")
        x = np.stack([samples[0].input])
        export_embedding_inputs(model, x, codebook_path,
                                os.path.join(args.out, "assignments.csv"))
    else:
        export_codebook(model.vq, codebook_path)
    write_resolved(cfg, args.out)
    print(f"wrote codebook to {codebook_path}")
    return EXIT_OK


# ---------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------


def _overrides(args) -> dict:
    out = {}
    for pair in args.set or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        out[key.strip()] = raw.strip()
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        out["variant"] = args.variant
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smaat-qmix",
        description="Vector-quantized attention UNet nowcasting toolkit",
        epilog=("exit codes: 0 ok, 1 unexpected, 2 bad config, 3 missing "
                "file, 4 bad format or checkpoint mismatch, 5 usage"),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, checkpoint=False, out=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=("baseline", "q", "mix", "qmix"))
        if data:
            p.add_argument("--data", required=True, help=".rseq sequence file")
        if checkpoint:
            p.add_argument("--checkpoint")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate-data", help="write a synthetic .rseq sequence")
    common(p)
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="train one variant on a sequence")
    common(p, data=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="metrics on the test split")
    common(p, data=True, checkpoint=True)
    p.add_argument("--baseline", choices=("persistence",))
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("audit-params", help="parameter counts per variant")
    common(p, out=False)
    p.add_argument("--all-variants", action="store_true")
    p.set_defaults(fn=cmd_audit_params)

    p = sub.add_parser("tune-vq", help="K x beta validation-MSE grid")
    common(p, data=True)
    p.set_defaults(fn=cmd_tune_vq)

    p = sub.add_parser("gradcam", help="saliency maps for one sample")
    common(p, checkpoint=True)
    p.add_argument("--sample", required=True, help=".rseq file for the input")
    p.set_defaults(fn=cmd_gradcam)

    p = sub.add_parser("export-codebook", help="codebook (and latents) as CSV")
    common(p, checkpoint=True)
    p.add_argument("--sample", help="optional .rseq to export latents for")
    p.set_defaults(fn=cmd_export_codebook)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FormatError as exc:
        print(f"error: format: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, ShapeError) as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SmaatQmixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
