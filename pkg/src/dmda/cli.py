"""Command-line entry point: train, eval, diagnose, verify-theory, gen-data.

Seed precedence everywhere: --seed flag, then the config file, then the
DMDA_SEED environment variable, then 0. Exit codes: 2 for configuration
and usage errors, 3 for training divergence, 1 for failed verification.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import ConfigError, TrainConfig, parse_config_text, parse_field_value
from .diagnostics import (
    export_embeddings,
    frequency_divergence,
    linear_probe_error,
    proxy_a_distance_report,
    subsample_rows,
)
from .nn import BundleFormatError, forward_feature_map, load_bundle, save_bundle
from .scp import activation_frequency, gap, write_frequency_csv
from .synthdata import PRESETS, build_benchmark, load_tabular, write_manifest, write_tabular
from .theory import verify_many
from .trainer import TrainingDiverged, evaluate, train

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

_CONFIG_FLAG_FIELDS = [f.name for f in dataclasses.fields(TrainConfig)
                       if f.name != "seed"]


def _env_seed():
    raw = os.environ.get("DMDA_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"DMDA_SEED must be an integer, got {raw!r}") from None


def _resolve_seed(flag_seed, file_values: dict) -> int:
    if flag_seed is not None:
        return flag_seed
    if "seed" in file_values:
        return file_values["seed"]
    env = _env_seed()
    return 0 if env is None else env


def _add_config_flags(parser: argparse.ArgumentParser):
    for name in _CONFIG_FLAG_FIELDS:
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name,
                            default=None, metavar="V")
    parser.add_argument("--seed", type=int, default=None)


def _config_from_args(args) -> TrainConfig:
    file_values = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            file_values = parse_config_text(fh.read(), source=str(path))
    overrides = {}
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for name in _CONFIG_FLAG_FIELDS:
        raw = getattr(args, name)
        if raw is not None:
            overrides[name] = parse_field_value(fields[name], raw)
    values = dict(file_values)
    values.update(overrides)
    values["seed"] = _resolve_seed(args.seed, file_values)
    return TrainConfig(**values)


def _load_benchmark(spec: str, seed: int):
    if spec in PRESETS:
        return build_benchmark(spec, seed=seed)
    return load_tabular(spec)


def _features_by_split(bundle, benchmark):
    """Pooled features that the label predictor consumes, per split."""
    def feats(x):
        fmap = forward_feature_map(bundle, Tensor(x))
        return gap(fmap).data

    src_x = np.concatenate([b.x for b in benchmark.sources])
    src_y = np.concatenate([b.y for b in benchmark.sources])
    src_dom = np.concatenate([np.full(len(b.y), b.domain_index)
                              for b in benchmark.sources])
    return ((feats(src_x), src_y, src_dom),
            (feats(benchmark.target.x), benchmark.target.y,
             np.full(len(benchmark.target.y), benchmark.target.domain_index)))


def cmd_train(args) -> int:
    try:
        config = _config_from_args(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    benchmark = _load_benchmark(args.benchmark, config.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(config, benchmark)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    with open(out / "metrics.jsonl", "w") as fh:
        for record in result.metrics:
            fh.write(json.dumps(record) + "\n")
    save_bundle(result.final, out / "final.bundle")
    save_bundle(result.best, out / "best.bundle")
    write_manifest(benchmark, out / "benchmark.manifest")
    acc = evaluate(result.best, benchmark.target.x, benchmark.target.y,
                   config.mask_enabled, config.quantile)
    print(json.dumps({"target_accuracy": acc, "best_step": result.best_step}))
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        config = _config_from_args(args)
        bundle = load_bundle(args.bundle)
    except (ConfigError, BundleFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    benchmark = _load_benchmark(args.benchmark, config.seed)
    if benchmark.input_shape != (bundle.dims.in_h, bundle.dims.in_w,
                                 bundle.dims.in_channels):
        print("error: bundle input dims do not match benchmark", file=sys.stderr)
        return EXIT_CONFIG
    acc = evaluate(bundle, benchmark.target.x, benchmark.target.y,
                   config.mask_enabled, config.quantile)
    val = {
        "target_accuracy": acc,
        "source_accuracies": [
            evaluate(bundle, b.x, b.y, config.mask_enabled, config.quantile)
            for b in benchmark.sources
        ],
    }
    print(json.dumps(val))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    try:
        bundle = load_bundle(args.bundle)
    except (BundleFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    benchmark = _load_benchmark(args.benchmark, seed)
    if benchmark.input_shape != (bundle.dims.in_h, bundle.dims.in_w,
                                 bundle.dims.in_channels):
        print("error: bundle input dims do not match benchmark", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    (src_feats, src_y, src_dom), (tgt_feats, tgt_y, tgt_dom) = \
        _features_by_split(bundle, benchmark)

    d_a, sigma = proxy_a_distance_report(src_feats, tgt_feats, seed=seed)
    with open(out / "a_distance.json", "w") as fh:
        json.dump({"d_a": d_a, "sigma": sigma}, fh, indent=2)
        fh.write("\n")

    probe = {
        "source_error": linear_probe_error(src_feats, src_y),
        "target_error": linear_probe_error(tgt_feats, tgt_y),
    }
    with open(out / "probe.json", "w") as fh:
        json.dump(probe, fh, indent=2)
        fh.write("\n")

    src_maps = forward_feature_map(bundle, Tensor(
        np.concatenate([b.x for b in benchmark.sources]))).data
    tgt_x = benchmark.target.x
    if len(tgt_x) > len(src_maps):
        tgt_x = subsample_rows(tgt_x, len(src_maps), seed=seed)
    tgt_maps = forward_feature_map(bundle, Tensor(tgt_x)).data
    stats_src = activation_frequency(src_maps)
    stats_tgt = activation_frequency(tgt_maps)
    write_frequency_csv(out / "activation_frequency.csv", stats_src, stats_tgt)
    divergence = frequency_divergence(stats_src, stats_tgt)

    feats = np.concatenate([src_feats, tgt_feats])
    labels = np.concatenate([src_y, tgt_y])
    domains = np.concatenate([src_dom, tgt_dom])
    export_embeddings(feats, labels, domains, out / "embeddings.tsv")

    print(json.dumps({"d_a": d_a, "max_gap_channel": divergence.max_gap_channel,
                      "max_gap": divergence.max_gap}))
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    if args.instances < 1:
        print("error: --instances must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    reports = verify_many(args.instances, seed)
    failed = [r for r in reports if not r["pass"]]
    for r in reports:
        print(json.dumps(r))
    if failed:
        print(f"error: {len(failed)} instance(s) failed; first offending "
              f"instance_seed={failed[0]['instance_seed']}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    try:
        benchmark = build_benchmark(args.benchmark, seed=seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tabular(benchmark, out / "data.csv")
    write_manifest(benchmark, out / "benchmark.manifest")
    print(json.dumps({"csv": str(out / "data.csv"),
                      "manifest": str(out / "benchmark.manifest")}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmda")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a benchmark")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--benchmark", required=True,
                         help="preset name or CSV path")
    p_train.add_argument("--out", required=True)
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a saved bundle")
    p_eval.add_argument("--bundle", required=True)
    p_eval.add_argument("--benchmark", required=True)
    p_eval.add_argument("--config", default=None)
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_diag = sub.add_parser("diagnose", help="run diagnostics on a bundle")
    p_diag.add_argument("--bundle", required=True)
    p_diag.add_argument("--benchmark", required=True)
    p_diag.add_argument("--out", required=True)
    p_diag.add_argument("--seed", type=int, default=None)
    p_diag.set_defaults(func=cmd_diagnose)

    p_verify = sub.add_parser("verify-theory", help="verify the alignment identity")
    p_verify.add_argument("--instances", type=int, required=True)
    p_verify.add_argument("--seed", type=int, default=None)
    p_verify.set_defaults(func=cmd_verify_theory)

    p_gen = sub.add_parser("gen-data", help="generate a benchmark as CSV")
    p_gen.add_argument("--benchmark", required=True, choices=PRESETS)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
