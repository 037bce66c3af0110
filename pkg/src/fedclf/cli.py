"""Command-line front end: partition datasets, run experiments, run batteries.

Configuration precedence: built-in defaults < ``--config`` key=value file <
explicit flags.  Battery specs use the same key=value format plus the list
keys ``strategies``, ``datasets`` (entries like ``s50-equal``) and ``seeds``.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import (
    ConfigurationError,
    DatasetFormatError,
    PartitionSpec,
    SplitMode,
    label_distribution,
    load_dataset,
    make_synthetic,
    partition,
    partition_report,
    save_dataset,
)
from .selection import FactorMode, Strategy
from .server import ExperimentConfig, run_experiment, summary_text

__all__ = ["main"]


def _parse_synthetic(text: str) -> tuple[int, int, int]:
    """Parse a CxFxN spec like ``10x8x6000``."""
    try:
        c, f, n = (int(p) for p in text.split("x"))
    except ValueError:
        raise ValueError(f"bad --synthetic spec {text!r}, want CxFxN") from None
    if c < 1 or f < 1 or n < 1:
        raise ValueError(f"bad --synthetic spec {text!r}, counts must be positive")
    return c, f, n


def _read_kv_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in _BOOL_TRUE:
        return True
    if lowered in _BOOL_FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value config file")
    parser.add_argument("--clients", type=int, help="total clients K")
    parser.add_argument("--select-k", type=int, help="clients selected per round")
    parser.add_argument("--rounds", type=int, help="total rounds R")
    parser.add_argument("--epochs", type=int, help="local epochs E")
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--batch", type=int, help="local batch size")
    parser.add_argument(
        "--strategy", choices=[s.value for s in Strategy], help="selection strategy"
    )
    parser.add_argument(
        "--factor-mode",
        choices=[m.value for m in FactorMode],
        help="calibration correction factor",
    )
    parser.add_argument(
        "--no-feedback",
        action="store_true",
        default=None,
        help="sample every round instead of gating on accuracy decline",
    )
    parser.add_argument("--S", type=int, dest="shard_size", help="partition shard size")
    parser.add_argument(
        "--split", choices=[m.value for m in SplitMode], help="equal or nonequal split"
    )
    parser.add_argument("--min-fraction", type=float, help="nonequal share floor")
    parser.add_argument("--window", type=int, help="moving-average window N")
    parser.add_argument("--seed", type=int, help="experiment seed")
    parser.add_argument("--synthetic", help="synthetic dataset spec CxFxN")
    parser.add_argument("--input", type=Path, help="FEDDS dataset file to train on")
    parser.add_argument("--model", help="shape tag: softmax or mlp:<hidden>")
    parser.add_argument("--checkpoint-every", type=int, help="checkpoint period")
    parser.add_argument("--out", type=Path, help="output directory")


# config-file key -> attribute on the parsed-args namespace
_RUN_KEYS = {
    "clients": ("clients", int),
    "select_k": ("select_k", int),
    "rounds": ("rounds", int),
    "epochs": ("epochs", int),
    "lr": ("lr", float),
    "batch": ("batch", int),
    "strategy": ("strategy", str),
    "factor_mode": ("factor_mode", str),
    "feedback": ("feedback", _parse_bool),
    "S": ("shard_size", int),
    "split": ("split", str),
    "min_fraction": ("min_fraction", float),
    "window": ("window", int),
    "seed": ("seed", int),
    "synthetic": ("synthetic", str),
    "input": ("input", Path),
    "model": ("model", str),
    "checkpoint_every": ("checkpoint_every", int),
}


def _config_from_sources(args: argparse.Namespace) -> ExperimentConfig:
    """Merge defaults, config file and flags into an ExperimentConfig."""
    merged: dict[str, object] = {}
    if args.config is not None:
        file_values = _read_kv_file(args.config)
        for key, raw in file_values.items():
            if key in ("strategies", "datasets", "seeds", "out"):
                continue  # battery-only / output keys
            if key not in _RUN_KEYS:
                raise ValueError(f"unknown config key {key!r}")
            attr, convert = _RUN_KEYS[key]
            merged[attr] = convert(raw)
    for attr in (
        "clients", "select_k", "rounds", "epochs", "lr", "batch", "strategy",
        "factor_mode", "shard_size", "split", "min_fraction", "window", "seed",
        "synthetic", "input", "model", "checkpoint_every",
    ):
        value = getattr(args, attr, None)
        if value is not None:
            merged[attr] = value
    if getattr(args, "no_feedback", None):
        merged["feedback"] = False

    base = ExperimentConfig()
    synthetic = (
        _parse_synthetic(str(merged["synthetic"]))
        if "synthetic" in merged
        else base.synthetic_shape
    )
    spec = PartitionSpec(
        shard_size=int(merged.get("shard_size", base.partition.shard_size)),
        split_mode=SplitMode(str(merged.get("split", base.partition.split_mode.value))),
        num_clients=int(merged.get("clients", base.num_clients)),
        min_fraction=float(merged.get("min_fraction", base.partition.min_fraction)),
    )
    return ExperimentConfig(
        num_clients=int(merged.get("clients", base.num_clients)),
        select_k=int(merged.get("select_k", base.select_k)),
        rounds=int(merged.get("rounds", base.rounds)),
        epochs=int(merged.get("epochs", base.epochs)),
        learning_rate=float(merged.get("lr", base.learning_rate)),
        batch_size=int(merged.get("batch", base.batch_size)),
        shape_tag=str(merged.get("model", base.shape_tag)),
        strategy=Strategy(str(merged.get("strategy", base.strategy.value))),
        factor_mode=FactorMode(str(merged.get("factor_mode", base.factor_mode.value))),
        feedback_enabled=bool(merged.get("feedback", base.feedback_enabled)),
        partition=spec,
        moving_avg_window=int(merged.get("window", base.moving_avg_window)),
        seed=int(merged.get("seed", base.seed)),
        synthetic_shape=synthetic,
        dataset_path=str(merged["input"]) if "input" in merged else None,
        checkpoint_every=int(merged.get("checkpoint_every", base.checkpoint_every)),
    )


def cmd_partition(args: argparse.Namespace) -> int:
    if args.out is None:
        raise ValueError("partition requires --out DIR")
    if (args.input is None) == (args.synthetic is None):
        raise ValueError("give exactly one of --input FILE or --synthetic CxFxN")
    if args.input is not None:
        dataset = load_dataset(args.input)
    else:
        num_classes, num_features, num_samples = _parse_synthetic(args.synthetic)
        dataset = make_synthetic(
            num_samples, num_features, num_classes, seed=args.seed or 0
        )
    spec = PartitionSpec(
        shard_size=args.shard_size if args.shard_size is not None else 50,
        split_mode=SplitMode(args.split or "equal"),
        num_clients=args.clients if args.clients is not None else 50,
        min_fraction=args.min_fraction if args.min_fraction is not None else 0.2,
        seed=args.seed or 0,
    )
    clients = partition(dataset, spec)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    for client in clients:
        save_dataset(client.data, out / f"client_{client.client_id:03d}.fedds")
    reference = label_distribution(dataset)
    report = partition_report(clients, reference)
    (out / "report.csv").write_text(report)
    print(f"wrote {len(clients)} shard files and report.csv to {out}")
    print(report.splitlines()[-1])
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_sources(args)
    history = run_experiment(cfg, out_dir=args.out)
    final = history[-1]
    occasions = sum(1 for r in history if r.selection_ran)
    print(
        f"strategy={cfg.strategy.value} rounds={len(history)} "
        f"final_acc={final.test_accuracy:.4f} final_ma={final.ma_accuracy:.4f} "
        f"sampling_occasions={occasions}"
    )
    if args.out is None:
        sys.stdout.write(summary_text(cfg, history))
    return 0


def _parse_dataset_entry(entry: str) -> tuple[int, SplitMode]:
    """Parse a battery dataset entry like ``s50-equal``."""
    text = entry.strip().lower()
    if not text.startswith("s") or "-" not in text:
        raise ValueError(f"bad dataset entry {entry!r}, want s<S>-<equal|nonequal>")
    size_text, _, mode_text = text[1:].partition("-")
    return int(size_text), SplitMode(mode_text)


def cmd_battery(args: argparse.Namespace) -> int:
    if args.out is None:
        raise ValueError("battery requires --out DIR")
    values = _read_kv_file(args.spec)
    for key in ("strategies", "datasets", "seeds"):
        if key not in values or not values[key].strip():
            raise ValueError(f"battery spec must set a non-empty {key!r} list")
    strategies = [Strategy(s.strip()) for s in values["strategies"].split(",")]
    datasets = [_parse_dataset_entry(e) for e in values["datasets"].split(",")]
    seeds = [int(s.strip()) for s in values["seeds"].split(",")]
    base_feedback = _parse_bool(values.get("feedback", "true"))

    ns = argparse.Namespace(config=args.spec, no_feedback=None)
    base_cfg = _config_from_sources(ns)

    rows: list[tuple[str, str, int, float, float, int]] = []
    for shard_size, split_mode in datasets:
        name = f"s{shard_size}-{split_mode.value}"
        for strategy in strategies:
            for seed in seeds:
                cfg = replace(
                    base_cfg,
                    strategy=strategy,
                    seed=seed,
                    partition=replace(
                        base_cfg.partition,
                        shard_size=shard_size,
                        split_mode=split_mode,
                    ),
                    # Baselines sample every round; only the calibrated-loss
                    # strategy runs with the feedback gate.
                    feedback_enabled=base_feedback and strategy is Strategy.FEDCLF,
                )
                history = run_experiment(cfg)
                ma_tail = [r.ma_accuracy for r in history[-10:]]
                rows.append(
                    (
                        name,
                        strategy.value,
                        seed,
                        history[-1].ma_accuracy,
                        float(np.mean(ma_tail)),
                        sum(1 for r in history if r.selection_ran),
                    )
                )

    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    lines = ["dataset,strategy,seed,final_ma,mean_ma_last10,sampling_occasions"]
    for name, strategy, seed, final_ma, tail_ma, occasions in rows:
        lines.append(
            f"{name},{strategy},{seed},{final_ma:.10f},{tail_ma:.10f},{occasions}"
        )
    (out / "battery.csv").write_text("\n".join(lines) + "\n")

    pivot = ["dataset," + ",".join(s.value for s in strategies)]
    for shard_size, split_mode in datasets:
        name = f"s{shard_size}-{split_mode.value}"
        cells = []
        for strategy in strategies:
            per_seed = [
                row[3] for row in rows if row[0] == name and row[1] == strategy.value
            ]
            cells.append(f"{float(np.mean(per_seed)):.10f}")
        pivot.append(f"{name}," + ",".join(cells))
    (out / "battery_pivot.csv").write_text("\n".join(pivot) + "\n")
    print(f"wrote {len(rows)} battery rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedclf",
        description="Deterministic federated-learning simulator with "
        "calibrated-loss selection and feedback-controlled sampling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_part = sub.add_parser("partition", help="partition a dataset and report skew")
    p_part.add_argument("--synthetic", help="synthetic dataset spec CxFxN")
    p_part.add_argument("--input", type=Path, help="FEDDS dataset file")
    p_part.add_argument("--S", type=int, dest="shard_size", help="shard size")
    p_part.add_argument("--clients", type=int, help="number of clients K")
    p_part.add_argument(
        "--mode",
        "--split",
        dest="split",
        choices=[m.value for m in SplitMode],
        help="equal or nonequal split",
    )
    p_part.add_argument("--min-fraction", type=float, help="nonequal share floor")
    p_part.add_argument("--seed", type=int, help="partition seed")
    p_part.add_argument("--out", type=Path, help="output directory")
    p_part.set_defaults(func=cmd_partition)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_bat = sub.add_parser("battery", help="run a strategy-comparison battery")
    p_bat.add_argument("spec", type=Path, help="battery spec file (key=value)")
    p_bat.add_argument("--out", type=Path, help="output directory")
    p_bat.set_defaults(func=cmd_battery)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, ConfigurationError, DatasetFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
