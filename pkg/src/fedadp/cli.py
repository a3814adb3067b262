"""Command line: run experiments, summarize result CSVs, inspect archs.

``fedadp run --config exp.cfg [--seed N] [--out runs/x.csv]`` streams
one CSV per run with ``#``-prefixed metadata lines, a header row, and
per-round rows (one per participating client plus one global row):

    round,scope,client_id,arch,accuracy,loss,wall_ms

``wall_ms`` stays empty unless the config sets ``log_walltime = true``,
so rerunning a config reproduces the file byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import os
import statistics
import sys

from .arch import format_arch, parse_arch, shape_trace
from .config import ExperimentConfig, config_hash, load_config
from .data import Dataset, PartitionSpec, gen_synthetic, load_idx, partition, split_per_class
from .errors import ConfigError, Error
from .federation import STRATEGIES, WORKERS_ENV, ClientState
from .seeding import derive_seed

RUN_CSV_COLUMNS = ["round", "scope", "client_id", "arch", "accuracy", "loss", "wall_ms"]


def build_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, str]:
    """(train, test, human-readable source note) for a config."""
    d = cfg.data
    if d.source == "synthetic":
        full = gen_synthetic(
            d.classes, d.per_class + d.test_per_class, d.shape, d.seed, d.noise
        )
        train, test = split_per_class(full, d.per_class)
        note = f"synthetic classes={d.classes} noise={d.noise}"
    else:
        train = load_idx(d.train_images, d.train_labels, d.classes or None)
        test = load_idx(d.test_images, d.test_labels, d.classes or None)
        if not d.classes:
            k = max(train.num_classes, test.num_classes)
            train = Dataset(train.inputs, train.labels, k)
            test = Dataset(test.inputs, test.labels, k)
        if d.train_limit and d.train_limit < len(train):
            train = train.subset(range(d.train_limit))
        if d.test_limit and d.test_limit < len(test):
            test = test.subset(range(d.test_limit))
        note = f"idx {os.path.basename(d.train_images)}"
    return train, test, f"{note} train={len(train)} test={len(test)}"


def build_clients(cfg: ExperimentConfig, train: Dataset, seed: int) -> list[ClientState]:
    """Partition the training set and assign architectures in config
    order: arch.0 fills the first client ids, then arch.1, and so on."""
    archs = []
    for spec_text, count in cfg.arch_entries:
        archs.extend([parse_arch(spec_text)] * count)
    for i, arch in enumerate(archs):
        if tuple(arch.input_shape) != train.input_shape:
            raise ConfigError(
                f"client {i} architecture input {tuple(arch.input_shape)} does not "
                f"match data shape {train.input_shape}"
            )
        if arch.num_classes != train.num_classes:
            raise ConfigError(
                f"client {i} architecture has {arch.num_classes} classes, "
                f"data has {train.num_classes}"
            )
    spec = PartitionSpec(
        cfg.partition_scheme,
        cfg.num_clients,
        derive_seed(seed, "partition"),
        cfg.partition_alpha,
    )
    shards = partition(train, spec)
    return [ClientState(i, arch, shard) for i, (arch, shard) in enumerate(zip(archs, shards))]


def run_experiment(
    cfg: ExperimentConfig, seed: int, out_path: str, progress=None
) -> dict:
    """Run one strategy and stream its CSV; returns a summary dict."""
    if cfg.workers and not os.environ.get(WORKERS_ENV):
        os.environ[WORKERS_ENV] = str(cfg.workers)
    train, test, note = build_dataset(cfg)
    clients = build_clients(cfg, train, seed)
    hp = cfg.hyperparams(seed)
    rounds_iter = STRATEGIES[cfg.strategy](clients, hp, test)

    out_dir = os.path.dirname(out_path)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    best_acc, best_round = -1.0, -1
    final_acc = float("nan")
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        f.write("# format = fedadp-run v1\n")
        f.write(f"# strategy = {cfg.strategy}\n")
        f.write(f"# seed = {seed}\n")
        f.write(f"# config_hash = {config_hash(cfg)}\n")
        f.write(f"# data = {note}\n")
        writer = csv.writer(f)
        writer.writerow(RUN_CSV_COLUMNS)
        for rm in rounds_iter:
            wall = f"{rm.wall_time_s * 1000:.3f}" if cfg.log_walltime else ""
            for cm in rm.clients:
                writer.writerow(
                    [rm.round_index, "client", cm.client_id, cm.arch_text,
                     cm.accuracy, cm.loss, wall]
                )
            writer.writerow(
                [rm.round_index, "global", "", "", rm.global_accuracy, rm.global_loss, wall]
            )
            f.flush()
            if progress is not None:
                print(
                    f"round {rm.round_index + 1}/{hp.rounds}: "
                    f"global_acc={rm.global_accuracy:.4f} loss={rm.global_loss:.4f}",
                    file=progress,
                )
            if rm.global_accuracy > best_acc:
                best_acc, best_round = rm.global_accuracy, rm.round_index
            final_acc = rm.global_accuracy
    return {
        "rounds": hp.rounds,
        "best_accuracy": best_acc,
        "best_round": best_round,
        "final_accuracy": final_acc,
        "out": out_path,
    }


def read_run_csv(path: str) -> tuple[dict[str, str], list[list[str]]]:
    """(metadata, data rows) of one run CSV; validates the schema row."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise ValueError(f"cannot read {path}: {e}") from None
    meta: dict[str, str] = {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        body = lines[i][1:].strip()
        if "=" in body:
            key, value = body.split("=", 1)
            meta[key.strip()] = value.strip()
        i += 1
    reader = csv.reader(lines[i:])
    header = next(reader, None)
    if header != RUN_CSV_COLUMNS:
        raise ValueError(f"{path}: unexpected schema {header}, want {RUN_CSV_COLUMNS}")
    rows = []
    for row in reader:
        if not row:
            continue
        if len(row) != len(RUN_CSV_COLUMNS):
            raise ValueError(f"{path}: malformed row {row!r}")
        rows.append(row)
    return meta, rows


def summarize_runs(paths: list[str], csv_out: str | None = None) -> str:
    """Group runs by strategy; report mean +/- sample std of the final
    and best global accuracy over the runs of each strategy."""
    collected: dict[str, list[tuple[float, float]]] = {}
    for path in paths:
        meta, rows = read_run_csv(path)
        strategy = meta.get("strategy", "unknown")
        global_rows = [(int(r[0]), float(r[4])) for r in rows if r[1] == "global"]
        if not global_rows:
            raise ValueError(f"{path}: no global rows")
        final = max(global_rows)[1]
        best = max(acc for _, acc in global_rows)
        collected.setdefault(strategy, []).append((final, best))

    def fmt(values: list[float]) -> str:
        mean = statistics.mean(values)
        std = statistics.stdev(values) if len(values) > 1 else 0.0
        return f"{mean:.4f} ± {std:.4f}"

    lines = [f"{'strategy':<14}{'runs':>5}  {'final_acc':<18}{'best_acc':<18}"]
    table = []
    for strategy in sorted(collected):
        entries = collected[strategy]
        finals = [f for f, _ in entries]
        bests = [b for _, b in entries]
        lines.append(f"{strategy:<14}{len(entries):>5}  {fmt(finals):<18}{fmt(bests):<18}")
        table.append((strategy, len(entries), finals, bests))

    if csv_out:
        with open(csv_out, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["strategy", "runs", "final_mean", "final_std", "best_mean", "best_std"]
            )
            for strategy, n, finals, bests in table:
                writer.writerow([
                    strategy,
                    n,
                    statistics.mean(finals),
                    statistics.stdev(finals) if n > 1 else 0.0,
                    statistics.mean(bests),
                    statistics.stdev(bests) if n > 1 else 0.0,
                ])
    return "\n".join(lines)


def describe_arch(spec_text: str) -> str:
    """Layer table, output shapes, and parameter count of an arch string."""
    arch = parse_arch(spec_text)
    trace = shape_trace(arch)
    lines = [format_arch(arch), f"parameters: {arch.n_params()}"]
    for i, (layer, shape) in enumerate(zip(arch.layers, trace)):
        if layer.kind == "conv":
            desc = f"conv   {layer.in_dim} -> {layer.out_dim}  3x3 same, relu"
        elif layer.kind == "pool":
            desc = "pool   2x2, stride 2"
        elif layer.kind == "flatten":
            desc = "flatten"
        else:
            act = "relu" if layer.activation == "relu" else "linear"
            desc = f"dense  {layer.in_dim} -> {layer.out_dim}  {act}"
        lines.append(f"{i:>3}  {desc:<34} out {'x'.join(map(str, shape))}")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedadp",
        description="Federated learning across heterogeneous client architectures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("--config", required=True, help="path to a key = value config")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="override the output CSV path")
    p_sum = sub.add_parser("summarize", help="aggregate run CSVs into a table")
    p_sum.add_argument("csvs", nargs="+", help="run CSV files")
    p_sum.add_argument("--csv", default=None, help="also write the summary as CSV")
    p_arch = sub.add_parser("print-arch", help="show the layer table of an arch string")
    p_arch.add_argument("--spec", required=True, help="architecture string")
    args = parser.parse_args(argv)

    try:
        if args.command == "run":
            cfg = load_config(args.config)
            seed = args.seed if args.seed is not None else cfg.seed
            out = args.out or cfg.out
            if not out:
                raise ConfigError("no output path: set out = ... in the config or pass --out")
            summary = run_experiment(cfg, seed, out, progress=sys.stderr)
            print(
                f"strategy={cfg.strategy} rounds={summary['rounds']} "
                f"best_acc={summary['best_accuracy']:.4f}@r{summary['best_round']} "
                f"final_acc={summary['final_accuracy']:.4f} out={summary['out']}"
            )
        elif args.command == "summarize":
            print(summarize_runs(args.csvs, args.csv))
        else:
            print(describe_arch(args.spec))
    except (Error, ValueError, ArithmeticError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
