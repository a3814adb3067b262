"""Experiment configs: a flat ``key = value`` text format.

Lines are ``key = value`` pairs; blank lines and lines starting with
``#`` are ignored.  Dotted keys group related settings (``data.*``,
``partition.*``) and indexed keys describe lists (``arch.0.spec``,
``arch.0.count``, ``arch.1.spec``, ...).  ``parse_config`` validates
everything up front so a run can only fail on real numerics.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .arch import parse_arch
from .errors import ArchitectureError, ConfigError
from .federation import STRATEGIES, Hyperparams


@dataclass(frozen=True)
class DataConfig:
    """Where training data comes from: generated or IDX files."""

    source: str  # "synthetic" | "idx"
    # synthetic fields
    classes: int = 10
    per_class: int = 100
    test_per_class: int = 50
    shape: tuple[int, int, int] = (1, 16, 16)
    noise: float = 0.15
    seed: int = 0
    # idx fields
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_limit: int = 0  # 0 = use everything
    test_limit: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: str
    seed: int
    out: str
    rounds: int
    local_epochs: int
    learning_rate: float
    batch_size: int
    participation: float
    round_fraction: float
    log_walltime: bool
    workers: int
    data: DataConfig
    partition_scheme: str
    partition_alpha: float
    num_clients: int
    arch_entries: tuple[tuple[str, int], ...]  # (arch text, client count)

    def hyperparams(self, seed: int) -> Hyperparams:
        return Hyperparams(
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            participation_rate=self.participation,
            per_round_data_fraction=self.round_fraction,
            global_seed=seed,
        )


def _parse_lines(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


class _Fields:
    """Typed, tracked access to the raw key/value pairs."""

    def __init__(self, pairs: dict[str, str]):
        self.pairs = pairs
        self.used: set[str] = set()

    def _take(self, key: str, default):
        self.used.add(key)
        if key in self.pairs:
            return self.pairs[key]
        if default is _REQUIRED:
            raise ConfigError(f"missing required key {key!r}")
        return default

    def text(self, key: str, default=None) -> str:
        value = self._take(key, default)
        return value if isinstance(value, str) else value

    def integer(self, key: str, default=None) -> int:
        value = self._take(key, default)
        if isinstance(value, int):
            return value
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {value!r}") from None

    def number(self, key: str, default=None) -> float:
        value = self._take(key, default)
        if isinstance(value, (int, float)):
            return float(value)
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {value!r}") from None

    def flag(self, key: str, default=None) -> bool:
        value = self._take(key, default)
        if isinstance(value, bool):
            return value
        if value in ("true", "false"):
            return value == "true"
        raise ConfigError(f"{key} must be true or false, got {value!r}")


_REQUIRED = object()


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"data.shape must look like 1x16x16, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"data.shape must be 3 positive dims, got {text!r}")
    return dims


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully validate a config; raises ConfigError naming the
    offending key."""
    pairs = _parse_lines(text)
    f = _Fields(pairs)

    strategy = f.text("strategy", _REQUIRED)
    if strategy not in STRATEGIES:
        raise ConfigError(
            f"strategy must be one of {sorted(STRATEGIES)}, got {strategy!r}"
        )
    seed = f.integer("seed", 0)
    out = f.text("out", "")
    rounds = f.integer("rounds", _REQUIRED)
    local_epochs = f.integer("local_epochs", 1)
    learning_rate = f.number("learning_rate", _REQUIRED)
    batch_size = f.integer("batch_size", _REQUIRED)
    participation = f.number("participation", 1.0)
    round_fraction = f.number("round_fraction", 0.2)
    log_walltime = f.flag("log_walltime", False)
    workers = f.integer("workers", 0)
    if workers < 0:
        raise ConfigError(f"workers must be >= 0, got {workers}")

    source = f.text("data.source", _REQUIRED)
    if source == "synthetic":
        data = DataConfig(
            source="synthetic",
            classes=f.integer("data.classes", _REQUIRED),
            per_class=f.integer("data.per_class", _REQUIRED),
            test_per_class=f.integer("data.test_per_class", _REQUIRED),
            shape=_parse_shape(f.text("data.shape", _REQUIRED)),
            noise=f.number("data.noise", 0.15),
            seed=f.integer("data.seed", 0),
        )
        if data.classes < 2:
            raise ConfigError(f"data.classes must be >= 2, got {data.classes}")
        if data.per_class < 1 or data.test_per_class < 1:
            raise ConfigError("data.per_class and data.test_per_class must be >= 1")
        if data.noise < 0:
            raise ConfigError(f"data.noise must be >= 0, got {data.noise}")
    elif source == "idx":
        data = DataConfig(
            source="idx",
            train_images=f.text("data.train_images", _REQUIRED),
            train_labels=f.text("data.train_labels", _REQUIRED),
            test_images=f.text("data.test_images", _REQUIRED),
            test_labels=f.text("data.test_labels", _REQUIRED),
            train_limit=f.integer("data.train_limit", 0),
            test_limit=f.integer("data.test_limit", 0),
            classes=f.integer("data.classes", 0),
        )
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(data, key):
                raise ConfigError(f"data.{key} must not be empty")
        if data.train_limit < 0 or data.test_limit < 0:
            raise ConfigError("data.train_limit and data.test_limit must be >= 0")
    else:
        raise ConfigError(f"data.source must be synthetic or idx, got {source!r}")

    partition_scheme = f.text("partition.scheme", "iid")
    if partition_scheme not in ("iid", "label_skew"):
        raise ConfigError(
            f"partition.scheme must be iid or label_skew, got {partition_scheme!r}"
        )
    partition_alpha = f.number("partition.alpha", 0.5)
    if partition_alpha <= 0:
        raise ConfigError(f"partition.alpha must be positive, got {partition_alpha}")
    num_clients = f.integer("partition.clients", _REQUIRED)
    if num_clients < 1:
        raise ConfigError(f"partition.clients must be >= 1, got {num_clients}")

    entries: list[tuple[str, int]] = []
    index = 0
    while f"arch.{index}.spec" in pairs:
        spec_text = f.text(f"arch.{index}.spec", _REQUIRED)
        try:
            arch = parse_arch(spec_text)
        except ArchitectureError as e:
            raise ConfigError(f"arch.{index}.spec: {e}") from None
        count = f.integer(f"arch.{index}.count", 1)
        if count < 1:
            raise ConfigError(f"arch.{index}.count must be >= 1, got {count}")
        if source == "synthetic":
            if tuple(arch.input_shape) != data.shape:
                raise ConfigError(
                    f"arch.{index}.spec input {arch.input_shape} does not match "
                    f"data.shape {data.shape}"
                )
            if arch.num_classes != data.classes:
                raise ConfigError(
                    f"arch.{index}.spec has {arch.num_classes} classes, "
                    f"data.classes is {data.classes}"
                )
        entries.append((spec_text, count))
        index += 1
    if not entries:
        raise ConfigError("at least one arch.0.spec entry is required")

    total = sum(count for _, count in entries)
    if total != num_clients:
        raise ConfigError(
            f"arch counts sum to {total} but partition.clients is {num_clients}"
        )

    unknown = set(pairs) - f.used
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r}")

    cfg = ExperimentConfig(
        strategy=strategy,
        seed=seed,
        out=out,
        rounds=rounds,
        local_epochs=local_epochs,
        learning_rate=learning_rate,
        batch_size=batch_size,
        participation=participation,
        round_fraction=round_fraction,
        log_walltime=log_walltime,
        workers=workers,
        data=data,
        partition_scheme=partition_scheme,
        partition_alpha=partition_alpha,
        num_clients=num_clients,
        arch_entries=tuple(entries),
    )
    try:
        cfg.hyperparams(seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def print_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parse_config(print_config(c)) round-trips."""
    lines = [
        f"strategy = {cfg.strategy}",
        f"seed = {cfg.seed}",
        f"out = {cfg.out}" if cfg.out else None,
        f"rounds = {cfg.rounds}",
        f"local_epochs = {cfg.local_epochs}",
        f"learning_rate = {cfg.learning_rate!r}",
        f"batch_size = {cfg.batch_size}",
        f"participation = {cfg.participation!r}",
        f"round_fraction = {cfg.round_fraction!r}",
        f"log_walltime = {'true' if cfg.log_walltime else 'false'}",
        f"workers = {cfg.workers}" if cfg.workers else None,
        f"data.source = {cfg.data.source}",
    ]
    d = cfg.data
    if d.source == "synthetic":
        lines += [
            f"data.classes = {d.classes}",
            f"data.per_class = {d.per_class}",
            f"data.test_per_class = {d.test_per_class}",
            f"data.shape = {d.shape[0]}x{d.shape[1]}x{d.shape[2]}",
            f"data.noise = {d.noise!r}",
            f"data.seed = {d.seed}",
        ]
    else:
        lines += [
            f"data.train_images = {d.train_images}",
            f"data.train_labels = {d.train_labels}",
            f"data.test_images = {d.test_images}",
            f"data.test_labels = {d.test_labels}",
        ]
        if d.train_limit:
            lines.append(f"data.train_limit = {d.train_limit}")
        if d.test_limit:
            lines.append(f"data.test_limit = {d.test_limit}")
        if d.classes:
            lines.append(f"data.classes = {d.classes}")
    lines.append(f"partition.scheme = {cfg.partition_scheme}")
    if cfg.partition_scheme == "label_skew":
        lines.append(f"partition.alpha = {cfg.partition_alpha!r}")
    lines.append(f"partition.clients = {cfg.num_clients}")
    for i, (spec_text, count) in enumerate(cfg.arch_entries):
        lines.append(f"arch.{i}.spec = {spec_text}")
        lines.append(f"arch.{i}.count = {count}")
    return "\n".join(line for line in lines if line is not None) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """Short stable digest of the canonical config text."""
    return hashlib.sha256(print_config(cfg).encode("utf-8")).hexdigest()[:12]


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)
