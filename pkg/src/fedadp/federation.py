"""Federated round loops over structurally heterogeneous clients.

Four strategies share one round skeleton (sample participants, train
locally, aggregate, evaluate):

* ``run_fedadp``      one global model in the union architecture;
  clients receive it shrunk to their own architecture and upload grown
  back, so every client contributes to every shared parameter.
* ``run_standalone``  no sharing; every client trains its own model.
* ``run_clustered_fl`` FedAvg inside groups of identical architecture.
* ``run_flexifed``    clusters plus cross-cluster averaging of the
  maximal common layer prefix shared by the whole fleet.

All randomness derives from (global seed, purpose tag, round, client),
never from the strategy, so strategies that are mathematically
equivalent on a homogeneous fleet produce bitwise-identical traces.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .arch import ArchitectureSpec, format_arch
from .data import Dataset, round_subsample
from .errors import IncompatibilityError, ShapeError
from .netchange import net_change, union_arch
from .nn import ModelParams, evaluate, init_model, loss_and_backward, sgd_step
from .seeding import derive_seed

WORKERS_ENV = "FEDADP_WORKERS"


@dataclass(frozen=True)
class Hyperparams:
    """Knobs shared by every strategy."""

    rounds: int
    local_epochs: int
    learning_rate: float
    batch_size: int
    participation_rate: float = 1.0
    per_round_data_fraction: float = 0.2
    global_seed: int = 0

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        # 0 disables learning; useful as a smoke-test setting.
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.participation_rate <= 1:
            raise ValueError(
                f"participation_rate must be in (0, 1], got {self.participation_rate}"
            )
        if not 0 < self.per_round_data_fraction <= 1:
            raise ValueError(
                f"per_round_data_fraction must be in (0, 1], got {self.per_round_data_fraction}"
            )


@dataclass
class ClientState:
    """One simulated device: its architecture, data shard, and the last
    locally trained parameters (None before the first round)."""

    client_id: int
    arch: ArchitectureSpec
    shard: Dataset
    current_params: ModelParams | None = field(default=None, repr=False)

    @property
    def n_k(self) -> int:
        return len(self.shard)


@dataclass(frozen=True)
class ClientMetric:
    client_id: int
    arch_text: str
    accuracy: float
    loss: float


@dataclass(frozen=True)
class RoundMetrics:
    round_index: int
    clients: tuple[ClientMetric, ...]
    global_accuracy: float
    global_loss: float
    wall_time_s: float


def client_weight(n_k: int, n_total: int) -> float:
    """FedAvg weight n_k / n for a client holding n_k of n samples."""
    if n_total <= 0:
        raise ValueError(f"total sample count must be positive, got {n_total}")
    if not 0 < n_k <= n_total:
        raise ValueError(f"client sample count {n_k} must be in [1, {n_total}]")
    return n_k / n_total


def _weighted_sum(arrays: list[np.ndarray], weights: list[float]) -> np.ndarray:
    acc = weights[0] * arrays[0]
    for w, a in zip(weights[1:], arrays[1:]):
        acc += w * a
    return acc


def fedavg(models: list[ModelParams], weights: list[float]) -> ModelParams:
    """Weighted average of identically shaped models.

    Weights must be positive and sum to 1 within 1e-9.  Sums accumulate
    in float64 in list order, so equal inputs give bitwise-equal output.
    """
    if not models:
        raise ValueError("cannot average zero models")
    if len(weights) != len(models):
        raise ValueError(f"{len(models)} models but {len(weights)} weights")
    if min(weights) <= 0:
        raise ValueError("weights must be positive")
    total = sum(weights)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1 within 1e-9, got {total!r}")
    base = models[0].arch
    for i, m in enumerate(models[1:], start=1):
        if m.arch != base:
            raise IncompatibilityError(f"model {i} architecture differs from model 0")
    params = []
    for slot in range(len(models[0].params)):
        w = _weighted_sum([m.params[slot][0] for m in models], weights)
        b = _weighted_sum([m.params[slot][1] for m in models], weights)
        params.append((w, b))
    return ModelParams(base, tuple(params))


def local_train(
    client: ClientState, model: ModelParams, hp: Hyperparams, round_index: int
) -> ModelParams:
    """SGD on a per-round subsample of the client's shard.

    Runs ``local_epochs`` passes with a fresh shuffle per epoch; the
    final partial batch is trained too.  Raises FloatingPointError if
    the loss stops being finite.
    """
    if model.arch != client.arch:
        raise IncompatibilityError(
            f"client {client.client_id} got a model of a different architecture"
        )
    gs = hp.global_seed
    sub = round_subsample(
        client.shard,
        hp.per_round_data_fraction,
        derive_seed(gs, "subsample", round_index, client.client_id),
    )
    n = len(sub)
    for epoch in range(hp.local_epochs):
        rng = np.random.default_rng(
            derive_seed(gs, "shuffle", round_index, client.client_id, epoch)
        )
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            batch = order[start : start + hp.batch_size]
            loss, grads = loss_and_backward(model, sub.inputs[batch], sub.labels[batch])
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"training diverged (loss={loss}) at round {round_index}, "
                    f"client {client.client_id}"
                )
            model = sgd_step(model, grads, hp.learning_rate)
    return model


def sample_clients(
    clients: list[ClientState], rate: float, round_index: int, seed: int
) -> list[ClientState]:
    """The round's participants, ascending client_id; rate 1 means all."""
    ordered = sorted(clients, key=lambda c: c.client_id)
    if rate >= 1:
        return ordered
    k = max(1, int(round(rate * len(ordered))))
    rng = np.random.default_rng(derive_seed(seed, "participation", round_index))
    chosen = rng.choice(len(ordered), size=k, replace=False)
    return [ordered[i] for i in np.sort(chosen)]


def _client_map(fn: Callable, items: list) -> list:
    """Run fn over items, possibly in a thread pool.

    Pool size comes from the FEDADP_WORKERS env var, defaulting to the
    machine's CPU count; 1 forces serial execution.  Results keep input
    order either way, so the outcome is identical bit for bit.
    """
    raw = os.environ.get(WORKERS_ENV, "")
    workers = int(raw) if raw.strip() else (os.cpu_count() or 1)
    if workers < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1, got {workers}")
    workers = min(workers, len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _check_fleet(clients: list[ClientState], test_set: Dataset) -> list[ClientState]:
    if not clients:
        raise ValueError("need at least one client")
    ordered = sorted(clients, key=lambda c: c.client_id)
    seen: set[int] = set()
    for c in ordered:
        if c.client_id in seen:
            raise ValueError(f"duplicate client_id {c.client_id}")
        seen.add(c.client_id)
        if len(c.shard) == 0:
            raise ValueError(f"client {c.client_id} has an empty shard")
        if c.shard.input_shape != tuple(c.arch.input_shape):
            raise ShapeError(
                f"client {c.client_id}: shard shape {c.shard.input_shape} does not "
                f"match architecture input {tuple(c.arch.input_shape)}"
            )
        if c.shard.num_classes != c.arch.num_classes:
            raise ShapeError(
                f"client {c.client_id}: shard has {c.shard.num_classes} classes, "
                f"architecture expects {c.arch.num_classes}"
            )
    if test_set.input_shape != tuple(ordered[0].arch.input_shape):
        raise ShapeError(
            f"test set shape {test_set.input_shape} does not match client input "
            f"{tuple(ordered[0].arch.input_shape)}"
        )
    base = ordered[0].arch
    for c in ordered[1:]:
        if c.arch.input_shape != base.input_shape or c.arch.num_classes != base.num_classes:
            raise IncompatibilityError(
                f"client {c.client_id} input/classes differ from client "
                f"{ordered[0].client_id}"
            )
        if len(c.arch.stage_widths()) != len(base.stage_widths()):
            raise IncompatibilityError(
                f"client {c.client_id} has {len(c.arch.stage_widths())} conv stages, "
                f"client {ordered[0].client_id} has {len(base.stage_widths())}"
            )
    return ordered


def _train_and_score(
    client: ClientState, model: ModelParams, hp: Hyperparams, t: int, test_set: Dataset
) -> tuple[ModelParams, ClientMetric]:
    trained = local_train(client, model, hp, t)
    acc, loss = evaluate(trained, test_set.inputs, test_set.labels)
    metric = ClientMetric(client.client_id, format_arch(client.arch), acc, loss)
    return trained, metric


def fedadp_rounds(
    clients: list[ClientState], hp: Hyperparams, test_set: Dataset
) -> Iterator[RoundMetrics]:
    """One round at a time: shrink the union-architecture global model
    to each participant, train, grow back, and FedAvg the uploads."""
    fleet = _check_fleet(clients, test_set)
    gs = hp.global_seed
    union = union_arch([c.arch for c in fleet])
    global_model = init_model(union, derive_seed(gs, "init"))
    for t in range(hp.rounds):
        started = time.perf_counter()
        parts = sample_clients(fleet, hp.participation_rate, t, gs)

        def work(c: ClientState) -> tuple[ModelParams, ModelParams, ClientMetric]:
            local = net_change(global_model, c.arch, derive_seed(gs, "shrink", t, c.client_id))
            trained, metric = _train_and_score(c, local, hp, t, test_set)
            grown = net_change(trained, union, derive_seed(gs, "grow", t, c.client_id))
            return trained, grown, metric

        results = _client_map(work, parts)
        for c, (trained, _, _) in zip(parts, results):
            c.current_params = trained
        total = sum(c.n_k for c in parts)
        weights = [client_weight(c.n_k, total) for c in parts]
        global_model = fedavg([grown for _, grown, _ in results], weights)
        acc, loss = evaluate(global_model, test_set.inputs, test_set.labels)
        yield RoundMetrics(
            t,
            tuple(metric for _, _, metric in results),
            acc,
            loss,
            time.perf_counter() - started,
        )


def standalone_rounds(
    clients: list[ClientState], hp: Hyperparams, test_set: Dataset
) -> Iterator[RoundMetrics]:
    """No aggregation: every client keeps training its own model.  The
    global metric is the shard-size-weighted mean over clients."""
    fleet = _check_fleet(clients, test_set)
    gs = hp.global_seed
    models = {c.client_id: init_model(c.arch, derive_seed(gs, "init")) for c in fleet}
    latest: dict[int, ClientMetric] = {}
    for t in range(hp.rounds):
        started = time.perf_counter()
        parts = sample_clients(fleet, hp.participation_rate, t, gs)

        def work(c: ClientState) -> tuple[ModelParams, ClientMetric]:
            return _train_and_score(c, models[c.client_id], hp, t, test_set)

        results = _client_map(work, parts)
        for c, (trained, metric) in zip(parts, results):
            models[c.client_id] = trained
            c.current_params = trained
            latest[c.client_id] = metric
        total = sum(c.n_k for c in fleet if c.client_id in latest)
        acc = sum(
            client_weight(c.n_k, total) * latest[c.client_id].accuracy
            for c in fleet
            if c.client_id in latest
        )
        loss = sum(
            client_weight(c.n_k, total) * latest[c.client_id].loss
            for c in fleet
            if c.client_id in latest
        )
        yield RoundMetrics(
            t,
            tuple(metric for _, metric in results),
            acc,
            loss,
            time.perf_counter() - started,
        )


def _clusters(fleet: list[ClientState]) -> list[tuple[ArchitectureSpec, list[ClientState]]]:
    """Group clients by exact architecture, ordered by lowest member id."""
    groups: dict[ArchitectureSpec, list[ClientState]] = {}
    for c in fleet:
        groups.setdefault(c.arch, []).append(c)
    return sorted(groups.items(), key=lambda kv: kv[1][0].client_id)


def _cluster_metric(
    cluster_list: list[tuple[ArchitectureSpec, list[ClientState]]],
    models: dict[ArchitectureSpec, ModelParams],
    test_set: Dataset,
) -> tuple[float, float]:
    """Cluster-size-weighted mean metric over cluster models; exactly the
    single model's metric when there is one cluster."""
    total = sum(c.n_k for _, members in cluster_list for c in members)
    acc = 0.0
    loss = 0.0
    for key, members in cluster_list:
        a, l = evaluate(models[key], test_set.inputs, test_set.labels)
        w = client_weight(sum(c.n_k for c in members), total)
        acc += w * a
        loss += w * l
    return acc, loss


def clustered_rounds(
    clients: list[ClientState], hp: Hyperparams, test_set: Dataset
) -> Iterator[RoundMetrics]:
    """FedAvg independently inside each exact-architecture cluster."""
    fleet = _check_fleet(clients, test_set)
    gs = hp.global_seed
    cluster_list = _clusters(fleet)
    models = {key: init_model(key, derive_seed(gs, "init")) for key, _ in cluster_list}
    for t in range(hp.rounds):
        started = time.perf_counter()
        parts = sample_clients(fleet, hp.participation_rate, t, gs)
        part_ids = {c.client_id for c in parts}
        metrics: dict[int, ClientMetric] = {}
        for key, members in cluster_list:
            active = [c for c in members if c.client_id in part_ids]
            if not active:
                continue

            def work(c: ClientState) -> tuple[ModelParams, ClientMetric]:
                return _train_and_score(c, models[key], hp, t, test_set)

            results = _client_map(work, active)
            for c, (trained, metric) in zip(active, results):
                c.current_params = trained
                metrics[c.client_id] = metric
            total = sum(c.n_k for c in active)
            weights = [client_weight(c.n_k, total) for c in active]
            models[key] = fedavg([trained for trained, _ in results], weights)
        acc, loss = _cluster_metric(cluster_list, models, test_set)
        yield RoundMetrics(
            t,
            tuple(metrics[c.client_id] for c in parts),
            acc,
            loss,
            time.perf_counter() - started,
        )


def common_prefix_length(archs: list[ArchitectureSpec]) -> int:
    """Number of leading layer positions on which every architecture
    agrees exactly."""
    if not archs:
        return 0
    shortest = min(len(a.layers) for a in archs)
    for i in range(shortest):
        first = archs[0].layers[i]
        if any(a.layers[i] != first for a in archs[1:]):
            return i
    return shortest


def flexifed_rounds(
    clients: list[ClientState], hp: Hyperparams, test_set: Dataset
) -> Iterator[RoundMetrics]:
    """Clustered FedAvg plus fleet-wide averaging of the maximal common
    layer prefix.  With identical architectures everywhere the prefix is
    the whole stack and this reduces to plain FedAvg; with no common
    prefix it reduces to clustered FedAvg."""
    fleet = _check_fleet(clients, test_set)
    gs = hp.global_seed
    cluster_list = _clusters(fleet)
    models = {key: init_model(key, derive_seed(gs, "init")) for key, _ in cluster_list}
    prefix_len = common_prefix_length([c.arch for c in fleet])
    # Parametric slots covered by the shared prefix (same in every arch).
    prefix_slots = sum(1 for l in fleet[0].arch.layers[:prefix_len] if l.parametric)
    for t in range(hp.rounds):
        started = time.perf_counter()
        parts = sample_clients(fleet, hp.participation_rate, t, gs)
        part_ids = {c.client_id for c in parts}
        metrics: dict[int, ClientMetric] = {}
        trained_by_id: dict[int, ModelParams] = {}
        suffix: dict[ArchitectureSpec, list[tuple[np.ndarray, np.ndarray]]] = {}
        for key, members in cluster_list:
            active = [c for c in members if c.client_id in part_ids]
            if not active:
                continue

            def work(c: ClientState) -> tuple[ModelParams, ClientMetric]:
                return _train_and_score(c, models[key], hp, t, test_set)

            results = _client_map(work, active)
            for c, (trained, metric) in zip(active, results):
                c.current_params = trained
                metrics[c.client_id] = metric
                trained_by_id[c.client_id] = trained
            total = sum(c.n_k for c in active)
            weights = [client_weight(c.n_k, total) for c in active]
            agg = fedavg([trained for trained, _ in results], weights)
            suffix[key] = list(agg.params)
        # Average the shared prefix over every participant in the fleet.
        if parts:
            total = sum(c.n_k for c in parts)
            weights = [client_weight(c.n_k, total) for c in parts]
            stacked = [trained_by_id[c.client_id] for c in parts]
            for slot in range(prefix_slots):
                w = _weighted_sum([m.params[slot][0] for m in stacked], weights)
                b = _weighted_sum([m.params[slot][1] for m in stacked], weights)
                for key in suffix:
                    suffix[key][slot] = (w, b)
            for key in suffix:
                models[key] = ModelParams(key, tuple(suffix[key]))
        acc, loss = _cluster_metric(cluster_list, models, test_set)
        yield RoundMetrics(
            t,
            tuple(metrics[c.client_id] for c in parts),
            acc,
            loss,
            time.perf_counter() - started,
        )


def run_fedadp(
    clients: list[ClientState], hp: Hyperparams, test_set: Dataset
) -> list[RoundMetrics]:
    return list(fedadp_rounds(clients, hp, test_set))


def run_standalone(
    clients: list[ClientState], hp: Hyperparams, test_set: Dataset
) -> list[RoundMetrics]:
    return list(standalone_rounds(clients, hp, test_set))


def run_clustered_fl(
    clients: list[ClientState], hp: Hyperparams, test_set: Dataset
) -> list[RoundMetrics]:
    return list(clustered_rounds(clients, hp, test_set))


def run_flexifed(
    clients: list[ClientState], hp: Hyperparams, test_set: Dataset
) -> list[RoundMetrics]:
    return list(flexifed_rounds(clients, hp, test_set))


STRATEGIES = {
    "fedadp": fedadp_rounds,
    "standalone": standalone_rounds,
    "clustered_fl": clustered_rounds,
    "flexifed": flexifed_rounds,
}
