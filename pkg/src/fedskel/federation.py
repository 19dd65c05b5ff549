"""Client-server collaborative rounds: local training, aggregation, broadcast.

Each round every client trains locally from the current server snapshot, then
uploads its aggregatable parameters (private topology, coefficients, and the
classifier never leave the client). The server computes a sample-weighted
mean in ascending client-id order, optionally smoothed by server-side
momentum, and broadcasts the result back.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import ClientData, ClientDatasetSpec, generate, make_federation_suite
from .errors import ConfigError, ProtocolError, TrainingAborted
from .metrics import EvalResult, knn_accuracy, linear_accuracy
from .mkd import MkdConfig, build_teacher_streams, dual_ce_loss, kd_loss
from .model import (
    ModelConfig,
    Params,
    aggregatable_keys,
    clone_params,
    forward,
    init_classifier,
    init_private_topology,
    init_shared_backbone,
    is_bn_key,
    is_unique_key,
    trainable_params,
)
from .tensor import SgdMomentum, Tensor, add, backward, scale, sq_diff_sum
from .topology import PartitionedAdjacency, SkeletonGraph, build_partitions

Array = np.ndarray

STRATEGY_KINDS = ("fedavg", "fedprox", "fedbn", "fsar")


@dataclass(frozen=True)
class AggregationStrategy:
    kind: str
    mu: float = 0.0
    server_momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown aggregation strategy '{self.kind}'")
        if self.mu < 0:
            raise ConfigError(f"fedprox mu must be nonnegative, got {self.mu}")
        if not 0.0 <= self.server_momentum < 1.0:
            raise ConfigError(
                f"server momentum must be in [0, 1), got {self.server_momentum}"
            )


@dataclass(frozen=True)
class LocalHyper:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    local_epochs: int = 1
    batch_size: int = 16
    lambda_ce: float = 1.0
    lambda_kd: float = 1.0
    lambda_reg: float = 0.1
    grain_count: int = 2
    kd_temperature: float = 1.0


class ClientState:
    """One simulated client: private data, full local model, optimizer."""

    def __init__(
        self,
        client_id: int,
        spec: ClientDatasetSpec,
        data: ClientData,
        params: Params,
        hyper: LocalHyper,
        shuffle_rng: np.random.Generator,
    ):
        self.id = client_id
        self.spec = spec
        self.data = data
        self.params = params
        self.optimizer = SgdMomentum(hyper.lr, hyper.momentum, hyper.weight_decay)
        self.rng = shuffle_rng
        self.labels = tuple(sorted(spec.labels))
        self.n_samples = int(data.train_x.shape[0])
        self.train_local_y = self.to_local(data.train_y)
        self.test_local_y = self.to_local(data.test_y)

    def to_local(self, global_labels: Array) -> Array:
        return np.searchsorted(np.asarray(self.labels), np.asarray(global_labels))

    def upload_payload(self) -> dict[str, Array]:
        return {k: self.params[k].data.copy() for k in aggregatable_keys(self.params)}


@dataclass
class ServerState:
    params: Params
    momentum: dict[str, Array] = field(default_factory=dict)
    round: int = 0


@dataclass
class RoundReport:
    round: int
    client_losses: dict[int, dict[str, float]]
    client_accuracy: dict[int, float] | None
    wall_time: float


# ---------------------------------------------------------------------------
# Local training
# ---------------------------------------------------------------------------

def _effective_loss_plan(strategy: AggregationStrategy, hyper: LocalHyper):
    """(lambda_ce, lambda_kd, lambda_reg, grain_count) for a strategy."""
    if strategy.kind == "fsar":
        return hyper.lambda_ce, hyper.lambda_kd, hyper.lambda_reg, hyper.grain_count
    if strategy.kind == "fedprox":
        return hyper.lambda_ce, 0.0, strategy.mu, 0
    return hyper.lambda_ce, 0.0, 0.0, 0


def local_train(
    client: ClientState,
    server: ServerState,
    cfg: ModelConfig,
    parts: PartitionedAdjacency,
    strategy: AggregationStrategy,
    hyper: LocalHyper,
) -> dict[str, float]:
    """K local epochs of SGD on the client's combined loss.

    Returns batch-averaged loss components (ce, kd, reg, total).
    """
    lam_ce, lam_kd, lam_reg, grains = _effective_loss_plan(strategy, hyper)
    mkd_cfg = MkdConfig(grain_count=grains, kd_temperature=hyper.kd_temperature)
    trainable = trainable_params(client.params)
    reg_keys = [k for k in aggregatable_keys(client.params) if client.params[k].requires_grad]
    # Reference values are frozen copies: uploads later in the round must not
    # see them, and the pull target is the snapshot the round started from.
    reg_targets = {k: server.params[k].data.copy() for k in reg_keys} if lam_reg else {}

    totals = {"ce": 0.0, "kd": 0.0, "reg": 0.0, "total": 0.0}
    batches = 0
    n = client.n_samples
    for _ in range(hyper.local_epochs):
        order = client.rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            if idx.size < 2:
                continue  # a single sample cannot be batch-normalized
            x = Tensor(client.data.train_x[idx])
            y = client.train_local_y[idx]

            trace = forward(client.params, cfg, parts, x, training=True, update_stats=True)
            streams = (
                build_teacher_streams(server.params, client.params, cfg, parts, x, mkd_cfg)
                if grains > 0
                else []
            )
            ce = dual_ce_loss(streams, trace.logits, y)
            _abort_if_not_finite("CE", ce, server.round)
            loss = scale(ce, lam_ce)
            kd_value = 0.0
            if streams and lam_kd:
                kd = kd_loss(streams, trace.logits, hyper.kd_temperature)
                _abort_if_not_finite("KD", kd, server.round)
                kd_value = kd.item()
                loss = add(loss, scale(kd, lam_kd))
            reg_value = 0.0
            if lam_reg:
                reg = _proximal_loss(client.params, reg_keys, reg_targets)
                _abort_if_not_finite("Reg", reg, server.round)
                reg_value = reg.item()
                loss = add(loss, scale(reg, lam_reg))

            backward(loss)
            client.optimizer.step(trainable)

            totals["ce"] += ce.item()
            totals["kd"] += kd_value
            totals["reg"] += reg_value
            totals["total"] += loss.item()
            batches += 1
    if batches:
        for k in totals:
            totals[k] /= batches
    return totals


def _proximal_loss(params: Params, keys: list[str], targets: dict[str, Array]) -> Tensor:
    total: Tensor | None = None
    for k in keys:
        term = sq_diff_sum(params[k], targets[k])
        total = term if total is None else add(total, term)
    assert total is not None
    return total


def _abort_if_not_finite(component: str, value: Tensor, round_idx: int) -> None:
    if not np.isfinite(value.data).all():
        raise TrainingAborted(component, round_idx)


# ---------------------------------------------------------------------------
# Aggregation and broadcast
# ---------------------------------------------------------------------------

def aggregate(
    server: ServerState,
    uploads: list[tuple[int, dict[str, Array], int]],
    strategy: AggregationStrategy,
) -> ServerState:
    """Sample-weighted mean of uploads, in ascending client-id order.

    With server momentum b > 0 the recursion is v <- b*v + (W_g - W_agg),
    W_g <- W_g - v; with b = 0 the server takes the weighted mean directly.
    """
    if not uploads:
        raise ProtocolError("aggregate called with no uploads")
    uploads = sorted(uploads, key=lambda u: u[0])
    server_keys = set(server.params)
    for cid, payload, n_i in uploads:
        bad = [k for k in payload if is_unique_key(k)]
        if bad:
            raise ProtocolError(
                f"client {cid} uploaded private-topology keys: {sorted(bad)}"
            )
        missing = sorted(server_keys - set(payload))
        extra = sorted(set(payload) - server_keys)
        if missing or extra:
            raise ProtocolError(
                f"client {cid} key-set mismatch: missing={missing}, extra={extra}"
            )
        if n_i <= 0:
            raise ProtocolError(f"client {cid} reports nonpositive sample count {n_i}")

    n_total = sum(n_i for _, _, n_i in uploads)
    weights = [np.float32(n_i / n_total) for _, _, n_i in uploads]
    beta = strategy.server_momentum
    for key, tensor in server.params.items():
        if strategy.kind == "fedbn" and is_bn_key(key):
            continue  # clients keep their own normalization state
        agg = weights[0] * uploads[0][1][key]
        for w, (_, payload, _) in zip(weights[1:], uploads[1:]):
            agg = agg + w * payload[key]
        # Running statistics are averaged, never momentum-extrapolated:
        # overshooting a variance estimate below zero would poison eval mode.
        is_stat = key.endswith((".running_mean", ".running_var"))
        if beta > 0.0 and not is_stat:
            v = server.momentum.get(key)
            if v is None:
                v = np.zeros_like(tensor.data)
                server.momentum[key] = v
            v *= np.float32(beta)
            v += tensor.data - agg
            tensor.data = tensor.data - v
        else:
            tensor.data = agg.astype(np.float32, copy=False)
    server.round += 1
    return server


def broadcast(
    server: ServerState, clients: list[ClientState], strategy: AggregationStrategy
) -> None:
    """Overwrite every client's aggregatable parameters with server values.

    Private topology, coefficients, the classifier, and (under fedbn) the
    batch-norm state stay untouched.
    """
    for key, tensor in server.params.items():
        if strategy.kind == "fedbn" and is_bn_key(key):
            continue
        for client in clients:
            np.copyto(client.params[key].data, tensor.data)


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------

RoundHook = Callable[[str, int, ServerState, list["ClientState"]], None]


@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    server: ServerState
    clients: list[ClientState]
    final_local_params: list[Params]  # post local-training state of the last round
    coeff_log: list[tuple[int, int, int, float, float, float]]
    unseen: EvalResult | None
    cfg: ModelConfig
    parts: PartitionedAdjacency
    specs: list[ClientDatasetSpec]


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


@dataclass
class Experiment:
    cfg: ModelConfig
    parts: PartitionedAdjacency
    strategy: AggregationStrategy
    hyper: LocalHyper
    server: ServerState
    clients: list[ClientState]
    specs: list[ClientDatasetSpec]
    unseen_spec: ClientDatasetSpec | None
    unseen_data: ClientData | None
    rounds: int
    eval_interval: int
    knn_k: int
    jobs: int


def build_experiment(config) -> Experiment:
    """Assemble server, clients, and datasets from an ExperimentConfig."""
    from .config import ExperimentConfig  # local import to avoid a cycle

    assert isinstance(config, ExperimentConfig)
    graph = config.skeleton_graph()
    parts = build_partitions(graph)
    strategy = config.resolve_strategy()
    cfg = config.model_config()
    hyper = config.local_hyper()

    specs = make_federation_suite(
        config.federation.n_clients,
        config.data.profile,
        config.seed,
        graph=graph,
        base_samples=config.data.base_samples,
        classes_per_client=config.data.classes_per_client,
        sigma=config.data.sigma,
        rewire_edges=config.data.rewire_edges,
        frames=config.data.frames,
        include_unseen=config.eval.unseen,
    )
    unseen_spec = specs[config.federation.n_clients] if config.eval.unseen else None
    train_specs = specs[: config.federation.n_clients]

    master_rng = _rng(config.seed, 201)
    shared = init_shared_backbone(cfg, parts, master_rng)
    server = ServerState(params=clone_params(shared, requires_grad=False))

    clients = []
    for spec in train_specs:
        params = clone_params(shared)
        params.update(init_private_topology(cfg, _rng(config.seed, 202, spec.client_id)))
        params.update(init_classifier(cfg, _rng(config.seed, 203, spec.client_id)))
        clients.append(
            ClientState(
                client_id=spec.client_id,
                spec=spec,
                data=generate(spec),
                params=params,
                hyper=hyper,
                shuffle_rng=_rng(config.seed, 204, spec.client_id),
            )
        )
    unseen_data = generate(unseen_spec) if unseen_spec is not None else None
    return Experiment(
        cfg=cfg,
        parts=parts,
        strategy=strategy,
        hyper=hyper,
        server=server,
        clients=clients,
        specs=train_specs,
        unseen_spec=unseen_spec,
        unseen_data=unseen_data,
        rounds=config.federation.rounds,
        eval_interval=config.eval.eval_interval,
        knn_k=config.eval.knn_k,
        jobs=config.federation.jobs,
    )


def _evaluate_clients(exp: Experiment, round_idx: int) -> dict[int, float]:
    accs = {}
    for client in exp.clients:
        result = linear_accuracy(
            exp.server.params,
            client.params,
            exp.cfg,
            exp.parts,
            client.data.test_x,
            client.test_local_y,
            client=str(client.id),
            round_idx=round_idx,
            calibration_x=client.data.train_x,
        )
        accs[client.id] = result.accuracy
    return accs


def _log_coefficients(exp: Experiment, round_idx: int, log: list) -> None:
    if exp.cfg.conv_mode != "ats":
        return
    for client in exp.clients:
        for b in range(exp.cfg.num_blocks):
            log.append(
                (
                    round_idx,
                    client.id,
                    b,
                    client.params[f"blocks.{b}.ternary.alpha"].data.item(),
                    client.params[f"blocks.{b}.ternary.beta"].data.item(),
                    client.params[f"blocks.{b}.ternary.gamma"].data.item(),
                )
            )


def run_experiment(
    config,
    hooks: RoundHook | None = None,
    on_report: Callable[[RoundReport], None] | None = None,
    experiment: Experiment | None = None,
) -> ExperimentResult:
    """Execute R rounds of local training, aggregation, and broadcast.

    `hooks(stage, round, server, clients)` fires at "post_local",
    "post_aggregate", and "post_broadcast" of every round.
    """
    exp = experiment if experiment is not None else build_experiment(config)
    reports: list[RoundReport] = []
    coeff_log: list[tuple[int, int, int, float, float, float]] = []
    final_local_params: list[Params] = []
    _log_coefficients(exp, -1, coeff_log)

    def train_one(client: ClientState) -> dict[str, float]:
        return local_train(client, exp.server, exp.cfg, exp.parts, exp.strategy, exp.hyper)

    for r in range(exp.rounds):
        started = time.perf_counter()
        if exp.jobs > 1:
            with ThreadPoolExecutor(max_workers=exp.jobs) as pool:
                losses = list(pool.map(train_one, exp.clients))
        else:
            losses = [train_one(c) for c in exp.clients]
        client_losses = {c.id: l for c, l in zip(exp.clients, losses)}

        if hooks:
            hooks("post_local", r, exp.server, exp.clients)
        if r == exp.rounds - 1:
            final_local_params = [clone_params(c.params) for c in exp.clients]

        uploads = [(c.id, c.upload_payload(), c.n_samples) for c in exp.clients]
        aggregate(exp.server, uploads, exp.strategy)
        if hooks:
            hooks("post_aggregate", r, exp.server, exp.clients)
        broadcast(exp.server, exp.clients, exp.strategy)
        if hooks:
            hooks("post_broadcast", r, exp.server, exp.clients)

        accs = None
        if (r + 1) % exp.eval_interval == 0 or r == exp.rounds - 1:
            accs = _evaluate_clients(exp, r)
            _log_coefficients(exp, r, coeff_log)
        report = RoundReport(
            round=r,
            client_losses=client_losses,
            client_accuracy=accs,
            wall_time=time.perf_counter() - started,
        )
        reports.append(report)
        if on_report:
            on_report(report)

    unseen_result = None
    if exp.unseen_data is not None:
        unseen_result = knn_accuracy(
            exp.server.params,
            exp.cfg,
            exp.parts,
            exp.unseen_data.train_x,
            exp.unseen_data.train_y,
            exp.unseen_data.test_x,
            exp.unseen_data.test_y,
            k=exp.knn_k,
            round_idx=exp.rounds - 1,
        )
    return ExperimentResult(
        reports=reports,
        server=exp.server,
        clients=exp.clients,
        final_local_params=final_local_params,
        coeff_log=coeff_log,
        unseen=unseen_result,
        cfg=exp.cfg,
        parts=exp.parts,
        specs=exp.specs,
    )
