"""FedPC and its baselines: ring/line P2P, independent learning, FedAvg, FedProx.

All schemes share the same seeded initial model and the same local-training
routine; they differ only in who trains when and where the starting model
of each local session comes from.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    ClientDataset,
    Federation,
    FederationConfig,
    federation_from_datasets,
    generate_federation,
    ingest_feature_table,
)
from .errors import AggregationError, ConfigError
from .evaluation import (
    DEFAULT_PERSONALIZATION_LR,
    C2SRounds,
    CommLedger,
    MetricsReport,
    NoCommunication,
    RoundMetrics,
    build_ledger,
    evaluate_round,
    metric_iii,
)
from .numerics import (
    AdamState,
    LearningSchedule,
    LossConfig,
    ModelSpec,
    ParamVector,
    adam_step,
    initial_model,
    learning_rate,
    total_loss_and_grad,
)
from .rng import SHUFFLE, make_rng
from .topology import SOURCE, Schedule, gossip_schedule, line_schedule, ring_schedule

ALGORITHMS = ("fedpc", "ring", "line", "independent", "fedavg", "fedprox")
UNVISITED = None


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "fedpc"
    rounds: int = 5
    local_epochs: int = 5
    batch_size: int = 128
    loss: LossConfig = field(default_factory=LossConfig)
    lr: LearningSchedule = field(default_factory=LearningSchedule)
    model: ModelSpec = field(default_factory=lambda: ModelSpec((16, 32, 32, 4), 1))
    federation: FederationConfig | str = field(default_factory=FederationConfig)
    seed: int = 0
    personalization_steps: int = 5
    personalization_lr: float = DEFAULT_PERSONALIZATION_LR
    pretrain: bool = True
    metric_ii_mode: str = "all_pairs"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        for name in ("rounds", "local_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.algorithm == "line" and self.rounds != 1:
            raise ConfigError("the line topology runs exactly one round; set rounds: 1")
        if self.personalization_steps < 0:
            raise ConfigError("personalization_steps must be >= 0")
        if not self.personalization_lr > 0:
            raise ConfigError("personalization_lr must be > 0")
        if self.metric_ii_mode not in ("all_pairs", "random"):
            raise ConfigError(f"unknown metric_ii_mode {self.metric_ii_mode!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if isinstance(self.federation, FederationConfig):
            if self.model.layer_sizes[0] != self.federation.feature_dim:
                raise ConfigError(
                    f"model input size {self.model.layer_sizes[0]} != "
                    f"feature_dim {self.federation.feature_dim}"
                )
            if self.model.num_classes != self.federation.classes:
                raise ConfigError(
                    f"model output size {self.model.num_classes} != classes {self.federation.classes}"
                )


@dataclass(frozen=True)
class ClientState:
    """A client's model right after one local training session."""

    client_id: int
    model: ParamVector
    sender: int
    round: int
    step: int


@dataclass
class RunResult:
    config: RunConfig
    federation: Federation
    initial: ParamVector
    report: MetricsReport
    models: dict[int, ParamVector | None]
    history: list[ClientState] = field(default_factory=list)
    global_models: list[ParamVector] = field(default_factory=list)
    schedule: Schedule | None = None

    @property
    def ledger(self) -> CommLedger:
        return self.report.ledger

    @property
    def unvisited(self) -> list[int]:
        return [c for c, m in self.models.items() if m is None]


def load_federation(cfg: RunConfig) -> Federation:
    if isinstance(cfg.federation, FederationConfig):
        return generate_federation(cfg.federation)
    return federation_from_datasets(ingest_feature_table(Path(cfg.federation)), cfg.seed)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train_local(
    model: ParamVector,
    anchor: ParamVector,
    data: ClientDataset,
    epochs: int,
    batch_size: int,
    eta: float,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
    losses: list[float] | None = None,
) -> ParamVector:
    """One local session: ``epochs`` shuffled minibatch passes with a fresh Adam."""
    if data.n_train == 0:
        raise ConfigError(f"client {data.client_id} has an empty train split")
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    x, y = data.train_features, data.train_labels
    state = AdamState.fresh(len(model))
    for _ in range(epochs):
        order = rng.permutation(data.n_train)
        for start in range(0, data.n_train, batch_size):
            idx = order[start:start + batch_size]
            loss, grad = total_loss_and_grad(model, anchor, (x[idx], y[idx]), loss_cfg)
            model, state = adam_step(model, grad, state, eta)
            if losses is not None:
                losses.append(loss)
    return model


def _finish(cfg, fed, w0, rounds, eval_models, ledger, models, **extra) -> RunResult:
    curve = metric_iii(eval_models, fed.testing(), cfg.personalization_steps, cfg.personalization_lr)
    report = MetricsReport(
        cfg.algorithm, rounds, curve, ledger,
        list(fed.split.training_clients), list(fed.split.test_clients),
    )
    return RunResult(cfg, fed, w0, report, models, **extra)


def run_chain(cfg: RunConfig, schedule: Schedule, federation: Federation | None = None) -> RunResult:
    """Pass one model along ``schedule``, fine-tuning it at every receiver."""
    fed = federation or load_federation(cfg)
    w0 = initial_model(cfg.model, cfg.seed, cfg.pretrain)
    models: dict[int, ParamVector | None] = dict.fromkeys(fed.split.training_clients, UNVISITED)
    history: list[ClientState] = []
    rounds: list[RoundMetrics] = []
    token = w0
    # The proximal term starts at the second event; the first anchors to w0 with mu = 0.
    first_cfg = replace(cfg.loss, mu=0.0)
    for t, events in enumerate(schedule.by_round()):
        eta = learning_rate(cfg.lr, t)
        for ev in events:
            anchor = token
            loss_cfg = first_cfg if ev.sender == SOURCE else cfg.loss
            rng = make_rng(cfg.seed, SHUFFLE, ev.round, ev.step, ev.receiver)
            token = train_local(
                anchor, anchor, fed.clients[ev.receiver],
                cfg.local_epochs, cfg.batch_size, eta, loss_cfg, rng,
            )
            models[ev.receiver] = token
            history.append(ClientState(ev.receiver, token, ev.sender, ev.round, ev.step))
        rounds.append(evaluate_round(t, models, fed, mode=cfg.metric_ii_mode, seed=cfg.seed))
    ledger = build_ledger(schedule, cfg.model)
    return _finish(cfg, fed, w0, rounds, [token], ledger, models,
                   history=history, schedule=schedule)


def _training_ids(fed: Federation) -> list[int]:
    return list(fed.split.training_clients)


def run_fedpc(cfg: RunConfig, federation: Federation | None = None) -> RunResult:
    fed = federation or load_federation(cfg)
    return run_chain(cfg, gossip_schedule(_training_ids(fed), cfg.rounds, cfg.seed), fed)


def run_ring(cfg: RunConfig, federation: Federation | None = None) -> RunResult:
    fed = federation or load_federation(cfg)
    return run_chain(cfg, ring_schedule(_training_ids(fed), cfg.rounds), fed)


def run_line(cfg: RunConfig, federation: Federation | None = None) -> RunResult:
    fed = federation or load_federation(cfg)
    return run_chain(cfg, line_schedule(_training_ids(fed)), fed)


def run_independent(cfg: RunConfig, federation: Federation | None = None) -> RunResult:
    """Every training client fine-tunes its own copy of the initial model."""
    fed = federation or load_federation(cfg)
    w0 = initial_model(cfg.model, cfg.seed, cfg.pretrain)
    loss_cfg = replace(cfg.loss, mu=0.0)
    models: dict[int, ParamVector | None] = {c: w0 for c in fed.split.training_clients}
    history: list[ClientState] = []
    rounds = []
    for t in range(cfg.rounds):
        eta = learning_rate(cfg.lr, t)
        for cid in fed.split.training_clients:
            rng = make_rng(cfg.seed, SHUFFLE, t, 0, cid)
            models[cid] = train_local(
                models[cid], w0, fed.clients[cid],
                cfg.local_epochs, cfg.batch_size, eta, loss_cfg, rng,
            )
            history.append(ClientState(cid, models[cid], cid, t, 0))
        rounds.append(evaluate_round(t, models, fed, mode=cfg.metric_ii_mode, seed=cfg.seed))
    ledger = build_ledger(NoCommunication(cfg.rounds), cfg.model)
    eval_models = [models[c] for c in fed.split.training_clients]
    return _finish(cfg, fed, w0, rounds, eval_models, ledger, models, history=history)


def fedavg_aggregate(models: list[ParamVector], weights: list[float] | None = None) -> ParamVector:
    """Weighted component-wise mean; components on which all models agree are copied exactly."""
    if not models:
        raise AggregationError("nothing to aggregate")
    spec = models[0].spec
    if any(m.spec != spec for m in models):
        raise AggregationError("models have different specs or lengths")
    w = np.ones(len(models)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(models),):
        raise AggregationError(f"{len(models)} models but {w.size} weights")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise AggregationError("weights must be finite and non-negative")
    if w.sum() <= 0:
        raise AggregationError("weights sum to zero")
    stack = np.stack([m.values for m in models])
    mean = (w / w.sum()) @ stack
    agree = np.all(stack == stack[0], axis=0)
    mean[agree] = stack[0, agree]
    return ParamVector(mean, spec)


def run_server(cfg: RunConfig, mu: float, federation: Federation | None = None) -> RunResult:
    """FedAvg-style rounds: broadcast, local training, sample-weighted averaging."""
    fed = federation or load_federation(cfg)
    w0 = initial_model(cfg.model, cfg.seed, cfg.pretrain)
    loss_cfg = replace(cfg.loss, mu=mu)
    clients = fed.training()
    weights = [c.n_train for c in clients]
    global_model = w0
    global_models = []
    history: list[ClientState] = []
    rounds = []
    for t in range(cfg.rounds):
        eta = learning_rate(cfg.lr, t)
        local = []
        for c in clients:
            rng = make_rng(cfg.seed, SHUFFLE, t, 0, c.client_id)
            m = train_local(
                global_model, global_model, c,
                cfg.local_epochs, cfg.batch_size, eta, loss_cfg, rng,
            )
            local.append(m)
            history.append(ClientState(c.client_id, m, SOURCE, t, 0))
        global_model = fedavg_aggregate(local, weights)
        global_models.append(global_model)
        models = {c.client_id: global_model for c in clients}
        rounds.append(evaluate_round(t, models, fed, global_model=global_model))
    ledger = build_ledger(C2SRounds(cfg.rounds, len(clients)), cfg.model)
    return _finish(cfg, fed, w0, rounds, [global_model], ledger, models,
                   history=history, global_models=global_models)


def run_fedavg(cfg: RunConfig, federation: Federation | None = None) -> RunResult:
    return run_server(cfg, 0.0, federation)


def run_fedprox(cfg: RunConfig, federation: Federation | None = None) -> RunResult:
    return run_server(cfg, cfg.loss.mu, federation)


RUNNERS = {
    "fedpc": run_fedpc,
    "ring": run_ring,
    "line": run_line,
    "independent": run_independent,
    "fedavg": run_fedavg,
    "fedprox": run_fedprox,
}


def run(cfg: RunConfig, federation: Federation | None = None) -> RunResult:
    return RUNNERS[cfg.algorithm](cfg, federation)
