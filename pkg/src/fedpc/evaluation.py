"""Accuracy metrics, the communication ledger, and the metrics report.

Three metrics are tracked:

* metric (i): each client's current model on its own test split;
* metric (ii): zero-shot accuracy of client models on other clients' test
  splits (for server-based schemes, the global model on every client);
* metric (iii): accuracy on held-out test clients after ``k`` full-batch
  gradient steps on their train split, for ``k = 0..K``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import ClientDataset, Federation
from .errors import ConfigError, EvaluationError
from .numerics import LossConfig, ModelSpec, ParamVector, predict, total_loss_and_grad
from .rng import METRIC_PICK, make_rng
from .topology import Schedule

SCHEMA_VERSION = 1
BYTES_PER_SCALAR = 4
DEFAULT_PERSONALIZATION_LR = 1e-3


def accuracy(model: ParamVector, features, labels) -> float:
    y = np.asarray(labels).reshape(-1)
    if y.size == 0:
        raise EvaluationError("cannot compute accuracy on an empty set")
    return float(np.mean(predict(model, features) == y))


# -- metric (i) ---------------------------------------------------------------


@dataclass
class ClientObjective:
    per_client: dict[int, float]
    mean: float | None
    unvisited: list[int]


def metric_i(models: Mapping[int, ParamVector | None], federation: Federation) -> ClientObjective:
    """Each visited client's model on its own test split.

    ``models`` maps training client ids to their latest model, or ``None``
    for clients the schedule has not reached yet.
    """
    per_client = {}
    unvisited = []
    for cid in sorted(models):
        model = models[cid]
        if model is None:
            unvisited.append(cid)
            continue
        data = federation.clients[cid]
        per_client[cid] = accuracy(model, data.test_features, data.test_labels)
    mean = float(np.mean(list(per_client.values()))) if per_client else None
    return ClientObjective(per_client, mean, unvisited)


# -- metric (ii) --------------------------------------------------------------


@dataclass
class Generalization:
    mean: float | None
    pairs: dict[tuple[int, int], float] = field(default_factory=dict)
    same_vehicle: float | None = None
    cross_vehicle: float | None = None


def _vehicle_means(pairs, federation):
    same, cross = [], []
    for (src, dst), acc in pairs.items():
        v_src = federation.clients[src].vehicle_id
        v_dst = federation.clients[dst].vehicle_id
        (same if v_src == v_dst else cross).append(acc)
    return (float(np.mean(same)) if same else None, float(np.mean(cross)) if cross else None)


def metric_ii(
    models: Mapping[int, ParamVector | None],
    federation: Federation,
    mode: str = "all_pairs",
    rng: np.random.Generator | None = None,
) -> Generalization:
    """Cross-client accuracy among visited clients.

    ``all_pairs`` averages accuracy(model_c, test_c') over every ordered pair
    c != c'.  ``random`` picks one visited model with ``rng`` and averages its
    accuracy over the other visited clients.
    """
    visited = [c for c in sorted(models) if models[c] is not None]
    if mode == "random":
        if rng is None:
            raise ConfigError("random metric (ii) needs an rng")
        if not visited:
            return Generalization(None)
        sources = [visited[int(rng.integers(len(visited)))]]
    elif mode == "all_pairs":
        sources = visited
    else:
        raise ConfigError(f"unknown metric (ii) mode {mode!r}")

    pairs = {}
    for src in sources:
        for dst in visited:
            if dst == src:
                continue
            data = federation.clients[dst]
            pairs[(src, dst)] = accuracy(models[src], data.test_features, data.test_labels)
    if not pairs:
        return Generalization(None)
    same, cross = _vehicle_means(pairs, federation)
    return Generalization(float(np.mean(list(pairs.values()))), pairs, same, cross)


def global_generalization(model: ParamVector, federation: Federation) -> Generalization:
    """Server-based metric (ii): the global model on every training client."""
    accs = [accuracy(model, d.test_features, d.test_labels) for d in federation.training()]
    return Generalization(float(np.mean(accs)))


# -- metric (iii) -------------------------------------------------------------


@dataclass
class NewClientCurve:
    mean: list[float]
    per_client: dict[int, list[float]]


def personalization_curve(
    model: ParamVector, client: ClientDataset, steps: int, eta: float
) -> list[float]:
    if steps < 0:
        raise ConfigError(f"personalization steps must be >= 0, got {steps}")
    cfg = LossConfig(mu=0.0, weight_decay=0.0)
    batch = (client.train_features, client.train_labels)
    t = slice(model.frozen_len, None)
    curve = [accuracy(model, client.test_features, client.test_labels)]
    for _ in range(steps):
        _, grad = total_loss_and_grad(model, model, batch, cfg)
        values = model.values.copy()
        values[t] -= eta * grad[t]
        model = model.replace(values)
        curve.append(accuracy(model, client.test_features, client.test_labels))
    return curve


def metric_iii(
    start_models: Sequence[ParamVector],
    test_clients: Sequence[ClientDataset],
    steps: int,
    eta: float = DEFAULT_PERSONALIZATION_LR,
) -> NewClientCurve:
    """New-client accuracy after 0..K plain gradient-descent steps.

    When several starting models are given, each test client's curve is the
    average over them.
    """
    if steps < 0:
        raise ConfigError(f"personalization steps must be >= 0, got {steps}")
    if not start_models:
        raise EvaluationError("metric (iii) needs at least one starting model")
    per_client = {}
    for client in test_clients:
        curves = [personalization_curve(m, client, steps, eta) for m in start_models]
        per_client[client.client_id] = [float(v) for v in np.mean(curves, axis=0)]
    if per_client:
        mean = [float(v) for v in np.mean(list(per_client.values()), axis=0)]
    else:
        mean = []
    return NewClientCurve(mean, per_client)


# -- communication ledger -----------------------------------------------------


@dataclass(frozen=True)
class C2SRounds:
    rounds: int
    num_clients: int


@dataclass(frozen=True)
class NoCommunication:
    rounds: int


@dataclass(frozen=True)
class RoundTraffic:
    client_uplinks: int = 0
    server_downlinks: int = 0
    p2p_transfers: int = 0

    @property
    def models_sent(self) -> int:
        return self.client_uplinks + self.server_downlinks + self.p2p_transfers


@dataclass(frozen=True)
class CommLedger:
    rounds: tuple[RoundTraffic, ...]
    payload_bytes_per_model: int
    full_model_bytes: int

    def bytes_per_round(self) -> list[int]:
        return [r.models_sent * self.payload_bytes_per_model for r in self.rounds]

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_per_round())

    def totals(self) -> RoundTraffic:
        return RoundTraffic(
            sum(r.client_uplinks for r in self.rounds),
            sum(r.server_downlinks for r in self.rounds),
            sum(r.p2p_transfers for r in self.rounds),
        )

    def to_dict(self) -> dict:
        t = self.totals()
        return {
            "payload_bytes_per_model": self.payload_bytes_per_model,
            "full_model_bytes": self.full_model_bytes,
            "rounds": [asdict(r) for r in self.rounds],
            "bytes_per_round": self.bytes_per_round(),
            "totals": {**asdict(t), "bytes": self.total_bytes},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "client_uplinks", "server_downlinks", "p2p_transfers", "bytes"])
        for i, (r, b) in enumerate(zip(self.rounds, self.bytes_per_round())):
            w.writerow([i, r.client_uplinks, r.server_downlinks, r.p2p_transfers, b])
        return buf.getvalue()


def payload_bytes(spec: ModelSpec) -> int:
    """Bytes on the wire for one model: trainable scalars at 4 bytes each."""
    return BYTES_PER_SCALAR * spec.trainable_len


def build_ledger(source: Schedule | C2SRounds | NoCommunication, spec: ModelSpec) -> CommLedger:
    if isinstance(source, Schedule):
        rounds = tuple(RoundTraffic(p2p_transfers=len(evs)) for evs in source.by_round())
    elif isinstance(source, C2SRounds):
        traffic = RoundTraffic(client_uplinks=source.num_clients, server_downlinks=source.num_clients)
        rounds = (traffic,) * source.rounds
    elif isinstance(source, NoCommunication):
        rounds = (RoundTraffic(),) * source.rounds
    else:
        raise ConfigError(f"cannot build a ledger from {type(source).__name__}")
    return CommLedger(rounds, payload_bytes(spec), BYTES_PER_SCALAR * spec.num_params)


# -- report -------------------------------------------------------------------


@dataclass
class RoundMetrics:
    round: int
    metric_i: ClientObjective
    metric_ii: Generalization
    unvisited_count: int

    def to_dict(self) -> dict:
        g = self.metric_ii
        return {
            "round": self.round,
            "metric_i": {
                "mean": self.metric_i.mean,
                "per_client": {str(k): v for k, v in self.metric_i.per_client.items()},
            },
            "metric_ii": {
                "mean": g.mean,
                "same_vehicle": g.same_vehicle,
                "cross_vehicle": g.cross_vehicle,
                "pairs": {f"{a}->{b}": v for (a, b), v in g.pairs.items()},
            },
            "unvisited_count": self.unvisited_count,
        }


def evaluate_round(
    round: int,
    models: Mapping[int, ParamVector | None],
    federation: Federation,
    global_model: ParamVector | None = None,
    mode: str = "all_pairs",
    seed: int = 0,
) -> RoundMetrics:
    obj = metric_i(models, federation)
    if global_model is not None:
        gen = global_generalization(global_model, federation)
    else:
        gen = metric_ii(models, federation, mode, make_rng(seed, METRIC_PICK, round))
    return RoundMetrics(round, obj, gen, len(obj.unvisited))


@dataclass
class MetricsReport:
    algorithm: str
    rounds: list[RoundMetrics]
    metric_iii: NewClientCurve
    ledger: CommLedger
    training_clients: list[int]
    test_clients: list[int]
    schema_version: int = SCHEMA_VERSION

    def metric_i_means(self) -> list[float | None]:
        return [r.metric_i.mean for r in self.rounds]

    def metric_ii_means(self) -> list[float | None]:
        return [r.metric_ii.mean for r in self.rounds]

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "algorithm": self.algorithm,
            "training_clients": list(self.training_clients),
            "test_clients": list(self.test_clients),
            "rounds": [r.to_dict() for r in self.rounds],
            "metric_iii": {
                "mean": self.metric_iii.mean,
                "per_client": {str(k): v for k, v in self.metric_iii.per_client.items()},
            },
            "ledger": self.ledger.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Per-round table of metric (i) and (ii) means."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "metric_i_mean", "metric_ii_mean", "unvisited_count", "bytes"])
        for r, b in zip(self.rounds, self.ledger.bytes_per_round()):
            w.writerow([r.round, _fmt(r.metric_i.mean), _fmt(r.metric_ii.mean), r.unvisited_count, b])
        return buf.getvalue()


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))
