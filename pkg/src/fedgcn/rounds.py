"""Synchronous communication rounds.

The server side of a round only ever sees :class:`~fedgcn.fed.ClientUpdate`
objects (parameters, sample counts, losses). Everything that touches raw
samples, including teacher inference, runs inside ``Federation._client_work``.
"""

from __future__ import annotations

import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import (
    ClusterState,
    aggregate_students,
    domain_weights_train,
    init_cluster_state,
    student_local_update,
    sync_teacher,
)
from .errors import ConfigError
from .fed import (
    ClientDataset,
    ClientUpdate,
    RoundConfig,
    client_local_update,
    derive_rng,
    fedavg_aggregate,
    sample_clients,
)
from .graph import GraphModel, initial_adjacency, refresh_graph
from .nn import LayeredModel
from .params import ParamVector


@dataclass(frozen=True)
class ServerState:
    round: int
    theta: ParamVector
    cluster: ClusterState | None = None
    initial_adjacency: np.ndarray | None = None


@dataclass(frozen=True)
class RoundReport:
    round: int
    participants: tuple[str, ...]
    train_loss: float
    client_losses: tuple[float, ...]
    student_loss: float | None = None
    adjacency: np.ndarray | None = None
    lambdas: dict = field(default_factory=dict)


@dataclass
class Federation:
    """Static setup of a simulation: models, schedules and the master seed.

    ``classifier`` is ``None`` for plain FedAvg; otherwise ``model`` must be
    a :class:`GraphModel` with the same domain count as the classifier.
    """

    model: LayeredModel | GraphModel
    cfg: RoundConfig
    seed: int = 0
    classifier: LayeredModel | None = None
    student_lr: float = 1e-4
    teacher_period: int = 10
    identical_init: bool = True
    beta: float = 0.5
    eps_dist: float = 1e-8
    workers: int = 1

    def __post_init__(self):
        graph = isinstance(self.model, GraphModel)
        if graph != (self.classifier is not None):
            raise ConfigError("a GraphModel needs a domain classifier and vice versa")
        if graph and self.classifier.num_outputs != self.model.num_domains:
            raise ConfigError("classifier output size must equal the number of domains")

    @property
    def is_graph(self) -> bool:
        return self.classifier is not None

    def init_state(self) -> ServerState:
        model_rng = derive_rng(self.seed, "init-model")
        if not self.is_graph:
            return ServerState(0, self.model.init_params(model_rng))
        theta = self.model.init_params(model_rng, derive_rng(self.seed, "init-graph"))
        cluster = init_cluster_state(
            self.classifier, derive_rng(self.seed, "init-classifier"), self.teacher_period, self.identical_init
        )
        A0 = initial_adjacency(
            self.model.plan.adjacency_init, self.model.num_domains, self.beta, derive_rng(self.seed, "init-adjacency")
        )
        return ServerState(0, theta, cluster, A0)

    def adjacency(self, state: ServerState) -> np.ndarray | None:
        """Adjacency sent to clients in the round that starts from ``state``."""
        if not self.is_graph:
            return None
        return refresh_graph(state.theta, self.model, state.round, state.initial_adjacency, self.beta, self.eps_dist)

    # -- client side ---------------------------------------------------------

    def _client_work(self, state: ServerState, A, client: ClientDataset):
        r = state.round
        main_rng = derive_rng(self.seed, "local", r, client.client_id)
        if not self.is_graph:
            return client_local_update(self.model, state.theta, client, self.cfg, main_rng), None
        teacher = state.cluster.teacher
        weights = domain_weights_train(self.classifier, teacher, client.x)
        labels = np.argmax(weights, axis=1)
        upd = client_local_update(self.model, state.theta, client, self.cfg, main_rng, weights=weights, adjacency=A)
        stu = student_local_update(
            self.classifier, state.cluster.student, teacher, client, self.student_lr,
            derive_rng(self.seed, "student", r, client.client_id),
            epochs=self.cfg.local_epochs, batch_size=self.cfg.batch_size, labels=labels,
        )
        return upd, stu

    # -- server side ---------------------------------------------------------

    def run_round(self, state: ServerState, clients: Sequence[ClientDataset]) -> tuple[ServerState, RoundReport]:
        """One broadcast / local-train / aggregate cycle.

        Any client failure propagates and leaves ``state`` untouched.
        """
        self.cfg.validate_for(len(clients))
        by_id = {c.client_id: c for c in clients}
        chosen = sample_clients(list(by_id), self.cfg.clients_per_round, derive_rng(self.seed, "sample", state.round))
        A = self.adjacency(state)
        work = lambda cid: self._client_work(state, A, by_id[cid])  # noqa: E731
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(work, chosen))
        else:
            results = [work(cid) for cid in chosen]
        return aggregate_round(self, state, [u for u, _ in results], [s for _, s in results], A)


def aggregate_round(
    fed: Federation,
    state: ServerState,
    updates: Sequence[ClientUpdate],
    student_updates: Sequence[ClientUpdate | None],
    adjacency: np.ndarray | None,
) -> tuple[ServerState, RoundReport]:
    theta = fedavg_aggregate(updates)
    cluster = state.cluster
    student_loss = None
    if cluster is not None:
        cluster = sync_teacher(replace(cluster, student=aggregate_students(student_updates)))
        student_loss = _weighted_loss(student_updates)
    report = RoundReport(
        round=state.round + 1,
        participants=tuple(u.client_id for u in updates),
        train_loss=_weighted_loss(updates),
        client_losses=tuple(u.local_loss for u in updates),
        student_loss=student_loss,
        adjacency=None if adjacency is None else adjacency.copy(),
        lambdas=fed.model.lambdas(theta) if fed.is_graph else {},
    )
    return ServerState(state.round + 1, theta, cluster, state.initial_adjacency), report


def _weighted_loss(updates: Sequence[ClientUpdate]) -> float:
    n = sum(u.n_k for u in updates)
    return float(sum(u.n_k * u.local_loss for u in updates) / n)


# Server-side entry points; none of them may accept client samples.
SERVER_API = (fedavg_aggregate, aggregate_students, aggregate_round, sync_teacher, refresh_graph, initial_adjacency)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, state: ServerState, fed: Federation) -> Path:
    """Write theta, student, teacher, adjacency, lambdas and the round index
    into one ``.npz`` file. Parameter vectors use the ParamVector wire format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "round": np.array(state.round),
        "theta": np.frombuffer(state.theta.to_bytes(), dtype=np.uint8),
    }
    meta = {"round": state.round}
    if state.cluster is not None:
        c = state.cluster
        arrays["student"] = np.frombuffer(c.student.to_bytes(), dtype=np.uint8)
        arrays["teacher"] = np.frombuffer(c.teacher.to_bytes(), dtype=np.uint8)
        arrays["initial_adjacency"] = state.initial_adjacency
        arrays["adjacency"] = fed.adjacency(state)
        meta.update(
            num_domains=c.num_domains, period=c.period, rounds_since_sync=c.rounds_since_sync,
            lambdas={str(k): v for k, v in fed.model.lambdas(state.theta).items()},
        )
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path, fed: Federation) -> ServerState:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        theta = ParamVector.from_bytes(bytes(data["theta"]), fed.model.layout)
        if "student" not in data:
            return ServerState(meta["round"], theta)
        layout = fed.classifier.layout
        cluster = ClusterState(
            teacher=ParamVector.from_bytes(bytes(data["teacher"]), layout),
            student=ParamVector.from_bytes(bytes(data["student"]), layout),
            num_domains=meta["num_domains"],
            period=meta["period"],
            rounds_since_sync=meta["rounds_since_sync"],
        )
        return ServerState(meta["round"], theta, cluster, np.array(data["initial_adjacency"]))
