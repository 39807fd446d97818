"""Client-side training and FedAvg aggregation."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AggregationError, ConfigError, DataError, LayoutError
from .params import ParamVector


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """Labeled samples held by one client. Arrays are made read-only."""

    client_id: str
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64)
        if y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DataError(f"client {self.client_id}: {x.shape[0]} inputs but labels of shape {y.shape}")
        if y.size == 0:
            raise DataError(f"client {self.client_id} has no samples")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    def __len__(self) -> int:
        return self.n

    @property
    def samples(self) -> list[tuple[np.ndarray, int]]:
        return [(self.x[i], int(self.y[i])) for i in range(self.n)]


@dataclass(frozen=True)
class RoundConfig:
    clients_per_round: int = 10
    local_epochs: int = 1
    batch_size: int = 5
    lr: float = 1e-3
    total_rounds: int = 100

    def __post_init__(self):
        if self.clients_per_round < 1:
            raise ConfigError("clients_per_round must be >= 1")
        if self.local_epochs < 1 or self.batch_size < 1 or self.total_rounds < 1:
            raise ConfigError("local_epochs, batch_size and total_rounds must be positive")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")

    def validate_for(self, num_clients: int) -> None:
        if self.clients_per_round > num_clients:
            raise ConfigError(f"clients_per_round={self.clients_per_round} exceeds {num_clients} clients")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: str
    params: ParamVector
    n_k: int
    local_loss: float

    def __post_init__(self):
        if self.n_k < 1:
            raise AggregationError("n_k must be >= 1")


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; strings are hashed with
    CRC32 so the stream does not depend on process or execution order."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


def sample_clients(client_ids: Sequence[str], k: int, rng: np.random.Generator) -> list[str]:
    """``k`` distinct ids drawn uniformly without replacement."""
    ids = list(client_ids)
    if k < 1 or k > len(ids):
        raise ConfigError(f"cannot sample {k} of {len(ids)} clients")
    return [ids[i] for i in rng.choice(len(ids), size=k, replace=False)]


def local_sgd(model, params: ParamVector, x, y, *, epochs: int, batch_size: int, lr: float, rng, weights=None, adjacency=None):
    """Minibatch SGD over ``(x, y)``; returns the new parameters and the
    sample-weighted mean of the minibatch losses seen along the way."""
    n = len(y)
    if n == 0:
        raise DataError("no local samples")
    p = params.copy()
    total = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            ctx = {} if weights is None else {"weights": weights[idx], "adjacency": adjacency}
            loss, grad = model.loss_and_grad(p, x[idx], y[idx], **ctx)
            p.values -= lr * grad.values
            total += loss * len(idx)
    return p, total / (n * epochs)


def client_local_update(model, params: ParamVector, data: ClientDataset, cfg: RoundConfig, rng: np.random.Generator, *, weights=None, adjacency=None) -> ClientUpdate:
    """Train a copy of the broadcast ``params`` on one client's data.

    ``weights``/``adjacency`` are required when ``model`` carries
    domain-specific branches; ``weights`` is per sample, aligned with ``data``.
    """
    new, loss = local_sgd(
        model, params, data.x, data.y,
        epochs=cfg.local_epochs, batch_size=cfg.batch_size, lr=cfg.lr, rng=rng,
        weights=weights, adjacency=adjacency,
    )
    return ClientUpdate(data.client_id, new, data.n, loss)


def weighted_average(vectors: Sequence[ParamVector], counts: Sequence[int]) -> ParamVector:
    if not vectors:
        raise AggregationError("nothing to aggregate")
    layout = vectors[0].layout
    if any(v.layout != layout for v in vectors):
        raise LayoutError("client updates have different layouts")
    counts = [int(c) for c in counts]
    if min(counts) < 1:
        raise AggregationError("sample counts must be >= 1")
    total = float(sum(counts))
    # Offsetting by the first vector keeps singleton and identical inputs exact.
    ref = vectors[0].values
    acc = np.zeros_like(ref)
    for v, c in zip(vectors[1:], counts[1:]):
        acc += (c / total) * (v.values - ref)
    out = ref + acc
    if len(vectors) > 1:
        stack = np.stack([v.values for v in vectors])
        np.clip(out, stack.min(axis=0), stack.max(axis=0), out=out)
    return ParamVector(out, layout)


def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> ParamVector:
    """Sample-count weighted mean of the client parameters."""
    return weighted_average([u.params for u in updates], [u.n_k for u in updates])


def mixing_weights(updates: Sequence[ClientUpdate]) -> np.ndarray:
    n = np.array([u.n_k for u in updates], dtype=np.float64)
    return n / n.sum()
