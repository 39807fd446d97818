"""Federated domain discovery with a teacher and a student classifier.

The teacher is frozen and labels each local sample with its argmax domain;
the student learns to reproduce those labels and is FedAvg-aggregated like
any other model. Every ``period`` rounds the teacher becomes a copy of the
student. At test time the student's softmax gives soft domain weights.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .fed import ClientDataset, ClientUpdate, fedavg_aggregate, local_sgd
from .graph import one_hot
from .nn import LayeredModel, avgpool, conv2d, dense, flatten, relu, softmax
from .params import ParamVector


def domain_classifier(
    input_shape,
    num_domains: int,
    channels: tuple[int, int] = (32, 64),
    kernel: int = 3,
    input_norm: tuple[float, float] | None = (0.5, 0.5),
    init: str = "he",
) -> LayeredModel:
    """Two 3x3 conv layers, global average pooling, linear to ``num_domains``.

    Inputs are centered and the init is He-scaled with random biases. With
    the small default init the random teacher's logit margins (~1e-3) are
    smaller than the bias drift of one round of student training, and the
    self-labelling loop collapses onto a single domain within a few rounds.
    """
    c, h, w = input_shape
    c1, c2 = channels
    return LayeredModel(
        input_shape,
        [
            conv2d(c, c1, kernel), relu(),
            conv2d(c1, c2, kernel), relu(),
            avgpool(h, w), flatten(),
            dense(c2, num_domains),
        ],
        input_norm=input_norm,
        init=init,
    )


@dataclass(frozen=True)
class ClusterState:
    teacher: ParamVector
    student: ParamVector
    num_domains: int
    period: int = 10
    rounds_since_sync: int = 0

    def __post_init__(self):
        if self.period < 1:
            raise ConfigError("teacher sync period must be >= 1")
        if not 0 <= self.rounds_since_sync < self.period:
            raise ConfigError("rounds_since_sync out of range")


def init_cluster_state(
    classifier: LayeredModel,
    rng: np.random.Generator,
    period: int = 10,
    identical_init: bool = True,
) -> ClusterState:
    teacher = classifier.init_params(rng)
    student = teacher.copy() if identical_init else classifier.init_params(rng)
    return ClusterState(teacher, student, classifier.num_outputs, period)


def pseudo_label(classifier: LayeredModel, teacher: ParamVector, x: np.ndarray) -> np.ndarray:
    """Teacher argmax domain per sample (ties go to the lowest index)."""
    return np.argmax(classifier.predict_logits(teacher, x), axis=1)


def student_local_update(
    classifier: LayeredModel,
    student: ParamVector,
    teacher: ParamVector,
    data: ClientDataset,
    lr: float = 1e-4,
    rng: np.random.Generator | None = None,
    *,
    epochs: int = 1,
    batch_size: int = 5,
    labels: np.ndarray | None = None,
) -> ClientUpdate:
    """Fit the student to the teacher's pseudo-labels on local data.

    ``labels`` lets the caller reuse pseudo-labels it already computed
    with the same teacher.
    """
    if labels is None:
        labels = pseudo_label(classifier, teacher, data.x)
    if rng is None:
        rng = np.random.default_rng(0)
    new, loss = local_sgd(classifier, student, data.x, labels, epochs=epochs, batch_size=batch_size, lr=lr, rng=rng)
    return ClientUpdate(data.client_id, new, data.n, loss)


def aggregate_students(updates) -> ParamVector:
    return fedavg_aggregate(updates)


def sync_teacher(state: ClusterState) -> ClusterState:
    """Advance the sync counter; copy the student into the teacher when it
    reaches the period."""
    if state.rounds_since_sync + 1 == state.period:
        return replace(state, teacher=state.student.copy(), rounds_since_sync=0)
    return replace(state, rounds_since_sync=state.rounds_since_sync + 1)


def domain_weights_test(classifier: LayeredModel, student: ParamVector, x: np.ndarray) -> np.ndarray:
    return softmax(classifier.predict_logits(student, x))


def domain_weights_train(classifier: LayeredModel, teacher: ParamVector, x: np.ndarray) -> np.ndarray:
    return one_hot(pseudo_label(classifier, teacher, x), classifier.num_outputs)


def hard_partition(classifier: LayeredModel, params: ParamVector, x: np.ndarray, batch: int = 512) -> np.ndarray:
    return np.concatenate([pseudo_label(classifier, params, x[i : i + batch]) for i in range(0, len(x), batch)])
