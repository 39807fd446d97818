import inspect
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from fedgcn import rounds
from fedgcn.clustering import domain_classifier
from fedgcn.errors import AggregationError, ConfigError, DataError, LayoutError
from fedgcn.fed import (
    ClientDataset,
    ClientUpdate,
    RoundConfig,
    client_local_update,
    derive_rng,
    fedavg_aggregate,
    local_sgd,
    mixing_weights,
    sample_clients,
)
from fedgcn.graph import GraphModel, SpecializationPlan
from fedgcn.nn import LayeredModel, dense, softmax
from fedgcn.params import Layout, ParamVector
from fedgcn.rounds import Federation, load_checkpoint, save_checkpoint

LAYOUT = Layout([("w", (4,))])


def _update(values, n, cid="c"):
    return ClientUpdate(cid, ParamVector(np.asarray(values, dtype=float), LAYOUT), n, 0.0)


# -- datasets and config ----------------------------------------------------------


def test_client_dataset_validation():
    with pytest.raises(DataError):
        ClientDataset("a", np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(DataError):
        ClientDataset("a", np.zeros((3, 2)), np.zeros(2))
    c = ClientDataset("a", np.zeros((2, 2)), [0, 1])
    assert c.n == len(c.samples) == 2
    with pytest.raises(ValueError):
        c.x[0, 0] = 1.0


def test_round_config_validation():
    with pytest.raises(ConfigError):
        RoundConfig(clients_per_round=0)
    with pytest.raises(ConfigError):
        RoundConfig(batch_size=0)
    with pytest.raises(ConfigError):
        RoundConfig(clients_per_round=5).validate_for(4)


# -- sampling -------------------------------------------------------------------


def test_sampling_all_clients_is_permutation(rng):
    ids = [f"c{i}" for i in range(7)]
    assert sorted(sample_clients(ids, 7, rng)) == sorted(ids)


def test_sampling_too_many():
    with pytest.raises(ConfigError):
        sample_clients(["a", "b"], 3, np.random.default_rng(0))


def test_sampling_deterministic():
    ids = [f"c{i}" for i in range(20)]
    a = [sample_clients(ids, 5, derive_rng(3, "sample", r)) for r in range(10)]
    b = [sample_clients(ids, 5, derive_rng(3, "sample", r)) for r in range(10)]
    assert a == b
    assert all(len(set(s)) == 5 for s in a)


def test_single_client_sampling_is_uniform():
    ids = [f"c{i}" for i in range(10)]
    rng = np.random.default_rng(0)
    counts = Counter(sample_clients(ids, 1, rng)[0] for _ in range(10_000))
    _, p = stats.chisquare([counts[i] for i in ids])
    assert p > 0.001


# -- aggregation ------------------------------------------------------------------


def test_singleton_average_is_identity(rng):
    u = _update(rng.normal(size=4), 7)
    assert fedavg_aggregate([u]).values.tobytes() == u.params.values.tobytes()


def test_hand_weighted_mean():
    out = fedavg_aggregate([_update(np.zeros(4), 1), _update(np.full(4, 4.0), 3)])
    assert out.values.tolist() == [3.0, 3.0, 3.0, 3.0]


def test_identical_inputs_are_fixed_point(rng):
    v = rng.normal(size=4)
    out = fedavg_aggregate([_update(v, n) for n in (1, 5, 9)])
    assert out.values.tobytes() == v.tobytes()


def test_aggregation_errors():
    with pytest.raises(AggregationError):
        fedavg_aggregate([])
    other = ClientUpdate("b", ParamVector.zeros(Layout([("v", (4,))])), 1, 0.0)
    with pytest.raises(LayoutError):
        fedavg_aggregate([_update(np.zeros(4), 1), other])


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_aggregate_matches_oracle_and_hull(seed, k):
    r = np.random.default_rng(seed)
    vals = r.normal(scale=10, size=(k, 4))
    ns = r.integers(1, 100, size=k)
    out = fedavg_aggregate([_update(v, n) for v, n in zip(vals, ns)]).values
    oracle = [sum(ns[j] * vals[j, i] for j in range(k)) / ns.sum() for i in range(4)]
    np.testing.assert_allclose(out, oracle, rtol=1e-12, atol=1e-12)
    assert np.all(out >= vals.min(axis=0)) and np.all(out <= vals.max(axis=0))
    assert mixing_weights([_update(v, n) for v, n in zip(vals, ns)]).sum() == pytest.approx(1.0, abs=1e-12)


# -- local update -----------------------------------------------------------------


def _linear(c=2, d=2):
    return LayeredModel((d,), [dense(d, c)])


def test_zero_lr_keeps_params(rng):
    m = _linear()
    p = m.init_params(rng)
    data = ClientDataset("a", rng.normal(size=(6, 2)), rng.integers(0, 2, 6))
    upd = client_local_update(m, p, data, RoundConfig(lr=0.0), rng)
    assert upd.params.values.tobytes() == p.values.tobytes()
    assert upd.n_k == 6


def test_input_params_not_modified(rng):
    m = _linear()
    p = m.init_params(rng)
    before = p.values.copy()
    data = ClientDataset("a", rng.normal(size=(6, 2)), rng.integers(0, 2, 6))
    client_local_update(m, p, data, RoundConfig(lr=0.5), rng)
    assert np.array_equal(before, p.values)


def test_single_sample_step_matches_closed_form(rng):
    m = _linear(c=3, d=2)
    p = m.init_params(rng)
    x = np.array([[0.5, -1.0]])
    y = np.array([2])
    W, b = p["0.weight"].copy(), p["0.bias"].copy()
    probs = softmax(x @ W.T + b)[0]
    delta = probs - np.eye(3)[2]
    lr = 0.1
    new, _ = local_sgd(m, p, x, y, epochs=1, batch_size=5, lr=lr, rng=rng)
    np.testing.assert_allclose(new["0.weight"], W - lr * np.outer(delta, x[0]), rtol=1e-14)
    np.testing.assert_allclose(new["0.bias"], b - lr * delta, rtol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_one_epoch_reduces_loss_on_separable_toy(seed):
    r = np.random.default_rng(seed)
    x = np.concatenate([r.normal(-2, 0.5, size=(20, 2)), r.normal(2, 0.5, size=(20, 2))])
    y = np.repeat([0, 1], 20)
    m = _linear()
    p = m.init_params(r)
    before = m.loss_and_grad(p, x, y)[0]
    new, _ = local_sgd(m, p, x, y, epochs=1, batch_size=5, lr=0.1, rng=r)
    assert m.loss_and_grad(new, x, y)[0] <= before


def test_empty_local_data():
    with pytest.raises(DataError):
        local_sgd(_linear(), ParamVector.zeros(_linear().layout), np.zeros((0, 2)), np.zeros(0, int), epochs=1, batch_size=5, lr=0.1, rng=np.random.default_rng(0))


# -- rounds -----------------------------------------------------------------------


def _clients(n, rng, size=8, shape=(1, 4, 4), classes=3):
    return [ClientDataset(f"c{i:02d}", rng.uniform(size=(size,) + shape), rng.integers(0, classes, size)) for i in range(n)]


def _small_cnn():
    from fedgcn.nn import conv2d, flatten, relu

    return LayeredModel((1, 4, 4), [conv2d(1, 2, 3), relu(), flatten(), dense(32, 3)])


def _graph_federation(workers=1, lr=0.05, k=3, seed=0):
    model = GraphModel(_small_cnn(), 2, SpecializationPlan())
    return Federation(
        model, RoundConfig(k, 1, 4, lr, 10), seed=seed,
        classifier=domain_classifier((1, 4, 4), 2, (4, 4)), student_lr=0.01, teacher_period=2, workers=workers,
    )


def test_noop_round_with_zero_lr(rng):
    fed = Federation(_small_cnn(), RoundConfig(1, 1, 4, 0.0, 1))
    state = fed.init_state()
    new, report = fed.run_round(state, _clients(1, rng))
    assert new.theta.values.tobytes() == state.theta.values.tobytes()
    assert report.round == state.round + 1 == 1


def test_identical_clients_aggregate_to_one_update(rng):
    x = rng.uniform(size=(8, 1, 4, 4))
    y = rng.integers(0, 3, 8)
    clients = [ClientDataset(f"c{i}", x, y) for i in range(4)]
    m = _small_cnn()
    p = m.init_params(rng)
    cfg = RoundConfig(4, 1, 4, 0.1, 1)
    updates = [client_local_update(m, p, c, cfg, derive_rng(0, "same")) for c in clients]
    assert fedavg_aggregate(updates).values.tobytes() == updates[0].params.values.tobytes()


def test_round_counter_and_report(rng):
    fed = _graph_federation()
    clients = _clients(6, rng)
    state = fed.init_state()
    for r in range(1, 4):
        state, report = fed.run_round(state, clients)
        assert report.round == state.round == r
        assert len(set(report.participants)) == 3
        np.testing.assert_allclose(report.adjacency.sum(axis=1), 1.0, atol=1e-9)
    assert state.cluster.rounds_since_sync == 1


def test_serial_and_parallel_reports_match(rng):
    clients = _clients(6, rng)

    def run(workers):
        fed = _graph_federation(workers=workers)
        state = fed.init_state()
        out = []
        for _ in range(3):
            state, rep = fed.run_round(state, clients)
            out.append((rep.participants, rep.train_loss, rep.student_loss, rep.adjacency.tobytes()))
        return out, state.theta.values.tobytes(), state.cluster.student.values.tobytes()

    assert run(1) == run(3)


def test_failing_client_aborts_round(rng):
    fed = _graph_federation(k=6)
    clients = _clients(6, rng)
    bad = ClientDataset("c05", rng.uniform(size=(8, 1, 4, 4)), np.full(8, 7))  # label out of range
    state = fed.init_state()
    before = state.theta.values.copy()
    with pytest.raises(Exception):
        fed.run_round(state, clients[:5] + [bad])
    assert np.array_equal(state.theta.values, before)
    assert state.round == 0


def test_server_api_never_takes_samples():
    # Server-side entry points accept parameters, counts, losses and states only.
    forbidden = {"x", "y", "data", "client", "clients", "samples", "dataset"}
    for fn in rounds.SERVER_API:
        params = set(inspect.signature(fn).parameters)
        assert not params & forbidden, f"{fn.__name__} takes {params & forbidden}"


def test_graph_federation_requires_classifier():
    with pytest.raises(ConfigError):
        Federation(GraphModel(_small_cnn(), 2), RoundConfig(1))
    with pytest.raises(ConfigError):
        Federation(_small_cnn(), RoundConfig(1), classifier=domain_classifier((1, 4, 4), 2))


def test_checkpoint_round_trip(rng, tmp_path):
    fed = _graph_federation()
    clients = _clients(6, rng)
    state = fed.init_state()
    for _ in range(3):
        state, _ = fed.run_round(state, clients)
    path = save_checkpoint(tmp_path / "ck.npz", state, fed)
    back = load_checkpoint(path, fed)
    assert back.round == 3
    assert back.theta.values.tobytes() == state.theta.values.tobytes()
    assert back.cluster.teacher.values.tobytes() == state.cluster.teacher.values.tobytes()
    assert back.cluster.student.values.tobytes() == state.cluster.student.values.tobytes()
    assert back.cluster.rounds_since_sync == state.cluster.rounds_since_sync
    np.testing.assert_array_equal(fed.adjacency(back), fed.adjacency(state))
    # training resumes identically
    a, _ = fed.run_round(state, clients)
    b, _ = fed.run_round(back, clients)
    assert a.theta.values.tobytes() == b.theta.values.tobytes()
