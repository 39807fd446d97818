"""Wire configs, data and federation together; evaluate and record metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .clustering import domain_classifier, domain_weights_test
from .config import ExperimentConfig
from .data import FederatedDataset, generate_synthetic, load_json_federated, split_clients
from .errors import ConfigError, EvalError
from .fed import ClientDataset
from .graph import GraphModel, one_hot
from .nn import LayeredModel, LayerSpec, avgpool, conv2d, dense, flatten, relu
from .params import ParamVector
from .rounds import Federation, RoundReport, ServerState, save_checkpoint

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# building blocks


def load_dataset(cfg: ExperimentConfig) -> FederatedDataset:
    src = cfg.dataset
    if src.synthetic is not None:
        return generate_synthetic(src.synthetic)
    ds = load_json_federated(src.json, src.input_shape, src.num_classes)
    if not ds.held_out_clients:
        ds = split_clients(ds, 1.0 - src.held_out_fraction, seed=src.split_seed)
    return ds


def build_main_model(cfg: ExperimentConfig, input_shape, num_classes: int) -> LayeredModel:
    spec = cfg.model
    c, h, w = input_shape
    layers: list[LayerSpec] = []
    for ch in spec.conv_channels:
        layers += [conv2d(c, ch, spec.kernel), relu()]
        c = ch
    if spec.conv_channels and spec.pool > 1:
        if h % spec.pool or w % spec.pool:
            raise ConfigError(f"pool {spec.pool} does not tile a {h}x{w} input")
        layers.append(avgpool(spec.pool))
        h, w = h // spec.pool, w // spec.pool
    layers.append(flatten())
    width = c * h * w
    for units in spec.hidden:
        layers += [dense(width, units), relu()]
        width = units
    layers.append(dense(width, num_classes))
    norm = (0.5, 0.5) if spec.normalize_inputs else None
    return LayeredModel(input_shape, layers, input_norm=norm)


def build_federation(cfg: ExperimentConfig, input_shape, num_classes: int) -> Federation:
    base = build_main_model(cfg, input_shape, num_classes)
    common = dict(cfg=cfg.round_config(), seed=cfg.seed, workers=cfg.workers)
    if cfg.algorithm == "fedavg":
        return Federation(base, **common)
    model = GraphModel(
        base, cfg.num_domains, cfg.plan,
        lambda_init=cfg.lambda_init, freeze_lambda=cfg.freeze_lambda,
        bottleneck_threshold=cfg.bottleneck_threshold, bottleneck_factor=cfg.bottleneck_factor,
    )
    return Federation(
        model,
        classifier=domain_classifier(input_shape, cfg.num_domains, tuple(cfg.classifier_channels)),
        student_lr=cfg.student_lr,
        teacher_period=cfg.teacher_sync_period,
        identical_init=cfg.identical_init,
        beta=cfg.beta,
        eps_dist=cfg.eps_dist,
        **common,
    )


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    correct: int
    total: int
    per_domain: dict[int, tuple[int, int]] = field(default_factory=dict)

    def domain_accuracy(self, d: int) -> float | None:
        c, n = self.per_domain.get(d, (0, 0))
        return c / n if n else None


def test_time_weights(fed: Federation, state: ServerState, x: np.ndarray, assignment: str = "soft") -> np.ndarray:
    """Per-sample domain weights from the student; needs no client training."""
    w = domain_weights_test(fed.classifier, state.cluster.student, x)
    if assignment == "hard":
        w = one_hot(np.argmax(w, axis=1), w.shape[1])
    return w


def predict(fed: Federation, state: ServerState, x: np.ndarray, assignment: str | None = None, batch: int = 512) -> np.ndarray:
    if not fed.is_graph:
        return np.concatenate([fed.model.predict_logits(state.theta, x[i : i + batch]) for i in range(0, len(x), batch)])
    assignment = assignment or fed.model.plan.test_assignment
    A = fed.adjacency(state)
    out = []
    for i in range(0, len(x), batch):
        xb = x[i : i + batch]
        w = test_time_weights(fed, state, xb, assignment)
        out.append(fed.model.predict_logits(state.theta, xb, weights=w, adjacency=A))
    return np.concatenate(out)


def evaluate_global(
    fed: Federation,
    state: ServerState,
    clients: Sequence[ClientDataset],
    domain_labels: Mapping[str, np.ndarray] | None = None,
    assignment: str | None = None,
) -> Evaluation:
    """Accuracy over the pooled samples of ``clients``, plus a per-domain
    breakdown when ground-truth domains are supplied."""
    if not clients:
        raise EvalError("no held-out clients to evaluate on")
    x = np.concatenate([c.x for c in clients])
    y = np.concatenate([c.y for c in clients])
    hits = np.argmax(predict(fed, state, x, assignment), axis=1) == y
    per_domain = {}
    if domain_labels is not None:
        dom = np.concatenate([domain_labels[c.client_id] for c in clients])
        for d in np.unique(dom):
            sel = dom == d
            per_domain[int(d)] = (int(hits[sel].sum()), int(sel.sum()))
    return Evaluation(float(hits.mean()), int(hits.sum()), int(hits.size), per_domain)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRow:
    round: int
    algorithm: str
    train_loss_mean: float
    global_test_accuracy: float
    domain_accuracy: dict[int, float | None] = field(default_factory=dict)
    lambdas: dict[int, float] = field(default_factory=dict)
    adjacency_offdiag_min: float | None = None
    adjacency_offdiag_max: float | None = None
    wall_clock_seconds: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.global_test_accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")


def metric_columns(domains: Iterable[int] = (), layers: Iterable[int] = (), graph: bool = False) -> list[str]:
    cols = ["round", "algorithm", "train_loss_mean", "global_test_accuracy"]
    cols += [f"accuracy_domain_{d}" for d in domains]
    cols += [f"lambda_layer_{l}" for l in layers]
    if graph:
        cols += ["adjacency_offdiag_min", "adjacency_offdiag_max"]
    return cols


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def row_values(row: MetricsRow, columns: Sequence[str]) -> list[str]:
    out = []
    for col in columns:
        if col.startswith("accuracy_domain_"):
            v = row.domain_accuracy.get(int(col.rsplit("_", 1)[1]))
        elif col.startswith("lambda_layer_"):
            v = row.lambdas.get(int(col.rsplit("_", 1)[1]))
        else:
            v = getattr(row, col)
        out.append(_fmt(v))
    return out


class MetricsWriter:
    """Append-as-you-go CSV; every row is flushed so a crash keeps earlier rounds.

    Wall-clock time is not a CSV column: it lives in the JSON summary so
    that reruns with the same seed produce byte-identical CSV files.
    """

    def __init__(self, path: str | Path, columns: Sequence[str]):
        self.path = Path(path)
        self.columns = list(columns)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)
        except OSError as exc:
            raise OSError(f"cannot write metrics to {self.path}: {exc}") from exc
        self._last_round: int | None = None

    def append(self, row: MetricsRow) -> None:
        if self._last_round is not None and row.round <= self._last_round:
            raise ValueError(f"round {row.round} does not follow {self._last_round}")
        try:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow(row_values(row, self.columns))
        except OSError as exc:
            raise OSError(f"cannot append metrics to {self.path}: {exc}") from exc
        self._last_round = row.round


def emit_metrics(rows: Sequence[MetricsRow], out_dir: str | Path, summary: dict | None = None, columns: Sequence[str] | None = None) -> tuple[Path, Path]:
    """Write ``metrics.csv`` and ``summary.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    if columns is None:
        domains = sorted({d for r in rows for d in r.domain_accuracy})
        layers = sorted({l for r in rows for l in r.lambdas})
        graph = any(r.adjacency_offdiag_min is not None for r in rows)
        columns = metric_columns(domains, layers, graph)
    writer = MetricsWriter(out_dir / "metrics.csv", columns)
    for row in rows:
        writer.append(row)
    summary_path = write_summary(out_dir, summary or {})
    return writer.path, summary_path


def write_summary(out_dir: str | Path, summary: dict) -> Path:
    path = Path(out_dir) / "summary.json"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    except OSError as exc:
        raise OSError(f"cannot write summary to {path}: {exc}") from exc
    return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# experiment


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[MetricsRow]
    summary: dict
    state: ServerState
    federation: Federation
    dataset: FederatedDataset
    reports: list[RoundReport]


def _offdiag(A: np.ndarray | None):
    if A is None or A.shape[0] < 2:
        return None, None
    mask = ~np.eye(A.shape[0], dtype=bool)
    return float(A[mask].min()), float(A[mask].max())


def run_experiment(
    cfg: ExperimentConfig,
    dataset: FederatedDataset | None = None,
    write: bool = True,
    progress: Callable[[MetricsRow], None] | None = None,
) -> ExperimentResult:
    """Train for ``cfg.total_rounds`` rounds, evaluating on the held-out
    clients every ``cfg.eval_every`` rounds and after the last one."""
    if dataset is None:
        dataset = load_dataset(cfg)
    if not dataset.held_out_clients:
        raise EvalError("dataset has no held-out clients")
    input_shape = dataset.clients[0].x.shape[1:]
    fed = build_federation(cfg, input_shape, dataset.num_classes)
    cfg.round_config().validate_for(len(dataset.clients))
    held_domains = None
    if dataset.domain_labels is not None and all(c.client_id in dataset.domain_labels for c in dataset.held_out_clients):
        held_domains = {c.client_id: dataset.domain_labels[c.client_id] for c in dataset.held_out_clients}
    n_domains = 0
    if held_domains:
        n_domains = int(max(int(v.max()) for v in held_domains.values())) + 1
    layers = list(fed.model.specialized) if fed.is_graph else []
    columns = metric_columns(range(n_domains), layers, fed.is_graph)
    out_dir = Path(cfg.out_dir)
    writer = MetricsWriter(out_dir / "metrics.csv", columns) if write else None

    state = fed.init_state()
    rows: list[MetricsRow] = []
    reports: list[RoundReport] = []
    losses: list[float] = []
    timings = []
    start = time.perf_counter()
    for _ in range(cfg.total_rounds):
        state, report = fed.run_round(state, dataset.clients)
        reports.append(report)
        losses.append(report.train_loss)
        r = report.round
        if cfg.checkpoint_every and r % cfg.checkpoint_every == 0 and write:
            save_checkpoint(out_dir / "checkpoints" / f"round_{r:05d}.npz", state, fed)
        if r % cfg.eval_every and r != cfg.total_rounds:
            continue
        ev = evaluate_global(fed, state, dataset.held_out_clients, held_domains)
        lo, hi = _offdiag(report.adjacency)
        elapsed = time.perf_counter() - start
        row = MetricsRow(
            round=r,
            algorithm=cfg.algorithm,
            train_loss_mean=float(np.mean(losses)),
            global_test_accuracy=ev.accuracy,
            domain_accuracy={d: ev.domain_accuracy(d) for d in range(n_domains)},
            lambdas=dict(report.lambdas),
            adjacency_offdiag_min=lo,
            adjacency_offdiag_max=hi,
            wall_clock_seconds=elapsed,
        )
        losses = []
        rows.append(row)
        timings.append({"round": r, "wall_clock_seconds": elapsed})
        if writer is not None:
            writer.append(row)
        if progress is not None:
            progress(row)
        log.info("round %d acc %.4f loss %.4f", r, ev.accuracy, row.train_loss_mean)

    final = rows[-1]
    summary = {
        "config": cfg.to_dict(),
        "hyperparameters": {
            "algorithm": cfg.algorithm,
            "num_domains": cfg.num_domains,
            "teacher_sync_period": cfg.teacher_sync_period,
            "beta": cfg.beta,
            "lr": cfg.lr,
            "student_lr": cfg.student_lr,
            "clients_per_round": cfg.clients_per_round,
            "total_rounds": cfg.total_rounds,
            "batch_size": cfg.batch_size,
            "local_epochs": cfg.local_epochs,
            "plan": cfg.to_dict()["plan"],
        },
        "num_train_clients": len(dataset.clients),
        "num_held_out_clients": len(dataset.held_out_clients),
        "final_round": final.round,
        "final_accuracy": final.global_test_accuracy,
        "final_domain_accuracy": {str(k): v for k, v in final.domain_accuracy.items()},
        "final_lambdas": {str(k): v for k, v in final.lambdas.items()},
        "final_adjacency": None if reports[-1].adjacency is None else reports[-1].adjacency.tolist(),
        "timings": timings,
        "wall_clock_seconds": time.perf_counter() - start,
    }
    if write:
        write_summary(out_dir, summary)
    return ExperimentResult(cfg, rows, summary, state, fed, dataset, reports)


def metrics_equal(a: Sequence[MetricsRow], b: Sequence[MetricsRow], fields: Sequence[str] = ("round", "train_loss_mean", "global_test_accuracy", "domain_accuracy")) -> bool:
    if len(a) != len(b):
        return False
    return all(getattr(x, f) == getattr(y, f) for x, y in zip(a, b) for f in fields)


def accuracy_stats(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "min": float(arr.min()), "max": float(arr.max()), "n": int(arr.size)}


def finite_or_none(v: float | None) -> float | None:
    return None if v is None or not math.isfinite(v) else v
