"""Domain-specific residual layers connected by a one-step graph convolution.

Each specialized layer ``l`` owns a node matrix ``V`` (one row of layer
parameters per domain), a projection ``W`` and a scalar ``lambda``. The
parameters actually used by domain ``d`` are row ``d`` of
``act(A @ V @ W)``, and the layer output becomes

    agnostic(z) + lambda * sum_d w_d * branch_d(z)

The adjacency ``A`` is shared by all specialized layers and treated as a
constant during backprop; the server rebuilds it between rounds from
inverse distances between domain parameter rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainCountError, LayoutError, ShapeError
from .nn import (
    LayeredModel,
    LayerSpec,
    check_finite,
    cross_entropy,
    layer_backward,
    layer_forward,
)
from .params import Layout, ParamVector

ACTIVATIONS = ("relu", "none")
ADJACENCY_INITS = ("identity", "random", "uniform")


# ---------------------------------------------------------------------------
# adjacency


def domain_similarity(theta_i: np.ndarray, theta_j: np.ndarray, eps_dist: float = 1e-8) -> float:
    """Inverse Euclidean distance between two domain parameter vectors,
    with the distance floored at ``eps_dist``."""
    theta_i = np.asarray(theta_i, dtype=np.float64)
    theta_j = np.asarray(theta_j, dtype=np.float64)
    if theta_i.shape != theta_j.shape:
        raise LayoutError(f"parameter shapes differ: {theta_i.shape} vs {theta_j.shape}")
    dist = float(np.linalg.norm((theta_i - theta_j).ravel()))
    return 1.0 / max(dist, eps_dist)


def similarity_matrix(V: np.ndarray, eps_dist: float = 1e-8) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64).reshape(len(V), -1)
    diff = V[:, None, :] - V[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return 1.0 / np.maximum(dist, eps_dist)


def build_adjacency(V: np.ndarray, beta: float = 0.5, eps_dist: float = 1e-8) -> np.ndarray:
    """Row-stochastic adjacency with self weight ``beta``.

    Off-diagonal row ``i`` distributes ``1 - beta`` proportionally to the
    similarity of domain ``i`` to every other domain.
    """
    V = np.asarray(V, dtype=np.float64)
    D = V.shape[0]
    if D < 1:
        raise ShapeError("need at least one domain")
    if D == 1:
        return np.ones((1, 1))
    h = similarity_matrix(V, eps_dist)
    np.fill_diagonal(h, 0.0)
    A = (1.0 - beta) * h / h.sum(axis=1, keepdims=True)
    np.fill_diagonal(A, beta)
    return A


def initial_adjacency(kind: str, D: int, beta: float = 0.5, rng: np.random.Generator | None = None) -> np.ndarray:
    if kind not in ADJACENCY_INITS:
        raise ValueError(f"unknown adjacency init {kind!r}")
    if kind == "identity" or D == 1:
        return np.eye(D)
    if kind == "uniform":
        A = np.full((D, D), (1.0 - beta) / (D - 1))
    else:
        if rng is None:
            raise ValueError("random adjacency needs an rng")
        off = rng.uniform(0.0, 1.0, size=(D, D))
        np.fill_diagonal(off, 0.0)
        A = (1.0 - beta) * off / off.sum(axis=1, keepdims=True)
    np.fill_diagonal(A, beta)
    return A


# ---------------------------------------------------------------------------
# graph convolution over parameter rows


def _act(pre: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(pre, 0.0) if activation == "relu" else pre


def gcn_transform(A: np.ndarray, V: np.ndarray, W, activation: str = "relu"):
    """Return ``(V_hat, cache)`` with ``V_hat = act(A V W)``.

    ``W`` may be a single ``(q, q')`` matrix or a sequence of matrices
    applied in turn, each stage followed by ``activation``.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    stages = [W] if isinstance(W, np.ndarray) else list(W)
    A = np.asarray(A, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[1] != V.shape[0]:
        raise ShapeError(f"adjacency {A.shape} incompatible with node matrix {V.shape}")
    h = A @ V
    trace = []
    for Wk in stages:
        if Wk.ndim != 2 or Wk.shape[0] != h.shape[1]:
            raise ShapeError(f"projection {Wk.shape} incompatible with features {h.shape}")
        pre = h @ Wk
        trace.append((h, pre, Wk))
        h = _act(pre, activation)
    return h, (A, trace, activation)


def gcn_backward(cache, dV_hat: np.ndarray):
    """Gradients ``(dV, [dW per stage])``; ``A`` is held constant."""
    A, trace, activation = cache
    dh = dV_hat
    dWs = []
    for h_in, pre, Wk in reversed(trace):
        # >= keeps gradient alive at exactly zero so zero-initialized rows can train
        dpre = dh * (pre >= 0) if activation == "relu" else dh
        dWs.append(h_in.T @ dpre)
        dh = dpre @ Wk.T
    dWs.reverse()
    return A.T @ dh, dWs


# ---------------------------------------------------------------------------
# residual composition


def _unpack(spec: LayerSpec, row: np.ndarray):
    shapes = spec.param_shapes()
    wsize = int(np.prod(shapes["weight"]))
    return row[:wsize].reshape(shapes["weight"]), row[wsize:].reshape(shapes["bias"])


def _bcast(w: np.ndarray, like: np.ndarray) -> np.ndarray:
    return w.reshape((-1,) + (1,) * (like.ndim - 1))


def check_weights(w: np.ndarray, n: int, D: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = np.broadcast_to(w, (n, w.shape[0]))
    if w.shape != (n, D):
        raise DomainCountError(f"expected domain weights of shape ({n}, {D}), got {w.shape}")
    if w.min() < 0 or np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
        raise DomainCountError("domain weights must be non-negative and sum to 1")
    return w


def residual_forward(spec: LayerSpec, z: np.ndarray, weight_a, bias_a, V_hat: np.ndarray, lam: float, w: np.ndarray):
    """Agnostic layer output plus the ``lam``-scaled, ``w``-weighted sum of
    per-domain branches whose parameters are the rows of ``V_hat``.

    ``w`` is ``(batch, D)`` or a single length-``D`` vector.
    """
    D = V_hat.shape[0]
    w = check_weights(w, z.shape[0], D)
    za, ca = layer_forward(spec, weight_a, bias_a, z)
    r = np.zeros_like(za)
    branches = []
    for d in range(D):
        if not w[:, d].any():
            branches.append(None)
            continue
        wd, bd = _unpack(spec, V_hat[d])
        fd, cd = layer_forward(spec, wd, bd, z)
        r += _bcast(w[:, d], fd) * fd
        branches.append((wd, cd))
    out = za + lam * r
    return out, (ca, branches, r, w, lam)


def residual_backward(spec: LayerSpec, weight_a, cache, dout: np.ndarray, q: int, need_dx: bool = True):
    """Return ``(dz, dweight_a, dbias_a, dV_hat, dlam)``."""
    ca, branches, r, w, lam = cache
    dz, dwa, dba = layer_backward(spec, weight_a, ca, dout, need_dx)
    dlam = float(np.sum(dout * r))
    dr = lam * dout
    dV_hat = np.zeros((len(branches), q))
    for d, br in enumerate(branches):
        if br is None:
            continue
        wd, cd = br
        df = _bcast(w[:, d], dr) * dr
        dzd, dwd, dbd = layer_backward(spec, wd, cd, df, need_dx)
        dV_hat[d] = np.concatenate([dwd.ravel(), dbd.ravel()])
        if need_dx:
            dz = dz + dzd
    return dz, dwa, dba, dV_hat, dlam


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class SpecializationPlan:
    layers: str = "last"  # last | all
    adjacency_init: str = "identity"  # identity | random | uniform
    activation: str = "relu"  # relu | none
    test_assignment: str = "soft"  # soft | hard

    def __post_init__(self):
        if self.layers not in ("last", "all"):
            raise ValueError(f"plan.layers must be 'last' or 'all', got {self.layers!r}")
        if self.adjacency_init not in ADJACENCY_INITS:
            raise ValueError(f"unknown adjacency init {self.adjacency_init!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.test_assignment not in ("soft", "hard"):
            raise ValueError(f"unknown test assignment {self.test_assignment!r}")


class GraphModel:
    """A :class:`LayeredModel` whose chosen layers carry GCN-linked
    domain-specific residual branches.

    Parameter names: the base model's, plus ``"{l}.V"``, ``"{l}.W"`` (or
    ``"{l}.W0"``/``"{l}.W1"`` for a bottleneck) and ``"{l}.lambda"`` for each
    specialized layer ``l``.
    """

    def __init__(
        self,
        base: LayeredModel,
        num_domains: int,
        plan: SpecializationPlan = SpecializationPlan(),
        lambda_init: float = 1.0,
        freeze_lambda: bool = False,
        bottleneck_threshold: int = 4096,
        bottleneck_factor: int = 16,
    ):
        if num_domains < 1:
            raise DomainCountError("num_domains must be >= 1")
        candidates = base.param_layers
        if not candidates:
            raise ShapeError("base model has no parameterized layer to specialize")
        self.base = base
        self.input_shape = base.input_shape
        self.num_outputs = base.num_outputs
        self.num_domains = num_domains
        self.plan = plan
        self.lambda_init = float(lambda_init)
        self.freeze_lambda = freeze_lambda
        self.specialized: tuple[int, ...] = tuple(candidates[-1:] if plan.layers == "last" else candidates)
        self.q: dict[int, int] = {}
        self.stages: dict[int, tuple[str, ...]] = {}
        entries = [(s.name, s.shape) for s in base.layout]
        for l in self.specialized:
            q = sum(int(np.prod(s)) for s in base.layers[l].param_shapes().values())
            self.q[l] = q
            entries.append((f"{l}.V", (num_domains, q)))
            if q > bottleneck_threshold:
                inner = max(1, q // bottleneck_factor)
                entries += [(f"{l}.W0", (q, inner)), (f"{l}.W1", (inner, q))]
                self.stages[l] = (f"{l}.W0", f"{l}.W1")
            else:
                entries.append((f"{l}.W", (q, q)))
                self.stages[l] = (f"{l}.W",)
            entries.append((f"{l}.lambda", (1,)))
        self.layout = Layout(entries)

    # -- parameters ----------------------------------------------------------

    def init_params(self, rng: np.random.Generator, graph_rng: np.random.Generator | None = None) -> ParamVector:
        """Base parameters from ``rng``; zero ``V``, identity ``W`` (or a
        random bottleneck from ``graph_rng``) and ``lambda_init``."""
        base = self.base.init_params(rng)
        params = ParamVector.zeros(self.layout)
        params.values[: base.values.size] = base.values
        for l in self.specialized:
            names = self.stages[l]
            if len(names) == 1:
                params[names[0]] = np.eye(self.q[l])
            else:
                if graph_rng is None:
                    graph_rng = np.random.default_rng(0)
                for name in names:
                    fan_in, fan_out = self.layout[name].shape
                    bound = 1.0 / np.sqrt(fan_in)
                    params[name] = graph_rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"{l}.lambda"] = [self.lambda_init]
        return params

    def base_params(self, params: ParamVector) -> ParamVector:
        return ParamVector(params.values[: self.base.layout.size].copy(), self.base.layout)

    def domain_rows(self, params: ParamVector) -> np.ndarray:
        """Per-domain parameters concatenated over all specialized layers."""
        return np.hstack([params[f"{l}.V"] for l in self.specialized])

    def lambdas(self, params: ParamVector) -> dict[int, float]:
        return {l: float(params[f"{l}.lambda"][0]) for l in self.specialized}

    def graph_params(self, params: ParamVector, adjacency: np.ndarray):
        """``{layer: V_hat}``; can be precomputed once for inference."""
        return {
            l: gcn_transform(adjacency, params[f"{l}.V"], [params[n] for n in self.stages[l]], self.plan.activation)[0]
            for l in self.specialized
        }

    # -- forward / backward --------------------------------------------------

    def forward(self, params: ParamVector, x: np.ndarray, weights: np.ndarray, adjacency: np.ndarray):
        if params.layout != self.layout:
            raise LayoutError("parameters do not belong to this model")
        z = self.base.check_input(x)
        A = np.asarray(adjacency, dtype=np.float64)
        if A.shape != (self.num_domains, self.num_domains):
            raise DomainCountError(f"adjacency must be {self.num_domains}x{self.num_domains}, got {A.shape}")
        gcaches = {}
        vhats = {}
        for l in self.specialized:
            vhats[l], gcaches[l] = gcn_transform(
                A, params[f"{l}.V"], [params[n] for n in self.stages[l]], self.plan.activation
            )
        caches = []
        for i, spec in enumerate(self.base.layers):
            wa, ba = self.base.layer_params(params, i)
            if i in vhats:
                lam = float(params[f"{i}.lambda"][0])
                z, c = residual_forward(spec, z, wa, ba, vhats[i], lam, weights)
            else:
                z, c = layer_forward(spec, wa, ba, z)
            check_finite(z, f"layer {i} ({spec.kind})")
            caches.append(c)
        return z, (z, caches, gcaches)

    def backward(self, params: ParamVector, cache, labels) -> tuple[float, ParamVector]:
        logits, caches, gcaches = cache
        loss, dz = cross_entropy(logits, labels)
        grad = ParamVector.zeros(self.layout)
        for i in range(len(self.base.layers) - 1, -1, -1):
            spec = self.base.layers[i]
            wa, _ = self.base.layer_params(params, i)
            if i in gcaches:
                dz, dwa, dba, dvhat, dlam = residual_backward(spec, wa, caches[i], dz, self.q[i], need_dx=i > 0)
                dV, dWs = gcn_backward(gcaches[i], dvhat)
                grad[f"{i}.V"] = dV
                for name, dW in zip(self.stages[i], dWs):
                    grad[name] = dW
                grad[f"{i}.lambda"] = [0.0 if self.freeze_lambda else dlam]
            else:
                dz, dwa, dba = layer_backward(spec, wa, caches[i], dz, need_dx=i > 0)
            if dwa is not None:
                grad[f"{i}.weight"] = dwa
                grad[f"{i}.bias"] = dba
        check_finite(grad.values, "backward")
        return loss, grad

    def loss_and_grad(self, params: ParamVector, x, labels, *, weights, adjacency):
        _, cache = self.forward(params, x, weights, adjacency)
        return self.backward(params, cache, labels)

    def predict_logits(self, params: ParamVector, x, *, weights, adjacency) -> np.ndarray:
        return self.forward(params, x, weights, adjacency)[0]


def refresh_graph(
    params: ParamVector,
    model: GraphModel,
    round_index: int,
    initial: np.ndarray,
    beta: float = 0.5,
    eps_dist: float = 1e-8,
) -> np.ndarray:
    """Adjacency for the round about to start: the initial matrix at round
    0, otherwise rebuilt from the current central domain rows."""
    if round_index == 0:
        return np.array(initial, dtype=np.float64)
    return build_adjacency(model.domain_rows(params), beta, eps_dist)


def uniform_weights(n: int, D: int) -> np.ndarray:
    return np.full((n, D), 1.0 / D)


def one_hot(indices: Sequence[int], D: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.intp)
    out = np.zeros((indices.size, D))
    out[np.arange(indices.size), indices] = 1.0
    return out
