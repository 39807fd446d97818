"""Minimal differentiable network engine in float64 numpy.

Layers are plain :class:`LayerSpec` records; all parameters live in a
:class:`~fedgcn.params.ParamVector`. ``forward`` returns logits plus a cache,
``backward`` turns the cache into the mean cross-entropy loss and its gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputShapeError, LabelError, LayoutError, NumericError, ShapeError
from .params import Layout, ParamVector

KINDS = ("dense", "conv2d", "relu", "avgpool", "flatten", "softmax_xent_head")
PARAM_KINDS = ("dense", "conv2d")


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``dims`` is kind-specific:

    dense ``(in, out)``; conv2d ``(in_channels, out_channels, kernel)``;
    avgpool ``(kh, kw)`` with stride equal to the window; others ``()``.
    """

    kind: str
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        d = self.dims
        if self.kind == "dense":
            if len(d) != 2 or min(d) < 1:
                raise ShapeError(f"dense needs (in>0, out>0), got {d}")
        elif self.kind == "conv2d":
            if len(d) != 3 or min(d) < 1 or d[2] % 2 == 0:
                raise ShapeError(f"conv2d needs (cin, cout, odd kernel), got {d}")
        elif self.kind == "avgpool":
            if len(d) != 2 or min(d) < 1:
                raise ShapeError(f"avgpool needs (kh, kw), got {d}")
        elif d:
            raise ShapeError(f"{self.kind} takes no dims")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "dense":
            i, o = self.dims
            return {"weight": (o, i), "bias": (o,)}
        if self.kind == "conv2d":
            ci, co, k = self.dims
            return {"weight": (co, ci, k, k), "bias": (co,)}
        return {}

    def fan_in(self) -> int:
        if self.kind == "dense":
            return self.dims[0]
        ci, _, k = self.dims
        return ci * k * k


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", (n_in, n_out))


def conv2d(c_in: int, c_out: int, kernel: int = 3) -> LayerSpec:
    return LayerSpec("conv2d", (c_in, c_out, kernel))


def relu() -> LayerSpec:
    return LayerSpec("relu")


def avgpool(kh: int, kw: int | None = None) -> LayerSpec:
    return LayerSpec("avgpool", (kh, kh if kw is None else kw))


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def softmax_xent_head() -> LayerSpec:
    return LayerSpec("softmax_xent_head")


# ---------------------------------------------------------------------------
# per-layer kernels


def _out_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = spec.kind
    if kind == "dense":
        if shape != (spec.dims[0],):
            raise ShapeError(f"dense expects input ({spec.dims[0]},), got {shape}")
        return (spec.dims[1],)
    if kind == "conv2d":
        if len(shape) != 3 or shape[0] != spec.dims[0]:
            raise ShapeError(f"conv2d expects ({spec.dims[0]}, H, W), got {shape}")
        return (spec.dims[1], shape[1], shape[2])
    if kind == "avgpool":
        kh, kw = spec.dims
        if len(shape) != 3 or shape[1] % kh or shape[2] % kw:
            raise ShapeError(f"avgpool {spec.dims} does not tile input {shape}")
        return (shape[0], shape[1] // kh, shape[2] // kw)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


def layer_forward(spec: LayerSpec, weight, bias, x: np.ndarray):
    kind = spec.kind
    if kind == "dense":
        return x @ weight.T + bias, x
    if kind == "conv2d":
        return _conv_forward(weight, bias, x)
    if kind == "relu":
        mask = x > 0
        return x * mask, mask
    if kind == "avgpool":
        kh, kw = spec.dims
        n, c, h, w = x.shape
        y = x.reshape(n, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))
        return y, x.shape
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    return x, None


def layer_backward(spec: LayerSpec, weight, cache, dy: np.ndarray, need_dx: bool = True):
    """Return ``(dx, dweight, dbias)``; the last two are ``None`` for
    parameter-free layers."""
    kind = spec.kind
    if kind == "dense":
        x = cache
        dw = dy.T @ x
        db = dy.sum(axis=0)
        dx = dy @ weight if need_dx else None
        return dx, dw, db
    if kind == "conv2d":
        return _conv_backward(weight, cache, dy, need_dx)
    if kind == "relu":
        return dy * cache, None, None
    if kind == "avgpool":
        kh, kw = spec.dims
        n, c, h, w = cache
        g = dy / (kh * kw)
        dx = np.repeat(np.repeat(g, kh, axis=2), kw, axis=3)
        return dx, None, None
    if kind == "flatten":
        return dy.reshape(cache), None, None
    return dy, None, None


def _conv_forward(weight: np.ndarray, bias: np.ndarray, x: np.ndarray):
    co, ci, k, _ = weight.shape
    n, _, h, w = x.shape
    p = k // 2
    if p:
        xp = np.zeros((n, ci, h + 2 * p, w + 2 * p))
        xp[:, :, p : p + h, p : p + w] = x
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # (n, ci, h, w, k, k) -> rows per output pixel
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, ci * k * k)
    out = cols @ weight.reshape(co, -1).T + bias
    y = out.reshape(n, h, w, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, x.shape)


def _conv_backward(weight: np.ndarray, cache, dy: np.ndarray, need_dx: bool):
    cols, xshape = cache
    co, ci, k, _ = weight.shape
    n, _, h, w = xshape
    d2 = dy.transpose(0, 2, 3, 1).reshape(-1, co)
    dw = (d2.T @ cols).reshape(weight.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    p = k // 2
    dcols = (d2 @ weight.reshape(co, -1)).reshape(n, h, w, ci, k, k)
    dxp = np.zeros((n, ci, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
    return dx, dw, db


# ---------------------------------------------------------------------------
# loss


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"labels must lie in [0, {c})")
    labels = labels.astype(np.intp)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return float(max(loss, 0.0)), dlogits


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values after {where}")


# ---------------------------------------------------------------------------
# model


class LayeredModel:
    """An ordered stack of layers ending in a softmax cross-entropy head.

    ``input_norm=(mean, std)`` standardizes inputs before the first layer.
    ``init`` picks the parameter initialization: ``"uniform"`` draws weights
    from U(+-1/sqrt(fan_in)) with zero biases; ``"he"`` draws weights from
    U(+-sqrt(6/fan_in)) and biases from U(+-1/sqrt(fan_in)).
    """

    INITS = ("uniform", "he")

    def __init__(
        self,
        input_shape: Sequence[int],
        layers: Sequence[LayerSpec],
        input_norm: tuple[float, float] | None = None,
        init: str = "uniform",
    ):
        if init not in self.INITS:
            raise ShapeError(f"init must be one of {self.INITS}, got {init!r}")
        self.init = init
        layers = list(layers)
        if layers and layers[-1].kind == "softmax_xent_head":
            layers = layers[:-1]
        if any(l.kind == "softmax_xent_head" for l in layers):
            raise ShapeError("softmax_xent_head must be the final layer")
        self.input_shape = tuple(int(s) for s in input_shape)
        if input_norm is not None and not input_norm[1] > 0:
            raise ShapeError("input_norm std must be positive")
        self.input_norm = None if input_norm is None else (float(input_norm[0]), float(input_norm[1]))
        self.layers: tuple[LayerSpec, ...] = tuple(layers)
        shapes = [self.input_shape]
        for spec in self.layers:
            shapes.append(_out_shape(spec, shapes[-1]))
        if len(shapes[-1]) != 1:
            raise ShapeError(f"model output must be flat, got {shapes[-1]}")
        self.shapes: tuple[tuple[int, ...], ...] = tuple(shapes)
        self.num_outputs = shapes[-1][0]
        entries = []
        for i, spec in enumerate(self.layers):
            for pname, shape in spec.param_shapes().items():
                entries.append((f"{i}.{pname}", shape))
        self.layout = Layout(entries)

    @property
    def param_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.has_params]

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        params = ParamVector.zeros(self.layout)
        for i in self.param_layers:
            spec = self.layers[i]
            shapes = spec.param_shapes()
            bound = 1.0 / np.sqrt(spec.fan_in())
            gain = np.sqrt(6.0) if self.init == "he" else 1.0
            params[f"{i}.weight"] = rng.uniform(-gain * bound, gain * bound, size=shapes["weight"])
            if self.init == "he":
                params[f"{i}.bias"] = rng.uniform(-bound, bound, size=shapes["bias"])
        return params

    def layer_params(self, params: ParamVector, i: int):
        if not self.layers[i].has_params:
            return None, None
        return params[f"{i}.weight"], params[f"{i}.bias"]

    def check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise InputShapeError(
                f"expected input (batch, {', '.join(map(str, self.input_shape))}), got {x.shape}"
            )
        if self.input_norm is not None:
            mean, std = self.input_norm
            x = (x - mean) / std
        return x

    def forward(self, params: ParamVector, x: np.ndarray):
        if params.layout != self.layout:
            raise LayoutError("parameters do not belong to this model")
        z = self.check_input(x)
        caches = []
        for i, spec in enumerate(self.layers):
            w, b = self.layer_params(params, i)
            z, c = layer_forward(spec, w, b, z)
            check_finite(z, f"layer {i} ({spec.kind})")
            caches.append(c)
        return z, (z, caches)

    def backward(self, params: ParamVector, cache, labels) -> tuple[float, ParamVector]:
        logits, caches = cache
        loss, dz = cross_entropy(logits, labels)
        grad = ParamVector.zeros(self.layout)
        for i in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[i]
            w, _ = self.layer_params(params, i)
            dz, dw, db = layer_backward(spec, w, caches[i], dz, need_dx=i > 0)
            if dw is not None:
                grad[f"{i}.weight"] = dw
                grad[f"{i}.bias"] = db
        check_finite(grad.values, "backward")
        return loss, grad

    def loss_and_grad(self, params: ParamVector, x, labels, **_ignored):
        _, cache = self.forward(params, x)
        return self.backward(params, cache, labels)

    def predict_logits(self, params: ParamVector, x, **_ignored) -> np.ndarray:
        return self.forward(params, x)[0]


def forward(model: LayeredModel, params: ParamVector, x: np.ndarray):
    """Run ``model`` and return ``(logits, cache)``."""
    return model.forward(params, x)


def backward(model: LayeredModel, params: ParamVector, cache, labels):
    return model.backward(params, cache, labels)


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    if grad.layout != params.layout:
        raise LayoutError("gradient layout differs from parameters")
    if not lr >= 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    return ParamVector(params.values - lr * grad.values, params.layout)


def mlp(input_dim: int, hidden: Sequence[int], num_classes: int) -> LayeredModel:
    layers: list[LayerSpec] = []
    prev = input_dim
    for h in hidden:
        layers += [dense(prev, h), relu()]
        prev = h
    layers.append(dense(prev, num_classes))
    return LayeredModel((input_dim,), layers)
