"""Federated datasets: a synthetic multi-domain generator, a LEAF-style JSON
reader/writer and client-level splits.

Ground-truth domains of synthetic samples are kept in
``FederatedDataset.domain_labels`` and never attached to the
:class:`~fedgcn.fed.ClientDataset` objects handed to training code.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, SchemaError, SplitError
from .fed import ClientDataset

TRANSFORMS = ("rotation", "channel-shift", "affine")


@dataclass(frozen=True)
class SyntheticSpec:
    num_domains: int = 4
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (1, 16, 16)
    samples_per_client: int = 40
    num_clients: int = 40
    held_out_clients: int = 10
    transform: str = "rotation"
    alpha: float = 0.05
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_domains < 1 or self.num_classes < 1:
            raise ConfigError("num_domains and num_classes must be >= 1")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.samples_per_client < 1 or self.num_clients < 1 or self.held_out_clients < 0:
            raise ConfigError("client and sample counts must be positive")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"transform must be one of {TRANSFORMS}")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")


@dataclass(frozen=True)
class FederatedDataset:
    clients: tuple[ClientDataset, ...]
    held_out_clients: tuple[ClientDataset, ...] = ()
    validation_clients: tuple[ClientDataset, ...] = ()
    num_classes: int = 0
    input_shape: tuple[int, ...] = ()
    domain_labels: Mapping[str, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        object.__setattr__(self, "held_out_clients", tuple(self.held_out_clients))
        object.__setattr__(self, "validation_clients", tuple(self.validation_clients))
        groups = [self.clients, self.held_out_clients, self.validation_clients]
        ids = [c.client_id for g in groups for c in g]
        if len(set(ids)) != len(ids):
            raise SplitError("client ids must be unique across splits")

    def all_clients(self) -> list[ClientDataset]:
        return [*self.clients, *self.validation_clients, *self.held_out_clients]

    def domains_of(self, client_id: str) -> np.ndarray | None:
        if self.domain_labels is None:
            return None
        return self.domain_labels.get(client_id)


# ---------------------------------------------------------------------------
# synthetic generation


def _templates(rng: np.random.Generator, num_classes: int, shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    raw = rng.uniform(0.0, 1.0, size=(num_classes, c, h, w))
    smooth = ndimage.gaussian_filter(raw, sigma=(0, 0, 1.0, 1.0), mode="wrap")
    lo = smooth.min(axis=(1, 2, 3), keepdims=True)
    hi = smooth.max(axis=(1, 2, 3), keepdims=True)
    return (smooth - lo) / np.maximum(hi - lo, 1e-12)


def _domain_transforms(spec: SyntheticSpec, rng: np.random.Generator):
    """One callable per domain mapping a batch ``(n, c, h, w)`` to the same shape."""
    D = spec.num_domains
    c, h, w = spec.input_shape
    fns = []
    for d in range(D):
        if spec.transform == "rotation":
            if h == w and D <= 4:
                fns.append(lambda x, k=d: np.rot90(x, k=k, axes=(2, 3)))
            else:
                angle = 360.0 * d / D
                fns.append(lambda x, a=angle: ndimage.rotate(x, a, axes=(3, 2), reshape=False, order=1, mode="nearest"))
        elif spec.transform == "channel-shift":
            # Domain d squeezes intensities into the band [d/D, (d+1)/D];
            # the upper half of the domains also inverts polarity.
            def shift(x, d=d, flip=d >= D / 2):
                return (d + (1.0 - x if flip else x)) / D

            fns.append(shift)
        else:
            theta = 2 * math.pi * d / D + rng.uniform(-0.2, 0.2)
            scale = rng.uniform(0.8, 1.2)
            shear = rng.uniform(-0.3, 0.3)
            rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
            mat = rot @ np.array([[1.0, shear], [0.0, 1.0]]) * scale
            inv = np.linalg.inv(mat)
            center = np.array([(h - 1) / 2, (w - 1) / 2])
            off = center - inv @ center

            def warp(x, inv=inv, off=off):
                out = np.empty_like(x)
                for i in range(x.shape[0]):
                    for ch in range(x.shape[1]):
                        out[i, ch] = ndimage.affine_transform(x[i, ch], inv, offset=off, order=1, mode="nearest")
                return out

            fns.append(warp)
    return fns


def generate_synthetic(spec: SyntheticSpec) -> FederatedDataset:
    """Class templates plus Gaussian pixel noise, then a fixed per-domain
    transform. Each client mixes domains with proportions drawn from
    Dirichlet(alpha); labels are uniform."""
    rng = np.random.default_rng(spec.seed)
    templates = _templates(rng, spec.num_classes, spec.input_shape)
    transforms = _domain_transforms(spec, rng)
    D = spec.num_domains
    clients, held_out, domain_labels = [], [], {}
    for idx in range(spec.num_clients + spec.held_out_clients):
        is_held = idx >= spec.num_clients
        cid = f"heldout_{idx - spec.num_clients:04d}" if is_held else f"client_{idx:04d}"
        mix = rng.dirichlet(np.full(D, spec.alpha)) if D > 1 else np.ones(1)
        mix = mix / mix.sum()
        n = spec.samples_per_client
        domains = rng.choice(D, size=n, p=mix)
        labels = rng.integers(0, spec.num_classes, size=n)
        x = templates[labels] + spec.noise * rng.standard_normal((n, *spec.input_shape))
        x = np.clip(x, 0.0, 1.0)
        for d in np.unique(domains):
            sel = domains == d
            x[sel] = transforms[d](x[sel])
        x = np.clip(x, 0.0, 1.0)
        ds = ClientDataset(cid, x, labels)
        (held_out if is_held else clients).append(ds)
        domain_labels[cid] = domains
    return FederatedDataset(
        clients=tuple(clients),
        held_out_clients=tuple(held_out),
        num_classes=spec.num_classes,
        input_shape=spec.input_shape,
        domain_labels=domain_labels,
    )


def domain_entropy(domains: np.ndarray, num_domains: int) -> float:
    """Empirical entropy (nats) of one client's domain labels."""
    counts = np.bincount(np.asarray(domains), minlength=num_domains).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# LEAF-style JSON


def _infer_shape(length: int) -> tuple[int, int, int]:
    side = math.isqrt(length)
    if side * side == length:
        return (1, side, side)
    return (1, 1, length)


def load_json_federated(
    path: str | Path,
    input_shape: Sequence[int] | None = None,
    num_classes: int | None = None,
) -> FederatedDataset:
    """Read ``{"users", "num_samples", "user_data"}``.

    Optional extension keys: ``input_shape``, ``num_classes``,
    ``held_out_users`` and ``user_domains`` (evaluation-only ground truth).
    Without a declared shape, square flat inputs become ``(1, s, s)``.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed JSON ({exc})") from exc
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read ({exc})") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    for key in ("users", "num_samples", "user_data"):
        if key not in doc:
            raise SchemaError(f"{path}: missing key {key!r}")
    users, counts, user_data = doc["users"], doc["num_samples"], doc["user_data"]
    if not isinstance(users, list) or not isinstance(counts, list) or len(users) != len(counts):
        raise SchemaError(f"{path}: users and num_samples must be lists of equal length")
    if input_shape is None and "input_shape" in doc:
        input_shape = doc["input_shape"]
    if num_classes is None and "num_classes" in doc:
        num_classes = int(doc["num_classes"])
    held = set(doc.get("held_out_users", []))
    user_domains = doc.get("user_domains")
    clients, held_out, domain_labels = [], [], {}
    max_label = -1
    for user, count in zip(users, counts):
        entry = user_data.get(user) if isinstance(user_data, dict) else None
        if not isinstance(entry, dict) or "x" not in entry or "y" not in entry:
            raise SchemaError(f"{path}: user {user!r} lacks x/y data")
        xs, ys = entry["x"], entry["y"]
        if len(ys) != count or len(xs) != count:
            raise SchemaError(f"{path}: user {user!r} declares {count} samples but has {len(xs)} x / {len(ys)} y")
        if count == 0:
            raise SchemaError(f"{path}: user {user!r} has no samples")
        try:
            x = np.asarray(xs, dtype=np.float64)
            y = np.asarray(ys)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: user {user!r} has ragged or non-numeric data") from exc
        if x.ndim != 2:
            raise SchemaError(f"{path}: user {user!r} x must be a list of flat rows")
        if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
            raise SchemaError(f"{path}: user {user!r} y must be integers")
        if input_shape is None:
            input_shape = _infer_shape(x.shape[1])
        shape = tuple(int(s) for s in input_shape)
        if int(np.prod(shape)) != x.shape[1]:
            raise SchemaError(f"{path}: user {user!r} rows have length {x.shape[1]}, expected {int(np.prod(shape))}")
        if num_classes is not None and (y.min() < 0 or y.max() >= num_classes):
            raise SchemaError(f"{path}: user {user!r} has labels outside [0, {num_classes})")
        if y.min() < 0:
            raise SchemaError(f"{path}: user {user!r} has negative labels")
        max_label = max(max_label, int(y.max()))
        ds = ClientDataset(str(user), x.reshape((count, *shape)), y)
        (held_out if user in held else clients).append(ds)
        if user_domains is not None and user in user_domains:
            domain_labels[str(user)] = np.asarray(user_domains[user], dtype=np.int64)
    return FederatedDataset(
        clients=tuple(clients),
        held_out_clients=tuple(held_out),
        num_classes=num_classes if num_classes is not None else max_label + 1,
        input_shape=tuple(int(s) for s in input_shape) if input_shape is not None else (),
        domain_labels=domain_labels or None,
    )


def save_json_federated(dataset: FederatedDataset, path: str | Path) -> Path:
    """Write ``dataset`` in the format read by :func:`load_json_federated`."""
    path = Path(path)
    everyone = dataset.all_clients()
    doc = {
        "users": [c.client_id for c in everyone],
        "num_samples": [c.n for c in everyone],
        "user_data": {
            c.client_id: {"x": c.x.reshape(c.n, -1).tolist(), "y": c.y.tolist()} for c in everyone
        },
        "input_shape": list(dataset.input_shape),
        "num_classes": dataset.num_classes,
        "held_out_users": [c.client_id for c in dataset.held_out_clients],
    }
    if dataset.domain_labels:
        doc["user_domains"] = {k: np.asarray(v).tolist() for k, v in dataset.domain_labels.items()}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    return path


# ---------------------------------------------------------------------------
# splits


def split_clients(
    dataset: FederatedDataset,
    train_fraction: float,
    seed: int = 0,
    val_fraction: float = 0.0,
    test_fraction: float | None = None,
) -> FederatedDataset:
    """Shuffle all clients and re-split them into train / validation / test.

    ``test_fraction`` defaults to whatever the other two leave over.
    """
    if test_fraction is None:
        test_fraction = 1.0 - train_fraction - val_fraction
    fracs = (train_fraction, val_fraction, test_fraction)
    if not 0 < train_fraction < 1 or any(f < 0 or f >= 1 for f in fracs) or sum(fracs) > 1 + 1e-9:
        raise SplitError(f"invalid split fractions {fracs}")
    pool = dataset.all_clients()
    n = len(pool)
    sizes = [int(round(f * n)) for f in fracs]
    if any(f > 0 and s == 0 for f, s in zip(fracs, sizes)) or sum(sizes) > n:
        raise SplitError(f"{n} clients are too few for fractions {fracs}")
    order = np.random.default_rng(seed).permutation(n)
    picked = [pool[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return FederatedDataset(
        clients=tuple(picked[:a]),
        validation_clients=tuple(picked[a:b]),
        held_out_clients=tuple(picked[b : b + sizes[2]]),
        num_classes=dataset.num_classes,
        input_shape=dataset.input_shape,
        domain_labels=dataset.domain_labels,
    )
