"""Dense MLP substrate with batch norm layers whose statistics can be mixed.

Everything is float64 numpy. A :class:`Model` is treated as an immutable
value: every operation that changes parameters or statistics returns a new
model and leaves its argument untouched.

The learnable parameters are exposed as one flat vector whose layout is
fixed by :class:`ParamLayout` (``weight, bias`` for dense layers and
``gamma, delta`` for BN layers, in layer order). Each of those tensors is a
*parameter group* and carries its own fine-tuning learning rate, so a model
with ``M`` learnable layers has ``2M`` groups.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DEFAULT_EPS = 1e-5


class DivergenceError(ArithmeticError):
    """Raised when a loss, activation or gradient stops being finite."""


# --------------------------------------------------------------------------
# Layers and model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray

    @property
    def param_names(self) -> tuple[str, str]:
        return ("weight", "bias")


@dataclass(frozen=True)
class BatchNorm:
    gamma: np.ndarray
    delta: np.ndarray
    pt_mean: np.ndarray
    pt_var: np.ndarray
    client_mean: np.ndarray | None = None
    client_var: np.ndarray | None = None
    momentum: float = 0.1
    eps: float = DEFAULT_EPS

    @property
    def param_names(self) -> tuple[str, str]:
        return ("gamma", "delta")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class ReLU:
    pass


Layer = Dense | BatchNorm | ReLU


@dataclass(frozen=True)
class Model:
    layers: tuple

    @property
    def learnable(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if not isinstance(l, ReLU)]

    @property
    def bn_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, BatchNorm)]

    @property
    def n_layers(self) -> int:
        """Number of learnable layers (M)."""
        return len(self.learnable)

    @property
    def n_bn(self) -> int:
        """Number of BN layers (B)."""
        return len(self.bn_indices)

    @property
    def in_dim(self) -> int:
        first = self.layers[0]
        return first.weight.shape[0] if isinstance(first, Dense) else first.channels

    @property
    def has_client_stats(self) -> bool:
        return all(self.layers[i].client_mean is not None for i in self.bn_indices)

    def replace_layer(self, index: int, layer) -> "Model":
        layers = list(self.layers)
        layers[index] = layer
        return Model(tuple(layers))


def init_model(in_dim: int, hidden: Sequence[int], n_classes: int,
               rng: np.random.Generator, batch_norm: bool = True,
               input_bn: bool = False, eps: float = DEFAULT_EPS,
               momentum: float = 0.1) -> Model:
    """Build ``[BN] -> (Dense -> BN -> ReLU)* -> Dense`` with He-normal weights."""
    def bn(ch):
        return BatchNorm(np.ones(ch), np.zeros(ch), np.zeros(ch), np.ones(ch),
                         momentum=momentum, eps=eps)

    layers: list = []
    if input_bn:
        layers.append(bn(in_dim))
    width = in_dim
    for h in hidden:
        w = rng.normal(0.0, np.sqrt(2.0 / width), size=(width, h))
        layers.append(Dense(w, np.zeros(h)))
        if batch_norm:
            layers.append(bn(h))
        layers.append(ReLU())
        width = h
    w = rng.normal(0.0, np.sqrt(1.0 / width), size=(width, n_classes))
    layers.append(Dense(w, np.zeros(n_classes)))
    return Model(tuple(layers))


def model_to_records(model: Model) -> list[dict]:
    """JSON-ready layer list; floats go through ``repr`` so reloads are exact."""
    out = []
    for layer in model.layers:
        if isinstance(layer, ReLU):
            out.append({"kind": "relu"})
            continue
        rec = {"kind": "dense" if isinstance(layer, Dense) else "batchnorm"}
        for name, value in vars(layer).items():
            if isinstance(value, np.ndarray):
                rec[name] = {"shape": list(value.shape), "values": value.ravel().tolist()}
            else:
                rec[name] = value
        out.append(rec)
    return out


def model_from_records(records: list[dict]) -> Model:
    kinds = {"dense": Dense, "batchnorm": BatchNorm}
    layers = []
    for rec in records:
        if rec["kind"] == "relu":
            layers.append(ReLU())
            continue
        fields = {}
        for name, value in rec.items():
            if name == "kind":
                continue
            if isinstance(value, dict):
                value = np.array(value["values"], dtype=float).reshape(value["shape"])
            fields[name] = value
        layers.append(kinds[rec["kind"]](**fields))
    return Model(tuple(layers))


def save_model(model: Model, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"layers": model_to_records(model)}))


def load_model(path: str | Path) -> Model:
    return model_from_records(json.loads(Path(path).read_text())["layers"])


# --------------------------------------------------------------------------
# Parameter vectors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamLayout:
    """Flat-vector layout of a model's learnable parameter groups."""

    groups: tuple  # (layer index, attribute name, shape)
    offsets: tuple

    @classmethod
    def of(cls, model: Model) -> "ParamLayout":
        groups, offsets, pos = [], [0], 0
        for i in model.learnable:
            layer = model.layers[i]
            for name in layer.param_names:
                shape = getattr(layer, name).shape
                groups.append((i, name, shape))
                pos += int(np.prod(shape))
                offsets.append(pos)
        return cls(tuple(groups), tuple(offsets))

    @property
    def size(self) -> int:
        return self.offsets[-1]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def group_sizes(self) -> np.ndarray:
        return np.diff(np.asarray(self.offsets))

    def group_slice(self, k: int) -> slice:
        return slice(self.offsets[k], self.offsets[k + 1])

    def expand(self, per_group: np.ndarray) -> np.ndarray:
        """Broadcast one value per group to one value per coordinate."""
        per_group = np.asarray(per_group, dtype=float)
        if per_group.shape != (self.n_groups,):
            raise ValueError(f"expected {self.n_groups} group values, got {per_group.shape}")
        return np.repeat(per_group, self.group_sizes)

    def flatten(self, model: Model) -> np.ndarray:
        return np.concatenate([getattr(model.layers[i], name).ravel()
                               for i, name, _ in self.groups])

    def unflatten(self, model: Model, vec: np.ndarray) -> Model:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {vec.shape}, expected ({self.size},)")
        updates: dict[int, dict] = {}
        for k, (i, name, shape) in enumerate(self.groups):
            updates.setdefault(i, {})[name] = vec[self.group_slice(k)].reshape(shape).copy()
        layers = list(model.layers)
        for i, kw in updates.items():
            layers[i] = replace(layers[i], **kw)
        return Model(tuple(layers))


def flatten(model: Model) -> np.ndarray:
    return ParamLayout.of(model).flatten(model)


def unflatten(model: Model, vec: np.ndarray) -> Model:
    return ParamLayout.of(model).unflatten(model, vec)


# --------------------------------------------------------------------------
# BN modes and statistic mixing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BNMode:
    """How BN layers pick their normalization statistics.

    ``client`` and ``global`` are the ``beta = 1`` and ``beta = 0`` ends of
    ``mixed`` and go through the same arithmetic, so they agree bit for bit
    with the corresponding mixed mode. ``incoming`` normalizes with the
    statistics of the batch being processed, in training and evaluation alike.
    """

    kind: str
    beta: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("client", "global", "incoming", "mixed"):
            raise ValueError(f"unknown BN mode {self.kind!r}")
        if self.kind == "mixed":
            beta = np.asarray(self.beta, dtype=float).ravel()
            if np.any(beta < 0.0) or np.any(beta > 1.0) or not np.all(np.isfinite(beta)):
                raise ValueError("mixed BN mode needs beta entries in [0, 1]")
            object.__setattr__(self, "beta", beta)

    @classmethod
    def mixed(cls, beta) -> "BNMode":
        return cls("mixed", np.asarray(beta, dtype=float))

    def beta_for(self, b: int) -> float | None:
        if self.kind == "client":
            return 1.0
        if self.kind == "global":
            return 0.0
        if self.kind == "mixed":
            return float(self.beta[b])
        return None


CLIENT = BNMode("client")
GLOBAL = BNMode("global")
INCOMING = BNMode("incoming")


def mix_bn_stats(pt: tuple, client: tuple, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of pretrained and client (mean, variance) pairs."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    pt_mean, pt_var = (np.asarray(a, dtype=float) for a in pt)
    cl_mean, cl_var = (np.asarray(a, dtype=float) for a in client)
    if np.any(pt_var < 0) or np.any(cl_var < 0):
        raise ValueError("variances must be non-negative")
    mean = (1.0 - beta) * pt_mean + beta * cl_mean
    var = (1.0 - beta) * pt_var + beta * cl_var
    return mean, var


def _effective_stats(layer: BatchNorm, beta: float):
    if layer.client_mean is None:
        if beta != 0.0:
            raise ValueError("client BN statistics are not set; run update_running_stats first")
        return layer.pt_mean, layer.pt_var
    return mix_bn_stats((layer.pt_mean, layer.pt_var),
                        (layer.client_mean, layer.client_var), beta)


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


@dataclass
class Cache:
    """Per-layer record of a forward pass."""

    inputs: list  # input to every layer, in order
    bn: dict  # layer index -> (xhat, inv_std, batch_stats_used)
    relu_masks: dict


def forward(model: Model, x: np.ndarray, mode: BNMode = GLOBAL,
            masks: dict | None = None) -> tuple[np.ndarray, Cache]:
    """Run the network on a batch.

    ``masks`` (layer index -> boolean array, e.g. ``cache.relu_masks`` of an
    earlier pass on the same batch) pins the ReLU activation pattern. Finite
    differences of gradients taken with pinned masks give the almost-everywhere
    Hessian instead of jumps across ReLU kinks.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ValueError(f"batch shape {x.shape} does not match input dim {model.in_dim}")
    cache = Cache([], {}, {})
    b = 0
    h = x
    for i, layer in enumerate(model.layers):
        cache.inputs.append(h)
        if isinstance(layer, Dense):
            h = h @ layer.weight + layer.bias
        elif isinstance(layer, BatchNorm):
            beta = mode.beta_for(b)
            if beta is None:
                mean, var = h.mean(axis=0), h.var(axis=0)
            else:
                mean, var = _effective_stats(layer, beta)
            inv_std = 1.0 / np.sqrt(var + layer.eps)
            xhat = (h - mean) * inv_std
            cache.bn[i] = (xhat, inv_std, beta is None)
            h = xhat * layer.gamma + layer.delta
            b += 1
        else:
            mask = h > 0 if masks is None else masks[i]
            cache.relu_masks[i] = mask
            h = h * mask
    if not np.all(np.isfinite(h)):
        raise DivergenceError("non-finite activation in forward pass")
    return h, cache


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if logits.shape[0] == 0:
        raise ValueError("cross entropy of an empty batch")
    if logits.shape[0] != labels.shape[0]:
        raise ValueError("logits and labels disagree on batch size")
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def backward(model: Model, cache: Cache, dout: np.ndarray) -> np.ndarray:
    """Reverse pass; returns the flat gradient aligned with ``ParamLayout.of(model)``."""
    grads: dict[tuple[int, str], np.ndarray] = {}
    d = dout
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, Dense):
            grads[(i, "weight")] = cache.inputs[i].T @ d
            grads[(i, "bias")] = d.sum(axis=0)
            if i > 0:
                d = d @ layer.weight.T
        elif isinstance(layer, BatchNorm):
            xhat, inv_std, batch_stats = cache.bn[i]
            grads[(i, "gamma")] = (d * xhat).sum(axis=0)
            grads[(i, "delta")] = d.sum(axis=0)
            dxhat = d * layer.gamma
            if batch_stats:
                n = d.shape[0]
                d = inv_std / n * (n * dxhat - dxhat.sum(axis=0)
                                   - xhat * (dxhat * xhat).sum(axis=0))
            else:
                d = dxhat * inv_std
        else:
            d = d * cache.relu_masks[i]
    layout = ParamLayout.of(model)
    return np.concatenate([grads[(i, name)].ravel() for i, name, _ in layout.groups])


def loss_and_grad(model: Model, x: np.ndarray, y: np.ndarray,
                  mode: BNMode = GLOBAL, masks: dict | None = None) -> tuple[float, np.ndarray]:
    logits, cache = forward(model, x, mode, masks)
    y = np.asarray(y, dtype=int)
    loss = cross_entropy(logits, y)
    probs = np.exp(log_softmax(logits))
    probs[np.arange(len(y)), y] -= 1.0
    g = backward(model, cache, probs / len(y))
    if not (np.isfinite(loss) and np.all(np.isfinite(g))):
        raise DivergenceError("non-finite loss or gradient")
    return loss, g


def grad(model: Model, x: np.ndarray, y: np.ndarray, mode: BNMode = GLOBAL,
         masks: dict | None = None) -> np.ndarray:
    """Gradient of the mean cross entropy w.r.t. every learnable group.

    BN running statistics are constants here; only gamma/delta get gradients.
    """
    return loss_and_grad(model, x, y, mode, masks)[1]


def relu_masks(model: Model, x: np.ndarray, mode: BNMode = GLOBAL) -> dict:
    return forward(model, x, mode)[1].relu_masks


def loss(model: Model, x: np.ndarray, y: np.ndarray, mode: BNMode = GLOBAL) -> float:
    logits, _ = forward(model, x, mode)
    return cross_entropy(logits, y)


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, mode: BNMode = GLOBAL) -> float:
    logits, _ = forward(model, x, mode)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(y)))


# --------------------------------------------------------------------------
# Optimization
# --------------------------------------------------------------------------


def sgd_step(theta: np.ndarray, g: np.ndarray, eta: np.ndarray,
             layout: ParamLayout) -> np.ndarray:
    """One plain SGD step with a learning rate per parameter group.

    Rates may be negative; a zero rate freezes the group.
    """
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(g, dtype=float)
    if theta.shape != g.shape or theta.shape != (layout.size,):
        raise ValueError("parameter and gradient vectors do not match the layout")
    return theta - layout.expand(eta) * g


@dataclass
class FinetuneTrace:
    """Result of :func:`finetune_trace`.

    ``pre_step`` is the parameter vector before the final SGD step and
    ``last_batch`` the indices that step used, so the step can be re-taken
    under perturbed learning rates or mixing ratios. ``grad_sum`` is the sum
    of all mini-batch gradients, so that with constant per-group rates
    ``theta* = theta_0 - expand(eta) * grad_sum``.
    """

    model: Model
    pre_step: np.ndarray
    last_batch: np.ndarray
    grad_sum: np.ndarray
    losses: list


def finetune_trace(model: Model, x: np.ndarray, y: np.ndarray, mode: BNMode,
                   eta: np.ndarray, epochs: int, batch_size: int,
                   rng: np.random.Generator) -> FinetuneTrace:
    if epochs < 1:
        raise ValueError("fine-tuning needs at least one epoch")
    layout = ParamLayout.of(model)
    theta = layout.flatten(model)
    pre, last, losses = theta, np.arange(0), []
    grad_sum = np.zeros_like(theta)
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            current = layout.unflatten(model, theta)
            loss_value, g = loss_and_grad(current, x[idx], y[idx], mode)
            losses.append(loss_value)
            grad_sum += g
            pre, last = theta, idx
            theta = sgd_step(theta, g, eta, layout)
            if not np.all(np.isfinite(theta)):
                raise DivergenceError("fine-tuning diverged")
    return FinetuneTrace(layout.unflatten(model, theta), pre, last, grad_sum, losses)


def finetune(model: Model, x: np.ndarray, y: np.ndarray, mode: BNMode,
             eta: np.ndarray, epochs: int, batch_size: int,
             rng: np.random.Generator) -> Model:
    """Mini-batch SGD for ``epochs`` epochs with per-group learning rates."""
    return finetune_trace(model, x, y, mode, eta, epochs, batch_size, rng).model


def layer_input_stats(model: Model, x: np.ndarray) -> tuple[Cache, list]:
    """Forward ``x`` with pretrained statistics and return the inputs of every BN layer."""
    _, cache = forward(model, x, GLOBAL)
    return cache, [cache.inputs[i] for i in model.bn_indices]


def update_running_stats(model: Model, x: np.ndarray) -> Model:
    """Install exact full-dataset client statistics into every BN layer.

    The statistics of each BN layer's input are measured in one forward pass
    that normalizes with the pretrained statistics.
    """
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        raise ValueError("cannot estimate statistics from an empty dataset")
    _, bn_inputs = layer_input_stats(model, x)
    return with_client_stats(model, [_column_stats(h) for h in bn_inputs])


def _column_stats(h):
    var = h.var(axis=0)
    var[np.ptp(h, axis=0) == 0] = 0.0  # rounding in the mean would leave ~1e-33
    return h.mean(axis=0), var


def with_client_stats(model: Model, stats: Sequence[tuple]) -> Model:
    layers = list(model.layers)
    for i, (mean, var) in zip(model.bn_indices, stats):
        layers[i] = replace(layers[i], client_mean=np.asarray(mean, dtype=float),
                            client_var=np.asarray(var, dtype=float))
    return Model(tuple(layers))


def hvp(theta: np.ndarray, v: np.ndarray,
        loss_at: Callable[[np.ndarray], tuple[float, np.ndarray]],
        step: float = 1e-4) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient.

    ``loss_at`` maps a parameter vector to ``(loss, gradient)``.
    """
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    if step <= 0:
        raise ValueError("step must be positive")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return np.zeros_like(v)
    s = step * (1.0 + np.max(np.abs(theta), initial=0.0))
    direction = v / norm
    _, g_plus = loss_at(theta + s * direction)
    _, g_minus = loss_at(theta - s * direction)
    out = (g_plus - g_minus) * (norm / (2.0 * s))
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite Hessian-vector product")
    return out
