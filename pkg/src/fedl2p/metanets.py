"""BNNet / LRNet meta-nets and the learnable learning-rate post-multiplier.

Both nets are ``in -> 100 -> 100 -> out`` ReLU MLPs whose output is clamped
(``[0, 1]`` for BNNet, ``[0, 1000]`` for LRNet) with a straight-through
gradient. LRNet's clamped output is multiplied elementwise by the
post-multiplier ``eta_tilde`` whose sign is unconstrained.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HIDDEN = 100
BN_RANGE = (0.0, 1.0)
LR_RANGE = (0.0, 1000.0)
INIT_GAIN = 0.1
BN_BIAS = 0.5
LR_BIAS = 1.0


def clamp_ste(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Clamp in the forward direction; the backward pass treats it as identity."""
    return np.clip(x, lo, hi)


def _xavier_normal(rng, fan_in, fan_out, gain):
    std = gain * np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def init_mlp(rng: np.random.Generator, n_in: int, n_out: int, bias: float,
             gain: float = INIT_GAIN, hidden: int = HIDDEN) -> tuple:
    widths = [n_in, hidden, hidden, n_out]
    params = []
    for a, b in zip(widths[:-1], widths[1:]):
        params.append(_xavier_normal(rng, a, b, gain))
        params.append(np.full(b, bias, dtype=float))
    return tuple(params)


def mlp_forward(params: tuple, x: np.ndarray) -> tuple[np.ndarray, tuple]:
    w1, b1, w2, b2, w3, b3 = params
    x = np.asarray(x, dtype=float)
    h1 = np.maximum(x @ w1 + b1, 0.0)
    h2 = np.maximum(h1 @ w2 + b2, 0.0)
    return h2 @ w3 + b3, (x, h1, h2)


def mlp_vjp(params: tuple, cache: tuple, upstream: np.ndarray) -> tuple:
    """Gradient of ``<upstream, mlp(x)>`` w.r.t. the MLP parameters."""
    w1, b1, w2, b2, w3, b3 = params
    x, h1, h2 = cache
    u = np.asarray(upstream, dtype=float)
    gw3, gb3 = np.outer(h2, u), u.copy()
    d2 = (w3 @ u) * (h2 > 0)
    gw2, gb2 = np.outer(h1, d2), d2
    d1 = (w2 @ d2) * (h1 > 0)
    gw1, gb1 = np.outer(x, d1), d1
    return (gw1, gb1, gw2, gb2, gw3, gb3)


_MLP_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass(frozen=True)
class MetaParams:
    """``lambda = {w_bn, w_lr, eta_tilde}``.

    Hypergradients use the same container, so the arithmetic helpers below
    serve both.
    """

    bn: tuple
    lr: tuple
    eta_tilde: np.ndarray

    @property
    def n_bn(self) -> int:
        return self.bn[4].shape[1]

    @property
    def n_groups(self) -> int:
        return self.eta_tilde.shape[0]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"bn.{n}", a) for n, a in zip(_MLP_NAMES, self.bn)]
        out += [(f"lr.{n}", a) for n, a in zip(_MLP_NAMES, self.lr)]
        out.append(("eta_tilde", self.eta_tilde))
        return out

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.named_arrays()])

    def from_vector(self, vec: np.ndarray) -> "MetaParams":
        vec = np.asarray(vec, dtype=float)
        arrays, pos = [], 0
        for _, a in self.named_arrays():
            arrays.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        if pos != vec.size:
            raise ValueError(f"vector of size {vec.size} does not match meta-params ({pos})")
        return MetaParams(tuple(arrays[:6]), tuple(arrays[6:12]), arrays[12])

    def block_sizes(self) -> tuple[int, int, int]:
        return (sum(a.size for a in self.bn), sum(a.size for a in self.lr), self.eta_tilde.size)

    def map(self, fn) -> "MetaParams":
        return MetaParams(tuple(fn(a) for a in self.bn), tuple(fn(a) for a in self.lr),
                          fn(self.eta_tilde))

    def zeros_like(self) -> "MetaParams":
        return self.map(np.zeros_like)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))

    def checksum(self) -> str:
        import hashlib
        return hashlib.sha256(self.to_vector().tobytes()).hexdigest()[:16]

    # serialization ---------------------------------------------------------

    def to_records(self) -> list[dict]:
        return [{"name": n, "shape": list(a.shape), "values": a.ravel().tolist()}
                for n, a in self.named_arrays()]

    @classmethod
    def from_records(cls, records: list[dict]) -> "MetaParams":
        by_name = {r["name"]: np.asarray(r["values"], dtype=float).reshape(r["shape"])
                   for r in records}
        try:
            bn = tuple(by_name[f"bn.{n}"] for n in _MLP_NAMES)
            lr = tuple(by_name[f"lr.{n}"] for n in _MLP_NAMES)
            return cls(bn, lr, by_name["eta_tilde"])
        except KeyError as exc:
            raise ValueError(f"meta-params checkpoint is missing {exc.args[0]!r}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_records()))

    @classmethod
    def load(cls, path: str | Path) -> "MetaParams":
        return cls.from_records(json.loads(Path(path).read_text()))


def init_meta(n_layers: int, n_bn: int, seed, base_lr: float = 1e-3,
              gain: float = INIT_GAIN) -> MetaParams:
    """Xavier-normal (gain 0.1) weights, constant biases 0.5 (BNNet) / 1.0 (LRNet).

    ``eta_tilde`` starts at the base fine-tuning rate so the initial
    learning rates are roughly that rate.
    """
    if n_layers < 1 or n_bn < 0:
        raise ValueError("need at least one layer and a non-negative BN count")
    rng = np.random.default_rng(seed)
    bn = init_mlp(rng, n_bn, n_bn, BN_BIAS, gain)
    lr = init_mlp(rng, 2 * n_layers, 2 * n_layers, LR_BIAS, gain)
    return MetaParams(bn, lr, np.full(2 * n_layers, float(base_lr)))


@dataclass
class HyperOutputs:
    beta: np.ndarray
    eta: np.ndarray
    raw_lr: np.ndarray  # clamped LRNet output, before the post-multiplier
    bn_cache: tuple
    lr_cache: tuple


def bnnet_forward(w_bn: tuple, xi: np.ndarray) -> tuple[np.ndarray, tuple]:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (w_bn[0].shape[0],):
        raise ValueError(f"BNNet expects {w_bn[0].shape[0]} divergences, got {xi.shape}")
    out, cache = mlp_forward(w_bn, xi)
    return clamp_ste(out, *BN_RANGE), cache


def lrnet_raw(w_lr: tuple, stats: np.ndarray) -> tuple[np.ndarray, tuple]:
    stats = np.asarray(stats, dtype=float)
    if stats.shape != (w_lr[0].shape[0],):
        raise ValueError(f"LRNet expects {w_lr[0].shape[0]} feature stats, got {stats.shape}")
    out, cache = mlp_forward(w_lr, stats)
    return clamp_ste(out, *LR_RANGE), cache


def lrnet_forward(w_lr: tuple, stats: np.ndarray, eta_tilde: np.ndarray) -> np.ndarray:
    raw, _ = lrnet_raw(w_lr, stats)
    return raw * np.asarray(eta_tilde, dtype=float)


def hyper_outputs(meta: MetaParams, xi: np.ndarray, feat_stats: np.ndarray) -> HyperOutputs:
    beta, bn_cache = bnnet_forward(meta.bn, xi)
    raw, lr_cache = lrnet_raw(meta.lr, feat_stats)
    return HyperOutputs(beta, raw * meta.eta_tilde, raw, bn_cache, lr_cache)


def bnnet_vjp(w_bn: tuple, cache: tuple, upstream: np.ndarray) -> tuple:
    return mlp_vjp(w_bn, cache, upstream)


def lrnet_vjp(w_lr: tuple, cache: tuple, raw: np.ndarray, eta_tilde: np.ndarray,
              upstream: np.ndarray) -> tuple[tuple, np.ndarray]:
    """VJP through ``eta = clamp(LRNet(stats)) * eta_tilde``.

    Returns ``(grad_w_lr, grad_eta_tilde)``.
    """
    upstream = np.asarray(upstream, dtype=float)
    return mlp_vjp(w_lr, cache, upstream * eta_tilde), upstream * raw


def metanet_vjp(meta: MetaParams, out: HyperOutputs, grad_beta: np.ndarray,
                grad_eta: np.ndarray) -> MetaParams:
    """Chain gradients w.r.t. (beta, eta) back to every meta-parameter."""
    g_bn = bnnet_vjp(meta.bn, out.bn_cache, grad_beta)
    g_lr, g_tilde = lrnet_vjp(meta.lr, out.lr_cache, out.raw_lr, meta.eta_tilde, grad_eta)
    return MetaParams(g_bn, g_lr, g_tilde)
