"""Federated orchestration: FedAvg pretraining and federated meta-net learning."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .data import ClientDataset
from .hypergrad import (ClientStep, FinetuneSettings, HypergradConfig, client_hypergradient,
                        meta_update)
from .metanets import MetaParams, hyper_outputs
from .nn import INCOMING, BatchNorm, BNMode, DivergenceError, Model, ParamLayout
from .profile import ClientProfile, build_profile

log = logging.getLogger(__name__)


def fedavg_aggregate(items: Sequence[tuple[np.ndarray, float]]) -> np.ndarray:
    """Sample-count weighted mean of client vectors.

    ``items`` must already be in the reduction order (ascending client id)
    so repeated runs add the terms in the same order.
    """
    if not items:
        raise ValueError("nothing to aggregate")
    counts = np.array([n for _, n in items], dtype=float)
    if np.any(counts <= 0):
        raise ValueError("sample counts must be positive")
    total = counts.sum()
    # averaging offsets from the first vector keeps identical inputs exact
    first = np.asarray(items[0][0], dtype=float)
    offset = np.zeros_like(first)
    for (value, _), n in zip(items, counts):
        value = np.asarray(value, dtype=float)
        if value.shape != first.shape:
            raise ValueError("client vectors differ in shape")
        offset = offset + (n / total) * (value - first)
    return first + offset


def n_sampled(n_clients: int, fraction: float) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction ratio must lie in (0, 1]")
    return max(1, math.ceil(n_clients * fraction - 1e-9))


def sample_clients(n_clients: int, fraction: float, seed: int, round_index: int) -> list[int]:
    """Uniform sample without replacement of ``ceil(C * r)`` ids, fixed per (seed, round)."""
    k = n_sampled(n_clients, fraction)
    rng = np.random.default_rng([seed, round_index])
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


# --------------------------------------------------------------------------
# FedAvg pretraining
# --------------------------------------------------------------------------


def _local_epoch(model: Model, x, y, lr: float, epochs: int, batch_size: int, rng) -> Model:
    """Plain SGD with batch statistics; BN running estimates follow by momentum."""
    layout = ParamLayout.of(model)
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x[idx], y[idx]
            _, g = nn.loss_and_grad(model, xb, yb, INCOMING)
            model = _track_stats(model, xb)
            theta = layout.flatten(model) - lr * g
            if not np.all(np.isfinite(theta)):
                raise DivergenceError("pretraining diverged")
            model = layout.unflatten(model, theta)
    return model


def _track_stats(model: Model, xb) -> Model:
    _, cache = nn.forward(model, xb, INCOMING)
    layers = list(model.layers)
    for i in model.bn_indices:
        h, layer = cache.inputs[i], layers[i]
        m = layer.momentum
        var = h.var(axis=0, ddof=1) if len(h) > 1 else h.var(axis=0)
        layers[i] = replace(layer, pt_mean=(1 - m) * layer.pt_mean + m * h.mean(axis=0),
                            pt_var=(1 - m) * layer.pt_var + m * var)
    return Model(tuple(layers))


def _stats_vector(model: Model) -> np.ndarray:
    parts = []
    for i in model.bn_indices:
        parts += [model.layers[i].pt_mean, model.layers[i].pt_var]
    return np.concatenate(parts) if parts else np.zeros(0)


def _with_stats_vector(model: Model, vec: np.ndarray) -> Model:
    layers, pos = list(model.layers), 0
    for i in model.bn_indices:
        c = layers[i].channels
        layers[i] = replace(layers[i], pt_mean=vec[pos:pos + c].copy(),
                            pt_var=vec[pos + c:pos + 2 * c].copy())
        pos += 2 * c
    return Model(tuple(layers))


def federated_bn_stats(model: Model, clients: Sequence[ClientDataset]) -> Model:
    """Replace the pretrained BN statistics by exact pooled statistics of the
    clients' training data under the final model.

    Layers are refreshed front to back, so each layer's statistics are
    measured with the already refreshed statistics of the layers before it.
    Clients only share per-channel sums, weighted by sample count.
    """
    clients = sorted(clients, key=lambda c: c.client_id)
    layers = list(model.layers)
    for pos, i in enumerate(model.bn_indices):
        current = Model(tuple(layers))
        means, squares = [], []
        for c in clients:
            h = nn.layer_input_stats(current, c.x_train)[1][pos]
            means.append((h.mean(axis=0), c.n_train))
            squares.append(((h ** 2).mean(axis=0), c.n_train))
        mean = fedavg_aggregate(means)
        var = np.maximum(fedavg_aggregate(squares) - mean ** 2, 0.0)
        layers[i] = replace(layers[i], pt_mean=mean, pt_var=var)
    return Model(tuple(layers))


def pretrain_fedavg(model: Model, clients: Sequence[ClientDataset], rounds: int, lr: float,
                    seed: int, fraction: float = 1.0, batch_size: int = 32,
                    local_epochs: int = 1, milestones: Sequence[float] = (0.5, 0.75),
                    lr_decay: float = 0.1, exact_stats: bool = True) -> Model:
    """FedAvg over parameters and BN running statistics.

    The learning rate drops by ``lr_decay`` at each milestone fraction of the
    rounds. With ``exact_stats`` the momentum-tracked statistics, which lag
    behind the averaged parameters, are finally replaced by one exact
    federated pass (:func:`federated_bn_stats`).
    """
    if rounds < 1:
        raise ValueError("pretraining needs at least one round")
    layout = ParamLayout.of(model)
    clients = sorted(clients, key=lambda c: c.client_id)
    for t in range(rounds):
        rate = lr * lr_decay ** sum(t >= m * rounds for m in milestones)
        chosen = sample_clients(len(clients), fraction, seed, t)
        params, stats = [], []
        for cid in chosen:
            c = clients[cid]
            rng = np.random.default_rng([seed, t, cid, 7])
            local = _local_epoch(model, c.x_train, c.y_train, rate, local_epochs, batch_size, rng)
            params.append((layout.flatten(local), c.n_train))
            stats.append((_stats_vector(local), c.n_train))
        model = layout.unflatten(model, fedavg_aggregate(params))
        model = _with_stats_vector(model, fedavg_aggregate(stats))
    if exact_stats:
        model = federated_bn_stats(model, clients)
    return model


# --------------------------------------------------------------------------
# Federated meta-net learning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FLConfig:
    rounds: int = 500
    fraction: float = 0.1
    epochs: int = 15
    batch_size: int = 32
    meta_iters: int = 1
    seed: int = 0
    workers: int = 1
    hypergrad: HypergradConfig = field(default_factory=HypergradConfig)

    def __post_init__(self):
        if self.rounds < 0 or self.meta_iters < 0:
            raise ValueError("rounds and meta iterations must be non-negative")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction ratio must lie in (0, 1]")

    @property
    def finetune(self) -> FinetuneSettings:
        return FinetuneSettings(self.epochs, self.batch_size)


@dataclass
class ClientRecord:
    client_id: int
    val_loss: float
    n_samples: int
    diverged: bool


@dataclass
class RoundRecord:
    round: int
    clients: list
    checksum: str
    mean_val_loss: float

    @property
    def participants(self) -> list[int]:
        return [c.client_id for c in self.clients]


@dataclass
class FedL2PResult:
    meta: MetaParams  # best checkpoint
    final: MetaParams
    records: list
    best_round: int


def profile_clients(model: Model, clients: Sequence[ClientDataset]) -> dict[int, ClientProfile]:
    """Profiles depend only on the frozen global model and local training data."""
    return {c.client_id: build_profile(model, c.x_train) for c in clients}


def evaluate_val_loss(meta: MetaParams, model: Model, profile: ClientProfile,
                      client: ClientDataset, ft: FinetuneSettings,
                      rng: np.random.Generator) -> float:
    out = hyper_outputs(meta, profile.xi, profile.feat_stats)
    mode = BNMode.mixed(out.beta)
    tuned = nn.finetune(profile.install(model), client.x_train, client.y_train, mode,
                        out.eta, ft.epochs, ft.batch_size, rng)
    return nn.loss(tuned, client.x_val, client.y_val, mode)


def client_meta_steps(meta: MetaParams, model: Model, profile: ClientProfile,
                      client: ClientDataset, cfg: FLConfig, iters: int,
                      seed_path: Sequence[int]) -> tuple[MetaParams, float]:
    """Run ``iters`` (fine-tune, hypergradient, meta step) iterations on one client.

    Returns the locally updated meta-params and the validation loss reached
    under the meta-params the client started from.
    """
    local_model = profile.install(model)
    val_loss = math.nan
    for k in range(iters):
        rng = np.random.default_rng([*seed_path, k])
        step: ClientStep = client_hypergradient(meta, local_model, profile, client.train,
                                                client.val, cfg.hypergrad, cfg.finetune, rng)
        if k == 0:
            val_loss = step.val_loss
        meta = meta_update(meta, step.hypergrad, cfg.hypergrad)
    if iters == 0:
        rng = np.random.default_rng([*seed_path, 0])
        val_loss = evaluate_val_loss(meta, model, profile, client, cfg.finetune, rng)
    return meta, val_loss


def _client_job(args):
    meta, model, profile, client, cfg, seed_path = args
    try:
        new_meta, val_loss = client_meta_steps(meta, model, profile, client, cfg,
                                               cfg.meta_iters, seed_path)
    except (DivergenceError, FloatingPointError, ValueError) as exc:
        return client.client_id, None, math.nan, str(exc)
    if not (new_meta.is_finite() and np.isfinite(val_loss)):
        return client.client_id, None, math.nan, "non-finite result"
    return client.client_id, new_meta, val_loss, None


def run_fedl2p(model: Model, clients: Sequence[ClientDataset], meta: MetaParams,
               cfg: FLConfig, profiles: dict | None = None,
               on_round=None) -> FedL2PResult:
    """Federated learning of the meta-nets with best-validation checkpointing.

    ``model`` (the pretrained global model) is never modified. Each round the
    sampled clients start from the broadcast meta-params, the server averages
    the returned meta-params weighted by training-set size, and the broadcast
    meta-params whose round achieved the lowest mean validation loss are kept.
    """
    clients = sorted(clients, key=lambda c: c.client_id)
    by_id = {c.client_id: c for c in clients}
    ids = [c.client_id for c in clients]
    profiles = profiles or profile_clients(model, clients)
    records: list[RoundRecord] = []
    best, best_loss, best_round = meta, math.inf, -1
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(cfg.rounds):
            chosen = [ids[i] for i in sample_clients(len(ids), cfg.fraction, cfg.seed, t)]
            jobs = [(meta, model, profiles[cid], by_id[cid], cfg, (cfg.seed, t, cid))
                    for cid in chosen]
            results = list(pool.map(_client_job, jobs)) if pool else [_client_job(j) for j in jobs]
            results.sort(key=lambda r: r[0])
            crecs, items = [], []
            for cid, new_meta, val_loss, err in results:
                diverged = new_meta is None
                if diverged:
                    log.warning("round %d: client %d dropped (%s)", t, cid, err)
                else:
                    items.append((new_meta.to_vector(), by_id[cid].n_train))
                crecs.append(ClientRecord(cid, val_loss, by_id[cid].n_train, diverged))
            ok = [r.val_loss for r in crecs if not r.diverged]
            mean_loss = float(np.mean(ok)) if ok else math.nan
            if ok and mean_loss < best_loss:
                best, best_loss, best_round = meta, mean_loss, t
            if items:
                meta = meta.from_vector(fedavg_aggregate(items))
            else:
                log.warning("round %d: every client diverged, meta-params unchanged", t)
            rec = RoundRecord(t, crecs, meta.checksum(), mean_loss)
            records.append(rec)
            if on_round is not None:
                on_round(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    if best_round < 0:
        best = meta
    return FedL2PResult(best, meta, records, best_round)
