"""Personalization strategies, their evaluation and the sparsity metric."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .data import ClientDataset
from .federation import FLConfig, n_sampled, profile_clients, run_fedl2p
from .metanets import MetaParams, hyper_outputs
from .nn import BNMode, DivergenceError, Model, ParamLayout
from .profile import ClientProfile

BASELINES = ("FT-BN-C", "FT-BN-G", "FT-BN-I")
STRATEGIES = BASELINES + ("FedL2P", "L2P")


def sparsity(eta: np.ndarray, group_sizes: np.ndarray, tol: float = 0.0) -> float:
    """Fraction of parameters whose group learning rate satisfies ``|eta| <= tol``."""
    eta = np.abs(np.asarray(eta, dtype=float))
    sizes = np.asarray(group_sizes, dtype=float)
    if eta.shape != sizes.shape:
        raise ValueError("one learning rate per group expected")
    if tol < 0:
        raise ValueError("tolerance must be non-negative")
    return float(sizes[eta <= tol].sum() / sizes.sum())


@dataclass
class ClientEval:
    client_id: int
    domain_id: int
    accuracy: float  # mean over repeats
    val_loss: float
    sparsity: float
    mean_beta: float
    diverged: bool = False


@dataclass
class EvalReport:
    strategy: str
    repeats: int
    run_means: list  # mean client accuracy of each repeat
    clients: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.run_means))

    @property
    def sd(self) -> float:
        return float(np.std(self.run_means))

    @property
    def mean_val_loss(self) -> float:
        return float(np.nanmean([c.val_loss for c in self.clients]))

    @property
    def mean_sparsity(self) -> float:
        return float(np.mean([c.sparsity for c in self.clients]))

    @property
    def mean_beta(self) -> float:
        return float(np.nanmean([c.mean_beta for c in self.clients]))

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "repeats": self.repeats,
                "run_means": self.run_means, "mean": self.mean, "sd": self.sd,
                "clients": [asdict(c) for c in self.clients]}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["strategy"], int(d["repeats"]), list(d["run_means"]),
                   [ClientEval(**c) for c in d["clients"]])

    def save(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=1))
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["strategy", "client_id", "domain_id", "accuracy", "val_loss",
                        "sparsity", "mean_beta", "diverged"])
            for c in self.clients:
                w.writerow([self.strategy, c.client_id, c.domain_id, c.accuracy, c.val_loss,
                            c.sparsity, c.mean_beta, int(c.diverged)])

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}: not an evaluation report ({exc})") from None


def strategy_setup(strategy: str, model: Model, profile: ClientProfile, base_lr: float,
                   meta: MetaParams | None = None) -> tuple[BNMode, np.ndarray]:
    """BN mode and per-group learning rates a strategy fine-tunes with."""
    n_groups = ParamLayout.of(model).n_groups
    uniform = np.full(n_groups, base_lr)
    if strategy == "FT-BN-C":
        return nn.CLIENT, uniform
    if strategy == "FT-BN-G":
        return nn.GLOBAL, uniform
    if strategy == "FT-BN-I":
        return nn.INCOMING, uniform
    if strategy in ("FedL2P", "L2P"):
        if meta is None:
            raise ValueError(f"{strategy} needs meta-params")
        out = hyper_outputs(meta, profile.xi, profile.feat_stats)
        return BNMode.mixed(out.beta), out.eta
    raise ValueError(f"unknown strategy {strategy!r}")


def personalize_client(model: Model, client: ClientDataset, profile: ClientProfile,
                       mode: BNMode, eta: np.ndarray, epochs: int, batch_size: int,
                       rng: np.random.Generator) -> tuple[float, float]:
    """Fine-tune on train, return (test accuracy, validation loss)."""
    local = profile.install(model)
    if epochs > 0:
        local = nn.finetune(local, client.x_train, client.y_train, mode, eta, epochs,
                            batch_size, rng)
    acc = nn.accuracy(local, client.x_test, client.y_test, mode)
    return acc, nn.loss(local, client.x_val, client.y_val, mode)


def personalize_eval(model: Model, clients: Sequence[ClientDataset], strategy: str,
                     epochs: int, repeats: int = 3, base_lr: float = 1e-3,
                     batch_size: int = 32, seed: int = 0,
                     meta: MetaParams | dict | None = None,
                     profiles: dict | None = None) -> EvalReport:
    """Fine-tune every client under ``strategy`` and report test accuracy.

    ``meta`` is one :class:`MetaParams` for FedL2P or a ``{client_id: meta}``
    mapping for L2P, whose meta-params are learnt per client.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    clients = sorted(clients, key=lambda c: c.client_id)
    profiles = profiles or profile_clients(model, clients)
    sizes = ParamLayout.of(model).group_sizes
    accs = np.full((repeats, len(clients)), np.nan)
    losses = np.full((repeats, len(clients)), np.nan)
    rows = []
    for j, c in enumerate(clients):
        m = meta.get(c.client_id) if isinstance(meta, dict) else meta
        mode, eta = strategy_setup(strategy, model, profiles[c.client_id], base_lr, m)
        for r in range(repeats):
            rng = np.random.default_rng([seed, r, c.client_id, 11])
            try:
                accs[r, j], losses[r, j] = personalize_client(
                    model, c, profiles[c.client_id], mode, eta, epochs, batch_size, rng)
            except DivergenceError:
                accs[r, j] = 0.0
        beta = mode.beta if mode.kind == "mixed" else \
            {"client": np.ones(1), "global": np.zeros(1)}.get(mode.kind)
        rows.append(ClientEval(c.client_id, c.domain_id, float(np.mean(accs[:, j])),
                               float(np.nanmean(losses[:, j])) if np.any(np.isfinite(losses[:, j]))
                               else math.nan,
                               sparsity(eta, sizes, 1e-8 * base_lr),
                               float(np.mean(beta)) if beta is not None else math.nan,
                               bool(np.any(np.isnan(losses[:, j])))))
    return EvalReport(strategy, repeats, [float(v) for v in accs.mean(axis=1)], rows)


def l2p_local(model: Model, client: ClientDataset, meta: MetaParams, cfg: FLConfig,
              budget: int, profile: ClientProfile | None = None) -> MetaParams:
    """Learn meta-params on one client alone with ``budget`` meta-iterations.

    This is the federated loop restricted to a single always-participating
    client, so it keeps the same validation-loss checkpointing.
    """
    iters = max(cfg.meta_iters, 1)
    rounds = budget // iters
    if rounds == 0:
        return meta
    local_cfg = replace(cfg, rounds=rounds, fraction=1.0, meta_iters=iters, workers=1)
    profiles = {client.client_id: profile} if profile is not None else None
    return run_fedl2p(model, [client], meta, local_cfg, profiles).meta


def l2p_budget(n_clients: int, cfg: FLConfig) -> int:
    """Meta-iterations a client performs on average during federated training."""
    return round(cfg.rounds * n_sampled(n_clients, cfg.fraction) / n_clients) * cfg.meta_iters
