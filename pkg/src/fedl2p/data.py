"""Synthetic heterogeneous clients: Gaussian-mixture base task, affine domain
shifts and Dirichlet (LDA) label partitioning."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class ClientDataset:
    client_id: int
    domain_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x_train, self.y_train

    @property
    def val(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x_val, self.y_val

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x_test, self.y_test

    @property
    def n_train(self) -> int:
        return len(self.y_train)


@dataclass(frozen=True)
class PartitionSpec:
    alpha: float
    n_clients: int
    n_classes: int
    samples_per_client: int

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("Dirichlet concentration must be positive")
        if self.n_clients < 1 or self.samples_per_client < 1:
            raise ValueError("need at least one client and one sample per client")


def dirichlet_partition(labels: np.ndarray, spec: PartitionSpec,
                        rng: np.random.Generator) -> list[np.ndarray]:
    """Give every client ``samples_per_client`` indices with a Dir(alpha) class mix.

    Each client draws class proportions ``p ~ Dir(alpha * 1)``, turns them
    into per-class counts by largest-remainder rounding and takes that many
    indices per class, without replacement, from the shared pool.
    When a class runs out its share is redistributed over the classes that
    still have samples, in proportion to ``p``.
    """
    labels = np.asarray(labels, dtype=int)
    need = spec.n_clients * spec.samples_per_client
    if len(labels) < need:
        raise ValueError(f"pool of {len(labels)} samples cannot serve {need}")
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in range(spec.n_classes)]
    out = []
    for _ in range(spec.n_clients):
        p = rng.dirichlet(np.full(spec.n_classes, spec.alpha))
        available = np.array([len(q) for q in pools])
        counts = _class_counts(p, available, spec.samples_per_client)
        idx: list[int] = []
        for c, k in enumerate(counts):
            idx += pools[c][:k]
            pools[c] = pools[c][k:]
        out.append(np.array(sorted(idx), dtype=int))
    return out


def apportion(n: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder integer split of ``n`` in proportion to ``weights``."""
    weights = np.asarray(weights, dtype=float)
    raw = n * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    counts[np.argsort(counts - raw, kind="stable")[:short]] += 1
    return counts


def _class_counts(p, available, n):
    counts = np.minimum(apportion(n, p), available)
    while counts.sum() < n:
        open_ = counts < available
        weights = np.where(open_, p, 0.0)
        if weights.sum() <= 0:  # p put all mass on exhausted classes
            weights = open_.astype(float)
        counts = np.minimum(counts + apportion(n - counts.sum(), weights), available)
    return counts


def split(n: int, fractions: Sequence[float], rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and cut it into consecutive parts of the given fractions."""
    fractions = np.asarray(fractions, dtype=float)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError("split fractions must be non-negative and sum to 1")
    order = rng.permutation(n)
    cuts = np.round(np.cumsum(fractions)[:-1] * n).astype(int)
    parts = np.split(order, cuts)
    for f, part in zip(fractions, parts):
        if f > 0 and len(part) == 0:
            raise ValueError(f"split of {n} samples leaves an empty part")
    return [np.sort(part) for part in parts]


def train_val_test(n: int, rng: np.random.Generator, test: float = 0.2,
                   val_of_train: float = 0.2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """80/20 train/test, then hold out 20% of the train part for validation."""
    train_pool, test_idx = split(n, [1.0 - test, test], rng)
    n_val = int(round(val_of_train * len(train_pool)))
    perm = rng.permutation(len(train_pool))
    val_idx = np.sort(train_pool[perm[:n_val]])
    train_idx = np.sort(train_pool[perm[n_val:]])
    return train_idx, val_idx, test_idx


# --------------------------------------------------------------------------
# Gaussian-mixture base task and affine domains
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianMixture:
    means: np.ndarray  # (classes, dim)
    noise: float

    @classmethod
    def random(cls, dim: int, n_classes: int, separation: float, noise: float,
               rng: np.random.Generator) -> "GaussianMixture":
        means = rng.normal(size=(n_classes, dim))
        means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
        return cls(means, noise)

    def sample(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        labels = np.asarray(labels, dtype=int)
        return self.means[labels] + self.noise * rng.normal(size=(len(labels), self.means.shape[1]))


@dataclass(frozen=True)
class AffineDomain:
    """``x -> scale * (x @ rotation.T) + shift``; domain 0 is the identity."""

    rotation: np.ndarray
    scale: np.ndarray
    shift: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "AffineDomain":
        return cls(np.eye(dim), np.ones(dim), np.zeros(dim))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * (x @ self.rotation.T) + self.shift

    def invert(self, z: np.ndarray) -> np.ndarray:
        return ((z - self.shift) / self.scale) @ self.rotation


def random_rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation by ``angle`` radians in a random 2-plane."""
    if dim < 2 or angle == 0.0:
        return np.eye(dim)
    basis, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
    u, v = basis[:, 0], basis[:, 1]
    c, s = np.cos(angle), np.sin(angle)
    return (np.eye(dim) + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
            + s * (np.outer(v, u) - np.outer(u, v)))


def make_domains(dim: int, n_domains: int, rng: np.random.Generator, shift: float = 2.0,
                 log_scale: float = 0.5, angle: float = 0.3,
                 graded: bool = False) -> list[AffineDomain]:
    """Domain 0 is the identity; the others get a random rotation, per-feature
    log-uniform scale and a shift of norm ``shift``.

    With ``graded`` the strength of domain ``d`` grows as ``d / (D - 1)``, so
    domains differ in how far they move from the identity and not only in
    direction.
    """
    if n_domains < 1:
        raise ValueError("need at least one domain")
    domains = [AffineDomain.identity(dim)]
    for d in range(1, n_domains):
        s = d / (n_domains - 1) if graded else 1.0
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        scale = np.exp(s * log_scale * rng.uniform(-1.0, 1.0, size=dim))
        domains.append(AffineDomain(random_rotation(dim, s * angle, rng), scale,
                                    s * shift * direction))
    return domains


@dataclass(frozen=True)
class DataSpec:
    dim: int = 8
    n_classes: int = 4
    n_domains: int = 3
    clients_per_domain: int = 10
    samples_per_client: int = 100
    alpha: float = 1000.0
    separation: float = 3.0
    noise: float = 1.0
    shift: float = 2.0
    log_scale: float = 0.5
    angle: float = 0.3
    graded: bool = False
    pretrain_clients: int = 20
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    val_cap: int | None = None


@dataclass
class Benchmark:
    mixture: GaussianMixture
    domains: list
    pretrain: list  # ClientDataset on the identity domain
    clients: list


def _clients_from_pool(x, y, spec: PartitionSpec, first_id: int, domain_id: int,
                       rng, test_fraction, val_fraction, val_cap=None) -> list[ClientDataset]:
    out = []
    for k, idx in enumerate(dirichlet_partition(y, spec, rng)):
        xi, yi = x[idx], y[idx]
        tr, va, te = train_val_test(len(idx), rng, test_fraction, val_fraction)
        if val_cap is not None and len(va) > val_cap:
            tr = np.sort(np.concatenate([tr, va[val_cap:]]))
            va = va[:val_cap]
        out.append(ClientDataset(first_id + k, domain_id, xi[tr], yi[tr], xi[va], yi[va],
                                 xi[te], yi[te]))
    return out


def make_benchmark(spec: DataSpec, rng: np.random.Generator) -> Benchmark:
    """Pretraining clients on the identity domain plus ``clients_per_domain``
    clients in each of ``n_domains`` domains, all Dirichlet-partitioned."""
    mix = GaussianMixture.random(spec.dim, spec.n_classes, spec.separation, spec.noise, rng)
    domains = make_domains(spec.dim, spec.n_domains, rng, spec.shift, spec.log_scale, spec.angle,
                           spec.graded)

    def pool(n_clients):
        # twice the demand keeps rebalancing rare at small alpha
        n = 2 * n_clients * spec.samples_per_client
        y = rng.integers(0, spec.n_classes, size=n)
        return mix.sample(y, rng), y

    pretrain = []
    if spec.pretrain_clients:
        x, y = pool(spec.pretrain_clients)
        part = PartitionSpec(spec.alpha, spec.pretrain_clients, spec.n_classes,
                             spec.samples_per_client)
        pretrain = _clients_from_pool(x, y, part, 0, 0, rng, spec.test_fraction,
                                      spec.val_fraction)
    clients = []
    for d, dom in enumerate(domains):
        x, y = pool(spec.clients_per_domain)
        part = PartitionSpec(spec.alpha, spec.clients_per_domain, spec.n_classes,
                             spec.samples_per_client)
        clients += _clients_from_pool(dom.apply(x), y, part, len(clients), d, rng,
                                      spec.test_fraction, spec.val_fraction, spec.val_cap)
    return Benchmark(mix, domains, pretrain, clients)


# --------------------------------------------------------------------------
# CSV round trip
# --------------------------------------------------------------------------

_SPLITS = ("train", "val", "test")


def write_clients_csv(path: str | Path, clients: Sequence[ClientDataset]) -> None:
    dim = clients[0].x_train.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(dim)] + ["label", "client_id", "domain_id", "split"])
        for c in clients:
            for name in _SPLITS:
                x, y = getattr(c, name)
                for row, label in zip(x, y):
                    w.writerow([repr(float(v)) for v in row]
                               + [int(label), c.client_id, c.domain_id, name])


def read_clients_csv(path: str | Path) -> list[ClientDataset]:
    rows: dict[int, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = sum(1 for h in header if h.startswith("x"))
        for rec in reader:
            cid, did, name = int(rec[dim + 1]), int(rec[dim + 2]), rec[dim + 3]
            entry = rows.setdefault(cid, {"domain": did, **{s: ([], []) for s in _SPLITS}})
            entry[name][0].append([float(v) for v in rec[:dim]])
            entry[name][1].append(int(rec[dim]))
    out = []
    for cid in sorted(rows):
        e = rows[cid]
        arrays = []
        for s in _SPLITS:
            xs, ys = e[s]
            arrays += [np.array(xs, dtype=float).reshape(-1, dim), np.array(ys, dtype=int)]
        out.append(ClientDataset(cid, e["domain"], *arrays))
    return out
