"""Cluster analysis of meta-net inputs and outputs across clients.

For each quantity (divergence profile, feature statistics, mixing ratios,
learning rates) the clients' vectors are compared through pairwise
Euclidean distances, a domain-level distance map and spectral clustering
scored against the domain labels with the adjusted Rand index.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
from sklearn.cluster import KMeans

log = logging.getLogger(__name__)

QUANTITIES = ("xi", "x", "beta", "eta")


def _pairs(n):
    return n * (n - 1) / 2.0


def ari(labels_a: Sequence, labels_b: Sequence) -> float:
    """Adjusted Rand index from the contingency table.

    Two single-cluster partitions agree trivially and score 1.0.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("label vectors must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two labels")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    index = _pairs(table).sum()
    rows = _pairs(table.sum(axis=1)).sum()
    cols = _pairs(table.sum(axis=0)).sum()
    expected = rows * cols / _pairs(n)
    top = 0.5 * (rows + cols)
    if top == expected:  # both partitions trivial (all-one or all-singleton)
        return 1.0
    return float((index - expected) / (top - expected))


def pairwise_distances(vectors: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix; exactly symmetric with a zero diagonal."""
    v = np.asarray(vectors, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    diff = v[:, None, :] - v[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def domain_mean_distances(dist: np.ndarray, domains: Sequence[int]) -> tuple[np.ndarray, list]:
    """Mean distance between clients of domains j and k (distinct clients only)."""
    domains = np.asarray(domains)
    names = sorted(set(domains.tolist()))
    out = np.zeros((len(names), len(names)))
    for j, dj in enumerate(names):
        rj = np.flatnonzero(domains == dj)
        for k, dk in enumerate(names):
            rk = np.flatnonzero(domains == dk)
            block = dist[np.ix_(rj, rk)]
            if j == k:
                if len(rj) < 2:
                    raise ValueError(f"domain {dj} needs at least two clients")
                out[j, k] = block.sum() / (len(rj) * (len(rj) - 1))
            else:
                out[j, k] = block.mean()
    return out, names


def cluster_distance_map(vectors: np.ndarray, domains: Sequence[int], floor: float = 1e-12,
                         cap: float = 50.0) -> np.ndarray:
    """``log(d(j,k) / sqrt(d(j,j) d(k,k)))`` over domain pairs.

    Within-domain distances are floored at ``floor`` before the division and
    every entry is capped at ``cap``, so perfectly tight domains give a
    large finite separation. The diagonal is 0 by construction.
    """
    d, _ = domain_mean_distances(pairwise_distances(vectors), domains)
    within = np.maximum(np.diag(d), floor)
    between = np.maximum(d, floor)
    out = np.log(between / np.sqrt(np.outer(within, within)))
    out = np.minimum(0.5 * (out + out.T), cap)
    np.fill_diagonal(out, 0.0)
    return out


@dataclass
class Clustering:
    labels: np.ndarray
    fallback: bool = False  # k-means on raw vectors because the graph was disconnected


def spectral_cluster(vectors: np.ndarray, k: int, seed: int = 0) -> Clustering:
    """Spectral clustering with a median-bandwidth Gaussian affinity.

    The top-``k`` eigenvectors of ``D^-1/2 A D^-1/2`` are row-normalised and
    grouped by k-means.
    """
    v = np.asarray(vectors, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    n = len(v)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if k == 1:
        return Clustering(np.zeros(n, dtype=int))
    dist = pairwise_distances(v)
    off = dist[~np.eye(n, dtype=bool)]
    positive = off[off > 0]
    if positive.size == 0:
        log.warning("all vectors coincide, returning a single cluster")
        return Clustering(np.zeros(n, dtype=int), fallback=True)
    bandwidth = float(np.median(off)) or float(np.median(positive))
    affinity = np.exp(-(dist / bandwidth) ** 2 / 2.0)
    np.fill_diagonal(affinity, 0.0)
    n_comp, _ = connected_components(affinity > 0, directed=False)
    if n_comp > 1:
        log.warning("affinity graph has %d components, clustering raw vectors", n_comp)
        return Clustering(_kmeans(v, k, seed), fallback=True)
    inv_sqrt = 1.0 / np.sqrt(affinity.sum(axis=1))
    norm = affinity * inv_sqrt[:, None] * inv_sqrt[None, :]
    _, vecs = np.linalg.eigh(0.5 * (norm + norm.T))
    emb = vecs[:, -k:]
    emb = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-300)
    return Clustering(_kmeans(emb, k, seed))


def _kmeans(x, k, seed):
    return KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(x).astype(int)


@dataclass
class ClusterAnalysis:
    client_ids: list
    domains: list
    distances: dict = field(default_factory=dict)  # quantity -> (n, n)
    labels: dict = field(default_factory=dict)
    ari: dict = field(default_factory=dict)
    distance_maps: dict = field(default_factory=dict)
    fallback: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"client_ids": self.client_ids, "domains": self.domains,
                "ari": self.ari, "fallback": self.fallback,
                "labels": {q: np.asarray(l).tolist() for q, l in self.labels.items()},
                "distance_maps": {q: m.tolist() for q, m in self.distance_maps.items()}}

    def save(self, directory: str | Path) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        (out / "clusters.json").write_text(json.dumps(self.to_dict(), indent=1))
        for q, d in self.distances.items():
            np.savetxt(out / f"distances_{q}.csv", d, delimiter=",")
        for q, m in self.distance_maps.items():
            np.savetxt(out / f"distance_map_{q}.csv", m, delimiter=",")
        with open(out / "cluster_labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            qs = list(self.labels)
            w.writerow(["client_id", "domain_id"] + qs)
            for i, cid in enumerate(self.client_ids):
                w.writerow([cid, self.domains[i]] + [int(self.labels[q][i]) for q in qs])


def analyze_clusters(vectors: Mapping[str, np.ndarray], client_ids: Sequence[int],
                     domains: Sequence[int], seed: int = 0, cap: float = 50.0) -> ClusterAnalysis:
    """Cluster every quantity into as many groups as there are domains."""
    domains = [int(d) for d in domains]
    k = len(set(domains))
    res = ClusterAnalysis([int(c) for c in client_ids], domains)
    for name, v in vectors.items():
        v = np.asarray(v, dtype=float)
        res.distances[name] = pairwise_distances(v)
        cl = spectral_cluster(v, k, seed)
        res.labels[name] = cl.labels
        res.fallback[name] = cl.fallback
        res.ari[name] = ari(domains, cl.labels)
        res.distance_maps[name] = cluster_distance_map(v, domains, cap=cap)
    return res
