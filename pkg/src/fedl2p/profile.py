"""Client profiles: the meta-net inputs measured on a client's local data."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .nn import Model, forward, GLOBAL, with_client_stats

KL_VAR_FLOOR = 1e-8


def gaussian_kl(mu1, var1, mu2, var2):
    """KL(N(mu1, var1) || N(mu2, var2)), elementwise."""
    return 0.5 * (np.log(var2 / var1) + (var1 + (mu1 - mu2) ** 2) / var2 - 1.0)


def gaussian_sym_kl(p: tuple, q: tuple, floor: float = KL_VAR_FLOOR):
    """Symmetrised KL divergence ``(KL(P||Q) + KL(Q||P)) / 2`` of two Gaussians.

    ``p`` and ``q`` are ``(mean, variance)`` pairs (scalars or arrays).
    Variances are floored at ``floor`` so constant channels stay finite.
    """
    mu1, var1 = (np.asarray(a, dtype=float) for a in p)
    mu2, var2 = (np.asarray(a, dtype=float) for a in q)
    var1, var2 = np.maximum(var1, floor), np.maximum(var2, floor)
    if np.any(var1 <= 0) or np.any(var2 <= 0):
        raise ValueError("variances must be positive")
    # closed form of the average; the log terms cancel
    d2 = (mu1 - mu2) ** 2
    out = 0.25 * ((var1 + d2) / var2 + (var2 + d2) / var1 - 2.0)
    return float(out) if out.ndim == 0 else out


def profile_xi(client_stats: tuple, pt_stats: tuple, floor: float = KL_VAR_FLOOR) -> float:
    """Channel-averaged symmetric KL between client and pretrained statistics."""
    c_mean, c_var = (np.asarray(a, dtype=float) for a in client_stats)
    p_mean, p_var = (np.asarray(a, dtype=float) for a in pt_stats)
    if c_mean.shape != p_mean.shape or c_var.shape != p_var.shape:
        raise ValueError("client and pretrained statistics have different channel counts")
    return float(np.mean(gaussian_sym_kl((c_mean, c_var), (p_mean, p_var), floor)))


@dataclass
class ClientProfile:
    xi: np.ndarray  # (B,)
    feat_stats: np.ndarray  # (2M,), mean and SD of every learnable layer's input
    n_samples: int
    bn_stats: list  # per BN layer (mean, var) over channels

    def install(self, model: Model) -> Model:
        """Return ``model`` with this profile's client BN statistics."""
        return with_client_stats(model, self.bn_stats)


def build_profile(model: Model, x: np.ndarray) -> ClientProfile:
    """Profile a client dataset with one forward pass using pretrained BN stats."""
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        raise ValueError("cannot profile an empty dataset")
    _, cache = forward(model, x, GLOBAL)
    feat = []
    for i in model.learnable:
        h = cache.inputs[i]
        feat += [h.mean(), h.std()]
    bn_stats, xi = [], []
    for i in model.bn_indices:
        h = cache.inputs[i]
        stats = (h.mean(axis=0), h.var(axis=0))
        bn_stats.append(stats)
        layer = model.layers[i]
        xi.append(profile_xi(stats, (layer.pt_mean, layer.pt_var)))
    return ClientProfile(np.array(xi, dtype=float), np.array(feat, dtype=float),
                         len(x), bn_stats)


def write_profiles_csv(path: str | Path, profiles: Iterable[tuple[int, ClientProfile]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id", "b", "xi"])
        for cid, prof in profiles:
            for b, value in enumerate(prof.xi):
                w.writerow([cid, b, repr(float(value))])


def read_profiles_csv(path: str | Path) -> dict[int, np.ndarray]:
    rows: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["client_id"]), {})[int(row["b"])] = float(row["xi"])
    return {cid: np.array([v[b] for b in sorted(v)]) for cid, v in rows.items()}
