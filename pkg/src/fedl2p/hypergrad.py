"""Implicit-differentiation hypergradients for the personalization meta-nets.

The engine works on the low-dimensional vector of personalization
hyperparameters ``h = (beta_1..beta_B, eta_1..eta_2M)``. With ``theta*`` the
fine-tuned parameters,

    dL_V/dh = dL_V/dh|direct - p . d/dh grad_theta L_T(theta*, h)
    p       ~ grad_theta L_V(theta*) . H^-1          (truncated Neumann series)

and the result is chained through the exact meta-net VJPs to reach
``lambda = {w_bn, w_lr, eta_tilde}``. Second derivatives that involve ``h``
are taken by central differences over the ``B + 2M`` coordinates of ``h``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .metanets import MetaParams, hyper_outputs, metanet_vjp
from .nn import BNMode, DivergenceError, Model, ParamLayout
from .profile import ClientProfile

log = logging.getLogger(__name__)

# How the training gradient at the fixed point depends on the learning rates:
# re-take only the final SGD step, or move theta* along the summed
# fine-tuning gradients so the implicit term reproduces the whole-trajectory
# sensitivity.
LR_DEPENDENCE = ("last_step", "trajectory")


@dataclass(frozen=True)
class HypergradConfig:
    q: int = 3
    psi: float = 0.1
    clip: float = 1.0
    zeta_bn: float = 1e-3
    zeta_lr: float = 1e-3
    zeta_eta: float = 1e-4
    fd_step: float = 1e-3
    hvp_step: float = 1e-5
    lr_dependence: str = "last_step"

    def __post_init__(self):
        if self.lr_dependence not in LR_DEPENDENCE:
            raise ValueError(f"lr_dependence must be one of {LR_DEPENDENCE}")
        if self.q < 0:
            raise ValueError("Q must be non-negative")
        if self.psi <= 0:
            raise ValueError("psi must be positive")
        if self.clip <= 0:
            raise ValueError("clip bound must be positive")
        if self.fd_step <= 0 or self.hvp_step <= 0:
            raise ValueError("finite-difference steps must be positive")


def neumann_inverse_hvp(v: np.ndarray, hvp_fn: Callable[[np.ndarray], np.ndarray],
                        psi: float, q: int) -> np.ndarray:
    """Approximate ``v H^-1`` with ``psi * sum_{i=0..q} v (I - psi H)^i``."""
    v = np.asarray(v, dtype=float)
    p = v.copy()
    term = v
    for _ in range(q):
        term = term - psi * hvp_fn(term)
        p = p + term
    p = psi * p
    if not np.all(np.isfinite(p)):
        raise DivergenceError("Neumann series diverged")
    return p


def _fd_steps(h: np.ndarray, scale: np.ndarray, fd_step: float) -> np.ndarray:
    return fd_step * np.maximum(np.abs(h), scale)


def mixed_partial_term(p: np.ndarray, train_grad_at: Callable[[np.ndarray], np.ndarray],
                       h: np.ndarray, fd_step: float = 1e-3,
                       scale: np.ndarray | None = None,
                       bounds: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """``d/dh <p, grad_theta L_T(theta*, h)>`` by central differences.

    ``train_grad_at(h)`` returns the training-loss gradient w.r.t. theta at
    the fixed point for hyperparameters ``h``. Coordinates whose step would
    leave ``bounds`` fall back to a one-sided difference.
    """
    p = np.asarray(p, dtype=float)
    h = np.asarray(h, dtype=float)
    out = np.zeros_like(h)
    if not np.any(p):
        return out
    steps = _fd_steps(h, np.ones_like(h) if scale is None else scale, fd_step)
    for k in range(h.size):
        out[k] = _fd_coordinate(lambda hk: float(p @ train_grad_at(hk)), h, k, steps[k], bounds)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite mixed partial")
    return out


def _fd_coordinate(fn, h, k, step, bounds):
    lo = -np.inf if bounds is None else bounds[0][k]
    hi = np.inf if bounds is None else bounds[1][k]
    up, down = h.copy(), h.copy()
    if h[k] + step <= hi and h[k] - step >= lo:
        up[k] += step
        down[k] -= step
        return (fn(up) - fn(down)) / (2.0 * step)
    if h[k] + step <= hi:
        up[k] += step
        return (fn(up) - fn(h)) / step
    down[k] -= step
    return (fn(h) - fn(down)) / step


def direct_val_grad(val_loss_at: Callable[[np.ndarray], float], beta: np.ndarray,
                    fd_step: float = 1e-3) -> np.ndarray:
    """``dL_V/dbeta`` at fixed theta, one-sided at the ends of ``[0, 1]``."""
    beta = np.asarray(beta, dtype=float)
    bounds = (np.zeros_like(beta), np.ones_like(beta))
    steps = _fd_steps(beta, np.ones_like(beta), fd_step)
    return np.array([_fd_coordinate(val_loss_at, beta, k, steps[k], bounds)
                     for k in range(beta.size)])


def implicit_hypergradient(val_grad_theta: np.ndarray,
                           hvp_fn: Callable[[np.ndarray], np.ndarray],
                           train_grad_at: Callable[[np.ndarray], np.ndarray],
                           h: np.ndarray, direct: np.ndarray, cfg: HypergradConfig,
                           scale: np.ndarray | None = None,
                           bounds: tuple | None = None) -> np.ndarray:
    """Total derivative of the validation loss w.r.t. hyperparameters ``h``."""
    p = neumann_inverse_hvp(val_grad_theta, hvp_fn, cfg.psi, cfg.q)
    mixed = mixed_partial_term(p, train_grad_at, h, cfg.fd_step, scale, bounds)
    return np.asarray(direct, dtype=float) - mixed


def clip_hypergradient(h: MetaParams, bound: float) -> MetaParams:
    return h.map(lambda a: np.clip(a, -bound, bound))


def meta_update(meta: MetaParams, h: MetaParams, cfg: HypergradConfig) -> MetaParams:
    """One SGD step on lambda with a learning rate per block."""
    return MetaParams(
        tuple(w - cfg.zeta_bn * g for w, g in zip(meta.bn, h.bn)),
        tuple(w - cfg.zeta_lr * g for w, g in zip(meta.lr, h.lr)),
        meta.eta_tilde - cfg.zeta_eta * h.eta_tilde,
    )


# --------------------------------------------------------------------------
# Network-specific assembly
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneSettings:
    epochs: int = 15
    batch_size: int = 32


@dataclass
class ClientStep:
    """Outcome of one client meta-iteration."""

    hypergrad: MetaParams
    val_loss: float
    model: Model
    beta: np.ndarray
    eta: np.ndarray


def client_hypergradient(meta: MetaParams, model: Model, profile: ClientProfile,
                         train: tuple, val: tuple, cfg: HypergradConfig,
                         ft: FinetuneSettings, rng: np.random.Generator) -> ClientStep:
    """Fine-tune under the meta-nets' hyperparameters and return the clipped hypergradient.

    ``model`` must already hold the client's BN statistics. How the learning
    rates enter the training gradient at ``theta*`` is set by
    ``cfg.lr_dependence``. ReLU masks stay pinned at the unperturbed point
    in every finite difference, so the differences see the smooth piece of
    the loss the point lies on.
    """
    x_tr, y_tr = train
    x_va, y_va = val
    out = hyper_outputs(meta, profile.xi, profile.feat_stats)
    beta, eta = out.beta, out.eta
    layout = ParamLayout.of(model)
    mode = BNMode.mixed(beta)
    trace = nn.finetune_trace(model, x_tr, y_tr, mode, eta, ft.epochs, ft.batch_size, rng)
    theta_star = layout.flatten(trace.model)
    val_loss, v = nn.loss_and_grad(trace.model, x_va, y_va, mode)
    train_masks = nn.relu_masks(trace.model, x_tr, mode)

    def train_loss_at(theta):
        return nn.loss_and_grad(layout.unflatten(model, theta), x_tr, y_tr, mode, train_masks)

    def hvp_fn(u):
        return nn.hvp(theta_star, u, train_loss_at, cfg.hvp_step)

    n_bn = beta.size
    if cfg.lr_dependence == "last_step":
        xb, yb = x_tr[trace.last_batch], y_tr[trace.last_batch]
        pre = layout.unflatten(model, trace.pre_step)
        batch_masks = nn.relu_masks(pre, xb, mode)

        def theta_at(h, m):
            g = nn.grad(pre, xb, yb, m, batch_masks)
            return nn.sgd_step(trace.pre_step, g, h[n_bn:], layout)
    else:
        # the shift is chosen so that -H^-1 d(grad)/d(eta) = d(theta*)/d(eta) = -grad_sum
        def theta_at(h, m):
            return theta_star + layout.expand(h[n_bn:] - eta) * trace.grad_sum

    def train_grad_at(h):
        m = BNMode.mixed(h[:n_bn])
        return nn.grad(layout.unflatten(model, theta_at(h, m)), x_tr, y_tr, m, train_masks)

    val_masks = nn.relu_masks(trace.model, x_va, mode)

    def val_loss_at(b):
        return nn.loss_and_grad(trace.model, x_va, y_va, BNMode.mixed(b), val_masks)[0]

    h0 = np.concatenate([beta, eta])
    eta_scale = max(float(np.max(np.abs(eta), initial=0.0)), 1e-12)
    scale = np.concatenate([np.ones(n_bn), np.full(eta.size, eta_scale)])
    bounds = (np.concatenate([np.zeros(n_bn), np.full(eta.size, -np.inf)]),
              np.concatenate([np.ones(n_bn), np.full(eta.size, np.inf)]))
    direct = np.concatenate([direct_val_grad(val_loss_at, beta, cfg.fd_step),
                             np.zeros(eta.size)])
    dh = implicit_hypergradient(v, hvp_fn, train_grad_at, h0, direct, cfg, scale, bounds)
    hg = metanet_vjp(meta, out, dh[:n_bn], dh[n_bn:])
    if not hg.is_finite():
        raise DivergenceError("non-finite hypergradient")
    return ClientStep(clip_hypergradient(hg, cfg.clip), val_loss, trace.model, beta, eta)
