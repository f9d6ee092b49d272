"""Variational information bottleneck on the pooled encoder state."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Params, apply_linear, init_linear
from .tensor import ShapeError, Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass
class LatentCode:
    mu: np.ndarray
    log_var: np.ndarray
    z: np.ndarray
    epsilon_seed: int | None = None


def init_vib(params: Params, d_model: int, d_latent: int, rng: np.random.Generator) -> None:
    init_linear(params, "vib.mu", d_model, d_latent, rng)
    init_linear(params, "vib.logvar", d_model, d_latent, rng)


def vib_heads(h: Tensor, params: Params) -> tuple[Tensor, Tensor]:
    """Mean and clamped log-variance heads, two independent affine maps."""
    d_in = params["vib.mu.weight"].shape[0]
    if h.shape[-1] != d_in:
        raise ShapeError(f"VIB heads expect {d_in} features, got shape {h.shape}")
    mu = apply_linear(h, params, "vib.mu")
    log_var = T.clamp(apply_linear(h, params, "vib.logvar"), LOGVAR_MIN, LOGVAR_MAX)
    return mu, log_var


def reparameterize(mu: Tensor, log_var: Tensor, rng: np.random.Generator | None) -> Tensor:
    """``mu + exp(log_var / 2) * eps``; ``rng=None`` is evaluation mode and
    returns ``mu`` unchanged."""
    if mu.shape != log_var.shape:
        raise ShapeError(f"mu {mu.shape} and log_var {log_var.shape} differ")
    if rng is None:
        return mu
    eps = T.gaussian_sample(mu.shape, rng)
    return T.add(mu, T.mul(T.exp(T.scale(log_var, 0.5)), eps))


def kl_loss(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL divergence to N(0, I), summed over latent dims and averaged over any
    leading batch axis."""
    if mu.shape != log_var.shape:
        raise ShapeError(f"mu {mu.shape} and log_var {log_var.shape} differ")
    terms = T.sub(T.add(T.exp(log_var), T.square(mu)), T.add(log_var, 1.0))
    per_sample = T.scale(T.tsum(terms, axis=-1), 0.5)
    return T.mean(per_sample) if per_sample.ndim else per_sample


def encode(h: Tensor, params: Params, rng: np.random.Generator | None = None,
           seed: int | None = None) -> LatentCode:
    """Convenience wrapper returning plain arrays for one forward pass."""
    if seed is not None:
        rng = T.make_rng(seed)
    mu, lv = vib_heads(h, params)
    z = reparameterize(mu, lv, rng)
    return LatentCode(mu.data.copy(), lv.data.copy(), z.data.copy(), seed)
