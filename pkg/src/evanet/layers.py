"""Parameter initialisation and small dense building blocks."""
from __future__ import annotations

import math
from typing import MutableMapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = MutableMapping[str, Tensor]


def init_linear(params: Params, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, bias: bool = True) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias."""
    bound = 1.0 / math.sqrt(fan_in)
    params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                                      requires_grad=True, name=f"{name}.weight")
    if bias:
        params[f"{name}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.bias")


def init_mlp(params: Params, name: str, widths: Sequence[int], rng: np.random.Generator) -> None:
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        init_linear(params, f"{name}.{i}", a, b, rng)


def apply_linear(x: Tensor, params: Params, name: str) -> Tensor:
    return T.linear(x, params[f"{name}.weight"], params.get(f"{name}.bias"))


def apply_mlp(x: Tensor, params: Params, name: str, n_layers: int) -> Tensor:
    """Dense layers with relu between them and a linear output."""
    for i in range(n_layers):
        x = apply_linear(x, params, f"{name}.{i}")
        if i < n_layers - 1:
            x = T.relu(x)
    return x


def sinusoid(positions: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos features: column 2k is sin(p / base**(2k/dim)),
    column 2k+1 the matching cosine."""
    if dim % 2:
        raise ValueError(f"sinusoidal encoding needs an even dimension, got {dim}")
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = pos * freq
    out = np.empty(pos.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out
