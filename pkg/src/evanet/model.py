"""Full network: encoder -> VIB -> {age head, prototype alignment}."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import EncoderConfig, encoder_forward, init_encoder
from .layers import Params, apply_mlp, init_mlp
from .prototype import align_loss, embed_age, init_prototype, prototype_forward
from .tensor import ShapeError, Tensor
from .vib import init_vib, kl_loss, reparameterize, vib_heads


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    d_latent: int = 64
    d_age: int = 64
    proto_hidden: int = 128
    head_widths: tuple = (64, 32)
    beta: float = 1e-3
    gamma: float = 0.7
    no_vib: bool = False
    no_align: bool = False
    eval_seed: int = 0
    # initial log-variance bias; a small posterior variance at start keeps the
    # sampling noise from swamping the (initially tiny) spread of encoder outputs
    logvar_bias_init: float = -6.0

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")
        if self.no_align and self.gamma > 0:
            raise ValueError("no_align removes the prototype network; gamma must be 0")
        if self.no_vib and self.beta > 0:
            raise ValueError("no_vib removes the bottleneck; beta must be 0")

    @property
    def head_layers(self) -> int:
        return len(self.head_widths) + 1


@dataclass
class LossBreakdown:
    l_pred: float
    l_ib: float
    l_align: float
    l_total: float
    beta: float
    gamma: float
    total: Tensor = field(repr=False)
    y_hat: np.ndarray = field(repr=False)
    mu: np.ndarray = field(repr=False)
    log_var: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    proto: Optional[np.ndarray] = field(default=None, repr=False)


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Named parameter dict; ``head.age_offset``/``head.age_scale`` are fixed
    (non-trained) output rescaling constants, identity by default."""
    rng = T.make_rng(seed)
    params: Params = {}
    init_encoder(params, cfg.encoder, rng)
    init_vib(params, cfg.encoder.d_model, cfg.d_latent, rng)
    if cfg.logvar_bias_init:
        params["vib.logvar.bias"].data[:] = cfg.logvar_bias_init
    if not cfg.no_align:
        init_prototype(params, cfg.d_age, cfg.proto_hidden, cfg.d_latent, rng)
    init_mlp(params, "head", (cfg.d_latent, *cfg.head_widths, 1), rng)
    params["head.age_offset"] = Tensor(np.zeros(()), name="head.age_offset")
    params["head.age_scale"] = Tensor(np.ones(()), name="head.age_scale")
    return params


def trainable(params: Params) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if v.requires_grad}


def set_target_scaling(params: Params, offset: float, scale: float) -> None:
    params["head.age_offset"] = Tensor(np.array(float(offset)), name="head.age_offset")
    params["head.age_scale"] = Tensor(np.array(float(scale)), name="head.age_scale")


def predict_head(z, params: Params) -> Tensor:
    """Scalar age per latent code: ``offset + scale * mlp(z)``."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    d = params["head.0.weight"].shape[0]
    if z.shape[-1] != d:
        raise ShapeError(f"prediction head expects {d}-d codes, got {z.shape}")
    n_layers = sum(1 for k in params if k.startswith("head.") and k.endswith(".weight"))
    out = apply_mlp(z, params, "head", n_layers)
    out = T.reshape(out, out.shape[:-1])
    out = T.scale(out, params["head.age_scale"].item())
    return T.add(out, params["head.age_offset"].item())


def forward_train(x, ages, params: Params, cfg: ModelConfig,
                  rng: np.random.Generator,
                  predictor: Callable[[Tensor], Tensor] | None = None) -> LossBreakdown:
    """Composite training loss on a batch ``x`` of shape ``[B, C, T]``.

    ``predictor`` replaces the prediction head (used to inject stubs).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(ages, dtype=np.float64).reshape(-1)
    if x.ndim != 3 or len(x) == 0 or len(x) != len(y):
        raise ShapeError(f"need a non-empty [B, C, T] batch with B ages, got {x.shape}, {y.shape}")
    h = encoder_forward(x, params, cfg.encoder, rng)
    mu, log_var = vib_heads(h, params)
    if cfg.no_vib:
        z = mu
        l_ib = Tensor(0.0)
    else:
        z = reparameterize(mu, log_var, rng)
        l_ib = kl_loss(mu, log_var)
    y_hat = predictor(z) if predictor is not None else predict_head(z, params)
    l_pred = T.mean(T.square(T.sub(y_hat, Tensor(y))))
    proto = None
    if cfg.no_align:
        l_align = Tensor(0.0)
    else:
        proto = prototype_forward(embed_age(y, cfg.d_age), params)
        l_align = align_loss(z, proto)
    total = T.add(T.add(l_pred, T.scale(l_ib, cfg.beta)), T.scale(l_align, cfg.gamma))
    return LossBreakdown(l_pred.item(), l_ib.item(), l_align.item(), total.item(),
                         cfg.beta, cfg.gamma, total, y_hat.data.copy(), mu.data.copy(),
                         log_var.data.copy(), z.data.copy(),
                         None if proto is None else proto.data.copy())


def forward_eval(x, params: Params, cfg: ModelConfig, ages=None):
    """Deterministic inference (``Z = mu``) for one epoch or a ``[B, C, T]`` batch.

    Returns ``(y_hat, z, proto)``.  The prototype is evaluated at ``ages``, or
    at ``x.age`` when ``x`` is an :class:`~evanet.data.EegEpoch`; it is
    ``None`` when no age is known or the prototype network is disabled.
    """
    if ages is None and hasattr(x, "age"):
        ages = x.age
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    with T.no_grad():
        h = encoder_forward(x, params, cfg.encoder, T.make_rng(cfg.eval_seed))
        mu, _ = vib_heads(h, params)
        y_hat = predict_head(mu, params).data
        proto = None
        if ages is not None and not cfg.no_align:
            a = np.broadcast_to(np.asarray(ages, dtype=np.float64), (len(x),))
            proto = prototype_forward(embed_age(a, cfg.d_age), params).data
    z = mu.data
    if single:
        return float(y_hat[0]), z[0].copy(), None if proto is None else proto[0].copy()
    return y_hat.copy(), z.copy(), proto


def predict_batched(x: np.ndarray, ages: np.ndarray, params: Params, cfg: ModelConfig,
                    batch_size: int = 64):
    """Run :func:`forward_eval` over a large array in chunks."""
    preds, zs, ps = [], [], []
    for i in range(0, len(x), batch_size):
        yh, z, p = forward_eval(np.asarray(x[i:i + batch_size], dtype=np.float64), params, cfg,
                                ages=ages[i:i + batch_size])
        preds.append(yh)
        zs.append(z)
        if p is not None:
            ps.append(p)
    return (np.concatenate(preds), np.concatenate(zs),
            np.concatenate(ps) if ps else None)


def save_params(params: Params, path) -> None:
    save_checkpoint(params, path)


def load_params(path, cfg: ModelConfig | None = None) -> Params:
    raw = load_checkpoint(path)
    out: Params = {}
    for k, v in raw.items():
        fixed = k in ("head.age_offset", "head.age_scale")
        out[k] = Tensor(v, requires_grad=not fixed, name=k)
    if cfg is not None:
        expected = init_params(cfg, 0)
        missing = set(expected) - set(out)
        extra = set(out) - set(expected)
        if missing or extra:
            raise ValueError(f"checkpoint does not match config: missing {sorted(missing)[:5]}, "
                             f"unexpected {sorted(extra)[:5]}")
        for k, v in expected.items():
            if v.shape != out[k].shape:
                raise ValueError(f"checkpoint {k} has shape {out[k].shape}, config wants {v.shape}")
    return out
