"""Long-sequence EEG encoder with ProbSparse self-attention.

An epoch ``[C, T]`` is projected sample-by-sample to ``d_model``, summed with
a sinusoidal positional encoding, passed through ``n_layers`` post-norm
Transformer layers and mean-pooled over time.

Three attention modes are available:

``exact_full``
    dense scaled dot-product attention, O(T^2).
``probsparse_exact_measure``
    query sparsity scored against every key, then only the top-u queries
    attend; mostly useful as an oracle.
``probsparse_sampled_measure``
    sparsity scored against ``U = ceil(c ln T)`` keys drawn without
    replacement per head, giving O(T log T) work.

Queries that are not selected receive the mean of ``V`` over time.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import Params, apply_linear, init_linear, sinusoid
from .tensor import ShapeError, Tensor

MODES = ("exact_full", "probsparse_exact_measure", "probsparse_sampled_measure")


@dataclass
class EncoderConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 8
    sampling_factor: float = 5.0
    d_ff: Optional[int] = None
    attention_mode: str = "probsparse_sampled_measure"
    seq_len: int = 1000
    n_channels: int = 19
    # volts -> units of 10 microvolts before the input projection
    input_scale: float = 1e5
    n_top: Optional[int] = None

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.sampling_factor < 1:
            raise ValueError(f"sampling factor must be >= 1, got {self.sampling_factor}")
        if self.attention_mode not in MODES:
            raise ValueError(f"unknown attention mode {self.attention_mode!r}; choose from {MODES}")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def u(self) -> int:
        if self.n_top is not None:
            return self.n_top
        return top_u(self.seq_len, self.sampling_factor)


def top_u(seq_len: int, c: float) -> int:
    """Number of active queries, ``min(T, ceil(c ln T))``, at least 1."""
    return max(1, min(seq_len, math.ceil(c * math.log(seq_len))))


@dataclass
class AttentionDiagnostics:
    selected: Optional[np.ndarray] = None  # [..., u] query indices, ascending
    measure: Optional[np.ndarray] = None  # [..., T]
    mac_count: int = 0
    wall_ms: float = 0.0


@dataclass
class EncoderTrace:
    """Per-layer attention diagnostics collected during a forward pass."""
    layers: list = field(default_factory=list)

    @property
    def mac_count(self) -> int:
        return sum(d.mac_count for d in self.layers)


# -- embedding ---------------------------------------------------------------
def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    return sinusoid(np.arange(seq_len), d_model)


def temporal_embed(x: np.ndarray, params: Params, cfg: EncoderConfig) -> Tensor:
    """``[B, C, T]`` samples to ``[B, T, d_model]`` embeddings."""
    if x.ndim != 3 or x.shape[1] != cfg.n_channels:
        raise ShapeError(f"expected epochs shaped [B, {cfg.n_channels}, T], got {x.shape}")
    seq = np.ascontiguousarray(np.swapaxes(x, 1, 2)) * cfg.input_scale
    h = T.matmul(Tensor(seq), params["embed.weight"])
    pe = positional_encoding(x.shape[2], cfg.d_model)
    return T.add(h, Tensor(pe))


# -- attention kernels ---------------------------------------------------------
def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape != k.shape or k.shape != v.shape:
        raise ShapeError(f"Q, K, V shapes differ: {q.shape}, {k.shape}, {v.shape}")


def full_attention(q: Tensor, k: Tensor, v: Tensor,
                   diag: AttentionDiagnostics | None = None) -> Tensor:
    """Dense ``softmax(Q K^T / sqrt(d_k)) V`` over the last two axes."""
    _check_qkv(q, k, v)
    t0 = time.perf_counter()
    n, dk = q.shape[-2], q.shape[-1]
    out = T.attend(q, k, v)
    if diag is not None:
        slices = int(np.prod(q.shape[:-2])) if q.ndim > 2 else 1
        diag.mac_count += 2 * slices * n * n * dk
        diag.wall_ms += (time.perf_counter() - t0) * 1e3
    return out


def sparsity_measure(q: np.ndarray, k_subset: np.ndarray) -> np.ndarray:
    """Max-minus-mean of scaled dot products of each query over ``k_subset``.

    ``q`` is ``[..., T, d_k]`` and ``k_subset`` ``[..., U, d_k]``; returns
    ``[..., T]``.
    """
    q = np.asarray(q.data if isinstance(q, Tensor) else q)
    ks = np.asarray(k_subset.data if isinstance(k_subset, Tensor) else k_subset)
    if ks.shape[-2] == 0:
        raise ValueError("sparsity measure needs at least one key")
    c = 1.0 / math.sqrt(q.shape[-1])
    s_max = (q @ np.swapaxes(ks, -1, -2)).max(axis=-1)
    # mean_j(q . k_j) == q . mean_j(k_j)
    s_mean = (q @ ks.mean(axis=-2)[..., None])[..., 0]
    return c * (s_max - s_mean)


def sample_keys(shape_lead: tuple, seq_len: int, n_keys: int,
                rng: np.random.Generator) -> np.ndarray:
    """Sorted key indices drawn without replacement, one draw per slice."""
    n_slices = int(np.prod(shape_lead)) if shape_lead else 1
    out = np.empty((n_slices, n_keys), dtype=np.intp)
    for i in range(n_slices):
        out[i] = np.sort(rng.choice(seq_len, size=n_keys, replace=False))
    return out.reshape(tuple(shape_lead) + (n_keys,))


def select_top(measure: np.ndarray, u: int) -> np.ndarray:
    """Indices of the ``u`` largest measures per slice, ties to the lower index,
    returned in ascending order."""
    order = np.argsort(-measure, axis=-1, kind="stable")[..., :u]
    return np.sort(order, axis=-1)


def probsparse_attention(q: Tensor, k: Tensor, v: Tensor, u: int,
                         sampled: bool = False, c: float = 5.0,
                         rng: np.random.Generator | None = None,
                         diag: AttentionDiagnostics | None = None) -> Tensor:
    """Attention computed only for the top-``u`` queries by sparsity measure.

    With ``sampled=True`` the measure uses ``ceil(c ln T)`` random keys per
    head (shared across the batch axis when ``q`` is 4-d); otherwise it uses
    all keys.  Unselected rows are set to the time-mean of ``v``.
    """
    _check_qkv(q, k, v)
    n, dk = q.shape[-2], q.shape[-1]
    if not 1 <= u <= n:
        raise ValueError(f"u must lie in [1, {n}], got {u}")
    t0 = time.perf_counter()
    lead = q.shape[:-2]
    slices = int(np.prod(lead)) if lead else 1

    if sampled:
        if rng is None:
            raise ValueError("sampled measure needs an rng")
        n_keys = top_u(n, c)
        head_lead = lead[1:] if len(lead) >= 2 else lead
        key_idx = sample_keys(head_lead, n, n_keys, rng)
        key_idx = np.broadcast_to(key_idx, lead + (n_keys,))
        ks = np.take_along_axis(k.data, key_idx[..., None], axis=-2)
    else:
        n_keys = n
        ks = k.data
    measure = sparsity_measure(q.data, ks)
    sel = select_top(measure, u)

    top_out = T.attend(T.gather_rows(q, sel), k, v)
    lazy = T.broadcast_rows(T.mean(v, axis=-2, keepdims=True), n)
    out = T.put_rows(lazy, sel, top_out)

    if diag is not None:
        diag.selected = sel
        diag.measure = measure
        diag.mac_count += slices * (n * n_keys * dk + 2 * u * n * dk + n * dk)
        diag.wall_ms += (time.perf_counter() - t0) * 1e3
    return out


# -- encoder -------------------------------------------------------------------
def init_encoder(params: Params, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    init_linear(params, "embed", cfg.n_channels, d, rng, bias=False)
    for layer in range(cfg.n_layers):
        p = f"enc.{layer}"
        for proj in ("q", "k", "v", "o"):
            init_linear(params, f"{p}.attn.{proj}", d, d, rng)
        init_linear(params, f"{p}.ff.0", d, cfg.d_ff, rng)
        init_linear(params, f"{p}.ff.1", cfg.d_ff, d, rng)
        for ln in ("ln1", "ln2"):
            params[f"{p}.{ln}.gain"] = Tensor(np.ones(d), requires_grad=True, name=f"{p}.{ln}.gain")
            params[f"{p}.{ln}.bias"] = Tensor(np.zeros(d), requires_grad=True, name=f"{p}.{ln}.bias")


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dk))


def multihead_attention(x: Tensor, params: Params, prefix: str, cfg: EncoderConfig,
                        rng: np.random.Generator | None,
                        diag: AttentionDiagnostics | None = None) -> Tensor:
    q = _split_heads(apply_linear(x, params, f"{prefix}.q"), cfg.n_heads)
    k = _split_heads(apply_linear(x, params, f"{prefix}.k"), cfg.n_heads)
    v = _split_heads(apply_linear(x, params, f"{prefix}.v"), cfg.n_heads)
    if cfg.attention_mode == "exact_full":
        a = full_attention(q, k, v, diag)
    else:
        u = min(cfg.u, x.shape[1])
        a = probsparse_attention(q, k, v, u,
                                 sampled=cfg.attention_mode == "probsparse_sampled_measure",
                                 c=cfg.sampling_factor, rng=rng, diag=diag)
    return apply_linear(_merge_heads(a), params, f"{prefix}.o")


def encoder_layer(x: Tensor, params: Params, layer: int, cfg: EncoderConfig,
                  rng: np.random.Generator | None,
                  diag: AttentionDiagnostics | None = None) -> Tensor:
    p = f"enc.{layer}"
    a = multihead_attention(x, params, f"{p}.attn", cfg, rng, diag)
    x = T.layer_norm(T.add(x, a), params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
    f = apply_linear(T.relu(apply_linear(x, params, f"{p}.ff.0")), params, f"{p}.ff.1")
    return T.layer_norm(T.add(x, f), params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])


def encoder_forward(x, params: Params, cfg: EncoderConfig,
                    rng: np.random.Generator | None = None,
                    trace: EncoderTrace | None = None) -> Tensor:
    """Encode epochs ``[C, T]`` or ``[B, C, T]`` into ``[d_model]`` / ``[B, d_model]``."""
    arr = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    h = temporal_embed(arr, params, cfg)
    for layer in range(cfg.n_layers):
        diag = AttentionDiagnostics() if trace is not None else None
        h = encoder_layer(h, params, layer, cfg, rng, diag)
        if trace is not None:
            trace.layers.append(diag)
    pooled = T.mean(h, axis=1)
    return T.reshape(pooled, (cfg.d_model,)) if single else pooled


# -- scaling benchmark ------------------------------------------------------------
@dataclass
class BenchRow:
    mode: str
    seq_len: int
    u: int
    mac_count: int
    wall_ms: float


def attention_benchmark(lengths, modes=("exact_full", "probsparse_sampled_measure"),
                        d_model: int = 64, n_heads: int = 8, c: float = 5.0,
                        seed: int = 0) -> list[BenchRow]:
    """Multiply-accumulate counts and wall time of one attention step on
    random ``Q, K, V`` for each sequence length.  Heads run one at a time so
    the dense ``T x T`` score matrix of a single head is the memory peak."""
    if d_model % n_heads:
        raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown attention mode {m!r}")
    dk = d_model // n_heads
    rows = []
    with T.no_grad():
        for n in lengths:
            if n < 2:
                raise ValueError(f"sequence length must be >= 2, got {n}")
            data_rng = T.make_rng(seed)
            q, k, v = (data_rng.standard_normal((n_heads, n, dk)) for _ in range(3))
            for mode in modes:
                rng = T.make_rng(seed + 1)
                diag = AttentionDiagnostics()
                u = n if mode == "exact_full" else top_u(n, c)
                for h in range(n_heads):
                    qh, kh, vh = Tensor(q[h]), Tensor(k[h]), Tensor(v[h])
                    if mode == "exact_full":
                        full_attention(qh, kh, vh, diag)
                    else:
                        probsparse_attention(qh, kh, vh, u, mode == "probsparse_sampled_measure",
                                             c, rng, diag)
                rows.append(BenchRow(mode, n, u, diag.mac_count, diag.wall_ms))
    return rows
