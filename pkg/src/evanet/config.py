"""Run configuration: ``key = value`` files, flag overrides, and the echo
written into every run directory."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .encoder import MODES, EncoderConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad key, bad value, or an invalid combination of settings."""


@dataclass
class RunConfig:
    seed: int = 0
    # encoder
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 8
    d_ff: Optional[int] = None
    sampling_factor: float = 5.0
    attention_mode: str = "probsparse_sampled_measure"
    # bottleneck, prototype, head
    d_latent: int = 64
    beta: float = 1e-3
    gamma: float = 0.7
    no_vib: bool = False
    no_align: bool = False
    logvar_bias_init: float = -6.0
    # optimisation and protocol
    max_epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 1e-5
    patience: int = 20
    folds: int = 10
    val_fraction: float = 0.1
    epochs_per_pass: Optional[int] = None
    val_epochs_per_subject: Optional[int] = None
    workers: Optional[int] = None
    # sweeps: one CV run per (beta, gamma) pair when either grid is set
    beta_grid: list = field(default_factory=list)
    gamma_grid: list = field(default_factory=list)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads,
                             sampling_factor=self.sampling_factor, d_ff=self.d_ff,
                             attention_mode=self.attention_mode)

    def model_config(self, beta: float | None = None, gamma: float | None = None) -> ModelConfig:
        return ModelConfig(encoder=self.encoder_config(), d_latent=self.d_latent,
                           beta=self.beta if beta is None else beta,
                           gamma=self.gamma if gamma is None else gamma,
                           no_vib=self.no_vib, no_align=self.no_align,
                           logvar_bias_init=self.logvar_bias_init)

    def train_config(self, workers: int = 1) -> TrainConfig:
        return TrainConfig(max_epochs=self.max_epochs, batch_size=self.batch_size, lr=self.lr,
                           min_lr=self.min_lr, weight_decay=self.weight_decay,
                           patience=self.patience, k_folds=self.folds,
                           val_fraction=self.val_fraction, seed=self.seed,
                           epochs_per_pass=self.epochs_per_pass,
                           val_epochs_per_subject=self.val_epochs_per_subject,
                           workers=self.workers or workers)

    def validate(self) -> "RunConfig":
        """Raise :class:`ConfigError` on any inconsistent setting."""
        if self.attention_mode not in MODES:
            raise ConfigError(f"attention_mode must be one of {', '.join(MODES)}")
        for name in ("n_layers", "d_model", "n_heads", "d_latent", "max_epochs", "batch_size",
                     "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        betas = self.beta_grid or [self.beta]
        gammas = self.gamma_grid or [self.gamma]
        try:
            for b in betas:
                for g in gammas:
                    self.model_config(b, g)
        except ValueError as err:
            raise ConfigError(str(err)) from None
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}
_HINTS = typing.get_type_hints(RunConfig)


def _coerce(key: str, raw: str) -> Any:
    hint = _HINTS[key]
    text = raw.strip()
    optional = typing.get_origin(hint) is typing.Union and type(None) in typing.get_args(hint)
    if optional:
        if text.lower() in ("", "none"):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is list:
            return [float(v) for v in text.replace(" ", "").split(",") if v]
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, val)
        except ConfigError as err:
            raise ConfigError(f"{source}:{n}: {err}") from None
    return out


def load_config_file(path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def resolve(file_values: Mapping[str, Any] | None = None,
            overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then file values, then flag overrides (``None`` overrides
    are ignored, so unset flags never mask the file)."""
    merged = dict(file_values or {})
    for k, v in (overrides or {}).items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown setting {k!r}")
        if v is not None:
            merged[k] = v
    return RunConfig(**merged).validate()


def _fmt(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig, extra: Mapping[str, Any] | None = None) -> str:
    """Config text that :func:`parse_config_text` reads back to ``cfg``.
    ``extra`` entries (paths and the like) are written as comments."""
    lines = ["# resolved run configuration"]
    for k, v in (extra or {}).items():
        lines.append(f"# {k}: {v}")
    for k, v in dataclasses.asdict(cfg).items():
        lines.append(f"{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"
