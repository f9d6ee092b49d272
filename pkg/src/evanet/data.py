"""EEG epochs, on-disk formats, epoching with amplitude rejection, and a
seedable synthetic cohort generator.

Epoch files are little-endian::

    b"EVAE"  u16 version  u16 n_channels  u32 n_samples  f32 samples[C*T]

with channels as the outer (slow) axis.  Samples are volts.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

N_CHANNELS = 19
N_SAMPLES = 1000
SAMPLE_RATE = 250.0
REJECT_UV = 150.0
LABELS = ("healthy", "mci", "ad")
CHANNELS = ("Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz",
            "C4", "T4", "T5", "P3", "Pz", "P4", "T6", "O1", "O2")

EPOCH_MAGIC = b"EVAE"
EPOCH_VERSION = 1
_HEADER = struct.Struct("<4sHHI")
MANIFEST_HEADER = ("subject_id", "age", "label", "epoch_file")


class EpochFormatError(ValueError):
    """Malformed epoch file; carries the byte offset of the problem."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (offset {offset})")
        self.offset = offset


class ManifestError(ValueError):
    """Invalid cohort manifest."""


def peak_to_peak(samples: np.ndarray) -> np.ndarray:
    """Per-channel peak-to-peak amplitude (same units as ``samples``)."""
    return samples.max(axis=-1) - samples.min(axis=-1)


@dataclass(eq=False)
class EegEpoch:
    subject_id: str
    age: float
    label: str
    samples: np.ndarray
    sample_rate: float = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (N_CHANNELS, N_SAMPLES):
            raise ValueError(f"epoch must be {N_CHANNELS}x{N_SAMPLES}, got {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise ValueError("epoch contains non-finite samples")
        if not self.age > 0:
            raise ValueError(f"age must be positive, got {self.age}")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")


# -- epoching -------------------------------------------------------------------
def epoch_and_reject(continuous: np.ndarray, window: int = N_SAMPLES,
                     threshold_uv: float = REJECT_UV, *, subject_id: str = "subject",
                     age: float = 1.0, label: str = "healthy") -> list[EegEpoch]:
    """Cut a ``[C, N]`` recording (volts) into consecutive non-overlapping
    windows, dropping any window whose peak-to-peak on any channel exceeds
    ``threshold_uv`` microvolts.  A trailing partial window is discarded."""
    x = np.asarray(continuous, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a [channels, samples] matrix, got shape {x.shape}")
    n = x.shape[1]
    if n < window:
        log.warning("recording has %d samples, shorter than one %d-sample window", n, window)
        return []
    limit = threshold_uv * 1e-6
    out = []
    for k in range(n // window):
        seg = x[:, k * window:(k + 1) * window]
        if peak_to_peak(seg).max() > limit:
            continue
        out.append(EegEpoch(subject_id, age, label, seg.copy()))
    return out


# -- epoch files -----------------------------------------------------------------
def write_epoch(epoch: EegEpoch | np.ndarray, path) -> None:
    samples = epoch.samples if isinstance(epoch, EegEpoch) else np.asarray(epoch)
    c, t = samples.shape
    header = _HEADER.pack(EPOCH_MAGIC, EPOCH_VERSION, c, t)
    Path(path).write_bytes(header + np.ascontiguousarray(samples, dtype="<f4").tobytes())


def read_epoch_samples(path) -> np.ndarray:
    """Raw ``[C, T]`` float64 samples of an epoch file."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise EpochFormatError(f"{path}: truncated header", len(buf))
    magic, version, c, t = _HEADER.unpack_from(buf, 0)
    if magic != EPOCH_MAGIC:
        raise EpochFormatError(f"{path}: bad magic {magic!r}", 0)
    if version != EPOCH_VERSION:
        raise EpochFormatError(f"{path}: unsupported version {version}", 4)
    if c != N_CHANNELS or t != N_SAMPLES:
        raise EpochFormatError(f"{path}: shape {c}x{t}, expected {N_CHANNELS}x{N_SAMPLES}", 6)
    expected = _HEADER.size + 4 * c * t
    if len(buf) != expected:
        raise EpochFormatError(f"{path}: payload is {len(buf) - _HEADER.size} bytes, "
                               f"expected {4 * c * t}", min(len(buf), expected))
    arr = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(c, t)
    return arr.astype(np.float64)


def read_epoch(path, subject_id: str = "unknown", age: float = 1.0,
               label: str = "healthy") -> EegEpoch:
    return EegEpoch(subject_id, age, label, read_epoch_samples(path))


# -- manifests ---------------------------------------------------------------------
@dataclass
class ManifestRow:
    subject_id: str
    age: float
    label: str
    epoch_file: str


@dataclass
class CohortManifest:
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen: dict[tuple[str, str], int] = {}
        ages: dict[str, float] = {}
        for i, r in enumerate(self.rows, start=1):
            key = (r.subject_id, r.epoch_file)
            if key in seen:
                raise ManifestError(f"row {i}: duplicate entry for subject {r.subject_id!r}, "
                                    f"file {r.epoch_file!r} (first seen at row {seen[key]})")
            seen[key] = i
            if not r.age > 0:
                raise ManifestError(f"row {i}: age must be positive, got {r.age}")
            if r.label not in LABELS:
                raise ManifestError(f"row {i}: unknown label {r.label!r}")
            if ages.setdefault(r.subject_id, r.age) != r.age:
                raise ManifestError(f"row {i}: subject {r.subject_id!r} listed with two ages")

    @property
    def subjects(self) -> list[str]:
        return list(dict.fromkeys(r.subject_id for r in self.rows))

    def counts(self) -> dict[str, int]:
        out = {lab: 0 for lab in LABELS}
        for sid in self.subjects:
            out[self.label_of(sid)] += 1
        return out

    def label_of(self, subject_id: str) -> str:
        return next(r.label for r in self.rows if r.subject_id == subject_id)

    def path_of(self, row: ManifestRow) -> Path:
        p = Path(row.epoch_file)
        return p if p.is_absolute() else self.root / p


def save_manifest(manifest: CohortManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for r in manifest.rows:
            w.writerow([r.subject_id, repr(float(r.age)), r.label, r.epoch_file])


def load_manifest(path) -> CohortManifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        rows = []
        for i, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != 4:
                raise ManifestError(f"{path}: row {i} has {len(rec)} fields, expected 4")
            try:
                age = float(rec[1])
            except ValueError:
                raise ManifestError(f"{path}: row {i}: bad age {rec[1]!r}") from None
            rows.append(ManifestRow(rec[0], age, rec[2], rec[3]))
    try:
        return CohortManifest(rows, root=path.parent)
    except ManifestError as err:
        raise ManifestError(f"{path}: {err}") from None


# -- in-memory dataset --------------------------------------------------------------
@dataclass
class EpochSet:
    """Epochs stacked for batched training/evaluation.

    ``x`` is ``[N, C, T]`` float32 volts (exactly the on-disk precision).
    """
    x: np.ndarray
    subject: np.ndarray
    age: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.age)

    @property
    def subjects(self) -> list[str]:
        return list(dict.fromkeys(self.subject.tolist()))

    def take(self, idx) -> "EpochSet":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)  # an empty list arrives as float64
        return EpochSet(self.x[idx], self.subject[idx], self.age[idx], self.label[idx])

    def for_subjects(self, ids: Iterable[str]) -> "EpochSet":
        keep = np.isin(self.subject, np.asarray(list(ids), dtype=object))
        return self.take(np.flatnonzero(keep))

    def subject_ages(self) -> dict[str, float]:
        return {s: float(a) for s, a in zip(self.subject, self.age)}

    @staticmethod
    def concat(sets: Sequence["EpochSet"]) -> "EpochSet":
        return EpochSet(np.concatenate([s.x for s in sets]),
                        np.concatenate([s.subject for s in sets]),
                        np.concatenate([s.age for s in sets]),
                        np.concatenate([s.label for s in sets]))

    @staticmethod
    def from_epochs(epochs: Sequence[EegEpoch]) -> "EpochSet":
        return EpochSet(np.stack([e.samples for e in epochs]).astype(np.float32),
                        np.array([e.subject_id for e in epochs], dtype=object),
                        np.array([e.age for e in epochs], dtype=np.float64),
                        np.array([e.label for e in epochs], dtype=object))


def load_epochset(manifest: CohortManifest | str | Path) -> EpochSet:
    if not isinstance(manifest, CohortManifest):
        manifest = load_manifest(manifest)
    n = len(manifest.rows)
    x = np.empty((n, N_CHANNELS, N_SAMPLES), dtype=np.float32)
    for i, r in enumerate(manifest.rows):
        x[i] = read_epoch_samples(manifest.path_of(r))
    return EpochSet(x,
                    np.array([r.subject_id for r in manifest.rows], dtype=object),
                    np.array([r.age for r in manifest.rows], dtype=np.float64),
                    np.array([r.label for r in manifest.rows], dtype=object))


# -- synthetic cohorts ------------------------------------------------------------
@dataclass
class SynthConfig:
    n_subjects: int = 100
    age_min: float = 10.0
    age_max: float = 85.0
    age_mean: float = 44.3
    age_sd: float = 16.0
    epochs_per_subject: int = 30
    seed: int = 0
    pathology_severity: float = 0.0
    label: str | None = None
    id_prefix: str = "sub"

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.epochs_per_subject < 1:
            raise ValueError("epochs_per_subject must be >= 1")
        if self.pathology_severity < 0:
            raise ValueError("pathology_severity must be >= 0")
        if not 0 < self.age_min <= self.age_max:
            raise ValueError(f"need 0 < age_min <= age_max, got {self.age_min}, {self.age_max}")
        if self.label is None:
            s = self.pathology_severity
            self.label = "healthy" if s == 0 else ("mci" if s < 0.75 else "ad")


def _topography(kind: str) -> np.ndarray:
    frontal = {"Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8"}
    posterior = {"T5", "P3", "Pz", "P4", "T6", "O1", "O2"}
    w = {"alpha": (0.3, 0.6, 1.0), "theta": (1.0, 0.7, 0.4)}[kind]
    return np.array([w[0] if ch in frontal else w[2] if ch in posterior else w[1]
                     for ch in CHANNELS])


ALPHA_TOPO = _topography("alpha")
THETA_TOPO = _topography("theta")


def _subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def _draw_age(cfg: SynthConfig, rng: np.random.Generator) -> float:
    """Truncated normal by rejection."""
    if cfg.age_min == cfg.age_max:
        return float(cfg.age_min)
    while True:
        a = rng.normal(cfg.age_mean, cfg.age_sd)
        if cfg.age_min <= a <= cfg.age_max:
            return float(a)


def _powerlaw_noise(rng: np.random.Generator, n_rows: int, n: int, exponent: float,
                    fs: float, anchor_hz: float = 30.0) -> np.ndarray:
    """Gaussian noise with power spectrum ~ f**-exponent, unit power density at
    ``anchor_hz`` (so steeper spectra carry more low-frequency power)."""
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    amp = np.zeros_like(freqs)
    f = np.maximum(freqs[1:], 0.5)
    amp[1:] = (f / anchor_hz) ** (-exponent / 2.0)
    spec = (rng.standard_normal((n_rows, len(freqs)))
            + 1j * rng.standard_normal((n_rows, len(freqs)))) * amp
    x = np.fft.irfft(spec, n=n, axis=-1)
    # unit density at the anchor corresponds to this per-sample std
    return x * math.sqrt(n / 2.0)


def _band_oscillation(rng: np.random.Generator, n: int, fs: float, lo: float, hi: float) -> np.ndarray:
    """Unit-variance band-limited Gaussian process."""
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    mask = (freqs >= lo) & (freqs <= hi)
    spec = (rng.standard_normal(len(freqs)) + 1j * rng.standard_normal(len(freqs))) * mask
    x = np.fft.irfft(spec, n=n)
    return x / (x.std() + 1e-30)


@dataclass
class SubjectParams:
    age: float
    alpha_hz: float
    alpha_uv: float
    theta_uv: float
    exponent: float
    background_uv: float
    noise_uv: float


def subject_params(cfg: SynthConfig, rng: np.random.Generator) -> SubjectParams:
    age = _draw_age(cfg, rng)
    frac = (age - 10.0) / 75.0
    sev = cfg.pathology_severity
    alpha_hz = 11.0 - 2.5 * frac + rng.normal(0.0, 0.2)
    alpha_uv = 9.0 * (1.0 - 0.55 * frac) * math.exp(rng.normal(0.0, 0.06)) * (1.0 - 0.45 * sev)
    theta_uv = 2.5 * (1.0 + 0.4 * frac) * math.exp(rng.normal(0.0, 0.06)) * (1.0 + 1.8 * sev)
    exponent = 1.0 + 1.0 * frac + rng.normal(0.0, 0.05)
    background_uv = 1.5 * math.exp(rng.normal(0.0, 0.05))
    return SubjectParams(age, alpha_hz, alpha_uv, theta_uv, exponent, background_uv, 1.5)


def _synth_epoch(sp: SubjectParams, rng: np.random.Generator, fs: float = SAMPLE_RATE,
                 n: int = N_SAMPLES) -> np.ndarray:
    t = np.arange(n) / fs
    # alpha: one cortical source, small per-channel phase lag, slow envelope
    f = sp.alpha_hz + rng.normal(0.0, 0.1)
    phase = rng.uniform(0, 2 * np.pi)
    lag = rng.normal(0.0, 0.15, size=N_CHANNELS)[:, None]
    env = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.2, 0.5) * t + rng.uniform(0, 2 * np.pi))
    alpha = math.sqrt(2.0) * np.sin(2 * np.pi * f * t + phase + lag) * env
    alpha *= sp.alpha_uv * ALPHA_TOPO[:, None]
    theta = _band_oscillation(rng, n, fs, 4.0, 7.0)[None, :] * sp.theta_uv * THETA_TOPO[:, None]
    shared = _powerlaw_noise(rng, 1, n, sp.exponent, fs)
    local = _powerlaw_noise(rng, N_CHANNELS, n, sp.exponent, fs)
    background = sp.background_uv * (0.6 * shared + 0.8 * local)
    white = rng.normal(0.0, sp.noise_uv, size=(N_CHANNELS, n))
    x_uv = alpha + theta + background + white
    p2p = peak_to_peak(x_uv).max()
    if p2p > 100.0:
        x_uv *= 100.0 / p2p
    # stored precision is float32 on disk; round here so memory == disk
    return (x_uv * 1e-6).astype(np.float32).astype(np.float64)


def synth_subject(cfg: SynthConfig, subject_index: int) -> tuple[float, list[EegEpoch]]:
    """Age and epochs of one synthetic subject; independent of every other
    subject given ``(cfg.seed, subject_index)``."""
    rng = _subject_rng(cfg.seed, subject_index)
    sp = subject_params(cfg, rng)
    sid = f"{cfg.id_prefix}{subject_index:04d}"
    epochs = [EegEpoch(sid, sp.age, cfg.label, _synth_epoch(sp, rng))
              for _ in range(cfg.epochs_per_subject)]
    return sp.age, epochs


def synth_cohort(cfg: SynthConfig, start_index: int = 0) -> EpochSet:
    n, c, t = cfg.n_subjects * cfg.epochs_per_subject, N_CHANNELS, N_SAMPLES
    x = np.empty((n, c, t), dtype=np.float32)
    subj, ages, labels = [], [], []
    k = 0
    for i in range(start_index, start_index + cfg.n_subjects):
        age, epochs = synth_subject(cfg, i)
        for e in epochs:
            x[k] = e.samples
            k += 1
            subj.append(e.subject_id)
            ages.append(age)
            labels.append(e.label)
    return EpochSet(x, np.array(subj, dtype=object), np.array(ages), np.array(labels, dtype=object))


def write_cohort(es: EpochSet, out_dir, manifest_name: str = "manifest.csv") -> Path:
    """Write every epoch to ``out_dir/epochs`` and a manifest beside it."""
    out_dir = Path(out_dir)
    (out_dir / "epochs").mkdir(parents=True, exist_ok=True)
    rows, counter = [], {}
    for i in range(len(es)):
        sid = str(es.subject[i])
        j = counter.get(sid, 0)
        counter[sid] = j + 1
        rel = f"epochs/{sid}_{j:03d}.evae"
        write_epoch(es.x[i], out_dir / rel)
        rows.append(ManifestRow(sid, float(es.age[i]), str(es.label[i]), rel))
    path = out_dir / manifest_name
    save_manifest(CohortManifest(rows, root=out_dir), path)
    return path
