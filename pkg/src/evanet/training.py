"""Optimisation and evaluation harness: AdamW, cosine schedule, early
stopping, subject-level k-fold cross-validation and regression metrics."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import EpochSet
from .model import (ModelConfig, forward_train, init_params, predict_batched,
                    save_params, set_target_scaling)
from .tensor import Tensor

log = logging.getLogger(__name__)


# -- optimiser -----------------------------------------------------------------
class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: Mapping[str, Tensor], weight_decay: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise RuntimeError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]!r}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params: Mapping[str, Tensor], opt: AdamW, lr: float) -> None:
    opt.step(lr)


def cosine_lr(epoch: float, total_epochs: int = 200, base_lr: float = 1e-4,
              min_lr: float = 0.0) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * epoch / total_epochs))


def early_stop(val_history: Sequence[float], patience: int = 20) -> bool:
    """True once the best loss is ``patience`` epochs old (strict improvement
    only counts)."""
    if not val_history:
        raise ValueError("validation history is empty")
    best_idx, best = 0, val_history[0]
    for i, v in enumerate(val_history):
        if v < best:
            best_idx, best = i, v
    return len(val_history) - 1 - best_idx >= patience


# -- splitting and metrics ----------------------------------------------------------
def kfold_split(subject_ids: Sequence[str], k: int = 10, seed: int = 0):
    """Random subject-level partition into ``k`` folds of near-equal size.

    Returns a list of ``(train_ids, test_ids)``.
    """
    ids = list(dict.fromkeys(subject_ids))
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    if k > len(ids):
        raise ValueError(f"k={k} folds but only {len(ids)} subjects")
    order = T.make_rng(seed).permutation(len(ids))
    chunks = np.array_split(order, k)
    out = []
    for i, chunk in enumerate(chunks):
        test = [ids[j] for j in sorted(chunk)]
        test_set = set(test)
        train = [s for s in ids if s not in test_set]
        out.append((train, test))
    return out


def regression_metrics(preds, targets) -> tuple[float, float, float]:
    """MAE, RMSE and R^2 (NaN when the targets have zero variance)."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError(f"need equal non-empty inputs, got {p.shape} and {t.shape}")
    d = p - t
    mae = float(np.mean(np.abs(d)))
    rmse = float(np.sqrt(np.mean(d * d)))
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    r2 = float("nan") if ss_tot == 0 else 1.0 - float(np.sum(d * d)) / ss_tot
    return mae, rmse, r2


def subject_means(subjects: np.ndarray, values: np.ndarray) -> dict[str, float]:
    out: dict[str, list] = {}
    for s, v in zip(subjects, values):
        out.setdefault(str(s), []).append(v)
    return {s: float(np.mean(v)) for s, v in out.items()}


# -- training -----------------------------------------------------------------------
@dataclass
class TrainConfig:
    max_epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 1e-5
    patience: int = 20
    k_folds: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    # epochs drawn (uniformly, without replacement) per pass; None uses all
    epochs_per_pass: Optional[int] = None
    val_epochs_per_subject: Optional[int] = None
    normalize_targets: bool = True
    workers: int = 1


@dataclass
class FoldReport:
    fold: int
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    test_mae: float = float("nan")
    test_rmse: float = float("nan")
    test_r2: float = float("nan")
    epoch_mae: float = float("nan")
    epoch_rmse: float = float("nan")
    epoch_r2: float = float("nan")
    best_checkpoint: str = ""
    best_epoch: int = 0
    stopped_epoch: int = 0
    n_train_subjects: int = 0
    n_test_subjects: int = 0
    seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _pick_epochs(n: int, per_pass: Optional[int], rng: np.random.Generator) -> np.ndarray:
    """Shuffled epoch indices for one training pass."""
    if per_pass is None or per_pass >= n:
        return rng.permutation(n)
    return rng.choice(n, size=per_pass, replace=False)


def _fixed_val_subset(es: EpochSet, per_subject: Optional[int]) -> EpochSet:
    if per_subject is None:
        return es
    counts: dict[str, int] = {}
    keep = []
    for i, s in enumerate(es.subject):
        if counts.get(s, 0) < per_subject:
            keep.append(i)
            counts[s] = counts.get(s, 0) + 1
    return es.take(keep)


def optimizer_params(params, cfg: ModelConfig) -> dict[str, Tensor]:
    skip = ("vib.logvar.",) if cfg.no_vib else ()
    return {k: p for k, p in params.items() if p.requires_grad and not k.startswith(skip)}


def train_model(train: EpochSet, val: EpochSet | None, model_cfg: ModelConfig,
                train_cfg: TrainConfig, seed: int, checkpoint: str | Path | None = None):
    """Train from scratch; returns ``(best_params, train_history, val_history,
    best_epoch, stopped_epoch)``.  Epoch numbers are 1-based."""
    params = init_params(model_cfg, seed)
    if train_cfg.normalize_targets:
        subj_age = np.array(list(train.subject_ages().values()))
        set_target_scaling(params, subj_age.mean(), max(subj_age.std(), 1.0))
    opt = AdamW(optimizer_params(params, model_cfg), weight_decay=train_cfg.weight_decay)
    rng = T.make_rng(seed ^ 0x5EED)
    val_es = _fixed_val_subset(val, train_cfg.val_epochs_per_subject) if val is not None else None

    train_hist, val_hist = [], []
    best = None
    best_epoch = 0
    stopped = 0
    for epoch in range(train_cfg.max_epochs):
        lr = cosine_lr(epoch, train_cfg.max_epochs, train_cfg.lr, train_cfg.min_lr)
        idx = _pick_epochs(len(train), train_cfg.epochs_per_pass, rng)
        sums = np.zeros(4)
        n_seen = 0
        for start in range(0, len(idx), train_cfg.batch_size):
            b = idx[start:start + train_cfg.batch_size]
            out = forward_train(train.x[b], train.age[b], params, model_cfg, rng)
            opt.zero_grad()
            out.total.backward()
            opt.step(lr)
            sums += len(b) * np.array([out.l_pred, out.l_ib, out.l_align, out.l_total])
            n_seen += len(b)
        rec = dict(zip(("l_pred", "l_ib", "l_align", "l_total"), (sums / n_seen).tolist()))
        rec["lr"] = lr
        train_hist.append(rec)
        stopped = epoch + 1

        if val_es is not None and len(val_es):
            yh, _, _ = predict_batched(val_es.x, val_es.age, params, model_cfg)
            val_hist.append(float(np.mean((yh - val_es.age) ** 2)))
            improved = best is None or val_hist[-1] < min(val_hist[:-1], default=math.inf)
        else:
            improved = True
        if improved:
            best = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                    for k, v in params.items()}
            best_epoch = epoch + 1
        log.info("epoch %d lr=%.2e train=%.3f val=%s", epoch + 1, lr, rec["l_pred"],
                 f"{val_hist[-1]:.3f}" if val_hist else "-")
        if val_hist and early_stop(val_hist, train_cfg.patience):
            break

    if checkpoint is not None:
        save_params(best, checkpoint)
    return best, train_hist, val_hist, best_epoch, stopped


def evaluate(params, es: EpochSet, model_cfg: ModelConfig):
    """Subject-level and epoch-level predictions for ``es``."""
    yh, z, p = predict_batched(es.x, es.age, params, model_cfg)
    return yh, z, p


def _run_fold(args):
    fold, train_ids, test_ids, dataset, model_cfg, train_cfg, run_dir = args
    t0 = time.perf_counter()
    seed = train_cfg.seed * 1000 + fold
    rng = T.make_rng(seed ^ 0xF01D)
    ids = list(train_ids)
    n_val = max(1, int(round(train_cfg.val_fraction * len(ids)))) if train_cfg.val_fraction > 0 else 0
    perm = rng.permutation(len(ids))
    val_ids = sorted(ids[i] for i in perm[:n_val])
    fit_ids = sorted(ids[i] for i in perm[n_val:])
    train_es = dataset.for_subjects(fit_ids)
    val_es = dataset.for_subjects(val_ids) if val_ids else None
    test_es = dataset.for_subjects(test_ids)

    ckpt = Path(run_dir) / "checkpoints" / f"fold_{fold}.evaw" if run_dir else None
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
    params, th, vh, best_epoch, stopped = train_model(train_es, val_es, model_cfg, train_cfg,
                                                      seed, ckpt)
    yh, _, _ = evaluate(params, test_es, model_cfg)
    emae, ermse, er2 = regression_metrics(yh, test_es.age)
    pred_s = subject_means(test_es.subject, yh)
    ages = test_es.subject_ages()
    subj = sorted(pred_s)
    mae, rmse, r2 = regression_metrics([pred_s[s] for s in subj], [ages[s] for s in subj])
    report = FoldReport(fold=fold, train_losses=th, val_losses=vh, test_mae=mae, test_rmse=rmse,
                        test_r2=r2, epoch_mae=emae, epoch_rmse=ermse, epoch_r2=er2,
                        best_checkpoint=str(ckpt) if ckpt else "", best_epoch=best_epoch,
                        stopped_epoch=stopped, n_train_subjects=len(fit_ids),
                        n_test_subjects=len(test_ids), seconds=time.perf_counter() - t0)
    preds = [(s, ages[s], pred_s[s]) for s in subj]
    return report, preds, params


@dataclass
class CVResult:
    folds: list
    predictions: list  # (fold, subject, age, predicted)
    params: list = field(default_factory=list, repr=False)

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for key in ("test_mae", "test_rmse", "test_r2", "epoch_mae", "epoch_rmse", "epoch_r2"):
            vals = np.array([getattr(f, key) for f in self.folds])
            out[key] = (float(vals.mean()), float(vals.std()))
        return out


def run_cv(dataset: EpochSet, model_cfg: ModelConfig, train_cfg: TrainConfig,
           run_dir: str | Path | None = None, keep_params: bool = False) -> CVResult:
    """Subject-level k-fold cross-validation; writes ``folds.jsonl``,
    ``summary.csv`` and ``predictions.csv`` into ``run_dir`` when given."""
    splits = kfold_split(dataset.subjects, train_cfg.k_folds, train_cfg.seed)
    for train_ids, test_ids in splits:
        if set(train_ids) & set(test_ids):
            raise AssertionError("subject leakage between train and test folds")
    jobs = [(i, tr, te, dataset, model_cfg, train_cfg, run_dir) for i, (tr, te) in enumerate(splits)]
    results = []
    if train_cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=train_cfg.workers) as pool:
            futures = [pool.submit(_run_fold, j) for j in jobs]
            for i, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as err:
                    raise RuntimeError(f"fold {i} failed: {err}") from err
    else:
        for j in jobs:
            try:
                results.append(_run_fold(j))
            except Exception as err:
                raise RuntimeError(f"fold {j[0]} failed: {err}") from err
    folds = [r[0] for r in results]
    preds = [(f.fold, s, a, p) for f, (_, pr, _) in zip(folds, results) for (s, a, p) in pr]
    res = CVResult(folds, preds, [r[2] for r in results] if keep_params else [])
    if run_dir is not None:
        write_cv_outputs(res, run_dir)
    return res


def write_cv_outputs(res: CVResult, run_dir) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "folds.jsonl", "w") as fh:
        for f in res.folds:
            fh.write(f.to_json() + "\n")
    with open(run_dir / "summary.csv", "w") as fh:
        fh.write("fold,mae,rmse,r2\n")
        for f in res.folds:
            fh.write(f"{f.fold},{f.test_mae!r},{f.test_rmse!r},{f.test_r2!r}\n")
        s = res.summary()
        fh.write(f"mean,{s['test_mae'][0]!r},{s['test_rmse'][0]!r},{s['test_r2'][0]!r}\n")
        fh.write(f"std,{s['test_mae'][1]!r},{s['test_rmse'][1]!r},{s['test_r2'][1]!r}\n")
    with open(run_dir / "predictions.csv", "w") as fh:
        fh.write("fold,subject_id,age,pred\n")
        for fold, s, a, p in res.predictions:
            fh.write(f"{fold},{s},{a!r},{p!r}\n")
