"""Anomaly scores against the normative model and cohort-level statistics.

Two per-subject scores are produced by a frozen model: the Brain-Age Gap
(predicted minus chronological age) and the Prototype Alignment Error (the
Euclidean distance between a latent code and the prototype at the subject's
true age).  Cohorts are compared with Welch's t-test.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .data import LABELS, CohortManifest, EpochSet, load_epochset
from .model import ModelConfig, load_params, predict_batched
from .stats import WelchResult, welch_t_test
from .tensor import ShapeError

PAIRS = (("healthy", "mci"), ("healthy", "ad"), ("mci", "ad"))


def bag(pred, age):
    """Brain-Age Gap ``pred - age``; ages must be positive."""
    a = np.asarray(age, dtype=np.float64)
    if np.any(~(a > 0)):
        raise ValueError(f"chronological age must be positive, got {age!r}")
    out = np.asarray(pred, dtype=np.float64) - a
    return float(out) if out.ndim == 0 else out


def pae(z, proto):
    """Prototype Alignment Error ``||z - proto||_2`` along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    p = np.asarray(proto, dtype=np.float64)
    if z.shape != p.shape:
        raise ShapeError(f"pae: latent {z.shape} and prototype {p.shape} differ")
    out = np.sqrt(np.sum((z - p) ** 2, axis=-1))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SubjectScore:
    subject_id: str
    label: str
    age: float
    pred: float
    bag: float
    pae: float

    def __post_init__(self):
        if self.bag != self.pred - self.age:
            raise ValueError(f"{self.subject_id}: bag must equal pred - age")
        if not self.pae >= 0:
            raise ValueError(f"{self.subject_id}: pae must be non-negative, got {self.pae}")


@dataclass(frozen=True)
class CohortStats:
    label: str
    n: int
    bag_mean: float
    bag_std: float
    pae_mean: float
    pae_std: float


@dataclass(frozen=True)
class PairTest:
    a: str
    b: str
    bag: WelchResult
    pae: WelchResult


@dataclass
class AnomalyReport:
    """Per-subject scores, cohort summaries, pairwise tests and the ordering
    check.  ``tests_omitted`` explains why no tests were run, if so."""
    subjects: list[SubjectScore]
    cohorts: dict[str, CohortStats]
    tests: list[PairTest] = field(default_factory=list)
    tests_omitted: Optional[str] = None
    bag_ordered: Optional[bool] = None
    pae_ordered: Optional[bool] = None

    def subject_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject_id", "label", "age", "pred", "bag", "pae"])
        for s in self.subjects:
            w.writerow([s.subject_id, s.label, repr(s.age), repr(s.pred), repr(s.bag), repr(s.pae)])
        return buf.getvalue()

    def cohort_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "n", "bag_mean", "bag_std", "pae_mean", "pae_std"])
        for c in self.cohorts.values():
            w.writerow([c.label, c.n, repr(c.bag_mean), repr(c.bag_std),
                        repr(c.pae_mean), repr(c.pae_std)])
        return buf.getvalue()

    def violin_csv(self) -> str:
        """Long format, one row per (subject, metric), for violin plots."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "label", "subject_id", "value"])
        for metric in ("bag", "pae"):
            for s in self.subjects:
                w.writerow([metric, s.label, s.subject_id, repr(getattr(s, metric))])
        return buf.getvalue()

    def significance_table(self) -> str:
        lines = ["cohort     n    BAG mean +- sd        PAE mean +- sd"]
        for c in self.cohorts.values():
            lines.append(f"{c.label:<8} {c.n:>4}  {c.bag_mean:8.3f} +- {c.bag_std:7.3f}  "
                         f"{c.pae_mean:8.4f} +- {c.pae_std:7.4f}")
        lines.append("")
        if self.tests_omitted:
            lines.append(f"tests omitted: {self.tests_omitted}")
        else:
            lines.append("pair            metric        t        df          p  status")
            for pt in self.tests:
                for name, r in (("BAG", pt.bag), ("PAE", pt.pae)):
                    lines.append(f"{pt.a + ' vs ' + pt.b:<15} {name:<6} {r.t:9.3f} {r.df:9.2f} "
                                 f"{r.p:10.3e}  {r.status}")
        lines.append("")
        for name, flag in (("BAG", self.bag_ordered), ("PAE", self.pae_ordered)):
            verdict = "n/a" if flag is None else ("yes" if flag else "no")
            lines.append(f"{name} increases healthy < mci < ad: {verdict}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, violin: bool = False) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = {"subjects.csv": self.subject_csv(), "cohorts.csv": self.cohort_csv(),
                 "significance.txt": self.significance_table()}
        if violin:
            files["violin.csv"] = self.violin_csv()
        written = []
        for name, text in files.items():
            (out_dir / name).write_text(text)
            written.append(out_dir / name)
        return written


def score_subjects(es: EpochSet, params: Mapping, cfg: ModelConfig,
                   batch_size: int = 64) -> list[SubjectScore]:
    """Eval-mode scores averaged over each subject's epochs, in order of
    first appearance."""
    if cfg.no_align:
        raise ValueError("PAE needs the prototype network; model was built with no_align")
    if len(es) == 0:
        return []
    pred, z, proto = predict_batched(es.x, es.age, params, cfg, batch_size)
    err = pae(z, proto)
    out = []
    for sid in es.subjects:
        m = es.subject == sid
        age = float(es.age[m][0])
        p = float(np.mean(pred[m]))
        out.append(SubjectScore(sid, str(es.label[m][0]), age, p, p - age, float(np.mean(err[m]))))
    return out


def _cohort(label: str, scores: list[SubjectScore]) -> CohortStats:
    b = np.array([s.bag for s in scores])
    p = np.array([s.pae for s in scores])
    sd = (lambda v: float(v.std(ddof=1)) if len(v) > 1 else 0.0)
    return CohortStats(label, len(scores), float(b.mean()), sd(b), float(p.mean()), sd(p))


def _strictly_increasing(values: list[float]) -> Optional[bool]:
    if len(values) < 2:
        return None
    return all(b > a for a, b in zip(values, values[1:]))


def build_report(scores: list[SubjectScore]) -> AnomalyReport:
    """Summaries, pairwise Welch tests and the ordering check for scored
    subjects (labels from healthy / mci / ad)."""
    groups = {lab: [s for s in scores if s.label == lab] for lab in LABELS}
    cohorts = {lab: _cohort(lab, g) for lab, g in groups.items() if g}
    report = AnomalyReport(scores, cohorts)
    if "healthy" not in cohorts:
        report.tests_omitted = "no healthy subjects"
        return report
    if len(cohorts) == 1:
        report.tests_omitted = "pathological cohort is empty"
        return report
    for a, b in PAIRS:
        if a in cohorts and b in cohorts:
            ga, gb = groups[a], groups[b]
            report.tests.append(PairTest(
                a, b,
                welch_t_test([s.bag for s in ga], [s.bag for s in gb]),
                welch_t_test([s.pae for s in ga], [s.pae for s in gb])))
    present = [cohorts[lab] for lab in LABELS if lab in cohorts]
    report.bag_ordered = _strictly_increasing([c.bag_mean for c in present])
    report.pae_ordered = _strictly_increasing([c.pae_mean for c in present])
    return report


def _as_epochset(src) -> EpochSet:
    if isinstance(src, EpochSet):
        return src
    if isinstance(src, (CohortManifest, str, Path)):
        return load_epochset(src)
    raise TypeError(f"expected an EpochSet, manifest or manifest path, got {type(src).__name__}")


def score_cohorts(checkpoint, healthy, pathological, cfg: ModelConfig,
                  batch_size: int = 64) -> AnomalyReport:
    """Score a healthy and a pathological cohort with a frozen model.

    Parameters
    ----------
    checkpoint : path or mapping
        Checkpoint file, or an already-loaded parameter dict.
    healthy, pathological : EpochSet, CohortManifest or path
        The pathological set may be empty, in which case the report holds
        healthy statistics only and ``tests_omitted`` says why.
    cfg : ModelConfig
        Architecture the checkpoint was trained with.
    """
    params = checkpoint if isinstance(checkpoint, Mapping) else load_params(checkpoint, cfg)
    h = _as_epochset(healthy)
    p = _as_epochset(pathological)
    if len(h) and set(h.label.tolist()) != {"healthy"}:
        raise ValueError("healthy cohort contains non-healthy labels")
    if len(p) and "healthy" in set(p.label.tolist()):
        raise ValueError("pathological cohort contains healthy labels")
    overlap = set(h.subjects) & set(p.subjects)
    if overlap:
        raise ValueError(f"subject(s) in both cohorts, e.g. {sorted(overlap)[0]!r}")
    scores = score_subjects(h, params, cfg, batch_size) + score_subjects(p, params, cfg, batch_size)
    return build_report(scores)
