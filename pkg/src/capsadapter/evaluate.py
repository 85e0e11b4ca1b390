"""Accuracy and support-set similarity metrics, plus CSV/JSON reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyReport, LengthMismatch, NoCommonClasses
from .features import _atomic_write
from .kernels import _features

REPORT_COLUMNS = ("method", "backbone", "dataset", "support_size", "top1", "similarity", "wall_time_s")


@dataclass
class EvalReport:
    method: str
    backbone: str
    dataset: str
    support_size: int
    top1: float
    per_class: list[float | None] = field(default_factory=list)
    similarity: float | None = None
    wall_time_s: float | None = None


def _check_lengths(logits, labels):
    logits = np.atleast_2d(np.asarray(logits))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.shape[0] != labels.size:
        raise LengthMismatch(f"{labels.size} labels for {logits.shape[0]} logits rows")
    return logits, labels


def predictions(logits) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(np.atleast_2d(np.asarray(logits)), axis=1)


def top1_accuracy(logits, labels) -> float:
    logits, labels = _check_lengths(logits, labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(predictions(logits) == labels))


def per_class_accuracy(logits, labels, n_classes: int) -> list[float | None]:
    """Accuracy per class; ``None`` for classes without test samples."""
    logits, labels = _check_lengths(logits, labels)
    correct = predictions(logits) == labels
    out: list[float | None] = []
    for k in range(n_classes):
        mask = labels == k
        out.append(float(correct[mask].mean()) if mask.any() else None)
    return out


def support_similarity(f_support, support_classes, f_test, test_classes, per_class: bool = True) -> float:
    """Average cosine similarity between support and test features, in percent.

    With ``per_class`` the mean over same-class pairs is taken per class and
    macro-averaged over classes present in both sets; otherwise the mean runs
    over all support/test pairs.
    """
    s = _features(f_support, "f_support")
    t = _features(f_test, "f_test")
    sc = np.asarray(support_classes, dtype=np.int64).reshape(-1)
    tc = np.asarray(test_classes, dtype=np.int64).reshape(-1)
    if sc.size != s.shape[0] or tc.size != t.shape[0]:
        raise LengthMismatch("class lists must match feature rows")
    # mean over pairs of dot products == dot of the two mean vectors
    if not per_class:
        if s.shape[0] == 0 or t.shape[0] == 0:
            raise NoCommonClasses("empty feature set")
        return 100.0 * float(s.mean(axis=0) @ t.mean(axis=0))
    common = np.intersect1d(sc, tc)
    if common.size == 0:
        raise NoCommonClasses("support and test sets share no class")
    sims = [float(s[sc == k].mean(axis=0) @ t[tc == k].mean(axis=0)) for k in common]
    return 100.0 * float(np.mean(sims))


def percent(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{100.0 * x:.2f}"


def format_row(r: EvalReport) -> list[str]:
    return [
        r.method,
        r.backbone,
        r.dataset,
        str(r.support_size),
        percent(r.top1),
        "" if r.similarity is None else f"{r.similarity:.2f}",
        "" if r.wall_time_s is None else f"{r.wall_time_s:.6f}",
    ]


def render_csv(reports: Sequence[EvalReport]) -> str:
    if not reports:
        raise EmptyReport("no reports to emit")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in reports:
        writer.writerow(format_row(r))
    return buf.getvalue()


def render_json(reports: Sequence[EvalReport]) -> str:
    if not reports:
        raise EmptyReport("no reports to emit")
    return json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True) + "\n"


def emit_report(reports: Sequence[EvalReport], path, format: str = "csv") -> None:
    if format == "csv":
        text = render_csv(reports)
    elif format == "json":
        text = render_json(reports)
    else:
        raise ValueError(f"unknown report format {format!r}")
    _atomic_write(Path(path), text.encode())


def load_json_report(path) -> list[EvalReport]:
    return [EvalReport(**d) for d in json.loads(Path(path).read_text())]
